use crate::dtype::Elem;
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
enum Un {
    Scale(f64),
    AddScalar(f64),
    Exp,
    Abs,
    Sqr,
    Gelu,
    Silu,
    Sigmoid,
    Clamp(f64, f64),
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

impl Un {
    fn name(self) -> &'static str {
        match self {
            Un::Scale(_) => "scale",
            Un::AddScalar(_) => "add_scalar",
            Un::Exp => "exp",
            Un::Abs => "abs",
            Un::Sqr => "sqr",
            Un::Gelu => "gelu",
            Un::Silu => "silu",
            Un::Sigmoid => "sigmoid",
            Un::Clamp(..) => "clamp",
        }
    }

    #[inline]
    fn f<T: Elem>(self, x: T) -> T {
        let one = T::one();
        match self {
            Un::Scale(c) => x * T::of(c),
            Un::AddScalar(c) => x + T::of(c),
            Un::Exp => x.exp(),
            Un::Abs => x.abs(),
            Un::Sqr => x * x,
            Un::Gelu => {
                let inner = T::of(GELU_C) * (x + T::of(0.044715) * x * x * x);
                T::of(0.5) * x * (one + inner.tanh())
            }
            Un::Silu => x / (one + (-x).exp()),
            Un::Sigmoid => one / (one + (-x).exp()),
            #[allow(clippy::eq_op)]
            Un::Clamp(_, _) if x != x => x,
            Un::Clamp(lo, hi) => x.max(T::of(lo)).min(T::of(hi)),
        }
    }

    /// Derivative given input `x` and output `y`.
    #[inline]
    fn df<T: Elem>(self, x: T, y: T) -> T {
        let one = T::one();
        let zero = T::zero();
        match self {
            Un::Scale(c) => T::of(c),
            Un::AddScalar(_) => one,
            Un::Exp => y,
            Un::Abs => {
                if x > zero {
                    one
                } else if x < zero {
                    -one
                } else {
                    zero
                }
            }
            Un::Sqr => T::of(2.0) * x,
            Un::Gelu => {
                let x2 = x * x;
                let inner = T::of(GELU_C) * (x + T::of(0.044715) * x2 * x);
                let t = inner.tanh();
                let dinner = T::of(GELU_C) * (one + T::of(3.0 * 0.044715) * x2);
                T::of(0.5) * (one + t) + T::of(0.5) * x * (one - t * t) * dinner
            }
            Un::Silu => {
                let s = one / (one + (-x).exp());
                s * (one + x * (one - s))
            }
            Un::Sigmoid => y * (one - y),
            Un::Clamp(lo, hi) => {
                if x >= T::of(lo) && x <= T::of(hi) {
                    one
                } else {
                    zero
                }
            }
        }
    }
}

impl Tensor {
    fn unary(&self, op: Un) -> Tensor {
        let data = compute!(self.dtype(), [self => a], a.iter().map(|&x| op.f(x)).collect());
        let input = self.clone();
        Tensor::from_op(op.name(), data, self.shape().to_vec(), &[self], move |out| {
            move |g: &Tensor| {
                let d = match op {
                    Un::Scale(c) => return vec![Some(g.scale(c))],
                    Un::AddScalar(_) => return vec![Some(g.clone())],
                    _ => {
                        let data = compute!(input.dtype(), [input => x, out => y],
                            x.iter().zip(y).map(|(&x, &y)| op.df(x, y)).collect());
                        Tensor::from_data(data, input.shape().to_vec())
                    }
                };
                vec![Some(g.mul(&d))]
            }
        })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(Un::Scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(Un::AddScalar(c))
    }

    pub fn neg(&self) -> Tensor {
        self.unary(Un::Scale(-1.0))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Un::Exp)
    }

    pub fn abs(&self) -> Tensor {
        self.unary(Un::Abs)
    }

    pub fn sqr(&self) -> Tensor {
        self.unary(Un::Sqr)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        self.unary(Un::Gelu)
    }

    pub fn silu(&self) -> Tensor {
        self.unary(Un::Silu)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(Un::Sigmoid)
    }

    /// Clamp into `[lo, hi]`; the gradient passes where `lo <= x <= hi`.
    /// NaN stays NaN.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(Un::Clamp(lo, hi))
    }

    /// Cast to another storage dtype (gradient is cast back).
    pub fn to_dtype(&self, dtype: crate::DType) -> Tensor {
        if dtype == self.dtype() {
            return self.clone();
        }
        let data = self.data().cast(dtype);
        let from = self.dtype();
        Tensor::from_op("to_dtype", data, self.shape().to_vec(), &[self], move |_| {
            move |g: &Tensor| vec![Some(g.to_dtype(from))]
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::ops::testing::{check_grad, seq};
    use crate::{DType, Tensor};

    #[test]
    fn unary_gradients() {
        let x = seq(&[3, 5], 7).scale(2.0);
        check_grad(&[x.clone()], |t| t[0].exp(), 1e-6);
        check_grad(&[x.clone()], |t| t[0].sqr(), 1e-6);
        check_grad(&[x.clone()], |t| t[0].gelu(), 1e-6);
        check_grad(&[x.clone()], |t| t[0].silu(), 1e-6);
        check_grad(&[x.clone()], |t| t[0].sigmoid(), 1e-6);
        check_grad(&[x.clone()], |t| t[0].scale(-3.0).add_scalar(1.0), 1e-6);
        check_grad(&[x], |t| t[0].abs(), 1e-6);
    }

    #[test]
    fn clamp_bounds_values() {
        let x = Tensor::from_f32(vec![-0.5, 0.25, 1.5], &[3]);
        assert_eq!(x.clamp(0.0, 1.0).to_vec_f32(), vec![0.0, 0.25, 1.0]);
        assert!(Tensor::from_f32(vec![f32::NAN], &[1]).clamp(0.0, 1.0).item().is_nan());
    }

    #[test]
    fn half_precision_rounds_on_store() {
        let x = Tensor::from_f32_as(vec![1.0 / 3.0], &[1], DType::F16);
        let y = x.scale(3.0).to_vec_f32()[0];
        assert!((y - 1.0).abs() < 1e-3);
        assert_eq!(x.size_in_bytes(), 2);
    }
}
