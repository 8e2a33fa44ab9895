use crate::dtype::Elem;
use crate::ops::{broadcast_shape, broadcast_strides, same_dtype, Walker};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

impl Bin {
    #[inline]
    fn apply<T: Elem>(self, a: T, b: T) -> T {
        match self {
            Bin::Add => a + b,
            Bin::Sub => a - b,
            Bin::Mul => a * b,
            Bin::Div => a / b,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Bin::Add => "add",
            Bin::Sub => "sub",
            Bin::Mul => "mul",
            Bin::Div => "div",
        }
    }
}

fn is_suffix(inner: &[usize], outer: &[usize]) -> bool {
    inner.len() <= outer.len() && outer[outer.len() - inner.len()..] == *inner
}

fn kernel<T: Elem>(op: Bin, a: &[T], ash: &[usize], b: &[T], bsh: &[usize], out: &[usize]) -> Vec<T> {
    if ash == bsh {
        return a.iter().zip(b).map(|(&x, &y)| op.apply(x, y)).collect();
    }
    if b.len() == 1 && ash == out {
        let y = b[0];
        return a.iter().map(|&x| op.apply(x, y)).collect();
    }
    if a.len() == 1 && bsh == out {
        let x = a[0];
        return b.iter().map(|&y| op.apply(x, y)).collect();
    }
    if ash == out && is_suffix(bsh, out) && !b.is_empty() {
        let mut v = Vec::with_capacity(a.len());
        for chunk in a.chunks(b.len()) {
            v.extend(chunk.iter().zip(b).map(|(&x, &y)| op.apply(x, y)));
        }
        return v;
    }
    if bsh == out && is_suffix(ash, out) && !a.is_empty() {
        let mut v = Vec::with_capacity(b.len());
        for chunk in b.chunks(a.len()) {
            v.extend(a.iter().zip(chunk).map(|(&x, &y)| op.apply(x, y)));
        }
        return v;
    }
    let walker = Walker::new(out, [broadcast_strides(ash, out), broadcast_strides(bsh, out)], [0, 0]);
    walker.map(|[i, j]| op.apply(a[i], b[j])).collect()
}

impl Tensor {
    fn binary(&self, other: &Tensor, op: Bin) -> Tensor {
        same_dtype(op.name(), self, other);
        let out = broadcast_shape(self.shape(), other.shape()).unwrap_or_else(|| {
            panic!(
                "{}: shapes {:?} and {:?} do not broadcast",
                op.name(),
                self.shape(),
                other.shape()
            )
        });
        let (ash, bsh) = (self.shape().to_vec(), other.shape().to_vec());
        let data = compute!(self.dtype(), [self => a, other => b], kernel(op, a, &ash, b, &bsh, &out));
        let (lhs, rhs) = (self.clone(), other.clone());
        Tensor::from_op(op.name(), data, out, &[self, other], move |_| {
            move |g: &Tensor| {
                let (ga, gb) = match op {
                    Bin::Add => (g.clone(), g.clone()),
                    Bin::Sub => (g.clone(), g.scale(-1.0)),
                    Bin::Mul => (g.mul(&rhs), g.mul(&lhs)),
                    Bin::Div => (
                        g.div(&rhs),
                        g.mul(&lhs).div(&rhs.mul(&rhs)).scale(-1.0),
                    ),
                };
                vec![
                    lhs.is_tracked().then(|| ga.sum_to(lhs.shape())),
                    rhs.is_tracked().then(|| gb.sum_to(rhs.shape())),
                ]
            }
        })
    }

    /// Elementwise sum with NumPy-style broadcasting.
    pub fn add(&self, other: &Tensor) -> Tensor {
        self.binary(other, Bin::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.binary(other, Bin::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.binary(other, Bin::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        self.binary(other, Bin::Div)
    }
}
