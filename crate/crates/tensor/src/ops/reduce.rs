use crate::dtype::Elem;
use crate::ops::{broadcast_strides, Walker};
use crate::tensor::Tensor;

fn sum_axis_kernel<T: Elem>(a: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for l in 0..len {
            let src = &a[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

/// Sum `a` (of shape `from`) down to `to`, where `to` broadcasts to `from`.
fn sum_to_kernel<T: Elem>(a: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    let n: usize = to.iter().product();
    let mut out = vec![T::zero(); n];
    let walker = Walker::new(from, [broadcast_strides(to, from)], [0]);
    for (&v, [j]) in a.iter().zip(walker) {
        out[j] += v;
    }
    out
}

fn broadcast_kernel<T: Elem>(a: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    Walker::new(to, [broadcast_strides(from, to)], [0])
        .map(|[i]| a[i])
        .collect()
}

impl Tensor {
    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum_all(&self) -> Tensor {
        let data = compute!(self.dtype(), [self => a], vec![pairwise_sum(a)]);
        let shape = self.shape().to_vec();
        Tensor::from_op("sum_all", data, vec![], &[self], move |_| {
            move |g: &Tensor| vec![Some(g.broadcast_to(&shape))]
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&self, axis: usize) -> Tensor {
        let shape = self.shape().to_vec();
        assert!(axis < shape.len(), "sum_axis: axis {axis} out of range for {shape:?}");
        let mut out = shape.clone();
        out[axis] = 1;
        let data = compute!(self.dtype(), [self => a], sum_axis_kernel(a, &shape, axis));
        Tensor::from_op("sum_axis", data, out, &[self], move |_| {
            move |g: &Tensor| vec![Some(g.broadcast_to(&shape))]
        })
    }

    /// Reduce by summation to `shape`, which must broadcast to `self.shape()`.
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let from = self.shape().to_vec();
        let to = shape.to_vec();
        let data = compute!(self.dtype(), [self => a], sum_to_kernel(a, &from, &to));
        Tensor::from_op("sum_to", data, to, &[self], move |_| {
            move |g: &Tensor| vec![Some(g.broadcast_to(&from))]
        })
    }

    /// Materialize a broadcast of `self` to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let from = self.shape().to_vec();
        let to = shape.to_vec();
        assert_eq!(
            crate::ops::broadcast_shape(&from, &to).as_deref(),
            Some(&to[..]),
            "broadcast_to: {from:?} does not broadcast to {to:?}"
        );
        let data = compute!(self.dtype(), [self => a], broadcast_kernel(a, &from, &to));
        Tensor::from_op("broadcast_to", data, to, &[self], move |_| {
            move |g: &Tensor| vec![Some(g.sum_to(&from))]
        })
    }
}

/// Fixed-shape pairwise summation; order depends only on the length.
pub(crate) fn pairwise_sum<T: Elem>(a: &[T]) -> T {
    if a.len() <= 64 {
        return a.iter().fold(T::zero(), |s, &x| s + x);
    }
    let mid = a.len() / 2;
    pairwise_sum(&a[..mid]) + pairwise_sum(&a[mid..])
}

#[cfg(test)]
mod tests {
    use crate::ops::testing::{check_grad, seq};
    use crate::Tensor;

    #[test]
    fn axis_sums() {
        let x = Tensor::from_f32((0..24).map(|v| v as f32).collect(), &[2, 3, 4]);
        let s = x.sum_axis(1);
        assert_eq!(s.shape(), &[2, 1, 4]);
        assert_eq!(s.to_vec_f32()[..4], [12., 15., 18., 21.]);
        assert_eq!(x.sum_all().item(), 276.0);
        assert_eq!(x.sum_to(&[4]).to_vec_f32(), vec![60., 66., 72., 78.]);
    }

    #[test]
    fn reduction_gradients() {
        let x = seq(&[2, 3, 4], 3);
        check_grad(&[x.clone()], |t| t[0].sum_axis(2).sqr(), 1e-6);
        check_grad(&[x.clone()], |t| t[0].sum_to(&[3, 1]).sqr(), 1e-6);
        check_grad(&[seq(&[3, 1], 4)], |t| t[0].broadcast_to(&[2, 3, 5]).sqr(), 1e-6);
        check_grad(&[x], |t| t[0].mean_all().sqr(), 1e-6);
    }
}
