use std::rc::Rc;

use crate::dtype::Elem;
use crate::ops::{same_dtype, Walker};
use crate::tensor::Tensor;

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn permute_kernel<T: Elem>(a: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let own = contiguous_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
    let strides: Vec<usize> = axes.iter().map(|&ax| own[ax]).collect();
    let rank = out_shape.len();
    if rank > 0 && strides[rank - 1] == 1 {
        let run = out_shape[rank - 1];
        let mut out = Vec::with_capacity(a.len());
        for [off] in Walker::new(&out_shape[..rank - 1], [strides[..rank - 1].to_vec()], [0]) {
            out.extend_from_slice(&a[off..off + run]);
        }
        return out;
    }
    Walker::new(&out_shape, [strides], [0]).map(|[i]| a[i]).collect()
}

/// (outer, axis length, inner) split of `shape` around `axis`.
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn gather_kernel<T: Elem>(a: &[T], shape: &[usize], axis: usize, idx: &[usize]) -> Vec<T> {
    let (outer, len, inner) = split(shape, axis);
    let mut out = Vec::with_capacity(outer * idx.len() * inner);
    for o in 0..outer {
        for &j in idx {
            debug_assert!(j < len);
            let start = (o * len + j) * inner;
            out.extend_from_slice(&a[start..start + inner]);
        }
    }
    out
}

fn scatter_add_kernel<T: Elem>(g: &[T], shape: &[usize], axis: usize, idx: &[usize]) -> Vec<T> {
    let (outer, len, inner) = split(shape, axis);
    let mut out = vec![T::zero(); outer * len * inner];
    let mut src = g.chunks_exact(inner.max(1));
    for o in 0..outer {
        for &j in idx {
            let chunk = src.next().unwrap_or(&[]);
            let start = (o * len + j) * inner;
            for (d, &s) in out[start..start + inner].iter_mut().zip(chunk) {
                *d += s;
            }
        }
    }
    out
}

fn narrow_kernel<T: Elem>(a: &[T], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<T> {
    let (outer, full, inner) = split(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let s = (o * full + start) * inner;
        out.extend_from_slice(&a[s..s + len * inner]);
    }
    out
}

fn unnarrow_kernel<T: Elem>(g: &[T], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<T> {
    let (outer, full, inner) = split(shape, axis);
    let mut out = vec![T::zero(); outer * full * inner];
    for o in 0..outer {
        let d = (o * full + start) * inner;
        let s = o * len * inner;
        out[d..d + len * inner].copy_from_slice(&g[s..s + len * inner]);
    }
    out
}

fn cat_kernel<T: Elem>(parts: &[&[T]], lens: &[usize], outer: usize, inner: usize) -> Vec<T> {
    let total: usize = parts.iter().map(|p| p.len()).sum();
    let mut out = Vec::with_capacity(total);
    for o in 0..outer {
        for (p, &l) in parts.iter().zip(lens) {
            out.extend_from_slice(&p[o * l * inner..(o + 1) * l * inner]);
        }
    }
    out
}

impl Tensor {
    /// Same data under a new shape. Shares the buffer.
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let from = self.shape().to_vec();
        self.view_op("reshape", shape.to_vec(), move || {
            move |g: &Tensor| vec![Some(g.reshape(&from))]
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let shape = self.shape().to_vec();
        assert_eq!(axes.len(), shape.len(), "permute: {axes:?} for {shape:?}");
        let mut seen = vec![false; axes.len()];
        for &a in axes {
            assert!(a < axes.len() && !seen[a], "permute: invalid axes {axes:?}");
            seen[a] = true;
        }
        if axes.iter().enumerate().all(|(i, &a)| i == a) {
            return self.clone();
        }
        let out: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let data = compute!(self.dtype(), [self => a], permute_kernel(a, &shape, axes));
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Tensor::from_op("permute", data, out, &[self], move |_| {
            move |g: &Tensor| vec![Some(g.permute(&inverse))]
        })
    }

    /// Swap two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Tensor {
        let mut axes: Vec<usize> = (0..self.rank()).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Select `indices` along `axis` (indices may repeat).
    pub fn gather(&self, axis: usize, indices: &[usize]) -> Tensor {
        let shape = self.shape().to_vec();
        assert!(axis < shape.len());
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            panic!("gather: index {bad} out of range for axis {axis} of {shape:?}");
        }
        let mut out = shape.clone();
        out[axis] = indices.len();
        let idx: Rc<[usize]> = indices.into();
        let data = compute!(self.dtype(), [self => a], gather_kernel(a, &shape, axis, &idx));
        Tensor::from_op("gather", data, out, &[self], move |_| {
            move |g: &Tensor| {
                let data = compute!(g.dtype(), [g => gv], scatter_add_kernel(gv, &shape, axis, &idx));
                vec![Some(Tensor::from_data(data, shape.clone()))]
            }
        })
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let shape = self.shape().to_vec();
        assert!(
            axis < shape.len() && start + len <= shape[axis],
            "narrow: [{start}, {}) out of range for axis {axis} of {shape:?}",
            start + len
        );
        if start == 0 && len == shape[axis] {
            return self.clone();
        }
        let mut out = shape.clone();
        out[axis] = len;
        let data = compute!(self.dtype(), [self => a], narrow_kernel(a, &shape, axis, start, len));
        Tensor::from_op("narrow", data, out, &[self], move |_| {
            move |g: &Tensor| {
                let data = compute!(g.dtype(), [g => gv], unnarrow_kernel(gv, &shape, axis, start, len));
                vec![Some(Tensor::from_data(data, shape.clone()))]
            }
        })
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn cat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "cat: no tensors");
        if parts.len() == 1 {
            return parts[0].clone();
        }
        let first = parts[0].shape().to_vec();
        for p in parts {
            same_dtype("cat", &parts[0], p);
            assert_eq!(p.rank(), first.len(), "cat: rank mismatch");
            for (ax, (&x, &y)) in p.shape().iter().zip(&first).enumerate() {
                assert!(ax == axis || x == y, "cat: {:?} vs {first:?} on axis {axis}", p.shape());
            }
        }
        let lens: Vec<usize> = parts.iter().map(|p| p.dim(axis)).collect();
        let (outer, _, inner) = split(&first, axis);
        let mut out = first.clone();
        out[axis] = lens.iter().sum();
        let data = match parts[0].dtype() {
            crate::DType::F32 => {
                let slices: Vec<&[f32]> = parts.iter().map(|p| p.f32s()).collect();
                crate::storage::Data::F32(cat_kernel(&slices, &lens, outer, inner))
            }
            crate::DType::F64 => {
                let slices: Vec<&[f64]> = parts.iter().map(|p| p.f64s()).collect();
                crate::storage::Data::F64(cat_kernel(&slices, &lens, outer, inner))
            }
            crate::DType::F16 => {
                let owned: Vec<Vec<f32>> = parts.iter().map(|p| p.to_vec_f32()).collect();
                let slices: Vec<&[f32]> = owned.iter().map(|v| &v[..]).collect();
                crate::storage::Data::from_f32(cat_kernel(&slices, &lens, outer, inner), crate::DType::F16)
            }
        };
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::from_op("cat", data, out, &refs, move |_| {
            move |g: &Tensor| {
                let mut start = 0;
                lens.iter()
                    .map(|&l| {
                        let part = g.narrow(axis, start, l);
                        start += l;
                        Some(part)
                    })
                    .collect()
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::ops::testing::{check_grad, seq};
    use crate::Tensor;

    #[test]
    fn permute_and_reshape() {
        let x = Tensor::from_f32((0..6).map(|v| v as f32).collect(), &[2, 3]);
        assert_eq!(x.transpose(0, 1).to_vec_f32(), vec![0., 3., 1., 4., 2., 5.]);
        let y = Tensor::from_f32((0..24).map(|v| v as f32).collect(), &[2, 3, 4]);
        let p = y.permute(&[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.to_vec_f32()[..6], [0., 4., 8., 12., 16., 20.]);
        let q = y.permute(&[1, 0, 2]);
        assert_eq!(q.to_vec_f32()[..8], [0., 1., 2., 3., 12., 13., 14., 15.]);
    }

    #[test]
    fn gather_narrow_cat() {
        let x = Tensor::from_f32((0..6).map(|v| v as f32).collect(), &[3, 2]);
        assert_eq!(x.gather(0, &[2, 0, 2]).to_vec_f32(), vec![4., 5., 0., 1., 4., 5.]);
        assert_eq!(x.narrow(1, 1, 1).to_vec_f32(), vec![1., 3., 5.]);
        let c = Tensor::cat(&[x.narrow(1, 1, 1), x.narrow(1, 0, 1)], 1);
        assert_eq!(c.to_vec_f32(), vec![1., 0., 3., 2., 5., 4.]);
    }

    #[test]
    fn shape_gradients() {
        let x = seq(&[3, 4, 2], 11);
        check_grad(&[x.clone()], |t| t[0].permute(&[2, 0, 1]).sqr(), 1e-6);
        check_grad(&[x.clone()], |t| t[0].gather(1, &[3, 0, 0, 2]).sqr(), 1e-6);
        check_grad(&[x.clone()], |t| t[0].narrow(1, 1, 2).sqr(), 1e-6);
        check_grad(&[x.clone(), seq(&[3, 1, 2], 5)], |t| Tensor::cat(&[t[0].clone(), t[1].clone()], 1).sqr(), 1e-6);
        check_grad(&[x], |t| t[0].reshape(&[12, 2]).narrow(0, 3, 4).sqr(), 1e-6);
    }
}
