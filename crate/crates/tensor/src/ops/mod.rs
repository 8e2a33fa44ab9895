//! Op kernels. Each op computes in `f32` or `f64`; half-precision inputs are
//! widened for the kernel and the result is narrowed on store.

/// Dispatch `$body` over the compute dtype. Each `$t => $s` binds `$s` to the
/// element slice of tensor `$t` (widened to `f32` for half precision). The
/// body must evaluate to a `Vec<T>` of the bound element type.
macro_rules! compute {
    ($dt:expr, [$($t:expr => $s:ident),*], $body:expr) => {
        match $dt {
            $crate::dtype::DType::F32 => {
                $(let $s: &[f32] = $t.f32s();)*
                $crate::storage::Data::F32($body)
            }
            $crate::dtype::DType::F64 => {
                $(let $s: &[f64] = $t.f64s();)*
                $crate::storage::Data::F64($body)
            }
            $crate::dtype::DType::F16 => {
                $(let $s = $t.to_vec_f32(); let $s: &[f32] = &$s;)*
                $crate::storage::Data::from_f32($body, $crate::dtype::DType::F16)
            }
        }
    };
}

mod binary;
mod matmul;
mod nn;
mod reduce;
mod shape;
mod unary;

pub(crate) use shape::contiguous_strides;

pub(crate) fn same_dtype(op: &str, a: &crate::Tensor, b: &crate::Tensor) {
    assert_eq!(
        a.dtype(),
        b.dtype(),
        "{op}: dtype mismatch ({} vs {})",
        a.dtype().name(),
        b.dtype().name()
    );
}

/// Walks a row-major index space, tracking one flat offset per operand.
/// A zero stride broadcasts that operand along the axis.
pub(crate) struct Walker<const N: usize> {
    shape: Vec<usize>,
    strides: [Vec<usize>; N],
    index: Vec<usize>,
    offsets: [usize; N],
    remaining: usize,
}

impl<const N: usize> Walker<N> {
    pub fn new(shape: &[usize], strides: [Vec<usize>; N], base: [usize; N]) -> Self {
        for s in &strides {
            debug_assert_eq!(s.len(), shape.len());
        }
        Walker {
            shape: shape.to_vec(),
            strides,
            index: vec![0; shape.len()],
            offsets: base,
            remaining: shape.iter().product(),
        }
    }
}

impl<const N: usize> Iterator for Walker<N> {
    type Item = [usize; N];

    #[inline]
    fn next(&mut self) -> Option<[usize; N]> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let current = self.offsets;
        if self.remaining > 0 {
            let mut axis = self.shape.len();
            while axis > 0 {
                axis -= 1;
                self.index[axis] += 1;
                for (o, s) in self.offsets.iter_mut().zip(&self.strides) {
                    *o += s[axis];
                }
                if self.index[axis] < self.shape[axis] {
                    break;
                }
                for (o, s) in self.offsets.iter_mut().zip(&self.strides) {
                    *o -= s[axis] * self.shape[axis];
                }
                self.index[axis] = 0;
            }
        }
        Some(current)
    }
}

/// Strides of `shape` right-aligned against `out`, zero where broadcast.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|axis| {
            if axis < lead {
                0
            } else {
                let a = axis - lead;
                if shape[a] == 1 && out[axis] != 1 {
                    0
                } else {
                    own[a]
                }
            }
        })
        .collect()
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

#[cfg(test)]
pub(crate) mod testing {
    use crate::{backward, DType, Tensor};

    /// Central-difference check of `f`'s gradient w.r.t. each input, in f64.
    pub fn check_grad(inputs: &[Tensor], f: impl Fn(&[Tensor]) -> Tensor, tol: f64) {
        let leaves: Vec<Tensor> = inputs.iter().map(|t| t.detach().requires_grad()).collect();
        let out = f(&leaves);
        let grads = backward(&out.sum_all());
        let eps = 1e-6;
        for (i, leaf) in leaves.iter().enumerate() {
            let analytic = grads
                .get(leaf)
                .map(|g| g.to_vec_f64())
                .unwrap_or_else(|| vec![0.0; leaf.numel()]);
            let base = leaf.to_vec_f64();
            for j in 0..base.len() {
                let eval = |delta: f64| {
                    let mut probe: Vec<Tensor> = inputs.iter().map(|t| t.detach()).collect();
                    let mut v = base.clone();
                    v[j] += delta;
                    probe[i] = Tensor::from_f64_as(v, leaf.shape(), DType::F64);
                    f(&probe).sum_all().item()
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let err = (numeric - analytic[j]).abs();
                assert!(
                    err <= tol * (1.0 + numeric.abs()),
                    "input {i} element {j}: analytic {} vs numeric {numeric}",
                    analytic[j]
                );
            }
        }
    }

    pub fn seq(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let values = (0..n)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_f64(values, shape)
    }
}
