use crate::dtype::Elem;
use crate::ops::same_dtype;
use crate::tensor::Tensor;

struct Plan {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    /// Stored (rows, cols) of each operand's trailing matrix.
    a_rc: (usize, usize),
    b_rc: (usize, usize),
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
}

fn mm_kernel<T: Elem>(a: &[T], b: &[T], p: &Plan) -> Vec<T> {
    let mut out = vec![T::zero(); p.batch * p.m * p.n];
    let (ra, ca) = p.a_rc;
    let (rb, cb) = p.b_rc;
    let (rsa, csa) = if p.ta { (1, ca as isize) } else { (ca as isize, 1) };
    let (rsb, csb) = if p.tb { (1, cb as isize) } else { (cb as isize, 1) };
    if p.k == 0 {
        return out;
    }
    // A plain (untransposed) batched left operand against a shared right
    // operand collapses into one tall product.
    if p.a_batched && !p.b_batched && !p.ta {
        unsafe {
            T::gemm(
                p.batch * p.m,
                p.k,
                p.n,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                T::zero(),
                out.as_mut_ptr(),
                p.n as isize,
                1,
            );
        }
        return out;
    }
    for i in 0..p.batch {
        let ao = if p.a_batched { i * ra * ca } else { 0 };
        let bo = if p.b_batched { i * rb * cb } else { 0 };
        unsafe {
            T::gemm(
                p.m,
                p.k,
                p.n,
                a[ao..].as_ptr(),
                rsa,
                csa,
                b[bo..].as_ptr(),
                rsb,
                csb,
                T::zero(),
                out[i * p.m * p.n..].as_mut_ptr(),
                p.n as isize,
                1,
            );
        }
    }
    out
}

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.matmul_t(other, false, false)
    }

    /// `op(self) @ op(other)` over the trailing two axes, where `op`
    /// transposes when the matching flag is set. Leading (batch) axes must
    /// agree, or one operand may be a plain matrix shared across the batch.
    pub fn matmul_t(&self, other: &Tensor, ta: bool, tb: bool) -> Tensor {
        same_dtype("matmul", self, other);
        let (ash, bsh) = (self.shape().to_vec(), other.shape().to_vec());
        assert!(ash.len() >= 2 && bsh.len() >= 2, "matmul: need rank >= 2, got {ash:?} @ {bsh:?}");
        let a_rc = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let b_rc = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        let (m, k) = if ta { (a_rc.1, a_rc.0) } else { a_rc };
        let (k2, n) = if tb { (b_rc.1, b_rc.0) } else { b_rc };
        assert_eq!(k, k2, "matmul: inner dims differ for {ash:?} @ {bsh:?} (ta={ta}, tb={tb})");
        let a_batch = &ash[..ash.len() - 2];
        let b_batch = &bsh[..bsh.len() - 2];
        let batch_shape = match (a_batch.is_empty(), b_batch.is_empty()) {
            (_, true) => a_batch.to_vec(),
            (true, false) => b_batch.to_vec(),
            (false, false) => {
                assert_eq!(a_batch, b_batch, "matmul: batch dims differ for {ash:?} @ {bsh:?}");
                a_batch.to_vec()
            }
        };
        let plan = Plan {
            batch: batch_shape.iter().product(),
            a_batched: !a_batch.is_empty(),
            b_batched: !b_batch.is_empty(),
            a_rc,
            b_rc,
            m,
            k,
            n,
            ta,
            tb,
        };
        let data = compute!(self.dtype(), [self => a, other => b], mm_kernel(a, b, &plan));
        let mut out = batch_shape;
        out.extend([m, n]);
        let (lhs, rhs) = (self.clone(), other.clone());
        Tensor::from_op("matmul", data, out, &[self, other], move |_| {
            move |g: &Tensor| {
                let ga = lhs.is_tracked().then(|| {
                    let d = if ta { rhs.matmul_t(g, tb, true) } else { g.matmul_t(&rhs, false, !tb) };
                    d.sum_to(lhs.shape())
                });
                let gb = rhs.is_tracked().then(|| {
                    let d = if rhs.rank() == 2 && lhs.rank() > 2 && !ta {
                        // Fold the batch into rows so the reduction happens in the GEMM.
                        let a2 = lhs.reshape(&[lhs.numel() / a_rc.1, a_rc.1]);
                        let g2 = g.reshape(&[g.numel() / n, n]);
                        if tb { g2.matmul_t(&a2, true, false) } else { a2.matmul_t(&g2, true, false) }
                    } else if tb {
                        g.matmul_t(&lhs, true, ta)
                    } else {
                        lhs.matmul_t(g, !ta, false)
                    };
                    d.sum_to(rhs.shape())
                });
                vec![ga, gb]
            }
        })
    }

    /// `x @ weight^T + bias` with `weight` stored `[out, in]`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Tensor {
        let y = self.matmul_t(weight, false, true);
        match bias {
            Some(b) => y.add(b),
            None => y,
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::ops::testing::{check_grad, seq};
    use crate::Tensor;

    #[test]
    fn small_products() {
        let a = Tensor::from_f32(vec![1., 2., 3., 4., 5., 6.], &[2, 3]);
        let b = Tensor::from_f32(vec![1., 0., 0., 1., 1., 1.], &[3, 2]);
        assert_eq!(a.matmul(&b).to_vec_f32(), vec![4., 5., 10., 11.]);
        assert_eq!(a.matmul_t(&a, false, true).to_vec_f32(), vec![14., 32., 32., 77.]);
        assert_eq!(a.matmul_t(&a, true, false).shape(), &[3, 3]);
    }

    #[test]
    fn matmul_gradients_all_layouts() {
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { seq(&[2, 4, 3], 1) } else { seq(&[2, 3, 4], 1) };
            let b = if tb { seq(&[2, 5, 4], 2) } else { seq(&[2, 4, 5], 2) };
            check_grad(&[a.clone(), b.clone()], |t| t[0].matmul_t(&t[1], ta, tb).sqr(), 1e-6);
            let b2 = if tb { seq(&[5, 4], 3) } else { seq(&[4, 5], 3) };
            check_grad(&[a.clone(), b2.clone()], |t| t[0].matmul_t(&t[1], ta, tb).sqr(), 1e-6);
            let a2 = if ta { seq(&[4, 3], 4) } else { seq(&[3, 4], 4) };
            check_grad(&[a2, b], |t| t[0].matmul_t(&t[1], ta, tb).sqr(), 1e-6);
        }
    }

    #[test]
    fn linear_layer() {
        let x = seq(&[2, 3, 4], 5);
        let w = seq(&[6, 4], 6);
        let b = seq(&[6], 7);
        check_grad(&[x, w, b], |t| t[0].linear(&t[1], Some(&t[2])).sqr(), 1e-6);
    }
}
