use crate::dtype::Elem;
use crate::ops::same_dtype;
use crate::tensor::Tensor;

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().expect("op needs rank >= 1")
}

fn softmax_kernel<T: Elem>(a: &[T], d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len());
    for row in a.chunks(d) {
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let start = out.len();
        let mut sum = T::zero();
        for &x in row {
            let e = if max == T::neg_infinity() { T::zero() } else { (x - max).exp() };
            sum += e;
            out.push(e);
        }
        let inv = if sum > T::zero() { T::one() / sum } else { T::zero() };
        for v in &mut out[start..] {
            *v *= inv;
        }
    }
    out
}

fn softmax_grad<T: Elem>(y: &[T], g: &[T], d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(y.len());
    for (yr, gr) in y.chunks(d).zip(g.chunks(d)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        out.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    out
}

/// Per-row statistics for the normalization family.
#[derive(Clone, Copy, PartialEq)]
enum Norm {
    /// (x - mean) / sqrt(var + eps)
    Layer,
    /// x / sqrt(mean(x^2) + eps)
    Rms,
    /// x / sqrt(sum(x^2) + eps)
    L2,
}

fn norm_kernel<T: Elem>(kind: Norm, a: &[T], d: usize, eps: f64) -> Vec<T> {
    let eps = T::of(eps);
    let dn = T::of(d as f64);
    let mut out = Vec::with_capacity(a.len());
    for row in a.chunks(d) {
        let mean = if kind == Norm::Layer { row.iter().copied().sum::<T>() / dn } else { T::zero() };
        let ss: T = row.iter().map(|&x| (x - mean) * (x - mean)).sum();
        let denom = match kind {
            Norm::Layer | Norm::Rms => (ss / dn + eps).sqrt(),
            Norm::L2 => (ss + eps).sqrt(),
        };
        let inv = T::one() / denom;
        out.extend(row.iter().map(|&x| (x - mean) * inv));
    }
    out
}

/// Gradient of the un-scaled normalization given normalized output `y`
/// (= xhat), upstream `g`, and the raw input `x`.
fn norm_grad<T: Elem>(kind: Norm, x: &[T], y: &[T], g: &[T], d: usize, eps: f64) -> Vec<T> {
    let dn = T::of(d as f64);
    let eps = T::of(eps);
    let mut out = Vec::with_capacity(x.len());
    for ((xr, yr), gr) in x.chunks(d).zip(y.chunks(d)).zip(g.chunks(d)) {
        match kind {
            Norm::Layer => {
                let mean = xr.iter().copied().sum::<T>() / dn;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let inv = T::one() / (var + eps).sqrt();
                let mg = gr.iter().copied().sum::<T>() / dn;
                let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                out.extend(gr.iter().zip(yr).map(|(&gi, &yi)| inv * (gi - mg - yi * mgy)));
            }
            Norm::Rms | Norm::L2 => {
                let ss: T = xr.iter().map(|&v| v * v).sum();
                let (denom2, scale) = match kind {
                    Norm::Rms => (ss / dn + eps, T::one() / dn),
                    _ => (ss + eps, T::one()),
                };
                let inv = T::one() / denom2.sqrt();
                let gx: T = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                let k = gx * scale * inv / denom2;
                out.extend(gr.iter().zip(xr).map(|(&gi, &xi)| gi * inv - xi * k));
            }
        }
    }
    out
}

/// Zero-padded 3x3 convolution, NHWC input, weight `[3, 3, cin, cout]`.
struct ConvDims {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
}

fn pad_nhwc<T: Elem>(x: &[T], d: &ConvDims) -> Vec<T> {
    let (hp, wp) = (d.h + 2, d.w + 2);
    let mut p = vec![T::zero(); d.n * hp * wp * d.cin];
    for n in 0..d.n {
        for y in 0..d.h {
            let src = ((n * d.h + y) * d.w) * d.cin;
            let dst = ((n * hp + y + 1) * wp + 1) * d.cin;
            p[dst..dst + d.w * d.cin].copy_from_slice(&x[src..src + d.w * d.cin]);
        }
    }
    p
}

fn conv3x3_kernel<T: Elem>(x: &[T], wgt: &[T], d: &ConvDims) -> Vec<T> {
    let padded = pad_nhwc(x, d);
    let wp = d.w + 2;
    let mut out = vec![T::zero(); d.n * d.h * d.w * d.cout];
    for n in 0..d.n {
        for y in 0..d.h {
            let dst = ((n * d.h + y) * d.w) * d.cout;
            for ky in 0..3 {
                for kx in 0..3 {
                    let src = ((n * (d.h + 2) + y + ky) * wp + kx) * d.cin;
                    let tap = (ky * 3 + kx) * d.cin * d.cout;
                    unsafe {
                        T::gemm(
                            d.w,
                            d.cin,
                            d.cout,
                            padded[src..].as_ptr(),
                            d.cin as isize,
                            1,
                            wgt[tap..].as_ptr(),
                            d.cout as isize,
                            1,
                            T::one(),
                            out[dst..].as_mut_ptr(),
                            d.cout as isize,
                            1,
                        );
                    }
                }
            }
        }
    }
    out
}

fn conv3x3_grad_input<T: Elem>(g: &[T], wgt: &[T], d: &ConvDims) -> Vec<T> {
    let wp = d.w + 2;
    let mut padded = vec![T::zero(); d.n * (d.h + 2) * wp * d.cin];
    for n in 0..d.n {
        for y in 0..d.h {
            let src = ((n * d.h + y) * d.w) * d.cout;
            for ky in 0..3 {
                for kx in 0..3 {
                    let dst = ((n * (d.h + 2) + y + ky) * wp + kx) * d.cin;
                    let tap = (ky * 3 + kx) * d.cin * d.cout;
                    // dX[w, cin] += dY[w, cout] * W_tap^T
                    unsafe {
                        T::gemm(
                            d.w,
                            d.cout,
                            d.cin,
                            g[src..].as_ptr(),
                            d.cout as isize,
                            1,
                            wgt[tap..].as_ptr(),
                            1,
                            d.cout as isize,
                            T::one(),
                            padded[dst..].as_mut_ptr(),
                            d.cin as isize,
                            1,
                        );
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(d.n * d.h * d.w * d.cin);
    for n in 0..d.n {
        for y in 0..d.h {
            let src = ((n * (d.h + 2) + y + 1) * wp + 1) * d.cin;
            out.extend_from_slice(&padded[src..src + d.w * d.cin]);
        }
    }
    out
}

fn conv3x3_grad_weight<T: Elem>(x: &[T], g: &[T], d: &ConvDims) -> Vec<T> {
    let padded = pad_nhwc(x, d);
    let wp = d.w + 2;
    let mut out = vec![T::zero(); 9 * d.cin * d.cout];
    for n in 0..d.n {
        for y in 0..d.h {
            let gsrc = ((n * d.h + y) * d.w) * d.cout;
            for ky in 0..3 {
                for kx in 0..3 {
                    let src = ((n * (d.h + 2) + y + ky) * wp + kx) * d.cin;
                    let tap = (ky * 3 + kx) * d.cin * d.cout;
                    // dW_tap[cin, cout] += X_shift^T[cin, w] * dY[w, cout]
                    unsafe {
                        T::gemm(
                            d.cin,
                            d.w,
                            d.cout,
                            padded[src..].as_ptr(),
                            1,
                            d.cin as isize,
                            g[gsrc..].as_ptr(),
                            d.cout as isize,
                            1,
                            T::one(),
                            out[tap..].as_mut_ptr(),
                            d.cout as isize,
                            1,
                        );
                    }
                }
            }
        }
    }
    out
}

impl Tensor {
    /// Softmax over the last axis. Rows that are entirely `-inf` yield zeros.
    pub fn softmax(&self) -> Tensor {
        let d = last_dim(self);
        let data = compute!(self.dtype(), [self => a], softmax_kernel(a, d));
        Tensor::from_op("softmax", data, self.shape().to_vec(), &[self], move |out| {
            move |g: &Tensor| {
                let data = compute!(g.dtype(), [out => y, g => gv], softmax_grad(y, gv, d));
                vec![Some(Tensor::from_data(data, out.shape().to_vec()))]
            }
        })
    }

    fn normalize(&self, kind: Norm, eps: f64, name: &'static str) -> Tensor {
        let d = last_dim(self);
        let data = compute!(self.dtype(), [self => a], norm_kernel(kind, a, d, eps));
        let input = self.clone();
        Tensor::from_op(name, data, self.shape().to_vec(), &[self], move |out| {
            move |g: &Tensor| {
                let data = compute!(g.dtype(), [input => x, out => y, g => gv],
                    norm_grad(kind, x, y, gv, d, eps));
                vec![Some(Tensor::from_data(data, input.shape().to_vec()))]
            }
        })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        self.normalize(Norm::Layer, eps, "layer_norm").mul(gamma).add(beta)
    }

    /// Root-mean-square normalization over the last axis:
    /// `gain * x / sqrt(mean(x^2) + eps)`.
    pub fn rms_norm(&self, gain: &Tensor, eps: f64) -> Tensor {
        self.normalize(Norm::Rms, eps, "rms_norm").mul(gain)
    }

    /// `x / sqrt(sum(x^2) + eps)` over the last axis.
    pub fn l2_normalize(&self, eps: f64) -> Tensor {
        self.normalize(Norm::L2, eps, "l2_normalize")
    }

    /// Stride-1, zero-padded 3x3 convolution of an NHWC tensor with weight
    /// `[3, 3, cin, cout]` and optional bias `[cout]`.
    pub fn conv3x3(&self, weight: &Tensor, bias: Option<&Tensor>) -> Tensor {
        same_dtype("conv3x3", self, weight);
        let s = self.shape();
        assert_eq!(s.len(), 4, "conv3x3: expected NHWC input, got {s:?}");
        let ws = weight.shape();
        assert!(
            ws.len() == 4 && ws[0] == 3 && ws[1] == 3 && ws[2] == s[3],
            "conv3x3: weight {ws:?} incompatible with input {s:?}"
        );
        let dims = ConvDims {
            n: s[0],
            h: s[1],
            w: s[2],
            cin: s[3],
            cout: ws[3],
        };
        let out_shape = vec![dims.n, dims.h, dims.w, dims.cout];
        let data = compute!(self.dtype(), [self => x, weight => w], conv3x3_kernel(x, w, &dims));
        let (input, wgt) = (self.clone(), weight.clone());
        let y = Tensor::from_op("conv3x3", data, out_shape, &[self, weight], move |_| {
            move |g: &Tensor| {
                let gx = input.is_tracked().then(|| {
                    let data = compute!(g.dtype(), [g => gv, wgt => w], conv3x3_grad_input(gv, w, &dims));
                    Tensor::from_data(data, input.shape().to_vec())
                });
                let gw = wgt.is_tracked().then(|| {
                    let data = compute!(g.dtype(), [input => x, g => gv], conv3x3_grad_weight(x, gv, &dims));
                    Tensor::from_data(data, wgt.shape().to_vec())
                });
                vec![gx, gw]
            }
        });
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
    fn rms_norm_matches_formula() {
        let x = Tensor::from_f64(vec![3.0, 4.0], &[2]);
        let gain = Tensor::from_f64(vec![1.0, 1.0], &[2]);
        let y = x.rms_norm(&gain, 1e-12).to_vec_f64();
        assert!((y[0] - 3.0 / 12.5f64.sqrt()).abs() < 1e-9);
        assert!((y[1] - 4.0 / 12.5f64.sqrt()).abs() < 1e-9);
        let z = Tensor::zeros(&[4], crate::DType::F64).rms_norm(&Tensor::ones(&[4], crate::DType::F64), 1e-6);
        assert!(z.to_vec_f64().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = seq(&[3, 7], 9).scale(4.0);
        let y = x.softmax().to_vec_f64();
        for row in y.chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let masked = Tensor::from_f64(vec![0.0, f64::NEG_INFINITY, 0.0], &[3]).softmax();
        assert_eq!(masked.to_vec_f64(), vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn normalization_gradients() {
        let x = seq(&[4, 6], 12).scale(2.0);
        let gamma = seq(&[6], 13);
        let beta = seq(&[6], 14);
        check_grad(&[x.clone()], |t| t[0].softmax().mul(&t[0]), 1e-6);
        check_grad(&[x.clone(), gamma.clone(), beta], |t| t[0].layer_norm(&t[1], &t[2], 1e-5).sqr(), 1e-5);
        check_grad(&[x.clone(), gamma], |t| t[0].rms_norm(&t[1], 1e-6).sqr(), 1e-5);
        check_grad(&[x], |t| t[0].l2_normalize(1e-8).mul(&t[0]), 1e-5);
    }

    #[test]
    fn conv3x3_matches_direct_sum_and_gradients() {
        let x = seq(&[2, 4, 5, 3], 20);
        let w = seq(&[3, 3, 3, 2], 21);
        let b = seq(&[2], 22);
        let y = x.conv3x3(&w, Some(&b)).to_vec_f64();
        let (xv, wv, bv) = (x.to_vec_f64(), w.to_vec_f64(), b.to_vec_f64());
        for n in 0..2 {
            for i in 0..4 {
                for j in 0..5 {
                    for co in 0..2 {
                        let mut acc = bv[co];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (yy, xx) = (i as isize + ky as isize - 1, j as isize + kx as isize - 1);
                                if yy < 0 || yy >= 4 || xx < 0 || xx >= 5 {
                                    continue;
                                }
                                for ci in 0..3 {
                                    acc += xv[((n * 4 + yy as usize) * 5 + xx as usize) * 3 + ci]
                                        * wv[((ky * 3 + kx) * 3 + ci) * 2 + co];
                                }
                            }
                        }
                        let got = y[((n * 4 + i) * 5 + j) * 2 + co];
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
        check_grad(&[x, w, b], |t| t[0].conv3x3(&t[1], Some(&t[2])).sqr(), 1e-6);
    }
}
