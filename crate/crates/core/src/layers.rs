//! Building blocks shared by the encoder and decoder: shifted-window
//! cosine-attention blocks, residual conv blocks and the spatial reshuffles
//! used for merging and expanding.

use haze_tensor::{DType, Tensor};

use crate::config::BackboneKind;
use crate::params::{Bound, Init};

pub const LN_EPS: f64 = 1e-5;
const LOGIT_SCALE_MAX: f64 = 4.605_170_185_988_091; // ln(100)
const SHIFT_MASK: f64 = -100.0;

pub fn linear(p: &Bound, name: &str, x: &Tensor) -> Tensor {
    x.linear(
        p.get(&format!("{name}.weight")),
        p.try_get(&format!("{name}.bias")),
    )
}

pub fn layer_norm(p: &Bound, name: &str, x: &Tensor) -> Tensor {
    x.layer_norm(
        p.get(&format!("{name}.gain")),
        p.get(&format!("{name}.bias")),
        LN_EPS,
    )
}

/// `[N, H, W, C] -> [N, H/r, W/r, r*r*C]`, row-major within each cell.
pub fn space_to_depth(x: &Tensor, r: usize) -> Tensor {
    let s = x.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    assert!(h % r == 0 && w % r == 0, "space_to_depth: {s:?} by {r}");
    x.reshape(&[n, h / r, r, w / r, r, c])
        .permute(&[0, 1, 3, 2, 4, 5])
        .reshape(&[n, h / r, w / r, r * r * c])
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor, r: usize) -> Tensor {
    let s = x.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3] / (r * r));
    assert_eq!(s[3], r * r * c, "depth_to_space: {s:?} by {r}");
    x.reshape(&[n, h, w, r, r, c])
        .permute(&[0, 1, 3, 2, 4, 5])
        .reshape(&[n, h * r, w * r, c])
}

/// Cyclic shift of axes 1 and 2 by `-shift` (`undo` shifts back).
fn roll(x: &Tensor, shift: usize, undo: bool) -> Tensor {
    let (h, w) = (x.dim(1), x.dim(2));
    let idx = |n: usize| -> Vec<usize> {
        (0..n)
            .map(|i| if undo { (i + n - shift) % n } else { (i + shift) % n })
            .collect()
    };
    x.gather(1, &idx(h)).gather(2, &idx(w))
}

fn window_partition(x: &Tensor, ws: usize) -> Tensor {
    let s = x.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    x.reshape(&[n, h / ws, ws, w / ws, ws, c])
        .permute(&[0, 1, 3, 2, 4, 5])
        .reshape(&[n * (h / ws) * (w / ws), ws * ws, c])
}

fn window_reverse(x: &Tensor, n: usize, h: usize, w: usize, ws: usize) -> Tensor {
    let c = x.dim(2);
    x.reshape(&[n, h / ws, w / ws, ws, ws, c])
        .permute(&[0, 1, 3, 2, 4, 5])
        .reshape(&[n, h, w, c])
}

/// Flat index into the `(2w-1)^2` relative-position table for every
/// (query, key) pair of a `w x w` window.
pub fn relative_position_index(ws: usize) -> Vec<usize> {
    let t = ws * ws;
    let mut out = Vec::with_capacity(t * t);
    for i in 0..t {
        let (yi, xi) = (i / ws, i % ws);
        for j in 0..t {
            let (yj, xj) = (j / ws, j % ws);
            out.push((yi + ws - 1 - yj) * (2 * ws - 1) + (xi + ws - 1 - xj));
        }
    }
    out
}

/// Additive mask `[windows, T, T]` that keeps shifted windows from mixing
/// pixels that were not adjacent before the roll.
pub fn shift_mask(h: usize, w: usize, ws: usize, shift: usize) -> Vec<f32> {
    let label = |i: usize, n: usize| -> usize {
        if i < n - ws {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (h / ws, w / ws);
    let t = ws * ws;
    let mut out = Vec::with_capacity(nh * nw * t * t);
    for wy in 0..nh {
        for wx in 0..nw {
            let labels: Vec<usize> = (0..t)
                .map(|k| label(wy * ws + k / ws, h) * 3 + label(wx * ws + k % ws, w))
                .collect();
            for a in &labels {
                for b in &labels {
                    out.push(if a == b { 0.0 } else { SHIFT_MASK as f32 });
                }
            }
        }
    }
    out
}

/// Shape parameters of one stage's block stack.
#[derive(Debug, Clone, Copy)]
pub struct StageSpec {
    pub kind: BackboneKind,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub depth: usize,
    pub mlp_ratio: f64,
}

impl StageSpec {
    fn hidden(&self) -> usize {
        ((self.dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    pub fn register(&self, init: &mut Init, prefix: &str) {
        for b in 0..self.depth {
            let name = format!("{prefix}.b{b}");
            match self.kind {
                BackboneKind::Cnn => {
                    for conv in ["conv1", "conv2"] {
                        init.fan_in(format!("{name}.{conv}.weight"), &[3, 3, self.dim, self.dim], 9 * self.dim);
                        init.constant(format!("{name}.{conv}.bias"), &[self.dim], 0.0);
                    }
                    init.layer_norm(&format!("{name}.norm"), self.dim);
                }
                _ => {
                    let d = self.dim;
                    init.linear(&format!("{name}.attn.qkv"), d, 3 * d, true);
                    init.constant(
                        format!("{name}.attn.logit_scale"),
                        &[self.heads],
                        (10.0f32).ln(),
                    );
                    let span = 2 * self.window - 1;
                    init.trunc_normal(format!("{name}.attn.rel_bias"), &[span * span, self.heads]);
                    init.linear(&format!("{name}.attn.proj"), d, d, true);
                    init.layer_norm(&format!("{name}.norm1"), d);
                    init.linear(&format!("{name}.mlp.fc1"), d, self.hidden(), true);
                    init.linear(&format!("{name}.mlp.fc2"), self.hidden(), d, true);
                    init.layer_norm(&format!("{name}.norm2"), d);
                }
            }
        }
    }

    /// Run the stage's blocks over `[N, H, W, dim]`.
    pub fn forward(&self, p: &Bound, prefix: &str, mut x: Tensor) -> Tensor {
        for b in 0..self.depth {
            let name = format!("{prefix}.b{b}");
            x = match self.kind {
                BackboneKind::Cnn => conv_block(p, &name, &x),
                _ => {
                    let shift = if b % 2 == 1 && x.dim(1) > self.window {
                        self.window / 2
                    } else {
                        0
                    };
                    swin_block(p, &name, &x, self.heads, self.window, shift)
                }
            };
        }
        x
    }
}

fn conv_block(p: &Bound, name: &str, x: &Tensor) -> Tensor {
    let conv = |t: &Tensor, c: &str| {
        t.conv3x3(
            p.get(&format!("{name}.{c}.weight")),
            Some(p.get(&format!("{name}.{c}.bias"))),
        )
    };
    let y = conv(&conv(x, "conv1").gelu(), "conv2");
    x.add(&layer_norm(p, &format!("{name}.norm"), &y))
}

/// One windowed block with residual post-normalization:
/// `x + LN(attn(x))`, then `x + LN(mlp(x))`.
pub fn swin_block(p: &Bound, name: &str, x: &Tensor, heads: usize, ws: usize, shift: usize) -> Tensor {
    let s = x.shape();
    let (n, h, w) = (s[0], s[1], s[2]);
    let shifted = if shift > 0 { roll(x, shift, false) } else { x.clone() };
    let windows = window_partition(&shifted, ws);
    let attn = window_attention(p, &format!("{name}.attn"), &windows, n, (h, w), heads, ws, shift);
    let mut attn = window_reverse(&attn, n, h, w, ws);
    if shift > 0 {
        attn = roll(&attn, shift, true);
    }
    let x = x.add(&layer_norm(p, &format!("{name}.norm1"), &attn));
    let m = linear(p, &format!("{name}.mlp.fc1"), &x).gelu();
    let m = linear(p, &format!("{name}.mlp.fc2"), &m);
    x.add(&layer_norm(p, &format!("{name}.norm2"), &m))
}

#[allow(clippy::too_many_arguments)]
fn window_attention(
    p: &Bound,
    name: &str,
    x: &Tensor,
    n: usize,
    (h, w): (usize, usize),
    heads: usize,
    ws: usize,
    shift: usize,
) -> Tensor {
    let (b, t, c) = (x.dim(0), x.dim(1), x.dim(2));
    let d = c / heads;
    let qkv = linear(p, &format!("{name}.qkv"), x)
        .reshape(&[b, t, 3, heads, d])
        .permute(&[2, 0, 3, 1, 4]);
    let part = |i: usize| qkv.narrow(0, i, 1).reshape(&[b, heads, t, d]);
    let (q, k, v) = (part(0), part(1), part(2));

    let scale = p
        .get(&format!("{name}.logit_scale"))
        .clamp(f64::NEG_INFINITY, LOGIT_SCALE_MAX)
        .exp()
        .reshape(&[heads, 1, 1]);
    let bias = p
        .get(&format!("{name}.rel_bias"))
        .gather(0, &relative_position_index(ws))
        .reshape(&[t, t, heads])
        .permute(&[2, 0, 1]);
    let mut logits = q
        .l2_normalize(1e-12)
        .matmul_t(&k.l2_normalize(1e-12), false, true)
        .mul(&scale)
        .add(&bias);
    if shift > 0 {
        let nw = (h / ws) * (w / ws);
        let mask = mask_tensor(h, w, ws, shift, p.dtype()).reshape(&[nw, 1, t, t]);
        logits = logits
            .reshape(&[n, nw, heads, t, t])
            .add(&mask)
            .reshape(&[b, heads, t, t]);
    }
    let out = logits
        .softmax()
        .matmul(&v)
        .permute(&[0, 2, 1, 3])
        .reshape(&[b, t, c]);
    linear(p, &format!("{name}.proj"), &out)
}

fn mask_tensor(h: usize, w: usize, ws: usize, shift: usize, dtype: DType) -> Tensor {
    let nw = (h / ws) * (w / ws);
    Tensor::from_f32_as(shift_mask(h, w, ws, shift), &[nw, ws * ws, ws * ws], dtype)
}

/// Learned 2x upsampling: a stride-2, kernel-2 transposed convolution from
/// `C_in` to `C_out` channels, stored as `{name}.weight` `[4 * C_out, C_in]`
/// (output ordered by kernel row, kernel column, channel) plus a per-channel
/// `{name}.bias`.
pub fn patch_expand(p: &Bound, name: &str, x: &Tensor, scale: usize) -> Tensor {
    let y = x.linear(p.get(&format!("{name}.weight")), None);
    depth_to_space(&y, scale).add(p.get(&format!("{name}.bias")))
}

pub fn register_patch_expand(init: &mut Init, name: &str, input: usize, output: usize, scale: usize) {
    init.fan_in(format!("{name}.weight"), &[scale * scale * output, input], input);
    init.constant(format!("{name}.bias"), &[output], 0.0);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use haze_tensor::no_grad;

    fn bound(f: impl FnOnce(&mut Init)) -> (ParamStore, Bound) {
        let mut s = ParamStore::new();
        f(&mut Init::new(&mut s, 3));
        let b = s.bind(DType::F64, false);
        (s, b)
    }

    fn seq(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let v = (0..n)
            .map(|i| (i as f64 * 0.37 + seed as f64 * 1.3).sin() * 0.9)
            .collect();
        Tensor::from_f64(v, shape)
    }

    #[test]
    fn space_depth_round_trip() {
        let x = seq(&[2, 8, 4, 3], 1);
        let y = space_to_depth(&x, 2);
        assert_eq!(y.shape(), &[2, 4, 2, 12]);
        assert_eq!(depth_to_space(&y, 2).to_vec_f64(), x.to_vec_f64());
        // Cell (0,0) of the first image holds pixels (0,0),(0,1),(1,0),(1,1).
        let xv = x.to_vec_f64();
        let yv = y.to_vec_f64();
        let px = |r: usize, c: usize, ch: usize| xv[(r * 4 + c) * 3 + ch];
        assert_eq!(&yv[..12], &[
            px(0, 0, 0), px(0, 0, 1), px(0, 0, 2), px(0, 1, 0), px(0, 1, 1), px(0, 1, 2),
            px(1, 0, 0), px(1, 0, 1), px(1, 0, 2), px(1, 1, 0), px(1, 1, 1), px(1, 1, 2),
        ]);
    }

    #[test]
    fn relative_index_is_symmetric_about_centre() {
        let ws = 3;
        let idx = relative_position_index(ws);
        let centre = (ws - 1) * (2 * ws - 1) + ws - 1;
        for i in 0..ws * ws {
            assert_eq!(idx[i * ws * ws + i], centre);
        }
        assert_eq!(*idx.iter().max().unwrap(), (2 * ws - 1) * (2 * ws - 1) - 1);
    }

    #[test]
    fn shift_mask_separates_wrapped_regions() {
        let (h, ws, s) = (8, 4, 2);
        let m = shift_mask(h, h, ws, s);
        let t = ws * ws;
        // Window 0 holds no wrapped pixels.
        assert!(m[..t * t].iter().all(|&v| v == 0.0));
        // The last window mixes four regions.
        let last = &m[3 * t * t..];
        let zeros = last.iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 4 * 4 * 4);
    }

    #[test]
    fn patch_expand_shapes_and_zero_input() {
        let (_, p) = bound(|i| register_patch_expand(i, "up", 64, 32, 2));
        let y = patch_expand(&p, "up", &Tensor::zeros(&[1, 8, 8, 64], DType::F64), 2);
        assert_eq!(y.shape(), &[1, 16, 16, 32]);
        assert!(y.to_vec_f64().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_expand_matches_transposed_conv_oracle() {
        let (cin, cout, h) = (3, 2, 3);
        let (mut s, _) = bound(|i| register_patch_expand(i, "up", cin, cout, 2));
        let wv: Vec<f32> = (0..4 * cout * cin).map(|i| (i as f32 * 0.71).cos()).collect();
        s.get_mut("up.weight").unwrap().values = wv.clone();
        s.get_mut("up.bias").unwrap().values = vec![0.25, -0.5];
        let p = s.bind(DType::F64, false);
        let x = seq(&[1, h, h, cin], 4);
        let y = patch_expand(&p, "up", &x, 2).to_vec_f64();
        let xv = x.to_vec_f64();
        // out[2i+a, 2j+b, co] = bias[co] + sum_ci x[i, j, ci] * K[(a, b, co), ci]
        for i in 0..h {
            for j in 0..h {
                for a in 0..2 {
                    for b in 0..2 {
                        for co in 0..cout {
                            let mut acc = [0.25, -0.5][co];
                            for ci in 0..cin {
                                let k = wv[((a * 2 + b) * cout + co) * cin + ci] as f64;
                                acc += xv[(i * h + j) * cin + ci] * k;
                            }
                            let got = y[((2 * i + a) * 2 * h + 2 * j + b) * cout + co];
                            assert!((got - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn delta_with_identity_kernel_lands_on_its_cell() {
        let (mut s, _) = bound(|i| register_patch_expand(i, "up", 1, 1, 2));
        s.get_mut("up.weight").unwrap().values = vec![1.0, 0.0, 0.0, 0.0];
        let p = s.bind(DType::F64, false);
        let mut v = vec![0.0; 16];
        v[2 * 4 + 1] = 1.0;
        let y = patch_expand(&p, "up", &Tensor::from_f64(v, &[1, 4, 4, 1]), 2).to_vec_f64();
        for (i, &val) in y.iter().enumerate() {
            let (r, c) = (i / 8, i % 8);
            assert_eq!(val, if (r, c) == (4, 2) { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn blocks_preserve_shape_and_are_translation_aware() {
        for kind in [BackboneKind::SwinT, BackboneKind::Cnn] {
            let spec = StageSpec {
                kind,
                dim: 8,
                heads: 2,
                window: 4,
                depth: 2,
                mlp_ratio: 2.0,
            };
            let (_, p) = bound(|i| spec.register(i, "s"));
            let x = seq(&[2, 8, 8, 8], 2);
            let y = no_grad(|| spec.forward(&p, "s", x.clone()));
            assert_eq!(y.shape(), x.shape());
            assert!(y.to_vec_f64().iter().all(|v| v.is_finite()));
            assert_ne!(y.to_vec_f64(), x.to_vec_f64());
        }
    }

    #[test]
    fn swin_block_gradients() {
        let spec = StageSpec {
            kind: BackboneKind::SwinT,
            dim: 4,
            heads: 2,
            window: 2,
            depth: 2,
            mlp_ratio: 1.0,
        };
        let (s, _) = bound(|i| spec.register(i, "s"));
        let x = seq(&[1, 4, 4, 4], 5);
        let weights = seq(&[1, 4, 4, 4], 9);
        let loss = |p: &Bound| spec.forward(p, "s", x.clone()).mul(&weights).sum_all();
        let p = s.bind(DType::F64, true);
        let grads = haze_tensor::backward(&loss(&p));
        for (name, param) in s.iter() {
            let g = grads.get(p.get(name)).map(|g| g.to_vec_f64()).unwrap_or_else(|| vec![0.0; param.values.len()]);
            for idx in [0, param.values.len() / 2] {
                // Tiny attention outputs feed the post-norms, so the loss is
                // sharply curved in the projection biases; keep the step small.
                let eps = 1e-7;
                let probe = |delta: f64| {
                    let b = s.bind_with(DType::F64, false, |n, q| {
                        let mut v: Vec<f64> = q.values.iter().map(|&x| x as f64).collect();
                        if n == name {
                            v[idx] += delta;
                        }
                        v
                    });
                    loss(&b).item()
                };
                let fd = (probe(eps) - probe(-eps)) / (2.0 * eps);
                assert!(
                    (fd - g[idx]).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "{name}[{idx}]: fd {fd} vs {}",
                    g[idx]
                );
            }
        }
    }
}
