//! Mirror of the encoder: expand, fuse skips, refine, and project to RGB.

use haze_tensor::{no_grad, Tensor};

use crate::bottleneck::GlobalSequence;
use crate::config::{DecoderConfig, EncoderConfig};
use crate::encoder::{check_memory, SkipCache};
use crate::error::{Error, Result};
use crate::layers::{linear, patch_expand, register_patch_expand, StageSpec};
use crate::params::{Bound, Init};
use crate::tiling::PatchBatch;

const HEAD_SCALE: usize = 4;
pub const OUT_CHANNELS: usize = 3;

fn stage_spec(enc: &EncoderConfig, dec: &DecoderConfig, s: usize) -> StageSpec {
    StageSpec {
        depth: dec.stage_depths[s],
        ..crate::encoder::stage_spec(enc, s)
    }
}

pub fn register(init: &mut Init, enc: &EncoderConfig, dec: &DecoderConfig) {
    let stages = enc.num_stages();
    for s in (0..stages).rev() {
        let c = enc.stage_dim(s);
        if s + 1 < stages {
            register_patch_expand(init, &format!("dec.up{s}"), enc.stage_dim(s + 1), c, 2);
        }
        init.linear(&format!("dec.fuse{s}"), 2 * c, c, true);
        stage_spec(enc, dec, s).register(init, &format!("dec.s{s}"));
    }
    register_patch_expand(init, "dec.up_head", enc.stage_dim(0), dec.head_channels, HEAD_SCALE);
    init.trunc_normal("dec.head.weight", &[3, 3, dec.head_channels, OUT_CHANNELS]);
    init.constant("dec.head.bias", &[OUT_CHANNELS], 0.0);
}

/// Decode `tokens` `[n, t, t, D]` with per-stage `skips` (shallowest first)
/// into `[n, p, p, 3]` clamped to `[0, 1]`.
pub fn forward(p: &Bound, enc: &EncoderConfig, dec: &DecoderConfig, tokens: &Tensor, skips: &[Tensor]) -> Tensor {
    let stages = enc.num_stages();
    let mut h = tokens.clone();
    for s in (0..stages).rev() {
        if s + 1 < stages {
            h = patch_expand(p, &format!("dec.up{s}"), &h, 2);
        }
        h = linear(p, &format!("dec.fuse{s}"), &Tensor::cat(&[h, skips[s].clone()], 3));
        h = stage_spec(enc, dec, s).forward(p, &format!("dec.s{s}"), h);
    }
    let h = replicate_pad(&patch_expand(p, "dec.up_head", &h, HEAD_SCALE));
    let (hh, ww) = (h.dim(1), h.dim(2));
    h.conv3x3(p.get("dec.head.weight"), Some(p.get("dec.head.bias")))
        .narrow(1, 1, hh - 2)
        .narrow(2, 1, ww - 2)
        .clamp(0.0, 1.0)
}

/// Repeat the outermost row and column of `[n, h, w, c]` once on each
/// side, so the head convolution sees no artificial zero border at patch
/// edges.
fn replicate_pad(x: &Tensor) -> Tensor {
    let edge = |n: usize| -> Vec<usize> { std::iter::once(0).chain(0..n).chain(std::iter::once(n - 1)).collect() };
    x.gather(1, &edge(x.dim(1))).gather(2, &edge(x.dim(2)))
}

/// Decode all patches in mini-batches of `dec.mini_batch_size`, uploading
/// only the tokens and skips of the current mini-batch.
pub fn decode_patches(
    p: &Bound,
    enc: &EncoderConfig,
    dec: &DecoderConfig,
    seq: &GlobalSequence,
    skips: &SkipCache,
) -> Result<PatchBatch> {
    let stages = enc.num_stages();
    if skips.stages.len() != stages {
        return Err(Error::Shape(format!(
            "{} skip stages for a {stages}-stage decoder",
            skips.stages.len()
        )));
    }
    let n = seq.num_patches();
    for (s, st) in skips.stages.iter().enumerate() {
        let want = (enc.stage_spatial(s), enc.stage_dim(s));
        if (st.spatial, st.dim) != want || st.data.len() != n * st.patch_len() {
            return Err(Error::Shape(format!(
                "skip stage {s} holds {} values of {}x{}x{}, expected {n} patches of {}x{}x{}",
                st.data.len(),
                st.spatial,
                st.spatial,
                st.dim,
                want.0,
                want.0,
                want.1
            )));
        }
    }
    if seq.spatial != enc.token_spatial() || seq.dim != enc.token_dim() {
        return Err(Error::Shape(format!(
            "tokens are {0}x{0}x{1}, decoder expects {2}x{2}x{3}",
            seq.spatial,
            seq.dim,
            enc.token_spatial(),
            enc.token_dim()
        )));
    }
    let rows = seq.slot_rows()?;
    let per = seq.tokens_per_patch();
    let ps = enc.patch_size;
    let mut out = Vec::with_capacity(n * ps * ps * OUT_CHANNELS);
    let mb = dec.mini_batch_size.max(1);
    let mut start = 0;
    while start < n {
        let count = mb.min(n - start);
        no_grad(|| {
            let mut tok = Vec::with_capacity(count * per * seq.dim);
            for &r in &rows[start * per..(start + count) * per] {
                tok.extend_from_slice(&seq.tokens[r * seq.dim..(r + 1) * seq.dim]);
            }
            let t = seq.spatial;
            let tokens = Tensor::from_f32_as(tok, &[count, t, t, seq.dim], p.dtype());
            let sk: Vec<Tensor> = skips
                .stages
                .iter()
                .map(|st| {
                    let len = st.patch_len();
                    Tensor::from_f32_as(
                        st.data[start * len..(start + count) * len].to_vec(),
                        &[count, st.spatial, st.spatial, st.dim],
                        p.dtype(),
                    )
                })
                .collect();
            out.extend(forward(p, enc, dec, &tokens, &sk).to_vec_f32());
        });
        check_memory("decoder", (start + count) * per)?;
        start += count;
    }
    PatchBatch::new(ps, OUT_CHANNELS, out)
}
