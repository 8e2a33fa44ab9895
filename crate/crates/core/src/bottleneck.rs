//! Global attention over the tokens of all patches at once.

use haze_tensor::{no_grad, Tensor};

use crate::attention::{approximate_attention, exact_attention};
use crate::config::{AttentionMode, BottleneckConfig, PositionalEmbedding};
use crate::encoder::{check_memory, TokenSequence};
use crate::error::{Error, Result};
use crate::params::{Bound, Init};

pub const RMS_EPS: f64 = 1e-6;

/// All patch tokens flattened to `[total_tokens, dim]`, with the patch and
/// intra-patch position each row came from.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalSequence {
    pub tokens: Vec<f32>,
    pub dim: usize,
    pub provenance: Vec<(usize, usize)>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Token map side per patch.
    pub spatial: usize,
}

impl GlobalSequence {
    pub fn from_tokens(seq: TokenSequence) -> GlobalSequence {
        let provenance = canonical_provenance(seq.num_patches, seq.tokens_per_patch());
        GlobalSequence {
            tokens: seq.tokens,
            dim: seq.dim,
            provenance,
            grid_rows: seq.grid_rows,
            grid_cols: seq.grid_cols,
            spatial: seq.spatial,
        }
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn num_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn tokens_per_patch(&self) -> usize {
        self.spatial * self.spatial
    }

    /// For every `(patch, position)` slot, the row holding it. Fails unless
    /// the provenance is a bijection onto all slots.
    pub fn slot_rows(&self) -> Result<Vec<usize>> {
        let per = self.tokens_per_patch();
        let slots = self.num_patches() * per;
        if self.tokens.len() != self.len() * self.dim {
            return Err(Error::Shape(format!(
                "{} values for {} tokens of width {}",
                self.tokens.len(),
                self.len(),
                self.dim
            )));
        }
        let mut rows = vec![usize::MAX; slots];
        for (row, &(patch, pos)) in self.provenance.iter().enumerate() {
            let slot = patch * per + pos;
            if patch >= self.num_patches() || pos >= per || rows[slot] != usize::MAX {
                return Err(Error::Shape(format!(
                    "token {row} has invalid or duplicate provenance ({patch}, {pos})"
                )));
            }
            rows[slot] = row;
        }
        if let Some(slot) = rows.iter().position(|&r| r == usize::MAX) {
            return Err(Error::Shape(format!(
                "no token for patch {} position {}",
                slot / per,
                slot % per
            )));
        }
        Ok(rows)
    }
}

/// `gain_i * x_i / sqrt(mean(x^2) + eps)`.
pub fn rms_normalize(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    assert_eq!(x.len(), gain.len());
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter().zip(gain).map(|(v, g)| g * v * inv).collect()
}

pub fn register(init: &mut Init, cfg: &BottleneckConfig, tokens_per_patch: usize) {
    let d = cfg.token_dim;
    if cfg.positional_embedding == PositionalEmbedding::Learned2d {
        init.trunc_normal("bn.pos.row", &[cfg.max_grid, d]);
        init.trunc_normal("bn.pos.col", &[cfg.max_grid, d]);
        init.trunc_normal("bn.pos.intra", &[tokens_per_patch, d]);
    }
    let hidden = cfg.ffn_ratio * d;
    // Pre-norm blocks keep the small fixed-scale init.
    let weight = |init: &mut Init, name: String, input: usize, output: usize| {
        init.trunc_normal(format!("{name}.weight"), &[output, input])
    };
    for b in 0..cfg.depth {
        let name = format!("bn.b{b}");
        init.rms_norm(&format!("{name}.norm1"), d);
        for proj in ["q", "k", "v", "o"] {
            weight(init, format!("{name}.attn.{proj}"), d, d);
        }
        init.rms_norm(&format!("{name}.norm2"), d);
        weight(init, format!("{name}.ffn.w1"), d, hidden);
        weight(init, format!("{name}.ffn.w3"), d, hidden);
        weight(init, format!("{name}.ffn.w2"), hidden, d);
    }
}

/// `(patch, position)` for tokens laid out patch by patch.
pub fn canonical_provenance(num_patches: usize, per_patch: usize) -> Vec<(usize, usize)> {
    (0..num_patches * per_patch).map(|t| (t / per_patch, t % per_patch)).collect()
}

/// Positional term added to the query/key input, `[T, dim]`, for tokens of
/// a `grid` of patches with the given provenance.
pub fn positional(
    p: &Bound,
    cfg: &BottleneckConfig,
    grid: (usize, usize),
    provenance: &[(usize, usize)],
) -> Result<Option<Tensor>> {
    if cfg.positional_embedding == PositionalEmbedding::None {
        return Ok(None);
    }
    if grid.0 > cfg.max_grid || grid.1 > cfg.max_grid {
        return Err(Error::Shape(format!(
            "patch grid {}x{} exceeds the positional table ({})",
            grid.0, grid.1, cfg.max_grid
        )));
    }
    let intra = p.get("bn.pos.intra");
    if let Some(&(_, pos)) = provenance.iter().find(|&&(_, pos)| pos >= intra.dim(0)) {
        return Err(Error::Shape(format!(
            "intra-patch position {pos} outside the positional table ({})",
            intra.dim(0)
        )));
    }
    let r: Vec<usize> = provenance.iter().map(|&(patch, _)| patch / grid.1).collect();
    let c: Vec<usize> = provenance.iter().map(|&(patch, _)| patch % grid.1).collect();
    let i: Vec<usize> = provenance.iter().map(|&(_, pos)| pos).collect();
    let pos = p
        .get("bn.pos.row")
        .gather(0, &r)
        .add(&p.get("bn.pos.col").gather(0, &c))
        .add(&intra.gather(0, &i));
    Ok(Some(pos))
}

fn heads_first(x: &Tensor, heads: usize) -> Tensor {
    let (t, d) = (x.dim(0), x.dim(1));
    x.reshape(&[t, heads, d / heads]).permute(&[1, 0, 2])
}

fn attention(p: &Bound, cfg: &BottleneckConfig, name: &str, x: &Tensor, pos: Option<&Tensor>) -> Tensor {
    let h = x.rms_norm(p.get(&format!("{name}.norm1.gain")), RMS_EPS);
    let qk_in = match pos {
        Some(pos) => h.add(pos),
        None => h.clone(),
    };
    let proj = |t: &Tensor, w: &str| t.linear(p.get(&format!("{name}.attn.{w}.weight")), None);
    let heads = cfg.num_heads;
    let q = heads_first(&proj(&qk_in, "q"), heads);
    let k = heads_first(&proj(&qk_in, "k"), heads);
    let v = heads_first(&proj(&h, "v"), heads);
    let y = match cfg.attention_mode {
        AttentionMode::Exact => exact_attention(&q, &k, &v),
        AttentionMode::Approximate => approximate_attention(&q, &k, &v, &cfg.approx_params),
    };
    let y = y.permute(&[1, 0, 2]).reshape(&[x.dim(0), x.dim(1)]);
    proj(&y, "o")
}

fn feed_forward(p: &Bound, name: &str, x: &Tensor) -> Tensor {
    let h = x.rms_norm(p.get(&format!("{name}.norm2.gain")), RMS_EPS);
    let w = |t: &Tensor, n: &str| t.linear(p.get(&format!("{name}.ffn.{n}.weight")), None);
    w(&w(&h, "w1").silu().mul(&w(&h, "w3")), "w2")
}

/// The block stack on `[T, dim]`; `chunk > 0` evaluates the feed-forward
/// over slices of `chunk` tokens.
pub fn forward(p: &Bound, cfg: &BottleneckConfig, x: &Tensor, pos: Option<&Tensor>, chunk: usize) -> Tensor {
    let mut x = x.clone();
    for b in 0..cfg.depth {
        let name = format!("bn.b{b}");
        x = x.add(&attention(p, cfg, &name, &x, pos));
        let t = x.dim(0);
        let ff = if chunk == 0 || chunk >= t {
            feed_forward(p, &name, &x)
        } else {
            let parts: Vec<Tensor> = (0..t)
                .step_by(chunk)
                .map(|s| feed_forward(p, &name, &x.narrow(0, s, chunk.min(t - s))))
                .collect();
            Tensor::cat(&parts, 0)
        };
        x = x.add(&ff);
    }
    x
}

/// Inference over a host-side sequence; the whole sequence is resident on
/// the device for this stage.
pub fn bottleneck_forward(p: &Bound, cfg: &BottleneckConfig, seq: &GlobalSequence) -> Result<GlobalSequence> {
    if seq.dim != cfg.token_dim {
        return Err(Error::Shape(format!(
            "token width {} does not match bottleneck width {}",
            seq.dim, cfg.token_dim
        )));
    }
    seq.slot_rows()?;
    let out = no_grad(|| -> Result<Vec<f32>> {
        let pos = positional(p, cfg, (seq.grid_rows, seq.grid_cols), &seq.provenance)?;
        let x = Tensor::from_f32_as(seq.tokens.clone(), &[seq.len(), seq.dim], p.dtype());
        let y = forward(p, cfg, &x, pos.as_ref(), cfg.ffn_chunk);
        Ok(y.to_vec_f32())
    })?;
    check_memory("bottleneck", seq.len())?;
    Ok(GlobalSequence {
        tokens: out,
        ..seq.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::clustered_qkv;
    use crate::params::ParamStore;
    use haze_tensor::DType;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sequence(rows: usize, cols: usize, spatial: usize, dim: usize, seed: u64) -> GlobalSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rows * cols * spatial * spatial;
        let tokens = (0..n * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        GlobalSequence::from_tokens(TokenSequence {
            tokens,
            num_patches: rows * cols,
            spatial,
            dim,
            grid_rows: rows,
            grid_cols: cols,
        })
    }

    fn store(cfg: &BottleneckConfig, per: usize) -> ParamStore {
        let mut s = ParamStore::new();
        register(&mut Init::new(&mut s, 5), cfg, per);
        s
    }

    #[test]
    fn rms_normalize_examples() {
        let y = rms_normalize(&[3.0, 4.0], &[1.0, 1.0], 1e-12);
        assert!((y[0] - 0.848_528_137).abs() < 1e-8 && (y[1] - 1.131_370_849).abs() < 1e-8);
        assert_eq!(rms_normalize(&[0.0; 5], &[1.0; 5], 1e-6), vec![0.0; 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y = rms_normalize(&x, &[2.5; 64], 1e-12);
        let rms = (y.iter().map(|v| v * v).sum::<f64>() / 64.0).sqrt();
        assert!((rms - 2.5).abs() <= 1e-6);
    }

    #[test]
    fn zeroed_output_projections_give_identity() {
        let cfg = BottleneckConfig {
            depth: 1,
            num_heads: 2,
            token_dim: 8,
            max_grid: 4,
            ..BottleneckConfig::default()
        };
        let mut s = store(&cfg, 4);
        s.zero_prefix("bn.b0.attn.o");
        s.zero_prefix("bn.b0.ffn.w2");
        let p = s.bind(DType::F32, false);
        let mut seq = sequence(2, 2, 2, 8, 1);
        seq.tokens.iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(bottleneck_forward(&p, &cfg, &seq).unwrap(), seq);
        let seq = sequence(2, 2, 2, 8, 2);
        assert_eq!(bottleneck_forward(&p, &cfg, &seq).unwrap().tokens, seq.tokens);
    }

    #[test]
    fn shape_is_preserved_and_finite() {
        let cfg = BottleneckConfig {
            num_heads: 4,
            token_dim: 64,
            attention_mode: AttentionMode::Exact,
            ..BottleneckConfig::default()
        };
        let p = store(&cfg, 16).bind(DType::F32, false);
        let seq = sequence(8, 8, 4, 64, 3);
        assert_eq!(seq.len(), 1024);
        let out = bottleneck_forward(&p, &cfg, &seq).unwrap();
        assert_eq!(out.tokens.len(), seq.tokens.len());
        assert!(out.tokens.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn approximate_mode_tracks_exact_mode() {
        let exact = BottleneckConfig {
            num_heads: 4,
            token_dim: 64,
            attention_mode: AttentionMode::Exact,
            ..BottleneckConfig::default()
        };
        let approx = BottleneckConfig {
            attention_mode: AttentionMode::Approximate,
            ..exact.clone()
        };
        let p = store(&exact, 16).bind(DType::F32, false);
        let seq = sequence(4, 8, 4, 64, 4);
        assert_eq!(seq.len(), 512);
        let a = bottleneck_forward(&p, &exact, &seq).unwrap().tokens;
        let b = bottleneck_forward(&p, &approx, &seq).unwrap().tokens;
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(diff <= 5e-2, "{diff}");
    }

    #[test]
    fn ffn_chunking_is_transparent() {
        let mut cfg = BottleneckConfig {
            num_heads: 2,
            token_dim: 16,
            attention_mode: AttentionMode::Exact,
            ..BottleneckConfig::default()
        };
        let p = store(&cfg, 4).bind(DType::F32, false);
        let seq = sequence(3, 3, 2, 16, 6);
        let a = bottleneck_forward(&p, &cfg, &seq).unwrap().tokens;
        cfg.ffn_chunk = 7;
        let b = bottleneck_forward(&p, &cfg, &seq).unwrap().tokens;
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(diff <= 1e-6, "{diff}");
    }

    #[test]
    fn one_token_influences_other_patches() {
        let cfg = BottleneckConfig {
            depth: 1,
            num_heads: 2,
            token_dim: 8,
            max_grid: 4,
            attention_mode: AttentionMode::Exact,
            ..BottleneckConfig::default()
        };
        let p = store(&cfg, 4).bind(DType::F64, false);
        let seq = sequence(2, 2, 2, 8, 7);
        let base = bottleneck_forward(&p, &cfg, &seq).unwrap();
        let mut bumped = seq.clone();
        bumped.tokens[0] += 1e-3;
        let out = bottleneck_forward(&p, &cfg, &bumped).unwrap();
        let per = 4 * 8;
        let moved = (per..seq.tokens.len()).any(|i| (out.tokens[i] - base.tokens[i]).abs() > 0.0);
        assert!(moved, "no output outside patch 0 changed");
    }

    #[test]
    fn mismatched_width_and_broken_provenance_are_rejected() {
        let cfg = BottleneckConfig {
            depth: 1,
            num_heads: 2,
            token_dim: 8,
            max_grid: 4,
            ..BottleneckConfig::default()
        };
        let p = store(&cfg, 4).bind(DType::F32, false);
        let seq = sequence(2, 2, 2, 16, 8);
        assert!(matches!(bottleneck_forward(&p, &cfg, &seq), Err(Error::Shape(_))));
        let mut seq = sequence(2, 2, 2, 8, 8);
        seq.provenance[3] = seq.provenance[2];
        assert!(matches!(bottleneck_forward(&p, &cfg, &seq), Err(Error::Shape(_))));
    }

    #[test]
    fn heads_round_trip() {
        let (q, _, _) = clustered_qkv(1, 6, 8, 2, 0.1, 0);
        let x = q.reshape(&[6, 8]);
        let back = heads_first(&x, 4).permute(&[1, 0, 2]).reshape(&[6, 8]);
        assert_eq!(back.to_vec_f64(), x.to_vec_f64());
    }
}
