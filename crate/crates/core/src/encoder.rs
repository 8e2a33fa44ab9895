//! Hierarchical patch encoder run over mini-batches of patches.

use haze_tensor::{meter, no_grad, Tensor};

use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::layers::{layer_norm, linear, space_to_depth, StageSpec};
use crate::params::{Bound, Init};
use crate::tiling::PatchBatch;

const EMBED_STRIDE: usize = 4;

/// Tokens of every patch, `[num_patches, spatial, spatial, dim]`, host side.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<f32>,
    pub num_patches: usize,
    pub spatial: usize,
    pub dim: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl TokenSequence {
    pub fn tokens_per_patch(&self) -> usize {
        self.spatial * self.spatial
    }

    pub fn total_tokens(&self) -> usize {
        self.num_patches * self.tokens_per_patch()
    }

    pub fn patch(&self, index: usize) -> &[f32] {
        let n = self.tokens_per_patch() * self.dim;
        &self.tokens[index * n..(index + 1) * n]
    }
}

/// One encoder stage's output for all patches.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipStage {
    pub data: Vec<f32>,
    pub spatial: usize,
    pub dim: usize,
}

impl SkipStage {
    pub fn patch_len(&self) -> usize {
        self.spatial * self.spatial * self.dim
    }

    pub fn num_patches(&self) -> usize {
        self.data.len() / self.patch_len()
    }
}

/// Per-stage feature maps kept in host memory until the decoder needs them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SkipCache {
    pub stages: Vec<SkipStage>,
}

impl SkipCache {
    pub fn size_in_bytes(&self) -> usize {
        self.stages.iter().map(|s| s.data.len() * 4).sum()
    }
}

pub fn stage_spec(cfg: &EncoderConfig, s: usize) -> StageSpec {
    StageSpec {
        kind: cfg.backbone_kind,
        dim: cfg.stage_dim(s),
        heads: cfg.num_heads[s],
        window: cfg.stage_window(s),
        depth: cfg.stage_depths[s],
        mlp_ratio: cfg.mlp_ratio,
    }
}

pub fn register(init: &mut Init, cfg: &EncoderConfig) {
    let patch_in = EMBED_STRIDE * EMBED_STRIDE * cfg.in_channels;
    init.linear("enc.embed", patch_in, cfg.embed_dim, true);
    init.layer_norm("enc.embed.norm", cfg.embed_dim);
    for s in 0..cfg.num_stages() {
        if s > 0 {
            let prev = cfg.stage_dim(s - 1);
            init.linear(&format!("enc.merge{s}"), 4 * prev, cfg.stage_dim(s), false);
            init.layer_norm(&format!("enc.merge{s}.norm"), cfg.stage_dim(s));
        }
        stage_spec(cfg, s).register(init, &format!("enc.s{s}"));
    }
}

/// Encode `[n, p, p, C]` patches. Returns the deepest feature map (the
/// tokens) and the output of every stage, shallowest first.
pub fn forward(p: &Bound, cfg: &EncoderConfig, x: &Tensor) -> (Tensor, Vec<Tensor>) {
    let mut h = space_to_depth(x, EMBED_STRIDE);
    h = layer_norm(p, "enc.embed.norm", &linear(p, "enc.embed", &h));
    let mut skips = Vec::with_capacity(cfg.num_stages());
    for s in 0..cfg.num_stages() {
        if s > 0 {
            let name = format!("enc.merge{s}");
            h = layer_norm(p, &format!("{name}.norm"), &linear(p, &name, &space_to_depth(&h, 2)));
        }
        h = stage_spec(cfg, s).forward(p, &format!("enc.s{s}"), h);
        skips.push(h.clone());
    }
    (h, skips)
}

pub(crate) fn check_memory(stage: &'static str, tokens: usize) -> Result<()> {
    match meter::take_overflow() {
        Some(o) => Err(Error::OutOfMemory {
            stage,
            tokens,
            requested: o.requested,
            in_use: o.in_use,
            limit: o.limit,
        }),
        None => Ok(()),
    }
}

/// Run the encoder over `patches` in mini-batches of
/// `cfg.mini_batch_size`, staging every output back to host memory so that
/// device memory holds only one mini-batch at a time.
pub fn encode_patches(
    p: &Bound,
    cfg: &EncoderConfig,
    patches: &PatchBatch,
    grid: (usize, usize),
) -> Result<(TokenSequence, SkipCache)> {
    let n = patches.len();
    if patches.patch_size() != cfg.patch_size || patches.channels() != cfg.in_channels {
        return Err(Error::Shape(format!(
            "patches are {0}x{0}x{1}, encoder expects {2}x{2}x{3}",
            patches.patch_size(),
            patches.channels(),
            cfg.patch_size,
            cfg.in_channels
        )));
    }
    if grid.0 * grid.1 != n {
        return Err(Error::Shape(format!(
            "{} patches do not fill a {}x{} grid",
            n, grid.0, grid.1
        )));
    }
    let ps = cfg.patch_size;
    let mut stages: Vec<SkipStage> = (0..cfg.num_stages())
        .map(|s| SkipStage {
            data: Vec::with_capacity(n * cfg.stage_spatial(s).pow(2) * cfg.stage_dim(s)),
            spatial: cfg.stage_spatial(s),
            dim: cfg.stage_dim(s),
        })
        .collect();
    let mb = cfg.mini_batch_size.max(1);
    let mut start = 0;
    while start < n {
        let count = mb.min(n - start);
        no_grad(|| {
            let x = Tensor::from_f32_as(
                patches.range(start, count).to_vec(),
                &[count, ps, ps, cfg.in_channels],
                p.dtype(),
            );
            let (_, skips) = forward(p, cfg, &x);
            for (stage, t) in stages.iter_mut().zip(&skips) {
                stage.data.extend(t.to_vec_f32());
            }
        });
        check_memory("encoder", (start + count) * cfg.token_spatial().pow(2))?;
        start += count;
    }
    let last = stages.last().expect("at least one stage");
    let tokens = TokenSequence {
        tokens: last.data.clone(),
        num_patches: n,
        spatial: last.spatial,
        dim: last.dim,
        grid_rows: grid.0,
        grid_cols: grid.1,
    };
    Ok((tokens, SkipCache { stages }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{BackboneKind, ModelConfig};
    use crate::params::ParamStore;
    use haze_tensor::DType;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &EncoderConfig) -> Bound {
        let mut s = ParamStore::new();
        register(&mut Init::new(&mut s, 11), cfg);
        s.bind(DType::F32, false)
    }

    fn random_patches(n: usize, p: usize, seed: u64) -> PatchBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * p * p * 3).map(|_| rng.random::<f32>()).collect();
        PatchBatch::new(p, 3, data).unwrap()
    }

    #[test]
    fn token_shapes_follow_downsampling() {
        let mut cfg = ModelConfig::toy().encoder;
        cfg.patch_size = 256;
        cfg.embed_dim = 8;
        let p = setup(&cfg);
        let (tok, skips) = encode_patches(&p, &cfg, &random_patches(2, 256, 1), (1, 2)).unwrap();
        assert_eq!((tok.num_patches, tok.spatial, tok.dim), (2, 16, 32));
        let dims: Vec<_> = skips.stages.iter().map(|s| (s.spatial, s.dim)).collect();
        assert_eq!(dims, vec![(64, 8), (32, 16), (16, 32)]);
    }

    #[test]
    fn mini_batch_size_does_not_change_outputs() {
        let mut cfg = ModelConfig::toy().encoder;
        let patches = random_patches(5, cfg.patch_size, 2);
        let p = setup(&cfg);
        cfg.mini_batch_size = 1;
        let a = encode_patches(&p, &cfg, &patches, (1, 5)).unwrap();
        cfg.mini_batch_size = 5;
        let b = encode_patches(&p, &cfg, &patches, (1, 5)).unwrap();
        let diff = a.0.tokens.iter().zip(&b.0.tokens).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(diff <= 1e-5, "{diff}");
        for (x, y) in a.1.stages.iter().zip(&b.1.stages) {
            let d = x.data.iter().zip(&y.data).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
            assert!(d <= 1e-5, "{d}");
        }
    }

    #[test]
    fn identical_patches_give_identical_tokens() {
        let cfg = ModelConfig::toy().encoder;
        let one = random_patches(1, cfg.patch_size, 3);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let (tok, _) = encode_patches(&setup(&cfg), &cfg, &PatchBatch::new(cfg.patch_size, 3, data).unwrap(), (2, 1)).unwrap();
        assert_eq!(tok.patch(0), tok.patch(1));
    }

    #[test]
    fn cnn_backbone_shares_the_interface() {
        let mut cfg = ModelConfig::toy().encoder;
        cfg.backbone_kind = BackboneKind::Cnn;
        let (tok, skips) = encode_patches(&setup(&cfg), &cfg, &random_patches(2, cfg.patch_size, 4), (2, 1)).unwrap();
        assert_eq!(tok.dim, cfg.token_dim());
        assert_eq!(skips.stages.len(), cfg.num_stages());
        assert!(tok.tokens.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_patch_size_is_rejected() {
        let cfg = ModelConfig::toy().encoder;
        let err = encode_patches(&setup(&cfg), &cfg, &random_patches(1, 32, 5), (1, 1)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }
}
