//! The full pipeline: partition, encode, global bottleneck, decode,
//! reassemble.

use haze_tensor::{meter, DType, Tensor};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bottleneck::{self, canonical_provenance, GlobalSequence};
use crate::config::ModelConfig;
use crate::decoder;
use crate::encoder;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::params::{Bound, Init, ParamStore};
use crate::tiling::{partition, partition_tensor, reassemble, reassemble_tensor, TileLayout};

/// Device-memory high-water marks of one inference run, in bytes.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunStats {
    pub num_patches: usize,
    pub total_tokens: usize,
    pub weights: usize,
    pub encoder_peak: usize,
    pub bottleneck_peak: usize,
    pub decoder_peak: usize,
    pub peak: usize,
    /// Host bytes staged between stages (tokens and skips).
    pub host_staging: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DehazeModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl DehazeModel {
    /// Freshly initialized weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<DehazeModel> {
        config.check()?;
        let params = Self::init_params(&config, seed);
        Ok(DehazeModel { config, params })
    }

    /// Existing weights under `config`, which may change run-time settings
    /// (precision, mini-batch sizes, attention mode) but not shapes.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<DehazeModel> {
        config.check()?;
        let expected = Self::init_params(&config, 0);
        let mut problems: Vec<String> = expected
            .iter()
            .filter_map(|(name, e)| match params.get(name) {
                None => Some(format!("{name} (missing)")),
                Some(p) if p.shape != e.shape => Some(format!("{name} (stored {:?}, expected {:?})", p.shape, e.shape)),
                _ => None,
            })
            .collect();
        problems.extend(params.names().filter(|n| expected.get(n).is_none()).map(|n| format!("{n} (unexpected)")));
        if !problems.is_empty() {
            return Err(Error::CheckpointShape(problems));
        }
        Ok(DehazeModel { config, params })
    }

    pub(crate) fn init_params(config: &ModelConfig, seed: u64) -> ParamStore {
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, seed);
        encoder::register(&mut init, &config.encoder);
        bottleneck::register(&mut init, &config.bottleneck, config.encoder.token_spatial().pow(2));
        decoder::register(&mut init, &config.encoder, &config.decoder);
        params
    }

    pub fn dtype(&self) -> DType {
        self.config.precision.dtype()
    }

    /// SHA-256 over parameter names, shapes and values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter() {
            h.update(name.as_bytes());
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &p.values {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn dehaze(&self, image: &ImageTensor, memory_limit: Option<usize>) -> Result<ImageTensor> {
        self.dehaze_with_stats(image, memory_limit).map(|(img, _)| img)
    }

    /// Inference with per-stage memory accounting. `memory_limit` is a
    /// device budget in bytes; crossing it fails with the stage that did.
    pub fn dehaze_with_stats(
        &self,
        image: &ImageTensor,
        memory_limit: Option<usize>,
    ) -> Result<(ImageTensor, RunStats)> {
        let cfg = &self.config;
        if image.channels() != cfg.encoder.in_channels {
            return Err(Error::InvalidImage(format!(
                "image has {} channels, model expects {}",
                image.channels(),
                cfg.encoder.in_channels
            )));
        }
        let (patches, layout) = partition(image, cfg.encoder.patch_size)?;
        meter::with_limit(memory_limit, || {
            let base = meter::current();
            meter::reset_peak();
            let p = self.params.bind(self.dtype(), false);
            let mut stats = RunStats {
                num_patches: layout.num_patches(),
                weights: meter::current() - base,
                ..RunStats::default()
            };
            encoder::check_memory("weights", 0)?;

            let (tokens, skips) =
                encoder::encode_patches(&p, &cfg.encoder, &patches, (layout.grid_rows, layout.grid_cols))?;
            drop(patches);
            stats.encoder_peak = meter::peak() - base;
            stats.total_tokens = tokens.total_tokens();
            stats.host_staging = skips.size_in_bytes() + tokens.tokens.len() * 4;

            meter::reset_peak();
            let seq = bottleneck::bottleneck_forward(&p, &cfg.bottleneck, &GlobalSequence::from_tokens(tokens))?;
            stats.bottleneck_peak = meter::peak() - base;

            meter::reset_peak();
            let out = decoder::decode_patches(&p, &cfg.encoder, &cfg.decoder, &seq, &skips)?;
            stats.decoder_peak = meter::peak() - base;
            stats.peak = stats.encoder_peak.max(stats.bottleneck_peak).max(stats.decoder_peak);
            Ok((reassemble(&out, &layout)?, stats))
        })
    }

    /// Differentiable forward of a whole image tensor `[H, W, C]` with all
    /// patches in one batch.
    pub fn forward_graph(&self, p: &Bound, image: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let layout = TileLayout::new(image.dim(0), image.dim(1), cfg.encoder.patch_size)?;
        forward_graph(p, cfg, image, &layout)
    }
}

/// Graph-mode pipeline shared by training and attribution.
pub fn forward_graph(p: &Bound, cfg: &ModelConfig, image: &Tensor, layout: &TileLayout) -> Result<Tensor> {
    let patches = partition_tensor(image, layout);
    let (tokens, skips) = encoder::forward(p, &cfg.encoder, &patches);
    let (n, t, d) = (tokens.dim(0), tokens.dim(1), tokens.dim(3));
    let grid = (layout.grid_rows, layout.grid_cols);
    let pos = bottleneck::positional(p, &cfg.bottleneck, grid, &canonical_provenance(n, t * t))?;
    let flat = tokens.reshape(&[n * t * t, d]);
    let mixed = bottleneck::forward(p, &cfg.bottleneck, &flat, pos.as_ref(), 0).reshape(&[n, t, t, d]);
    let out = decoder::forward(p, &cfg.encoder, &cfg.decoder, &mixed, &skips);
    Ok(reassemble_tensor(&out, layout))
}
