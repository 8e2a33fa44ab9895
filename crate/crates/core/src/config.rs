//! Typed configuration, TOML loading and dotted-key overrides.
//!
//! Precedence is defaults < file < overrides. Keys are checked against the
//! default document so that typos are reported with the closest valid keys
//! instead of being silently ignored.

use std::path::Path;

use haze_tensor::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    #[serde(rename = "swin-t")]
    SwinT,
    #[serde(rename = "swin-s")]
    SwinS,
    #[serde(rename = "swin-b")]
    SwinB,
    #[serde(rename = "swin-l")]
    SwinL,
    #[serde(rename = "cnn")]
    Cnn,
}

impl BackboneKind {
    pub fn is_windowed(self) -> bool {
        !matches!(self, BackboneKind::Cnn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    Exact,
    Approximate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalEmbedding {
    #[serde(rename = "learned-2d")]
    Learned2d,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpsampleKind {
    TransposedConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    Fp32,
    Fp16,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::Fp32 => DType::F32,
            Precision::Fp16 => DType::F16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub backbone_kind: BackboneKind,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub stage_depths: Vec<usize>,
    /// Attention heads per stage (windowed backbones only).
    pub num_heads: Vec<usize>,
    pub window_size: usize,
    pub mlp_ratio: f64,
    pub downsample_factor_total: usize,
    pub mini_batch_size: usize,
}

impl EncoderConfig {
    /// Standard widths for a backbone family at the given patch size.
    pub fn preset(kind: BackboneKind) -> EncoderConfig {
        let (embed_dim, depths, heads): (usize, &[usize], &[usize]) = match kind {
            BackboneKind::SwinT => (96, &[2, 2, 6, 2], &[3, 6, 12, 24]),
            BackboneKind::SwinS => (96, &[2, 2, 18, 2], &[3, 6, 12, 24]),
            BackboneKind::SwinB => (128, &[2, 2, 18, 2], &[4, 8, 16, 32]),
            BackboneKind::SwinL => (192, &[2, 2, 18, 2], &[6, 12, 24, 48]),
            BackboneKind::Cnn => (64, &[2, 2, 2, 2], &[1, 1, 1, 1]),
        };
        EncoderConfig {
            backbone_kind: kind,
            patch_size: 256,
            in_channels: 3,
            embed_dim,
            stage_depths: depths.to_vec(),
            num_heads: heads.to_vec(),
            window_size: 8,
            mlp_ratio: 4.0,
            downsample_factor_total: 32,
            mini_batch_size: 4,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_depths.len()
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Side of the stage-`s` feature map inside one patch.
    pub fn stage_spatial(&self, stage: usize) -> usize {
        self.patch_size / 4 >> stage
    }

    pub fn token_dim(&self) -> usize {
        self.stage_dim(self.num_stages().saturating_sub(1))
    }

    pub fn token_spatial(&self) -> usize {
        self.patch_size / self.downsample_factor_total.max(1)
    }

    /// Attention window used at a stage (clipped to the feature map).
    pub fn stage_window(&self, stage: usize) -> usize {
        self.window_size.min(self.stage_spatial(stage)).max(1)
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::preset(BackboneKind::SwinT)
    }
}

/// Violations of the encoder invariants; empty when the config is usable.
pub fn validate_config(cfg: &EncoderConfig) -> Vec<String> {
    let mut v = Vec::new();
    if cfg.mini_batch_size == 0 {
        v.push("encoder.mini_batch_size must be positive".to_string());
    }
    if cfg.embed_dim == 0 {
        v.push("encoder.embed_dim must be positive".to_string());
    }
    if cfg.downsample_factor_total == 0 {
        v.push("encoder.downsample_factor_total must be positive".to_string());
    }
    if cfg.patch_size < crate::tiling::MIN_PATCH_SIZE {
        v.push(format!(
            "encoder.patch_size {} is below the minimum of {}",
            cfg.patch_size,
            crate::tiling::MIN_PATCH_SIZE
        ));
    }
    if cfg.in_channels != 1 && cfg.in_channels != 3 {
        v.push(format!("encoder.in_channels must be 1 or 3, got {}", cfg.in_channels));
    }
    if !(cfg.mlp_ratio > 0.0) {
        v.push("encoder.mlp_ratio must be positive".to_string());
    }
    if cfg.stage_depths.is_empty() {
        v.push("encoder.stage_depths must list at least one stage".to_string());
        return v;
    }
    let expected = 4usize << (cfg.num_stages() - 1);
    if cfg.downsample_factor_total != 0 && cfg.downsample_factor_total != expected {
        v.push(format!(
            "encoder.downsample_factor_total {} does not match {} stages (expected {expected})",
            cfg.downsample_factor_total,
            cfg.num_stages()
        ));
    }
    if cfg.downsample_factor_total != 0 && cfg.patch_size % cfg.downsample_factor_total != 0 {
        v.push(format!(
            "encoder.patch_size {} is not divisible by downsample_factor_total {}",
            cfg.patch_size, cfg.downsample_factor_total
        ));
    }
    if cfg.backbone_kind.is_windowed() {
        if cfg.window_size == 0 {
            v.push("encoder.window_size must be positive".to_string());
        }
        if cfg.num_heads.len() != cfg.num_stages() {
            v.push(format!(
                "encoder.num_heads has {} entries for {} stages",
                cfg.num_heads.len(),
                cfg.num_stages()
            ));
        } else {
            for (s, &h) in cfg.num_heads.iter().enumerate() {
                if h == 0 || cfg.stage_dim(s) % h != 0 {
                    v.push(format!(
                        "encoder stage {s}: width {} is not divisible by {h} heads",
                        cfg.stage_dim(s)
                    ));
                }
            }
        }
        if v.is_empty() {
            for s in 0..cfg.num_stages() {
                let (side, w) = (cfg.stage_spatial(s), cfg.stage_window(s));
                if side % w != 0 {
                    v.push(format!(
                        "encoder stage {s}: window {w} does not tile the {side}x{side} feature map"
                    ));
                }
            }
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApproxParams {
    /// Number of hash buckets; a power of two (one random hyperplane per bit).
    pub hash_buckets: usize,
    pub block_size: usize,
    /// Number of segment summaries standing in for the keys outside a
    /// query's own block.
    pub low_rank: usize,
    pub seed: u64,
}

impl Default for ApproxParams {
    fn default() -> Self {
        ApproxParams {
            hash_buckets: 16,
            block_size: 64,
            low_rank: 16,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BottleneckConfig {
    pub depth: usize,
    pub num_heads: usize,
    pub token_dim: usize,
    pub ffn_ratio: usize,
    pub attention_mode: AttentionMode,
    pub approx_params: ApproxParams,
    pub positional_embedding: PositionalEmbedding,
    /// Largest patch grid (rows or cols) the positional table covers.
    pub max_grid: usize,
    /// Tokens per feed-forward chunk at inference; 0 processes all at once.
    pub ffn_chunk: usize,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        BottleneckConfig {
            depth: 2,
            num_heads: 8,
            token_dim: 768,
            ffn_ratio: 4,
            attention_mode: AttentionMode::Approximate,
            approx_params: ApproxParams::default(),
            positional_embedding: PositionalEmbedding::Learned2d,
            max_grid: 64,
            ffn_chunk: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub stage_depths: Vec<usize>,
    pub upsample_kind: UpsampleKind,
    pub mini_batch_size: usize,
    /// Channels of the full-resolution map fed to the output convolution.
    pub head_channels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            stage_depths: vec![2, 2, 6, 2],
            upsample_kind: UpsampleKind::TransposedConv,
            mini_batch_size: 4,
            head_channels: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub precision: Precision,
    pub encoder: EncoderConfig,
    pub bottleneck: BottleneckConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            precision: Precision::Fp32,
            encoder: EncoderConfig::default(),
            bottleneck: BottleneckConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Small windowed model used for training runs on a CPU.
    pub fn toy() -> ModelConfig {
        ModelConfig {
            precision: Precision::Fp32,
            encoder: EncoderConfig {
                backbone_kind: BackboneKind::SwinT,
                patch_size: 64,
                in_channels: 3,
                embed_dim: 32,
                stage_depths: vec![1, 1, 1],
                num_heads: vec![1, 2, 4],
                window_size: 8,
                mlp_ratio: 2.0,
                downsample_factor_total: 16,
                mini_batch_size: 4,
            },
            bottleneck: BottleneckConfig {
                depth: 2,
                num_heads: 4,
                token_dim: 128,
                attention_mode: AttentionMode::Exact,
                ..BottleneckConfig::default()
            },
            decoder: DecoderConfig {
                stage_depths: vec![1, 1, 1],
                mini_batch_size: 4,
                head_channels: 8,
                ..DecoderConfig::default()
            },
        }
    }

    /// Four-stage narrow model with 256 px patches for memory profiling.
    pub fn memory_profile() -> ModelConfig {
        ModelConfig {
            precision: Precision::Fp32,
            encoder: EncoderConfig {
                backbone_kind: BackboneKind::SwinT,
                patch_size: 256,
                in_channels: 3,
                embed_dim: 16,
                stage_depths: vec![1, 1, 1, 1],
                num_heads: vec![1, 2, 4, 8],
                window_size: 8,
                mlp_ratio: 2.0,
                downsample_factor_total: 32,
                mini_batch_size: 4,
            },
            bottleneck: BottleneckConfig {
                depth: 2,
                num_heads: 4,
                token_dim: 128,
                ffn_chunk: 1024,
                ..BottleneckConfig::default()
            },
            decoder: DecoderConfig {
                stage_depths: vec![1, 1, 1, 1],
                mini_batch_size: 4,
                head_channels: 8,
                ..DecoderConfig::default()
            },
        }
    }

    /// A few hundred parameters; small enough for finite-difference checks.
    pub fn micro() -> ModelConfig {
        ModelConfig {
            precision: Precision::Fp32,
            encoder: EncoderConfig {
                backbone_kind: BackboneKind::SwinT,
                patch_size: 16,
                in_channels: 3,
                embed_dim: 4,
                stage_depths: vec![1, 1],
                num_heads: vec![1, 2],
                window_size: 2,
                mlp_ratio: 1.0,
                downsample_factor_total: 8,
                mini_batch_size: 2,
            },
            bottleneck: BottleneckConfig {
                depth: 1,
                num_heads: 2,
                token_dim: 8,
                ffn_ratio: 1,
                attention_mode: AttentionMode::Exact,
                max_grid: 2,
                ..BottleneckConfig::default()
            },
            decoder: DecoderConfig {
                stage_depths: vec![0, 0],
                mini_batch_size: 2,
                head_channels: 2,
                ..DecoderConfig::default()
            },
        }
    }

    pub fn profile(name: &str) -> Option<ModelConfig> {
        match name {
            "default" => Some(ModelConfig::default()),
            "toy" => Some(ModelConfig::toy()),
            "memory" => Some(ModelConfig::memory_profile()),
            "micro" => Some(ModelConfig::micro()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = validate_config(&self.encoder);
        let b = &self.bottleneck;
        if b.depth == 0 {
            v.push("bottleneck.depth must be at least 1".to_string());
        }
        if b.num_heads == 0 || b.token_dim % b.num_heads != 0 {
            v.push(format!(
                "bottleneck.token_dim {} is not divisible by num_heads {}",
                b.token_dim, b.num_heads
            ));
        }
        if b.ffn_ratio == 0 {
            v.push("bottleneck.ffn_ratio must be positive".to_string());
        }
        if b.max_grid == 0 {
            v.push("bottleneck.max_grid must be positive".to_string());
        }
        let a = &b.approx_params;
        if a.block_size == 0 || a.low_rank == 0 {
            v.push("bottleneck.approx_params block_size and low_rank must be positive".to_string());
        }
        if !a.hash_buckets.is_power_of_two() {
            v.push(format!(
                "bottleneck.approx_params.hash_buckets {} is not a power of two",
                a.hash_buckets
            ));
        }
        if !self.encoder.stage_depths.is_empty() && b.token_dim != self.encoder.token_dim() {
            v.push(format!(
                "bottleneck.token_dim {} does not match the encoder output width {}",
                b.token_dim,
                self.encoder.token_dim()
            ));
        }
        let d = &self.decoder;
        if d.stage_depths.len() != self.encoder.stage_depths.len() {
            v.push(format!(
                "decoder has {} stages but the encoder has {}",
                d.stage_depths.len(),
                self.encoder.stage_depths.len()
            ));
        }
        if d.mini_batch_size == 0 {
            v.push("decoder.mini_batch_size must be positive".to_string());
        }
        if d.head_channels == 0 {
            v.push("decoder.head_channels must be positive".to_string());
        }
        v
    }

    pub fn check(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    L1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub crop_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss: LossKind,
    /// Random rotation by multiples of 90 degrees, applied to both images
    /// of a pair.
    pub rotate90: bool,
    pub seed: u64,
    /// Keep the best and last checkpoints here (empty disables writing).
    pub checkpoint_dir: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            crop_size: 2048,
            batch_size: 2,
            epochs: 500,
            lr_init: 1e-3,
            lr_min: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            loss: LossKind::L1,
            rotate90: true,
            seed: 0,
            checkpoint_dir: String::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Vec<String> {
        let mut v = Vec::new();
        let p = model.encoder.patch_size;
        if self.crop_size == 0 || p == 0 || self.crop_size % p != 0 {
            v.push(format!(
                "train.crop_size {} is not a multiple of encoder.patch_size {p}",
                self.crop_size
            ));
        }
        if !(self.lr_init > 0.0) {
            v.push("train.lr_init must be positive".to_string());
        }
        if !(self.lr_min >= 0.0) || self.lr_min > self.lr_init {
            v.push("train.lr_min must lie in [0, lr_init]".to_string());
        }
        if self.batch_size == 0 || self.epochs == 0 {
            v.push("train.batch_size and train.epochs must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            v.push("train.beta1 and train.beta2 must lie in [0, 1)".to_string());
        }
        if !(self.eps > 0.0) {
            v.push("train.eps must be positive".to_string());
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepWeighting {
    /// Standard Riemann sum: each step carries `(I - I') / m`.
    Riemann,
    /// The per-step factor `Δγ / m` with `Δγ = γ(k/m) - γ((k+1)/m)`.
    AsPrinted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelMode {
    Summed,
    PerChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionConfig {
    pub steps: usize,
    pub step_weighting: StepWeighting,
    pub channel_mode: ChannelMode,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            steps: 100,
            step_weighting: StepWeighting::Riemann,
            channel_mode: ChannelMode::Summed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub coverage_min: f64,
    pub coverage_max: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub t_min: f64,
    pub airlight_min: f64,
    pub airlight_max: f64,
    pub chromatic_jitter: f64,
    pub split: f64,
    pub seed: u64,
    /// Size and count of procedurally generated clear images (`synth
    /// --generate`).
    pub image_size: usize,
    pub count: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            coverage_min: 0.3,
            coverage_max: 1.0,
            intensity_min: 0.3,
            intensity_max: 1.0,
            t_min: 0.05,
            airlight_min: 0.8,
            airlight_max: 1.0,
            chromatic_jitter: 0.03,
            split: 0.8,
            seed: 0,
            image_size: 512,
            count: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeConfig {
    /// Device memory budget in MiB; 0 means unlimited.
    pub memory_limit_mb: usize,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig { memory_limit_mb: 0 }
    }
}

impl RuntimeConfig {
    pub fn memory_limit_bytes(&self) -> Option<usize> {
        (self.memory_limit_mb > 0).then(|| self.memory_limit_mb << 20)
    }
}

/// Everything a command needs. Model keys live at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Config {
    #[serde(flatten)]
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub attribution: AttributionConfig,
    pub synth: SynthConfig,
    pub runtime: RuntimeConfig,
}

impl Config {
    pub fn with_model(model: ModelConfig) -> Config {
        Config {
            model,
            ..Config::default()
        }
    }

    /// Layer a TOML document and `key=value` overrides over `base`.
    pub fn resolve(base: Config, document: Option<&str>, overrides: &[String]) -> Result<Config> {
        let mut tree = to_table(&base)?;
        let known = known_keys(&tree);
        let mut problems = Vec::new();
        if let Some(doc) = document {
            let doc: Table = toml::from_str(doc).map_err(|e| Error::Config(vec![e.to_string()]))?;
            merge(&mut tree, doc, "", &known, &mut problems);
        }
        for raw in overrides {
            match parse_override(raw) {
                Some((key, value)) => {
                    if known.iter().any(|k| *k == key) {
                        set_path(&mut tree, &key, value);
                    } else {
                        problems.push(unknown_key(&key, &known));
                    }
                }
                None => problems.push(format!("override `{raw}` is not of the form key=value")),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let cfg: Config = Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, base: Config, overrides: &[String]) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::resolve(base, Some(&text), overrides)
    }

    pub fn check(&self) -> Result<()> {
        let mut v = self.model.validate();
        v.extend(self.train.validate(&self.model));
        if self.attribution.steps == 0 {
            v.push("attribution.steps must be at least 1".to_string());
        }
        let s = &self.synth;
        if !(0.0..=1.0).contains(&s.split) {
            v.push("synth.split must lie in [0, 1]".to_string());
        }
        if !(0.0 < s.t_min && s.t_min < 0.9) {
            v.push("synth.t_min must lie in (0, 0.9)".to_string());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Every settable dotted key.
    pub fn keys() -> Vec<String> {
        known_keys(&to_table(&Config::default()).expect("default config serializes"))
    }
}

fn to_table(cfg: &Config) -> Result<Table> {
    match Value::try_from(cfg) {
        Ok(Value::Table(t)) => Ok(t),
        Ok(_) => unreachable!("config serializes to a table"),
        Err(e) => Err(Error::Config(vec![e.to_string()])),
    }
}

fn known_keys(tree: &Table) -> Vec<String> {
    fn walk(t: &Table, prefix: &str, out: &mut Vec<String>) {
        for (k, v) in t {
            let key = join(prefix, k);
            match v {
                Value::Table(inner) => walk(inner, &key, out),
                _ => out.push(key),
            }
        }
    }
    let mut out = Vec::new();
    walk(tree, "", &mut out);
    out
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn merge(tree: &mut Table, doc: Table, prefix: &str, known: &[String], problems: &mut Vec<String>) {
    for (k, v) in doc {
        let key = join(prefix, &k);
        match (tree.get_mut(&k), v) {
            (Some(Value::Table(dst)), Value::Table(src)) => merge(dst, src, &key, known, problems),
            (Some(Value::Table(_)), _) => {
                problems.push(format!("`{key}` is a section, not a value"));
            }
            (Some(dst), v) => *dst = coerce(dst, v),
            (None, _) => problems.push(unknown_key(&key, known)),
        }
    }
}

/// Integers are accepted where floats are expected.
fn coerce(old: &Value, new: Value) -> Value {
    match (old, new) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (_, v) => v,
    }
}

fn parse_override(raw: &str) -> Option<(String, Value)> {
    let (key, value) = raw.split_once('=')?;
    let key = key.trim();
    if key.is_empty() {
        return None;
    }
    let value = value.trim();
    let parsed = toml::from_str::<Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()));
    Some((key.to_string(), parsed))
}

fn set_path(tree: &mut Table, key: &str, value: Value) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut t = tree;
    for p in parts {
        t = match t.get_mut(p) {
            Some(Value::Table(inner)) => inner,
            _ => unreachable!("known key has table parents"),
        };
    }
    let slot = t.get_mut(last).expect("known key");
    *slot = coerce(slot, value);
}

/// Error text for an unrecognized key with up to three close matches.
pub fn unknown_key(key: &str, known: &[String]) -> String {
    let mut scored: Vec<(f64, &String)> = known
        .iter()
        .map(|k| {
            let leaf = k.rsplit('.').next().unwrap_or(k);
            let key_leaf = key.rsplit('.').next().unwrap_or(key);
            let s = strsim::jaro_winkler(key, k).max(strsim::jaro_winkler(key_leaf, leaf) - 0.05);
            (s, k)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    let near: Vec<&str> = scored
        .iter()
        .take(3)
        .filter(|(s, _)| *s > 0.6)
        .map(|(_, k)| k.as_str())
        .collect();
    if near.is_empty() {
        format!("unknown key `{key}`")
    } else {
        format!("unknown key `{key}` (did you mean {})", near.join(", "))
    }
}
