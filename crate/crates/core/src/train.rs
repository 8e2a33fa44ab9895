//! Training: seeded random crops with quarter-turn rotations, L1 loss,
//! Adam with a cosine learning-rate schedule, and gradients accumulated
//! over patch mini-batches.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use haze_tensor::{backward, backward_from, no_grad, DType, Gradients, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bottleneck::{self, canonical_provenance};
use crate::checkpoint::{Checkpoint, OptimizerState, TrainMeta};
use crate::config::{ModelConfig, TrainConfig};
use crate::decoder;
use crate::encoder;
use crate::error::{Error, Result};
use crate::haze::{derive_seed, ImagePair};
use crate::image::ImageTensor;
use crate::model::{forward_graph, DehazeModel};
use crate::params::{Bound, ParamStore};
use crate::tiling::{partition, PatchBatch, TileLayout};

/// Gradients by parameter name, in f64.
pub type Grads = BTreeMap<String, Vec<f64>>;

/// Cosine annealing from `lr_init` at step 0 to `lr_min` at `total`.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let frac = if total == 0 { 1.0 } else { step.min(total) as f64 / total as f64 };
    cfg.lr_min + (cfg.lr_init - cfg.lr_min) / 2.0 * (1.0 + (PI * frac).cos())
}

/// Mean absolute difference over all elements.
pub fn l1_loss(pred: &ImageTensor, target: &ImageTensor) -> Result<f64> {
    if pred.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "l1 of {:?} against {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    let n = pred.data().len().max(1);
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .sum();
    Ok(sum / n as f64)
}

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Adam {
        let mut zeros = params.clone();
        zeros.iter_mut().for_each(|(_, p)| p.values.iter_mut().for_each(|v| *v = 0.0));
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            state: OptimizerState {
                step: 0,
                m: zeros.clone(),
                v: zeros,
            },
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let p = params.get_mut(&name).expect("known name");
            let m = self.state.m.get_mut(&name).expect("moment exists");
            let v = self.state.v.get_mut(&name).expect("moment exists");
            for i in 0..p.values.len() {
                let mi = self.beta1 * m.values[i] as f64 + (1.0 - self.beta1) * g[i];
                let vi = self.beta2 * v.values[i] as f64 + (1.0 - self.beta2) * g[i] * g[i];
                m.values[i] = mi as f32;
                v.values[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                p.values[i] = (p.values[i] as f64 - update) as f32;
            }
        }
    }
}

fn accumulate(into: &mut Grads, p: &Bound, g: &Gradients) {
    for (name, t) in p.iter() {
        if let Some(gt) = g.get(t) {
            let vals = gt.to_vec_f64();
            match into.get_mut(name) {
                Some(acc) => acc.iter_mut().zip(&vals).for_each(|(a, b)| *a += b),
                None => {
                    into.insert(name.clone(), vals);
                }
            }
        }
    }
}

/// 1 for pixels of the padded canvas that lie inside the image, laid out
/// like the patches of `layout`.
fn interior_mask(layout: &TileLayout) -> Vec<f64> {
    let p = layout.patch_size;
    let inside_row = |r: usize| (layout.pad_top..layout.pad_top + layout.original_height).contains(&r);
    let inside_col = |c: usize| (layout.pad_left..layout.pad_left + layout.original_width).contains(&c);
    let mut out = Vec::with_capacity(layout.num_patches() * p * p);
    for gr in 0..layout.grid_rows {
        for gc in 0..layout.grid_cols {
            for y in 0..p {
                for x in 0..p {
                    let live = inside_row(gr * p + y) && inside_col(gc * p + x);
                    out.push(if live { 1.0 } else { 0.0 });
                }
            }
        }
    }
    out
}

fn spans(n: usize, mb: usize) -> Vec<(usize, usize)> {
    let mb = mb.max(1);
    (0..n).step_by(mb).map(|s| (s, mb.min(n - s))).collect()
}

/// L1 loss of the full pipeline on one pair and its parameter gradients.
///
/// The encoder and decoder run over patch mini-batches. The encoder is
/// first run without history, the bottleneck backpropagates once over the
/// whole sequence, and each encoder mini-batch is then recomputed with
/// history and seeded with its share of the token and skip gradients.
pub fn loss_and_grads(p: &Bound, cfg: &ModelConfig, hazy: &ImageTensor, clear: &ImageTensor) -> Result<(f64, Grads)> {
    if hazy.dims() != clear.dims() {
        return Err(Error::Shape(format!(
            "hazy image is {:?}, clear image is {:?}",
            hazy.dims(),
            clear.dims()
        )));
    }
    if hazy.channels() != cfg.encoder.in_channels {
        return Err(Error::InvalidImage(format!(
            "image has {} channels, model expects {}",
            hazy.channels(),
            cfg.encoder.in_channels
        )));
    }
    let dtype = p.dtype();
    let ps = cfg.encoder.patch_size;
    let c = hazy.channels();
    let (patches, layout) = partition(hazy, ps)?;
    let (targets, _) = partition(clear, ps)?;
    let mask = interior_mask(&layout);
    let n = layout.num_patches();
    let norm = 1.0 / hazy.data().len() as f64;
    let upload = |b: &PatchBatch, s: usize, m: usize| Tensor::from_f32_as(b.range(s, m).to_vec(), &[m, ps, ps, c], dtype);
    let enc_spans = spans(n, cfg.encoder.mini_batch_size);
    let dec_spans = spans(n, cfg.decoder.mini_batch_size);
    let stages = cfg.encoder.num_stages();

    let (tokens, skips) = no_grad(|| {
        let mut toks = Vec::new();
        let mut skips: Vec<Vec<Tensor>> = vec![Vec::new(); stages];
        for &(s, m) in &enc_spans {
            let (t, sk) = encoder::forward(p, &cfg.encoder, &upload(&patches, s, m));
            toks.push(t);
            for (i, x) in sk.into_iter().enumerate() {
                skips[i].push(x);
            }
        }
        let skips: Vec<Tensor> = skips.iter().map(|v| Tensor::cat(v, 0)).collect();
        (Tensor::cat(&toks, 0), skips)
    });
    let tokens = tokens.requires_grad();
    let (t, d) = (tokens.dim(1), tokens.dim(3));
    let grid = (layout.grid_rows, layout.grid_cols);
    let pos = bottleneck::positional(p, &cfg.bottleneck, grid, &canonical_provenance(n, t * t))?;
    let mixed = bottleneck::forward(
        p,
        &cfg.bottleneck,
        &tokens.reshape(&[n * t * t, d]),
        pos.as_ref(),
        cfg.bottleneck.ffn_chunk,
    )
    .reshape(&[n, t, t, d]);
    let mixed_values = mixed.detach();

    let mut grads = Grads::new();
    let mut loss = 0.0;
    let mut d_mixed = Vec::with_capacity(dec_spans.len());
    let mut d_skips: Vec<Vec<Tensor>> = vec![Vec::new(); stages];
    for &(s, m) in &dec_spans {
        let tok = mixed_values.narrow(0, s, m).detach().requires_grad();
        let sks: Vec<Tensor> = skips.iter().map(|x| x.narrow(0, s, m).detach().requires_grad()).collect();
        let out = decoder::forward(p, &cfg.encoder, &cfg.decoder, &tok, &sks);
        let live = Tensor::from_f64_as(mask[s * ps * ps..(s + m) * ps * ps].to_vec(), &[m, ps, ps, 1], dtype);
        let l = out.sub(&upload(&targets, s, m)).abs().mul(&live).sum_all().scale(norm);
        loss += l.item();
        let g = backward(&l);
        accumulate(&mut grads, p, &g);
        let or_zero = |x: &Tensor| g.get(x).cloned().unwrap_or_else(|| Tensor::zeros(x.shape(), dtype));
        d_mixed.push(or_zero(&tok));
        for (i, x) in sks.iter().enumerate() {
            d_skips[i].push(or_zero(x));
        }
    }
    let d_skips: Vec<Tensor> = d_skips.iter().map(|v| Tensor::cat(v, 0)).collect();

    let g = backward_from(&mixed, Tensor::cat(&d_mixed, 0));
    accumulate(&mut grads, p, &g);
    let d_tokens = g.get(&tokens).cloned().unwrap_or_else(|| Tensor::zeros(tokens.shape(), dtype));

    for &(s, m) in &enc_spans {
        let (_, sk) = encoder::forward(p, &cfg.encoder, &upload(&patches, s, m));
        let mut surrogate = sk[stages - 1].mul(&d_tokens.narrow(0, s, m)).sum_all();
        for (x, dx) in sk.iter().zip(&d_skips) {
            surrogate = surrogate.add(&x.mul(&dx.narrow(0, s, m)).sum_all());
        }
        accumulate(&mut grads, p, &backward(&surrogate));
    }
    Ok((loss, grads))
}

/// L1 loss of the single-graph pipeline, for finite-difference checks.
pub fn graph_loss(p: &Bound, cfg: &ModelConfig, hazy: &ImageTensor, clear: &ImageTensor) -> Result<f64> {
    no_grad(|| {
        let layout = TileLayout::new(hazy.height(), hazy.width(), cfg.encoder.patch_size)?;
        let out = forward_graph(p, cfg, &hazy.to_tensor(p.dtype()), &layout)?;
        let target = clear.to_tensor(p.dtype());
        Ok(out.sub(&target).abs().sum_all().item() / hazy.data().len() as f64)
    })
}

/// Crop and rotation of one sample, drawn from a generator keyed on
/// `(seed, epoch, index)`.
pub fn augment(pair: &ImagePair, cfg: &TrainConfig, epoch: usize, index: usize) -> Result<(ImageTensor, ImageTensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, epoch as u64), index as u64));
    let (h, w, _) = pair.hazy.dims();
    let crop = cfg.crop_size;
    if crop > h || crop > w {
        return Err(Error::InvalidImage(format!(
            "{}: {h}x{w} is smaller than the {crop}px training crop",
            pair.name
        )));
    }
    let top = rng.random_range(0..=h - crop);
    let left = rng.random_range(0..=w - crop);
    let turns = if cfg.rotate90 { rng.random_range(0..4u32) } else { 0 };
    let hazy = pair.hazy.crop(top, left, crop, crop)?.rotate90(turns);
    let clear = pair.clear.crop(top, left, crop, crop)?.rotate90(turns);
    Ok((hazy, clear))
}

/// Sample order of one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed ^ 0x0bde, epoch as u64)));
    order
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub history: Vec<StepRecord>,
    pub best_loss: Option<f64>,
    pub last_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,loss\n");
        for r in &self.history {
            s += &format!("{},{:e},{:e}\n", r.step, r.lr, r.loss);
        }
        s
    }
}

/// Hash of the model and training configuration (output location
/// excluded), recorded in checkpoints.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let train = TrainConfig {
        checkpoint_dir: String::new(),
        ..train.clone()
    };
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model).expect("config serializes"));
    h.update(serde_json::to_vec(&train).expect("config serializes"));
    hex::encode(h.finalize())
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const DIVERGED_CHECKPOINT: &str = "diverged.ckpt";
pub const LOSS_LOG: &str = "loss.csv";

/// Train `model` on `pairs` for `cfg.epochs` epochs of
/// `ceil(pairs / batch_size)` steps. Weights are always updated in f32.
pub fn train(mut model: DehazeModel, pairs: &[ImagePair], cfg: &TrainConfig) -> Result<(DehazeModel, TrainReport)> {
    let problems = cfg.validate(&model.config);
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no training pairs".into()));
    }
    let out_dir = (!cfg.checkpoint_dir.is_empty()).then(|| PathBuf::from(&cfg.checkpoint_dir));
    let mut csv = match &out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOSS_LOG);
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "step,lr,loss").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let hash = config_hash(&model.config, cfg);
    let steps_per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut adam = Adam::new(&model.params, cfg);
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(pairs.len(), cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let lr = lr_at(step, total, cfg);
            let p = model.params.bind(DType::F32, true);
            let mut grads = Grads::new();
            let mut loss = 0.0;
            for &i in batch {
                let (hazy, clear) = augment(&pairs[i], cfg, epoch, i)?;
                let (l, g) = loss_and_grads(&p, &model.config, &hazy, &clear)?;
                loss += l / batch.len() as f64;
                for (name, v) in g {
                    let acc = grads.entry(name).or_insert_with(|| vec![0.0; v.len()]);
                    acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b / batch.len() as f64);
                }
            }
            drop(p);
            let finite = loss.is_finite() && grads.values().all(|g| g.iter().all(|v| v.is_finite()));
            if !finite {
                if let Some(dir) = &out_dir {
                    let snap = snapshot(&model, &adam, epoch, step, Some(loss), report.best_loss, &hash);
                    snap.save(&dir.join(DIVERGED_CHECKPOINT))?;
                }
                log::error!("non-finite loss {loss} at step {step} (epoch {epoch})");
                return Err(Error::Diverged { step, loss });
            }
            adam.step(&mut model.params, &grads, lr);
            let rec = StepRecord { step, epoch, lr, loss };
            if let Some((f, path)) = &mut csv {
                writeln!(f, "{},{:e},{:e}", rec.step, rec.lr, rec.loss).map_err(|e| Error::io(&*path, e))?;
            }
            log::debug!("step {step} epoch {epoch} lr {lr:.3e} loss {loss:.6}");
            report.history.push(rec);
            epoch_loss += loss;
            step += 1;
        }
        let mean = epoch_loss / steps_per_epoch as f64;
        log::info!("epoch {epoch}: mean loss {mean:.6}");
        let improved = report.best_loss.is_none_or(|b| mean < b);
        if improved {
            report.best_loss = Some(mean);
        }
        if let Some(dir) = &out_dir {
            let ck = snapshot(&model, &adam, epoch, step, Some(mean), report.best_loss, &hash);
            let last = dir.join(LAST_CHECKPOINT);
            ck.save(&last)?;
            report.last_checkpoint = Some(last);
            if improved {
                let best = dir.join(BEST_CHECKPOINT);
                ck.save(&best)?;
                report.best_checkpoint = Some(best);
            }
            if let Some((f, path)) = &mut csv {
                f.flush().map_err(|e| Error::io(&*path, e))?;
            }
        }
    }
    Ok((model, report))
}

fn snapshot(
    model: &DehazeModel,
    adam: &Adam,
    epoch: usize,
    step: usize,
    loss: Option<f64>,
    best_loss: Option<f64>,
    hash: &str,
) -> Checkpoint {
    Checkpoint {
        model: model.clone(),
        meta: TrainMeta {
            epoch,
            step,
            loss,
            best_loss,
            config_hash: Some(hash.to_string()),
        },
        optimizer: Some(adam.state.clone()),
    }
}

/// Analytic against central-difference gradients of [`graph_loss`] for
/// `samples` randomly drawn scalar parameters. Returns
/// `(name, index, analytic, numeric)` per sample, evaluated in f64.
pub fn gradient_check(
    model: &DehazeModel,
    hazy: &ImageTensor,
    clear: &ImageTensor,
    samples: usize,
    eps: f64,
    seed: u64,
) -> Result<Vec<(String, usize, f64, f64)>> {
    let p = model.params.bind(DType::F64, true);
    let (_, grads) = loss_and_grads(&p, &model.config, hazy, clear)?;
    drop(p);
    let names: Vec<(String, usize)> = model.params.iter().map(|(n, p)| (n.clone(), p.values.len())).collect();
    let total: usize = names.iter().map(|n| n.1).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut k = rng.random_range(0..total);
        let (name, idx) = names
            .iter()
            .find_map(|(n, len)| {
                if k < *len {
                    Some((n.clone(), k))
                } else {
                    k -= len;
                    None
                }
            })
            .expect("index within total");
        let probe = |delta: f64| {
            let p = model.params.bind_with(DType::F64, false, |n, prm| {
                let mut v: Vec<f64> = prm.values.iter().map(|&x| x as f64).collect();
                if n == name {
                    v[idx] += delta;
                }
                v
            });
            graph_loss(&p, &model.config, hazy, clear)
        };
        let numeric = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
        let analytic = grads.get(&name).map_or(0.0, |g| g[idx]);
        out.push((name, idx, analytic, numeric));
    }
    Ok(out)
}

/// Central-difference step for [`gradient_check`]. Larger steps straddle
/// the clamp and L1 kinks of the micro pipeline.
pub const FD_EPS: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|)`, with the denominator floored at 1e-6 so
/// gradients near the f64 roundoff level of the probe are compared
/// absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Write the loss history CSV to `path`.
pub fn write_loss_csv(report: &TrainReport, path: &Path) -> Result<()> {
    fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))
}
