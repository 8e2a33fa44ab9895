//! PSNR, SSIM, evaluation reports and memory profiling.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::dam::AttributionRegion;
use crate::config::{AttentionMode, ModelConfig, Precision};
use crate::error::{Error, Result};
use crate::haze::synthetic_clear;
use crate::image::ImageTensor;
use crate::model::{DehazeModel, RunStats};

/// Value reported for identical images in aggregates.
pub const PSNR_CAP: f64 = 100.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_dims(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("images are {:?} and {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn to_f64(img: &ImageTensor) -> Vec<f64> {
    img.data().iter().map(|&v| v as f64).collect()
}

/// `10 log10(1 / MSE)` for intensities in `[0, 1]`; infinite when equal.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_dims(a, b)?;
    Ok(psnr_values(&to_f64(a), &to_f64(b)))
}

/// [`psnr`] over raw double-precision buffers of equal length.
pub fn psnr_values(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len().max(1) as f64;
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn cap_psnr(v: f64) -> f64 {
    v.min(PSNR_CAP)
}

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable 'valid' filtering of an `h x w` plane.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over 'valid' windows, per channel then averaged.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w, c) = a.dims();
    ssim_values(&to_f64(a), &to_f64(b), h, w, c)
}

/// [`ssim`] over interleaved `h x w x c` double-precision buffers.
pub fn ssim_values(a: &[f64], b: &[f64], h: usize, w: usize, c: usize) -> Result<f64> {
    assert!(a.len() == h * w * c && b.len() == a.len());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let k = gaussian_kernel();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    for ch in 0..c {
        let plane = |img: &[f64]| -> Vec<f64> { img.iter().skip(ch).step_by(c).copied().collect() };
        let (x, y) = (plane(a), plane(b));
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter(p, h, w, &k));
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / c as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct ImageRecord {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    /// Scores of the untouched hazy input against the reference.
    pub hazy_psnr: f64,
    pub hazy_ssim: f64,
    pub seconds: f64,
    pub memory: RunStats,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Aggregate {
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub hazy_psnr: f64,
    pub hazy_ssim: f64,
    pub seconds: f64,
    pub peak_memory: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct EvalReport {
    pub images: Vec<ImageRecord>,
    pub aggregate: Aggregate,
}

fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        v.into()
    } else {
        serde_json::Value::Null
    }
}

impl EvalReport {
    pub fn push(&mut self, record: ImageRecord) {
        self.images.push(record);
        let n = self.images.len() as f64;
        let mean = |f: &dyn Fn(&ImageRecord) -> f64| self.images.iter().map(f).sum::<f64>() / n;
        self.aggregate = Aggregate {
            count: self.images.len(),
            psnr: mean(&|r| cap_psnr(r.psnr)),
            ssim: mean(&|r| r.ssim),
            hazy_psnr: mean(&|r| cap_psnr(r.hazy_psnr)),
            hazy_ssim: mean(&|r| r.hazy_ssim),
            seconds: self.images.iter().map(|r| r.seconds).sum(),
            peak_memory: self.images.iter().map(|r| r.memory.peak).max().unwrap_or(0),
        };
    }

    /// One JSON record per image (`"kind": "image"`) followed by an
    /// aggregate record. Infinite PSNR is written as null.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.images {
            let mut v = serde_json::to_value(r).expect("record serializes");
            v["kind"] = "image".into();
            v["psnr"] = finite_or_null(r.psnr);
            v["hazy_psnr"] = finite_or_null(r.hazy_psnr);
            writeln!(out, "{v}").unwrap();
        }
        let mut v = serde_json::to_value(&self.aggregate).expect("aggregate serializes");
        v["kind"] = "aggregate".into();
        writeln!(out, "{v}").unwrap();
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "name,psnr,ssim,hazy_psnr,hazy_ssim,seconds,encoder_peak,bottleneck_peak,decoder_peak,peak\n",
        );
        for r in &self.images {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.name,
                r.psnr,
                r.ssim,
                r.hazy_psnr,
                r.hazy_ssim,
                r.seconds,
                r.memory.encoder_peak,
                r.memory.bottleneck_peak,
                r.memory.decoder_peak,
                r.memory.peak
            )
            .unwrap();
        }
        out
    }
}

/// Score `output` and the untouched `hazy` input against `reference`, over
/// the whole image or only the square `crop`.
pub fn score_pair(
    name: &str,
    output: &ImageTensor,
    hazy: &ImageTensor,
    reference: &ImageTensor,
    crop: Option<&AttributionRegion>,
    seconds: f64,
    memory: RunStats,
) -> Result<ImageRecord> {
    for (what, img) in [("output", output), ("hazy image", hazy)] {
        if img.dims() != reference.dims() {
            return Err(Error::Shape(format!(
                "{name}: {what} is {:?}, reference is {:?}",
                img.dims(),
                reference.dims()
            )));
        }
    }
    let view = |img: &ImageTensor| -> Result<ImageTensor> {
        match crop {
            Some(r) => {
                r.check(img.height(), img.width())?;
                img.crop(r.y, r.x, r.l, r.l)
            }
            None => Ok(img.clone()),
        }
    };
    let (output, hazy, reference) = (view(output)?, view(hazy)?, view(reference)?);
    Ok(ImageRecord {
        name: name.to_string(),
        psnr: psnr(&output, &reference)?,
        ssim: ssim(&output, &reference)?,
        hazy_psnr: psnr(&hazy, &reference)?,
        hazy_ssim: ssim(&hazy, &reference)?,
        seconds,
        memory,
    })
}

/// Dehaze `hazy` and score the result with [`score_pair`].
pub fn evaluate_pair(
    model: &DehazeModel,
    name: &str,
    hazy: &ImageTensor,
    reference: &ImageTensor,
    memory_limit: Option<usize>,
    crop: Option<&AttributionRegion>,
) -> Result<ImageRecord> {
    if hazy.dims() != reference.dims() {
        return Err(Error::Shape(format!(
            "{name}: hazy image is {:?}, reference is {:?}",
            hazy.dims(),
            reference.dims()
        )));
    }
    let start = Instant::now();
    let (out, memory) = model.dehaze_with_stats(hazy, memory_limit)?;
    let seconds = start.elapsed().as_secs_f64();
    score_pair(name, &out, hazy, reference, crop, seconds, memory)
}

/// One profiled image size. A failed run (typically out of memory) is
/// kept as a data point with its error message.
#[derive(Debug, Clone, Serialize)]
pub struct ProfilePoint {
    pub size: usize,
    pub precision: Precision,
    pub seconds: f64,
    pub memory: Option<RunStats>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ProfileReport {
    pub points: Vec<ProfilePoint>,
    /// Reference point: the full-width reference model needs about 21 GB at
    /// 10240 x 10240 in fp16. Not reproducible at these widths.
    pub reference_note: String,
}

impl ProfileReport {
    /// Peak at `large` over peak at `small`, when both runs succeeded.
    pub fn ratio(&self, small: usize, large: usize) -> Option<f64> {
        let peak = |s: usize| {
            self.points
                .iter()
                .find(|p| p.size == s)
                .and_then(|p| p.memory.as_ref())
                .map(|m| m.peak as f64)
        };
        Some(peak(large)? / peak(small)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("size,precision,seconds,weights,encoder_peak,bottleneck_peak,decoder_peak,peak,error\n");
        for p in &self.points {
            let m = p.memory.clone().unwrap_or_default();
            writeln!(
                out,
                "{},{:?},{},{},{},{},{},{},{}",
                p.size,
                p.precision,
                p.seconds,
                m.weights,
                m.encoder_peak,
                m.bottleneck_peak,
                m.decoder_peak,
                m.peak,
                p.error.as_deref().unwrap_or("").replace(',', ";")
            )
            .unwrap();
        }
        out
    }
}

/// `[T, token_dim]` sequences resident on the device while the bottleneck
/// attends: input, positions, normalized input, query/key input, q, k, v,
/// their hash-sorted copies, the chunked output, its concatenation and the
/// unsorted result.
pub const BOTTLENECK_RESIDENT_SEQUENCES: usize = 13;

/// Upper bound on the peak of a run with `large_tokens` bottleneck tokens,
/// given a measured run with fewer. Encoder and decoder work on a fixed
/// mini-batch and keep skips on the host, so their peaks carry over; the
/// bottleneck grows by its resident sequences. Feed-forward and attention
/// transients are chunked and do not grow; without feed-forward chunking
/// or with exact attention there is no linear bound and `None` is returned.
pub fn predicted_peak(cfg: &ModelConfig, small: &RunStats, large_tokens: usize) -> Option<usize> {
    if cfg.bottleneck.attention_mode == AttentionMode::Exact || cfg.bottleneck.ffn_chunk == 0 {
        return None;
    }
    let elem = cfg.precision.dtype().size_in_bytes();
    let growth = BOTTLENECK_RESIDENT_SEQUENCES * large_tokens.saturating_sub(small.total_tokens) * cfg.bottleneck.token_dim * elem;
    Some(small.encoder_peak.max(small.decoder_peak).max(small.bottleneck_peak + growth))
}

/// Run square synthetic inputs of each size through `model` at
/// `precision`, recording per-stage peaks and wall time.
pub fn profile_run(
    model: &DehazeModel,
    sizes: &[usize],
    precision: Precision,
    memory_limit: Option<usize>,
) -> ProfileReport {
    let mut model = model.clone();
    model.config.precision = precision;
    let mut report = ProfileReport {
        reference_note: "full-width reference model: about 21 GB at 10240x10240, fp16".into(),
        ..ProfileReport::default()
    };
    for &size in sizes {
        let image = synthetic_clear(size, size as u64);
        let start = Instant::now();
        let result = model.dehaze_with_stats(&image, memory_limit);
        let seconds = start.elapsed().as_secs_f64();
        let (memory, error) = match result {
            Ok((_, stats)) => (Some(stats), None),
            Err(e) => (None, Some(e.to_string())),
        };
        report.points.push(ProfilePoint {
            size,
            precision,
            seconds,
            memory,
            error,
        });
    }
    report
}
