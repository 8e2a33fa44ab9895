//! Attribution maps for dehazing: path-integrated gradients of a windowed
//! intensity detector on the model output, from a clear baseline to the
//! hazy input.

use std::fs;
use std::io::Write;
use std::path::Path;

use haze_tensor::{backward, DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{AttributionConfig, ChannelMode, Precision, StepWeighting};
use crate::error::{Error, Result};
use crate::image::{BitDepth, ImageTensor};
use crate::model::DehazeModel;

/// Square detector window with top-left corner `(x, y)` and side `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributionRegion {
    pub x: usize,
    pub y: usize,
    pub l: usize,
}

impl AttributionRegion {
    pub fn check(&self, height: usize, width: usize) -> Result<()> {
        if self.l == 0 || self.x + self.l > width || self.y + self.l > height {
            return Err(Error::Attribution(format!(
                "window x={} y={} l={} does not fit a {height}x{width} image",
                self.x, self.y, self.l
            )));
        }
        Ok(())
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y..self.y + self.l).contains(&y) && (self.x..self.x + self.l).contains(&x)
    }
}

/// Signed per-pixel scores; `channels` is 1 (summed) or the image's
/// channel count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributionMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    #[serde(skip)]
    pub data: Vec<f64>,
    pub region: AttributionRegion,
    pub steps: usize,
    pub step_weighting: StepWeighting,
    pub model_id: String,
    /// `D(F(I))` and `D(F(I'))`.
    pub detector_input: f64,
    pub detector_baseline: f64,
}

impl AttributionMap {
    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Per-pixel scores summed over channels.
    pub fn pixel_scores(&self) -> Vec<f64> {
        self.data.chunks(self.channels).map(|c| c.iter().sum()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Dense little-endian float64 array in NPY format.
    pub fn write_npy(&self, path: &Path) -> Result<()> {
        let shape = if self.channels == 1 {
            format!("({}, {})", self.height, self.width)
        } else {
            format!("({}, {}, {})", self.height, self.width, self.channels)
        };
        let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape}, }}");
        // Magic (6) + version (2) + length (2) + header + newline, padded to 64.
        while (10 + header.len() + 1) % 64 != 0 {
            header.push(' ');
        }
        header.push('\n');
        let mut out = Vec::with_capacity(10 + header.len() + self.data.len() * 8);
        out.extend_from_slice(b"\x93NUMPY\x01\x00");
        out.extend_from_slice(&(header.len() as u16).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// JSON sidecar with the region, step settings, model checksum and
    /// detector values.
    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        let mut v = serde_json::to_value(self).expect("map metadata serializes");
        v["sum"] = self.total().into();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "{}", serde_json::to_string_pretty(&v).expect("json")).map_err(|e| Error::io(path, e))
    }
}

/// Sum of intensities over the window and all channels.
pub fn detector_response(image: &ImageTensor, region: &AttributionRegion) -> Result<f64> {
    region.check(image.height(), image.width())?;
    let mut total = 0.0;
    for y in region.y..region.y + region.l {
        for x in region.x..region.x + region.l {
            for c in 0..image.channels() {
                total += image.get(y, x, c) as f64;
            }
        }
    }
    Ok(total)
}

fn detector(out: &Tensor, region: &AttributionRegion) -> Tensor {
    out.narrow(0, region.y, region.l).narrow(1, region.x, region.l).sum_all()
}

/// Attribution for an arbitrary differentiable image-to-image map `f`.
pub fn compute_dam_with(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    dtype: DType,
    hazy: &ImageTensor,
    baseline: &ImageTensor,
    region: &AttributionRegion,
    cfg: &AttributionConfig,
    model_id: &str,
) -> Result<AttributionMap> {
    if hazy.dims() != baseline.dims() {
        return Err(Error::Attribution(format!(
            "input is {:?} but baseline is {:?}",
            hazy.dims(),
            baseline.dims()
        )));
    }
    if cfg.steps == 0 {
        return Err(Error::Attribution("steps must be at least 1".into()));
    }
    let (h, w, c) = hazy.dims();
    region.check(h, w)?;
    let m = cfg.steps as f64;
    let input: Vec<f64> = hazy.data().iter().map(|&v| v as f64).collect();
    let base: Vec<f64> = baseline.data().iter().map(|&v| v as f64).collect();
    let diff: Vec<f64> = input.iter().zip(&base).map(|(a, b)| a - b).collect();
    let mut acc = vec![0.0f64; h * w * c];
    if diff.iter().any(|&d| d != 0.0) {
        for k in 1..=cfg.steps {
            let alpha = k as f64 / m;
            let point: Vec<f64> = base.iter().zip(&diff).map(|(b, d)| b + alpha * d).collect();
            let x = Tensor::from_f64_as(point, &[h, w, c], dtype).requires_grad();
            let y = f(&x)?;
            if y.shape()[..2] != [h, w] {
                return Err(Error::Shape(format!("model output {:?} for input {h}x{w}", y.shape())));
            }
            let grads = backward(&detector(&y, region));
            let Some(g) = grads.get(&x) else { continue };
            for (a, (g, d)) in acc.iter_mut().zip(g.to_vec_f64().iter().zip(&diff)) {
                *a += match cfg.step_weighting {
                    StepWeighting::Riemann => g * d / m,
                    // Δγ = γ(k/m) - γ((k+1)/m) = -(I - I') / m, then / m.
                    StepWeighting::AsPrinted => g * (-d / m) / m,
                };
            }
        }
    }
    let (data, channels) = match cfg.channel_mode {
        ChannelMode::PerChannel => (acc, c),
        ChannelMode::Summed => (acc.chunks(c).map(|px| px.iter().sum()).collect(), 1),
    };
    let eval = |img: &ImageTensor| -> Result<f64> {
        let y = haze_tensor::no_grad(|| f(&img.to_tensor(dtype)))?;
        Ok(detector(&y, region).item())
    };
    Ok(AttributionMap {
        height: h,
        width: w,
        channels,
        data,
        region: *region,
        steps: cfg.steps,
        step_weighting: cfg.step_weighting,
        model_id: model_id.to_string(),
        detector_input: eval(hazy)?,
        detector_baseline: eval(baseline)?,
    })
}

/// Attribution through the full tiled model. Half precision is rejected:
/// its gradients are too coarse to integrate.
pub fn compute_dam(
    model: &DehazeModel,
    hazy: &ImageTensor,
    baseline: &ImageTensor,
    region: &AttributionRegion,
    cfg: &AttributionConfig,
) -> Result<AttributionMap> {
    if model.config.precision == Precision::Fp16 {
        return Err(Error::NotDifferentiable(
            "fp16 inference (use precision = \"fp32\" for attribution)".into(),
        ));
    }
    let p = model.params.bind(DType::F32, false);
    compute_dam_with(
        |x| model.forward_graph(&p, x),
        DType::F32,
        hazy,
        baseline,
        region,
        cfg,
        &model.fingerprint(),
    )
}

/// Blend a blue-white-red rendering of the max-normalized map over the
/// underlay (alpha = |score|), outline the window, and save as PNG.
pub fn render_heatmap(map: &AttributionMap, underlay: &ImageTensor, path: &Path) -> Result<()> {
    render_heatmap_image(map, underlay)?.save(path, BitDepth::Eight)
}

pub fn render_heatmap_image(map: &AttributionMap, underlay: &ImageTensor) -> Result<ImageTensor> {
    let (h, w) = (map.height, map.width);
    if (underlay.height(), underlay.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "map is {h}x{w}, underlay is {}x{}",
            underlay.height(),
            underlay.width()
        )));
    }
    let scores = map.pixel_scores();
    let peak = scores.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let r = map.region;
    let outline = |y: usize, x: usize| {
        let (y, x) = (y as isize, x as isize);
        let (y0, x0, l) = (r.y as isize - 1, r.x as isize - 1, r.l as isize + 1);
        let on_row = (y == y0 || y == y0 + l) && (x0..=x0 + l).contains(&x);
        let on_col = (x == x0 || x == x0 + l) && (y0..=y0 + l).contains(&y);
        on_row || on_col
    };
    ImageTensor::from_fn(h, w, 3, |y, x, c| {
        if outline(y, x) {
            return [1.0, 0.85, 0.0][c];
        }
        let base = if underlay.channels() == 1 {
            underlay.get(y, x, 0)
        } else {
            underlay.get(y, x, c.min(underlay.channels() - 1))
        };
        let v = if peak > 0.0 { scores[y * w + x] / peak } else { 0.0 };
        let extreme = if v >= 0.0 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
        let a = v.abs() as f32;
        (1.0 - a) * base + a * extreme[c]
    })
}
