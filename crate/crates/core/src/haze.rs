//! Paired data from the atmospheric scattering model
//! `hazy = clear * t + A * (1 - t)` with procedural transmission fields.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::SynthConfig;
use crate::error::{Error, Result};
use crate::image::{BitDepth, ImageTensor};

const OCTAVES: usize = 5;
const PERSISTENCE: f64 = 0.5;
/// Transmission at the edge of the hazy region; pixels below it count as
/// covered.
pub const COVERED_BELOW: f32 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazeParams {
    pub airlight: [f32; 3],
    pub coverage: f64,
    pub intensity: f64,
    pub t_min: f64,
    pub seed: u64,
}

impl HazeParams {
    /// Draw coverage, intensity and airlight from the configured ranges.
    pub fn sample(cfg: &SynthConfig, seed: u64) -> HazeParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11_c0de);
        let mut range = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let coverage = range(cfg.coverage_min, cfg.coverage_max);
        let intensity = range(cfg.intensity_min, cfg.intensity_max);
        let base = range(cfg.airlight_min, cfg.airlight_max);
        let jitter = Normal::new(0.0, cfg.chromatic_jitter.max(0.0)).expect("finite jitter");
        let mut airlight = [0.0f32; 3];
        for a in &mut airlight {
            *a = (base + jitter.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
        HazeParams {
            airlight,
            coverage,
            intensity,
            t_min: cfg.t_min,
            seed,
        }
    }
}

/// A scalar field over the image plane, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Field {
    pub fn constant(height: usize, width: usize, value: f32) -> Field {
        Field {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    /// Fraction of pixels with transmission below [`COVERED_BELOW`].
    pub fn coverage(&self) -> f64 {
        self.data.iter().filter(|&&t| t < COVERED_BELOW).count() as f64 / self.data.len().max(1) as f64
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Sum of value-noise octaves in `[0, 1]`.
pub fn value_noise(height: usize, width: usize, seed: u64) -> Field {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = height.max(width).max(1) as f64;
    let mut acc = vec![0.0f64; height * width];
    let mut amp = 1.0;
    let mut total = 0.0;
    for octave in 0..OCTAVES {
        let cells = 2usize << octave;
        let cell = side / cells as f64;
        let gh = (height as f64 / cell).ceil() as usize + 2;
        let gw = (width as f64 / cell).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
        for y in 0..height {
            let fy = (y as f64 + 0.5) / cell;
            let (y0, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
            for x in 0..width {
                let fx = (x as f64 + 0.5) / cell;
                let (x0, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
                let l = |yy: usize, xx: usize| lattice[yy * gw + xx];
                let top = l(y0, x0) * (1.0 - tx) + l(y0, x0 + 1) * tx;
                let bottom = l(y0 + 1, x0) * (1.0 - tx) + l(y0 + 1, x0 + 1) * tx;
                acc[y * width + x] += amp * (top * (1.0 - ty) + bottom * ty);
            }
        }
        total += amp;
        amp *= PERSISTENCE;
    }
    Field {
        height,
        width,
        data: acc.into_iter().map(|v| (v / total) as f32).collect(),
    }
}

/// Transmission field in `[t_min, 1]`. The noise is thresholded at its
/// `1 - coverage` quantile: pixels above the threshold fall below
/// [`COVERED_BELOW`], reaching `0.9 - intensity * (0.9 - t_min)` at the
/// densest point; pixels under it fade from 1 towards 0.9 at the edge.
pub fn generate_transmission(height: usize, width: usize, coverage: f64, intensity: f64, t_min: f64, seed: u64) -> Field {
    if coverage <= 0.0 || height * width == 0 {
        return Field::constant(height, width, 1.0);
    }
    let noise = value_noise(height, width, seed);
    let mut sorted = noise.data.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let covered = ((coverage.min(1.0) * n as f64).round() as usize).min(n);
    let (lo, hi) = (sorted[0] as f64, sorted[n - 1] as f64);
    let tau = if covered >= n { lo } else { sorted[n - 1 - covered] as f64 };
    let edge = COVERED_BELOW as f64;
    let densest = edge - intensity.clamp(0.0, 1.0) * (edge - t_min);
    let data = noise
        .data
        .iter()
        .map(|&v| {
            let v = v as f64;
            let t = if v > tau {
                let r = (v - tau) / (hi - tau).max(1e-12);
                edge - (edge - densest) * r - 1e-6
            } else {
                let r = if tau > lo { (v - lo) / (tau - lo) } else { 1.0 };
                1.0 - (1.0 - edge) * r.powi(4)
            };
            t.clamp(t_min, 1.0) as f32
        })
        .collect();
    Field { height, width, data }
}

/// Apply the scattering model per pixel and channel, clamped to `[0, 1]`.
pub fn synthesize_haze(clear: &ImageTensor, t: &Field, airlight: [f32; 3]) -> Result<ImageTensor> {
    let (h, w, c) = clear.dims();
    if (t.height, t.width) != (h, w) {
        return Err(Error::Shape(format!(
            "transmission is {}x{}, image is {h}x{w}",
            t.height, t.width
        )));
    }
    let mut out = clear.clone();
    for (i, px) in out.data_mut().chunks_mut(c).enumerate() {
        let tv = t.data[i];
        for (ch, v) in px.iter_mut().enumerate() {
            let a = airlight[ch.min(2)];
            *v = (*v * tv + a * (1.0 - tv)).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Haze a clear image with freshly generated parameters.
pub fn haze_image(clear: &ImageTensor, params: &HazeParams) -> Result<ImageTensor> {
    let t = generate_transmission(
        clear.height(),
        clear.width(),
        params.coverage,
        params.intensity,
        params.t_min,
        params.seed,
    );
    synthesize_haze(clear, &t, params.airlight)
}

/// Procedural "aerial" scene: smooth colored terrain, a few fields and
/// roads, and fine texture. Deterministic per seed.
pub fn synthetic_clear(size: usize, seed: u64) -> ImageTensor {
    let terrain = value_noise(size, size, seed.wrapping_mul(3).wrapping_add(1));
    let detail = value_noise(size, size, seed.wrapping_mul(7).wrapping_add(2));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let palette: Vec<[f32; 3]> = (0..3)
        .map(|_| [rng.random_range(0.1..0.8), rng.random_range(0.2..0.8), rng.random_range(0.1..0.7)])
        .collect();
    let rects: Vec<(usize, usize, usize, usize, [f32; 3])> = (0..6)
        .map(|_| {
            let (y, x) = (rng.random_range(0..size), rng.random_range(0..size));
            let (h, w) = (rng.random_range(size / 16 + 1..size / 4 + 2), rng.random_range(size / 16 + 1..size / 4 + 2));
            (y, x, h, w, [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
        })
        .collect();
    let road = (rng.random_range(0.0..size as f64), rng.random_range(-1.0..1.0f64));
    ImageTensor::from_fn(size, size, 3, |y, x, c| {
        let e = terrain.get(y, x);
        let (a, b, m) = if e < 0.5 {
            (palette[0], palette[1], e * 2.0)
        } else {
            (palette[1], palette[2], (e - 0.5) * 2.0)
        };
        let mut v = a[c] * (1.0 - m) + b[c] * m;
        for &(ry, rx, rh, rw, col) in &rects {
            if (ry..ry + rh).contains(&y) && (rx..rx + rw).contains(&x) {
                v = 0.3 * v + 0.7 * col[c];
            }
        }
        if ((y as f64 - road.0 - road.1 * x as f64).abs()) < 2.0 {
            v = 0.55;
        }
        (v + 0.25 * (detail.get(y, x) - 0.5)).clamp(0.0, 1.0)
    })
    .expect("dimensions are consistent")
}

/// `splitmix64`, used to derive per-item seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One line of a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub clear: PathBuf,
    pub hazy: PathBuf,
    pub split: Split,
    #[serde(flatten)]
    pub params: HazeParams,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub records: Vec<PairRecord>,
    pub skipped: Vec<PathBuf>,
}

impl Manifest {
    pub fn split(&self, which: Split) -> impl Iterator<Item = &PairRecord> {
        self.records.iter().filter(move |r| r.split == which)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.records {
            let line = serde_json::to_string(r).expect("record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: PairRecord = serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
            records.push(r);
        }
        Ok(Manifest {
            records,
            skipped: Vec::new(),
        })
    }

    /// Directory relative paths in the manifest are resolved against.
    pub fn resolve(base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// A loaded (clear, hazy) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub name: String,
    pub clear: ImageTensor,
    pub hazy: ImageTensor,
}

/// Load every pair of `split` from the manifest at `path`. Relative paths
/// resolve against the manifest's directory.
pub fn load_pairs(path: &Path, split: Split) -> Result<Vec<ImagePair>> {
    let manifest = Manifest::read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    manifest
        .split(split)
        .map(|r| {
            let clear = ImageTensor::load(Manifest::resolve(base, &r.clear))?;
            let hazy = ImageTensor::load(Manifest::resolve(base, &r.hazy))?;
            if clear.dims() != hazy.dims() {
                return Err(Error::format(
                    &r.hazy,
                    format!("hazy image is {:?}, clear image is {:?}", hazy.dims(), clear.dims()),
                ));
            }
            let name = r.hazy.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
            Ok(ImagePair { name, clear, hazy })
        })
        .collect()
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "tif" | "tiff")
    )
}

/// Haze every image in `clear_dir` into `out_dir/hazy/` and write
/// `out_dir/manifest.jsonl`. Unreadable images are skipped with a warning.
pub fn build_dataset_manifest(clear_dir: &Path, out_dir: &Path, cfg: &SynthConfig) -> Result<Manifest> {
    let mut files: Vec<PathBuf> = fs::read_dir(clear_dir)
        .map_err(|e| Error::io(clear_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    let hazy_dir = out_dir.join("hazy");
    fs::create_dir_all(&hazy_dir).map_err(|e| Error::io(&hazy_dir, e))?;
    let mut manifest = Manifest::default();
    let mut pending = Vec::new();
    for (i, path) in files.iter().enumerate() {
        let clear = match ImageTensor::load(path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                manifest.skipped.push(path.clone());
                continue;
            }
        };
        let params = HazeParams::sample(cfg, derive_seed(cfg.seed, i as u64));
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let hazy_rel = PathBuf::from("hazy").join(format!("{stem}.png"));
        haze_image(&clear, &params)?.save(out_dir.join(&hazy_rel), BitDepth::Eight)?;
        let clear_path = fs::canonicalize(path).unwrap_or_else(|_| path.clone());
        pending.push((clear_path, hazy_rel, params));
    }
    if pending.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no readable images in {}",
            clear_dir.display()
        )));
    }
    let n_train = ((pending.len() as f64) * cfg.split).round() as usize;
    for (i, (clear, hazy, params)) in pending.into_iter().enumerate() {
        manifest.records.push(PairRecord {
            clear,
            hazy,
            split: if i < n_train { Split::Train } else { Split::Test },
            params,
        });
    }
    manifest.write(&out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

/// Recreate every hazy image listed in a manifest from its clear source
/// and recorded parameters.
pub fn regenerate(manifest_path: &Path, out_dir: &Path) -> Result<usize> {
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    for r in &manifest.records {
        let clear = ImageTensor::load(Manifest::resolve(base, &r.clear))?;
        let target = out_dir.join(&r.hazy);
        if let Some(dir) = target.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        haze_image(&clear, &r.params)?.save(target, BitDepth::Eight)?;
    }
    Ok(manifest.records.len())
}

/// Write `cfg.count` procedural clear images of `cfg.image_size` pixels.
pub fn generate_clear_set(dir: &Path, cfg: &SynthConfig) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..cfg.count)
        .map(|i| {
            let path = dir.join(format!("scene_{i:04}.png"));
            synthetic_clear(cfg.image_size, derive_seed(cfg.seed ^ 0xc1ea, i as u64)).save(&path, BitDepth::Eight)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, v: f32) -> ImageTensor {
        ImageTensor::filled(h, w, 3, v).unwrap()
    }

    #[test]
    fn scattering_model_examples() {
        let clear = synthetic_clear(32, 1);
        let same = synthesize_haze(&clear, &Field::constant(32, 32, 1.0), [0.9; 3]).unwrap();
        assert_eq!(same, clear);
        let fog = synthesize_haze(&clear, &Field::constant(32, 32, 0.0), [0.9, 0.8, 0.7]).unwrap();
        assert!(fog.data().chunks(3).all(|p| p == [0.9, 0.8, 0.7]));
        let half = synthesize_haze(&gray(1, 1, 0.2), &Field::constant(1, 1, 0.5), [1.0; 3]).unwrap();
        assert!((half.get(0, 0, 0) - 0.6).abs() < 1e-7);
        assert!(matches!(
            synthesize_haze(&clear, &Field::constant(31, 32, 1.0), [1.0; 3]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_coverage_is_clear_air() {
        let t = generate_transmission(40, 50, 0.0, 1.0, 0.05, 3);
        assert!(t.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn full_coverage_reaches_t_min() {
        for seed in 0..5 {
            let t = generate_transmission(64, 64, 1.0, 1.0, 0.05, seed);
            assert!(t.min() <= 0.05 + 0.05);
            assert!(t.data.iter().all(|&v| (0.05..=1.0).contains(&v)));
        }
    }

    #[test]
    fn coverage_is_calibrated() {
        for seed in 0..20 {
            for cov in [0.1, 0.3, 0.5, 0.8, 1.0] {
                let t = generate_transmission(96, 80, cov, 0.6, 0.05, seed);
                assert!((t.coverage() - cov).abs() <= 0.05, "seed {seed} cov {cov}: {}", t.coverage());
            }
        }
    }

    #[test]
    fn min_transmission_falls_with_intensity() {
        let mins: Vec<f32> = [0.1, 0.4, 0.7, 1.0]
            .iter()
            .map(|&i| generate_transmission(64, 64, 0.5, i, 0.05, 9).min())
            .collect();
        assert!(mins.windows(2).all(|w| w[1] < w[0]), "{mins:?}");
    }

    #[test]
    fn fields_are_deterministic_and_smooth() {
        let a = generate_transmission(64, 64, 0.5, 0.8, 0.05, 4);
        assert_eq!(a, generate_transmission(64, 64, 0.5, 0.8, 0.05, 4));
        assert_ne!(a, generate_transmission(64, 64, 0.5, 0.8, 0.05, 5));
        let jump = (0..64)
            .flat_map(|y| (1..64).map(move |x| (y, x)))
            .map(|(y, x)| (a.get(y, x) - a.get(y, x - 1)).abs())
            .fold(0.0, f32::max);
        assert!(jump < 0.2, "{jump}");
    }

    #[test]
    fn hazier_means_brighter_under_bright_airlight() {
        let clear = gray(8, 8, 0.3);
        let mut prev = f32::INFINITY;
        for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let v = synthesize_haze(&clear, &Field::constant(8, 8, t), [0.9; 3]).unwrap().get(3, 3, 1);
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn sampled_params_stay_in_range() {
        let cfg = SynthConfig::default();
        for s in 0..50 {
            let p = HazeParams::sample(&cfg, s);
            assert!((0.3..=1.0).contains(&p.coverage) && (0.3..=1.0).contains(&p.intensity));
            assert!(p.airlight.iter().all(|a| (0.6..=1.0).contains(a)));
        }
    }
}
