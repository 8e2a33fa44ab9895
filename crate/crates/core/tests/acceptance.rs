//! Acceptance suite. Runs every criterion and prints one PASS/FAIL line
//! per criterion; exits non-zero if any fails.
//!
//! `cargo test -p dehaze-core --test acceptance -- 3 7` runs a subset.

use std::cell::OnceCell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use dehaze_core::attention::{
    approximate_attention, clustered_qkv, exact_attention, projected_qkv, relative_frobenius,
};
use dehaze_core::bottleneck::{bottleneck_forward, GlobalSequence};
use dehaze_core::checkpoint::{load_checkpoint, save_checkpoint};
use dehaze_core::config::{
    ApproxParams, AttributionConfig, ChannelMode, ModelConfig, Precision, StepWeighting, SynthConfig, TrainConfig,
};
use dehaze_core::dam::{compute_dam, compute_dam_with, AttributionRegion};
use dehaze_core::haze::{
    derive_seed, generate_transmission, haze_image, synthesize_haze, synthetic_clear, Field, HazeParams, ImagePair,
};
use dehaze_core::metrics::{predicted_peak, profile_run, psnr, ssim};
use dehaze_core::train::{gradient_check, relative_error, train, FD_EPS};
use dehaze_core::{decoder, encoder, partition, reassemble, DehazeModel, ImageTensor, Result};
use haze_tensor::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn noise(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::from_fn(h, w, c, |_, _, _| rng.random::<f32>()).unwrap()
}

fn max_abs(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn tiling() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut padded = 0;
    for case in 0..200 {
        let patch = [16, 32, 64, 128, 256][rng.random_range(0..5)];
        let lo = (patch / 4).max(1);
        let mut side = || {
            // A quarter of the sides are exact multiples of the patch size.
            if rng.random_bool(0.25) {
                patch * rng.random_range(1..=(700 / patch).max(1))
            } else {
                rng.random_range(lo..=700)
            }
        };
        let (h, w) = (side(), side());
        let c = if rng.random_bool(0.5) { 3 } else { 1 };
        let img = noise(h, w, c, case);
        let (patches, layout) = partition(&img, patch)?;
        padded += usize::from(h % patch != 0 || w % patch != 0);
        let back = reassemble(&patches, &layout)?;
        let same = back.dims() == img.dims()
            && back.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Ok(Err(format!("case {case}: {h}x{w}x{c} patch {patch} differs")));
        }
    }
    Ok(Ok(format!("200 cases bit-exact ({padded} needed padding)")))
}

fn mini_batch() -> Result<Outcome> {
    let img = synthetic_clear(256, 3).crop(0, 0, 200, 190)?;
    let base = DehazeModel::new(ModelConfig::toy(), 5)?;
    let cfg = &base.config;
    let (patches, layout) = partition(&img, cfg.encoder.patch_size)?;
    let grid = (layout.grid_rows, layout.grid_cols);
    let n = patches.len();
    let p = base.params.bind(DType::F32, false);

    let encode = |mb: usize| {
        let mut enc = cfg.encoder.clone();
        enc.mini_batch_size = mb;
        encoder::encode_patches(&p, &enc, &patches, grid)
    };
    let (tok1, skip1) = encode(1)?;
    let seq = bottleneck_forward(&p, &cfg.bottleneck, &GlobalSequence::from_tokens(tok1.clone()))?;
    let decode = |mb: usize| {
        let mut dec = cfg.decoder.clone();
        dec.mini_batch_size = mb;
        decoder::decode_patches(&p, &cfg.encoder, &dec, &seq, &skip1)
    };
    let dec1 = decode(1)?;
    let full = |mb: usize| {
        let mut m = base.clone();
        m.config.encoder.mini_batch_size = mb;
        m.config.decoder.mini_batch_size = mb;
        m.dehaze(&img, None)
    };
    let full1 = full(1)?;

    let (mut enc_d, mut dec_d, mut full_d) = (0.0f32, 0.0f32, 0.0f32);
    for mb in [4, n] {
        let (tok, skip) = encode(mb)?;
        enc_d = enc_d.max(max_abs(&tok.tokens, &tok1.tokens));
        for (a, b) in skip.stages.iter().zip(&skip1.stages) {
            enc_d = enc_d.max(max_abs(&a.data, &b.data));
        }
        dec_d = dec_d.max(max_abs(decode(mb)?.data(), dec1.data()));
        full_d = full_d.max(max_abs(full(mb)?.data(), full1.data()));
    }
    let worst = enc_d.max(dec_d).max(full_d);
    Ok(check(
        worst <= 1e-5,
        format!("{n} patches, sizes 1/4/{n}: encoder {enc_d:.1e}, decoder {dec_d:.1e}, pipeline {full_d:.1e} (<= 1e-5)"),
    ))
}

fn memory() -> Result<Outcome> {
    let m = DehazeModel::new(ModelConfig::memory_profile(), 2)?;
    let r = profile_run(&m, &[1024, 2048], Precision::Fp32, None);
    let stats = |i: usize| {
        let pt = &r.points[i];
        pt.memory.clone().ok_or_else(|| pt.error.clone().unwrap_or_default())
    };
    let (small, large) = match (stats(0), stats(1)) {
        (Ok(s), Ok(l)) => (s, l),
        (Err(e), _) | (_, Err(e)) => return Ok(Err(format!("profiling failed: {e}"))),
    };
    let ratio = large.peak as f64 / small.peak as f64;
    let Some(bound) = predicted_peak(&m.config, &small, large.total_tokens) else {
        return Ok(Err("no retained-tensor bound for this configuration".into()));
    };
    let bound_ratio = bound as f64 / small.peak as f64;
    let mb = |b: usize| b as f64 / 1e6;
    Ok(check(
        large.num_patches == 4 * small.num_patches && ratio <= 1.6 && large.peak <= bound && bound_ratio <= 1.6,
        format!(
            "peak {:.1} MB -> {:.1} MB, ratio {ratio:.3} (<= 1.6); retained-tensor bound {:.1} MB, ratio {bound_ratio:.3}",
            mb(small.peak),
            mb(large.peak),
            mb(bound)
        ),
    ))
}

fn attention() -> Result<Outcome> {
    let p = ApproxParams::default();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for t in [512, 1024, 2048, 4096] {
        let (q, k, v) = projected_qkv(t, 768, 8, 0x5eed);
        let err = relative_frobenius(&approximate_attention(&q, &k, &v, &p), &exact_attention(&q, &k, &v));
        worst = worst.max(err);
        parts.push(format!("{t}: {err:.3}"));
    }
    let (q, k, v) = clustered_qkv(2, 512, 32, 8, 0.02, 7);
    let err = relative_frobenius(&approximate_attention(&q, &k, &v, &p), &exact_attention(&q, &k, &v));
    worst = worst.max(err);
    parts.push(format!("clustered 512: {err:.3}"));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut fallback = true;
    for t in [1, 17, p.block_size] {
        let mut r = || Tensor::from_f64((0..2 * t * 8).map(|_| rng.random_range(-2.0..2.0)).collect(), &[2, t, 8]);
        let (q, k, v) = (r(), r(), r());
        let a: Vec<u64> = approximate_attention(&q, &k, &v, &p).to_vec_f64().iter().map(|x| x.to_bits()).collect();
        let e: Vec<u64> = exact_attention(&q, &k, &v).to_vec_f64().iter().map(|x| x.to_bits()).collect();
        fallback &= a == e;
    }
    Ok(check(
        worst <= 0.1 && fallback,
        format!(
            "relative Frobenius {} (<= 0.1); fallback below {} tokens {}",
            parts.join(", "),
            p.block_size + 1,
            if fallback { "bit-identical" } else { "DIFFERS" }
        ),
    ))
}

const HELD_OUT: u64 = 4;

fn smoke_pair(i: u64) -> ImagePair {
    let cfg = SynthConfig {
        coverage_min: 0.8,
        intensity_min: 0.8,
        ..SynthConfig::default()
    };
    let clear = synthetic_clear(512, derive_seed(77, i));
    let hazy = haze_image(&clear, &HazeParams::sample(&cfg, derive_seed(78, i))).unwrap();
    ImagePair {
        name: format!("smoke_{i}"),
        clear,
        hazy,
    }
}

struct Smoke {
    model: DehazeModel,
    first: f64,
    last: f64,
    hazy_psnr: f64,
    out_psnr: f64,
    seconds: f64,
}

fn run_smoke() -> Result<Smoke> {
    let start = Instant::now();
    let pairs: Vec<ImagePair> = (0..16).map(smoke_pair).collect();
    let cfg = TrainConfig {
        crop_size: 256,
        batch_size: 2,
        epochs: 25,
        lr_init: 3e-3,
        ..TrainConfig::default()
    };
    let (model, report) = train(DehazeModel::new(ModelConfig::toy(), 1)?, &pairs, &cfg)?;
    let per_epoch = pairs.len() / cfg.batch_size;
    let h = &report.history;
    let mean = |s: &[dehaze_core::train::StepRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&h[..per_epoch]), mean(&h[h.len() - per_epoch..]));
    let (mut hazy_psnr, mut out_psnr) = (0.0, 0.0);
    for i in 16..16 + HELD_OUT {
        let p = smoke_pair(i);
        hazy_psnr += psnr(&p.hazy, &p.clear)? / HELD_OUT as f64;
        out_psnr += psnr(&model.dehaze(&p.hazy, None)?, &p.clear)? / HELD_OUT as f64;
    }
    Ok(Smoke {
        model,
        first,
        last,
        hazy_psnr,
        out_psnr,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn smoke_model(cell: &OnceCell<Smoke>) -> Result<&Smoke> {
    if cell.get().is_none() {
        let _ = cell.set(run_smoke()?);
    }
    Ok(cell.get().unwrap())
}

fn completeness(smoke: &OnceCell<Smoke>) -> Result<Outcome> {
    let trained = smoke_model(smoke)?;
    let p = smoke_pair(16);
    let hazy = p.hazy.crop(128, 128, 256, 256)?;
    let clear = p.clear.crop(128, 128, 256, 256)?;
    let region = AttributionRegion { x: 96, y: 96, l: 64 };
    let cfg = AttributionConfig {
        steps: 100,
        step_weighting: StepWeighting::Riemann,
        channel_mode: ChannelMode::PerChannel,
    };
    let map = compute_dam(&trained.model, &hazy, &clear, &region, &cfg)?;
    let delta = map.detector_input - map.detector_baseline;
    let gap = (map.total() - delta).abs() / delta.abs();

    let zero = compute_dam(&trained.model, &hazy, &hazy, &region, &cfg)?;
    let nullity = zero.data.iter().all(|&v| v == 0.0);

    let (a, b) = (noise(24, 20, 3, 8), noise(24, 20, 3, 9));
    let small = AttributionRegion { x: 5, y: 7, l: 9 };
    let id = compute_dam_with(|x| Ok(x.clone()), DType::F64, &a, &b, &small, &cfg, "identity")?;
    let mut id_err: f64 = 0.0;
    for y in 0..24 {
        for x in 0..20 {
            for c in 0..3 {
                let i = (y * 20 + x) * 3 + c;
                let want = if small.contains(y, x) { a.data()[i] as f64 - b.data()[i] as f64 } else { 0.0 };
                id_err = id_err.max((id.data[i] - want).abs());
            }
        }
    }
    Ok(check(
        gap <= 0.01 && nullity && id_err <= 1e-12,
        format!(
            "sum {:.4} vs D(F(I)) - D(F(I')) {delta:.4}, gap {:.3}% (<= 1%); zero path {}; identity max error {id_err:.1e}",
            map.total(),
            gap * 100.0,
            if nullity { "exactly zero" } else { "NONZERO" },
        ),
    ))
}

fn haze() -> Result<Outcome> {
    let clear = synthetic_clear(64, 4);
    let a = [0.9f32, 0.85, 0.8];
    let same = synthesize_haze(&clear, &Field::constant(64, 64, 1.0), a)?;
    let opaque = synthesize_haze(&clear, &Field::constant(64, 64, 0.0), a)?;
    let ident = same == clear;
    let air = opaque.data().chunks(3).all(|px| px == a);
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        for cov in [0.2, 0.5, 0.8] {
            let t = generate_transmission(128, 128, cov, 0.7, 0.05, seed);
            worst = worst.max((t.coverage() - cov).abs());
        }
    }
    Ok(check(
        ident && air && worst <= 0.05,
        format!(
            "t=1 gives clear {}, t=0 gives airlight {}; coverage error {worst:.4} over 20 seeds (<= 0.05)",
            if ident { "exactly" } else { "NOT exactly" },
            if air { "exactly" } else { "NOT exactly" },
        ),
    ))
}

fn training(smoke: &OnceCell<Smoke>) -> Result<Outcome> {
    let s = smoke_model(smoke)?;
    let ratio = s.last / s.first;
    let gain = s.out_psnr - s.hazy_psnr;
    Ok(check(
        ratio <= 0.5 && gain >= 1.0,
        format!(
            "L1 {:.4} -> {:.4}, ratio {ratio:.3} (<= 0.5); held-out PSNR hazy {:.2} dB, output {:.2} dB, gain {gain:.2} dB (>= 1)",
            s.first, s.last, s.hazy_psnr, s.out_psnr
        ),
    ))
}

fn gradients() -> Result<Outcome> {
    let m = DehazeModel::new(ModelConfig::micro(), 9)?;
    let clear = synthetic_clear(32, 4);
    let hazy = haze_image(&clear, &HazeParams::sample(&SynthConfig::default(), 4))?;
    let samples = gradient_check(&m, &hazy, &clear, 20, FD_EPS, 11)?;
    let worst = samples.iter().map(|s| relative_error(s.2, s.3)).fold(0.0, f64::max);
    Ok(check(
        m.params.num_scalars() <= 2000 && worst <= 1e-3,
        format!(
            "{} parameters, {} samples, worst relative error {worst:.2e} (<= 1e-3)",
            m.params.num_scalars(),
            samples.len()
        ),
    ))
}

fn direct_ssim(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let (h, w, c) = a.dims();
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let norm: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for ch in 0..c {
        let mut sum = 0.0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let px = |img: &ImageTensor, i: usize, j: usize| img.get(y0 + i, x0 + j, ch) as f64;
                let wt = |i: usize, j: usize| g[i] * g[j] / norm;
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        mx += wt(i, j) * px(a, i, j);
                        my += wt(i, j) * px(b, i, j);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let (dx, dy) = (px(a, i, j) - mx, px(b, i, j) - my);
                        vx += wt(i, j) * dx * dx;
                        vy += wt(i, j) * dy * dy;
                        cov += wt(i, j) * dx * dy;
                    }
                }
                sum += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        total += sum / ((h - 10) * (w - 10)) as f64;
    }
    total / c as f64
}

fn metrics() -> Result<Outcome> {
    let a = noise(32, 28, 3, 1);
    let inf = psnr(&a, &a)? == f64::INFINITY;
    let one = (ssim(&a, &a)? - 1.0).abs() <= 1e-9;
    // 0.25 and 0.35 differ by exactly 0.1 once both are rounded to f32.
    let lo = ImageTensor::filled(16, 16, 3, 0.25)?;
    let hi = ImageTensor::filled(16, 16, 3, 0.35)?;
    let d = 0.35f32 as f64 - 0.25f32 as f64;
    let twenty = psnr(&lo, &hi)?;
    let twenty_ok = (twenty - -10.0 * (d * d).log10()).abs() <= 1e-9 && (twenty - 20.0).abs() <= 1e-6;
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let (x, y) = (noise(24, 30, 3, 10 + seed), noise(24, 30, 3, 20 + seed));
        let n = x.data().len() as f64;
        let mse = x.data().iter().zip(y.data()).map(|(p, q)| (*p as f64 - *q as f64).powi(2)).sum::<f64>() / n;
        worst = worst.max((psnr(&x, &y)? - 10.0 * (1.0 / mse).log10()).abs());
        worst = worst.max((ssim(&x, &y)? - direct_ssim(&x, &y)).abs());
    }
    Ok(check(
        inf && one && twenty_ok && worst <= 1e-9,
        format!(
            "identical: PSNR inf {inf}, SSIM 1 {one}; 0.1 offset {twenty:.9} dB; random cases max deviation {worst:.1e} (<= 1e-9)"
        ),
    ))
}

fn checkpoint() -> Result<Outcome> {
    let dir = tempfile::tempdir().expect("temporary directory");
    let path = dir.path().join("model.ckpt");
    let model = DehazeModel::new(ModelConfig::toy(), 21)?;
    let inputs: Vec<ImageTensor> = (0..3).map(|i| noise(96 + 17 * i, 130 - 9 * i, 3, 30 + i as u64)).collect();
    let before: Vec<ImageTensor> = inputs.iter().map(|x| model.dehaze(x, None)).collect::<Result<_>>()?;
    save_checkpoint(&model, &path)?;
    let loaded = load_checkpoint(&path)?;
    let mut same = loaded.fingerprint() == model.fingerprint();
    for (x, want) in inputs.iter().zip(&before) {
        let got = loaded.dehaze(x, None)?;
        same &= got.data().iter().zip(want.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    Ok(check(same, format!("3 seeded inputs {}", if same { "bit-identical" } else { "DIFFER" })))
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let smoke = OnceCell::new();
    let criteria: [(&str, Duration, &dyn Fn() -> Result<Outcome>); 10] = [
        ("tiling round trip", Duration::from_secs(60), &tiling),
        ("mini-batch invariance", Duration::from_secs(300), &mini_batch),
        ("memory decoupling", Duration::from_secs(300), &memory),
        ("attention approximation", Duration::from_secs(120), &attention),
        ("attribution completeness", Duration::from_secs(600), &|| completeness(&smoke)),
        ("haze model identities", Duration::from_secs(120), &haze),
        ("training smoke", Duration::from_secs(1800), &|| training(&smoke)),
        ("gradient check", Duration::from_secs(300), &gradients),
        ("metric oracles", Duration::from_secs(60), &metrics),
        ("checkpoint round trip", Duration::from_secs(120), &checkpoint),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        // Criterion 5 attributes the model trained by 7; train it outside
        // the attribution timing and count it against 7.
        if n == 5 {
            if let Err(e) = smoke_model(&smoke) {
                println!("FAIL  5. {name}: error: training the toy model failed: {e}");
                failed += 1;
                continue;
            }
        }
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(run)) {
            Ok(Ok(o)) => o,
            Ok(Err(e)) => Err(format!("error: {e}")),
            Err(_) => Err("panicked".into()),
        };
        let mut took = start.elapsed();
        if n == 7 {
            took += smoke.get().map_or(Duration::ZERO, |s| Duration::from_secs_f64(s.seconds));
        }
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += usize::from(status == "FAIL");
        let slow = if took > *budget { format!(", over the {} s budget", budget.as_secs()) } else { String::new() };
        println!("{status} {n:>2}. {name}: {detail} [{:.1} s{slow}]", took.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
