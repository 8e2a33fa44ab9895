use std::fs;
use std::path::Path;

use dehaze_core::checkpoint::Checkpoint;
use dehaze_core::config::{Config, ModelConfig, Precision};
use dehaze_core::dam::{compute_dam, render_heatmap};
use dehaze_core::haze::{build_dataset_manifest, generate_clear_set, load_pairs, regenerate, ImagePair, Split};
use dehaze_core::metrics::{evaluate_pair, predicted_peak, profile_run, score_pair, EvalReport, ProfileReport};
use dehaze_core::params::ParamStore;
use dehaze_core::train::train;
use dehaze_core::{BitDepth, DehazeModel, ImageTensor, RunStats};

use crate::{
    AttributeArgs, Bits, Cli, Command, Common, EvalArgs, Failure, InferArgs, ModelSource, PrecisionArg, ProfileArgs,
    RunRecord, SplitArg, SynthArgs, TrainArgs, DEVICE_ENV,
};

type Outcome<T = ()> = Result<T, Failure>;

pub fn name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Synth(_) => "synth",
        Command::Train(_) => "train",
        Command::Infer(_) => "infer",
        Command::Attribute(_) => "attribute",
        Command::Eval(_) => "eval",
        Command::Profile(_) => "profile",
    }
}

pub fn execute(cli: &Cli, record: &mut RunRecord) -> Outcome {
    record.device = device()?;
    let c = &cli.common;
    match &cli.command {
        Command::Synth(a) => synth(c, a, record),
        Command::Train(a) => train_cmd(c, a, record),
        Command::Infer(a) => infer(c, a, record),
        Command::Attribute(a) => attribute(c, a, record),
        Command::Eval(a) => eval(c, a, record),
        Command::Profile(a) => profile(c, a, record),
    }
}

fn device() -> Outcome<String> {
    match std::env::var(DEVICE_ENV) {
        Err(_) => Ok("cpu".into()),
        Ok(v) if v.is_empty() || v.eq_ignore_ascii_case("cpu") => Ok("cpu".into()),
        Ok(v) => Err(Failure::Runtime {
            stage: "device",
            message: format!("{DEVICE_ENV}={v}: accelerator not available in this build (use `cpu`)"),
        }),
    }
}

fn need(flag: &str, path: &Path) -> Outcome {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::User(format!("{flag} {}: no such file or directory", path.display())))
    }
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime {
        stage: "write-output",
        message: format!("{}: {e}", dir.display()),
    })
}

fn create_parent(path: &Path) -> Outcome {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => create_dir(dir),
        None => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Outcome {
    create_parent(path)?;
    fs::write(path, text).map_err(|e| Failure::Runtime {
        stage: "write-output",
        message: format!("{}: {e}", path.display()),
    })
}

/// Layer `--config` and `--set` over `base`.
fn resolve(common: &Common, base: Config) -> Outcome<Config> {
    let doc = match &common.config {
        Some(p) => Some(
            fs::read_to_string(p).map_err(|e| Failure::User(format!("--config {}: {e}", p.display())))?,
        ),
        None => None,
    };
    Config::resolve(base, doc.as_deref(), &common.overrides).map_err(Failure::at("config"))
}

/// Record the configuration a command actually runs with.
fn log_config(record: &mut RunRecord, cfg: &Config) {
    record.config_hash = Some(cfg.hash());
    record.config = Some(cfg.to_toml());
    record.seeds.insert("synth", cfg.synth.seed);
    record.seeds.insert("train", cfg.train.seed);
    record.seeds.insert("attention", cfg.model.bottleneck.approx_params.seed);
}

/// Base configuration for a model command: the checkpoint's model if one is
/// given, else the named preset.
fn model_base(common: &Common, src: &ModelSource) -> Outcome<(Config, Option<ParamStore>)> {
    match &src.checkpoint {
        Some(path) => {
            need("--checkpoint", path)?;
            let ck = Checkpoint::load(path).map_err(Failure::at("load-checkpoint"))?;
            Ok((Config::with_model(ck.model.config), Some(ck.model.params)))
        }
        None => {
            let model = ModelConfig::profile(&common.preset).ok_or_else(|| {
                Failure::User(format!(
                    "--preset `{}` is unknown; choose one of default, toy, memory, micro",
                    common.preset
                ))
            })?;
            Ok((Config::with_model(model), None))
        }
    }
}

fn build_model(cfg: &Config, params: Option<ParamStore>, src: &ModelSource, record: &mut RunRecord) -> Outcome<DehazeModel> {
    let model = match params {
        Some(p) => DehazeModel::with_params(cfg.model.clone(), p),
        None => {
            log::info!("no checkpoint given; initializing weights with seed {}", src.init_seed);
            record.seeds.insert("init", src.init_seed);
            DehazeModel::new(cfg.model.clone(), src.init_seed)
        }
    }
    .map_err(Failure::at("model"))?;
    record.model_fingerprint = Some(model.fingerprint());
    Ok(model)
}

fn load_model(common: &Common, src: &ModelSource, record: &mut RunRecord, adjust: impl FnOnce(&mut Config)) -> Outcome<(Config, DehazeModel)> {
    let (base, params) = model_base(common, src)?;
    let mut cfg = resolve(common, base)?;
    adjust(&mut cfg);
    cfg.check().map_err(Failure::at("config"))?;
    log_config(record, &cfg);
    let model = build_model(&cfg, params, src, record)?;
    Ok((cfg, model))
}

fn load_image(flag: &str, path: &Path) -> Outcome<ImageTensor> {
    need(flag, path)?;
    ImageTensor::load(path).map_err(Failure::at("load-input"))
}

fn synth(common: &Common, a: &SynthArgs, record: &mut RunRecord) -> Outcome {
    let mut cfg = resolve(common, Config::default())?;
    if let Some(seed) = a.seed {
        cfg.synth.seed = seed;
    }
    cfg.check().map_err(Failure::at("config"))?;
    log_config(record, &cfg);
    create_dir(&a.out)?;
    if let Some(manifest) = &a.regenerate {
        need("--regenerate", manifest)?;
        let n = regenerate(manifest, &a.out).map_err(Failure::at("synthesis"))?;
        println!("regenerated {n} hazy images under {}", a.out.display());
        record.output(&a.out);
        return Ok(());
    }
    let clear_dir = match &a.clear_dir {
        Some(dir) => {
            need("--clear-dir", dir)?;
            dir.clone()
        }
        None => {
            let dir = a.out.join("clear");
            let written = generate_clear_set(&dir, &cfg.synth).map_err(Failure::at("synthesis"))?;
            println!("generated {} clear images in {}", written.len(), dir.display());
            dir
        }
    };
    let manifest = build_dataset_manifest(&clear_dir, &a.out, &cfg.synth).map_err(Failure::at("synthesis"))?;
    let train_n = manifest.split(Split::Train).count();
    println!(
        "wrote {} pairs ({train_n} train, {} test) to {}",
        manifest.records.len(),
        manifest.records.len() - train_n,
        a.out.display()
    );
    for skipped in &manifest.skipped {
        eprintln!("skipped unreadable image {}", skipped.display());
    }
    record.output(&a.out.join(dehaze_core::haze::MANIFEST_NAME));
    Ok(())
}

fn train_cmd(common: &Common, a: &TrainArgs, record: &mut RunRecord) -> Outcome {
    need("--pairs", &a.pairs)?;
    let (cfg, model) = load_model(common, &a.model, record, |cfg| {
        cfg.train.checkpoint_dir = a.out.display().to_string();
        if let Some(seed) = a.seed {
            cfg.train.seed = seed;
        }
    })?;
    let pairs = load_pairs(&a.pairs, Split::Train).map_err(Failure::at("load-data"))?;
    create_dir(&a.out)?;
    let config_path = a.out.join("config.toml");
    write_text(&config_path, &cfg.to_toml())?;
    record.output(&config_path);
    let (_, report) = train(model, &pairs, &cfg.train).map_err(Failure::at("training"))?;
    let last = report.history.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "trained {} steps on {} pairs; final loss {last:.5}, best epoch loss {:.5}",
        report.history.len(),
        pairs.len(),
        report.best_loss.unwrap_or(f64::NAN)
    );
    for path in [&report.last_checkpoint, &report.best_checkpoint].into_iter().flatten() {
        println!("checkpoint {}", path.display());
        record.output(path);
    }
    Ok(())
}

fn infer(common: &Common, a: &InferArgs, record: &mut RunRecord) -> Outcome {
    let (cfg, model) = load_model(common, &a.model, record, |_| {})?;
    let hazy = load_image("--in", &a.input)?;
    let out = model
        .dehaze(&hazy, cfg.runtime.memory_limit_bytes())
        .map_err(Failure::at("inference"))?;
    create_parent(&a.out)?;
    let depth = match a.bits {
        Bits::Eight => BitDepth::Eight,
        Bits::Sixteen => BitDepth::Sixteen,
    };
    out.save(&a.out, depth).map_err(Failure::at("write-output"))?;
    println!("wrote {} ({}x{})", a.out.display(), out.width(), out.height());
    record.output(&a.out);
    Ok(())
}

fn attribute(common: &Common, a: &AttributeArgs, record: &mut RunRecord) -> Outcome {
    if a.steps == Some(0) {
        return Err(Failure::User("--steps must be at least 1".into()));
    }
    let (cfg, model) = load_model(common, &a.model, record, |cfg| {
        if let Some(steps) = a.steps {
            cfg.attribution.steps = steps;
        }
    })?;
    let hazy = load_image("--in", &a.input)?;
    let baseline = load_image("--baseline", &a.baseline)?;
    let region = a.region.0;
    region
        .check(hazy.height(), hazy.width())
        .map_err(|e| Failure::User(format!("--region: {e}")))?;
    let map = compute_dam(&model, &hazy, &baseline, &region, &cfg.attribution).map_err(Failure::at("attribution"))?;
    create_dir(&a.out)?;
    let (npy, png, json) = (a.out.join("dam.npy"), a.out.join("dam_heatmap.png"), a.out.join("dam.json"));
    map.write_npy(&npy).map_err(Failure::at("write-output"))?;
    render_heatmap(&map, &hazy, &png).map_err(Failure::at("write-output"))?;
    map.write_sidecar(&json).map_err(Failure::at("write-output"))?;
    let delta = map.detector_input - map.detector_baseline;
    println!(
        "attribution over {} steps: sum {:.6}, detector change {delta:.6}",
        map.steps,
        map.total()
    );
    for p in [&npy, &png, &json] {
        record.output(p);
    }
    Ok(())
}

fn eval_pairs(manifest: &Path, split: SplitArg) -> Outcome<Vec<ImagePair>> {
    let load = |s| load_pairs(manifest, s).map_err(Failure::at("load-data"));
    let pairs = match split {
        SplitArg::Train => load(Split::Train)?,
        SplitArg::Test => load(Split::Test)?,
        SplitArg::All => {
            let mut all = load(Split::Train)?;
            all.extend(load(Split::Test)?);
            all
        }
    };
    if pairs.is_empty() {
        return Err(Failure::User(format!(
            "--pairs {}: the {split:?} split is empty",
            manifest.display()
        )));
    }
    Ok(pairs)
}

fn eval(common: &Common, a: &EvalArgs, record: &mut RunRecord) -> Outcome {
    need("--pairs", &a.pairs)?;
    let crop = a.crop.map(|r| r.0);
    let (cfg, model) = if a.inputs_only {
        let (base, _) = model_base(common, &a.model)?;
        let cfg = resolve(common, base)?;
        log_config(record, &cfg);
        (cfg, None)
    } else {
        let (cfg, model) = load_model(common, &a.model, record, |_| {})?;
        (cfg, Some(model))
    };
    let pairs = eval_pairs(&a.pairs, a.split)?;
    let mut report = EvalReport::default();
    for p in &pairs {
        let rec = match &model {
            Some(m) => evaluate_pair(m, &p.name, &p.hazy, &p.clear, cfg.runtime.memory_limit_bytes(), crop.as_ref()),
            None => score_pair(&p.name, &p.hazy, &p.hazy, &p.clear, crop.as_ref(), 0.0, RunStats::default()),
        }
        .map_err(|e| match Failure::at("evaluation")(e) {
            Failure::User(m) if crop.is_some() => Failure::User(format!("--crop: {m}")),
            f => f,
        })?;
        log::info!("{}: psnr {:.3} ssim {:.4}", rec.name, rec.psnr, rec.ssim);
        report.push(rec);
    }
    let text = report.to_jsonl();
    match &a.out {
        Some(path) => {
            write_text(path, &text)?;
            record.output(path);
            let g = &report.aggregate;
            println!(
                "{} images: psnr {:.3} dB (hazy {:.3}), ssim {:.4} (hazy {:.4})",
                g.count, g.psnr, g.hazy_psnr, g.ssim, g.hazy_ssim
            );
        }
        None => print!("{text}"),
    }
    if let Some(path) = &a.csv {
        write_text(path, &report.to_csv())?;
        record.output(path);
    }
    Ok(())
}

fn profile(common: &Common, a: &ProfileArgs, record: &mut RunRecord) -> Outcome {
    if a.sizes.is_empty() || a.sizes.contains(&0) {
        return Err(Failure::User("--sizes must list positive image sizes".into()));
    }
    let (cfg, model) = load_model(common, &a.model, record, |_| {})?;
    let precisions = match a.precision {
        PrecisionArg::Fp32 => vec![Precision::Fp32],
        PrecisionArg::Fp16 => vec![Precision::Fp16],
        PrecisionArg::Both => vec![Precision::Fp32, Precision::Fp16],
    };
    let mut all = ProfileReport::default();
    for &precision in &precisions {
        let report = profile_run(&model, &a.sizes, precision, cfg.runtime.memory_limit_bytes());
        let mut mcfg = model.config.clone();
        mcfg.precision = precision;
        for w in report.points.windows(2) {
            let (Some(small), Some(large)) = (&w[0].memory, &w[1].memory) else { continue };
            let ratio = large.peak as f64 / small.peak.max(1) as f64;
            let bound = predicted_peak(&mcfg, small, large.total_tokens)
                .map(|b| format!("{:.3}", b as f64 / small.peak.max(1) as f64))
                .unwrap_or_else(|| "n/a".into());
            println!(
                "{precision:?} {} -> {}: peak {} -> {} bytes, ratio {ratio:.3} (retained-tensor bound {bound})",
                w[0].size, w[1].size, small.peak, large.peak
            );
        }
        for p in &report.points {
            if let Some(e) = &p.error {
                println!("{precision:?} {}: {e}", p.size);
            }
        }
        all.reference_note = report.reference_note;
        all.points.extend(report.points);
    }
    println!("note: {}", all.reference_note);
    match &a.out {
        Some(path) => {
            write_text(path, &all.to_csv())?;
            record.output(path);
        }
        None => print!("{}", all.to_csv()),
    }
    Ok(())
}
