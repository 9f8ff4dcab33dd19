use std::path::{Path, PathBuf};

use anyhow::Context;
use log::{info, warn};
use pimnb::calibration::{
    calibrate, eval_with_dynamic_calibration, CalibrationConfig, DynamicScoring, RECOMMENDED_MIN_BATCHES,
};
use pimnb::diagnostics::{divergence_csv, divergence_report, DiagnosticsConfig, DIVERGENCE_CSV_HEADER};
use pimnb::eval::{evaluate, EvalMetrics, EVAL_BATCH_BASE};
use pimnb::nn::{load_model, save_model};
use pimnb::noise::TemporalGranularity;
use pimnb::rng::pair_index;
use pimnb::train::{noise_injection_finetune, train, Schedule, TrainConfig};
use pimnb::{instantiate_device, DeviceInstance, Model, NoiseKind, NoiseSpec};

use crate::config::{ConfigError, RunConfig};
use crate::data::{self, Splits};
use crate::output::CsvDoc;

pub const VARIANTS: [&str; 4] = ["vanilla", "nabn", "nabn_dynamic", "nit"];

fn existing_file(cfg: &RunConfig, key: &str) -> Result<PathBuf, ConfigError> {
    let p = PathBuf::from(cfg.required(key)?);
    if !p.is_file() {
        return Err(ConfigError::invalid(key, format!("{} does not exist", p.display())));
    }
    Ok(p)
}

fn load_model_key(cfg: &RunConfig, key: &str) -> anyhow::Result<Model> {
    let p = existing_file(cfg, key)?;
    load_model(&p).with_context(|| format!("loading {}", p.display()))
}

/// Noise spec from the `noise.*` block with the given scale and device seed.
pub fn noise_spec(cfg: &RunConfig, eta0: f64, seed: u64) -> Result<NoiseSpec, ConfigError> {
    let kind: NoiseKind = cfg.get("noise.kind")?;
    let mut spec = NoiseSpec::new(kind, eta0, seed);
    spec.sigma_t_ratio = cfg.get("noise.sigma_t_ratio")?;
    spec.sigma_s = cfg.get("noise.sigma_s")?;
    spec.granularity = cfg.get::<TemporalGranularity>("noise.temporal_granularity")?;
    spec.noise_biases = cfg.get_bool("noise.noise_biases")?;
    spec.validate().map_err(|e| ConfigError::invalid("noise", e.to_string()))?;
    Ok(spec)
}

/// Device seed for one sweep seed: shared by every scale and variant so that
/// variants are compared on the same simulated chip.
fn device_seed(cfg: &RunConfig, seed: u64) -> Result<u64, ConfigError> {
    Ok(pair_index(cfg.get("noise.seed")?, seed))
}

pub fn calibration_config(cfg: &RunConfig) -> Result<CalibrationConfig, ConfigError> {
    let c = CalibrationConfig {
        momentum: cfg.get("calib.momentum")?,
        passes: cfg.get("calib.passes")?,
        batch_size: cfg.get("calib.batch_size")?,
        dynamic: cfg.get_bool("calib.dynamic")?,
        dynamic_scoring: cfg.get::<DynamicScoring>("calib.dynamic_scoring")?,
        allow_test_split: cfg.get_bool("calib.allow_test_split")?,
    };
    c.validate().map_err(|e| ConfigError::invalid("calib", e.to_string()))?;
    Ok(c)
}

fn train_config(cfg: &RunConfig) -> Result<TrainConfig, ConfigError> {
    let t = TrainConfig {
        epochs: cfg.get("train.epochs")?,
        batch_size: cfg.get("train.batch_size")?,
        lr: cfg.get("train.lr")?,
        schedule: cfg.get::<Schedule>("train.schedule")?,
        momentum: cfg.get("train.sgd_momentum")?,
        weight_decay: cfg.get("train.weight_decay")?,
        seed: cfg.get("train.seed")?,
        eval_batch_size: 200,
        noise: None,
    };
    t.validate().map_err(|e| ConfigError::invalid("train", e.to_string()))?;
    Ok(t)
}

fn scales(cfg: &RunConfig) -> Result<Vec<f64>, ConfigError> {
    let s: Vec<f64> = cfg.get_list("sweep.scales")?;
    if s.is_empty() {
        return Err(ConfigError::invalid("sweep.scales", "empty scale list"));
    }
    if let Some(bad) = s.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(ConfigError::invalid("sweep.scales", format!("scale {bad} must be finite and >= 0")));
    }
    Ok(s)
}

fn seeds(cfg: &RunConfig) -> Result<Vec<u64>, ConfigError> {
    let s: Vec<u64> = cfg.get_list("sweep.seeds")?;
    if s.is_empty() {
        return Err(ConfigError::invalid("sweep.seeds", "empty seed list"));
    }
    Ok(s)
}

fn seed_list(s: &[u64]) -> String {
    s.iter().map(u64::to_string).collect::<Vec<_>>().join(" ")
}

fn warn_short_calibration(batches: usize) {
    if batches < RECOMMENDED_MIN_BATCHES {
        warn!("calibration saw only {batches} batches (< {RECOMMENDED_MIN_BATCHES}); the m = 0.999 EMA is dominated by its first batches");
    }
}

/// Static calibration on the training split.
fn calibrated(model: &Model, device: &DeviceInstance, splits: &Splits, calib: &CalibrationConfig) -> anyhow::Result<Model> {
    let mut m = model.clone();
    let stats = calibrate(&mut m, device, &splits.train, &CalibrationConfig { dynamic: false, ..calib.clone() })?;
    warn_short_calibration(stats.batches_seen());
    Ok(m)
}

fn dynamic_eval(model: Model, device: &DeviceInstance, splits: &Splits, calib: &CalibrationConfig) -> anyhow::Result<EvalMetrics> {
    let mut m = model;
    let cfg = CalibrationConfig { dynamic: true, allow_test_split: true, ..calib.clone() };
    Ok(eval_with_dynamic_calibration(&mut m, device, &splits.test, &cfg, EVAL_BATCH_BASE)?.0)
}

fn f(v: f64) -> String {
    format!("{v:.4}")
}

pub fn cmd_train(cfg: &RunConfig, out: Option<&Path>) -> anyhow::Result<()> {
    let model_path = PathBuf::from(cfg.required("model.path")?);
    let mut tcfg = train_config(cfg)?;
    let nit = cfg.get_bool("train.noise_injection")?;
    let init = cfg.raw("train.init");
    let splits = data::load(cfg)?;
    let mut model = if init.is_empty() {
        let classes = splits.train.num_classes();
        Model::reference_cnn(splits.train.channels(), classes, cfg.get("model.init_seed")?)?
    } else {
        load_model_key(cfg, "train.init")?
    };
    info!("training on {} samples ({} val), {} parameters", splits.train.len(), splits.val.len(), model.num_parameters());
    let report = if nit {
        let spec = noise_spec(cfg, cfg.get("sweep.nit_scale")?, cfg.get("noise.seed")?)?;
        info!("noise-injection training at {} eta0 = {}", spec.kind, spec.eta0);
        noise_injection_finetune(&mut model, &splits.train, &splits.val, &spec, &tcfg)?
    } else {
        tcfg.noise = None;
        train(&mut model, &splits.train, &splits.val, &tcfg)?
    };
    info!("best val accuracy {:.2}% at epoch {} ({:.1}s)", report.best_val_acc, report.best_epoch, report.wall_seconds);
    save_model(&model, &model_path).with_context(|| format!("writing {}", model_path.display()))?;
    let mut doc = CsvDoc::new("train", cfg, cfg.raw("train.seed"), pimnb::train::TrainReport::CSV_HEADER);
    let body = report.csv();
    doc.rows(body.split_once('\n').map_or("", |(_, rest)| rest));
    doc.emit(out)?;
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, out: Option<&Path>) -> anyhow::Result<()> {
    let model = load_model_key(cfg, "model.path")?;
    let calib = calibration_config(cfg)?;
    let splits = data::load(cfg)?;
    let bs: usize = cfg.get("sweep.eval_batch_size")?;
    let eta0: f64 = cfg.get("noise.eta0")?;
    let spec = noise_spec(cfg, eta0, cfg.get("noise.seed")?)?;
    let device = instantiate_device(&model, &spec)?;
    let mut doc = CsvDoc::new("eval", cfg, cfg.raw("noise.seed"), "mode,noise_kind,eta0,accuracy,loss,samples");
    let mut emit = |mode: &str, eta: f64, m: EvalMetrics| {
        doc.row(&[mode.into(), spec.kind.to_string(), eta.to_string(), f(m.accuracy), format!("{:.6}", m.loss), m.samples.to_string()]);
    };
    emit("clean", 0.0, evaluate(&model, None, &splits.test, bs, EVAL_BATCH_BASE)?);
    emit("noisy", eta0, evaluate(&model, Some(&device), &splits.test, bs, EVAL_BATCH_BASE)?);
    if calib.dynamic {
        emit("noisy_dynamic", eta0, dynamic_eval(model.clone(), &device, &splits, &calib)?);
    }
    doc.emit(out)?;
    Ok(())
}

pub fn cmd_calibrate(cfg: &RunConfig, out: Option<&Path>) -> anyhow::Result<()> {
    let mut model = load_model_key(cfg, "model.path")?;
    let target = PathBuf::from(cfg.required("calib.output_model")?);
    let calib = calibration_config(cfg)?;
    let splits = data::load(cfg)?;
    let spec = noise_spec(cfg, cfg.get("noise.eta0")?, cfg.get("noise.seed")?)?;
    let device = instantiate_device(&model, &spec)?;
    let stats = calibrate(&mut model, &device, &splits.train, &calib)?;
    warn_short_calibration(stats.batches_seen());
    save_model(&model, &target).with_context(|| format!("writing {}", target.display()))?;
    let mut doc = CsvDoc::new("calibrate", cfg, cfg.raw("noise.seed"), "layer_id,channel,mean,var");
    doc.note(&format!("calibration_batches: {}", stats.batches_seen()));
    for layer in stats.layer_ids() {
        if let Some(s) = stats.layer(layer) {
            for (c, (m, v)) in s.mean.iter().zip(&s.var).enumerate() {
                doc.row(&[layer.to_string(), c.to_string(), format!("{m:.6e}"), format!("{v:.6e}")]);
            }
        }
    }
    doc.emit(out)?;
    Ok(())
}

pub fn cmd_diagnose(cfg: &RunConfig, out: Option<&Path>) -> anyhow::Result<()> {
    let model = load_model_key(cfg, "model.path")?;
    let calib = calibration_config(cfg)?;
    let splits = data::load(cfg)?;
    let spec = noise_spec(cfg, cfg.get("noise.eta0")?, cfg.get("noise.seed")?)?;
    let device = instantiate_device(&model, &spec)?;
    let smoothing: f64 = cfg.get("diag.smoothing")?;
    if !(smoothing > 0.0 && smoothing.is_finite()) {
        return Err(ConfigError::invalid("diag.smoothing", "must be > 0").into());
    }
    let dcfg = DiagnosticsConfig {
        bins: cfg.get("diag.bins")?,
        smoothing,
        batch_size: cfg.get("diag.batch_size")?,
        ..DiagnosticsConfig::default()
    };
    if dcfg.bins == 0 || dcfg.batch_size == 0 {
        return Err(ConfigError::invalid("diag", "bins and batch_size must be >= 1").into());
    }
    let samples: usize = cfg.get("diag.samples")?;
    let test = if samples > 0 && samples < splits.test.len() { splits.test.take(samples)? } else { splits.test.clone() };
    let rows = divergence_report(&model, &device, &test, &splits.train, &calib, &dcfg)?;
    let mut doc = CsvDoc::new("diagnose", cfg, cfg.raw("noise.seed"), DIVERGENCE_CSV_HEADER);
    let body = divergence_csv(&rows);
    doc.rows(body.split_once('\n').map_or("", |(_, rest)| rest));
    doc.emit(out)?;
    Ok(())
}

pub fn cmd_sweep(cfg: &RunConfig, out: Option<&Path>) -> anyhow::Result<()> {
    let model = load_model_key(cfg, "model.path")?;
    let scales = scales(cfg)?;
    let seeds = seeds(cfg)?;
    let variants: Vec<String> = cfg.get_list("sweep.variants")?;
    if variants.is_empty() {
        return Err(ConfigError::invalid("sweep.variants", "empty variant list").into());
    }
    if let Some(v) = variants.iter().find(|v| !VARIANTS.contains(&v.as_str())) {
        return Err(ConfigError::invalid("sweep.variants", format!("unknown variant {v:?}")).into());
    }
    let nit_model = if variants.iter().any(|v| v == "nit") { Some(load_model_key(cfg, "model.nit_path")?) } else { None };
    let calib = calibration_config(cfg)?;
    let bs: usize = cfg.get("sweep.eval_batch_size")?;
    let splits = data::load(cfg)?;

    let mut doc = CsvDoc::new("sweep", cfg, &seed_list(&seeds), "noise_kind,eta0,variant,seed,metric,value");
    for &eta0 in &scales {
        for &seed in &seeds {
            let spec = noise_spec(cfg, eta0, device_seed(cfg, seed)?)?;
            let device = instantiate_device(&model, &spec)?;
            let mut nabn: Option<Model> = None;
            for variant in &variants {
                let m = match variant.as_str() {
                    "vanilla" => evaluate(&model, Some(&device), &splits.test, bs, EVAL_BATCH_BASE)?,
                    "nabn" | "nabn_dynamic" => {
                        if nabn.is_none() {
                            nabn = Some(calibrated(&model, &device, &splits, &calib)?);
                        }
                        let cal = nabn.as_ref().expect("calibrated above");
                        if variant == "nabn" {
                            evaluate(cal, Some(&device), &splits.test, bs, EVAL_BATCH_BASE)?
                        } else {
                            dynamic_eval(cal.clone(), &device, &splits, &calib)?
                        }
                    }
                    _ => {
                        let nit = nit_model.as_ref().expect("loaded when requested");
                        let d = instantiate_device(nit, &spec)?;
                        evaluate(nit, Some(&d), &splits.test, bs, EVAL_BATCH_BASE)?
                    }
                };
                info!("{} eta0={eta0} seed={seed} {variant}: {:.2}%", spec.kind, m.accuracy);
                for (metric, value) in [("accuracy", f(m.accuracy)), ("loss", format!("{:.6}", m.loss))] {
                    doc.row(&[spec.kind.to_string(), eta0.to_string(), variant.clone(), seed.to_string(), metric.into(), value]);
                }
            }
        }
    }
    doc.emit(out)?;
    Ok(())
}

/// Max minus min over per-scale mean accuracies.
pub fn spread(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if values.is_empty() {
        0.0
    } else {
        max - min
    }
}

pub fn cmd_compare_nit(cfg: &RunConfig, out: Option<&Path>) -> anyhow::Result<()> {
    let model = load_model_key(cfg, "model.path")?;
    let nit = load_model_key(cfg, "model.nit_path")?;
    let scales = scales(cfg)?;
    let seeds = seeds(cfg)?;
    let nit_scale: f64 = cfg.get("sweep.nit_scale")?;
    if !scales.iter().any(|s| (s - nit_scale).abs() < 1e-12) {
        warn!("sweep.nit_scale {nit_scale} is not on the scale grid");
    }
    let calib = calibration_config(cfg)?;
    let bs: usize = cfg.get("sweep.eval_batch_size")?;
    let splits = data::load(cfg)?;

    let names = ["vanilla", "nit", "nabn_dynamic"];
    let mut means = vec![Vec::new(); names.len()];
    for &eta0 in &scales {
        let mut sums = [0.0; 3];
        for &seed in &seeds {
            let spec = noise_spec(cfg, eta0, device_seed(cfg, seed)?)?;
            let device = instantiate_device(&model, &spec)?;
            let nit_device = instantiate_device(&nit, &spec)?;
            sums[0] += evaluate(&model, Some(&device), &splits.test, bs, EVAL_BATCH_BASE)?.accuracy;
            sums[1] += evaluate(&nit, Some(&nit_device), &splits.test, bs, EVAL_BATCH_BASE)?.accuracy;
            let cal = calibrated(&model, &device, &splits, &calib)?;
            sums[2] += dynamic_eval(cal, &device, &splits, &calib)?.accuracy;
        }
        for (i, s) in sums.iter().enumerate() {
            means[i].push(s / seeds.len() as f64);
        }
        info!("eta0={eta0}: vanilla {:.2} nit {:.2} nabn_dynamic {:.2}", means[0].last().unwrap(), means[1].last().unwrap(), means[2].last().unwrap());
    }
    let mut doc = CsvDoc::new("compare-nit", cfg, &seed_list(&seeds), "variant,statistic,eta0,value");
    doc.note(&format!("nit_scale: {nit_scale}"));
    for (i, name) in names.iter().enumerate() {
        for (eta0, acc) in scales.iter().zip(&means[i]) {
            doc.row(&[name.to_string(), "accuracy".into(), eta0.to_string(), f(*acc)]);
        }
    }
    for (i, name) in names.iter().enumerate() {
        doc.row(&[name.to_string(), "spread".into(), String::new(), f(spread(&means[i]))]);
    }
    doc.emit(out)?;
    Ok(())
}
