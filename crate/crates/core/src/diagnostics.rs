//! Activation histograms and KL / JS divergence between clean and noisy runs.

use std::fmt::Write as _;

use crate::calibration::{calibrate, CalibrationConfig, CalibrationError};
use crate::data::{BatchOrder, Dataset};
use crate::nn::{ExecMode, Model, NnError};
use crate::noise::{DeviceInstance, NoiseDraw};

pub const DEFAULT_BINS: usize = 256;
pub const DEFAULT_SMOOTHING: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationHistogram {
    pub layer: usize,
    /// `bins + 1` ascending edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl ActivationHistogram {
    pub fn new(layer: usize, lo: f64, hi: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        // A degenerate range still needs a positive width.
        let hi = if hi > lo { hi } else { lo + 1.0 };
        let edges = (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
        Self { layer, edges, counts: vec![0; bins] }
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, v: f64) {
        let lo = self.edges[0];
        let hi = self.edges[self.bins()];
        let b = self.bins();
        let i = ((v - lo) / (hi - lo) * b as f64).floor();
        let i = if i.is_nan() { 0 } else { (i.max(0.0) as usize).min(b - 1) };
        self.counts[i] += 1;
    }

    /// Bin probabilities with `alpha` added to every count.
    pub fn smoothed(&self, alpha: f64) -> Vec<f64> {
        let denom = self.total() as f64 + alpha * self.bins() as f64;
        self.counts.iter().map(|&c| (c as f64 + alpha) / denom).collect()
    }
}

/// `sum p ln(p/q)` over already-normalized distributions.
fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(&pi, _)| pi > 0.0).map(|(&pi, &qi)| pi * (pi / qi).ln()).sum()
}

fn check_aligned(p: &ActivationHistogram, q: &ActivationHistogram) -> Result<(), DiagnosticsError> {
    if p.edges != q.edges {
        return Err(DiagnosticsError::Alignment { p: p.layer, q: q.layer });
    }
    if p.total() == 0 || q.total() == 0 {
        return Err(DiagnosticsError::EmptyHistogram);
    }
    Ok(())
}

/// KL(P||Q) in nats after additive smoothing of both histograms.
pub fn kl_divergence(p: &ActivationHistogram, q: &ActivationHistogram, alpha: f64) -> Result<f64, DiagnosticsError> {
    check_aligned(p, q)?;
    Ok(kl(&p.smoothed(alpha), &q.smoothed(alpha)).max(0.0))
}

/// Jensen-Shannon divergence in nats, in `[0, ln 2]`.
pub fn js_divergence(p: &ActivationHistogram, q: &ActivationHistogram, alpha: f64) -> Result<f64, DiagnosticsError> {
    check_aligned(p, q)?;
    let (ps, qs) = (p.smoothed(alpha), q.smoothed(alpha));
    let m: Vec<f64> = ps.iter().zip(&qs).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((0.5 * kl(&ps, &m) + 0.5 * kl(&qs, &m)).clamp(0.0, std::f64::consts::LN_2))
}

/// One configuration whose activations are histogrammed.
#[derive(Clone, Copy)]
pub struct Run<'a> {
    pub model: &'a Model,
    pub device: Option<&'a DeviceInstance>,
}

fn for_each_activation(
    run: Run<'_>,
    data: &Dataset,
    layers: &[usize],
    batch_size: usize,
    first_batch: u64,
    mut f: impl FnMut(usize, &[f32]),
) -> Result<(), NnError> {
    for (b, batch) in data.batches(batch_size, BatchOrder::Sequential, 1).enumerate() {
        let draw = run.device.map(|d| NoiseDraw::new(d, first_batch + b as u64));
        let out = run.model.forward(draw, &batch.images, ExecMode::Eval, layers)?;
        for (&layer, t) in &out.activations {
            f(layer, t.data());
        }
    }
    Ok(())
}

/// Histograms of the given layers' outputs for every run, over `data`.
/// The first pass finds each layer's min/max across all runs so that
/// histograms of the same layer share edges. Result is indexed `[run][layer]`.
pub fn collect_histograms(
    runs: &[Run<'_>],
    data: &Dataset,
    layers: &[usize],
    bins: usize,
    batch_size: usize,
    first_batch: u64,
) -> Result<Vec<Vec<ActivationHistogram>>, DiagnosticsError> {
    if bins < 2 {
        return Err(DiagnosticsError::Bins(bins));
    }
    for &run in runs {
        if let Some(&l) = layers.iter().find(|&&l| l >= run.model.layers().len()) {
            return Err(DiagnosticsError::UnknownLayer(l));
        }
    }
    let pos = |layer: usize| layers.iter().position(|&l| l == layer).expect("traced layer");
    let mut range = vec![(f64::INFINITY, f64::NEG_INFINITY); layers.len()];
    for &run in runs {
        for_each_activation(run, data, layers, batch_size, first_batch, |layer, xs| {
            let r = &mut range[pos(layer)];
            for &x in xs {
                if x.is_finite() {
                    r.0 = r.0.min(x as f64);
                    r.1 = r.1.max(x as f64);
                }
            }
        })?;
    }
    let mut out = Vec::with_capacity(runs.len());
    for &run in runs {
        let mut hists: Vec<ActivationHistogram> = layers
            .iter()
            .zip(&range)
            .map(|(&l, &(lo, hi))| if lo <= hi { ActivationHistogram::new(l, lo, hi, bins) } else { ActivationHistogram::new(l, 0.0, 1.0, bins) })
            .collect();
        for_each_activation(run, data, layers, batch_size, first_batch, |layer, xs| {
            let h = &mut hists[pos(layer)];
            for &x in xs {
                h.add(x as f64);
            }
        })?;
        out.push(hists);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceRow {
    pub layer: usize,
    /// Clean vs noisy with the training statistics.
    pub kl: f64,
    pub js: f64,
    /// Clean vs noisy after calibration.
    pub kl_calibrated: f64,
    pub js_calibrated: f64,
    /// KL(noisy || clean), both before and after calibration.
    pub kl_reverse: f64,
    pub kl_reverse_calibrated: f64,
}

impl DivergenceRow {
    pub fn ratio_kl(&self) -> f64 {
        ratio(self.kl_calibrated, self.kl)
    }

    pub fn ratio_js(&self) -> f64 {
        ratio(self.js_calibrated, self.js)
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num > 0.0 {
        f64::INFINITY
    } else {
        1.0
    }
}

#[derive(Debug, Clone)]
pub struct DiagnosticsConfig {
    pub bins: usize,
    pub smoothing: f64,
    pub batch_size: usize,
    pub first_batch: u64,
    /// Layers to histogram; defaults to every BatchNorm output.
    pub layers: Option<Vec<usize>>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            smoothing: DEFAULT_SMOOTHING,
            batch_size: 100,
            first_batch: crate::eval::EVAL_BATCH_BASE,
            layers: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DiagnosticsError {
    #[error("histograms of layers {p} and {q} do not share bin edges")]
    Alignment { p: usize, q: usize },
    #[error("histogram has no samples")]
    EmptyHistogram,
    #[error("layer {0} does not exist in the model")]
    UnknownLayer(usize),
    #[error("need at least 2 bins, got {0}")]
    Bins(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

/// Per-layer divergence between the clean model and the noisy model, before
/// and after calibrating on `calib_data`.
pub fn divergence_report(
    model: &Model,
    device: &DeviceInstance,
    data: &Dataset,
    calib_data: &Dataset,
    calib: &CalibrationConfig,
    cfg: &DiagnosticsConfig,
) -> Result<Vec<DivergenceRow>, DiagnosticsError> {
    let mut calibrated = model.clone();
    calibrate(&mut calibrated, device, calib_data, calib)?;
    let layers = cfg.layers.clone().unwrap_or_else(|| model.bn_layers());
    let runs = [
        Run { model, device: None },
        Run { model, device: Some(device) },
        Run { model: &calibrated, device: Some(device) },
    ];
    let h = collect_histograms(&runs, data, &layers, cfg.bins, cfg.batch_size, cfg.first_batch)?;
    let a = cfg.smoothing;
    (0..layers.len())
        .map(|i| {
            let (clean, noisy, cal) = (&h[0][i], &h[1][i], &h[2][i]);
            Ok(DivergenceRow {
                layer: layers[i],
                kl: kl_divergence(clean, noisy, a)?,
                js: js_divergence(clean, noisy, a)?,
                kl_calibrated: kl_divergence(clean, cal, a)?,
                js_calibrated: js_divergence(clean, cal, a)?,
                kl_reverse: kl_divergence(noisy, clean, a)?,
                kl_reverse_calibrated: kl_divergence(cal, clean, a)?,
            })
        })
        .collect()
}

pub const DIVERGENCE_CSV_HEADER: &str =
    "layer_id,kl_nats,js_nats,kl_calibrated,js_calibrated,ratio_kl,ratio_js,kl_reverse_nats,kl_reverse_calibrated";

/// CSV body (header line plus one line per row).
pub fn divergence_csv(rows: &[DivergenceRow]) -> String {
    let mut s = String::from(DIVERGENCE_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6},{:.6},{:.6e},{:.6e}",
            r.layer,
            r.kl,
            r.js,
            r.kl_calibrated,
            r.js_calibrated,
            r.ratio_kl(),
            r.ratio_js(),
            r.kl_reverse,
            r.kl_reverse_calibrated
        );
    }
    s
}
