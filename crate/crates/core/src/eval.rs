//! Attacker and utility probes, trade-off reports and the noisy-label study.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{inject_label_noise, DataError, Dataset, Split};
use crate::density::SmoothingSpec;
use crate::diffnet::{Activation, DiffError, Mlp, Tape, Tensor, TrainConfig};
use crate::miloss::{mi_estimate_centered, LatentBatch, LossError};
use crate::pipeline::{mask_z0, transform, PipelineCheckpoint, PipelineError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid probe config: {0}")]
    Config(String),
    #[error("probe input: {0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], epochs: 10, learning_rate: 1e-3, batch_size: 64 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.hidden.contains(&0) {
            return Err(EvalError::Config("hidden widths must be positive".into()));
        }
        self.train_config().validate().map_err(|e| EvalError::Config(e.to_string()))
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    /// Highest test accuracy over the epochs.
    pub best_test_accuracy: f64,
    /// Test accuracy after the last epoch.
    pub final_test_accuracy: f64,
    /// Test accuracy after each epoch.
    pub curve: Vec<f64>,
    /// Set when the training loss became non-finite; the curve stops there.
    pub diverged: bool,
}

/// Labeled probe inputs for one split.
pub struct ProbeData<'a> {
    pub x: &'a Tensor,
    pub labels: &'a [usize],
}

/// Column means and scales from the train split; a constant column is only
/// centered.
fn standardizer(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for r in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    let scale = var.iter().map(|s| (s / n as f64).sqrt()).map(|sd| if sd > 1e-12 { sd } else { 1.0 }).collect();
    (mean, scale)
}

fn standardize(x: &Tensor, mean: &[f64], scale: &[f64]) -> Tensor {
    let d = x.cols();
    let data = x.data().iter().enumerate().map(|(k, v)| (v - mean[k % d]) / scale[k % d]).collect();
    Tensor::matrix(x.rows(), d, data)
}

fn accuracy(net: &Mlp, x: &Tensor, labels: &[usize]) -> Result<f64, EvalError> {
    let logits = net.predict(x)?;
    let hits = (0..logits.rows())
        .filter(|&r| {
            let row = logits.row(r);
            let arg = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            arg == labels[r]
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Trains a relu MLP classifier on `train` and records the test accuracy
/// after every epoch.
pub fn train_probe(
    train: &ProbeData<'_>,
    test: &ProbeData<'_>,
    n_classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeReport, EvalError> {
    cfg.validate()?;
    if train.x.rows() != train.labels.len() || test.x.rows() != test.labels.len() {
        return Err(EvalError::Input("one label per input row required".into()));
    }
    if train.x.cols() != test.x.cols() {
        return Err(EvalError::Input(format!("train width {} vs test width {}", train.x.cols(), test.x.cols())));
    }
    if let Some(bad) = train.labels.iter().chain(test.labels).find(|&&y| y >= n_classes) {
        return Err(EvalError::Input(format!("label {bad} outside 0..{n_classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mean, scale) = standardizer(train.x);
    let xtr = standardize(train.x, &mean, &scale);
    let xte = standardize(test.x, &mean, &scale);
    let mut dims = vec![xtr.cols()];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(n_classes);
    let mut net = Mlp::new(&dims, Activation::Relu, Activation::Identity, &mut rng);
    let train_cfg = cfg.train_config();
    let mut order: Vec<usize> = (0..xtr.rows()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut diverged = false;
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let tape = Tape::new();
            let run = net.forward(tape.leaf(xtr.select_rows(batch)))?;
            let loss = run.output().softmax_cross_entropy(&labels);
            if !loss.item().is_finite() {
                diverged = true;
                break 'epochs;
            }
            let grads = tape.backward(loss)?;
            net.adam_step(&run.gradients(&grads), &train_cfg)?;
        }
        curve.push(accuracy(&net, &xte, test.labels)?);
    }
    let best = curve.iter().copied().fold(0.0, f64::max);
    let last = curve.last().copied().unwrap_or(0.0);
    Ok(ProbeReport { best_test_accuracy: best, final_test_accuracy: last, curve, diverged })
}

/// Which representation a probe sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Untransformed inputs.
    Raw,
    /// Decoded output of the full pipeline.
    Transformed,
    /// Encoded latents `z_enc`.
    Latent,
    /// Decoded masked latents without the latent encoders.
    VaeOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Raw, Variant::Transformed, Variant::Latent, Variant::VaeOnly];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Raw => "raw",
            Variant::Transformed => "x_prime",
            Variant::Latent => "z_enc",
            Variant::VaeOnly => "vae_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffReport {
    pub variant: Variant,
    pub sensitive: ProbeReport,
    pub target: ProbeReport,
    /// `|sensitive − target|` of the best-epoch accuracies.
    pub gap: f64,
    /// Per-dimension dependency estimates for dimensions `1..D` of the
    /// variant's latent code, when it has one.
    pub mi_per_dim: Option<Vec<f64>>,
}

impl TradeoffReport {
    pub fn mi_sum(&self) -> Option<f64> {
        self.mi_per_dim.as_ref().map(|v| v.iter().sum())
    }
}

pub fn gap(sensitive: f64, target: f64) -> f64 {
    (sensitive - target).abs()
}

/// Per-dimension dependency estimates on columns `1..D` of `z`, centered by
/// the estimator's offset at independence.
pub fn latent_mi(z: &Tensor, s: &[i8], spec: &SmoothingSpec) -> Result<Vec<f64>, EvalError> {
    (1..z.cols())
        .map(|d| Ok(mi_estimate_centered(&LatentBatch::new(z.column(d), s.to_vec())?, spec)?.value))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub probe: ProbeConfig,
    pub m_values: Vec<usize>,
    pub smoothing_sigma: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { probe: ProbeConfig::default(), m_values: vec![5, 10, 20], smoothing_sigma: 1.0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        self.probe.validate()?;
        self.smoothing().map(|_| ())
    }

    pub fn smoothing(&self) -> Result<SmoothingSpec, EvalError> {
        SmoothingSpec::gaussian(self.smoothing_sigma, self.m_values.clone())
            .map_err(|e| EvalError::Config(e.to_string()))
    }
}

/// Per-variant features of every sample, plus the latent code whose
/// dependency is reported.
fn variant_features(
    ckpt: &PipelineCheckpoint,
    x: &Tensor,
    variant: Variant,
) -> Result<(Tensor, Option<Tensor>), EvalError> {
    Ok(match variant {
        Variant::Raw => (x.clone(), None),
        Variant::Transformed => {
            let (z, xp) = transform(ckpt, x)?;
            (xp, Some(z))
        }
        Variant::Latent => {
            let (z, _) = transform(ckpt, x)?;
            (z.clone(), Some(z))
        }
        Variant::VaeOnly => {
            let (mu, _) = ckpt.vae.encode(x).map_err(PipelineError::from)?;
            let masked = mask_z0(&mu);
            (ckpt.vae.decode(&masked).map_err(PipelineError::from)?, Some(masked))
        }
    })
}

fn sensitive_classes(s: &[i8]) -> Vec<usize> {
    s.iter().map(|&l| usize::from(l == 1)).collect()
}

/// Probes one representation of the dataset for the sensitive label and the
/// target.
pub fn evaluate_variant(
    ckpt: &PipelineCheckpoint,
    dataset: &Dataset,
    variant: Variant,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<TradeoffReport, EvalError> {
    cfg.validate()?;
    let (features, latent) = variant_features(ckpt, &dataset.features(), variant)?;
    let (tr, te) = (dataset.indices(Split::Train), dataset.indices(Split::Test));
    let (xtr, xte) = (features.select_rows(&tr), features.select_rows(&te));
    let pick = |idx: &[usize], v: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let s_all = sensitive_classes(dataset.s());
    let (s_tr, s_te) = (pick(&tr, &s_all), pick(&te, &s_all));
    let (y_tr, y_te) = (pick(&tr, dataset.target()), pick(&te, dataset.target()));
    let sensitive = train_probe(
        &ProbeData { x: &xtr, labels: &s_tr },
        &ProbeData { x: &xte, labels: &s_te },
        2,
        &cfg.probe,
        seed,
    )?;
    let target = train_probe(
        &ProbeData { x: &xtr, labels: &y_tr },
        &ProbeData { x: &xte, labels: &y_te },
        dataset.n_classes(),
        &cfg.probe,
        seed ^ 0x7461_7267,
    )?;
    let mi_per_dim = match latent {
        Some(z) => {
            let s_test: Vec<i8> = te.iter().map(|&i| dataset.s()[i]).collect();
            Some(latent_mi(&z.select_rows(&te), &s_test, &cfg.smoothing()?)?)
        }
        None => None,
    };
    let gap = gap(sensitive.best_test_accuracy, target.best_test_accuracy);
    Ok(TradeoffReport { variant, sensitive, target, gap, mi_per_dim })
}

/// Reports for every variant, in [`Variant::ALL`] order.
pub fn evaluate_pipeline(
    ckpt: &PipelineCheckpoint,
    dataset: &Dataset,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Vec<TradeoffReport>, EvalError> {
    Variant::ALL.iter().map(|&v| evaluate_variant(ckpt, dataset, v, cfg, seed)).collect()
}

/// Target-probe accuracies at one label-noise ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyLabelPoint {
    pub ratio: f64,
    pub transformed: ProbeReport,
    pub raw: ProbeReport,
}

/// Trains target probes on noisy training labels, once on raw inputs and
/// once on the pipeline's decoded outputs. Test labels stay clean.
pub fn noisy_label_experiment(
    dataset: &Dataset,
    ratios: &[f64],
    ckpt: &PipelineCheckpoint,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Vec<NoisyLabelPoint>, EvalError> {
    cfg.validate()?;
    let x = dataset.features();
    let (_, x_prime) = transform(ckpt, &x)?;
    let (tr, te) = (dataset.indices(Split::Train), dataset.indices(Split::Test));
    let y_te: Vec<usize> = te.iter().map(|&i| dataset.target()[i]).collect();
    let mut out = Vec::with_capacity(ratios.len());
    for (k, &ratio) in ratios.iter().enumerate() {
        let noisy = inject_label_noise(dataset, ratio, seed.wrapping_add(k as u64))?;
        let y_tr: Vec<usize> = tr.iter().map(|&i| noisy.target()[i]).collect();
        let probe = |features: &Tensor| {
            let (xtr, xte) = (features.select_rows(&tr), features.select_rows(&te));
            train_probe(
                &ProbeData { x: &xtr, labels: &y_tr },
                &ProbeData { x: &xte, labels: &y_te },
                dataset.n_classes(),
                &cfg.probe,
                seed,
            )
        };
        let transformed = probe(&x_prime)?;
        let raw = probe(&x)?;
        out.push(NoisyLabelPoint { ratio, transformed, raw });
    }
    Ok(out)
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn probe_rows(out: &mut String, variant: &str, prefix: &str, report: &ProbeReport) {
    for (e, acc) in report.curve.iter().enumerate() {
        let _ = writeln!(out, "{variant},{prefix}_acc,{},{}", e + 1, num(*acc));
    }
    let _ = writeln!(out, "{variant},{prefix}_best,,{}", num(report.best_test_accuracy));
    let _ = writeln!(out, "{variant},{prefix}_final,,{}", num(report.final_test_accuracy));
    if report.diverged {
        let _ = writeln!(out, "{variant},{prefix}_diverged,,1");
    }
}

/// Long-format metrics: `variant,metric,epoch,value`. Aggregate rows leave
/// the epoch empty; per-dimension rows put the dimension in the metric name.
pub fn metrics_csv(reports: &[TradeoffReport]) -> String {
    let mut out = String::from("variant,metric,epoch,value\n");
    for r in reports {
        let v = r.variant.name();
        probe_rows(&mut out, v, "sensitive", &r.sensitive);
        probe_rows(&mut out, v, "target", &r.target);
        let _ = writeln!(out, "{v},gap,,{}", num(r.gap));
        if let Some(mi) = &r.mi_per_dim {
            for (k, val) in mi.iter().enumerate() {
                let _ = writeln!(out, "{v},mi_dim_{},,{}", k + 1, num(*val));
            }
            let _ = writeln!(out, "{v},mi_sum,,{}", num(r.mi_sum().unwrap_or(0.0)));
        }
    }
    out
}

/// One row per report.
pub fn summary_csv(reports: &[TradeoffReport]) -> String {
    let mut out =
        String::from("variant,sensitive_best,sensitive_final,target_best,target_final,gap,mi_sum\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.variant.name(),
            num(r.sensitive.best_test_accuracy),
            num(r.sensitive.final_test_accuracy),
            num(r.target.best_test_accuracy),
            num(r.target.final_test_accuracy),
            num(r.gap),
            r.mi_sum().map(num).unwrap_or_default()
        );
    }
    out
}

/// `ratio,variant,metric,epoch,value` rows for the noisy-label study.
pub fn noisy_label_csv(points: &[NoisyLabelPoint]) -> String {
    let mut out = String::from("variant,metric,epoch,value\n");
    for p in points {
        for (name, report) in [("transformed", &p.transformed), ("raw", &p.raw)] {
            let mut rows = String::new();
            probe_rows(&mut rows, name, "target", report);
            for line in rows.lines() {
                let (variant, rest) = line.split_once(',').expect("variant column");
                let _ = writeln!(out, "{variant}@{},{rest}", num(p.ratio));
            }
        }
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<(), EvalError> {
    std::fs::write(path, text).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn binary_data(n: usize, informative: bool, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let mut x = Vec::with_capacity(n * 3);
        for &y in &labels {
            x.push(if informative { y as f64 } else { rng.gen_range(-1.0..1.0) });
            x.push(rng.gen_range(-1.0..1.0));
            x.push(rng.gen_range(-1.0..1.0));
        }
        (Tensor::matrix(n, 3, x), labels)
    }

    fn probe(informative: bool) -> ProbeReport {
        let (xtr, ytr) = binary_data(1_000, informative, 1);
        let (xte, yte) = binary_data(1_000, informative, 2);
        let cfg = ProbeConfig { hidden: vec![16, 16], ..Default::default() };
        train_probe(&ProbeData { x: &xtr, labels: &ytr }, &ProbeData { x: &xte, labels: &yte }, 2, &cfg, 3)
            .unwrap()
    }

    #[test]
    fn perfect_feature_is_found() {
        let r = probe(true);
        assert!(r.best_test_accuracy >= 0.99);
        assert!(r.best_test_accuracy >= r.final_test_accuracy);
        assert_eq!(r.curve.len(), 10);
    }

    #[test]
    fn independent_labels_stay_at_chance() {
        let r = probe(false);
        assert!(r.best_test_accuracy <= 0.55, "{}", r.best_test_accuracy);
        assert!((0.0..=1.0).contains(&r.final_test_accuracy));
    }

    #[test]
    fn probes_are_deterministic() {
        assert_eq!(probe(true), probe(true));
    }

    #[test]
    fn constant_column_is_centered_only() {
        let x = Tensor::matrix(3, 2, vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let (mean, scale) = standardizer(&x);
        assert_eq!(mean, vec![2.0, 5.0]);
        assert_eq!(scale[1], 1.0);
        let z = standardize(&x, &mean, &scale);
        assert_eq!(z.column(1), vec![0.0; 3]);
    }

    #[test]
    fn input_checks() {
        let (x, y) = binary_data(10, true, 1);
        let cfg = ProbeConfig::default();
        let short = &y[..5];
        assert!(train_probe(&ProbeData { x: &x, labels: short }, &ProbeData { x: &x, labels: &y }, 2, &cfg, 0)
            .is_err());
        assert!(train_probe(&ProbeData { x: &x, labels: &y }, &ProbeData { x: &x, labels: &y }, 1, &cfg, 0).is_err());
        assert!(ProbeConfig { epochs: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn csv_layouts() {
        let r = probe(true);
        let report = TradeoffReport {
            variant: Variant::Latent,
            sensitive: r.clone(),
            target: r.clone(),
            gap: gap(0.5, 0.75),
            mi_per_dim: Some(vec![0.01, 0.02]),
        };
        assert_eq!(report.gap, 0.25);
        let m = metrics_csv(std::slice::from_ref(&report));
        assert!(m.starts_with("variant,metric,epoch,value\nz_enc,sensitive_acc,1,"));
        assert!(m.contains("z_enc,mi_dim_2,,0.02\n"));
        assert_eq!(m.lines().count(), 1 + 2 * 12 + 1 + 3);
        let s = summary_csv(&[report]);
        assert_eq!(s.lines().count(), 2);
        assert!(s.lines().nth(1).unwrap().ends_with(",0.25,0.03"));
    }
}
