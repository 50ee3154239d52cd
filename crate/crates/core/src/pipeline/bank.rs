use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::data::{Dataset, Split};
use crate::density::SmoothingSpec;
use crate::diffnet::{Activation, Mlp, Tape, Tensor, TrainConfig};
use crate::miloss::{phase_loss, select_phase, LatentBatch, LossPhase, PhaseSchedule};
use crate::vae::VaeModel;

/// One scalar-to-scalar encoder per latent dimension `1..D`. Each encoder is
/// residual, `f(z) = z + g(z)`, with `g` a small tanh network whose output
/// layer starts at zero, so a fresh bank is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentEncoderBank {
    encoders: Vec<Mlp>,
    proximity_weight: f64,
}

impl LatentEncoderBank {
    pub fn identity(latent_dim: usize, hidden: usize, proximity_weight: f64, rng: &mut impl Rng) -> Self {
        assert!(latent_dim >= 2, "the bank needs at least one unmasked dimension");
        let encoders = (1..latent_dim).map(|_| identity_encoder(hidden, rng)).collect();
        Self { encoders, proximity_weight }
    }

    pub fn from_encoders(encoders: Vec<Mlp>, proximity_weight: f64) -> Result<Self, PipelineError> {
        if encoders.is_empty() {
            return Err(PipelineError::Shape("a bank needs at least one encoder".into()));
        }
        if let Some(k) = encoders.iter().position(|e| e.in_dim() != 1 || e.out_dim() != 1) {
            return Err(PipelineError::Shape(format!("encoder for dimension {} is not scalar to scalar", k + 1)));
        }
        if !(proximity_weight > 0.0 && proximity_weight.is_finite()) {
            return Err(PipelineError::Config(format!("proximity_weight must be positive, got {proximity_weight}")));
        }
        Ok(Self { encoders, proximity_weight })
    }

    /// Latent width `D`, including the masked dimension.
    pub fn latent_dim(&self) -> usize {
        self.encoders.len() + 1
    }

    pub fn proximity_weight(&self) -> f64 {
        self.proximity_weight
    }

    /// Encoder for latent dimension `dim` (1-based; dimension 0 has none).
    pub fn encoder(&self, dim: usize) -> &Mlp {
        &self.encoders[dim - 1]
    }

    pub fn encoders(&self) -> &[Mlp] {
        &self.encoders
    }

    /// `f_dim` applied to each value.
    pub fn apply(&self, dim: usize, z: &[f64]) -> Vec<f64> {
        let g = self.encoders[dim - 1]
            .predict(&Tensor::matrix(z.len(), 1, z.to_vec()))
            .expect("scalar encoder on a column");
        z.iter().zip(g.data()).map(|(a, b)| a + b).collect()
    }

    /// Masks dimension 0 and applies each `f_i` to column `i` of `z[n×D]`.
    pub fn encode(&self, z: &Tensor) -> Result<Tensor, PipelineError> {
        if z.cols() != self.latent_dim() {
            return Err(PipelineError::Shape(format!("latent width {} vs bank width {}", z.cols(), self.latent_dim())));
        }
        let mut out = super::mask_z0(z);
        let d = z.cols();
        for dim in 1..d {
            let col = self.apply(dim, &z.column(dim));
            for (r, v) in col.into_iter().enumerate() {
                out.data_mut()[r * d + dim] = v;
            }
        }
        Ok(out)
    }
}

fn identity_encoder(hidden: usize, rng: &mut impl Rng) -> Mlp {
    let mut g = Mlp::new(&[1, hidden, 1], Activation::Tanh, Activation::Identity, rng);
    let last = g.layers_mut().last_mut().expect("two layers");
    last.weight.data_mut().fill(0.0);
    last.bias.data_mut().fill(0.0);
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    /// Weight λ of the proximity penalty `mean((f(z) − z)²)`.
    pub proximity_weight: f64,
    pub m_values: Vec<usize>,
    /// Width of the Gaussian rank-smoothing window.
    pub smoothing_sigma: f64,
    pub switch_threshold_sqdiff: f64,
    pub switch_threshold_sqratio: f64,
    pub phase_window: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Samples per step, half from each label.
    pub batch_size: usize,
    pub hidden: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        let schedule = PhaseSchedule::default();
        Self {
            proximity_weight: 1.0,
            m_values: vec![5, 10, 20],
            smoothing_sigma: 1.0,
            switch_threshold_sqdiff: schedule.switch_threshold_sqdiff,
            switch_threshold_sqratio: schedule.switch_threshold_sqratio,
            phase_window: schedule.window,
            epochs: 20,
            learning_rate: 5e-3,
            batch_size: 512,
            hidden: 16,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.proximity_weight > 0.0 && self.proximity_weight.is_finite()) {
            return bad(format!("proximity_weight must be positive, got {}", self.proximity_weight));
        }
        self.smoothing().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.schedule().validate().map_err(PipelineError::Config)?;
        if self.batch_size < 4 || self.batch_size % 2 != 0 {
            return bad(format!("batch_size must be even and at least 4, got {}", self.batch_size));
        }
        if self.hidden == 0 {
            return bad("hidden must be positive".into());
        }
        self.train_config().validate().map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn smoothing(&self) -> Result<SmoothingSpec, crate::density::DensityError> {
        SmoothingSpec::gaussian(self.smoothing_sigma, self.m_values.clone())
    }

    pub fn schedule(&self) -> PhaseSchedule {
        PhaseSchedule {
            switch_threshold_sqdiff: self.switch_threshold_sqdiff,
            switch_threshold_sqratio: self.switch_threshold_sqratio,
            window: self.phase_window,
        }
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

/// Training record of one latent dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct DimensionReport {
    pub dim: usize,
    /// Dependency loss per step, in the phase active at that step.
    pub losses: Vec<f64>,
    pub phases: Vec<LossPhase>,
    /// Step at which training switched to the squared-ratio loss.
    pub switched_at: Option<usize>,
    pub converged: bool,
    /// Set when the loss diverged; the encoder was reset to the identity.
    pub diverged: Option<String>,
}

/// Posterior parameters of the train split, per latent dimension.
struct TrainLatents {
    mu: Vec<Vec<f64>>,
    sd: Vec<Vec<f64>>,
    s: Vec<i8>,
}

fn train_latents(vae: &VaeModel, dataset: &Dataset) -> Result<TrainLatents, PipelineError> {
    let train = dataset.part(Split::Train);
    let (mu, lv) = vae.encode(&train.features())?;
    let d = vae.latent_dim();
    Ok(TrainLatents {
        mu: (0..d).map(|c| mu.column(c)).collect(),
        sd: (0..d).map(|c| lv.column(c).iter().map(|v| (0.5 * v).exp()).collect()).collect(),
        s: train.s().to_vec(),
    })
}

/// Trains every encoder of the bank against the dependency curriculum. The
/// VAE is only read. Dimension `i` draws from its own random stream, so the
/// result for one dimension does not depend on the others.
pub fn train_stage2(
    bank: &mut LatentEncoderBank,
    vae: &VaeModel,
    dataset: &Dataset,
    cfg: &Stage2Config,
    seed: u64,
) -> Result<Vec<DimensionReport>, PipelineError> {
    cfg.validate()?;
    if !dataset.is_balanced() {
        return Err(PipelineError::Data("sensitive labels are not balanced".into()));
    }
    if bank.latent_dim() != vae.latent_dim() {
        return Err(PipelineError::Shape(format!(
            "bank covers {} latent dimensions, VAE has {}",
            bank.latent_dim(),
            vae.latent_dim()
        )));
    }
    bank.proximity_weight = cfg.proximity_weight;
    let latents = train_latents(vae, dataset)?;
    let mut reports = Vec::with_capacity(bank.encoders.len());
    for dim in 1..vae.latent_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(dim as u64);
        let samples = DimSamples { mu: &latents.mu[dim], sd: Some(&latents.sd[dim]), s: &latents.s };
        let (encoder, report) = train_dimension(&bank.encoders[dim - 1], dim, &samples, cfg, &mut rng)?;
        bank.encoders[dim - 1] = encoder;
        reports.push(report);
    }
    Ok(reports)
}

/// One dimension's training inputs: posterior means, optional posterior
/// standard deviations for sampling, and labels.
pub struct DimSamples<'a> {
    pub mu: &'a [f64],
    pub sd: Option<&'a [f64]>,
    pub s: &'a [i8],
}

/// Trains a single encoder, starting from `start`. On divergence the
/// returned encoder is a fresh identity and the report says why.
pub fn train_dimension(
    start: &Mlp,
    dim: usize,
    samples: &DimSamples<'_>,
    cfg: &Stage2Config,
    rng: &mut ChaCha8Rng,
) -> Result<(Mlp, DimensionReport), PipelineError> {
    let spec = cfg.smoothing().map_err(|e| PipelineError::Config(e.to_string()))?;
    let schedule = cfg.schedule();
    let train_cfg = cfg.train_config();
    let mut pos: Vec<usize> = (0..samples.s.len()).filter(|&i| samples.s[i] == 1).collect();
    let mut neg: Vec<usize> = (0..samples.s.len()).filter(|&i| samples.s[i] == -1).collect();
    let half = cfg.batch_size / 2;
    if pos.len() < half || neg.len() < half {
        return Err(PipelineError::Data(format!(
            "batch of {} needs {half} samples per label, have {} and {}",
            cfg.batch_size,
            pos.len(),
            neg.len()
        )));
    }
    let labels: Vec<i8> = (0..cfg.batch_size).map(|k| if k < half { -1 } else { 1 }).collect();

    let mut g = start.clone();
    let mut report =
        DimensionReport { dim, losses: Vec::new(), phases: Vec::new(), switched_at: None, converged: false, diverged: None };
    let mut phase = LossPhase::SqDiff;
    let mut history: Vec<f64> = Vec::new();
    let steps = pos.len().min(neg.len()) / half;

    'epochs: for _ in 0..cfg.epochs {
        neg.shuffle(rng);
        pos.shuffle(rng);
        for step in 0..steps {
            let idx = neg[step * half..(step + 1) * half].iter().chain(&pos[step * half..(step + 1) * half]);
            let z: Vec<f64> = idx
                .map(|&i| {
                    let noise = match samples.sd {
                        Some(sd) => sd[i] * rng.sample::<f64, _>(StandardNormal),
                        None => 0.0,
                    };
                    samples.mu[i] + noise
                })
                .collect();

            let tape = Tape::new();
            let x = tape.leaf(Tensor::matrix(z.len(), 1, z));
            let run = g.forward(x)?;
            let f = x + run.output();
            let batch = LatentBatch::new(f.value().into_data(), labels.clone());
            let batch = match batch {
                Ok(b) => b,
                Err(e) => {
                    report.diverged = Some(e.to_string());
                    break 'epochs;
                }
            };
            let dependency = phase_loss(phase, &batch, f, &spec)?;
            let loss = dependency.value + run.output().square().mean().scale(cfg.proximity_weight);
            let value = loss.item();
            if !value.is_finite() {
                report.diverged = Some(format!("non-finite loss at step {}", report.losses.len()));
                break 'epochs;
            }
            let grads = tape.backward(loss)?;
            g.adam_step(&run.gradients(&grads), &train_cfg)?;

            let dep = dependency.value.item();
            report.losses.push(dep);
            report.phases.push(phase);
            history.push(dep);
            let next = select_phase(&history, phase, &schedule);
            if next != phase {
                phase = next;
                history.clear();
                report.switched_at = Some(report.losses.len());
            } else if phase == LossPhase::SqRatio && history.len() >= schedule.window && schedule.converged(&history) {
                report.converged = true;
                break 'epochs;
            }
        }
    }
    if report.diverged.is_some() {
        g = identity_encoder(cfg.hidden, rng);
    }
    Ok((g, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_bank_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = LatentEncoderBank::identity(4, 8, 1.0, &mut rng);
        assert_eq!(bank.latent_dim(), 4);
        let z = Tensor::matrix(2, 4, vec![1.0, 0.3, -2.0, 5.0, -1.0, 0.0, 7.5, -0.25]);
        let out = bank.encode(&z).unwrap();
        assert_eq!(out.data(), &[0.0, 0.3, -2.0, 5.0, 0.0, 0.0, 7.5, -0.25]);
        assert!(bank.encode(&Tensor::matrix(1, 3, vec![0.0; 3])).is_err());
    }

    #[test]
    fn dimensions_are_isolated() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bank = LatentEncoderBank::identity(3, 8, 1.0, &mut rng);
        for e in bank.encoders.iter_mut() {
            e.layers_mut()[1].weight.data_mut().iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
        }
        let a = bank.encode(&Tensor::matrix(1, 3, vec![0.5, 0.2, -0.4])).unwrap();
        let b = bank.encode(&Tensor::matrix(1, 3, vec![-3.0, 0.2, 9.0])).unwrap();
        assert_eq!(a.data()[1], b.data()[1]);
        assert_ne!(a.data()[2], b.data()[2]);
    }

    #[test]
    fn config_bounds() {
        assert!(Stage2Config::default().validate().is_ok());
        assert!(Stage2Config { proximity_weight: 0.0, ..Default::default() }.validate().is_err());
        assert!(Stage2Config { batch_size: 7, ..Default::default() }.validate().is_err());
        assert!(Stage2Config { m_values: vec![], ..Default::default() }.validate().is_err());
        assert!(Stage2Config { phase_window: 0, ..Default::default() }.validate().is_err());
    }
}
