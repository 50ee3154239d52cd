//! Stage one: a variational autoencoder whose prior mean is `[s, 0, ..., 0]`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Split};
use crate::diffnet::{Activation, DiffError, Mlp, MlpRun, Tape, Tensor, TrainConfig, Var};

#[derive(Debug, Error)]
pub enum VaeError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid VAE config: {0}")]
    Config(String),
    #[error("training data rejected: {0}")]
    Data(String),
    #[error("VAE loss diverged at epoch {epoch}, step {step} (loss {loss})")]
    Divergence { epoch: usize, step: usize, loss: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub latent_dim: usize,
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub beta_kl: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { latent_dim: 6, hidden: vec![128], beta_kl: 0.002, epochs: 60, learning_rate: 2e-3, batch_size: 64 }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<(), VaeError> {
        if self.latent_dim < 2 {
            return Err(VaeError::Config(format!("latent_dim must be at least 2, got {}", self.latent_dim)));
        }
        if self.hidden.contains(&0) {
            return Err(VaeError::Config("hidden widths must be positive".into()));
        }
        if !(self.beta_kl > 0.0 && self.beta_kl.is_finite()) {
            return Err(VaeError::Config(format!("beta_kl must be positive, got {}", self.beta_kl)));
        }
        self.train_config(0).validate()?;
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            ..TrainConfig::default()
        }
    }
}

/// Prior mean for label `s`: `s` in component 0, zeros elsewhere.
pub fn target_mean(s: i8, latent_dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; latent_dim];
    m[0] = f64::from(s);
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    encoder: Mlp,
    decoder: Mlp,
    latent_dim: usize,
}

/// A recorded forward pass through the whole model.
pub struct VaeRun<'t> {
    pub loss: Var<'t>,
    pub reconstruction: Var<'t>,
    pub kl: Var<'t>,
    encoder: MlpRun<'t>,
    decoder: MlpRun<'t>,
}

impl VaeModel {
    /// Relu hidden layers, identity outputs. The encoder emits `2D` values.
    pub fn new(input_dim: usize, latent_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut enc_dims = vec![input_dim];
        enc_dims.extend_from_slice(hidden);
        enc_dims.push(2 * latent_dim);
        let mut dec_dims = vec![latent_dim];
        dec_dims.extend(hidden.iter().rev());
        dec_dims.push(input_dim);
        Self {
            encoder: Mlp::new(&enc_dims, Activation::Relu, Activation::Identity, rng),
            decoder: Mlp::new(&dec_dims, Activation::Relu, Activation::Identity, rng),
            latent_dim,
        }
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp) -> Result<Self, VaeError> {
        let out = encoder.out_dim();
        if out % 2 != 0 || out / 2 != decoder.in_dim() {
            return Err(VaeError::Shape(format!(
                "encoder emits {out} values but decoder takes {}",
                decoder.in_dim()
            )));
        }
        if encoder.in_dim() != decoder.out_dim() {
            return Err(VaeError::Shape(format!(
                "encoder reads {} inputs but decoder emits {}",
                encoder.in_dim(),
                decoder.out_dim()
            )));
        }
        Ok(Self { latent_dim: out / 2, encoder, decoder })
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    /// Posterior parameters `(μ_e, log σ²)`, each `n × D`.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor), VaeError> {
        let out = self.encoder.predict(x).map_err(|e| VaeError::Shape(e.to_string()))?;
        Ok(split_halves(&out, self.latent_dim))
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor, VaeError> {
        self.decoder.predict(z).map_err(|e| VaeError::Shape(e.to_string()))
    }

    /// Records the single-sample ELBO loss for one batch.
    pub fn run<'t>(
        &self,
        x: Var<'t>,
        s: &[i8],
        noise: &Tensor,
        beta_kl: f64,
    ) -> Result<VaeRun<'t>, VaeError> {
        let d = self.latent_dim;
        let encoder = self.encoder.forward(x)?;
        let out = encoder.output();
        let (mu, log_var) = (out.slice_cols(0, d), out.slice_cols(d, 2 * d));
        if noise.shape() != mu.shape().as_slice() {
            return Err(VaeError::Shape(format!("noise {:?} vs latent {:?}", noise.shape(), mu.shape())));
        }
        let z = reparameterize(mu, log_var, noise);
        let decoder = self.decoder.forward(z)?;
        let reconstruction = (decoder.output() - x).square().mean();
        let kl = kl_conditional_prior(mu, log_var, s);
        let loss = reconstruction + kl.scale(beta_kl);
        Ok(VaeRun { loss, reconstruction, kl, encoder, decoder })
    }

    /// Parameter checksums of encoder and decoder.
    pub fn checksum(&self) -> (String, String) {
        (self.encoder.checksum(), self.decoder.checksum())
    }
}

fn split_halves(out: &Tensor, d: usize) -> (Tensor, Tensor) {
    let rows = out.rows();
    let (mut mu, mut lv) = (Vec::with_capacity(rows * d), Vec::with_capacity(rows * d));
    for r in 0..rows {
        let row = out.row(r);
        mu.extend_from_slice(&row[..d]);
        lv.extend_from_slice(&row[d..]);
    }
    (Tensor::matrix(rows, d, mu), Tensor::matrix(rows, d, lv))
}

/// `z = μ + exp(log σ² / 2) · noise`; the noise is a constant leaf.
pub fn reparameterize<'t>(mu: Var<'t>, log_var: Var<'t>, noise: &Tensor) -> Var<'t> {
    let eps = mu.tape().leaf(noise.clone());
    mu + log_var.scale(0.5).exp() * eps
}

/// Batch mean of `KL(N(μ, σ²) ‖ N(target_mean(s), I))`.
pub fn kl_conditional_prior<'t>(mu: Var<'t>, log_var: Var<'t>, s: &[i8]) -> Var<'t> {
    let shape = mu.shape();
    let (n, d) = (shape[0], shape[1]);
    assert_eq!(s.len(), n, "one sensitive label per latent row");
    let target: Vec<f64> = s.iter().flat_map(|&l| target_mean(l, d)).collect();
    let t = mu.tape().leaf(Tensor::matrix(n, d, target));
    let per_elem = log_var.exp() + (mu - t).square() - log_var;
    per_elem.add_scalar(-1.0).sum().scale(0.5 / n as f64)
}

/// Plain-value form of [`kl_conditional_prior`].
pub fn kl_value(mu: &Tensor, log_var: &Tensor, s: &[i8]) -> f64 {
    let (n, d) = (mu.rows(), mu.cols());
    let mut total = 0.0;
    for r in 0..n {
        let t = target_mean(s[r], d);
        for c in 0..d {
            let (m, lv) = (mu.row(r)[c], log_var.row(r)[c]);
            total += lv.exp() + (m - t[c]).powi(2) - 1.0 - lv;
        }
    }
    0.5 * total / n as f64
}

/// `mean((x̂ − x)²) + β·KL` evaluated without recording.
pub fn vae_loss(model: &VaeModel, x: &Tensor, s: &[i8], noise: &Tensor, beta_kl: f64) -> Result<f64, VaeError> {
    if !(beta_kl > 0.0) {
        return Err(VaeError::Config(format!("beta_kl must be positive, got {beta_kl}")));
    }
    let tape = Tape::new();
    let run = model.run(tape.leaf(x.clone()), s, noise, beta_kl)?;
    Ok(run.loss.item())
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeTraining {
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// Trains on the dataset's train split. Aborts on a non-finite loss.
pub fn train_vae(
    model: &mut VaeModel,
    dataset: &Dataset,
    cfg: &VaeConfig,
    rng: &mut impl Rng,
) -> Result<VaeTraining, VaeError> {
    cfg.validate()?;
    if !dataset.is_balanced() {
        return Err(VaeError::Data("sensitive labels are not balanced".into()));
    }
    if dataset.dim() != model.input_dim() {
        return Err(VaeError::Shape(format!("dataset width {} vs model input {}", dataset.dim(), model.input_dim())));
    }
    let train_cfg = cfg.train_config(0);
    let mut order = dataset.indices(Split::Train);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let (mut total, mut count) = (0.0, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let sub = dataset.subset(batch);
            let noise = standard_normal(batch.len(), model.latent_dim, rng);
            let tape = Tape::new();
            let run = model.run(tape.leaf(sub.features()), sub.s(), &noise, cfg.beta_kl)?;
            let loss = run.loss.item();
            if !loss.is_finite() {
                return Err(VaeError::Divergence { epoch, step, loss });
            }
            let grads = tape.backward(run.loss)?;
            let (ge, gd) = (run.encoder.gradients(&grads), run.decoder.gradients(&grads));
            model.encoder.adam_step(&ge, &train_cfg)?;
            model.decoder.adam_step(&gd, &train_cfg)?;
            total += loss * batch.len() as f64;
            count += batch.len();
        }
        curve.push(total / count as f64);
    }
    Ok(VaeTraining { loss_curve: curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::Layer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_model(input: usize, d: usize, enc_bias: Vec<f64>) -> VaeModel {
        let enc = Layer::new(
            Tensor::matrix(2 * d, input, vec![0.0; 2 * d * input]),
            Tensor::vector(enc_bias),
            Activation::Identity,
        )
        .unwrap();
        let dec = Layer::new(
            Tensor::matrix(input, d, vec![0.0; input * d]),
            Tensor::vector(vec![0.0; input]),
            Activation::Identity,
        )
        .unwrap();
        VaeModel::from_parts(Mlp::from_layers(vec![enc]).unwrap(), Mlp::from_layers(vec![dec]).unwrap()).unwrap()
    }

    fn kl_of(mu: &[f64], lv: &[f64], s: &[i8]) -> f64 {
        let d = mu.len() / s.len();
        let tape = Tape::new();
        let m = tape.leaf(Tensor::matrix(s.len(), d, mu.to_vec()));
        let l = tape.leaf(Tensor::matrix(s.len(), d, lv.to_vec()));
        kl_conditional_prior(m, l, s).item()
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_of(&[1.0, 0.0, 0.0], &[0.0; 3], &[1]), 0.0);
        assert_eq!(kl_of(&[-1.0, 0.0], &[0.0; 2], &[-1]), 0.0);
        assert!((kl_of(&[2.0], &[0.0], &[1]) - 0.5).abs() < 1e-12);
        let expected = 0.5 * (2.0 - 1.0 - 2f64.ln());
        assert!((kl_of(&[-1.0], &[2f64.ln()], &[-1]) - expected).abs() < 1e-12);
        assert!((expected - 0.1534).abs() < 1e-4);
    }

    #[test]
    fn kl_value_matches_recorded() {
        let mu = [0.3, -0.2, 0.7, 1.1];
        let lv = [0.1, -0.4, 0.0, 0.5];
        let s = [1, -1];
        let v = kl_value(&Tensor::matrix(2, 2, mu.to_vec()), &Tensor::matrix(2, 2, lv.to_vec()), &s);
        assert!((v - kl_of(&mu, &lv, &s)).abs() < 1e-14);
    }

    #[test]
    fn kl_prior_switch_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let mu: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let lv: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut flipped = mu.clone();
            flipped[0] = -flipped[0];
            let a = kl_of(&mu, &lv, &[1]);
            assert!(a >= 0.0);
            assert!((a - kl_of(&flipped, &lv, &[-1])).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_encoder_emits_bias() {
        let m = zero_model(3, 2, vec![0.5, -0.5, 0.1, 0.2]);
        let (mu, lv) = m.encode(&Tensor::matrix(1, 3, vec![9.0, 8.0, 7.0])).unwrap();
        assert_eq!(mu.data(), &[0.5, -0.5]);
        assert_eq!(lv.data(), &[0.1, 0.2]);
        assert!(m.encode(&Tensor::matrix(1, 2, vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn reparameterize_examples() {
        let tape = Tape::new();
        let mu = tape.leaf(Tensor::vector(vec![0.5, -1.0]));
        let lv = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let z0 = reparameterize(mu, lv, &Tensor::vector(vec![0.0, 0.0]));
        assert_eq!(z0.value().data(), &[0.5, -1.0]);
        let z1 = reparameterize(mu, lv, &Tensor::vector(vec![1.0, 1.0]));
        assert_eq!(z1.value().data(), &[1.5, 0.0]);
    }

    #[test]
    fn reparameterize_gradient_matches_finite_differences() {
        let mu = vec![0.3, -0.7, 1.2];
        let lv = vec![0.2, -0.5, 0.9];
        let noise = Tensor::vector(vec![0.4, -1.3, 0.8]);
        let f = |lv: &[f64]| {
            let tape = Tape::new();
            let m = tape.leaf(Tensor::vector(mu.clone()));
            let l = tape.leaf(Tensor::vector(lv.to_vec()));
            reparameterize(m, l, &noise).mean().item()
        };
        let tape = Tape::new();
        let m = tape.leaf(Tensor::vector(mu.clone()));
        let l = tape.leaf(Tensor::vector(lv.clone()));
        let out = reparameterize(m, l, &noise).mean();
        let g = tape.backward(out).unwrap();
        let glv = g.get(l).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let (mut up, mut down) = (lv.clone(), lv.clone());
            up[k] += h;
            down[k] -= h;
            let fd = (f(&up) - f(&down)) / (2.0 * h);
            assert!((glv[k] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "{} vs {fd}", glv[k]);
        }
        assert!(g.get(m).unwrap().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn loss_of_perfect_model_is_zero() {
        // Decoder ignores z and emits the bias, which equals the only input.
        let mut m = zero_model(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        m.decoder.layers_mut()[0].bias = Tensor::vector(vec![0.25, 0.75]);
        let x = Tensor::matrix(1, 2, vec![0.25, 0.75]);
        let noise = Tensor::matrix(1, 2, vec![0.3, -0.2]);
        assert_eq!(vae_loss(&m, &x, &[1], &noise, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn zero_decoder_reconstruction_term() {
        let m = zero_model(4, 2, vec![1.0, 0.0, 0.0, 0.0]);
        let x = Tensor::matrix(2, 4, vec![1.0, -1.0, 1.0, -1.0, -1.0, 1.0, 1.0, 1.0]);
        let tape = Tape::new();
        let run = m.run(tape.leaf(x), &[1, 1], &Tensor::matrix(2, 2, vec![0.0; 4]), 1.0).unwrap();
        assert_eq!(run.reconstruction.item(), 1.0);
        assert_eq!(run.kl.item(), 0.0);
        assert!(vae_loss(&m, &Tensor::matrix(1, 4, vec![0.0; 4]), &[1], &Tensor::matrix(1, 2, vec![0.0; 2]), 0.0)
            .is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = crate::data::gen_shapes(&crate::data::ShapesSpec {
            n_samples: 80,
            ..Default::default()
        })
        .unwrap();
        let mut m = VaeModel::new(256, 3, &[8], &mut rng);
        let before = m.clone();
        let cfg = VaeConfig { latent_dim: 3, hidden: vec![8], epochs: 1, learning_rate: 0.0, ..Default::default() };
        train_vae(&mut m, &data, &cfg, &mut rng).unwrap();
        assert_eq!(m.encoder().parameters(), before.encoder().parameters());
        assert_eq!(m.decoder().parameters(), before.decoder().parameters());
    }

    #[test]
    fn divergence_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = crate::data::gen_shapes(&crate::data::ShapesSpec { n_samples: 80, ..Default::default() }).unwrap();
        let mut m = VaeModel::new(256, 2, &[4], &mut rng);
        m.encoder.layers_mut()[1].bias.data_mut()[2] = 1e6;
        let cfg = VaeConfig { latent_dim: 2, hidden: vec![4], epochs: 1, ..Default::default() };
        assert!(matches!(train_vae(&mut m, &data, &cfg, &mut rng), Err(VaeError::Divergence { .. })));
    }

    #[test]
    fn config_bounds() {
        assert!(VaeConfig::default().validate().is_ok());
        assert!(VaeConfig { beta_kl: 0.0, ..Default::default() }.validate().is_err());
        assert!(VaeConfig { latent_dim: 1, ..Default::default() }.validate().is_err());
        assert!(VaeConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn trained_loss_beats_mean_predictor() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = crate::data::gen_shapes(&crate::data::ShapesSpec { n_samples: 1600, ..Default::default() }).unwrap();
        let cfg = VaeConfig { epochs: 20, ..Default::default() };
        let mut m = VaeModel::new(256, cfg.latent_dim, &cfg.hidden, &mut rng);
        train_vae(&mut m, &data, &cfg, &mut rng).unwrap();
        let x = data.features();
        let n = data.len() as f64;
        let mean: Vec<f64> = (0..256).map(|k| (0..data.len()).map(|i| x.row(i)[k]).sum::<f64>() / n).collect();
        let baseline = (0..data.len())
            .map(|i| x.row(i).iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            / (n * 256.0);
        let noise = standard_normal(data.len(), cfg.latent_dim, &mut rng);
        let loss = vae_loss(&m, &x, data.s(), &noise, cfg.beta_kl).unwrap();
        assert!(loss < baseline, "trained {loss} vs mean predictor {baseline}");
    }
}
