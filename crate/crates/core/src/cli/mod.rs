//! Command-line front end: config loading, named seed streams, artifact
//! layout, run manifests and exit codes.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

pub use config::{stream_seed, Config, DatasetKind, FingerprintScope};

use crate::data::{self, Dataset, Split};
use crate::eval::{self, EvalError, Variant};
use crate::miloss::{self, LatentBatch, LossError};
use crate::pipeline::{self, hex, LatentEncoderBank, PipelineCheckpoint, PipelineError};
use crate::vae::{self, VaeError, VaeModel};

pub const TRAIN_CSV: &str = "data_train.csv";
pub const TEST_CSV: &str = "data_test.csv";
pub const VAE_CKPT: &str = "vae.ckpt";
pub const PIPELINE_CKPT: &str = "pipeline.ckpt";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing or stale upstream artifact: {0}")]
    Dependency(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dependency(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<VaeError> for CliError {
    fn from(e: VaeError) -> Self {
        match e {
            VaeError::Divergence { .. } => CliError::Divergence(e.to_string()),
            VaeError::Config(_) => CliError::Config(e.to_string()),
            e => CliError::Other(e.into()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Vae(v) => v.into(),
            PipelineError::Dependency(_) | PipelineError::Fingerprint { .. } => CliError::Dependency(e.to_string()),
            PipelineError::Config(_) => CliError::Config(e.to_string()),
            e => CliError::Other(e.into()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Pipeline(p) => p.into(),
            EvalError::Config(_) => CliError::Config(e.to_string()),
            e => CliError::Other(e.into()),
        }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        CliError::Other(e.into())
    }
}

impl From<data::DataError> for CliError {
    fn from(e: data::DataError) -> Self {
        CliError::Other(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "nnsuppress", version, about = "Suppress a binary sensitive label from learned representations")]
pub struct Cli {
    /// TOML config file; defaults apply to everything it omits.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config value, applied before validation. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory, overriding `paths.out_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Root seed, overriding `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand, PartialEq, Eq)]
pub enum Command {
    /// Generate or import the dataset and write its train/test CSVs.
    GenData,
    /// Train the conditional-prior VAE.
    TrainVae,
    /// Train the per-dimension latent encoders on top of the VAE.
    TrainEncoder,
    /// Write the decoded representation x' of every sample.
    Transform,
    /// Probe raw, x', z_enc and VAE-only representations.
    Evaluate,
    /// Estimate the mutual information of each column with the sensitive label.
    EstimateMi {
        /// Use the pipeline's encoded latents instead of the raw features.
        #[arg(long)]
        latent: bool,
    },
    /// Write VAE and encoded latents of every sample.
    ExportLatents,
    /// Target probes under training-label noise, raw versus x'.
    NoisyLabels,
    /// Compare x' with the decoded masked VAE latents (no latent encoders).
    AblateVaeOnly,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainVae => "train-vae",
            Command::TrainEncoder => "train-encoder",
            Command::Transform => "transform",
            Command::Evaluate => "evaluate",
            Command::EstimateMi { .. } => "estimate-mi",
            Command::ExportLatents => "export-latents",
            Command::NoisyLabels => "noisy-labels",
            Command::AblateVaeOnly => "ablate-vae-only",
        }
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    vae_fingerprint: String,
    pipeline_fingerprint: String,
    wall_time_secs: f64,
    artifacts: &'a [String],
    config: String,
}

/// Entry point for the binary: parses `args`, runs, reports errors on
/// stderr and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            e.exit_code()
        }
    }
}

/// Resolves the effective config: file, `--set` overrides, then the
/// `--seed` / `--out` flags.
pub fn effective_config(cli: &Cli) -> Result<Config, CliError> {
    let mut cfg = Config::load(cli.config.as_deref(), &cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = effective_config(cli)?;
    std::fs::create_dir_all(&cfg.paths.out_dir)
        .with_context(|| format!("creating {}", cfg.paths.out_dir.display()))?;
    run_command(&cfg, cli.command)
}

/// Runs one subcommand against a validated config and writes its manifest.
pub fn run_command(cfg: &Config, command: Command) -> Result<(), CliError> {
    let start = Instant::now();
    let ctx = Ctx { cfg, out: &cfg.paths.out_dir };
    let artifacts = match command {
        Command::GenData => ctx.gen_data()?,
        Command::TrainVae => ctx.train_vae()?,
        Command::TrainEncoder => ctx.train_encoder()?,
        Command::Transform => ctx.transform()?,
        Command::Evaluate => ctx.evaluate()?,
        Command::EstimateMi { latent } => ctx.estimate_mi(latent)?,
        Command::ExportLatents => ctx.export_latents()?,
        Command::NoisyLabels => ctx.noisy_labels()?,
        Command::AblateVaeOnly => ctx.ablate()?,
    };
    let manifest = Manifest {
        command: command.name(),
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        vae_fingerprint: hex(&cfg.fingerprint(FingerprintScope::Vae)),
        pipeline_fingerprint: hex(&cfg.fingerprint(FingerprintScope::Pipeline)),
        wall_time_secs: start.elapsed().as_secs_f64(),
        artifacts: &artifacts,
        config: cfg.to_toml(),
    };
    let path = ctx.path(&format!("{}.manifest.json", command.name()));
    let text = serde_json::to_string_pretty(&manifest).context("serializing manifest")?;
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

struct Ctx<'a> {
    cfg: &'a Config,
    out: &'a Path,
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn seed(&self, stream: &str) -> u64 {
        stream_seed(self.cfg.seed, stream)
    }

    fn require(&self, name: &str, producer: &str) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        if path.is_file() {
            Ok(path)
        } else {
            Err(CliError::Dependency(format!("{} not found; run `{producer}` first", path.display())))
        }
    }

    fn write(&self, name: &str, text: &str) -> Result<String, CliError> {
        let path = self.path(name);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(name.to_string())
    }

    fn dataset(&self) -> Result<Dataset, CliError> {
        let train = self.require(TRAIN_CSV, "gen-data")?;
        let test = self.require(TEST_CSV, "gen-data")?;
        Ok(data::load_split_csv(&train, &test, self.cfg.dataset.class_count())?)
    }

    fn vae_checkpoint(&self) -> Result<PipelineCheckpoint, CliError> {
        let path = self.require(VAE_CKPT, "train-vae")?;
        Ok(PipelineCheckpoint::load(&path, Some(&self.cfg.fingerprint(FingerprintScope::Vae)))?)
    }

    fn pipeline_checkpoint(&self) -> Result<PipelineCheckpoint, CliError> {
        let path = self.require(PIPELINE_CKPT, "train-encoder")?;
        Ok(PipelineCheckpoint::load(&path, Some(&self.cfg.fingerprint(FingerprintScope::Pipeline)))?)
    }

    fn gen_data(&self) -> Result<Vec<String>, CliError> {
        let ds = &self.cfg.dataset;
        let seed = self.seed("data");
        let dataset = match ds.kind {
            DatasetKind::Shapes => data::gen_shapes(&ds.shapes(seed))?,
            DatasetKind::GaussianPair => data::gen_gaussian_pair(&ds.gaussian_pair(seed))?,
            DatasetKind::Csv => {
                let (train, test) = (ds.train_csv.as_ref(), ds.test_csv.as_ref());
                let (train, test) = train.zip(test).expect("validated");
                data::load_split_csv(train, test, ds.n_classes)?
            }
        };
        for (split, name) in [(Split::Train, TRAIN_CSV), (Split::Test, TEST_CSV)] {
            data::write_csv(&dataset, split, &self.path(name))?;
        }
        eprintln!(
            "gen-data: {} samples ({} train), dim {}, {} classes",
            dataset.len(),
            dataset.indices(Split::Train).len(),
            dataset.dim(),
            dataset.n_classes()
        );
        Ok(vec![TRAIN_CSV.into(), TEST_CSV.into()])
    }

    fn train_vae(&self) -> Result<Vec<String>, CliError> {
        let dataset = self.dataset()?;
        let v = &self.cfg.vae;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed("vae"));
        let mut model = VaeModel::new(dataset.dim(), v.latent_dim, &v.hidden, &mut rng);
        let training = vae::train_vae(&mut model, &dataset, v, &mut rng)?;
        let ckpt =
            PipelineCheckpoint { fingerprint: self.cfg.fingerprint(FingerprintScope::Vae), vae: model, bank: None };
        ckpt.save(&self.path(VAE_CKPT))?;
        let mut curve = String::from("epoch,loss\n");
        for (e, l) in training.loss_curve.iter().enumerate() {
            let _ = writeln!(curve, "{},{l:?}", e + 1);
        }
        let loss = self.write("vae_loss.csv", &curve)?;
        eprintln!("train-vae: final loss {:.6}", training.loss_curve.last().copied().unwrap_or(f64::NAN));
        Ok(vec![VAE_CKPT.into(), loss])
    }

    fn train_encoder(&self) -> Result<Vec<String>, CliError> {
        let dataset = self.dataset()?;
        let vae_ckpt = self.vae_checkpoint()?;
        let s2 = &self.cfg.stage2;
        let mut init = ChaCha8Rng::seed_from_u64(self.seed("stage2_init"));
        let mut bank =
            LatentEncoderBank::identity(vae_ckpt.vae.latent_dim(), s2.hidden, s2.proximity_weight, &mut init);
        let reports = pipeline::train_stage2(&mut bank, &vae_ckpt.vae, &dataset, s2, self.seed("stage2"))?;
        let mut log = String::from("dim,step,phase,loss\n");
        for r in &reports {
            for (step, (loss, phase)) in r.losses.iter().zip(&r.phases).enumerate() {
                let _ = writeln!(log, "{},{},{},{loss:?}", r.dim, step + 1, phase.name());
            }
            if let Some(msg) = &r.diverged {
                eprintln!("train-encoder: dimension {} diverged and was reset: {msg}", r.dim);
            }
        }
        let ckpt = PipelineCheckpoint {
            fingerprint: self.cfg.fingerprint(FingerprintScope::Pipeline),
            vae: vae_ckpt.vae,
            bank: Some(bank),
        };
        ckpt.save(&self.path(PIPELINE_CKPT))?;
        let log = self.write("stage2_loss.csv", &log)?;
        eprintln!("train-encoder: {} dimensions trained", reports.len());
        Ok(vec![PIPELINE_CKPT.into(), log])
    }

    fn transform(&self) -> Result<Vec<String>, CliError> {
        let dataset = self.dataset()?;
        let ckpt = self.pipeline_checkpoint()?;
        let (_, x_prime) = pipeline::transform(&ckpt, &dataset.features())?;
        let out = dataset.with_features(x_prime.data().to_vec(), x_prime.cols())?;
        let names = ["transformed_train.csv", "transformed_test.csv"];
        for (split, name) in [Split::Train, Split::Test].into_iter().zip(names) {
            data::write_csv(&out, split, &self.path(name))?;
        }
        Ok(names.iter().map(|n| n.to_string()).collect())
    }

    fn evaluate(&self) -> Result<Vec<String>, CliError> {
        let dataset = self.dataset()?;
        let ckpt = self.pipeline_checkpoint()?;
        let reports = eval::evaluate_pipeline(&ckpt, &dataset, &self.cfg.eval.eval_config(), self.seed("probes"))?;
        for r in &reports {
            eprintln!(
                "evaluate: {:<9} sensitive {:.4} target {:.4} gap {:.4}{}",
                r.variant.name(),
                r.sensitive.best_test_accuracy,
                r.target.best_test_accuracy,
                r.gap,
                r.mi_sum().map(|m| format!(" mi_sum {m:.4}")).unwrap_or_default()
            );
        }
        Ok(vec![
            self.write("metrics.csv", &eval::metrics_csv(&reports))?,
            self.write("summary.csv", &eval::summary_csv(&reports))?,
        ])
    }

    fn estimate_mi(&self, latent: bool) -> Result<Vec<String>, CliError> {
        let dataset = self.dataset()?;
        let (columns, first) = if latent {
            let ckpt = self.pipeline_checkpoint()?;
            (pipeline::transform(&ckpt, &dataset.features())?.0, 1)
        } else {
            (dataset.features(), 0)
        };
        let spec = self.cfg.eval.eval_config().smoothing()?;
        let offset = miloss::null_offset(&spec, dataset.len())?;
        let mut csv = String::from("column,mi,mi_centered\n");
        for k in first..columns.cols() {
            let z: Vec<f64> = (0..columns.rows()).map(|i| columns.row(i)[k]).collect();
            let batch = LatentBatch::new(z, dataset.s().to_vec())?;
            let raw = miloss::mi_estimate(&batch, &spec)?.value;
            println!("column {k}: mi {raw:.6} centered {:.6}", raw - offset);
            let _ = writeln!(csv, "{k},{raw:?},{:?}", raw - offset);
        }
        Ok(vec![self.write("mi.csv", &csv)?])
    }

    fn export_latents(&self) -> Result<Vec<String>, CliError> {
        let dataset = self.dataset()?;
        let ckpt = self.pipeline_checkpoint()?;
        pipeline::export_latents(&ckpt, &dataset, &self.path("latents.csv"))?;
        Ok(vec!["latents.csv".into()])
    }

    fn noisy_labels(&self) -> Result<Vec<String>, CliError> {
        let dataset = self.dataset()?;
        let ckpt = self.pipeline_checkpoint()?;
        let points = eval::noisy_label_experiment(
            &dataset,
            &self.cfg.eval.noise_ratios,
            &ckpt,
            &self.cfg.eval.eval_config(),
            self.seed("label_noise"),
        )?;
        for p in &points {
            eprintln!(
                "noisy-labels: ratio {:.2} transformed {:.4} raw {:.4}",
                p.ratio, p.transformed.final_test_accuracy, p.raw.final_test_accuracy
            );
        }
        Ok(vec![self.write("noisy_labels.csv", &eval::noisy_label_csv(&points))?])
    }

    fn ablate(&self) -> Result<Vec<String>, CliError> {
        let dataset = self.dataset()?;
        let ckpt = self.pipeline_checkpoint()?;
        let cfg = self.cfg.eval.eval_config();
        let reports = [Variant::Transformed, Variant::VaeOnly]
            .into_iter()
            .map(|v| eval::evaluate_variant(&ckpt, &dataset, v, &cfg, self.seed("probes")))
            .collect::<Result<Vec<_>, _>>()?;
        for r in &reports {
            eprintln!(
                "ablate-vae-only: {:<9} sensitive {:.4} target {:.4} gap {:.4}",
                r.variant.name(),
                r.sensitive.best_test_accuracy,
                r.target.best_test_accuracy,
                r.gap
            );
        }
        Ok(vec![self.write("ablation.csv", &eval::summary_csv(&reports))?])
    }
}
