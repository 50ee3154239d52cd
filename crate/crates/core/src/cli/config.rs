use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CliError;
use crate::data::{GaussianPairSpec, ShapesSpec};
use crate::eval::{EvalConfig, ProbeConfig};
use crate::pipeline::Stage2Config;
use crate::vae::VaeConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Shapes,
    GaussianPair,
    /// User-supplied `train_csv` / `test_csv` files.
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub image_side: usize,
    pub n_samples: usize,
    pub glyph_classes: usize,
    pub noise_std: f64,
    pub jitter: usize,
    pub delta: f64,
    pub sigma: f64,
    pub n_per_class: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_csv: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_csv: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let shapes = ShapesSpec::default();
        let pair = GaussianPairSpec::default();
        Self {
            kind: DatasetKind::Shapes,
            image_side: shapes.image_side,
            n_samples: shapes.n_samples,
            glyph_classes: shapes.glyph_classes,
            noise_std: shapes.noise_std,
            jitter: shapes.jitter,
            delta: pair.delta,
            sigma: pair.sigma,
            n_per_class: pair.n_per_class,
            train_csv: None,
            test_csv: None,
            n_classes: None,
        }
    }
}

impl DatasetSection {
    pub fn shapes(&self, seed: u64) -> ShapesSpec {
        ShapesSpec {
            image_side: self.image_side,
            n_samples: self.n_samples,
            glyph_classes: self.glyph_classes,
            noise_std: self.noise_std,
            jitter: self.jitter,
            seed,
        }
    }

    pub fn gaussian_pair(&self, seed: u64) -> GaussianPairSpec {
        GaussianPairSpec { delta: self.delta, sigma: self.sigma, n_per_class: self.n_per_class, seed }
    }

    /// Class count of the generated or loaded data, when known up front.
    pub fn class_count(&self) -> Option<usize> {
        match self.kind {
            DatasetKind::Shapes => Some(self.glyph_classes),
            DatasetKind::GaussianPair => Some(2),
            DatasetKind::Csv => self.n_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub probe_hidden: Vec<usize>,
    pub probe_epochs: usize,
    pub probe_learning_rate: f64,
    pub probe_batch_size: usize,
    pub m_values: Vec<usize>,
    pub smoothing_sigma: f64,
    pub noise_ratios: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            probe_hidden: e.probe.hidden,
            probe_epochs: e.probe.epochs,
            probe_learning_rate: e.probe.learning_rate,
            probe_batch_size: e.probe.batch_size,
            m_values: e.m_values,
            smoothing_sigma: e.smoothing_sigma,
            noise_ratios: vec![0.0, 0.2, 0.4, 0.6],
        }
    }
}

impl EvalSection {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            probe: ProbeConfig {
                hidden: self.probe_hidden.clone(),
                epochs: self.probe_epochs,
                learning_rate: self.probe_learning_rate,
                batch_size: self.probe_batch_size,
            },
            m_values: self.m_values.clone(),
            smoothing_sigma: self.smoothing_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub out_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("run") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub vae: VaeConfig,
    pub stage2: Stage2Config,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSection::default(),
            vae: VaeConfig::default(),
            stage2: Stage2Config::default(),
            eval: EvalSection::default(),
            paths: PathsSection::default(),
        }
    }
}

/// Which trained stages a fingerprint covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FingerprintScope {
    Vae,
    Pipeline,
}

impl Config {
    /// Parses config text, applies `section.key=value` overrides, then
    /// deserializes. Validation is separate.
    pub fn from_text(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Config::deserialize(table).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_text(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let field = |section: &str, e: &dyn std::fmt::Display| CliError::Config(format!("[{section}] {e}"));
        match self.dataset.kind {
            DatasetKind::Shapes => self.dataset.shapes(0).validate().map_err(|e| field("dataset", &e))?,
            DatasetKind::GaussianPair => {
                let p = self.dataset.gaussian_pair(0);
                if p.n_per_class < 100 {
                    return Err(field("dataset", &"n_per_class must be at least 100"));
                }
                if !(p.sigma > 0.0) {
                    return Err(field("dataset", &"sigma must be positive"));
                }
            }
            DatasetKind::Csv => {
                if self.dataset.train_csv.is_none() || self.dataset.test_csv.is_none() {
                    return Err(field("dataset", &"kind = \"csv\" needs train_csv and test_csv"));
                }
            }
        }
        self.vae.validate().map_err(|e| field("vae", &e))?;
        self.stage2.validate().map_err(|e| field("stage2", &e))?;
        self.eval.eval_config().validate().map_err(|e| field("eval", &e))?;
        if let Some(r) = self.eval.noise_ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(field("eval", &format!("noise ratio {r} outside [0, 1]")));
        }
        Ok(())
    }

    /// The effective config as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 over the sections that determine a trained artifact.
    pub fn fingerprint(&self, scope: FingerprintScope) -> [u8; 32] {
        #[derive(Serialize)]
        struct Key<'a> {
            seed: u64,
            dataset: &'a DatasetSection,
            vae: &'a VaeConfig,
            #[serde(skip_serializing_if = "Option::is_none")]
            stage2: Option<&'a Stage2Config>,
        }
        let key = Key {
            seed: self.seed,
            dataset: &self.dataset,
            vae: &self.vae,
            stage2: (scope == FingerprintScope::Pipeline).then_some(&self.stage2),
        };
        let canonical = serde_json::to_string(&key).expect("config serializes");
        Sha256::digest(canonical.as_bytes()).into()
    }
}

/// Seed of the named sub-stream of `root`.
pub fn stream_seed(root: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not KEY=VALUE")))?;
    let key = key.trim();
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.split('.').collect();
    match parts.as_slice() {
        [name] if !name.is_empty() => {
            table.insert(name.to_string(), value);
        }
        [section, name] if !section.is_empty() && !name.is_empty() => {
            let entry = table.entry(section.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let toml::Value::Table(inner) = entry else {
                return Err(CliError::Config(format!("{section} is not a section")));
            };
            inner.insert(name.to_string(), value);
        }
        _ => return Err(CliError::Config(format!("override key {key:?} must be KEY or SECTION.KEY"))),
    }
    Ok(())
}

/// A TOML value, or the raw text as a string when it does not parse.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
