//! The two-stage transformation: VAE encoding, masking of `z₀`, per-dimension
//! latent encoders, and decoding.

mod bank;
mod checkpoint;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use bank::{train_dimension, train_stage2, DimSamples, DimensionReport, LatentEncoderBank, Stage2Config};
pub use checkpoint::{hex, PipelineCheckpoint, STAGE_ENCODER, STAGE_VAE};

use crate::data::Dataset;
use crate::diffnet::{DiffError, Tensor};
use crate::miloss::LossError;
use crate::vae::VaeError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("invalid stage-2 config: {0}")]
    Config(String),
    #[error("training data rejected: {0}")]
    Data(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing upstream artifact: {0}")]
    Dependency(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint was written for config {found}, current config is {expected}")]
    Fingerprint { expected: String, found: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Replaces latent component 0 of every row with 0.
pub fn mask_z0(z: &Tensor) -> Tensor {
    let mut out = z.clone();
    let d = z.cols();
    for row in out.data_mut().chunks_exact_mut(d) {
        row[0] = 0.0;
    }
    out
}

/// `(z_enc, x')` using posterior means.
pub fn transform(ckpt: &PipelineCheckpoint, x: &Tensor) -> Result<(Tensor, Tensor), PipelineError> {
    let bank = ckpt.bank()?;
    let (mu, _) = ckpt.vae.encode(x)?;
    let z_enc = bank.encode(&mu)?;
    let x_prime = ckpt.vae.decode(&z_enc)?;
    Ok((z_enc, x_prime))
}

/// Decoded masked posterior means, skipping the latent encoders.
pub fn transform_vae_only(ckpt: &PipelineCheckpoint, x: &Tensor) -> Result<Tensor, PipelineError> {
    let (mu, _) = ckpt.vae.encode(x)?;
    Ok(ckpt.vae.decode(&mask_z0(&mu))?)
}

/// Writes `sample_id,s,target,z_vae_0..,z_enc_0..` for every sample.
/// Values use the shortest representation that parses back exactly.
pub fn export_latents(ckpt: &PipelineCheckpoint, dataset: &Dataset, path: &Path) -> Result<(), PipelineError> {
    let io = |source| PipelineError::Io { path: path.to_path_buf(), source };
    let x = dataset.features();
    let (mu, _) = ckpt.vae.encode(&x)?;
    let z_enc = ckpt.bank()?.encode(&mu)?;
    let d = mu.cols();
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let mut header = String::from("sample_id,s,target");
    for prefix in ["z_vae", "z_enc"] {
        for k in 0..d {
            header.push_str(&format!(",{prefix}_{k}"));
        }
    }
    writeln!(w, "{header}").map_err(io)?;
    for i in 0..dataset.len() {
        let mut line = format!("{i},{},{}", dataset.s()[i], dataset.target()[i]);
        for v in mu.row(i).iter().chain(z_enc.row(i)) {
            line.push_str(&format!(",{v:?}"));
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_shapes, ShapesSpec};
    use crate::vae::VaeModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn untrained() -> (PipelineCheckpoint, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = gen_shapes(&ShapesSpec { n_samples: 40, ..Default::default() }).unwrap();
        let vae = VaeModel::new(256, 4, &[16], &mut rng);
        let bank = LatentEncoderBank::identity(4, 8, 1.0, &mut rng);
        (PipelineCheckpoint { fingerprint: [0; 32], vae, bank: Some(bank) }, data)
    }

    #[test]
    fn mask_examples() {
        let z = Tensor::matrix(2, 3, vec![1.0, 0.5, -0.5, -1.0, 2.0, 3.0]);
        let m = mask_z0(&z);
        assert_eq!(m.data(), &[0.0, 0.5, -0.5, 0.0, 2.0, 3.0]);
        assert_eq!(mask_z0(&m), m);
    }

    #[test]
    fn identity_bank_matches_vae_only() {
        let (ckpt, data) = untrained();
        let x = data.features();
        let (z_enc, x_prime) = transform(&ckpt, &x).unwrap();
        assert_eq!(x_prime, transform_vae_only(&ckpt, &x).unwrap());
        let (mu, _) = ckpt.vae.encode(&x).unwrap();
        assert_eq!(z_enc, mask_z0(&mu));
        assert_eq!(transform(&ckpt, &x).unwrap().1, x_prime);
        assert!(transform(&ckpt, &Tensor::matrix(1, 3, vec![0.0; 3])).is_err());
    }

    #[test]
    fn transform_needs_a_bank() {
        let (mut ckpt, data) = untrained();
        ckpt.bank = None;
        assert!(matches!(transform(&ckpt, &data.features()), Err(PipelineError::Dependency(_))));
        assert!(transform_vae_only(&ckpt, &data.features()).is_ok());
    }

    #[test]
    fn export_layout_and_round_trip() {
        let (ckpt, data) = untrained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("latents.csv");
        export_latents(&ckpt, &data, &path).unwrap();
        let mut reader = csv::Reader::from_path(&path).unwrap();
        let headers = reader.headers().unwrap().clone();
        assert_eq!(headers.len(), 3 + 8);
        assert_eq!(&headers[3], "z_vae_0");
        assert_eq!(&headers[7], "z_enc_0");
        let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), data.len());
        let (mu, _) = ckpt.vae.encode(&data.features()).unwrap();
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row[7].parse::<f64>().unwrap(), 0.0);
            for k in 0..4 {
                let v: f64 = row[3 + k].parse().unwrap();
                let want = mu.row(i)[k];
                assert!((v - want).abs() <= 1e-12 * want.abs());
            }
        }
    }
}
