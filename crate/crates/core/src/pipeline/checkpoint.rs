use std::path::Path;

use super::{LatentEncoderBank, PipelineError};
use crate::diffnet::Mlp;
use crate::vae::VaeModel;

const MAGIC: &[u8; 4] = b"NNCK";
const VERSION: u32 = 1;

pub const STAGE_VAE: &str = "vae";
pub const STAGE_ENCODER: &str = "stage2";

/// Trained networks plus the fingerprint of the config that produced them.
///
/// File layout (little endian): magic `NNCK`, version `u32`, 32-byte config
/// fingerprint, stage-tag count `u32` then each tag as `u32` length + UTF-8,
/// fragment count `u32` then each entry as `u32` name length + name +
/// `u64` offset + `u64` length, then the fragment bytes. Offsets count from
/// the first fragment byte.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineCheckpoint {
    pub fingerprint: [u8; 32],
    pub vae: VaeModel,
    pub bank: Option<LatentEncoderBank>,
}

impl PipelineCheckpoint {
    pub fn stages(&self) -> Vec<&'static str> {
        let mut tags = vec![STAGE_VAE];
        if self.bank.is_some() {
            tags.push(STAGE_ENCODER);
        }
        tags
    }

    pub fn bank(&self) -> Result<&LatentEncoderBank, PipelineError> {
        self.bank
            .as_ref()
            .ok_or_else(|| PipelineError::Dependency("checkpoint has no trained latent encoders".into()))
    }

    fn fragments(&self) -> Vec<(String, Vec<u8>)> {
        let mut out = vec![
            ("vae.encoder".to_string(), self.vae.encoder().to_fragment()),
            ("vae.decoder".to_string(), self.vae.decoder().to_fragment()),
        ];
        if let Some(bank) = &self.bank {
            let mut meta = bank.proximity_weight().to_le_bytes().to_vec();
            meta.extend_from_slice(&(bank.encoders().len() as u32).to_le_bytes());
            out.push(("bank.meta".to_string(), meta));
            for (k, e) in bank.encoders().iter().enumerate() {
                out.push((format!("bank.enc.{}", k + 1), e.to_fragment()));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        let stages = self.stages();
        out.extend_from_slice(&(stages.len() as u32).to_le_bytes());
        for tag in stages {
            out.extend_from_slice(&(tag.len() as u32).to_le_bytes());
            out.extend_from_slice(tag.as_bytes());
        }
        let fragments = self.fragments();
        out.extend_from_slice(&(fragments.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, bytes) in &fragments {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            offset += bytes.len() as u64;
        }
        for (_, bytes) in fragments {
            out.extend_from_slice(&bytes);
        }
        out
    }

    /// Parses a checkpoint. With `expected` set, a different fingerprint is
    /// an error.
    pub fn from_bytes(bytes: &[u8], expected: Option<&[u8; 32]>) -> Result<Self, PipelineError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let fingerprint: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        if let Some(want) = expected {
            if want != &fingerprint {
                return Err(PipelineError::Fingerprint { expected: hex(want), found: hex(&fingerprint) });
            }
        }
        let n_tags = r.u32()?;
        let mut tags = Vec::new();
        for _ in 0..n_tags {
            let len = r.u32()? as usize;
            tags.push(String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad("stage tag is not UTF-8"))?);
        }
        let n_frag = r.u32()?;
        let mut toc = Vec::new();
        for _ in 0..n_frag {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad("fragment name is not UTF-8"))?;
            toc.push((name, r.u64()? as usize, r.u64()? as usize));
        }
        let data = &bytes[r.pos..];
        let mut expected_offset = 0;
        let mut fragments = Vec::with_capacity(toc.len());
        for (name, offset, len) in toc {
            if offset != expected_offset || offset + len > data.len() {
                return Err(bad(&format!("fragment {name} out of place")));
            }
            expected_offset += len;
            fragments.push((name, &data[offset..offset + len]));
        }
        if expected_offset != data.len() {
            return Err(bad("trailing bytes after the last fragment"));
        }
        let find = |name: &str| {
            fragments
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, b)| *b)
                .ok_or_else(|| bad(&format!("missing fragment {name}")))
        };
        let vae = VaeModel::from_parts(
            Mlp::from_fragment(find("vae.encoder")?)?,
            Mlp::from_fragment(find("vae.decoder")?)?,
        )?;
        let bank = if tags.iter().any(|t| t == STAGE_ENCODER) {
            let meta = find("bank.meta")?;
            if meta.len() != 12 {
                return Err(bad("bank.meta must be 12 bytes"));
            }
            let weight = f64::from_le_bytes(meta[..8].try_into().expect("8 bytes"));
            let count = u32::from_le_bytes(meta[8..].try_into().expect("4 bytes")) as usize;
            let encoders = (1..=count)
                .map(|k| Ok(Mlp::from_fragment(find(&format!("bank.enc.{k}"))?)?))
                .collect::<Result<Vec<_>, PipelineError>>()?;
            let bank = LatentEncoderBank::from_encoders(encoders, weight)?;
            if bank.latent_dim() != vae.latent_dim() {
                return Err(bad("bank width does not match the VAE latent width"));
            }
            Some(bank)
        } else {
            None
        };
        let ckpt = Self { fingerprint, vae, bank };
        if ckpt.stages() != tags {
            return Err(bad(&format!("stage tags {tags:?} do not match the fragments")));
        }
        if ckpt.fragments().len() != fragments.len() {
            return Err(bad("unexpected extra fragments"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path, expected: Option<&[u8; 32]>) -> Result<Self, PipelineError> {
        let bytes = std::fs::read(path).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes, expected)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn bad(msg: &str) -> PipelineError {
    PipelineError::Checkpoint(msg.to_string())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PipelineError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, PipelineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, PipelineError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(with_bank: bool) -> PipelineCheckpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vae = VaeModel::new(6, 3, &[5], &mut rng);
        let bank = with_bank.then(|| LatentEncoderBank::identity(3, 4, 0.5, &mut rng));
        PipelineCheckpoint { fingerprint: [7; 32], vae, bank }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for with_bank in [false, true] {
            let ckpt = sample(with_bank);
            let bytes = ckpt.to_bytes();
            let back = PipelineCheckpoint::from_bytes(&bytes, Some(&[7; 32])).unwrap();
            assert_eq!(back, ckpt);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn fingerprint_mismatch_fails() {
        let bytes = sample(true).to_bytes();
        assert!(matches!(
            PipelineCheckpoint::from_bytes(&bytes, Some(&[8; 32])),
            Err(PipelineError::Fingerprint { .. })
        ));
        assert!(PipelineCheckpoint::from_bytes(&bytes, None).is_ok());
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = sample(true).to_bytes();
        assert!(PipelineCheckpoint::from_bytes(&bytes[..bytes.len() - 1], None).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(PipelineCheckpoint::from_bytes(&extra, None).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(PipelineCheckpoint::from_bytes(&magic, None).is_err());
    }

    #[test]
    fn missing_bank_is_a_dependency_error() {
        assert!(matches!(sample(false).bank(), Err(PipelineError::Dependency(_))));
    }
}
