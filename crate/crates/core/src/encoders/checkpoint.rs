//! Binary checkpoint: `IATTRCKP`, a little-endian `u32` version, a `u64`
//! header length, a JSON header, then every weight as little-endian `f64`
//! in header order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{hex, DualEncoder, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::tensor::{Feed, Tensor};

const MAGIC: &[u8; 8] = b"IATTRCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: DualEncoder,
    pub train_config: Option<TrainConfig>,
    pub epoch_losses: Vec<f64>,
}

impl Checkpoint {
    pub fn untrained(model: DualEncoder) -> Self {
        Self {
            model,
            train_config: None,
            epoch_losses: Vec::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    config_digest: String,
    #[serde(default)]
    train_config: Option<TrainConfig>,
    #[serde(default)]
    epoch_losses: Vec<f64>,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

pub fn write_checkpoint(ckpt: &Checkpoint, mut out: impl Write) -> Result<()> {
    let params = ckpt.model.params();
    let mut payload = Vec::with_capacity(ckpt.model.param_count() * 8);
    for t in params.values() {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        config: ckpt.model.config().clone(),
        config_digest: ckpt.model.config().digest(),
        train_config: ckpt.train_config.clone(),
        epoch_losses: ckpt.epoch_losses.clone(),
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    out.write_all(&payload)?;
    Ok(())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("checkpoint truncated in {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

/// Parses a checkpoint. With `expected_digest`, the stored configuration
/// digest must match it.
pub fn read_checkpoint(mut bytes: &[u8], expected_digest: Option<&str>) -> Result<Checkpoint> {
    if take(&mut bytes, 8, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8, "header length")?.try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| Error::Format("header length overflow".into()))?;
    let header: Header = serde_json::from_slice(take(&mut bytes, len, "header")?)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;

    let actual = header.config.digest();
    if actual != header.config_digest {
        return Err(Error::DigestMismatch {
            expected: header.config_digest,
            found: actual,
        });
    }
    if let Some(expected) = expected_digest {
        if expected != actual {
            return Err(Error::DigestMismatch {
                expected: expected.to_string(),
                found: actual,
            });
        }
    }
    let payload_len: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * 8)
        .sum();
    let payload = take(&mut bytes, payload_len, "payload")?;
    if !bytes.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after payload", bytes.len())));
    }
    let checksum = hex(&Sha256::digest(payload));
    if checksum != header.payload_sha256 {
        return Err(Error::DigestMismatch {
            expected: header.payload_sha256,
            found: checksum,
        });
    }

    let mut params = Feed::new();
    let mut rest = payload;
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let data = take(&mut rest, n * 8, "payload")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(entry.name, Tensor::new(entry.shape, data)?);
    }
    Ok(Checkpoint {
        model: DualEncoder::from_params(header.config, params)?,
        train_config: header.train_config,
        epoch_losses: header.epoch_losses,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(ckpt, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected_digest: Option<&str>) -> Result<Checkpoint> {
    read_checkpoint(&std::fs::read(path)?, expected_digest)
}
