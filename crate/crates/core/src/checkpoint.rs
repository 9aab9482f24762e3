//! Checkpoint files: the magic `FLOWINV1`, one line of JSON header, then the
//! parameters as little-endian `f64` in declaration order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpConfig, NeuralField, TrainConfig};

pub const MAGIC: &[u8; 8] = b"FLOWINV1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub arch: MlpConfig,
    pub n_params: usize,
    /// Training setup, when the weights came from [`crate::nn::train`].
    pub train: Option<TrainConfig>,
    pub seed: u64,
}

pub fn write_checkpoint(
    w: &mut impl Write,
    field: &NeuralField,
    train: Option<&TrainConfig>,
    seed: u64,
) -> Result<()> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        arch: field.config().clone(),
        n_params: field.parameters().len(),
        train: train.cloned(),
        seed,
    };
    w.write_all(MAGIC)?;
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(8 * header.n_params);
    for p in field.parameters() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<(CheckpointHeader, NeuralField)> {
    let mut r = BufReader::new(r);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic; not a checkpoint".into()));
    }
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&line).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    if header.n_params != header.arch.n_params() {
        return Err(Error::Format(format!(
            "header declares {} parameters but the architecture has {}",
            header.n_params,
            header.arch.n_params()
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != 8 * header.n_params {
        return Err(Error::Format(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            8 * header.n_params
        )));
    }
    let params = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let mlp = Mlp::from_params(header.arch.clone(), params)?;
    Ok((header, NeuralField::new(mlp)))
}

pub fn save(
    path: &Path,
    field: &NeuralField,
    train: Option<&TrainConfig>,
    seed: u64,
) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, field, train, seed)?;
    // write-then-rename so a concurrent reader never sees a partial file
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, NeuralField)> {
    read_checkpoint(&mut fs::File::open(path)?)
}
