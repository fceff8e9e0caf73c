//! Weight checkpoints and training logs.
//!
//! Checkpoint layout, all integers little endian:
//!
//! ```text
//! "LFWB" | version: u32 | init_seed: u64 | cfg_len: u32 | cfg JSON | params
//! ```
//!
//! Parameters are raw f64 little-endian in the declared flat order (per
//! conv stage: weights then bias; head weights then bias). The config echo
//! makes a checkpoint self-describing; loading validates it and rejects
//! truncated files, trailing bytes and non-finite parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::net::{NetworkConfig, TowerWeights};
use super::train::EpochLog;
use super::DescriptorError;

const MAGIC: &[u8; 4] = b"LFWB";
const VERSION: u32 = 1;
const MAX_CONFIG_BYTES: u32 = 1 << 20;

pub fn save_weights(path: &Path, w: &TowerWeights) -> Result<(), DescriptorError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&w.init_seed.to_le_bytes())?;
    let cfg = serde_json::to_vec(&w.config).expect("network config serializes");
    out.write_all(&(cfg.len() as u32).to_le_bytes())?;
    out.write_all(&cfg)?;
    for t in w.tensors() {
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> DescriptorError {
    DescriptorError::CorruptWeights(msg.into())
}

fn read_exact_or_corrupt(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), DescriptorError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            corrupt(format!("unexpected end of file while reading {what}"))
        } else {
            DescriptorError::Io(e)
        }
    })
}

pub fn load_weights(path: &Path) -> Result<TowerWeights, DescriptorError> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact_or_corrupt(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(corrupt(format!("bad magic {magic:02x?}")));
    }

    let mut u32buf = [0u8; 4];
    read_exact_or_corrupt(&mut r, &mut u32buf, "version")?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(DescriptorError::VersionMismatch { found: version, expected: VERSION });
    }

    let mut u64buf = [0u8; 8];
    read_exact_or_corrupt(&mut r, &mut u64buf, "init seed")?;
    let init_seed = u64::from_le_bytes(u64buf);

    read_exact_or_corrupt(&mut r, &mut u32buf, "config length")?;
    let cfg_len = u32::from_le_bytes(u32buf);
    if cfg_len == 0 || cfg_len > MAX_CONFIG_BYTES {
        return Err(corrupt(format!("implausible config length {cfg_len}")));
    }
    let mut cfg_buf = vec![0u8; cfg_len as usize];
    read_exact_or_corrupt(&mut r, &mut cfg_buf, "config")?;
    let config: NetworkConfig =
        serde_json::from_slice(&cfg_buf).map_err(|e| corrupt(format!("config JSON: {e}")))?;
    config.validate()?;

    let mut weights = TowerWeights::zeros(config)?;
    weights.init_seed = init_seed;
    for t in weights.tensors_mut() {
        let mut buf = vec![0u8; t.len() * 8];
        read_exact_or_corrupt(&mut r, &mut buf, "parameters")?;
        for (v, chunk) in t.iter_mut().zip(buf.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }

    let mut trailing = [0u8; 1];
    match r.read(&mut trailing)? {
        0 => {}
        _ => return Err(corrupt("trailing bytes after parameters")),
    }

    if weights.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(corrupt("non-finite parameter"));
    }
    Ok(weights)
}

/// Load a checkpoint and insist it matches the expected architecture.
/// A descriptor width disagreement is reported with both widths.
pub fn load_weights_expecting(
    path: &Path,
    expected: &NetworkConfig,
) -> Result<TowerWeights, DescriptorError> {
    let w = load_weights(path)?;
    if w.config.descriptor_dim != expected.descriptor_dim {
        return Err(DescriptorError::ConfigMismatch {
            expected: expected.descriptor_dim,
            found: w.config.descriptor_dim,
        });
    }
    if &w.config != expected {
        return Err(corrupt(format!(
            "checkpoint architecture {:?} does not match expected {:?}",
            w.config, expected
        )));
    }
    Ok(w)
}

/// Write the per-epoch training log as CSV.
pub fn write_training_log(path: &Path, history: &[EpochLog]) -> Result<(), DescriptorError> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "epoch,phase,train_loss,val_loss")?;
    for e in history {
        writeln!(out, "{},{},{},{}", e.epoch, e.phase.as_str(), e.train_loss, e.val_loss)?;
    }
    out.flush()?;
    Ok(())
}
