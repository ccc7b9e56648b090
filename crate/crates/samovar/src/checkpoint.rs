//! Weight-file serialization.
//!
//! Format: magic `SMVW1`; little-endian `u32` tensor count; per tensor a
//! `u16` name length, the UTF-8 name, a `u8` rank, rank × `u32` dims, and the
//! row-major `f32` payload; finally a CRC32 of every preceding byte. Tensors
//! appear in the vault's registration order, so saving is deterministic and
//! a save→load→save round trip is byte-identical.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::autodiff::Scalar;
use crate::params::{ParamError, ParamVault};

pub const MAGIC: &[u8; 5] = b"SMVW1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint tensor `{name}` has shape {got:?}, the model expects {want:?}")]
    ShapeMismatch { name: String, want: Vec<usize>, got: Vec<usize> },
    #[error("checkpoint is missing tensor `{0}`")]
    Missing(String),
    #[error("checkpoint holds tensor `{0}` unknown to the model")]
    Unknown(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Param(#[from] ParamError),
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Serialize every tensor (cast to `f32`) in registration order.
pub fn save<S: Scalar>(path: impl AsRef<Path>, vault: &ParamVault<S>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(vault.len() as u32).to_le_bytes());
    for (name, entry) in vault.iter() {
        if name.len() > u16::MAX as usize || entry.shape.len() > u8::MAX as usize {
            return Err(CheckpointError::Corrupt(format!(
                "tensor `{name}` does not fit the header fields"
            )));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(entry.shape.len() as u8);
        for &d in &entry.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &entry.value {
            buf.extend_from_slice(&(Scalar::to_f64(*v) as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read a weight file back into a fresh `f32` vault (file order preserved).
pub fn load(path: impl AsRef<Path>) -> Result<ParamVault<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() + 8 {
        return Err(CheckpointError::Corrupt("file shorter than the fixed header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(CheckpointError::Corrupt("CRC mismatch".into()));
    }
    if &body[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::Corrupt("bad magic bytes".into()));
    }
    let mut pos = MAGIC.len();
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > body.len() {
            return Err(CheckpointError::Corrupt("record overruns the file".into()));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let mut vault = ParamVault::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = take(&mut pos, numel * 4)?;
        let value: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        vault.register(&name, &shape, value)?;
    }
    if pos != body.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes after the last tensor",
            body.len() - pos
        )));
    }
    Ok(vault)
}

/// Move loaded weights into an existing vault (the model's), checking that
/// the tensor sets and shapes agree exactly; values are cast to the target
/// precision.
pub fn apply<S: Scalar>(loaded: &ParamVault<f32>, target: &mut ParamVault<S>) -> Result<()> {
    for (name, _) in loaded.iter() {
        if target.get(name).is_err() {
            return Err(CheckpointError::Unknown(name.to_string()));
        }
    }
    let names: Vec<String> = target.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let src = match loaded.get(&name) {
            Ok(e) => e,
            Err(_) => return Err(CheckpointError::Missing(name)),
        };
        let dst = target.get_mut(&name)?;
        if src.shape != dst.shape {
            return Err(CheckpointError::ShapeMismatch {
                name,
                want: dst.shape.clone(),
                got: src.shape.clone(),
            });
        }
        dst.value = src.value.iter().map(|v| S::from_f64(*v as f64)).collect();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_vault() -> ParamVault<f32> {
        let mut v = ParamVault::new();
        v.register("alpha", &[2, 3], vec![1.0, -2.5, 3.25, 0.0, 7.5, -0.125]).unwrap();
        v.register("beta.bias", &[4], vec![0.5, 1.5, -9.0, 2.0]).unwrap();
        v
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.smvw");
        let p2 = dir.path().join("b.smvw");
        let vault = sample_vault();
        save(&p1, &vault).unwrap();
        let loaded = load(&p1).unwrap();
        save(&p2, &loaded).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(loaded.get("alpha").unwrap().value, vault.get("alpha").unwrap().value);
        // registration order preserved
        let names: Vec<_> = loaded.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, vec!["alpha", "beta.bias"]);
    }

    #[test]
    fn truncation_and_bit_flips_are_caught() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.smvw");
        save(&p, &sample_vault()).unwrap();
        let bytes = fs::read(&p).unwrap();

        let cut = dir.path().join("cut.smvw");
        fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load(&cut), Err(CheckpointError::Corrupt(_))));

        let mut flipped = bytes.clone();
        flipped[9] ^= 0x40;
        let fl = dir.path().join("flip.smvw");
        fs::write(&fl, &flipped).unwrap();
        assert!(matches!(load(&fl), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn wrong_magic_is_rejected_even_with_valid_crc() {
        let dir = tempfile::tempdir().unwrap();
        let mut buf = b"XXXXX".to_vec();
        buf.extend_from_slice(&0u32.to_le_bytes());
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        let p = dir.path().join("bad.smvw");
        fs::write(&p, &buf).unwrap();
        let err = load(&p).unwrap_err();
        assert!(matches!(err, CheckpointError::Corrupt(ref m) if m.contains("magic")), "{err}");
    }

    #[test]
    fn shape_mismatch_names_the_offending_tensor() {
        let loaded = sample_vault();
        let mut target: ParamVault<f64> = ParamVault::new();
        target.register("alpha", &[3, 2], vec![0.0; 6]).unwrap();
        target.register("beta.bias", &[4], vec![0.0; 4]).unwrap();
        let err = apply(&loaded, &mut target).unwrap_err();
        match err {
            CheckpointError::ShapeMismatch { name, want, got } => {
                assert_eq!(name, "alpha");
                assert_eq!(want, vec![3, 2]);
                assert_eq!(got, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other}"),
        }
    }

    #[test]
    fn missing_and_unknown_tensors_are_named() {
        let loaded = sample_vault();
        let mut narrow: ParamVault<f32> = ParamVault::new();
        narrow.register("alpha", &[2, 3], vec![0.0; 6]).unwrap();
        assert!(matches!(apply(&loaded, &mut narrow), Err(CheckpointError::Unknown(ref n)) if n == "beta.bias"));

        let mut wide = sample_vault();
        wide.register("gamma", &[1], vec![0.0]).unwrap();
        assert!(matches!(apply(&loaded, &mut wide), Err(CheckpointError::Missing(ref n)) if n == "gamma"));
    }

    #[test]
    fn applied_weights_cast_into_the_target_precision() {
        let loaded = sample_vault();
        let mut target: ParamVault<f64> = ParamVault::new();
        target.register("alpha", &[2, 3], vec![0.0; 6]).unwrap();
        target.register("beta.bias", &[4], vec![0.0; 4]).unwrap();
        apply(&loaded, &mut target).unwrap();
        assert_eq!(target.get("beta.bias").unwrap().value, vec![0.5, 1.5, -9.0, 2.0]);
    }
}
