//! Parameter checkpoint file.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   4 bytes  "MMFC"
//! version u32      CHECKPOINT_VERSION
//! config  u64      Config::hash of the run that wrote it
//! pops    u32      population count
//! count   u32      number of tensors
//! then per tensor:
//!   name_len u16, name (utf-8), ndim u8, dims u32 x ndim, values f32 x prod(dims)
//! ```
//!
//! Tensor names are `shared/<name>` and `pop<i>/<name>`.

use std::io::{Read, Write};
use std::path::Path;

use super::params::PolicyParams;
use super::tensor::Tensor;
use super::NeuralError;
use crate::config::Config;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"MMFC";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config_hash: u64,
    pub n_populations: u32,
}

pub fn write_checkpoint(params: &PolicyParams<f32>, out: &mut impl Write) -> Result<(), NeuralError> {
    let tensors = params.named_tensors();
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&params.spec.config_hash.to_le_bytes())?;
    out.write_all(&(params.n_populations() as u32).to_le_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[t.shape.len() as u8])?;
        for d in &t.shape {
            out.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in &t.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N], NeuralError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|_| NeuralError::Checkpoint("truncated".into()))?;
    Ok(b)
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<(CheckpointHeader, Vec<(String, Tensor<f32>)>), NeuralError> {
    if &take::<4>(r)? != MAGIC {
        return Err(NeuralError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(r)?);
    if version != CHECKPOINT_VERSION {
        return Err(NeuralError::Checkpoint(format!("unsupported version {version}")));
    }
    let config_hash = u64::from_le_bytes(take(r)?);
    let n_populations = u32::from_le_bytes(take(r)?);
    let count = u32::from_le_bytes(take(r)?);
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(take(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| NeuralError::Checkpoint("truncated".into()))?;
        let name = String::from_utf8(name).map_err(|_| NeuralError::Checkpoint("tensor name is not utf-8".into()))?;
        let ndim = take::<1>(r)?[0] as usize;
        let shape = (0..ndim).map(|_| Ok(u32::from_le_bytes(take(r)?) as usize)).collect::<Result<Vec<_>, NeuralError>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| Ok(f32::from_le_bytes(take(r)?))).collect::<Result<Vec<_>, NeuralError>>()?;
        tensors.push((name, Tensor { shape, data }));
    }
    Ok((CheckpointHeader { version, config_hash, n_populations }, tensors))
}

pub fn save_checkpoint(params: &PolicyParams<f32>, path: impl AsRef<Path>) -> Result<(), NeuralError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(params, &mut f)?;
    f.flush()?;
    Ok(())
}

/// Loads a checkpoint into parameters laid out for `cfg`. Every tensor the
/// layout expects must be present with the same shape.
pub fn load_checkpoint(path: impl AsRef<Path>, cfg: &Config) -> Result<PolicyParams<f32>, NeuralError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let (header, tensors) = read_checkpoint(&mut f)?;
    if header.n_populations as usize != cfg.n_populations {
        return Err(NeuralError::Checkpoint(format!(
            "checkpoint has {} populations, config has {}",
            header.n_populations, cfg.n_populations
        )));
    }
    if header.config_hash != cfg.hash() {
        log::info!("checkpoint written under a different config (hash {:016x})", header.config_hash);
    }
    let mut params = PolicyParams::<f32>::init(cfg);
    let expected = params.named_tensors();
    if expected.len() != tensors.len() {
        return Err(NeuralError::Checkpoint(format!("{} tensors, expected {}", tensors.len(), expected.len())));
    }
    let spec = params.spec.clone();
    for ((name, want), (got_name, got)) in expected.iter().zip(&tensors) {
        if name != got_name || want.shape != got.shape {
            return Err(NeuralError::Checkpoint(format!("tensor {got_name} {:?} where {name} {:?} expected", got.shape, want.shape)));
        }
        let (block, layout_name) = name.split_once('/').unwrap();
        if block == "shared" {
            let info = spec.shared_layout.get(layout_name).unwrap();
            params.shared[info.range()].copy_from_slice(&got.data);
        } else {
            let pop: usize = block[3..].parse().map_err(|_| NeuralError::Checkpoint(format!("bad block {block}")))?;
            let info = spec.pop_layout.get(layout_name).unwrap();
            params.pops[pop][info.range()].copy_from_slice(&got.data);
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_config;

    #[test]
    fn roundtrip_file() {
        let mut cfg = default_config();
        cfg.n_populations = 2;
        let mut p = PolicyParams::<f32>::init(&cfg);
        p.pops[1][3] = 0.125;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path, &cfg).unwrap();
        assert_eq!(p.hash_hex(), q.hash_hex());
    }

    #[test]
    fn header_fields_and_truncation() {
        let mut cfg = default_config();
        cfg.n_populations = 1;
        let p = PolicyParams::<f32>::init(&cfg);
        let mut bytes = Vec::new();
        write_checkpoint(&p, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"MMFC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), cfg.hash());
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1);
        let (h, t) = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(h.n_populations, 1);
        assert_eq!(t[0].0, "shared/tile.terrain");
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(read_checkpoint(&mut &cut[..]), Err(NeuralError::Checkpoint(m)) if m == "truncated"));
    }

    #[test]
    fn population_mismatch_rejected() {
        let cfg = default_config();
        let p = PolicyParams::<f32>::init(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save_checkpoint(&p, &path).unwrap();
        let mut other = cfg.clone();
        other.n_populations = 4;
        assert!(load_checkpoint(&path, &other).is_err());
    }
}
