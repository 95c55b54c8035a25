//! Versioned little-endian parameter container.
//!
//! Layout: magic `SDCK`, `u32` version, `u32` block count, then per block
//! `u32` name length, UTF-8 name, `u32` rank, `rank` × `u32` dims and the
//! `f32` values. The run configuration travels as block `__config__`, a
//! rank-1 tensor holding the bytes of its text dump.

use std::io::{Read, Write};
use std::path::Path;

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::ParamStore;
use crate::real::Real;

pub const MAGIC: &[u8; 4] = b"SDCK";
pub const VERSION: u32 = 1;
const CONFIG_BLOCK: &str = "__config__";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Named tensors as `(name, dims, values)`.
    pub tensors: Vec<(String, Vec<u32>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_params<T: Real>(config: &RunConfig, params: &ParamStore<T>) -> Self {
        let tensors = params
            .iter()
            .map(|(n, m)| {
                (
                    n.to_string(),
                    vec![m.rows() as u32, m.cols() as u32],
                    m.as_slice().iter().map(|v| v.as_f64() as f32).collect(),
                )
            })
            .collect();
        Self { config: config.clone(), tensors }
    }

    /// Copies every stored tensor into `params`; names and shapes must match.
    pub fn restore<T: Real>(&self, params: &mut ParamStore<T>) -> Result<()> {
        if self.tensors.len() != params.len() {
            return Err(Error::shape(format!(
                "checkpoint holds {} tensors, model has {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for (name, dims, vals) in &self.tensors {
            if dims.len() != 2 {
                return Err(Error::shape(format!("tensor `{name}` has rank {}", dims.len())));
            }
            let m =
                Matrix::from_vec(dims[0] as usize, dims[1] as usize, vals.iter().map(|&v| T::of(v as f64)).collect())?;
            params.assign(name, m)?;
        }
        Ok(())
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        let cfg = self.config.dump().into_bytes();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&((self.tensors.len() + 1) as u32).to_le_bytes())?;
        let cfg_vals: Vec<f32> = cfg.iter().map(|&b| b as f32).collect();
        write_block(&mut w, CONFIG_BLOCK, &[cfg_vals.len() as u32], &cfg_vals)?;
        for (n, d, v) in &self.tensors {
            write_block(&mut w, n, d, v)?;
        }
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Parse("missing SDCK magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Parse("bad magic: not an SDCK checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
        }
        let n = read_u32(&mut r)?;
        let mut config = None;
        let mut tensors = Vec::new();
        for _ in 0..n {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|_| Error::Parse("truncated block name".into()))?;
            let name = String::from_utf8(name).map_err(|_| Error::Parse("block name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let dims = (0..rank).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>>>()?;
            let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d as usize));
            let count = count.ok_or_else(|| Error::Parse("tensor size overflow".into()))?;
            let mut buf = vec![0u8; count * 4];
            r.read_exact(&mut buf).map_err(|_| Error::Parse(format!("truncated tensor `{name}`")))?;
            let vals: Vec<f32> = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if name == CONFIG_BLOCK {
                let bytes: Vec<u8> = vals.iter().map(|&v| v as u8).collect();
                let text = String::from_utf8(bytes).map_err(|_| Error::Parse("config block is not UTF-8".into()))?;
                config = Some(RunConfig::parse(&text)?);
            } else {
                tensors.push((name, dims, vals));
            }
        }
        let config = config.ok_or_else(|| Error::Parse("checkpoint lacks a config block".into()))?;
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn write_block(w: &mut impl Write, name: &str, dims: &[u32], vals: &[f32]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Parse("truncated checkpoint".into()))?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_tensors_and_config() {
        let mut store = ParamStore::<f32>::new();
        store.add("a.w", Matrix::from_vec(2, 2, vec![1.5, -0.25, 3.0e-8, 7.0]).unwrap()).unwrap();
        store.add_buffer("a.mean", Matrix::from_vec(1, 2, vec![0.1, 0.2]).unwrap()).unwrap();
        let cfg = RunConfig { seed: 42, class_sizes: vec![[1.0, 2.0, 3.0]; 3], ..RunConfig::default() };
        let ck = Checkpoint::from_params(&cfg, &store);
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SDCK");
        let back = Checkpoint::read(&buf[..]).unwrap();
        assert_eq!(back, ck);
        let mut other = store.clone();
        other.get_mut(store.id("a.w").unwrap()).scale(0.0);
        back.restore(&mut other).unwrap();
        assert_eq!(other.by_name("a.w").unwrap(), store.by_name("a.w").unwrap());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::read(&b"NOPE"[..]).is_err());
        let mut buf = b"SDCK".to_vec();
        buf.extend_from_slice(&9u32.to_le_bytes());
        assert!(Checkpoint::read(&buf[..]).is_err());
    }
}
