//! Versioned binary checkpoint container.
//!
//! Layout, little-endian: magic `HSON`, `u32` format version, the resolved
//! configuration as TOML, the schedule step `t`, the optimizer step count,
//! every named tensor (kind, shape, `f32` data), the Adam moments keyed by
//! parameter name, and the learning-curve history as JSON.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use hsonet_core::optim::Adam;
use hsonet_core::params::ParamKind;
use hsonet_core::{HsoNet, ParamStore, Tensor};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::trainer::CurveRow;

pub const MAGIC: &[u8; 4] = b"HSON";
pub const FORMAT_VERSION: u32 = 1;

/// Snapshot of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Resolved configuration the run was started with.
    pub config: Config,
    /// Loss-schedule step, equal to the number of optimizer steps taken.
    pub t: u64,
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub history: Vec<CurveRow>,
}

impl Checkpoint {
    /// Freshly initialized weights and optimizer for `config`.
    pub fn init(config: Config) -> Result<(HsoNet, Self)> {
        let (net, params) = HsoNet::init::<f32>(&config.model_config(), config.seed)?;
        let adam = Adam::new(config.adam(), &params);
        Ok((
            net,
            Self {
                config,
                t: 0,
                params,
                adam,
                history: Vec::new(),
            },
        ))
    }

    /// Rebuilds the network described by the stored configuration.
    pub fn network(&self) -> Result<HsoNet> {
        Ok(HsoNet::init::<f32>(&self.config.model_config(), self.config.seed)?.0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        self.write_to(&mut w).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(FORMAT_VERSION)?;
        write_str(w, &self.config.to_toml_string())?;
        w.write_u64::<LE>(self.t)?;
        w.write_u64::<LE>(self.adam.steps())?;
        let entries = self.params.entries();
        w.write_u32::<LE>(entries.len() as u32)?;
        for e in entries {
            write_str(w, &e.name)?;
            w.write_u8(match e.kind {
                ParamKind::Trainable => 0,
                ParamKind::Buffer => 1,
            })?;
            let shape = e.value.shape();
            w.write_u32::<LE>(shape.len() as u32)?;
            for &d in shape {
                w.write_u64::<LE>(d as u64)?;
            }
            write_f32s(w, e.value.data())?;
        }
        let moments: Vec<_> = self.adam.moments().collect();
        w.write_u32::<LE>(moments.len() as u32)?;
        for (i, m, v) in moments {
            write_str(w, &entries[i].name)?;
            write_f32s(w, m.data())?;
            write_f32s(w, v.data())?;
        }
        let history = serde_json::to_string(&self.history).expect("history serializes");
        write_str(w, &history)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file), path)
    }

    /// Parses a checkpoint; `path` only labels errors.
    pub fn read_from<R: Read>(r: &mut R, path: &Path) -> Result<Self> {
        let bad = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let trunc = |e: std::io::Error| bad(format!("truncated or unreadable ({e})"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(trunc)?;
        if &magic != MAGIC {
            return Err(bad(format!("bad magic bytes {magic:?}")));
        }
        let version = r.read_u32::<LE>().map_err(trunc)?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let config = Config::from_toml_str(&read_str(r).map_err(trunc)?)?;
        config.validate()?;
        let t = r.read_u64::<LE>().map_err(trunc)?;
        let adam_steps = r.read_u64::<LE>().map_err(trunc)?;
        let (_, mut params) = HsoNet::init::<f32>(&config.model_config(), config.seed)?;
        let count = r.read_u32::<LE>().map_err(trunc)? as usize;
        if count != params.len() {
            return Err(bad(format!("{count} tensors stored, model has {}", params.len())));
        }
        for _ in 0..count {
            let name = read_str(r).map_err(trunc)?;
            let _kind = r.read_u8().map_err(trunc)?;
            let rank = r.read_u32::<LE>().map_err(trunc)? as usize;
            if rank > 8 {
                return Err(bad(format!("tensor {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u64::<LE>().map_err(trunc)? as usize);
            }
            let expected = params
                .find(&name)
                .map(|id| params.get(id).shape().to_vec())
                .ok_or_else(|| bad(format!("unknown tensor {name}")))?;
            if expected != shape {
                return Err(bad(format!("tensor {name} has shape {shape:?}, model expects {expected:?}")));
            }
            let data = read_f32s(r, shape.iter().product()).map_err(trunc)?;
            params.set(&name, Tensor::from_vec(&shape, data)?)?;
        }
        let mut adam = Adam::new(config.adam(), &params);
        let count = r.read_u32::<LE>().map_err(trunc)? as usize;
        let mut moments = Vec::with_capacity(count);
        for _ in 0..count {
            let name = read_str(r).map_err(trunc)?;
            let id = params.find(&name).ok_or_else(|| bad(format!("moments for unknown tensor {name}")))?;
            let shape = params.get(id).shape().to_vec();
            let n = shape.iter().product();
            let m = Tensor::from_vec(&shape, read_f32s(r, n).map_err(trunc)?)?;
            let v = Tensor::from_vec(&shape, read_f32s(r, n).map_err(trunc)?)?;
            moments.push((id.index(), m, v));
        }
        adam.restore(adam_steps, moments)?;
        let history = serde_json::from_str(&read_str(r).map_err(trunc)?)
            .map_err(|e| bad(format!("history: {e}")))?;
        Ok(Self {
            config,
            t,
            params,
            adam,
            history,
        })
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u64::<LE>(s.len() as u64)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> std::io::Result<String> {
    let len = r.read_u64::<LE>()?;
    let mut buf = Vec::new();
    r.take(len).read_to_end(&mut buf)?;
    if buf.len() as u64 != len {
        return Err(std::io::ErrorKind::UnexpectedEof.into());
    }
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

fn write_f32s<W: Write>(w: &mut W, data: &[f32]) -> std::io::Result<()> {
    for &x in data {
        w.write_f32::<LE>(x)?;
    }
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f32>> {
    let mut out = vec![0.0; n];
    r.read_f32_into::<LE>(&mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Config {
        let mut c = Config::default();
        c.backbone.widths = [4, 4, 8, 8];
        c.backbone.blocks = [1, 1, 1, 1];
        c.backbone.pyramid_dim = 8;
        c.model.decoder_dim = 4;
        c.model.head_dim = 4;
        c.resolve(4);
        c
    }

    #[test]
    fn round_trip_in_memory() {
        let (_, ck) = Checkpoint::init(tiny()).unwrap();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let (_, ck) = Checkpoint::init(tiny()).unwrap();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf[4..8].copy_from_slice(&7u32.to_le_bytes());
        let err = Checkpoint::read_from(&mut buf.as_slice(), Path::new("mem")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains('1'), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn bad_magic_rejected() {
        let err = Checkpoint::read_from(&mut &b"NOPE\x01\0\0\0"[..], Path::new("x.ckpt")).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }
}
