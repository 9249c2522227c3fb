//! `OFAC` checkpoints: the run config verbatim plus named `f32` tensors.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "OFAC" | u16 version | u32 config_len, config text (utf-8) | u32 tensor_count
//! per tensor: u16 name_len, name | u8 rank | rank x u32 extent | f32 data
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::model::{ModelError, OfaNet};
use crate::modality::ModalityError;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OFAC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not an OFAC file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("{0}")]
    Malformed(String),
    #[error("embedded {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Modality(#[from] ModalityError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_net(net: &OfaNet<f32>, config_text: impl Into<String>) -> Self {
        Self { config_text: config_text.into(), tensors: net.named_params() }
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Parses the embedded config and rebuilds the net it describes.
    pub fn restore(&self) -> Result<(RunConfig, OfaNet<f32>), CheckpointError> {
        let cfg = RunConfig::parse(&self.config_text)?;
        let specs = cfg.registry().select(&cfg.train.modalities)?;
        let mut net = OfaNet::new(cfg.train.model.clone(), &specs, cfg.train.seed)?;
        net.load_params(self.tensors.iter().cloned())?;
        Ok((cfg, net))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), CheckpointError> {
        let too_big = |what: &str| CheckpointError::Malformed(format!("{what} does not fit the format"));
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let cfg_len = u32::try_from(self.config_text.len()).map_err(|_| too_big("config text"))?;
        w.write_all(&cfg_len.to_le_bytes())?;
        w.write_all(self.config_text.as_bytes())?;
        let count = u32::try_from(self.tensors.len()).map_err(|_| too_big("tensor count"))?;
        w.write_all(&count.to_le_bytes())?;
        let mut buf = Vec::new();
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len()).map_err(|_| too_big("tensor name"))?;
            let rank = u8::try_from(t.rank()).map_err(|_| too_big("tensor rank"))?;
            w.write_all(&name_len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[rank])?;
            for &e in t.shape() {
                w.write_all(&u32::try_from(e).map_err(|_| too_big("tensor extent"))?.to_le_bytes())?;
            }
            buf.clear();
            t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u16::from_le_bytes(read_array(r)?);
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let cfg_len = u32::from_le_bytes(read_array(r)?) as usize;
        let config_text = String::from_utf8(read_vec(r, cfg_len)?).map_err(|_| CheckpointError::Malformed("config text is not utf-8".into()))?;
        let count = u32::from_le_bytes(read_array(r)?) as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = u16::from_le_bytes(read_array(r)?) as usize;
            let name = String::from_utf8(read_vec(r, name_len)?).map_err(|_| CheckpointError::Malformed("tensor name is not utf-8".into()))?;
            let [rank] = read_array::<_, 1>(r)?;
            let shape = (0..rank).map(|_| Ok(u32::from_le_bytes(read_array(r)?) as usize)).collect::<Result<Vec<_>, io::Error>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| CheckpointError::Malformed(format!("tensor '{name}' is too large")))?;
            let raw = read_vec(r, numel.checked_mul(4).ok_or_else(|| CheckpointError::Malformed(format!("tensor '{name}' is too large")))?)?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("tensor '{name}': {e}")))?;
            tensors.push((name, t));
        }
        Ok(Self { config_text, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

/// Reads `len` bytes without trusting `len` for the up-front allocation.
fn read_vec<R: Read>(r: &mut R, len: usize) -> io::Result<Vec<u8>> {
    let mut v = Vec::with_capacity(len.min(1 << 20));
    r.take(len as u64).read_to_end(&mut v)?;
    if v.len() != len {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated checkpoint"));
    }
    Ok(v)
}
