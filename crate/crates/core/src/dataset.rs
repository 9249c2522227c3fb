//! `OFAD` dataset files.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "OFAD" | u16 version | u16 id_len, id bytes (ascii) | u32 count
//! u16 h | u16 w | u16 c | u8 label_kind (0 none, 1 class, 2 mask)
//! per sample: h*w*c f32, then u16 class (kind 1) or h*w u8 mask (kind 2)
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::synth::{SegMask, SynthSample};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"OFAD";
pub const DATASET_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    None = 0,
    Class = 1,
    Mask = 2,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not an OFAD file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown label kind {0}")]
    UnknownLabelKind(u8),
    #[error("sample {index}: {reason}")]
    Inconsistent { index: usize, reason: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub modality: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kind: LabelKind,
    pub samples: Vec<SynthSample>,
}

impl Dataset {
    /// Wraps generated samples, checking they agree on shape and label kind.
    pub fn from_samples(modality: impl Into<String>, samples: Vec<SynthSample>) -> Result<Self, DatasetError> {
        let first = samples.first().ok_or_else(|| DatasetError::Invalid("dataset is empty".into()))?;
        let (height, width, channels) = match first.image.shape() {
            &[h, w, c] => (h, w, c),
            other => return Err(DatasetError::Invalid(format!("image shape {other:?} is not [h, w, c]"))),
        };
        let kind = match (&first.label, &first.mask) {
            (None, None) => LabelKind::None,
            (Some(_), None) => LabelKind::Class,
            (None, Some(_)) => LabelKind::Mask,
            (Some(_), Some(_)) => return Err(DatasetError::Invalid("sample carries both a class and a mask".into())),
        };
        let ds = Self { modality: modality.into(), height, width, channels, kind, samples };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if !self.modality.is_ascii() || self.modality.len() > u16::MAX as usize {
            return Err(DatasetError::Invalid(format!("modality id '{}' is not short ascii", self.modality)));
        }
        for (dim, v) in [("height", self.height), ("width", self.width), ("channels", self.channels)] {
            if v == 0 || v > u16::MAX as usize {
                return Err(DatasetError::Invalid(format!("{dim} {v} does not fit the format")));
            }
        }
        let bad = |index: usize, reason: String| DatasetError::Inconsistent { index, reason };
        for (i, s) in self.samples.iter().enumerate() {
            if s.image.shape() != [self.height, self.width, self.channels] {
                return Err(bad(i, format!("image shape {:?}", s.image.shape())));
            }
            match self.kind {
                LabelKind::None if s.label.is_some() || s.mask.is_some() => return Err(bad(i, "unexpected label".into())),
                LabelKind::Class if s.label.is_none_or(|l| l > u16::MAX as usize) || s.mask.is_some() => {
                    return Err(bad(i, "missing or oversized class label".into()))
                }
                LabelKind::Mask => match &s.mask {
                    Some(m) if m.height == self.height && m.width == self.width && m.data.len() == m.height * m.width => {}
                    _ => return Err(bad(i, "missing or misshapen mask".into())),
                },
                _ => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn images(&self) -> Vec<Tensor<f32>> {
        self.samples.iter().map(|s| s.image.clone()).collect()
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn masks(&self) -> Option<Vec<SegMask>> {
        self.samples.iter().map(|s| s.mask.clone()).collect()
    }

    /// Number of classes implied by the labels (max + 1).
    pub fn inferred_classes(&self) -> usize {
        let max = match self.kind {
            LabelKind::None => return 0,
            LabelKind::Class => self.samples.iter().filter_map(|s| s.label).max().unwrap_or(0),
            LabelKind::Mask => self
                .samples
                .iter()
                .filter_map(|s| s.mask.as_ref().and_then(|m| m.data.iter().max().copied()))
                .max()
                .unwrap_or(0) as usize,
        };
        max + 1
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), DatasetError> {
        self.validate()?;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.modality.len() as u16).to_le_bytes())?;
        w.write_all(self.modality.as_bytes())?;
        let count = u32::try_from(self.samples.len()).map_err(|_| DatasetError::Invalid("too many samples".into()))?;
        w.write_all(&count.to_le_bytes())?;
        for v in [self.height, self.width, self.channels] {
            w.write_all(&(v as u16).to_le_bytes())?;
        }
        w.write_all(&[self.kind as u8])?;
        let mut buf = Vec::with_capacity(self.height * self.width * self.channels * 4);
        for s in &self.samples {
            buf.clear();
            s.image.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            w.write_all(&buf)?;
            match self.kind {
                LabelKind::None => {}
                LabelKind::Class => w.write_all(&(s.label.unwrap_or(0) as u16).to_le_bytes())?,
                LabelKind::Mask => w.write_all(&s.mask.as_ref().map(|m| m.data.clone()).unwrap_or_default())?,
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, DatasetError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(DatasetError::BadMagic);
        }
        let version = read_u16(r)?;
        if version != DATASET_VERSION {
            return Err(DatasetError::UnsupportedVersion(version));
        }
        let id_len = read_u16(r)? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let modality = String::from_utf8(id)
            .ok()
            .filter(|s| s.is_ascii())
            .ok_or_else(|| DatasetError::Invalid("modality id is not ascii".into()))?;
        let count = read_u32(r)? as usize;
        let (height, width, channels) = (read_u16(r)? as usize, read_u16(r)? as usize, read_u16(r)? as usize);
        let mut kind = [0u8];
        r.read_exact(&mut kind)?;
        let kind = match kind[0] {
            0 => LabelKind::None,
            1 => LabelKind::Class,
            2 => LabelKind::Mask,
            other => return Err(DatasetError::UnknownLabelKind(other)),
        };
        if height == 0 || width == 0 || channels == 0 {
            return Err(DatasetError::Invalid(format!("zero image extent {height}x{width}x{channels}")));
        }
        let pixels = height * width * channels;
        let mut raw = vec![0u8; pixels * 4];
        let mut samples = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            r.read_exact(&mut raw)?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            let image = Tensor::new(vec![height, width, channels], data).expect("extents checked");
            let (label, mask) = match kind {
                LabelKind::None => (None, None),
                LabelKind::Class => (Some(read_u16(r)? as usize), None),
                LabelKind::Mask => {
                    let mut data = vec![0u8; height * width];
                    r.read_exact(&mut data)?;
                    (None, Some(SegMask { height, width, data }))
                }
            };
            samples.push(SynthSample { image, label, mask });
        }
        Ok(Self { modality, height, width, channels, kind, samples })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn read_u16<R: Read>(r: &mut R) -> io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::ModalityRegistry;
    use crate::synth::SynthGenerator;

    #[test]
    fn header_layout_is_exact() {
        let img = Tensor::new(vec![1, 1, 2], vec![1.0f32, -2.0]).unwrap();
        let ds = Dataset::from_samples("s1", vec![SynthSample { image: img, label: Some(3), mask: None }]).unwrap();
        let mut bytes = Vec::new();
        ds.write_to(&mut bytes).unwrap();
        let mut expected = b"OFAD".to_vec();
        expected.extend_from_slice(&[1, 0, 2, 0, b's', b'1', 1, 0, 0, 0, 1, 0, 1, 0, 2, 0, 1]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        expected.extend_from_slice(&[3, 0]);
        assert_eq!(bytes, expected);
        assert_eq!(Dataset::read_from(&mut bytes.as_slice()).unwrap(), ds);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(Dataset::read_from(&mut &b"OFAC\x01\x00"[..]), Err(DatasetError::BadMagic)));
        let reg = ModalityRegistry::with_builtins();
        let samples = SynthGenerator::new(16).seg_dataset(reg.lookup("naip").unwrap(), 2, 2, 1).unwrap();
        let ds = Dataset::from_samples("naip", samples).unwrap();
        let mut bytes = Vec::new();
        ds.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(Dataset::read_from(&mut bytes.as_slice()), Err(DatasetError::Io(_))));
    }

    #[test]
    fn mixed_label_kinds_rejected() {
        let img = Tensor::zeros(vec![2, 2, 1]).unwrap();
        let a = SynthSample { image: img.clone(), label: Some(0), mask: None };
        let b = SynthSample { image: img, label: None, mask: None };
        assert!(matches!(Dataset::from_samples("x", vec![a, b]), Err(DatasetError::Inconsistent { index: 1, .. })));
    }
}
