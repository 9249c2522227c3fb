//! Sensor modalities: channel counts and native sizes that shape the
//! embedders, decoders and synthetic data.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySpec {
    pub id: String,
    pub channels: usize,
    /// Pixels per side of a native tile.
    pub native_size: usize,
    /// Ground-sample distance; report metadata only.
    pub gsd_meters: f64,
    /// Size of the real corpus; report metadata only.
    pub corpus_count: u64,
}

impl ModalitySpec {
    pub fn new(id: impl Into<String>, channels: usize, native_size: usize) -> Self {
        Self { id: id.into(), channels, native_size, gsd_meters: 1.0, corpus_count: 0 }
    }

    pub fn validate(&self) -> Result<(), ModalityError> {
        if self.id.is_empty() || !self.id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-') {
            return Err(ModalityError::InvalidId(self.id.clone()));
        }
        if self.channels < 1 {
            return Err(ModalityError::NoChannels(self.id.clone()));
        }
        if self.native_size < 16 {
            return Err(ModalityError::TooSmall { id: self.id.clone(), size: self.native_size });
        }
        if !(self.gsd_meters > 0.0) {
            return Err(ModalityError::InvalidGsd(self.id.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModalityError {
    #[error("modality '{0}' is already registered")]
    Duplicate(String),
    #[error("unknown modality '{0}'")]
    Unknown(String),
    #[error("modality '{0}' must have at least one channel")]
    NoChannels(String),
    #[error("modality '{id}': native size {size} is below the 16-pixel minimum")]
    TooSmall { id: String, size: usize },
    #[error("modality '{id}': native size {size} is not divisible by patch size {patch}")]
    IndivisibleSize { id: String, size: usize, patch: usize },
    #[error("modality '{0}': ground-sample distance must be positive")]
    InvalidGsd(String),
    #[error("invalid modality id '{0}' (use ascii letters, digits, '_' or '-')")]
    InvalidId(String),
}

/// The five pretraining sensors, in round-robin order.
pub fn builtin_modalities() -> Vec<ModalitySpec> {
    let spec = |id: &str, channels, native_size, gsd_meters, corpus_count| ModalitySpec {
        id: id.to_string(),
        channels,
        native_size,
        gsd_meters,
        corpus_count,
    };
    vec![
        // SAR, vv + vh; nominal resolution is anisotropic (5 x 20 m), the finer axis is stored
        spec("sentinel1", 2, 512, 5.0, 4_642_353),
        spec("sentinel2", 9, 512, 10.0, 977_774),
        spec("gaofen", 4, 512, 4.0, 117_450),
        spec("naip", 3, 512, 1.0, 2_332_351),
        spec("enmap", 224, 128, 30.0, 11_483),
    ]
}

/// Ordered collection of modality specs with unique ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModalityRegistry {
    specs: Vec<ModalitySpec>,
}

impl ModalityRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        Self { specs: builtin_modalities() }
    }

    pub fn register(&mut self, spec: ModalitySpec) -> Result<(), ModalityError> {
        spec.validate()?;
        if self.get(&spec.id).is_some() {
            return Err(ModalityError::Duplicate(spec.id));
        }
        self.specs.push(spec);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ModalitySpec> {
        self.specs.iter().find(|s| s.id == id)
    }

    pub fn lookup(&self, id: &str) -> Result<&ModalitySpec, ModalityError> {
        self.get(id).ok_or_else(|| ModalityError::Unknown(id.to_string()))
    }

    /// Specs for `ids`, in the given order.
    pub fn select(&self, ids: &[String]) -> Result<Vec<ModalitySpec>, ModalityError> {
        ids.iter().map(|id| self.lookup(id).cloned()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ModalitySpec> {
        self.specs.iter()
    }

    pub fn ids(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Every native size must tile into whole patches.
    pub fn check_patch_size(&self, patch: usize) -> Result<(), ModalityError> {
        for s in &self.specs {
            if patch == 0 || s.native_size % patch != 0 {
                return Err(ModalityError::IndivisibleSize { id: s.id.clone(), size: s.native_size, patch });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_match_sensor_facts() {
        let reg = ModalityRegistry::with_builtins();
        let s1 = reg.lookup("sentinel1").unwrap();
        assert_eq!(s1.channels, 2);
        assert_eq!(s1.corpus_count, 4_642_353);
        assert_eq!(reg.lookup("sentinel2").unwrap().channels, 9);
        assert_eq!(reg.lookup("gaofen").unwrap().channels, 4);
        assert_eq!(reg.lookup("naip").unwrap().channels, 3);
        let enmap = reg.lookup("enmap").unwrap();
        assert_eq!((enmap.channels, enmap.native_size), (224, 128));
        for id in ["sentinel1", "sentinel2", "gaofen", "naip"] {
            assert_eq!(reg.lookup(id).unwrap().native_size, 512);
        }
        assert_eq!(reg.ids(), ["sentinel1", "sentinel2", "gaofen", "naip", "enmap"]);
        assert_eq!(builtin_modalities(), builtin_modalities());
    }

    #[test]
    fn register_round_trip() {
        let mut reg = ModalityRegistry::with_builtins();
        let thermal = ModalitySpec::new("thermal", 1, 64);
        reg.register(thermal.clone()).unwrap();
        assert_eq!(reg.lookup("thermal").unwrap(), &thermal);
    }

    #[test]
    fn register_rejects_duplicates_and_zero_channels() {
        let mut reg = ModalityRegistry::with_builtins();
        assert_eq!(
            reg.register(ModalitySpec::new("naip", 3, 512)),
            Err(ModalityError::Duplicate("naip".into()))
        );
        assert!(matches!(reg.register(ModalitySpec::new("dark", 0, 64)), Err(ModalityError::NoChannels(_))));
        assert!(matches!(reg.register(ModalitySpec::new("tiny", 1, 8)), Err(ModalityError::TooSmall { .. })));
        assert_eq!(reg.len(), 5);
    }

    #[test]
    fn patch_divisibility() {
        let reg = ModalityRegistry::with_builtins();
        assert!(reg.check_patch_size(16).is_ok());
        assert!(matches!(reg.check_patch_size(48), Err(ModalityError::IndivisibleSize { .. })));
    }
}
