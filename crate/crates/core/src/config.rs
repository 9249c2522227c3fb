//! Run-config text format: flat `key = value` lines grouped under
//! `[section]` headers, `#` comments.
//!
//! ```text
//! seed = 0
//!
//! [model]
//! input_size = 32
//! patch_size = 4
//!
//! [pretrain]
//! modalities = sentinel1, sentinel2, gaofen, naip, enmap
//! mask_ratio = 0.75
//!
//! [probe]
//! cls_lr = 0.01
//!
//! [modality.thermal]
//! channels = 1
//! native_size = 64
//! ```
//!
//! Every key is optional; missing keys take the documented defaults. Unknown
//! keys, duplicate keys and invariant violations are errors carrying the
//! offending line number.

use std::collections::BTreeMap;
use std::fmt::{self, Write};
use std::str::FromStr;

use thiserror::Error;

use crate::modality::{builtin_modalities, ModalityRegistry, ModalitySpec};
use crate::probe::{ProbeConfig, TaskKind};
use crate::synth::MAX_CLASSES;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ConfigError {
    /// 1-based line, or 0 when the problem is not tied to one line.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "config: {}", self.message)
        } else {
            write!(f, "config line {}: {}", self.line, self.message)
        }
    }
}

/// Linear-probe settings shared by both tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSettings {
    pub cls_lr: f64,
    pub seg_lr: f64,
    pub epochs: usize,
    pub cls_batch_size: usize,
    pub seg_batch_size: usize,
    pub cls_classes: usize,
    pub seg_classes: usize,
    pub momentum: f64,
    pub standardize: bool,
    /// Share of a single labeled dataset used for training when no separate
    /// evaluation set is given.
    pub train_fraction: f64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        let c = ProbeConfig::classification(4);
        let s = ProbeConfig::segmentation(2);
        Self {
            cls_lr: c.lr,
            seg_lr: s.lr,
            epochs: c.epochs,
            cls_batch_size: c.batch_size,
            seg_batch_size: s.batch_size,
            cls_classes: c.classes,
            seg_classes: s.classes,
            momentum: c.momentum,
            standardize: c.standardize,
            train_fraction: 0.75,
        }
    }
}

impl ProbeSettings {
    pub fn probe_config(&self, task: TaskKind, seed: u64) -> ProbeConfig {
        let base = match task {
            TaskKind::Classification => ProbeConfig { lr: self.cls_lr, batch_size: self.cls_batch_size, ..ProbeConfig::classification(self.cls_classes) },
            TaskKind::Segmentation => ProbeConfig { lr: self.seg_lr, batch_size: self.seg_batch_size, ..ProbeConfig::segmentation(self.seg_classes) },
        };
        ProbeConfig { epochs: self.epochs, momentum: self.momentum, standardize: self.standardize, seed, ..base }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub probe: ProbeSettings,
    /// Directory of `<modality>.ofad` pretraining files; generate on the fly
    /// when absent.
    pub data_dir: Option<String>,
    /// Resolved `[modality.<id>]` sections, in file order.
    pub modalities: Vec<ModalitySpec>,
}

type Keyed = (String, String);

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        if text.trim().is_empty() {
            return Err(ConfigError { line: 0, message: "config text is empty".into() });
        }
        let mut cfg = RunConfig::default();
        let mut lines: BTreeMap<String, usize> = BTreeMap::new();
        let mut section = String::new();
        let builtins = builtin_modalities();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| ConfigError { line, message };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| err(format!("unterminated section header '{content}'")))?.trim();
                match name {
                    "model" | "pretrain" | "probe" => {}
                    _ => match name.strip_prefix("modality.") {
                        Some(id) if !id.is_empty() => {
                            if cfg.modalities.iter().any(|m| m.id == id) {
                                return Err(err(format!("section [{name}] appears twice")));
                            }
                            let spec = builtins.iter().find(|b| b.id == id).cloned().unwrap_or_else(|| ModalitySpec::new(id, 0, 0));
                            cfg.modalities.push(spec);
                        }
                        _ => return Err(err(format!("unknown section [{name}]"))),
                    },
                }
                section = name.to_string();
                lines.insert(section.clone(), line);
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| err(format!("expected 'key = value', got '{content}'")))?;
            let (key, value) = (key.trim(), value.trim());
            let qualified = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
            if lines.insert(qualified.clone(), line).is_some() {
                return Err(err(format!("key '{qualified}' is set twice")));
            }
            cfg.set(&section, key, value).map_err(err)?;
        }
        for m in &cfg.modalities {
            if m.channels == 0 && !lines.contains_key(&format!("modality.{}.channels", m.id)) {
                let line = lines.get(&format!("modality.{}", m.id)).copied().unwrap_or(0);
                return Err(ConfigError { line, message: format!("modality '{}' needs a channel count", m.id) });
            }
        }
        cfg.validate_keyed().map_err(|(key, message)| {
            let line = lines.get(&key).copied().or_else(|| key.rsplit_once('.').and_then(|(s, _)| lines.get(s).copied())).unwrap_or(0);
            ConfigError { line, message }
        })?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
        let t = &mut self.train;
        let m = &mut t.model;
        let p = &mut self.probe;
        match (section, key) {
            ("", "seed") => t.seed = parse(key, value)?,
            ("model", "input_size") => m.input_size = parse(key, value)?,
            ("model", "patch_size") => m.patch_size = parse(key, value)?,
            ("model", "embed_dim") => m.embed_dim = parse(key, value)?,
            ("model", "depth") => m.depth = parse(key, value)?,
            ("model", "heads") => m.heads = parse(key, value)?,
            ("model", "decoder_dim") => m.decoder_dim = parse(key, value)?,
            ("model", "decoder_depth") => m.decoder_depth = parse(key, value)?,
            ("model", "decoder_heads") => m.decoder_heads = parse(key, value)?,
            ("model", "mlp_ratio") => m.mlp_ratio = parse(key, value)?,
            ("model", "norm_pix_loss") => m.norm_pix_loss = parse(key, value)?,
            ("pretrain", "modalities") => {
                t.modalities = value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
            }
            ("pretrain", "mask_ratio") => t.mask_ratio = parse(key, value)?,
            ("pretrain", "samples_per_modality") => t.samples_per_modality = parse(key, value)?,
            ("pretrain", "batch_size") => t.batch_size = parse(key, value)?,
            ("pretrain", "epochs") => t.epochs = parse(key, value)?,
            ("pretrain", "base_lr") => t.base_lr = parse(key, value)?,
            ("pretrain", "weight_decay") => t.weight_decay = parse(key, value)?,
            ("pretrain", "warmup_fraction") => t.warmup_fraction = parse(key, value)?,
            ("pretrain", "checkpoint_every") => t.checkpoint_every = parse(key, value)?,
            ("pretrain", "data_dir") => self.data_dir = Some(value.to_string()),
            ("probe", "cls_lr") => p.cls_lr = parse(key, value)?,
            ("probe", "seg_lr") => p.seg_lr = parse(key, value)?,
            ("probe", "epochs") => p.epochs = parse(key, value)?,
            ("probe", "cls_batch_size") => p.cls_batch_size = parse(key, value)?,
            ("probe", "seg_batch_size") => p.seg_batch_size = parse(key, value)?,
            ("probe", "cls_classes") => p.cls_classes = parse(key, value)?,
            ("probe", "seg_classes") => p.seg_classes = parse(key, value)?,
            ("probe", "momentum") => p.momentum = parse(key, value)?,
            ("probe", "standardize") => p.standardize = parse(key, value)?,
            ("probe", "train_fraction") => p.train_fraction = parse(key, value)?,
            (s, k) if s.starts_with("modality.") => {
                let spec = self.modalities.last_mut().expect("section pushed on header");
                match k {
                    "channels" => spec.channels = parse(k, value)?,
                    "native_size" => spec.native_size = parse(k, value)?,
                    "gsd_meters" => spec.gsd_meters = parse(k, value)?,
                    "corpus_count" => spec.corpus_count = parse(k, value)?,
                    _ => return Err(format!("unknown key '{k}' in [{s}]")),
                }
            }
            ("", k) => return Err(format!("unknown top-level key '{k}'")),
            (s, k) => return Err(format!("unknown key '{k}' in [{s}]")),
        }
        Ok(())
    }

    /// Builtin modalities with this config's overrides and additions applied.
    pub fn registry(&self) -> ModalityRegistry {
        let mut specs = builtin_modalities();
        let mut extra = Vec::new();
        for m in &self.modalities {
            match specs.iter_mut().find(|b| b.id == m.id) {
                Some(b) => *b = m.clone(),
                None => extra.push(m.clone()),
            }
        }
        let mut reg = ModalityRegistry::empty();
        for s in specs.into_iter().chain(extra) {
            reg.register(s).expect("validated specs with unique ids");
        }
        reg
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_keyed().map_err(|(_, message)| ConfigError { line: 0, message })
    }

    /// First violated invariant, tagged with the qualified key it concerns.
    fn validate_keyed(&self) -> Result<(), Keyed> {
        fn check(ok: bool, key: &str, msg: impl Into<String>) -> Result<(), Keyed> {
            if ok {
                Ok(())
            } else {
                Err((key.to_string(), msg.into()))
            }
        }
        let t = &self.train;
        let m = &t.model;
        check(m.patch_size >= 1, "model.patch_size", "patch_size must be at least 1")?;
        check(m.input_size >= m.patch_size && m.input_size % m.patch_size == 0, "model.patch_size", format!("input_size {} is not divisible by patch_size {}", m.input_size, m.patch_size))?;
        for (name, dim, heads) in [("embed_dim", m.embed_dim, m.heads), ("decoder_dim", m.decoder_dim, m.decoder_heads)] {
            let hk = if name == "embed_dim" { "model.heads" } else { "model.decoder_heads" };
            check(heads >= 1 && dim % heads == 0, hk, format!("{name} {dim} is not divisible by {heads} heads"))?;
            check(dim >= 4 && dim % 4 == 0, &format!("model.{name}"), format!("{name} {dim} must be a positive multiple of 4"))?;
        }
        check(m.depth >= 1, "model.depth", "depth must be at least 1")?;
        check(m.mlp_ratio >= 1, "model.mlp_ratio", "mlp_ratio must be at least 1")?;
        check(t.mask_ratio > 0.0 && t.mask_ratio < 1.0, "pretrain.mask_ratio", format!("mask_ratio must lie strictly between 0 and 1, got {}", t.mask_ratio))?;
        check(t.epochs >= 1, "pretrain.epochs", "epochs must be at least 1")?;
        check(t.batch_size >= 1, "pretrain.batch_size", "batch_size must be at least 1")?;
        check(t.samples_per_modality >= t.batch_size, "pretrain.samples_per_modality", "samples_per_modality must be at least batch_size")?;
        check(t.base_lr > 0.0 && t.base_lr.is_finite(), "pretrain.base_lr", "base_lr must be positive")?;
        check(t.weight_decay >= 0.0 && t.weight_decay.is_finite(), "pretrain.weight_decay", "weight_decay must be non-negative")?;
        check((0.0..1.0).contains(&t.warmup_fraction), "pretrain.warmup_fraction", "warmup_fraction must lie in [0, 1)")?;
        check(!t.modalities.is_empty(), "pretrain.modalities", "modality list is empty")?;
        for spec in &self.modalities {
            let key = format!("modality.{}", spec.id);
            check(spec.validate().is_ok(), &format!("{key}.channels"), format!("invalid modality '{}': {}", spec.id, spec.validate().err().map(|e| e.to_string()).unwrap_or_default()))?;
            if let Some(b) = builtin_modalities().iter().find(|b| b.id == spec.id) {
                check(b.channels == spec.channels, &format!("{key}.channels"), format!("channel count of builtin modality '{}' is fixed at {}", b.id, b.channels))?;
            }
            check(spec.native_size % m.patch_size == 0, &format!("{key}.native_size"), format!("native_size {} of '{}' is not divisible by patch_size {}", spec.native_size, spec.id, m.patch_size))?;
        }
        let reg = self.registry();
        for (i, id) in t.modalities.iter().enumerate() {
            check(reg.get(id).is_some(), "pretrain.modalities", format!("unknown modality '{id}'"))?;
            check(!t.modalities[..i].contains(id), "pretrain.modalities", format!("modality '{id}' listed twice"))?;
        }
        let p = &self.probe;
        check(p.cls_lr > 0.0 && p.cls_lr.is_finite(), "probe.cls_lr", "cls_lr must be positive")?;
        check(p.seg_lr > 0.0 && p.seg_lr.is_finite(), "probe.seg_lr", "seg_lr must be positive")?;
        check(p.epochs >= 1, "probe.epochs", "epochs must be at least 1")?;
        check((2..=MAX_CLASSES).contains(&p.cls_classes), "probe.cls_classes", format!("cls_classes must lie in 2..={MAX_CLASSES}"))?;
        check((2..=MAX_CLASSES).contains(&p.seg_classes), "probe.seg_classes", format!("seg_classes must lie in 2..={MAX_CLASSES}"))?;
        check((0.0..1.0).contains(&p.momentum), "probe.momentum", "momentum must lie in [0, 1)")?;
        check(p.train_fraction > 0.0 && p.train_fraction < 1.0, "probe.train_fraction", "train_fraction must lie strictly between 0 and 1")?;
        t.validate().map_err(|e| ("".to_string(), e.to_string()))
    }

    /// Canonical text with every key spelled out; parses back to an equal
    /// config.
    pub fn serialize(&self) -> String {
        let t = &self.train;
        let m = &t.model;
        let p = &self.probe;
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "\n[model]");
        for (k, v) in [
            ("input_size", m.input_size),
            ("patch_size", m.patch_size),
            ("embed_dim", m.embed_dim),
            ("depth", m.depth),
            ("heads", m.heads),
            ("decoder_dim", m.decoder_dim),
            ("decoder_depth", m.decoder_depth),
            ("decoder_heads", m.decoder_heads),
            ("mlp_ratio", m.mlp_ratio),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "norm_pix_loss = {}", m.norm_pix_loss);
        let _ = writeln!(s, "\n[pretrain]");
        let _ = writeln!(s, "modalities = {}", t.modalities.join(", "));
        let _ = writeln!(s, "mask_ratio = {:?}", t.mask_ratio);
        let _ = writeln!(s, "samples_per_modality = {}", t.samples_per_modality);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "base_lr = {:?}", t.base_lr);
        let _ = writeln!(s, "weight_decay = {:?}", t.weight_decay);
        let _ = writeln!(s, "warmup_fraction = {:?}", t.warmup_fraction);
        let _ = writeln!(s, "checkpoint_every = {}", t.checkpoint_every);
        if let Some(d) = &self.data_dir {
            let _ = writeln!(s, "data_dir = {d}");
        }
        let _ = writeln!(s, "\n[probe]");
        let _ = writeln!(s, "cls_lr = {:?}", p.cls_lr);
        let _ = writeln!(s, "seg_lr = {:?}", p.seg_lr);
        let _ = writeln!(s, "epochs = {}", p.epochs);
        let _ = writeln!(s, "cls_batch_size = {}", p.cls_batch_size);
        let _ = writeln!(s, "seg_batch_size = {}", p.seg_batch_size);
        let _ = writeln!(s, "cls_classes = {}", p.cls_classes);
        let _ = writeln!(s, "seg_classes = {}", p.seg_classes);
        let _ = writeln!(s, "momentum = {:?}", p.momentum);
        let _ = writeln!(s, "standardize = {}", p.standardize);
        let _ = writeln!(s, "train_fraction = {:?}", p.train_fraction);
        for spec in &self.modalities {
            let _ = writeln!(s, "\n[modality.{}]", spec.id);
            let _ = writeln!(s, "channels = {}", spec.channels);
            let _ = writeln!(s, "native_size = {}", spec.native_size);
            let _ = writeln!(s, "gsd_meters = {:?}", spec.gsd_meters);
            let _ = writeln!(s, "corpus_count = {}", spec.corpus_count);
        }
        s
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse '{value}' as the value of '{key}' ({})", std::any::type_name::<T>()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::parse("seed = 7\n").unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.model.input_size, 32);
        assert_eq!(cfg.train.model.embed_dim, 64);
        assert_eq!(cfg.train.mask_ratio, 0.75);
        assert_eq!(cfg.train.samples_per_modality, 512);
        assert_eq!(cfg.train.epochs, 30);
        assert_eq!(cfg.probe.cls_lr, 1e-2);
        assert_eq!(cfg.probe.seg_lr, 1e-4);
        assert_eq!(cfg.train.modalities.len(), 5);
    }

    #[test]
    fn mask_ratio_out_of_range() {
        let err = RunConfig::parse("seed = 1\n[pretrain]\nmask_ratio = 1.5\n").unwrap_err();
        assert_eq!(err.line, 3);
        assert!(err.message.contains("mask_ratio"), "{err}");
    }

    #[test]
    fn indivisible_patch_size_reports_line() {
        let err = RunConfig::parse("[model]\ninput_size = 30\npatch_size = 4\n").unwrap_err();
        assert_eq!(err.line, 3);
        assert!(err.to_string().contains("not divisible"));
    }

    #[test]
    fn unknown_and_duplicate_keys() {
        assert_eq!(RunConfig::parse("[model]\nwidth = 3\n").unwrap_err().line, 2);
        assert_eq!(RunConfig::parse("colour = red\n").unwrap_err().line, 1);
        assert_eq!(RunConfig::parse("[model]\ndepth = 2\ndepth = 3\n").unwrap_err().line, 3);
        assert_eq!(RunConfig::parse("[bogus]\n").unwrap_err().line, 1);
        assert_eq!(RunConfig::parse("seed = x\n").unwrap_err().line, 1);
        assert!(RunConfig::parse("  \n").is_err());
    }

    #[test]
    fn custom_modality_section() {
        let text = "[modality.thermal]\nchannels = 1\nnative_size = 64\n[pretrain]\nmodalities = thermal, naip\n";
        let cfg = RunConfig::parse(text).unwrap();
        let reg = cfg.registry();
        assert_eq!(reg.get("thermal").unwrap().channels, 1);
        assert_eq!(reg.len(), 6);
        assert!(RunConfig::parse("[modality.x]\nnative_size = 64\n").is_err());
        let err = RunConfig::parse("[modality.naip]\nchannels = 4\n").unwrap_err();
        assert_eq!(err.line, 2);
        let err = RunConfig::parse("[pretrain]\nmodalities = naip, radar\n").unwrap_err();
        assert!(err.message.contains("radar"));
    }

    #[test]
    fn round_trip() {
        let text = "seed = 3 # comment\n[model]\nnorm_pix_loss = true\n[pretrain]\nbase_lr = 3e-4\nmodalities = naip, enmap\ndata_dir = /tmp/d\n[probe]\nseg_batch_size = 8\n[modality.thermal]\nchannels = 1\nnative_size = 64\ngsd_meters = 100\n";
        let cfg = RunConfig::parse(text).unwrap();
        let again = RunConfig::parse(&cfg.serialize()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.serialize(), cfg.serialize());
    }

    #[test]
    fn probe_config_from_settings() {
        let s = ProbeSettings::default();
        let c = s.probe_config(TaskKind::Segmentation, 4);
        assert_eq!((c.lr, c.classes, c.seed), (1e-4, 2, 4));
    }
}
