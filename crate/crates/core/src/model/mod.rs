//! The shared-backbone multi-modal masked autoencoder.
//!
//! Each modality owns a [`PatchEmbedder`] that maps its `p*p*c` patches to
//! `d`-dimensional tokens and a [`ModalityDecoder`] that reconstructs masked
//! patches. Everything in between runs through one [`TransformerBackbone`]
//! whose parameters are identical for every modality.

mod layers;
mod patch;

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::Hasher;

use rand::seq::SliceRandom;
use thiserror::Error;

pub use layers::{block_param_count, sincos_2d, Attention, Block, LayerNorm, Linear, Params, LAYERNORM_EPS};
pub use patch::{normalize_patches, patchify, unpatchify};

use crate::modality::{ModalityError, ModalitySpec};
use crate::rng::Key;
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};
use layers::{join, normal};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Modality(#[from] ModalityError),
    #[error("no embedder for modality '{0}'")]
    UnknownModality(String),
    #[error("modality '{modality}' expects {expected} channels, got {got}")]
    ChannelMismatch { modality: String, expected: usize, got: usize },
    #[error("expected a [{size}, {size}, c] image, got {got:?}")]
    ImageSize { size: usize, got: Vec<usize> },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("mask ratio must lie strictly between 0 and 1, got {0}")]
    MaskRatio(f64),
    #[error("mask ratio {ratio} leaves no {side} tokens out of {n}")]
    DegenerateMask { ratio: f64, n: usize, side: &'static str },
    #[error("reconstruction loss needs at least one masked token")]
    EmptyMask,
    #[error("empty batch")]
    EmptyBatch,
    #[error("parameter '{0}' is missing")]
    MissingParam(String),
    #[error("unexpected parameter '{0}'")]
    UnexpectedParam(String),
    #[error("parameter '{name}' has shape {got:?}, expected {expected:?}")]
    ParamShape { name: String, expected: Vec<usize>, got: Vec<usize> },
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Images are resized to `input_size x input_size` before embedding.
    pub input_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    /// Reconstruct per-patch standardized pixels instead of raw values.
    pub norm_pix_loss: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            patch_size: 4,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            decoder_dim: 32,
            decoder_depth: 2,
            decoder_heads: 4,
            mlp_ratio: 4,
            norm_pix_loss: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.patch_size == 0 || self.input_size % self.patch_size != 0 {
            return bad(format!("input_size {} is not divisible by patch_size {}", self.input_size, self.patch_size));
        }
        if self.input_size < self.patch_size {
            return bad("input_size is smaller than one patch".into());
        }
        for (name, dim, heads) in [
            ("embed_dim", self.embed_dim, self.heads),
            ("decoder_dim", self.decoder_dim, self.decoder_heads),
        ] {
            if heads == 0 || dim == 0 || dim % heads != 0 {
                return bad(format!("{name} {dim} is not divisible by {heads} heads"));
            }
            if dim % 4 != 0 {
                return bad(format!("{name} {dim} must be a multiple of 4 for 2D sine-cosine positions"));
            }
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be at least 1".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self, channels: usize) -> usize {
        self.patch_size * self.patch_size * channels
    }

    /// Closed-form parameter count for a net over modalities with the given
    /// channel counts.
    pub fn param_count(&self, channels: &[usize]) -> usize {
        let (d, dd) = (self.embed_dim, self.decoder_dim);
        let backbone = self.depth * block_param_count(d, self.mlp_ratio) + 2 * d;
        let per_modality: usize = channels
            .iter()
            .map(|&c| {
                let pc = self.patch_dim(c);
                let embedder = pc * d + d;
                let decoder = (d * dd + dd)
                    + dd
                    + self.decoder_depth * block_param_count(dd, self.mlp_ratio)
                    + 2 * dd
                    + (dd * pc + pc);
                embedder + decoder
            })
            .sum();
        backbone + per_modality
    }
}

/// `P_m`: linear projection of flattened patches for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedder<T: Scalar = f32> {
    pub modality: String,
    pub channels: usize,
    pub proj: Linear<T>,
}

/// Encoder shared by all modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBackbone<T: Scalar = f32> {
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
    /// Fixed, not trained.
    pub pos: Tensor<T>,
}

impl<T: Scalar> TransformerBackbone<T> {
    fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, batch: usize) -> Result<Var<'t, T>, TensorError> {
        let mut x = x;
        for b in &self.blocks {
            x = b.forward(tape, &x, batch)?;
        }
        self.norm.forward(tape, &x)
    }
}

impl<T: Scalar> Params<T> for TransformerBackbone<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// Per-modality reconstruction decoder with its own mask token.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityDecoder<T: Scalar = f32> {
    pub modality: String,
    pub embed: Linear<T>,
    /// `[1, decoder_dim]`
    pub mask_token: Tensor<T>,
    pub pos: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
    pub head: Linear<T>,
}

impl<T: Scalar> Params<T> for ModalityDecoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.embed.visit(&join(prefix, "embed"), f);
        f(&join(prefix, "mask_token"), &self.mask_token);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        f(&join(prefix, "mask_token"), &mut self.mask_token);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Token matrix for a batch of images plus the visible/masked split.
///
/// `tokens` stacks `batch` sequences of `n = rows * cols` tokens as rows of
/// a `[batch * n, d]` matrix. Index lists are per sample and within
/// `0..n`; together they cover every position exactly once.
#[derive(Debug, Clone)]
pub struct TokenSequence<'t, T: Scalar = f32> {
    pub tokens: Var<'t, T>,
    pub batch: usize,
    pub grid: (usize, usize),
    pub visible_idx: Vec<Vec<usize>>,
    pub masked_idx: Vec<Vec<usize>>,
}

impl<T: Scalar> TokenSequence<'_, T> {
    pub fn num_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn num_visible(&self) -> usize {
        self.visible_idx.first().map_or(0, Vec::len)
    }

    pub fn is_masked(&self) -> bool {
        self.masked_idx.iter().any(|m| !m.is_empty())
    }

    /// Masked positions as row indices into the stacked `[batch * n, ..]` matrix.
    pub fn masked_rows(&self) -> Vec<usize> {
        let n = self.num_tokens();
        self.masked_idx.iter().enumerate().flat_map(|(b, m)| m.iter().map(move |&i| b * n + i)).collect()
    }

    fn visible_rows(&self) -> Vec<usize> {
        let n = self.num_tokens();
        self.visible_idx.iter().enumerate().flat_map(|(b, v)| v.iter().map(move |&i| b * n + i)).collect()
    }
}

/// The full network: per-modality embedders and decoders around one backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct OfaNet<T: Scalar = f32> {
    config: ModelConfig,
    seed: u64,
    specs: BTreeMap<String, ModalitySpec>,
    embedders: BTreeMap<String, PatchEmbedder<T>>,
    backbone: TransformerBackbone<T>,
    decoders: BTreeMap<String, ModalityDecoder<T>>,
}

impl<T: Scalar> OfaNet<T> {
    /// Initializes every parameter from a key derived from `seed` and the
    /// parameter's path, so weights do not depend on modality order.
    pub fn new(config: ModelConfig, modalities: &[ModalitySpec], seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let root = Key::new(seed);
        let d = config.embed_dim;
        let g = config.grid();
        let backbone = TransformerBackbone {
            blocks: (0..config.depth)
                .map(|i| Block::new(d, config.heads, config.mlp_ratio, root.str("backbone").u64(i as u64)))
                .collect(),
            norm: LayerNorm::new(d),
            pos: sincos_2d(g, g, d),
        };
        let mut net = Self {
            config,
            seed,
            specs: BTreeMap::new(),
            embedders: BTreeMap::new(),
            backbone,
            decoders: BTreeMap::new(),
        };
        for spec in modalities {
            net.add_modality(spec)?;
        }
        Ok(net)
    }

    /// Adds a freshly initialized embedder and decoder for `spec`. Fails if
    /// the modality is already present.
    pub fn add_modality(&mut self, spec: &ModalitySpec) -> Result<(), ModelError> {
        spec.validate()?;
        if self.specs.contains_key(&spec.id) {
            return Err(ModalityError::Duplicate(spec.id.clone()).into());
        }
        let cfg = &self.config;
        let (d, dd) = (cfg.embed_dim, cfg.decoder_dim);
        let pc = cfg.patch_dim(spec.channels);
        let g = cfg.grid();
        let key = Key::new(self.seed).str(&spec.id);
        self.embedders.insert(
            spec.id.clone(),
            PatchEmbedder { modality: spec.id.clone(), channels: spec.channels, proj: Linear::new(pc, d, key.str("embedder")) },
        );
        let dkey = key.str("decoder");
        self.decoders.insert(
            spec.id.clone(),
            ModalityDecoder {
                modality: spec.id.clone(),
                embed: Linear::new(d, dd, dkey.str("embed")),
                mask_token: normal(vec![1, dd], 0.02, dkey.str("mask_token")),
                pos: sincos_2d(g, g, dd),
                blocks: (0..cfg.decoder_depth)
                    .map(|i| Block::new(dd, cfg.decoder_heads, cfg.mlp_ratio, dkey.str("block").u64(i as u64)))
                    .collect(),
                norm: LayerNorm::new(dd),
                head: Linear::new(dd, pc, dkey.str("head")),
            },
        );
        self.specs.insert(spec.id.clone(), spec.clone());
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn modalities(&self) -> impl Iterator<Item = &ModalitySpec> {
        self.specs.values()
    }

    pub fn has_modality(&self, id: &str) -> bool {
        self.embedders.contains_key(id)
    }

    pub fn backbone(&self) -> &TransformerBackbone<T> {
        &self.backbone
    }

    pub fn embedder(&self, id: &str) -> Option<&PatchEmbedder<T>> {
        self.embedders.get(id)
    }

    pub fn decoder(&self, id: &str) -> Option<&ModalityDecoder<T>> {
        self.decoders.get(id)
    }

    pub fn decoder_mut(&mut self, id: &str) -> Option<&mut ModalityDecoder<T>> {
        self.decoders.get_mut(id)
    }

    /// Visits parameters in a fixed order: embedders, backbone, decoders
    /// (each map sorted by modality id).
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (id, e) in &self.embedders {
            e.proj.visit(&format!("embedder.{id}"), f);
        }
        self.backbone.visit("backbone", f);
        for (id, dec) in &self.decoders {
            dec.visit(&format!("decoder.{id}"), f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (id, e) in self.embedders.iter_mut() {
            e.proj.visit_mut(&format!("embedder.{id}"), f);
        }
        self.backbone.visit_mut("backbone", f);
        for (id, dec) in self.decoders.iter_mut() {
            dec.visit_mut(&format!("decoder.{id}"), f);
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    /// Hash of backbone parameter names and bit patterns.
    pub fn backbone_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.backbone.visit("backbone", &mut |name, t| {
            h.write(name.as_bytes());
            t.shape().iter().for_each(|&e| h.write_usize(e));
            t.data().iter().for_each(|v| h.write_u64(v.as_f64().to_bits()));
        });
        h.finish()
    }

    /// Replaces parameters by name. Every parameter must be supplied exactly
    /// once with a matching shape.
    pub fn load_params(&mut self, params: impl IntoIterator<Item = (String, Tensor<T>)>) -> Result<(), ModelError> {
        let mut incoming: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (name, t) in params {
            if incoming.insert(name.clone(), t).is_some() {
                return Err(ModelError::UnexpectedParam(name));
            }
        }
        let mut error = None;
        self.visit_params_mut(&mut |name, slot| {
            if error.is_some() {
                return;
            }
            match incoming.remove(name) {
                Some(t) if t.shape() == slot.shape() => *slot = t,
                Some(t) => {
                    error = Some(ModelError::ParamShape {
                        name: name.to_string(),
                        expected: slot.shape().to_vec(),
                        got: t.shape().to_vec(),
                    })
                }
                None => error = Some(ModelError::MissingParam(name.to_string())),
            }
        });
        if let Some(e) = error {
            return Err(e);
        }
        if let Some(name) = incoming.into_keys().next() {
            return Err(ModelError::UnexpectedParam(name));
        }
        Ok(())
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Scalar>(&self) -> OfaNet<U> {
        let mut out = OfaNet::<U>::new(self.config.clone(), &self.specs.values().cloned().collect::<Vec<_>>(), self.seed)
            .expect("config already validated");
        let params: Vec<(String, Tensor<U>)> = self.named_params().into_iter().map(|(n, t)| (n, t.cast())).collect();
        out.load_params(params).expect("identical architecture");
        out
    }

    fn check_images(&self, images: &[Tensor<T>], modality: &str) -> Result<&PatchEmbedder<T>, ModelError> {
        let emb = self.embedders.get(modality).ok_or_else(|| ModelError::UnknownModality(modality.to_string()))?;
        if images.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let s = self.config.input_size;
        for img in images {
            match img.shape() {
                &[h, w, c] if h == s && w == s => {
                    if c != emb.channels {
                        return Err(ModelError::ChannelMismatch { modality: modality.to_string(), expected: emb.channels, got: c });
                    }
                }
                other => return Err(ModelError::ImageSize { size: s, got: other.to_vec() }),
            }
        }
        Ok(emb)
    }

    fn stacked_patches(&self, images: &[Tensor<T>]) -> Result<Tensor<T>, ModelError> {
        let p = self.config.patch_size;
        let mut data = Vec::new();
        let mut width = 0;
        for img in images {
            let patches = patchify(img, p)?;
            width = patches.row_len();
            data.extend_from_slice(patches.data());
        }
        Ok(Tensor::new(vec![images.len() * self.config.num_tokens(), width], data)?)
    }

    fn tiled(table: &Tensor<T>, batch: usize) -> Result<Tensor<T>, TensorError> {
        let mut data = Vec::with_capacity(table.numel() * batch);
        (0..batch).for_each(|_| data.extend_from_slice(table.data()));
        Tensor::new(vec![table.rows() * batch, table.row_len()], data)
    }

    /// `E = P_m(X) + pos` for a batch of images of one modality. All tokens
    /// start visible.
    pub fn embed<'t>(&self, tape: &'t Tape<T>, images: &[Tensor<T>], modality: &str) -> Result<TokenSequence<'t, T>, ModelError> {
        let emb = self.check_images(images, modality)?;
        let patches = tape.constant(self.stacked_patches(images)?);
        let pos = tape.constant(Self::tiled(&self.backbone.pos, images.len())?);
        let tokens = emb.proj.forward(tape, &patches)?.add(&pos)?;
        let n = self.config.num_tokens();
        let g = self.config.grid();
        Ok(TokenSequence {
            tokens,
            batch: images.len(),
            grid: (g, g),
            visible_idx: vec![(0..n).collect(); images.len()],
            masked_idx: vec![Vec::new(); images.len()],
        })
    }

    /// Runs the shared backbone on the visible tokens only; returns
    /// `[batch * n_visible, d]`.
    pub fn encode<'t>(&self, tape: &'t Tape<T>, seq: &TokenSequence<'t, T>) -> Result<Var<'t, T>, ModelError> {
        let x = if seq.is_masked() { seq.tokens.gather_rows(&seq.visible_rows())? } else { seq.tokens };
        Ok(self.backbone.forward(tape, x, seq.batch)?)
    }

    /// Reconstructs all `n` patches per sample: `[batch * n, p*p*c]`.
    pub fn decode<'t>(
        &self,
        tape: &'t Tape<T>,
        latent: &Var<'t, T>,
        seq: &TokenSequence<'t, T>,
        modality: &str,
    ) -> Result<Var<'t, T>, ModelError> {
        let dec = self.decoders.get(modality).ok_or_else(|| ModelError::UnknownModality(modality.to_string()))?;
        let n = seq.num_tokens();
        let nv = seq.num_visible();
        let nm = n - nv;
        let b = seq.batch;
        let x = dec.embed.forward(tape, latent)?;
        // rows 0..b*nv are visible latents, then b*nm mask tokens; `order`
        // restores grid order per sample
        let full = if nm > 0 {
            let mask = tape.param(&dec.mask_token).gather_rows(&vec![0; b * nm])?;
            x.concat_rows(&mask)?
        } else {
            x
        };
        let mut order = vec![0usize; b * n];
        for s in 0..b {
            for (r, &i) in seq.visible_idx[s].iter().enumerate() {
                order[s * n + i] = s * nv + r;
            }
            for (r, &i) in seq.masked_idx[s].iter().enumerate() {
                order[s * n + i] = b * nv + s * nm + r;
            }
        }
        let pos = tape.constant(Self::tiled(&dec.pos, b)?);
        let mut h = full.gather_rows(&order)?.add(&pos)?;
        for blk in &dec.blocks {
            h = blk.forward(tape, &h, b)?;
        }
        let h = dec.norm.forward(tape, &h)?;
        Ok(dec.head.forward(tape, &h)?)
    }

    /// Reconstruction targets `[batch * n, p*p*c]`, standardized per patch
    /// when `norm_pix_loss` is set.
    pub fn targets(&self, images: &[Tensor<T>]) -> Result<Tensor<T>, ModelError> {
        let patches = self.stacked_patches(images)?;
        Ok(if self.config.norm_pix_loss { normalize_patches(&patches) } else { patches })
    }

    /// Embed, mask, encode, decode and score one single-modality batch.
    pub fn mim_forward<'t>(
        &self,
        tape: &'t Tape<T>,
        images: &[Tensor<T>],
        modality: &str,
        mask_ratio: f64,
        mask_key: Key,
    ) -> Result<Var<'t, T>, ModelError> {
        let seq = random_mask(self.embed(tape, images, modality)?, mask_ratio, mask_key)?;
        let latent = self.encode(tape, &seq)?;
        let pred = self.decode(tape, &latent, &seq, modality)?;
        let target = tape.constant(self.targets(images)?);
        mim_loss(&pred, &target, &seq.masked_rows())
    }

    /// Unmasked per-token backbone features for each image, `[n, d]`.
    pub fn forward_tokens_batch(&self, images: &[Tensor<T>], modality: &str) -> Result<Vec<Tensor<T>>, ModelError> {
        let tape = Tape::no_grad();
        let seq = self.embed(&tape, images, modality)?;
        let out = self.encode(&tape, &seq)?.value();
        let n = self.config.num_tokens();
        let d = self.config.embed_dim;
        Ok(out.data().chunks_exact(n * d).map(|c| Tensor::new(vec![n, d], c.to_vec()).expect("n x d")).collect())
    }

    pub fn forward_tokens(&self, image: &Tensor<T>, modality: &str) -> Result<Tensor<T>, ModelError> {
        Ok(self.forward_tokens_batch(std::slice::from_ref(image), modality)?.remove(0))
    }

    /// Mean-pooled backbone features, `[d]`.
    pub fn forward_features(&self, image: &Tensor<T>, modality: &str) -> Result<Tensor<T>, ModelError> {
        Ok(self.forward_tokens(image, modality)?.mean_rows()?)
    }

    pub fn forward_features_batch(&self, images: &[Tensor<T>], modality: &str) -> Result<Vec<Tensor<T>>, ModelError> {
        self.forward_tokens_batch(images, modality)?.iter().map(|t| Ok(t.mean_rows()?)).collect()
    }
}

/// Chooses `round(ratio * n)` masked positions per sample from a uniform
/// random permutation; the kept prefix is visible. Both lists are sorted.
pub fn random_mask<'t, T: Scalar>(mut seq: TokenSequence<'t, T>, ratio: f64, key: Key) -> Result<TokenSequence<'t, T>, ModelError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(ModelError::MaskRatio(ratio));
    }
    let n = seq.num_tokens();
    let n_mask = (ratio * n as f64).round() as usize;
    if n_mask == 0 {
        return Err(ModelError::DegenerateMask { ratio, n, side: "masked" });
    }
    if n_mask >= n {
        return Err(ModelError::DegenerateMask { ratio, n, side: "visible" });
    }
    let mut visible = Vec::with_capacity(seq.batch);
    let mut masked = Vec::with_capacity(seq.batch);
    for b in 0..seq.batch {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut key.u64(b as u64).rng());
        let mut v = perm[..n - n_mask].to_vec();
        let mut m = perm[n - n_mask..].to_vec();
        v.sort_unstable();
        m.sort_unstable();
        visible.push(v);
        masked.push(m);
    }
    seq.visible_idx = visible;
    seq.masked_idx = masked;
    Ok(seq)
}

/// Mean squared error over the masked rows only.
pub fn mim_loss<'t, T: Scalar>(pred: &Var<'t, T>, target: &Var<'t, T>, masked_rows: &[usize]) -> Result<Var<'t, T>, ModelError> {
    if masked_rows.is_empty() {
        return Err(ModelError::EmptyMask);
    }
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch { op: "mim_loss", lhs: pred.shape(), rhs: target.shape() }.into());
    }
    Ok(pred.gather_rows(masked_rows)?.mse(&target.gather_rows(masked_rows)?)?)
}

#[cfg(test)]
mod tests;
