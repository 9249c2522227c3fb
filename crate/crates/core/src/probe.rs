//! Linear probing of frozen backbone features.
//!
//! Features are extracted once with the backbone frozen; only a linear head
//! is trained, with softmax cross-entropy and SGD with momentum. The head
//! math runs in `f64` on cached features.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::dataset::{Dataset, LabelKind};
use crate::model::{ModelError, OfaNet};
use crate::rng::{par_map, Key};
use crate::synth::{resize_mask_nearest, resize_nearest, SegMask};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid probe config: {0}")]
    InvalidConfig(String),
    #[error("label {label} is out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("dataset has no {0}")]
    MissingLabels(&'static str),
    #[error("{0}")]
    Mismatch(String),
    #[error("metric needs at least one element")]
    Empty,
    #[error("comparison needs at least two reports, got {0}")]
    TooFewReports(usize),
    #[error("malformed report line: {0}")]
    BadReportLine(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    Classification,
    Segmentation,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Classification => "cls",
            TaskKind::Segmentation => "seg",
        }
    }

    pub fn metric(self) -> &'static str {
        match self {
            TaskKind::Classification => "top1",
            TaskKind::Segmentation => "miou",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = ProbeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cls" | "classification" => Ok(TaskKind::Classification),
            "seg" | "segmentation" => Ok(TaskKind::Segmentation),
            other => Err(ProbeError::InvalidConfig(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub task: TaskKind,
    pub lr: f64,
    pub epochs: usize,
    /// Images per SGD step; 0 means full batch.
    pub batch_size: usize,
    pub classes: usize,
    pub momentum: f64,
    /// Standardize each feature dimension with train-set statistics before
    /// the head (an affine map, so the probe stays linear).
    pub standardize: bool,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn classification(classes: usize) -> Self {
        Self { task: TaskKind::Classification, lr: 1e-2, epochs: 100, batch_size: 0, classes, momentum: 0.9, standardize: true, seed: 0 }
    }

    pub fn segmentation(classes: usize) -> Self {
        Self { task: TaskKind::Segmentation, lr: 1e-4, ..Self::classification(classes) }
    }

    pub fn validate(&self) -> Result<(), ProbeError> {
        let bad = |m: &str| Err(ProbeError::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.classes < 2 {
            return bad("at least 2 classes are required");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Per-dimension affine normalization fitted on training features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], inv_std: vec![1.0; dim] }
    }

    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Self {
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut n = 0usize;
        for r in rows {
            for j in 0..dim {
                sum[j] += r[j];
                sq[j] += r[j] * r[j];
            }
            n += 1;
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let inv_std = sq.iter().zip(&mean).map(|(s, m)| 1.0 / ((s / n - m * m).max(0.0) + 1e-6).sqrt()).collect();
        Self { mean, inv_std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.inv_std).map(|((v, m), s)| (v - m) * s).collect()
    }
}

/// `logits = norm(x) . weight + bias`, weight `[d, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub norm: FeatureNorm,
    pub weight: Tensor<f64>,
    pub bias: Tensor<f64>,
}

impl LinearHead {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self {
            norm: FeatureNorm::identity(dim),
            weight: Tensor::zeros(vec![dim, classes]).expect("positive extents"),
            bias: Tensor::zeros(vec![classes]).expect("positive extents"),
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[1]
    }

    fn logits_normalized(&self, x: &[f64]) -> Vec<f64> {
        let k = self.classes();
        let mut out = self.bias.data().to_vec();
        for (xi, row) in x.iter().zip(self.weight.data().chunks_exact(k)) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        out
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.logits_normalized(&self.norm.apply(x))
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

/// One training unit: a feature row with per-class target mass. A
/// classification sample puts mass 1 on its label; a segmentation token puts
/// the pixel count of each class in its patch.
struct Unit<'a> {
    x: &'a [f64],
    target: Vec<f64>,
}

/// SGD with momentum on summed cross-entropy divided by the batch's total
/// target mass. Units are grouped into `groups` (one per image) for batching.
fn train_head(groups: &[Vec<Unit<'_>>], dim: usize, cfg: &ProbeConfig) -> LinearHead {
    let k = cfg.classes;
    let mut head = LinearHead::zeros(dim, k);
    if cfg.standardize {
        head.norm = FeatureNorm::fit(groups.iter().flatten().map(|u| u.x), dim);
    }
    let normed: Vec<Vec<(Vec<f64>, &[f64])>> =
        groups.iter().map(|g| g.iter().map(|u| (head.norm.apply(u.x), u.target.as_slice())).collect()).collect();
    let mut vel_w = vec![0.0; dim * k];
    let mut vel_b = vec![0.0; k];
    let bs = if cfg.batch_size == 0 { groups.len() } else { cfg.batch_size };
    let mut order: Vec<usize> = (0..groups.len()).collect();
    let mut gw = vec![0.0; dim * k];
    let mut gb = vec![0.0; k];
    for epoch in 0..cfg.epochs {
        if bs < groups.len() {
            order.shuffle(&mut Key::new(cfg.seed).str("probe").u64(epoch as u64).rng());
        }
        for chunk in order.chunks(bs) {
            gw.iter_mut().for_each(|v| *v = 0.0);
            gb.iter_mut().for_each(|v| *v = 0.0);
            let mut mass = 0.0;
            for &gi in chunk {
                for (x, target) in &normed[gi] {
                    let total: f64 = target.iter().sum();
                    let mut p = head.logits_normalized(x);
                    softmax_in_place(&mut p);
                    for c in 0..k {
                        let d = total * p[c] - target[c];
                        gb[c] += d;
                        for (j, xj) in x.iter().enumerate() {
                            gw[j * k + c] += d * xj;
                        }
                    }
                    mass += total;
                }
            }
            let inv = 1.0 / mass.max(1.0);
            let w = head.weight.data_mut();
            for i in 0..w.len() {
                vel_w[i] = cfg.momentum * vel_w[i] + gw[i] * inv;
                w[i] -= cfg.lr * vel_w[i];
            }
            let b = head.bias.data_mut();
            for c in 0..k {
                vel_b[c] = cfg.momentum * vel_b[c] + gb[c] * inv;
                b[c] -= cfg.lr * vel_b[c];
            }
        }
    }
    head
}

/// Trains a classification head on precomputed features.
pub fn train_linear_cls(features: &[Vec<f64>], labels: &[usize], cfg: &ProbeConfig) -> Result<LinearHead, ProbeError> {
    cfg.validate()?;
    if features.is_empty() || features.len() != labels.len() {
        return Err(ProbeError::Mismatch(format!("{} feature rows for {} labels", features.len(), labels.len())));
    }
    let dim = features[0].len();
    let mut groups = Vec::with_capacity(features.len());
    for (x, &l) in features.iter().zip(labels) {
        if l >= cfg.classes {
            return Err(ProbeError::LabelOutOfRange { label: l, classes: cfg.classes });
        }
        if x.len() != dim {
            return Err(ProbeError::Mismatch("feature rows differ in length".into()));
        }
        let mut target = vec![0.0; cfg.classes];
        target[l] = 1.0;
        groups.push(vec![Unit { x, target }]);
    }
    Ok(train_head(&groups, dim, cfg))
}

/// Per-token features of one image with the class count of each token's
/// pixel block.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTargets {
    pub tokens: Vec<Vec<f64>>,
    pub counts: Vec<Vec<f64>>,
}

/// Counts mask labels inside each `p x p` block of a `grid x grid` token
/// layout.
pub fn token_label_counts(mask: &SegMask, grid: usize, classes: usize) -> Result<Vec<Vec<f64>>, ProbeError> {
    if mask.height % grid != 0 || mask.width % grid != 0 {
        return Err(ProbeError::Mismatch(format!("{}x{} mask does not tile a {grid}x{grid} token grid", mask.height, mask.width)));
    }
    let (ph, pw) = (mask.height / grid, mask.width / grid);
    let mut counts = vec![vec![0.0; classes]; grid * grid];
    for y in 0..mask.height {
        for x in 0..mask.width {
            let c = mask.at(y, x) as usize;
            if c >= classes {
                return Err(ProbeError::LabelOutOfRange { label: c, classes });
            }
            counts[(y / ph) * grid + x / pw][c] += 1.0;
        }
    }
    Ok(counts)
}

/// Trains a per-token segmentation head. Each token's logits are broadcast
/// to its pixel block, so the pixel-level cross-entropy gradient reduces to
/// `p*p * softmax - counts` per token.
pub fn train_linear_seg(samples: &[TokenTargets], cfg: &ProbeConfig) -> Result<LinearHead, ProbeError> {
    cfg.validate()?;
    let dim = samples.first().and_then(|s| s.tokens.first()).map(Vec::len).ok_or(ProbeError::Empty)?;
    let groups: Vec<Vec<Unit<'_>>> = samples
        .iter()
        .map(|s| s.tokens.iter().zip(&s.counts).map(|(x, c)| Unit { x, target: c.clone() }).collect())
        .collect();
    for g in &groups {
        for u in g {
            if u.x.len() != dim || u.target.len() != cfg.classes {
                return Err(ProbeError::Mismatch("token feature or count length differs".into()));
            }
        }
    }
    Ok(train_head(&groups, dim, cfg))
}

/// Nearest-neighbour upsampling of a token-grid prediction to pixels.
pub fn upsample_tokens(pred: &[usize], grid: usize, height: usize, width: usize) -> SegMask {
    let data = (0..height * width).map(|i| pred[(i / width) * grid / height * grid + (i % width) * grid / width] as u8).collect();
    SegMask { height, width, data }
}

/// Fraction of exact matches.
pub fn top1_accuracy(pred: &[usize], labels: &[usize]) -> Result<f64, ProbeError> {
    if pred.is_empty() {
        return Err(ProbeError::Empty);
    }
    if pred.len() != labels.len() {
        return Err(ProbeError::Mismatch(format!("{} predictions for {} labels", pred.len(), labels.len())));
    }
    Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}

/// Mean intersection-over-union over classes present in either mask.
pub fn mean_iou(pred: &[u8], gt: &[u8], classes: usize) -> Result<f64, ProbeError> {
    if pred.is_empty() {
        return Err(ProbeError::Empty);
    }
    if pred.len() != gt.len() {
        return Err(ProbeError::Mismatch(format!("masks of {} and {} pixels", pred.len(), gt.len())));
    }
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p >= classes || g >= classes {
            return Err(ProbeError::LabelOutOfRange { label: p.max(g), classes });
        }
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let present: Vec<f64> = (0..classes).filter(|&c| union[c] > 0).map(|c| inter[c] as f64 / union[c] as f64).collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

fn resized_images(ds: &Dataset, size: usize) -> Result<Vec<Tensor<f32>>, ProbeError> {
    ds.samples
        .iter()
        .map(|s| if ds.height == size && ds.width == size { Ok(s.image.clone()) } else { Ok(resize_nearest(&s.image, size, size)?) })
        .collect()
}

const FEATURE_CHUNK: usize = 16;

/// Mean-pooled features for every image in `ds`, extracted with the net
/// frozen.
pub fn extract_features(net: &OfaNet<f32>, ds: &Dataset, threads: usize) -> Result<Vec<Vec<f64>>, ProbeError> {
    let images = resized_images(ds, net.config().input_size)?;
    let chunks: Vec<&[Tensor<f32>]> = images.chunks(FEATURE_CHUNK).collect();
    let out = par_map(chunks.len(), threads, |i| net.forward_features_batch(chunks[i], &ds.modality));
    let mut rows = Vec::with_capacity(images.len());
    for chunk in out {
        rows.extend(chunk?.into_iter().map(|t| t.data().iter().map(|&v| v as f64).collect::<Vec<f64>>()));
    }
    Ok(rows)
}

/// Per-token features for every image, each a list of `n` rows.
pub fn extract_tokens(net: &OfaNet<f32>, ds: &Dataset, threads: usize) -> Result<Vec<Vec<Vec<f64>>>, ProbeError> {
    let images = resized_images(ds, net.config().input_size)?;
    let chunks: Vec<&[Tensor<f32>]> = images.chunks(FEATURE_CHUNK).collect();
    let out = par_map(chunks.len(), threads, |i| net.forward_tokens_batch(chunks[i], &ds.modality));
    let mut all = Vec::with_capacity(images.len());
    for chunk in out {
        for t in chunk? {
            all.push(t.data().chunks_exact(t.row_len()).map(|r| r.iter().map(|&v| v as f64).collect()).collect());
        }
    }
    Ok(all)
}

/// Result of one probe run.
#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub head: LinearHead,
    pub train_metric: f64,
    pub test_metric: f64,
}

/// Classification probe: features of `train` fit the head, `test` scores it.
pub fn probe_classification(net: &OfaNet<f32>, train: &Dataset, test: &Dataset, cfg: &ProbeConfig, threads: usize) -> Result<ProbeOutcome, ProbeError> {
    let labels = |ds: &Dataset| ds.labels().filter(|_| ds.kind == LabelKind::Class).ok_or(ProbeError::MissingLabels("class labels"));
    let (ytr, yte) = (labels(train)?, labels(test)?);
    let xtr = extract_features(net, train, threads)?;
    let xte = extract_features(net, test, threads)?;
    let head = train_linear_cls(&xtr, &ytr, cfg)?;
    let score = |x: &[Vec<f64>], y: &[usize]| top1_accuracy(&x.iter().map(|f| head.predict(f)).collect::<Vec<_>>(), y);
    Ok(ProbeOutcome { train_metric: score(&xtr, &ytr)?, test_metric: score(&xte, &yte)?, head })
}

fn seg_targets(net: &OfaNet<f32>, ds: &Dataset, classes: usize, threads: usize) -> Result<(Vec<TokenTargets>, Vec<SegMask>), ProbeError> {
    if ds.kind != LabelKind::Mask {
        return Err(ProbeError::MissingLabels("segmentation masks"));
    }
    let size = net.config().input_size;
    let grid = net.config().grid();
    let masks: Vec<SegMask> = ds
        .masks()
        .ok_or(ProbeError::MissingLabels("segmentation masks"))?
        .iter()
        .map(|m| if m.height == size && m.width == size { m.clone() } else { resize_mask_nearest(m, size, size) })
        .collect();
    let tokens = extract_tokens(net, ds, threads)?;
    let targets = tokens
        .into_iter()
        .zip(&masks)
        .map(|(tokens, m)| Ok(TokenTargets { tokens, counts: token_label_counts(m, grid, classes)? }))
        .collect::<Result<Vec<_>, ProbeError>>()?;
    Ok((targets, masks))
}

fn seg_miou(head: &LinearHead, targets: &[TokenTargets], masks: &[SegMask], grid: usize, classes: usize) -> Result<f64, ProbeError> {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for (t, m) in targets.iter().zip(masks) {
        let tok: Vec<usize> = t.tokens.iter().map(|x| head.predict(x)).collect();
        pred.extend(upsample_tokens(&tok, grid, m.height, m.width).data);
        gt.extend_from_slice(&m.data);
    }
    mean_iou(&pred, &gt, classes)
}

/// Segmentation probe; mIoU is computed over all test pixels together.
pub fn probe_segmentation(net: &OfaNet<f32>, train: &Dataset, test: &Dataset, cfg: &ProbeConfig, threads: usize) -> Result<ProbeOutcome, ProbeError> {
    let grid = net.config().grid();
    let (ttr, mtr) = seg_targets(net, train, cfg.classes, threads)?;
    let (tte, mte) = seg_targets(net, test, cfg.classes, threads)?;
    let head = train_linear_seg(&ttr, cfg)?;
    Ok(ProbeOutcome {
        train_metric: seg_miou(&head, &ttr, &mtr, grid, cfg.classes)?,
        test_metric: seg_miou(&head, &tte, &mte, grid, cfg.classes)?,
        head,
    })
}

/// Splits off the first `round(fraction * n)` samples for training.
pub fn split_dataset(ds: &Dataset, train_fraction: f64) -> Result<(Dataset, Dataset), ProbeError> {
    let n_train = (train_fraction * ds.len() as f64).round() as usize;
    if n_train == 0 || n_train >= ds.len() {
        return Err(ProbeError::InvalidConfig(format!("cannot split {} samples at fraction {train_fraction}", ds.len())));
    }
    let part = |s: &[crate::synth::SynthSample]| Dataset {
        modality: ds.modality.clone(),
        height: ds.height,
        width: ds.width,
        channels: ds.channels,
        kind: ds.kind,
        samples: s.to_vec(),
    };
    Ok((part(&ds.samples[..n_train]), part(&ds.samples[n_train..])))
}

/// One row of a comparison: `task, dataset, method, metric, value`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub task: TaskKind,
    pub dataset: String,
    pub method: String,
    pub metric: String,
    pub value: f64,
}

impl ProbeReport {
    pub fn new(task: TaskKind, dataset: impl Into<String>, method: impl Into<String>, value: f64) -> Self {
        Self { task, dataset: dataset.into(), method: method.into(), metric: task.metric().to_string(), value }
    }
}

impl fmt::Display for ProbeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{}\t{:.6}", self.task, self.dataset, self.method, self.metric, self.value)
    }
}

impl FromStr for ProbeReport {
    type Err = ProbeError;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let bad = || ProbeError::BadReportLine(line.to_string());
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        let value: f64 = f[4].trim().parse().map_err(|_| bad())?;
        if !(0.0..=1.0).contains(&value) {
            return Err(bad());
        }
        Ok(Self { task: f[0].parse()?, dataset: f[1].into(), method: f[2].into(), metric: f[3].into(), value })
    }
}

/// Aligned table of reports on one task and dataset, values in percent,
/// with each row's delta against the first.
pub fn compare_runs(reports: &[ProbeReport]) -> Result<String, ProbeError> {
    if reports.len() < 2 {
        return Err(ProbeError::TooFewReports(reports.len()));
    }
    let base = &reports[0];
    if let Some(r) = reports.iter().find(|r| r.task != base.task || r.dataset != base.dataset || r.metric != base.metric) {
        return Err(ProbeError::Mismatch(format!(
            "cannot compare {}/{}/{} with {}/{}/{}",
            base.task, base.dataset, base.metric, r.task, r.dataset, r.metric
        )));
    }
    let header = ["task", "dataset", "method", "metric", "value", "delta"];
    let mut rows: Vec<[String; 6]> = vec![header.map(String::from)];
    for (i, r) in reports.iter().enumerate() {
        let delta = if i == 0 { "-".to_string() } else { format!("{:+.2}", 100.0 * (r.value - base.value)) };
        rows.push([r.task.to_string(), r.dataset.clone(), r.method.clone(), r.metric.clone(), format!("{:.2}", 100.0 * r.value), delta]);
    }
    let widths: Vec<usize> = (0..6).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in &rows {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| if c >= 4 { format!("{s:>w$}", w = widths[c]) } else { format!("{s:<w$}", w = widths[c]) })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    Ok(out)
}
