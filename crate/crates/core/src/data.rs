//! Synthetic datasets, labeled/unlabeled splitting, batch planning and file IO.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::{keyed, Rng, Stream};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"RCDS";
pub const DATASET_VERSION: u32 = 1;

const KIND_IMAGE: u8 = 0b01;
const KIND_MULTILABEL: u8 = 0b10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Vector,
    Image,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// One class index per sample.
    Single(Vec<usize>),
    /// Row-major `N x classes` multi-hot matrix.
    Multi { classes: usize, hot: Vec<u8> },
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Single(v) => v.len(),
            Labels::Multi { classes, hot } => hot.len() / classes,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_multi(&self) -> bool {
        matches!(self, Labels::Multi { .. })
    }

    pub fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Single(v) => Labels::Single(idx.iter().map(|&i| v[i]).collect()),
            Labels::Multi { classes, hot } => Labels::Multi {
                classes: *classes,
                hot: idx
                    .iter()
                    .flat_map(|&i| hot[i * classes..(i + 1) * classes].iter().copied())
                    .collect(),
            },
        }
    }

    pub fn concat(&self, other: &Labels) -> Result<Labels> {
        match (self, other) {
            (Labels::Single(a), Labels::Single(b)) => {
                Ok(Labels::Single(a.iter().chain(b).copied().collect()))
            }
            (Labels::Multi { classes: ka, hot: a }, Labels::Multi { classes: kb, hot: b })
                if ka == kb =>
            {
                Ok(Labels::Multi {
                    classes: *ka,
                    hot: a.iter().chain(b).copied().collect(),
                })
            }
            _ => Err(Error::Contract("cannot concatenate mismatched label kinds".into())),
        }
    }

    /// Positive count per class.
    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        match self {
            Labels::Single(v) => v.iter().for_each(|&c| counts[c] += 1),
            Labels::Multi { classes: k, hot } => {
                for row in hot.chunks(*k) {
                    for (c, &h) in row.iter().enumerate() {
                        counts[c] += h as usize;
                    }
                }
            }
        }
        counts
    }

    /// Stratification key: the class for single-label data, the first positive
    /// class (or `classes` when none) for multi-label data.
    fn stratum(&self, i: usize) -> usize {
        match self {
            Labels::Single(v) => v[i],
            Labels::Multi { classes, hot } => hot[i * classes..(i + 1) * classes]
                .iter()
                .position(|&h| h != 0)
                .unwrap_or(*classes),
        }
    }

    /// Dense `[N, K]` target matrix (one-hot for single-label).
    pub fn to_matrix(&self, classes: usize) -> Tensor {
        let n = self.len().max(1);
        let mut m = vec![0.0; n * classes];
        match self {
            Labels::Single(v) => v.iter().enumerate().for_each(|(i, &c)| m[i * classes + c] = 1.0),
            Labels::Multi { hot, .. } => m.iter_mut().zip(hot).for_each(|(d, &h)| *d = h as f64),
        }
        Tensor::from_vec(&[n, classes], m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, ...sample_shape]`.
    pub inputs: Tensor,
    pub labels: Labels,
    pub kind: DataKind,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Labels, kind: DataKind, num_classes: usize) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(Error::Contract(format!(
                "{} labels for {} samples",
                labels.len(),
                inputs.rows()
            )));
        }
        if num_classes < 2 || inputs.rows() < num_classes {
            return Err(Error::Contract(format!(
                "need N >= K >= 2, got N={} K={num_classes}",
                inputs.rows()
            )));
        }
        match &labels {
            Labels::Single(v) => {
                if let Some(&bad) = v.iter().find(|&&c| c >= num_classes) {
                    return Err(Error::Contract(format!("label {bad} >= K={num_classes}")));
                }
            }
            Labels::Multi { classes, .. } => {
                if *classes != num_classes {
                    return Err(Error::Contract("multi-hot width differs from K".into()));
                }
            }
        }
        if let Some(c) = labels.class_counts(num_classes).iter().position(|&n| n == 0) {
            return Err(Error::Contract(format!("class {c} has no samples")));
        }
        let rank_ok = match kind {
            DataKind::Vector => inputs.rank() == 2,
            DataKind::Image => inputs.rank() == 4,
        };
        if !rank_ok {
            return Err(Error::Contract(format!(
                "{kind:?} dataset with input shape {:?}",
                inputs.shape()
            )));
        }
        Ok(Self {
            inputs,
            labels,
            kind,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        let mut kind = 0;
        if self.kind == DataKind::Image {
            kind |= KIND_IMAGE;
        }
        if self.labels.is_multi() {
            kind |= KIND_MULTILABEL;
        }
        w.u8(kind);
        w.u32(self.len() as u32);
        w.u32(self.num_classes as u32);
        let dims: [usize; 3] = match self.sample_shape() {
            [d] => [*d, 1, 1],
            [c, h, wd] => [*c, *h, *wd],
            _ => unreachable!("validated at construction"),
        };
        dims.iter().for_each(|&d| w.u32(d as u32));
        w.f64s(self.inputs.data());
        match &self.labels {
            Labels::Single(v) => v.iter().for_each(|&c| w.u16(c as u16)),
            Labels::Multi { hot, .. } => w.bytes(hot),
        }
        w.buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(DATASET_MAGIC)?;
        let version = r.u32("version")?;
        if version != DATASET_VERSION {
            return r.fail(format!("unsupported version {version}"));
        }
        let kind_at = r.offset();
        let kind = r.u8("kind")?;
        if kind & !(KIND_IMAGE | KIND_MULTILABEL) != 0 {
            return Err(Error::Format {
                offset: kind_at,
                reason: format!("unknown kind byte {kind}"),
            });
        }
        let n = r.u32("sample count")? as usize;
        let k = r.u32("class count")? as usize;
        let dims = [r.u32("dim")? as usize, r.u32("dim")? as usize, r.u32("dim")? as usize];
        let image = kind & KIND_IMAGE != 0;
        let mut shape = vec![n];
        if image {
            shape.extend_from_slice(&dims);
        } else {
            shape.push(dims[0]);
        }
        let per: usize = dims.iter().product();
        let data_at = r.offset();
        let data = r.f64s(n * per, "inputs")?;
        let inputs = Tensor::new(shape, data).map_err(|e| Error::Format {
            offset: data_at,
            reason: e.to_string(),
        })?;
        let labels = if kind & KIND_MULTILABEL != 0 {
            Labels::Multi {
                classes: k,
                hot: r.take(n * k, "multi-hot labels")?.to_vec(),
            }
        } else {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(r.u16("class index")? as usize);
            }
            Labels::Single(v)
        };
        if !r.is_done() {
            return r.fail("trailing bytes after label block");
        }
        let kind = if image { DataKind::Image } else { DataKind::Vector };
        Dataset::new(inputs, labels, kind, k).map_err(|e| Error::Format {
            offset: buf.len(),
            reason: e.to_string(),
        })
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, ds.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_bytes(&buf)
}

/// Reads a headerless CSV of `features..., label` rows into a vector dataset.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(Error::Parse(format!("line {}: need features and a label", ln + 1)));
        }
        let d = fields.len() - 1;
        if *width.get_or_insert(d) != d {
            return Err(Error::Parse(format!("line {}: expected {} features", ln + 1, width.unwrap())));
        }
        for f in &fields[..d] {
            data.push(
                f.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("line {}: bad number `{f}`", ln + 1)))?,
            );
        }
        let label = fields[d]
            .parse::<usize>()
            .map_err(|_| Error::Parse(format!("line {}: bad label `{}`", ln + 1, fields[d])))?;
        labels.push(label);
    }
    let d = width.ok_or_else(|| Error::Parse("empty csv".into()))?;
    let k = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let inputs = Tensor::new(vec![labels.len(), d], data)?;
    Dataset::new(inputs, Labels::Single(labels), DataKind::Vector, k)
}

/// Two interleaved half circles: class 0 on the unit upper arc centred at the
/// origin, class 1 on the unit lower arc centred at `(1, 0.5)`.
pub fn gen_two_moons(n: usize, noise_sd: f64, rng: &mut Rng) -> Result<Dataset> {
    if !n.is_multiple_of(2) || n < 4 {
        return Err(Error::Contract(format!("two moons needs an even n >= 4, got {n}")));
    }
    let half = n / 2;
    let normal = Normal::new(0.0, noise_sd.max(0.0)).map_err(|e| Error::Contract(e.to_string()))?;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for class in 0..2 {
        for i in 0..half {
            let t = std::f64::consts::PI * i as f64 / (half - 1) as f64;
            let (x, y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let (nx, ny) = if noise_sd > 0.0 {
                (normal.sample(rng), normal.sample(rng))
            } else {
                (0.0, 0.0)
            };
            data.push(x + nx);
            data.push(y + ny);
            labels.push(class);
        }
    }
    Dataset::new(Tensor::from_vec(&[n, 2], data), Labels::Single(labels), DataKind::Vector, 2)
}

/// Largest-remainder apportionment of `total` proportionally to `weights`.
/// Ties in the remainder go to the lower index.
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Class sizes with geometric ratio `ratio` between consecutive classes, class 0 largest.
pub fn geometric_class_counts(n: usize, classes: usize, ratio: f64) -> Vec<usize> {
    let weights: Vec<f64> = (0..classes)
        .map(|k| ratio.powi((classes - 1 - k) as i32))
        .collect();
    apportion(n, &weights)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobConfig {
    pub n: usize,
    pub classes: usize,
    pub size: usize,
    pub imbalance_ratio: f64,
    pub pixel_noise_sd: f64,
    /// Random blob centre; when false the blob sits at the image centre.
    pub position_jitter: bool,
    /// Relative per-sample jitter of the class radius.
    pub radius_jitter: f64,
    /// Relative per-sample jitter of the class intensity.
    pub intensity_jitter: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            classes: 3,
            size: 12,
            imbalance_ratio: 1.0,
            pixel_noise_sd: 0.15,
            position_jitter: true,
            radius_jitter: 0.1,
            intensity_jitter: 0.1,
        }
    }
}

impl BlobConfig {
    /// Class-dependent (radius, intensity). Larger classes are fainter.
    fn class_params(&self, k: usize) -> (f64, f64) {
        let frac = k as f64 / (self.classes - 1) as f64;
        let radius = self.size as f64 * (0.09 + 0.13 * frac);
        let intensity = 1.0 - 0.35 * frac;
        (radius, intensity)
    }
}

fn render_blob(img: &mut [f64], size: usize, cy: f64, cx: f64, radius: f64, intensity: f64) {
    let two_r2 = 2.0 * radius * radius;
    for y in 0..size {
        for x in 0..size {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            img[y * size + x] += intensity * (-d2 / two_r2).exp();
        }
    }
}

/// Single-channel images holding one Gaussian blob whose radius and
/// intensity depend on the class; the position is class independent so flips
/// and shifts preserve the label.
pub fn gen_blob_images(cfg: &BlobConfig, rng: &mut Rng) -> Result<Dataset> {
    if cfg.size < 8 || cfg.classes < 2 {
        return Err(Error::Contract(format!(
            "blob images need size >= 8 and K >= 2, got size={} K={}",
            cfg.size, cfg.classes
        )));
    }
    if cfg.imbalance_ratio < 1.0 {
        return Err(Error::Contract("imbalance_ratio must be >= 1".into()));
    }
    let counts = geometric_class_counts(cfg.n, cfg.classes, cfg.imbalance_ratio);
    if counts.contains(&0) {
        return Err(Error::Contract(format!("class counts {counts:?} leave a class empty")));
    }
    let s = cfg.size;
    let noise = Normal::new(0.0, cfg.pixel_noise_sd.max(0.0)).map_err(|e| Error::Contract(e.to_string()))?;
    let mut data = Vec::with_capacity(cfg.n * s * s);
    let mut labels = Vec::with_capacity(cfg.n);
    let centre = (s as f64 - 1.0) / 2.0;
    for (k, &count) in counts.iter().enumerate() {
        let (r0, i0) = cfg.class_params(k);
        for _ in 0..count {
            let jitter = |rng: &mut Rng, amount: f64| {
                if amount > 0.0 {
                    1.0 + rng.random_range(-amount..=amount)
                } else {
                    1.0
                }
            };
            let radius = r0 * jitter(rng, cfg.radius_jitter);
            let intensity = i0 * jitter(rng, cfg.intensity_jitter);
            let (cy, cx) = if cfg.position_jitter {
                let lo = 2.0;
                let hi = s as f64 - 3.0;
                (rng.random_range(lo..=hi), rng.random_range(lo..=hi))
            } else {
                (centre, centre)
            };
            let mut img = vec![0.0; s * s];
            render_blob(&mut img, s, cy, cx, radius, intensity);
            if cfg.pixel_noise_sd > 0.0 {
                img.iter_mut().for_each(|p| *p += noise.sample(rng));
            }
            data.extend(img);
            labels.push(k);
        }
    }
    let inputs = Tensor::from_vec(&[cfg.n, 1, s, s], data);
    Dataset::new(inputs, Labels::Single(labels), DataKind::Image, cfg.classes)
}

/// Multi-label variant: each of three blob types (small bright, medium, large
/// faint) is independently present with probability one half.
pub fn gen_multilabel_blobs(n: usize, size: usize, pixel_noise_sd: f64, rng: &mut Rng) -> Result<Dataset> {
    const TYPES: usize = 3;
    if size < 8 || n < TYPES {
        return Err(Error::Contract("multi-label blobs need size >= 8 and n >= 3".into()));
    }
    let base = BlobConfig {
        classes: TYPES,
        size,
        ..BlobConfig::default()
    };
    let noise = Normal::new(0.0, pixel_noise_sd.max(0.0)).map_err(|e| Error::Contract(e.to_string()))?;
    let mut data = Vec::with_capacity(n * size * size);
    let mut hot = Vec::with_capacity(n * TYPES);
    for i in 0..n {
        let mut img = vec![0.0; size * size];
        for t in 0..TYPES {
            // the first samples guarantee every type occurs at least once
            let present = i == t || rng.random::<f64>() < 0.5;
            hot.push(present as u8);
            if present {
                let (r, a) = base.class_params(t);
                let hi = size as f64 - 3.0;
                let (cy, cx) = (rng.random_range(2.0..=hi), rng.random_range(2.0..=hi));
                render_blob(&mut img, size, cy, cx, r, a);
            }
        }
        if pixel_noise_sd > 0.0 {
            img.iter_mut().for_each(|p| *p += noise.sample(rng));
        }
        data.extend(img);
    }
    let inputs = Tensor::from_vec(&[n, 1, size, size], data);
    Dataset::new(inputs, Labels::Multi { classes: TYPES, hot }, DataKind::Image, TYPES)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub labeled_fraction: f64,
    pub stratified: bool,
    pub seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            labeled_fraction: 0.2,
            stratified: true,
            seed: 0,
            train_fraction: 0.7,
            val_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "labeled_fraction must be in (0, 1], got {}",
                self.labeled_fraction
            )));
        }
        let parts = [self.train_fraction, self.val_fraction, self.test_fraction];
        if parts.iter().any(|&f| f < 0.0) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "train/val/test fractions must be >= 0 and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }
}

/// Samples addressed by their dataset-wide id.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    ids: Vec<u64>,
    sample_shape: Vec<usize>,
    data: Vec<f64>,
}

impl SampleSet {
    fn from_dataset(ds: &Dataset, idx: &[usize]) -> Self {
        let w = ds.inputs.row_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(ds.inputs.row(i));
        }
        Self {
            ids: idx.iter().map(|&i| i as u64).collect(),
            sample_shape: ds.sample_shape().to_vec(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    fn row(&self, i: usize) -> &[f64] {
        let w: usize = self.sample_shape.iter().product();
        &self.data[i * w..(i + 1) * w]
    }

    /// `[idx.len(), ...sample_shape]` tensor of the selected local indices.
    pub fn gather(&self, idx: &[usize]) -> Result<Tensor> {
        if idx.is_empty() {
            return Err(Error::Contract("gather of zero samples".into()));
        }
        let mut data = Vec::new();
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Contract(format!("sample {i} out of range")));
            }
            data.extend_from_slice(self.row(i));
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.sample_shape);
        Tensor::new(shape, data)
    }

    pub fn all(&self) -> Result<Tensor> {
        self.gather(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn concat(&self, other: &SampleSet) -> SampleSet {
        SampleSet {
            ids: self.ids.iter().chain(&other.ids).copied().collect(),
            sample_shape: self.sample_shape.clone(),
            data: self.data.iter().chain(&other.data).copied().collect(),
        }
    }

    fn select(&self, idx: &[usize]) -> SampleSet {
        let mut data = Vec::new();
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        SampleSet {
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            sample_shape: self.sample_shape.clone(),
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub samples: SampleSet,
    pub labels: Labels,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn concat(&self, other: &LabeledSet) -> Result<LabeledSet> {
        Ok(LabeledSet {
            samples: self.samples.concat(&other.samples),
            labels: self.labels.concat(&other.labels)?,
        })
    }
}

/// Unlabeled training samples. Labels are not part of this type; every input
/// read goes through [`UnlabeledSet::gather`], which counts it.
#[derive(Debug)]
pub struct UnlabeledSet {
    samples: SampleSet,
    reads: AtomicUsize,
}

impl Clone for UnlabeledSet {
    fn clone(&self) -> Self {
        Self {
            samples: self.samples.clone(),
            reads: AtomicUsize::new(self.reads()),
        }
    }
}

impl UnlabeledSet {
    pub fn new(samples: SampleSet) -> Self {
        Self {
            samples,
            reads: AtomicUsize::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        self.samples.ids()
    }

    /// Number of sample inputs read so far.
    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn gather(&self, idx: &[usize]) -> Result<Tensor> {
        self.reads.fetch_add(idx.len(), Ordering::Relaxed);
        self.samples.gather(idx)
    }

    /// Attaches labels to a subset, e.g. pseudo-labels from self-training.
    pub fn label_subset(&self, idx: &[usize], labels: Labels) -> LabeledSet {
        self.reads.fetch_add(idx.len(), Ordering::Relaxed);
        LabeledSet {
            samples: self.samples.select(idx),
            labels,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub labeled: LabeledSet,
    pub unlabeled: UnlabeledSet,
    /// Hidden labels of the unlabeled split, for offline analysis only.
    pub unlabeled_truth: Labels,
    pub validation: LabeledSet,
    pub test: LabeledSet,
}

/// Splits into train/validation/test, then the train part into labeled and unlabeled.
pub fn split_labeled(ds: &Dataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let n = ds.len();
    let strata_count = if spec.stratified { ds.num_classes + 1 } else { 1 };
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); strata_count];
    for i in 0..n {
        let s = if spec.stratified { ds.labels.stratum(i) } else { 0 };
        strata[s].push(i);
    }
    for (s, members) in strata.iter_mut().enumerate() {
        members.shuffle(&mut keyed(spec.seed, Stream::Split, &[s as u64]));
    }
    let sizes: Vec<f64> = strata.iter().map(|m| m.len() as f64).collect();
    let n_train = (spec.train_fraction * n as f64).round() as usize;
    let n_val = ((spec.val_fraction * n as f64).round() as usize).min(n - n_train);
    let train_k = apportion(n_train, &sizes);
    let val_k: Vec<usize> = apportion(n_val, &sizes)
        .into_iter()
        .zip(strata.iter().zip(&train_k))
        .map(|(v, (m, &t))| v.min(m.len() - t))
        .collect();

    let n_lab = ((spec.labeled_fraction * n_train as f64).round() as usize).clamp(1, n_train.max(1));
    let train_w: Vec<f64> = train_k.iter().map(|&t| t as f64).collect();
    let lab_k = apportion(n_lab.min(n_train), &train_w);

    let (mut lab, mut unl, mut val, mut test) = (vec![], vec![], vec![], vec![]);
    for (s, members) in strata.iter().enumerate() {
        let (t, v, l) = (train_k[s], val_k[s], lab_k[s]);
        if spec.stratified && s < ds.num_classes && !ds.labels.is_multi() && t > 0 && l == 0 {
            return Err(Error::Split(format!(
                "class {s} has no labeled samples at labeled_fraction {}",
                spec.labeled_fraction
            )));
        }
        lab.extend_from_slice(&members[..l]);
        unl.extend_from_slice(&members[l..t]);
        val.extend_from_slice(&members[t..t + v]);
        test.extend_from_slice(&members[t + v..]);
    }
    if lab.is_empty() {
        return Err(Error::Split("labeled split is empty".into()));
    }
    for part in [&mut lab, &mut unl, &mut val, &mut test] {
        part.sort_unstable();
    }
    let labeled_set = |idx: &[usize]| LabeledSet {
        samples: SampleSet::from_dataset(ds, idx),
        labels: ds.labels.select(idx),
    };
    Ok(Split {
        labeled: labeled_set(&lab),
        unlabeled: UnlabeledSet::new(SampleSet::from_dataset(ds, &unl)),
        unlabeled_truth: ds.labels.select(&unl),
        validation: labeled_set(&val),
        test: labeled_set(&test),
    })
}

/// Labeled/unlabeled composition of one mini-batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
}

impl Default for BatchPlan {
    fn default() -> Self {
        Self {
            n_labeled: 12,
            n_unlabeled: 36,
        }
    }
}

impl BatchPlan {
    pub fn batch_size(&self) -> usize {
        self.n_labeled + self.n_unlabeled
    }
}

/// Local indices into the labeled and unlabeled sets for one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchIndices {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Plans every batch of one epoch.
///
/// The epoch length is set by whichever stream needs more steps. The unlabeled
/// stream is a single shuffled pass; the labeled stream reshuffles and cycles
/// whenever it runs out.
pub fn plan_epoch(
    n_labeled: usize,
    n_unlabeled: usize,
    plan: BatchPlan,
    seed: u64,
    epoch: u64,
) -> Result<Vec<BatchIndices>> {
    if n_labeled == 0 || plan.n_labeled == 0 {
        return Err(Error::Config("labeled split and labeled batch share must be non-empty".into()));
    }
    let lab_steps = n_labeled.div_ceil(plan.n_labeled);
    let unl_steps = if plan.n_unlabeled > 0 {
        n_unlabeled.div_ceil(plan.n_unlabeled)
    } else {
        0
    };
    let steps = lab_steps.max(unl_steps);

    let mut unl_order: Vec<usize> = (0..n_unlabeled).collect();
    unl_order.shuffle(&mut keyed(seed, Stream::Shuffle, &[epoch, 1]));
    let mut lab_order: Vec<usize> = Vec::new();
    let mut cycle = 0u64;
    let mut lab_pos = 0;
    let mut out = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut labeled = Vec::with_capacity(plan.n_labeled);
        while labeled.len() < plan.n_labeled {
            if lab_pos == lab_order.len() {
                lab_order = (0..n_labeled).collect();
                lab_order.shuffle(&mut keyed(seed, Stream::Shuffle, &[epoch, 0, cycle]));
                cycle += 1;
                lab_pos = 0;
            }
            labeled.push(lab_order[lab_pos]);
            lab_pos += 1;
            // a short final batch when the labeled stream alone sets the epoch length
            if lab_steps >= unl_steps && lab_pos == n_labeled && cycle == 1 {
                break;
            }
        }
        let lo = (step * plan.n_unlabeled).min(n_unlabeled);
        let hi = ((step + 1) * plan.n_unlabeled).min(n_unlabeled);
        out.push(BatchIndices {
            labeled,
            unlabeled: unl_order[lo..hi].to_vec(),
        });
    }
    Ok(out)
}

/// A gathered mini-batch: labeled rows first, then unlabeled rows.
#[derive(Debug, Clone)]
pub struct Batch {
    pub labeled_ids: Vec<u64>,
    pub labels: Labels,
    pub unlabeled_ids: Vec<u64>,
    /// `[n_l + n_u, ...]` inputs, labeled rows first.
    pub inputs: Tensor,
}

impl Batch {
    pub fn n_labeled(&self) -> usize {
        self.labeled_ids.len()
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<u64> {
        self.labeled_ids.iter().chain(&self.unlabeled_ids).copied().collect()
    }
}

/// Gathers one planned batch. Unlabeled inputs are read only when `with_unlabeled`.
pub fn sample_batch(
    labeled: &LabeledSet,
    unlabeled: &UnlabeledSet,
    idx: &BatchIndices,
    with_unlabeled: bool,
) -> Result<Batch> {
    let lab_x = labeled.samples.gather(&idx.labeled)?;
    let labels = labeled.labels.select(&idx.labeled);
    let labeled_ids = idx.labeled.iter().map(|&i| labeled.samples.ids()[i]).collect();
    if !with_unlabeled || idx.unlabeled.is_empty() {
        return Ok(Batch {
            labeled_ids,
            labels,
            unlabeled_ids: vec![],
            inputs: lab_x,
        });
    }
    let unl_x = unlabeled.gather(&idx.unlabeled)?;
    Ok(Batch {
        labeled_ids,
        labels,
        unlabeled_ids: idx.unlabeled.iter().map(|&i| unlabeled.ids()[i]).collect(),
        inputs: Tensor::concat_rows(&[&lab_x, &unl_x])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    #[test]
    fn noiseless_moons_lie_on_unit_arcs() {
        let ds = gen_two_moons(200, 0.0, &mut rng(0)).unwrap();
        for i in 0..200 {
            let (x, y) = (ds.inputs.at2(i, 0), ds.inputs.at2(i, 1));
            let (cx, cy) = if i < 100 { (0.0, 0.0) } else { (1.0, 0.5) };
            assert!(((x - cx).hypot(y - cy) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn moons_are_balanced_and_seeded() {
        let a = gen_two_moons(1000, 0.1, &mut rng(4)).unwrap();
        assert_eq!(a.labels.class_counts(2), vec![500, 500]);
        let b = gen_two_moons(1000, 0.1, &mut rng(4)).unwrap();
        assert_eq!(a, b);
        assert!(gen_two_moons(7, 0.1, &mut rng(4)).is_err());
    }

    #[test]
    fn moon_class_means_are_separated() {
        let sd = 0.1;
        let ds = gen_two_moons(2000, sd, &mut rng(2)).unwrap();
        let mean = |lo: usize| {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in lo..lo + 1000 {
                mx += ds.inputs.at2(i, 0);
                my += ds.inputs.at2(i, 1);
            }
            (mx / 1000.0, my / 1000.0)
        };
        let (a, b) = (mean(0), mean(1000));
        assert!((a.0 - b.0).hypot(a.1 - b.1) > 4.0 * sd);
    }

    #[test]
    fn geometric_partition() {
        assert_eq!(geometric_class_counts(70, 3, 2.0), vec![40, 20, 10]);
        assert_eq!(geometric_class_counts(99, 3, 1.0), vec![33, 33, 33]);
    }

    #[test]
    fn blob_counts_follow_imbalance() {
        let cfg = BlobConfig {
            n: 70,
            imbalance_ratio: 2.0,
            ..BlobConfig::default()
        };
        let ds = gen_blob_images(&cfg, &mut rng(1)).unwrap();
        assert_eq!(ds.labels.class_counts(3), vec![40, 20, 10]);
        let even = gen_blob_images(&BlobConfig { n: 90, ..BlobConfig::default() }, &mut rng(1)).unwrap();
        assert_eq!(even.labels.class_counts(3), vec![30, 30, 30]);
    }

    #[test]
    fn noiseless_fixed_blobs_are_identical_within_class() {
        let cfg = BlobConfig {
            n: 30,
            pixel_noise_sd: 0.0,
            position_jitter: false,
            radius_jitter: 0.0,
            intensity_jitter: 0.0,
            ..BlobConfig::default()
        };
        let ds = gen_blob_images(&cfg, &mut rng(1)).unwrap();
        let Labels::Single(labels) = &ds.labels else { unreachable!() };
        for i in 1..30 {
            if labels[i] == labels[i - 1] {
                assert_eq!(ds.inputs.row(i), ds.inputs.row(i - 1));
            } else {
                assert_ne!(ds.inputs.row(i), ds.inputs.row(i - 1));
            }
        }
        assert!(gen_blob_images(&BlobConfig { size: 6, ..cfg }, &mut rng(1)).is_err());
    }

    #[test]
    fn multilabel_blobs_cover_every_type() {
        let ds = gen_multilabel_blobs(20, 10, 0.05, &mut rng(3)).unwrap();
        assert!(ds.labels.is_multi());
        assert!(ds.labels.class_counts(3).iter().all(|&c| c > 0));
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let ds = gen_two_moons(1000, 0.1, &mut rng(0)).unwrap();
        let spec = SplitSpec {
            labeled_fraction: 0.2,
            ..SplitSpec::default()
        };
        let s = split_labeled(&ds, &spec).unwrap();
        assert_eq!(s.labeled.len(), 140);
        assert_eq!(s.labeled.len() + s.unlabeled.len(), 700);
        assert_eq!(s.validation.len(), 100);
        assert_eq!(s.test.len(), 200);
        let counts = s.labeled.labels.class_counts(2);
        assert!(counts[0].abs_diff(counts[1]) <= 1);
        let mut all: Vec<u64> = [s.labeled.samples.ids(), s.unlabeled.ids(), s.validation.samples.ids(), s.test.samples.ids()]
            .concat();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<u64>>());
        assert_eq!(s.unlabeled.reads(), 0);
    }

    #[test]
    fn full_label_fraction_leaves_no_unlabeled() {
        let ds = gen_two_moons(100, 0.1, &mut rng(0)).unwrap();
        let spec = SplitSpec {
            labeled_fraction: 1.0,
            ..SplitSpec::default()
        };
        let s = split_labeled(&ds, &spec).unwrap();
        assert!(s.unlabeled.is_empty());
        assert_eq!(s.labeled.len(), 70);
    }

    #[test]
    fn missing_class_in_labeled_split_is_an_error() {
        let cfg = BlobConfig {
            n: 60,
            imbalance_ratio: 8.0,
            ..BlobConfig::default()
        };
        let ds = gen_blob_images(&cfg, &mut rng(0)).unwrap();
        let spec = SplitSpec {
            labeled_fraction: 0.02,
            ..SplitSpec::default()
        };
        assert!(matches!(split_labeled(&ds, &spec), Err(Error::Split(_))));
    }

    #[test]
    fn epoch_plan_covers_unlabeled_once() {
        let plan = plan_epoch(10, 72, BatchPlan::default(), 3, 0).unwrap();
        assert_eq!(plan.len(), 2);
        assert!(plan.iter().all(|b| b.labeled.len() + b.unlabeled.len() == 48));
        let mut seen: Vec<usize> = plan.iter().flat_map(|b| b.unlabeled.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..72).collect::<Vec<_>>());
        let next = plan_epoch(10, 72, BatchPlan::default(), 3, 1).unwrap();
        assert_ne!(plan, next);
    }

    #[test]
    fn labeled_stream_cycles_without_repeats_inside_a_pass() {
        let plan = plan_epoch(10, 100, BatchPlan { n_labeled: 4, n_unlabeled: 20 }, 1, 0).unwrap();
        let lab: Vec<usize> = plan.iter().flat_map(|b| b.labeled.clone()).collect();
        assert_eq!(lab.len(), 20);
        let mut first: Vec<usize> = lab[..10].to_vec();
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn supervised_only_plan() {
        let plan = plan_epoch(25, 0, BatchPlan { n_labeled: 10, n_unlabeled: 0 }, 1, 0).unwrap();
        assert_eq!(plan.len(), 3);
        assert!(plan.iter().all(|b| b.unlabeled.is_empty()));
        let total: usize = plan.iter().map(|b| b.labeled.len()).sum();
        assert_eq!(total, 25);
    }

    #[test]
    fn dataset_bytes_round_trip() {
        let ds = gen_blob_images(&BlobConfig { n: 12, size: 8, ..BlobConfig::default() }, &mut rng(1)).unwrap();
        let bytes = ds.to_bytes();
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), ds);
        let ml = gen_multilabel_blobs(6, 8, 0.1, &mut rng(2)).unwrap();
        assert_eq!(Dataset::from_bytes(&ml.to_bytes()).unwrap(), ml);
        let mut bad = bytes.clone();
        bad[1] = 0;
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(Dataset::from_bytes(&[]), Err(Error::Format { .. })));
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn csv_import() {
        let ds = parse_csv("0.5,1.0,0\n-0.5,2.0,1\n1.5,0.0,1\n").unwrap();
        assert_eq!(ds.inputs.shape(), &[3, 2]);
        assert_eq!(ds.labels, Labels::Single(vec![0, 1, 1]));
        assert!(parse_csv("1,2,0\n1,0\n").is_err());
        assert!(parse_csv("").is_err());
    }

    #[test]
    fn apportion_is_exact() {
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(apportion(7, &[0.0, 2.0]), vec![0, 7]);
    }
}
