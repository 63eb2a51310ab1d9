//! Source/target image sets: the synthetic compositing generator, the MAI
//! directory loader/writer, class-frequency statistics and batch assembly.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::Path;

use image::{imageops::FilterType, ImageReader, Rgb, RgbImage};
use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, ScidaError};

/// Multi-hot label assignment over K classes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct LabelVector {
    values: Vec<u8>,
}

impl LabelVector {
    pub fn from_values(values: Vec<u8>) -> Result<Self> {
        if values.is_empty() {
            return Err(ScidaError::Config("label vector needs K >= 1".into()));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(ScidaError::Contract(format!("label entry {v} is not 0 or 1")));
        }
        Ok(Self { values })
    }

    pub fn from_indices(k: usize, indices: &[usize]) -> Result<Self> {
        let mut values = vec![0u8; k];
        for &i in indices {
            if i >= k {
                return Err(ScidaError::Shape(format!("class index {i} out of range for K={k}")));
            }
            values[i] = 1;
        }
        Self::from_values(values)
    }

    pub fn single(k: usize, class: usize) -> Result<Self> {
        Self::from_indices(k, &[class])
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn contains(&self, class: usize) -> bool {
        self.values.get(class) == Some(&1)
    }

    pub fn positives(&self) -> Vec<usize> {
        (0..self.k()).filter(|&i| self.values[i] == 1).collect()
    }

    pub fn num_positive(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    pub fn is_single(&self) -> bool {
        self.num_positive() == 1
    }
}

impl TryFrom<Vec<u8>> for LabelVector {
    type Error = ScidaError;
    fn try_from(v: Vec<u8>) -> Result<Self> {
        Self::from_values(v)
    }
}

impl From<LabelVector> for Vec<u8> {
    fn from(l: LabelVector) -> Self {
        l.values
    }
}

/// Stacks label vectors into an `N x K` matrix of 0/1 values.
pub fn label_matrix<T: crate::nn::Scalar>(labels: &[&LabelVector], k: usize) -> Array2<T> {
    let mut m = Array2::zeros((labels.len(), k));
    for (mut row, l) in m.rows_mut().into_iter().zip(labels) {
        for (dst, &v) in row.iter_mut().zip(l.values()) {
            *dst = T::of(v as f64);
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// H x W x 3, values in [0, 1].
    pub pixels: Array3<f32>,
    pub label: Option<LabelVector>,
    pub domain: Domain,
}

/// An immutable set of images over a fixed, sorted category list.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub categories: Vec<String>,
    pub domain: Domain,
    pub samples: Vec<ImageSample>,
}

/// Ground-truth target labels held apart from the images the trainer sees.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalLabels {
    pub categories: Vec<String>,
    pub ids: Vec<String>,
    pub labels: Vec<LabelVector>,
}

impl EvalLabels {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.label.is_some())
    }

    pub fn side(&self) -> Option<usize> {
        self.samples.first().map(|s| s.pixels.dim().0)
    }

    /// Splits into an unlabeled copy for training and the held-out labels.
    pub fn split_labels(mut self) -> Result<(Dataset, EvalLabels)> {
        let mut ids = Vec::with_capacity(self.samples.len());
        let mut labels = Vec::with_capacity(self.samples.len());
        for s in &mut self.samples {
            let l = s
                .label
                .take()
                .ok_or_else(|| ScidaError::Load(format!("sample '{}' has no label", s.id)))?;
            ids.push(s.id.clone());
            labels.push(l);
        }
        let eval = EvalLabels {
            categories: self.categories.clone(),
            ids,
            labels,
        };
        Ok((self, eval))
    }

    /// `N x H x W x 3` tensor of the selected images.
    pub fn images(&self, indices: &[usize]) -> Array4<f32> {
        let (h, w, c) = self.samples[indices[0]].pixels.dim();
        let mut out = Array4::zeros((indices.len(), h, w, c));
        for (mut dst, &i) in out.outer_iter_mut().zip(indices) {
            dst.assign(&self.samples[i].pixels);
        }
        out
    }

    /// Mean number of positive labels per labeled image.
    pub fn mean_labels_per_image(&self) -> f64 {
        let labeled: Vec<_> = self.samples.iter().filter_map(|s| s.label.as_ref()).collect();
        if labeled.is_empty() {
            return 0.0;
        }
        labeled.iter().map(|l| l.num_positive()).sum::<usize>() as f64 / labeled.len() as f64
    }

    /// SHA-256 over categories, ids, labels and pixel bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.categories {
            h.update(c.as_bytes());
            h.update([0]);
        }
        for s in &self.samples {
            h.update(s.id.as_bytes());
            h.update([0]);
            match &s.label {
                Some(l) => h.update(l.values()),
                None => h.update([2]),
            }
            for v in s.pixels.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Proportion of positive annotations per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFrequency {
    pub proportions: Vec<f64>,
}

impl ClassFrequency {
    pub fn from_labels<'a>(k: usize, labels: impl IntoIterator<Item = &'a LabelVector>) -> Result<Self> {
        let mut counts = vec![0usize; k];
        let mut seen = false;
        for l in labels {
            if l.k() != k {
                return Err(ScidaError::Shape(format!("label of width {} in a K={k} set", l.k())));
            }
            seen = true;
            for i in l.positives() {
                counts[i] += 1;
            }
        }
        if !seen {
            return Err(ScidaError::Empty("class frequencies of an empty label set".into()));
        }
        let missing: Vec<usize> = (0..k).filter(|&i| counts[i] == 0).collect();
        if !missing.is_empty() {
            return Err(ScidaError::Empty(format!("classes without any positive sample: {missing:?}")));
        }
        let total: usize = counts.iter().sum();
        Ok(Self {
            proportions: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.proportions.len()
    }
}

pub fn class_frequencies(dataset: &Dataset) -> Result<ClassFrequency> {
    if dataset.is_empty() {
        return Err(ScidaError::Empty("class frequencies of an empty dataset".into()));
    }
    let labels = dataset
        .samples
        .iter()
        .map(|s| {
            s.label
                .as_ref()
                .ok_or_else(|| ScidaError::Contract(format!("sample '{}' is unlabeled", s.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    ClassFrequency::from_labels(dataset.num_classes(), labels)
}

/// Paired source/target minibatch. Target ground truth is never carried.
#[derive(Debug, Clone)]
pub struct DomainBatch {
    pub source_images: Array4<f32>,
    /// One label per source image; empty for an unlabeled batch.
    pub source_labels: Vec<LabelVector>,
    pub target_images: Array4<f32>,
    pub target_ids: Vec<String>,
    /// Positions of the target images in their dataset.
    pub target_indices: Vec<usize>,
}

impl DomainBatch {
    pub fn assemble(source: &Dataset, source_idx: &[usize], target: &Dataset, target_idx: &[usize]) -> Result<Self> {
        if source_idx.len() != target_idx.len() {
            return Err(ScidaError::Contract(format!(
                "source and target sub-batches differ in size ({} vs {})",
                source_idx.len(),
                target_idx.len()
            )));
        }
        if let Some(s) = target_idx.iter().map(|&i| &target.samples[i]).find(|s| s.label.is_some()) {
            return Err(ScidaError::Contract(format!(
                "target sample '{}' carries a label inside a training batch",
                s.id
            )));
        }
        let source_labels = source_idx
            .iter()
            .map(|&i| {
                source.samples[i]
                    .label
                    .clone()
                    .ok_or_else(|| ScidaError::Contract(format!("source sample '{}' is unlabeled", source.samples[i].id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            source_images: source.images(source_idx),
            source_labels,
            target_images: target.images(target_idx),
            target_ids: target_idx.iter().map(|&i| target.samples[i].id.clone()).collect(),
            target_indices: target_idx.to_vec(),
        })
    }

    /// Target images only, for the self-correction pass.
    pub fn target_only(target: &Dataset, target_idx: &[usize]) -> Result<Self> {
        if let Some(s) = target_idx.iter().map(|&i| &target.samples[i]).find(|s| s.label.is_some()) {
            return Err(ScidaError::Contract(format!(
                "target sample '{}' carries a label inside a training batch",
                s.id
            )));
        }
        let (h, w, c) = target.samples[target_idx[0]].pixels.dim();
        Ok(Self {
            source_images: Array4::zeros((0, h, w, c)),
            source_labels: Vec::new(),
            target_images: target.images(target_idx),
            target_ids: target_idx.iter().map(|&i| target.samples[i].id.clone()).collect(),
            target_indices: target_idx.to_vec(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.source_images.len_of(Axis(0)).max(self.target_images.len_of(Axis(0)))
    }

    pub fn has_source(&self) -> bool {
        self.source_images.len_of(Axis(0)) > 0
    }

    pub fn has_target(&self) -> bool {
        self.target_images.len_of(Axis(0)) > 0
    }
}

/// Index pairs for one epoch: `ceil(n_source / batch)` batches, source drawn
/// from a permutation (wrapping to fill the last batch) and the target
/// permutation cycled. A pure function of `(seed, epoch)`.
pub fn epoch_batches(
    seed: u64,
    epoch: usize,
    n_source: usize,
    n_target: usize,
    batch: usize,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    assert!(n_source > 0 && n_target > 0 && batch > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut src: Vec<usize> = (0..n_source).collect();
    src.shuffle(&mut rng);
    let mut tgt: Vec<usize> = (0..n_target).collect();
    tgt.shuffle(&mut rng);
    let n_batches = n_source.div_ceil(batch);
    (0..n_batches)
        .map(|b| {
            let s = (0..batch).map(|j| src[(b * batch + j) % n_source]).collect();
            let t = (0..batch).map(|j| tgt[(b * batch + j) % n_target]).collect();
            (s, t)
        })
        .collect()
}

/// Photometric and geometric difference applied to target images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    /// Per-channel gain is drawn from `1 +- color_jitter`, offset from `+- color_jitter / 2`.
    pub color_jitter: f64,
    /// Box blur radius in pixels (0 disables).
    pub blur_radius: usize,
    /// Texture frequency multiplier for target tiles.
    pub downscale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub source_per_class: usize,
    pub target_count: usize,
    /// Maximum labels per target image (M).
    pub max_labels: usize,
    pub side: usize,
    pub shift: DomainShift,
    /// Standard deviation of Gaussian pixel noise on source images.
    pub source_noise: f64,
    /// K x K non-negative pairwise affinities driving target co-occurrence.
    /// `None` pairs classes (2i, 2i+1) strongly.
    pub affinity: Option<Vec<Vec<f64>>>,
    /// Classes that always appear together in target images.
    pub forced_pairs: Vec<(usize, usize)>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            source_per_class: 100,
            target_count: 400,
            max_labels: 4,
            side: 64,
            shift: DomainShift {
                color_jitter: 0.25,
                blur_radius: 1,
                downscale: 1.5,
            },
            source_noise: 0.03,
            affinity: None,
            forced_pairs: Vec::new(),
        }
    }
}

pub const PAIRED_AFFINITY: f64 = 4.0;
pub const BACKGROUND_AFFINITY: f64 = 0.3;

/// Default affinity table: classes 2i and 2i+1 attract strongly, all other
/// pairs weakly.
pub fn paired_affinity(k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    if i == j {
                        0.0
                    } else if i / 2 == j / 2 {
                        PAIRED_AFFINITY
                    } else {
                        BACKGROUND_AFFINITY
                    }
                })
                .collect()
        })
        .collect()
}

impl SynthConfig {
    pub fn affinity_table(&self) -> Vec<Vec<f64>> {
        self.affinity
            .clone()
            .unwrap_or_else(|| paired_affinity(self.num_classes))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(ScidaError::Config(m));
        let k = self.num_classes;
        if k < 3 {
            return cfg(format!("synthetic data needs K >= 3 classes, got {k}"));
        }
        if self.source_per_class == 0 || self.target_count == 0 {
            return cfg("source_per_class and target_count must be positive".into());
        }
        if self.max_labels == 0 || self.max_labels > k {
            return cfg(format!("max_labels must be in 1..={k}, got {}", self.max_labels));
        }
        let g = grid_size(self.max_labels);
        if self.side < 4 * g {
            return cfg(format!("side {} too small for a {g}x{g} tile grid", self.side));
        }
        if !(self.shift.downscale > 0.0) || !(self.shift.color_jitter >= 0.0) || !(self.source_noise >= 0.0) {
            return cfg("domain shift and noise parameters must be non-negative (downscale > 0)".into());
        }
        if let Some(a) = &self.affinity {
            if a.len() != k || a.iter().any(|r| r.len() != k) {
                return cfg(format!("affinity table must be {k} x {k}"));
            }
            if a.iter().flatten().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return cfg("affinities must be finite and non-negative".into());
            }
        }
        if let Some(&(a, b)) = self.forced_pairs.iter().find(|&&(a, b)| a >= k || b >= k) {
            return cfg(format!("forced pair ({a}, {b}) out of range for K={k}"));
        }
        if let Some(c) = forced_components(k, &self.forced_pairs)
            .iter()
            .find(|c| c.len() > self.max_labels)
        {
            return cfg(format!(
                "forced group {c:?} has more than max_labels = {} classes",
                self.max_labels
            ));
        }
        Ok(())
    }
}

fn grid_size(max_labels: usize) -> usize {
    (max_labels as f64).sqrt().ceil() as usize
}

/// Connected components of the forced-pair graph, one per class.
fn forced_components(k: usize, pairs: &[(usize, usize)]) -> Vec<BTreeSet<usize>> {
    let mut comp: Vec<BTreeSet<usize>> = (0..k).map(|i| BTreeSet::from([i])).collect();
    let mut changed = true;
    while changed {
        changed = false;
        for &(a, b) in pairs {
            if comp[a] != comp[b] {
                let merged: BTreeSet<usize> = comp[a].union(&comp[b]).copied().collect();
                for &m in &merged {
                    comp[m] = merged.clone();
                }
                changed = true;
            }
        }
    }
    comp
}

/// Samples the label set of one target image.
fn sample_label_set(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    affinity: &[Vec<f64>],
    comps: &[BTreeSet<usize>],
) -> Vec<usize> {
    let k = cfg.num_classes;
    let n = rng.random_range(1..=cfg.max_labels);
    let mut set: BTreeSet<usize> = comps[rng.random_range(0..k)].clone();
    while set.len() < n {
        let candidates: Vec<usize> = (0..k)
            .filter(|j| !set.contains(j) && set.len() + comps[*j].difference(&set).count() <= cfg.max_labels)
            .collect();
        if candidates.is_empty() {
            break;
        }
        let weights: Vec<f64> = candidates
            .iter()
            .map(|&j| set.iter().map(|&i| affinity[i][j]).sum())
            .collect();
        let pick = match WeightedIndex::new(&weights) {
            Ok(w) => candidates[w.sample(rng)],
            Err(_) => candidates[rng.random_range(0..candidates.len())],
        };
        set.extend(comps[pick].iter().copied());
    }
    set.into_iter().collect()
}

pub fn class_name(c: usize) -> String {
    format!("class_{c:02}")
}

fn palette(c: usize, k: usize) -> [f64; 3] {
    let t = c as f64 / k as f64;
    [0.0, 1.0 / 3.0, 2.0 / 3.0].map(|o| 0.5 + 0.5 * (2.0 * PI * (t + o)).cos())
}

/// Writes class `c`'s texture into `img[y0..y1, x0..x1]`.
fn render_tile(img: &mut Array3<f64>, (y0, y1): (usize, usize), (x0, x1): (usize, usize), c: usize, k: usize, freq_scale: f64, phase: f64) {
    let rgb = palette(c, k);
    let theta = PI * ((3 * c) % k) as f64 / k as f64;
    let freq = (2 + c % 3) as f64 / 16.0 * freq_scale;
    let (ct, st) = (theta.cos(), theta.sin());
    for y in y0..y1 {
        for x in x0..x1 {
            let u = (x - x0) as f64 * ct + (y - y0) as f64 * st;
            let stripe = 0.5 + 0.5 * (2.0 * PI * freq * u + phase).sin();
            for ch in 0..3 {
                img[[y, x, ch]] = rgb[ch] * (0.4 + 0.6 * stripe);
            }
        }
    }
}

/// Marker color of class `c`: full red, no green, blue encodes `c + 1`.
pub fn marker_rgb(c: usize) -> [u8; 3] {
    [255, 0, (c + 1) as u8]
}

fn stamp_marker(img: &mut Array3<f64>, y: usize, x: usize, c: usize) {
    for (ch, v) in marker_rgb(c).iter().enumerate() {
        img[[y, x, ch]] = *v as f64 / 255.0;
    }
}

fn box_blur(img: &Array3<f64>, r: usize) -> Array3<f64> {
    if r == 0 {
        return img.clone();
    }
    let (h, w, c) = img.dim();
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            let ys = y.saturating_sub(r)..(y + r + 1).min(h);
            let xs = x.saturating_sub(r)..(x + r + 1).min(w);
            let n = (ys.len() * xs.len()) as f64;
            let window = img.slice(s![ys, xs, ..]);
            for ch in 0..c {
                out[[y, x, ch]] = window.slice(s![.., .., ch]).sum() / n;
            }
        }
    }
    out
}

/// Clamps to [0.01, 0.99] and quantizes to 8-bit levels so that writing and
/// reloading the dataset is lossless and no texture pixel can look like a marker.
fn finish(img: Array3<f64>) -> Array3<f64> {
    img.mapv(|v| (v.clamp(0.01, 0.99) * 255.0).round() / 255.0)
}

/// Source dataset (single-label, labeled) and target dataset (multi-label,
/// labels still attached; split them off with [`Dataset::split_labels`]).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub source: Dataset,
    pub target: Dataset,
}

pub fn generate_synthetic_pair(config: &SynthConfig, seed: u64) -> Result<SyntheticPair> {
    config.validate()?;
    let k = config.num_classes;
    let side = config.side;
    let categories: Vec<String> = (0..k).map(class_name).collect();
    let noise = Normal::new(0.0, config.source_noise.max(0.0)).map_err(|e| ScidaError::Config(e.to_string()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut source = Vec::with_capacity(k * config.source_per_class);
    for c in 0..k {
        for j in 0..config.source_per_class {
            let mut img = Array3::zeros((side, side, 3));
            let phase = rng.random_range(0.0..2.0 * PI);
            render_tile(&mut img, (0, side), (0, side), c, k, 1.0, phase);
            if config.source_noise > 0.0 {
                img.mapv_inplace(|v| v + noise.sample(&mut rng));
            }
            let mut img = finish(img);
            stamp_marker(&mut img, 0, 0, c);
            source.push(ImageSample {
                id: format!("s{c:02}_{j:05}"),
                pixels: img.mapv(|v| v as f32),
                label: Some(LabelVector::single(k, c)?),
                domain: Domain::Source,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let affinity = config.affinity_table();
    let comps = forced_components(k, &config.forced_pairs);
    let g = grid_size(config.max_labels);
    let bounds = |i: usize| (i * side / g, (i + 1) * side / g);
    let mut target = Vec::with_capacity(config.target_count);
    for t in 0..config.target_count {
        let labels = sample_label_set(&mut rng, config, &affinity, &comps);
        let mut cells: Vec<usize> = labels.clone();
        while cells.len() < g * g {
            cells.push(labels[rng.random_range(0..labels.len())]);
        }
        cells.shuffle(&mut rng);
        let mut img = Array3::zeros((side, side, 3));
        for (cell, &c) in cells.iter().enumerate() {
            let phase = rng.random_range(0.0..2.0 * PI);
            render_tile(&mut img, bounds(cell / g), bounds(cell % g), c, k, config.shift.downscale, phase);
        }
        let j = config.shift.color_jitter;
        for ch in 0..3 {
            let gain = 1.0 + rng.random_range(-1.0..=1.0) * j;
            let offset = rng.random_range(-1.0..=1.0) * j / 2.0;
            img.slice_mut(s![.., .., ch]).mapv_inplace(|v| v * gain + offset);
        }
        let mut img = finish(box_blur(&img, config.shift.blur_radius));
        for (cell, &c) in cells.iter().enumerate() {
            stamp_marker(&mut img, bounds(cell / g).0, bounds(cell % g).0, c);
        }
        target.push(ImageSample {
            id: format!("t{t:05}"),
            pixels: img.mapv(|v| v as f32),
            label: Some(LabelVector::from_indices(k, &labels)?),
            domain: Domain::Target,
        });
    }

    Ok(SyntheticPair {
        source: Dataset {
            categories: categories.clone(),
            domain: Domain::Source,
            samples: source,
        },
        target: Dataset {
            categories,
            domain: Domain::Target,
            samples: target,
        },
    })
}

/// Classes whose marker color appears anywhere in the image.
pub fn recover_marker_classes(pixels: &Array3<f32>, k: usize) -> Vec<usize> {
    let mut found = BTreeSet::new();
    for px in pixels.lanes(Axis(2)) {
        let q = |v: f32| (v * 255.0).round() as i32;
        if q(px[0]) == 255 && q(px[1]) == 0 {
            let c = q(px[2]) - 1;
            if (0..k as i32).contains(&c) {
                found.insert(c as usize);
            }
        }
    }
    found.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    /// Every sample must carry exactly one label.
    Single,
    /// Every sample must carry at least one label.
    Multi,
    /// Labels are validated but dropped; the result carries none.
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub num_images: usize,
    pub num_categories: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub id: String,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub categories: Vec<String>,
    pub samples: Vec<AnnotationEntry>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| ScidaError::io(path, e))?;
    if text.trim().is_empty() {
        return Err(ScidaError::Load(format!("{} is empty", path.display())));
    }
    serde_json::from_str(&text).map_err(|e| ScidaError::Load(format!("{}: {e}", path.display())))
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    read_json(&root.join("manifest.json"))
}

pub fn read_annotations(root: &Path) -> Result<Annotations> {
    let path = root.join("annotations.json");
    if !path.exists() {
        return Err(ScidaError::Load(format!("missing annotation file {}", path.display())));
    }
    let ann: Annotations = read_json(&path)?;
    if ann.samples.is_empty() {
        return Err(ScidaError::Load(format!("{} lists no samples", path.display())));
    }
    Ok(ann)
}

fn load_image(root: &Path, id: &str, side: usize) -> Result<Array3<f32>> {
    let path = ["png", "jpg", "jpeg"]
        .iter()
        .map(|ext| root.join("images").join(format!("{id}.{ext}")))
        .find(|p| p.exists())
        .ok_or_else(|| ScidaError::Load(format!("image file for sample '{id}' not found")))?;
    let img = ImageReader::open(&path)
        .map_err(|e| ScidaError::io(&path, e))?
        .decode()
        .map_err(|e| ScidaError::Load(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let img = if img.width() as usize != side || img.height() as usize != side {
        image::imageops::resize(&img, side as u32, side as u32, FilterType::Triangle)
    } else {
        img
    };
    Ok(Array3::from_shape_fn((side, side, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

/// Loads `<root>/images`, `<root>/annotations.json` and `<root>/manifest.json`,
/// resizing images to `side`. Classes are ordered by sorted category name.
pub fn load_mai(root: &Path, split: Split, side: usize) -> Result<Dataset> {
    let ann = read_annotations(root)?;
    let manifest = read_manifest(root)?;
    let mut categories = ann.categories.clone();
    categories.sort();
    categories.dedup();
    if categories.len() != ann.categories.len() {
        return Err(ScidaError::Load("duplicate category names in annotations".into()));
    }
    if manifest.num_images != ann.samples.len() || manifest.num_categories != categories.len() {
        return Err(ScidaError::Load(format!(
            "manifest says {} images / {} categories, annotations have {} / {}",
            manifest.num_images,
            manifest.num_categories,
            ann.samples.len(),
            categories.len()
        )));
    }
    let index: BTreeMap<&str, usize> = categories.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let k = categories.len();
    let domain = if split == Split::Single { Domain::Source } else { Domain::Target };
    let mut samples = Vec::with_capacity(ann.samples.len());
    for entry in &ann.samples {
        let idx = entry
            .labels
            .iter()
            .map(|name| {
                index
                    .get(name.as_str())
                    .copied()
                    .ok_or_else(|| ScidaError::Load(format!("sample '{}' has unknown category '{name}'", entry.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let label = LabelVector::from_indices(k, &idx)?;
        match split {
            Split::Single if label.num_positive() != 1 => {
                return Err(ScidaError::Load(format!(
                    "sample '{}' has {} labels in a single-label split",
                    entry.id,
                    label.num_positive()
                )))
            }
            Split::Multi | Split::Unlabeled if label.num_positive() == 0 => {
                return Err(ScidaError::Load(format!("sample '{}' has no labels", entry.id)))
            }
            _ => {}
        }
        samples.push(ImageSample {
            id: entry.id.clone(),
            pixels: load_image(root, &entry.id, side)?,
            label: (split != Split::Unlabeled).then_some(label),
            domain,
        });
    }
    Ok(Dataset {
        categories,
        domain,
        samples,
    })
}

/// Writes a labeled dataset in the MAI layout (PNG images).
pub fn write_mai(dataset: &Dataset, root: &Path) -> Result<()> {
    let images = root.join("images");
    std::fs::create_dir_all(&images).map_err(|e| ScidaError::io(&images, e))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let (h, w, _) = s.pixels.dim();
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = |c: usize| (s.pixels[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([p(0), p(1), p(2)])
        });
        let path = images.join(format!("{}.png", s.id));
        img.save(&path)?;
        let label = s
            .label
            .as_ref()
            .ok_or_else(|| ScidaError::Contract(format!("cannot write unlabeled sample '{}'", s.id)))?;
        entries.push(AnnotationEntry {
            id: s.id.clone(),
            labels: label.positives().iter().map(|&i| dataset.categories[i].clone()).collect(),
        });
    }
    let ann = Annotations {
        categories: dataset.categories.clone(),
        samples: entries,
    };
    let manifest = Manifest {
        num_images: dataset.len(),
        num_categories: dataset.num_classes(),
    };
    write_json(&root.join("annotations.json"), &ann)?;
    write_json(&root.join("manifest.json"), &manifest)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| ScidaError::io(path, e))
}
