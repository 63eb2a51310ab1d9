//! Fixtures and reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scida_core::config::{DataSpec, Mode, RunConfig};
use scida_core::datasets::{Dataset, Domain, DomainShift, ImageSample, LabelVector, SynthConfig};
use scida_core::dwc::DwcSettings;
use scida_core::losses::FocalParams;
use scida_core::models::ModelConfig;
use scida_core::nn::Sgd;

pub const EPS: f64 = 1e-7;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small enough for thousands of forward passes per second.
pub fn tiny_model(k: usize) -> ModelConfig {
    ModelConfig {
        num_classes: k,
        side: 16,
        input_pool: 1,
        channels: [3, 4, 4, 6],
        feature_dim: 8,
        head_hidden: 8,
        embed_dim: 4,
        gcn_hidden: 8,
    }
}

pub fn tiny_synth(k: usize) -> SynthConfig {
    SynthConfig {
        num_classes: k,
        source_per_class: 6,
        target_count: 16,
        max_labels: 3.min(k),
        side: 16,
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

/// A seconds-scale run on the synthetic pair.
pub fn tiny_run(mode: Mode, seed: u64) -> RunConfig {
    RunConfig {
        data: DataSpec::Synthetic {
            config: tiny_synth(4),
            seed,
        },
        mode,
        num_classes: 4,
        side: 16,
        feature_dim: 8,
        embed_dim: 4,
        input_pool: 1,
        channels: [3, 4, 4, 6],
        head_hidden: 8,
        delta: 0.5,
        max_epochs: 4,
        warmup_epochs: 1,
        seed,
        ..RunConfig::default()
    }
}

pub fn settings(k: usize, lr: f64) -> DwcSettings {
    DwcSettings {
        focal: FocalParams {
            alpha: 0.25,
            gamma: 2.0,
            class_weights: vec![1.0 / k as f64; k],
        },
        discrepancy_weight: 1.0,
        n_inner: 4,
        sgd: Sgd {
            lr,
            momentum: 0.9,
            weight_decay: 1e-4,
        },
    }
}

/// Source images of two classes separable by mean brightness.
pub fn separable_source(n_per_class: usize, side: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let mut samples = Vec::new();
    for c in 0..2 {
        for i in 0..n_per_class {
            let base = if c == 0 { 0.2 } else { 0.8 };
            let pixels = Array3::from_shape_fn((side, side, 3), |_| (base + r.random_range(-0.1..0.1)) as f32);
            samples.push(ImageSample {
                id: format!("s{c}_{i}"),
                pixels,
                label: Some(LabelVector::single(2, c).unwrap()),
                domain: Domain::Source,
            });
        }
    }
    Dataset {
        categories: vec!["a".into(), "b".into()],
        domain: Domain::Source,
        samples,
    }
}

/// Unlabeled target images with random pixels.
pub fn noise_target(n: usize, k: usize, side: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let samples = (0..n)
        .map(|i| ImageSample {
            id: format!("t{i:03}"),
            pixels: Array3::from_shape_fn((side, side, 3), |_| r.random::<f32>()),
            label: None,
            domain: Domain::Target,
        })
        .collect();
    Dataset {
        categories: (0..k).map(|c| format!("c{c}")).collect(),
        domain: Domain::Target,
        samples,
    }
}

pub fn random_probs(r: &mut ChaCha8Rng, b: usize, k: usize) -> Array2<f64> {
    Array2::from_shape_fn((b, k), |_| r.random_range(0.01..0.99))
}

pub fn random_binary(r: &mut ChaCha8Rng, b: usize, k: usize) -> Array2<f64> {
    Array2::from_shape_fn((b, k), |_| if r.random_bool(0.5) { 1.0 } else { 0.0 })
}

pub fn clamp(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// Focal loss written straight from its defining sum, one term at a time.
pub fn wfl_oracle(p: &Array2<f64>, y: &Array2<f64>, alpha: f64, gamma: f64, w: &[f64]) -> f64 {
    let mut total = 0.0;
    for b in 0..p.nrows() {
        let mut l = 0.0;
        for i in 0..p.ncols() {
            let pi = clamp(p[[b, i]]);
            let yi = y[[b, i]];
            let pos = alpha * yi * (1.0 - pi).powf(gamma) * pi.ln();
            let neg = (1.0 - alpha) * (1.0 - yi) * pi.powf(gamma) * (1.0 - pi).ln();
            l -= w[i] * (pos + neg);
        }
        total += l;
    }
    total / p.nrows() as f64
}

pub fn bce_oracle(p: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (pi, yi) in p.iter().zip(y.iter()) {
        let pi = clamp(*pi);
        total -= yi * pi.ln() + (1.0 - yi) * (1.0 - pi).ln();
    }
    total / p.len() as f64
}

/// Central finite difference of `f` at every entry of `x`.
pub fn numeric_grad(x: &Array2<f64>, h: f64, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let mut plus = x.clone();
        plus[[r, c]] += h;
        let mut minus = x.clone();
        minus[[r, c]] -= h;
        g[[r, c]] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    g
}

/// Relative closeness with an absolute floor for near-zero gradients.
pub fn grad_close(analytic: f64, numeric: f64, rel: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale <= rel
}

/// Brute-force co-occurrence count and row normalization.
pub fn correlation_oracle(labels: &[Vec<bool>], k: usize) -> (Vec<Vec<u64>>, Vec<Vec<f64>>) {
    let mut counts = vec![vec![0u64; k]; k];
    for l in labels {
        for i in 0..k {
            for j in 0..k {
                if l[i] && l[j] {
                    counts[i][j] += 1;
                }
            }
        }
    }
    let norm = counts
        .iter()
        .map(|row| {
            let s: u64 = row.iter().sum();
            row.iter().map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 }).collect()
        })
        .collect();
    (counts, norm)
}

/// TP/PP/AP over a full confusion table, computed cell by cell.
pub fn confusion_oracle(p: &Array2<f64>, truths: &[Vec<bool>], threshold: f64) -> (usize, usize, usize) {
    let (mut tp, mut pp, mut ap) = (0, 0, 0);
    for (b, t) in truths.iter().enumerate() {
        for (i, &actual) in t.iter().enumerate() {
            let pred = p[[b, i]] >= threshold;
            tp += (pred && actual) as usize;
            pp += pred as usize;
            ap += actual as usize;
        }
    }
    (tp, pp, ap)
}
