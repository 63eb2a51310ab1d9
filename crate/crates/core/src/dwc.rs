//! Domain-wise branch: source supervision, the two adversarial discrepancy
//! steps, and pseudo-label extraction from C2.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::datasets::{label_matrix, Dataset, DomainBatch, LabelVector};
use crate::error::{Result, ScidaError};
use crate::losses::{discrepancy_loss_grad, weighted_focal_loss_grad, FocalParams};
use crate::metrics::top_n;
use crate::models::{ModelState, ParamGroup};
use crate::nn::{sigmoid, sigmoid_backward, Scalar, Sgd};

/// Hyperparameters shared by the three DWC steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DwcSettings {
    pub focal: FocalParams,
    /// Weight of the discrepancy term in both adversarial steps.
    pub discrepancy_weight: f64,
    pub n_inner: usize,
    pub sgd: Sgd,
}

pub(crate) fn to_scalar<T: Scalar>(x: &Array4<f32>) -> Array4<T> {
    x.mapv(|v| T::of(v as f64))
}

fn require_source(batch: &DomainBatch) -> Result<()> {
    if !batch.has_source() {
        return Err(ScidaError::Contract("batch has no source images".into()));
    }
    if batch.source_labels.len() != batch.batch_size() {
        return Err(ScidaError::Contract("source images in the batch are unlabeled".into()));
    }
    Ok(())
}

fn require_target(batch: &DomainBatch) -> Result<()> {
    if !batch.has_target() {
        return Err(ScidaError::Contract("batch has no target images".into()));
    }
    Ok(())
}

fn step_groups<T: Scalar>(state: &mut ModelState<T>, sgd: &Sgd, groups: &[ParamGroup]) {
    for &g in groups {
        sgd.step(state.group_mut(g));
    }
}

/// Source wFL summed over both heads, with the gradient of each head's
/// parameters accumulated and the feature gradient returned.
fn source_focal<T: Scalar>(
    state: &mut ModelState<T>,
    features: &Array2<T>,
    labels: &Array2<T>,
    focal: &FocalParams,
) -> Result<(f64, Array2<T>)> {
    let mut total = 0.0;
    let mut dfeat = Array2::zeros(features.dim());
    for head in [&mut state.c1, &mut state.c2] {
        let (logits, tape) = head.forward(features)?;
        let p = sigmoid(&logits);
        let (loss, dp) = weighted_focal_loss_grad(&p, labels, focal)?;
        total += loss.as_f64();
        dfeat += &head.backward(&tape, &sigmoid_backward(&p, &dp));
    }
    Ok((total, dfeat))
}

fn source_labels<T: Scalar>(batch: &DomainBatch, k: usize) -> Array2<T> {
    let refs: Vec<&LabelVector> = batch.source_labels.iter().collect();
    label_matrix(&refs, k)
}

/// Minimizes the source wFL of C1 and C2 over G_cm, C1 and C2.
pub fn step_source_supervised<T: Scalar>(state: &mut ModelState<T>, batch: &DomainBatch, settings: &DwcSettings) -> Result<f64> {
    require_source(batch)?;
    state.zero_grad_all();
    let x = to_scalar::<T>(&batch.source_images);
    let y = source_labels::<T>(batch, state.num_classes());
    let (feat, tape) = state.g_cm.forward(&x)?;
    let (loss, dfeat) = source_focal(state, &feat, &y, &settings.focal)?;
    state.g_cm.backward(tape, &dfeat);
    step_groups(state, &settings.sgd, &ParamGroup::DWC);
    Ok(loss)
}

/// Target probabilities of both heads plus the discrepancy and its gradient
/// with respect to the two logit matrices.
struct TargetDiscrepancy<T> {
    dis: f64,
    dz1: Array2<T>,
    dz2: Array2<T>,
}

fn head_discrepancy<T: Scalar>(p1: &Array2<T>, p2: &Array2<T>, scale: f64) -> Result<TargetDiscrepancy<T>> {
    let (dis, dp1) = discrepancy_loss_grad(p1, p2)?;
    let dp1 = dp1 * T::of(scale);
    let dp2 = dp1.mapv(|v| -v);
    Ok(TargetDiscrepancy {
        dis: dis.as_f64(),
        dz1: sigmoid_backward(p1, &dp1),
        dz2: sigmoid_backward(p2, &dp2),
    })
}

/// Minimizes `wFL(source) - weight * dis(target)` over C1 and C2 only; G_cm
/// features are treated as constants. Returns the objective before the update.
pub fn step_max_discrepancy<T: Scalar>(state: &mut ModelState<T>, batch: &DomainBatch, settings: &DwcSettings) -> Result<f64> {
    require_source(batch)?;
    require_target(batch)?;
    state.zero_grad_all();
    let fs = state.g_cm.features(&to_scalar::<T>(&batch.source_images))?;
    let ft = state.g_cm.features(&to_scalar::<T>(&batch.target_images))?;
    let y = source_labels::<T>(batch, state.num_classes());
    let (wfl, _) = source_focal(state, &fs, &y, &settings.focal)?;

    let (z1, t1) = state.c1.forward(&ft)?;
    let (z2, t2) = state.c2.forward(&ft)?;
    let d = head_discrepancy(&sigmoid(&z1), &sigmoid(&z2), -settings.discrepancy_weight)?;
    state.c1.backward(&t1, &d.dz1);
    state.c2.backward(&t2, &d.dz2);
    step_groups(state, &settings.sgd, &[ParamGroup::C1, ParamGroup::C2]);
    Ok(wfl - settings.discrepancy_weight * d.dis)
}

/// Minimizes `weight * dis(target)` over G_cm only, repeated `n_inner` times.
/// Returns the unweighted discrepancy measured before the last update, or the
/// current discrepancy when `n_inner` is 0.
pub fn step_min_discrepancy<T: Scalar>(state: &mut ModelState<T>, batch: &DomainBatch, settings: &DwcSettings) -> Result<f64> {
    require_target(batch)?;
    let x = to_scalar::<T>(&batch.target_images);
    if settings.n_inner == 0 {
        return target_discrepancy(state, &x);
    }
    let mut last = 0.0;
    for _ in 0..settings.n_inner {
        state.zero_grad_all();
        let (ft, tape) = state.g_cm.forward(&x)?;
        let (z1, t1) = state.c1.forward(&ft)?;
        let (z2, t2) = state.c2.forward(&ft)?;
        let d = head_discrepancy(&sigmoid(&z1), &sigmoid(&z2), settings.discrepancy_weight)?;
        let dfeat = state.c1.backward(&t1, &d.dz1) + state.c2.backward(&t2, &d.dz2);
        state.g_cm.backward(tape, &dfeat);
        step_groups(state, &settings.sgd, &[ParamGroup::GCm]);
        last = d.dis;
    }
    state.zero_grad_all();
    Ok(last)
}

/// Mean |C1 - C2| probability gap on a batch of images.
pub fn target_discrepancy<T: Scalar>(state: &ModelState<T>, images: &Array4<T>) -> Result<f64> {
    let f = state.g_cm.features(images)?;
    let p1 = sigmoid(&state.c1.forward(&f)?.0);
    let p2 = sigmoid(&state.c2.forward(&f)?.0);
    Ok(crate::losses::discrepancy_loss(&p1, &p2)?.as_f64())
}

/// Probabilities of both heads on every image of a dataset, in chunks.
pub fn predict_heads<T: Scalar>(state: &ModelState<T>, dataset: &Dataset) -> Result<(Array2<f64>, Array2<f64>)> {
    const CHUNK: usize = 32;
    let k = state.num_classes();
    let n = dataset.len();
    let mut p1 = Array2::zeros((n, k));
    let mut p2 = Array2::zeros((n, k));
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let f = state.g_cm.features(&to_scalar::<T>(&dataset.images(&idx)))?;
        let a = sigmoid(&state.c1.forward(&f)?.0);
        let b = sigmoid(&state.c2.forward(&f)?.0);
        let rows = s![start..start + idx.len(), ..];
        p1.slice_mut(rows).assign(&a.mapv(|v| v.as_f64()));
        p2.slice_mut(rows).assign(&b.mapv(|v| v.as_f64()));
    }
    Ok((p1, p2))
}

/// Number of pseudo positives per image: `round(delta * K)`.
pub fn n_delta(delta: f64, k: usize) -> Result<usize> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(ScidaError::Config(format!("delta must be in (0, 1], got {delta}")));
    }
    let n = (delta * k as f64).round() as usize;
    if n == 0 {
        return Err(ScidaError::Config(format!(
            "delta {delta} with K = {k} selects no pseudo labels"
        )));
    }
    Ok(n)
}

/// Top-`n_delta` pseudo labels for every target image, plus the C2
/// probabilities they were ranked from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub delta: f64,
    pub n_delta: usize,
    pub ids: Vec<String>,
    pub labels: Vec<LabelVector>,
    pub probs: Vec<Vec<f64>>,
}

impl PseudoLabelSet {
    pub fn from_probs(ids: Vec<String>, probs: &Array2<f64>, delta: f64) -> Result<Self> {
        let k = probs.ncols();
        let n = n_delta(delta, k)?;
        if ids.len() != probs.nrows() {
            return Err(ScidaError::Shape(format!("{} ids for {} probability rows", ids.len(), probs.nrows())));
        }
        let rows: Vec<Vec<f64>> = probs.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
        let labels = rows
            .iter()
            .map(|r| LabelVector::from_indices(k, &top_n(r, n)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            delta,
            n_delta: n,
            ids,
            labels,
            probs: rows,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.first().map_or(0, LabelVector::k)
    }

    pub fn probs_matrix(&self) -> Array2<f64> {
        let k = self.num_classes();
        Array2::from_shape_fn((self.len(), k), |(i, j)| self.probs[i][j])
    }

    /// Fraction of images whose pseudo set differs from `previous`.
    pub fn churn(&self, previous: &PseudoLabelSet) -> Result<f64> {
        if self.ids != previous.ids {
            return Err(ScidaError::Contract("churn between pseudo sets over different images".into()));
        }
        if self.is_empty() {
            return Ok(0.0);
        }
        let changed = self.labels.iter().zip(&previous.labels).filter(|(a, b)| a != b).count();
        Ok(changed as f64 / self.len() as f64)
    }

    /// Position of every id, for looking up batch rows.
    pub fn index(&self) -> BTreeMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
    }

    /// `{"delta": .., "labels": {id: [class indices]}}`
    pub fn to_json(&self) -> serde_json::Value {
        let labels: BTreeMap<&str, Vec<usize>> = self
            .ids
            .iter()
            .zip(&self.labels)
            .map(|(id, l)| (id.as_str(), l.positives()))
            .collect();
        serde_json::json!({ "delta": self.delta, "labels": labels })
    }
}

/// Ranks `sigmoid(C2(G_cm(x)))` per target image and keeps the top `n_delta`.
pub fn extract_pseudo_labels<T: Scalar>(state: &ModelState<T>, target: &Dataset, delta: f64) -> Result<PseudoLabelSet> {
    n_delta(delta, state.num_classes())?;
    if target.is_empty() {
        return Err(ScidaError::Empty("target dataset is empty".into()));
    }
    let (_, p2) = predict_heads(state, target)?;
    let ids = target.samples.iter().map(|s| s.id.clone()).collect();
    PseudoLabelSet::from_probs(ids, &p2, delta)
}
