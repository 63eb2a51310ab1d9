//! Label-wise branch: label co-occurrence matrix, the GCN-fused classifier
//! and the self-correction objective tying it to the DWC branch.

use std::path::Path;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{label_matrix, DomainBatch, LabelVector};
use crate::dwc::{to_scalar, PseudoLabelSet};
use crate::error::{shape_err, Result, ScidaError};
use crate::losses::bce_loss_grad;
use crate::models::{fuse, fuse_backward, ModelState, ParamGroup};
use crate::nn::{sigmoid, sigmoid_backward, Scalar, Sgd};

/// Pairwise label co-occurrence counts and their row-normalized form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub counts: Vec<Vec<u64>>,
    pub normalized: Vec<Vec<f64>>,
}

impl CorrelationMatrix {
    /// `counts[i][j]` = images with both i and j positive (the diagonal is the
    /// label frequency). Rows are divided by their sum; empty rows stay zero.
    pub fn from_labels(labels: &[LabelVector]) -> Result<Self> {
        let first = labels
            .first()
            .ok_or_else(|| ScidaError::Empty("correlation matrix of an empty label set".into()))?;
        let k = first.k();
        let mut counts = vec![vec![0u64; k]; k];
        for l in labels {
            if l.k() != k {
                return shape_err(format!("label of width {} in a K={k} set", l.k()));
            }
            let pos = l.positives();
            for &i in &pos {
                for &j in &pos {
                    counts[i][j] += 1;
                }
            }
        }
        let normalized = counts
            .iter()
            .map(|row| {
                let sum: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if sum == 0 { 0.0 } else { c as f64 / sum as f64 })
                    .collect()
            })
            .collect();
        Ok(Self { counts, normalized })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn adjacency<T: Scalar>(&self) -> Array2<T> {
        let k = self.num_classes();
        Array2::from_shape_fn((k, k), |(i, j)| T::of(self.normalized[i][j]))
    }

    /// Hash of the normalized matrix bits, for logging.
    pub fn snapshot_hash(&self) -> String {
        let mut h = Sha256::new();
        for row in &self.normalized {
            for v in row {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Counts as CSV with a header row of category names.
    pub fn write_counts_csv(&self, path: &Path, categories: &[String]) -> Result<()> {
        let io = |e: csv::Error| ScidaError::Load(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        let mut header = vec![String::new()];
        header.extend(categories.iter().cloned());
        w.write_record(&header).map_err(io)?;
        for (name, row) in categories.iter().zip(&self.counts) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|e| ScidaError::io(path, e))
    }

    /// `{"categories": [..], "normalized": [[..]..]}`
    pub fn write_normalized_json(&self, path: &Path, categories: &[String]) -> Result<()> {
        let v = serde_json::json!({ "categories": categories, "normalized": self.normalized });
        crate::datasets::write_json(path, &v)
    }
}

pub fn build_correlation_matrix(pseudo: &PseudoLabelSet) -> Result<CorrelationMatrix> {
    CorrelationMatrix::from_labels(&pseudo.labels)
}

fn check_adjacency<T: Scalar>(state: &ModelState<T>, adjacency: &Array2<T>) -> Result<()> {
    let k = state.embedding.num_classes();
    if adjacency.dim() != (k, k) {
        return shape_err(format!(
            "adjacency is {:?} but the label embedding has {k} rows",
            adjacency.dim()
        ));
    }
    Ok(())
}

/// `sigmoid(fuse(FC(G_t(x)), GCN(embedding, adjacency)))`.
pub fn lwc_forward<T: Scalar>(state: &ModelState<T>, images: &Array4<T>, adjacency: &Array2<T>) -> Result<Array2<T>> {
    check_adjacency(state, adjacency)?;
    let f = state.g_t.features(images)?;
    let (h, _) = state.fc.forward(&f)?;
    let (g, _) = state.gcn.forward(&state.embedding, adjacency)?;
    Ok(sigmoid(&fuse(&h, &g)?))
}

/// What the label-wise prediction is pulled towards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionTarget {
    /// The hard top-n pseudo labels.
    Pseudo,
    /// The (constant) C2 probabilities.
    Soft,
}

/// Loss value and its gradients with respect to the two branches' probabilities.
#[derive(Debug, Clone)]
pub struct CorrectionGrads<T> {
    pub loss: f64,
    pub d_lwc: Array2<T>,
    pub d_dwc: Array2<T>,
}

/// `bce(y_lwc, target) + bce(p_dwc, y_lwc)` with both right-hand arguments
/// held constant. `target` is the pseudo-label matrix or `p_dwc` itself.
pub fn self_correction_loss<T: Scalar>(y_lwc: &Array2<T>, p_dwc: &Array2<T>, target: &Array2<T>) -> Result<CorrectionGrads<T>> {
    let (l_lwc, d_lwc) = bce_loss_grad(y_lwc, target)?;
    let (l_dwc, d_dwc) = bce_loss_grad(p_dwc, y_lwc)?;
    Ok(CorrectionGrads {
        loss: l_lwc.as_f64() + l_dwc.as_f64(),
        d_lwc,
        d_dwc,
    })
}

/// Learning rates of the two branches during self-correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionOptim {
    pub lwc: Sgd,
    pub dwc: Sgd,
}

/// One self-correction update on the batch's target images. The DWC side is
/// C2's prediction. G_t, FC and the GCN step with the LWC optimizer; G_cm,
/// C1 and C2 step with the DWC optimizer (C1 gets no gradient here, so only
/// momentum and weight decay move it).
pub fn step_self_correction<T: Scalar>(
    state: &mut ModelState<T>,
    batch: &DomainBatch,
    pseudo: &PseudoLabelSet,
    adjacency: &Array2<T>,
    target: CorrectionTarget,
    optim: &CorrectionOptim,
) -> Result<f64> {
    if !batch.has_target() {
        return Err(ScidaError::Contract("self-correction needs target images".into()));
    }
    check_adjacency(state, adjacency)?;
    let index = pseudo.index();
    let rows = batch
        .target_ids
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .map(|&i| &pseudo.labels[i])
                .ok_or_else(|| ScidaError::Contract(format!("no pseudo label for target '{id}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    let k = state.num_classes();
    if pseudo.num_classes() != k {
        return shape_err(format!("pseudo labels have K = {}, model has {k}", pseudo.num_classes()));
    }
    let pseudo_m = label_matrix::<T>(&rows, k);
    let x = to_scalar::<T>(&batch.target_images);

    state.zero_grad_all();
    let (f_cm, t_gcm) = state.g_cm.forward(&x)?;
    let (z2, t2) = state.c2.forward(&f_cm)?;
    let p2 = sigmoid(&z2);

    let (ft, t_gt) = state.g_t.forward(&x)?;
    let (h, t_fc) = state.fc.forward(&ft)?;
    let (g, t_gcn) = state.gcn.forward(&state.embedding, adjacency)?;
    let y = sigmoid(&fuse(&h, &g)?);

    let goal = match target {
        CorrectionTarget::Pseudo => pseudo_m,
        CorrectionTarget::Soft => p2.clone(),
    };
    let grads = self_correction_loss(&y, &p2, &goal)?;

    let dz = sigmoid_backward(&y, &grads.d_lwc);
    let (dh, dg) = fuse_backward(&h, &g, &dz);
    let dft = state.fc.backward(&t_fc, &dh);
    state.g_t.backward(t_gt, &dft);
    state.gcn.backward(adjacency, &t_gcn, &dg);

    let df = state.c2.backward(&t2, &sigmoid_backward(&p2, &grads.d_dwc));
    state.g_cm.backward(t_gcm, &df);

    for g in ParamGroup::LWC {
        optim.lwc.step(state.group_mut(g));
    }
    for g in ParamGroup::DWC {
        optim.dwc.step(state.group_mut(g));
    }
    Ok(grads.loss)
}
