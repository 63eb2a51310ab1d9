//! Two-stage training loop, evaluation and the delta sweep.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::config::{DataSpec, Interleave, Mode, RunConfig};
use crate::datasets::{
    class_frequencies, epoch_batches, generate_synthetic_pair, load_mai, Dataset, DomainBatch, EvalLabels, Split,
};
use crate::dwc::{
    extract_pseudo_labels, n_delta, predict_heads, step_max_discrepancy, step_min_discrepancy,
    step_source_supervised, DwcSettings, PseudoLabelSet,
};
use crate::error::{Result, ScidaError};
use crate::losses::FocalParams;
use crate::lwc::{build_correlation_matrix, step_self_correction, CorrectionOptim, CorrelationMatrix};
use crate::metrics::{evaluate, EvalMode, MetricsReport};
use crate::models::ModelState;
use crate::nn::Sgd;

/// Scalar type used for training.
pub type Real = f32;

/// Training inputs: labeled source, unlabeled target and the held-out target
/// labels used only for per-epoch evaluation.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub source: Dataset,
    pub target: Dataset,
    pub eval: Option<EvalLabels>,
}

impl TrainData {
    pub fn new(source: Dataset, target: Dataset, eval: Option<EvalLabels>) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(ScidaError::Empty("source and target sets must be non-empty".into()));
        }
        if source.categories != target.categories {
            return Err(ScidaError::Load("source and target category lists differ".into()));
        }
        if !source.samples.iter().all(|s| s.label.as_ref().is_some_and(|l| l.is_single())) {
            return Err(ScidaError::Contract("every source sample needs exactly one label".into()));
        }
        if target.samples.iter().any(|s| s.label.is_some()) {
            return Err(ScidaError::Contract("target samples handed to the trainer must be unlabeled".into()));
        }
        if let Some(e) = &eval {
            let ids: Vec<&String> = target.samples.iter().map(|s| &s.id).collect();
            if e.ids.iter().collect::<Vec<_>>() != ids {
                return Err(ScidaError::Load("evaluation labels do not match the target images".into()));
            }
        }
        Ok(Self { source, target, eval })
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        match &cfg.data {
            DataSpec::Synthetic { config, seed } => {
                let pair = generate_synthetic_pair(config, *seed)?;
                let (target, eval) = pair.target.split_labels()?;
                Self::new(pair.source, target, Some(eval))
            }
            DataSpec::Mai { source, target } => {
                let src = load_mai(source, Split::Single, cfg.side)?;
                let tgt = load_mai(target, Split::Unlabeled, cfg.side)?;
                let (_, eval) = load_mai(target, Split::Multi, cfg.side)?.split_labels()?;
                if src.num_classes() != cfg.num_classes {
                    return Err(ScidaError::Config(format!(
                        "data has {} categories, config says {}",
                        src.num_classes(),
                        cfg.num_classes
                    )));
                }
                Self::new(src, tgt, Some(eval))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean source wFL of the supervised steps.
    pub wfl: f64,
    /// Mean target discrepancy seen by the min-discrepancy steps.
    pub dis: Option<f64>,
    /// Mean self-correction loss.
    pub selfcorr: Option<f64>,
    pub churn: f64,
    /// Mean |C1 - C2| over the whole target set at the end of the epoch.
    pub target_dis: f64,
    pub lr_dwc: f64,
    pub lr_lwc: f64,
    pub all: Option<MetricsReport>,
    pub top3: Option<MetricsReport>,
    pub adjacency_hash: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Running,
    Converged,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
    pub stop: StopReason,
}

impl TrainLog {
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("log serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub model: ModelState<Real>,
    /// Completed epochs.
    pub epoch: usize,
    /// Pseudo labels at the end of the last completed epoch (or from the
    /// initial model before epoch 1).
    pub previous: PseudoLabelSet,
    /// Consecutive epochs with churn below the threshold.
    pub streak: usize,
    pub correlation: Option<CorrelationMatrix>,
    pub log: TrainLog,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Write a checkpoint after every epoch into this directory.
    pub checkpoint_dir: Option<PathBuf>,
    /// Return after this many completed epochs, as if interrupted.
    pub stop_after: Option<usize>,
}

fn finite(v: f64, what: &str, epoch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ScidaError::Divergence {
            what: what.to_string(),
            epoch,
        })
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub struct Trainer<'a> {
    cfg: &'a RunConfig,
    data: &'a TrainData,
    focal: FocalParams,
    pub state: TrainerState,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a RunConfig, data: &'a TrainData) -> Result<Self> {
        cfg.validate()?;
        let model = ModelState::new(cfg.model_config(), cfg.seed)?;
        let previous = extract_pseudo_labels(&model, &data.target, cfg.delta)?;
        let state = TrainerState {
            model,
            epoch: 0,
            previous,
            streak: 0,
            correlation: None,
            log: TrainLog {
                config_hash: cfg.hash(),
                epochs: Vec::new(),
                stop: StopReason::Running,
            },
        };
        Self::with_state(cfg, data, state)
    }

    pub fn resume(cfg: &'a RunConfig, data: &'a TrainData, checkpoint_path: &Path) -> Result<Self> {
        let (saved_cfg, state) = checkpoint::load(checkpoint_path)?;
        if saved_cfg.hash() != cfg.hash() {
            return Err(ScidaError::Config(
                "checkpoint was written by a different run configuration".into(),
            ));
        }
        Self::with_state(cfg, data, state)
    }

    fn with_state(cfg: &'a RunConfig, data: &'a TrainData, state: TrainerState) -> Result<Self> {
        if data.source.num_classes() != cfg.num_classes {
            return Err(ScidaError::Config(format!(
                "data has K = {}, config says {}",
                data.source.num_classes(),
                cfg.num_classes
            )));
        }
        let freq = class_frequencies(&data.source)?;
        let focal = FocalParams {
            alpha: cfg.focal_alpha,
            gamma: cfg.focal_gamma,
            class_weights: freq.proportions,
        };
        Ok(Self {
            cfg,
            data,
            focal,
            state,
        })
    }

    pub fn finished(&self) -> bool {
        self.state.log.stop != StopReason::Running
    }

    fn sgd(&self, lr: f64) -> Sgd {
        Sgd {
            lr,
            momentum: self.cfg.momentum,
            weight_decay: self.cfg.weight_decay,
        }
    }

    /// Runs the self-correction pass over the whole target set.
    fn correction_pass(&mut self, epoch: usize, pseudo: &PseudoLabelSet, adjacency: &Array2<Real>, optim: &CorrectionOptim) -> Result<Vec<f64>> {
        let cfg = self.cfg;
        let target = &self.data.target;
        let mut order: Vec<usize> = (0..target.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1 << 32 | epoch as u64);
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch = DomainBatch::target_only(target, chunk)?;
            let l = step_self_correction(
                &mut self.state.model,
                &batch,
                pseudo,
                adjacency,
                cfg.self_correction_target,
                optim,
            )?;
            losses.push(finite(l, "self-correction", epoch)?);
        }
        Ok(losses)
    }

    /// Runs the next epoch and appends its record to the log.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let cfg = self.cfg;
        let data = self.data;
        let epoch = self.state.epoch + 1;
        let lr_dwc = cfg.lr_at(cfg.lr_dwc, cfg.lr_decay_every_dwc, epoch);
        let lr_lwc = cfg.lr_at(cfg.lr_lwc, cfg.lr_decay_every_lwc, epoch);
        let settings = DwcSettings {
            focal: self.focal.clone(),
            discrepancy_weight: cfg.discrepancy_weight,
            n_inner: cfg.n_inner,
            sgd: self.sgd(lr_dwc),
        };
        let optim = CorrectionOptim {
            lwc: self.sgd(lr_lwc),
            dwc: self.sgd(lr_dwc),
        };
        let adversarial = cfg.mode != Mode::SourceOnly && epoch > cfg.warmup_epochs;
        let correcting = cfg.mode == Mode::Scida && epoch > cfg.warmup_epochs;

        // Per-batch interleaving works from the previous epoch's pseudo set.
        let batch_pseudo = self.state.previous.clone();
        let batch_adjacency = if correcting && cfg.interleave == Interleave::PerBatch {
            let m = build_correlation_matrix(&batch_pseudo)?;
            let a = m.adjacency::<Real>();
            self.state.correlation = Some(m);
            Some(a)
        } else {
            None
        };

        let (mut wfl, mut dis, mut selfcorr) = (Vec::new(), Vec::new(), Vec::new());
        for (si, ti) in epoch_batches(cfg.seed, epoch, data.source.len(), data.target.len(), cfg.batch_size) {
            let batch = DomainBatch::assemble(&data.source, &si, &data.target, &ti)?;
            let l = step_source_supervised(&mut self.state.model, &batch, &settings)?;
            wfl.push(finite(l, "source wFL", epoch)?);
            if adversarial {
                let l = step_max_discrepancy(&mut self.state.model, &batch, &settings)?;
                finite(l, "max-discrepancy", epoch)?;
                let l = step_min_discrepancy(&mut self.state.model, &batch, &settings)?;
                dis.push(finite(l, "min-discrepancy", epoch)?);
            }
            if let Some(adj) = &batch_adjacency {
                let l = step_self_correction(
                    &mut self.state.model,
                    &batch,
                    &batch_pseudo,
                    adj,
                    cfg.self_correction_target,
                    &optim,
                )?;
                selfcorr.push(finite(l, "self-correction", epoch)?);
            }
        }

        if correcting && cfg.interleave == Interleave::PerEpoch {
            let mid = extract_pseudo_labels(&self.state.model, &data.target, cfg.delta)?;
            let m = build_correlation_matrix(&mid)?;
            let adjacency = m.adjacency::<Real>();
            self.state.correlation = Some(m);
            selfcorr = self.correction_pass(epoch, &mid, &adjacency, &optim)?;
        }

        let (p1, p2) = predict_heads(&self.state.model, &data.target)?;
        let ids = data.target.samples.iter().map(|s| s.id.clone()).collect();
        let end = PseudoLabelSet::from_probs(ids, &p2, cfg.delta)?;
        let churn = end.churn(&self.state.previous)?;
        let target_dis = (&p1 - &p2).mapv(f64::abs).mean().unwrap_or(0.0);
        let (all, top3) = match &data.eval {
            Some(e) => {
                let r = evaluate_probs(&p2, e, cfg.eval_threshold)?;
                (Some(r[0].clone()), Some(r[1].clone()))
            }
            None => (None, None),
        };
        let record = EpochRecord {
            epoch,
            wfl: mean(&wfl).unwrap_or(0.0),
            dis: mean(&dis),
            selfcorr: mean(&selfcorr),
            churn,
            target_dis,
            lr_dwc,
            lr_lwc,
            all,
            top3,
            adjacency_hash: self.state.correlation.as_ref().map(CorrelationMatrix::snapshot_hash),
        };

        // Gradient buffers are scratch; clearing them keeps the state equal to its checkpoint.
        self.state.model.zero_grad_all();
        self.state.previous = end;
        self.state.epoch = epoch;
        self.state.streak = if churn < cfg.conv_eps { self.state.streak + 1 } else { 0 };
        self.state.log.stop = if self.state.streak >= cfg.conv_patience {
            StopReason::Converged
        } else if epoch >= cfg.max_epochs {
            StopReason::MaxEpochs
        } else {
            StopReason::Running
        };
        self.state.log.epochs.push(record);
        Ok(self.state.log.epochs.last().expect("just pushed"))
    }

    /// Trains until convergence, `max_epochs`, or `opts.stop_after`.
    pub fn run(mut self, opts: &TrainOptions) -> Result<TrainerState> {
        while !self.finished() {
            if opts.stop_after.is_some_and(|n| self.state.epoch >= n) {
                break;
            }
            self.run_epoch()?;
            if let Some(dir) = &opts.checkpoint_dir {
                checkpoint::save_epoch(dir, self.cfg, &self.state)?;
            }
        }
        Ok(self.state)
    }
}

/// Loads the configured data and trains to completion.
pub fn train(cfg: &RunConfig) -> Result<(ModelState<Real>, TrainLog)> {
    let data = TrainData::load(cfg)?;
    let state = Trainer::new(cfg, &data)?.run(&TrainOptions::default())?;
    Ok((state.model, state.log))
}

/// "all" and "top3" reports for C2 probabilities against held-out labels.
pub fn evaluate_probs(probs: &Array2<f64>, labels: &EvalLabels, threshold: f64) -> Result<[MetricsReport; 2]> {
    Ok([
        evaluate(probs, &labels.labels, EvalMode::All, threshold)?,
        evaluate(probs, &labels.labels, EvalMode::Top3, threshold)?,
    ])
}

/// Evaluates `sigmoid(C2(G_cm(x)))` on a labeled dataset in both modes.
pub fn evaluate_run(state: &ModelState<Real>, dataset: &Dataset, threshold: f64) -> Result<[MetricsReport; 2]> {
    if !dataset.is_labeled() {
        return Err(ScidaError::Contract("evaluation needs a labeled dataset".into()));
    }
    let (_, p2) = predict_heads(state, dataset)?;
    let (_, labels) = dataset.clone().split_labels()?;
    evaluate_probs(&p2, &labels, threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub delta: f64,
    pub n_delta: Option<usize>,
    pub epochs: Option<usize>,
    pub all: Option<MetricsReport>,
    pub top3: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("delta,n_delta,epochs,op,or,of1,of2,top3_op,top3_or,top3_of1,top3_of2,error\n");
        let f = |r: &Option<MetricsReport>| match r {
            Some(m) => format!("{},{},{},{}", m.op, m.or, m.of1, m.of2),
            None => ",,,".to_string(),
        };
        for r in &self.rows {
            let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.delta,
                opt(r.n_delta),
                opt(r.epochs),
                f(&r.all),
                f(&r.top3),
                r.error.as_deref().unwrap_or("").replace(',', ";")
            ));
        }
        out
    }
}

/// Trains once per delta with everything else fixed. A failing cell records
/// its error and the sweep continues.
pub fn ablate_delta(cfg: &RunConfig, deltas: &[f64], data: &TrainData) -> AblationTable {
    let rows = deltas
        .iter()
        .map(|&delta| {
            let cell = RunConfig { delta, ..cfg.clone() };
            let result = (|| -> Result<(usize, usize, [MetricsReport; 2])> {
                let n = n_delta(delta, cell.num_classes)?;
                let state = Trainer::new(&cell, data)?.run(&TrainOptions::default())?;
                let eval = data
                    .eval
                    .as_ref()
                    .ok_or_else(|| ScidaError::Contract("the delta sweep needs evaluation labels".into()))?;
                let (_, p2) = predict_heads(&state.model, &data.target)?;
                Ok((n, state.epoch, evaluate_probs(&p2, eval, cell.eval_threshold)?))
            })();
            match result {
                Ok((n, epochs, [all, top3])) => AblationRow {
                    delta,
                    n_delta: Some(n),
                    epochs: Some(epochs),
                    all: Some(all),
                    top3: Some(top3),
                    error: None,
                },
                Err(e) => AblationRow {
                    delta,
                    n_delta: None,
                    epochs: None,
                    all: None,
                    top3: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    AblationTable { rows }
}
