mod common;

use common::*;
use ndarray::{Array2, Array4};
use rand::Rng;
use scida_core::datasets::{generate_synthetic_pair, Dataset, DomainBatch};
use scida_core::dwc::{
    extract_pseudo_labels, predict_heads, step_max_discrepancy, step_min_discrepancy, step_source_supervised,
    target_discrepancy, DwcSettings,
};
use scida_core::models::{ModelState, ParamGroup};
use scida_core::nn::Sgd;
use scida_core::ScidaError;

type Step = fn(&mut ModelState<f64>, &DomainBatch, &DwcSettings) -> scida_core::Result<f64>;

fn flat(state: &ModelState<f64>, groups: &[ParamGroup]) -> Vec<f64> {
    groups
        .iter()
        .flat_map(|&g| {
            state
                .group(g)
                .params()
                .into_iter()
                .flat_map(|(_, p)| p.value.iter().copied().collect::<Vec<_>>())
                .collect::<Vec<_>>()
        })
        .collect()
}

fn nudge(state: &mut ModelState<f64>, group: ParamGroup, flat_idx: usize, by: f64) {
    let mut left = flat_idx;
    for (_, p) in state.group_mut(group).params_mut() {
        if left < p.value.len() {
            *p.value.iter_mut().nth(left).unwrap() += by;
            return;
        }
        left -= p.value.len();
    }
    panic!("index {flat_idx} out of range");
}

fn separable_batch(n_per_class: usize) -> (Dataset, DomainBatch) {
    let src = separable_source(n_per_class, 16, 1);
    let tgt = noise_target(2 * n_per_class, 2, 16, 2);
    let idx: Vec<usize> = (0..2 * n_per_class).collect();
    let batch = DomainBatch::assemble(&src, &idx, &tgt, &idx).unwrap();
    (src, batch)
}

fn plain_sgd(s: &DwcSettings, lr: f64) -> DwcSettings {
    DwcSettings {
        sgd: Sgd {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
        },
        ..s.clone()
    }
}

#[test]
fn source_loss_halves_within_fifty_steps() {
    let (_, batch) = separable_batch(4);
    let mut state = ModelState::<f64>::new(tiny_model(2), 3).unwrap();
    let s = settings(2, 0.2);
    let first = step_source_supervised(&mut state, &batch, &s).unwrap();
    let mut last = first;
    for _ in 0..49 {
        last = step_source_supervised(&mut state, &batch, &s).unwrap();
    }
    assert!(last < 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn converged_heads_agree_and_have_vanishing_gradient() {
    let (src, batch) = separable_batch(4);
    let mut state = ModelState::<f64>::new(tiny_model(2), 4).unwrap();
    let s = settings(2, 0.05);
    for _ in 0..400 {
        step_source_supervised(&mut state, &batch, &s).unwrap();
    }

    // With lr = 1 and no momentum or decay the update equals the gradient.
    let before = flat(&state, &ParamGroup::DWC);
    let mut probe = state.clone();
    step_source_supervised(&mut probe, &batch, &plain_sgd(&s, 1.0)).unwrap();
    let after = flat(&probe, &ParamGroup::DWC);
    let norm = before.iter().zip(&after).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(norm < 1e-3, "gradient norm {norm}");

    let (p1, p2) = predict_heads(&state, &src).unwrap();
    let argmax = |p: &Array2<f64>, r: usize| (p[[r, 1]] > p[[r, 0]]) as usize;
    let agree = (0..src.len()).filter(|&r| argmax(&p1, r) == argmax(&p2, r)).count();
    assert!(agree as f64 >= 0.95 * src.len() as f64, "{agree}/{}", src.len());
}

/// Compares the parameter update of one plain-SGD step against a central
/// difference of the objective that step reports.
fn check_step_gradient(step: Step, state: &ModelState<f64>, batch: &DomainBatch, s: &DwcSettings, groups: &[ParamGroup]) {
    let objective = |st: &ModelState<f64>| step(&mut st.clone(), batch, &plain_sgd(s, 0.0)).unwrap();
    let mut stepped = state.clone();
    step(&mut stepped, batch, &plain_sgd(s, 1.0)).unwrap();
    let mut r = rng(5);
    let h = 1e-5;
    for &g in groups {
        let before = flat(state, &[g]);
        let after = flat(&stepped, &[g]);
        for _ in 0..8 {
            let i = r.random_range(0..before.len());
            let analytic = before[i] - after[i];
            let (mut plus, mut minus) = (state.clone(), state.clone());
            nudge(&mut plus, g, i, h);
            nudge(&mut minus, g, i, -h);
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            assert!(
                grad_close(analytic, numeric, 1e-3),
                "{} [{i}]: analytic {analytic} numeric {numeric}",
                g.name()
            );
        }
    }
}

#[test]
fn step_updates_match_finite_differences() {
    let pair = generate_synthetic_pair(&tiny_synth(4), 6).unwrap();
    let (tgt, _) = pair.target.split_labels().unwrap();
    let batch = DomainBatch::assemble(&pair.source, &[0, 7, 13, 20], &tgt, &[0, 1, 2, 3]).unwrap();
    let state = ModelState::<f64>::new(tiny_model(4), 7).unwrap();
    let s = DwcSettings {
        n_inner: 1,
        ..settings(4, 0.0)
    };
    check_step_gradient(step_source_supervised, &state, &batch, &s, &ParamGroup::DWC);
    check_step_gradient(step_max_discrepancy, &state, &batch, &s, &[ParamGroup::C1, ParamGroup::C2]);
    check_step_gradient(step_min_discrepancy, &state, &batch, &s, &[ParamGroup::GCm]);
}

fn changed(before: &ModelState<f64>, after: &ModelState<f64>) -> Vec<ParamGroup> {
    let (a, b) = (before.group_hashes(), after.group_hashes());
    ParamGroup::ALL.into_iter().filter(|g| a[g] != b[g]).collect()
}

#[test]
fn each_step_moves_only_its_own_groups() {
    let pair = generate_synthetic_pair(&tiny_synth(4), 8).unwrap();
    let (tgt, _) = pair.target.split_labels().unwrap();
    let batch = DomainBatch::assemble(&pair.source, &[1, 2, 3, 4], &tgt, &[4, 5, 6, 7]).unwrap();
    let s = settings(4, 0.01);
    let cases: [(Step, Vec<ParamGroup>); 3] = [
        (step_source_supervised, ParamGroup::DWC.to_vec()),
        (step_max_discrepancy, vec![ParamGroup::C1, ParamGroup::C2]),
        (step_min_discrepancy, vec![ParamGroup::GCm]),
    ];
    for (step, expected) in cases {
        let before = ModelState::<f64>::new(tiny_model(4), 9).unwrap();
        let mut after = before.clone();
        step(&mut after, &batch, &s).unwrap();
        assert_eq!(changed(&before, &after), expected);
    }
}

fn warmed_state(seed: u64, pair_source: &Dataset, tgt: &Dataset, s: &DwcSettings) -> ModelState<f64> {
    let mut state = ModelState::<f64>::new(tiny_model(4), seed).unwrap();
    let n = pair_source.len();
    for i in 0..10 {
        let idx: Vec<usize> = (0..4).map(|j| (4 * i + j) % n).collect();
        let b = DomainBatch::assemble(pair_source, &idx, tgt, &[0, 1, 2, 3]).unwrap();
        step_source_supervised(&mut state, &b, s).unwrap();
    }
    state
}

#[test]
fn adversarial_steps_move_discrepancy_the_right_way() {
    let (mut up, mut down) = (0, 0);
    for seed in 0..20 {
        let pair = generate_synthetic_pair(&tiny_synth(4), 100 + seed).unwrap();
        let (tgt, _) = pair.target.split_labels().unwrap();
        let s = settings(4, 0.01);
        let state = warmed_state(seed, &pair.source, &tgt, &s);
        let batch = DomainBatch::assemble(&pair.source, &[0, 6, 12, 18], &tgt, &[4, 5, 6, 7]).unwrap();
        let x = batch.target_images.mapv(f64::from);
        let base = target_discrepancy(&state, &x).unwrap();

        let mut maxed = state.clone();
        step_max_discrepancy(&mut maxed, &batch, &s).unwrap();
        up += (target_discrepancy(&maxed, &x).unwrap() > base) as usize;

        let mut minned = state.clone();
        step_min_discrepancy(&mut minned, &batch, &s).unwrap();
        down += (target_discrepancy(&minned, &x).unwrap() < base) as usize;
    }
    assert!(up >= 18, "max step raised the discrepancy in {up}/20 trials");
    assert!(down >= 18, "min step lowered the discrepancy in {down}/20 trials");
}

#[test]
fn zero_inner_steps_is_a_no_op() {
    let pair = generate_synthetic_pair(&tiny_synth(4), 10).unwrap();
    let (tgt, _) = pair.target.split_labels().unwrap();
    let batch = DomainBatch::assemble(&pair.source, &[0, 1], &tgt, &[0, 1]).unwrap();
    let state = ModelState::<f64>::new(tiny_model(4), 11).unwrap();
    let mut after = state.clone();
    let s = DwcSettings {
        n_inner: 0,
        ..settings(4, 0.1)
    };
    let got = step_min_discrepancy(&mut after, &batch, &s).unwrap();
    assert_eq!(state.group_hashes(), after.group_hashes());
    assert_eq!(got, target_discrepancy(&state, &batch.target_images.mapv(f64::from)).unwrap());
}

#[test]
fn duplicated_domains_stay_finite() {
    let pair = generate_synthetic_pair(&tiny_synth(4), 12).unwrap();
    let mut batch = DomainBatch::assemble(&pair.source, &[0, 1, 2], &noise_target(3, 4, 16, 3), &[0, 1, 2]).unwrap();
    batch.target_images = batch.source_images.clone();
    let mut state = ModelState::<f32>::new(tiny_model(4), 13).unwrap();
    let s = settings(4, 0.01);
    for _ in 0..3 {
        assert!(step_source_supervised(&mut state, &batch, &s).unwrap().is_finite());
        assert!(step_max_discrepancy(&mut state, &batch, &s).unwrap().is_finite());
        assert!(step_min_discrepancy(&mut state, &batch, &s).unwrap().is_finite());
    }
    assert!(flat_f32(&state).iter().all(|v| v.is_finite()));
}

fn flat_f32(state: &ModelState<f32>) -> Vec<f32> {
    ParamGroup::ALL
        .iter()
        .flat_map(|&g| {
            state
                .group(g)
                .params()
                .into_iter()
                .flat_map(|(_, p)| p.value.iter().copied().collect::<Vec<_>>())
                .collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn steps_reject_batches_missing_a_domain() {
    let pair = generate_synthetic_pair(&tiny_synth(4), 14).unwrap();
    let (tgt, _) = pair.target.split_labels().unwrap();
    let target_only = DomainBatch::target_only(&tgt, &[0, 1]).unwrap();
    let mut source_only = DomainBatch::assemble(&pair.source, &[0, 1], &tgt, &[0, 1]).unwrap();
    source_only.target_images = Array4::zeros((0, 16, 16, 3));
    source_only.target_ids.clear();
    source_only.target_indices.clear();

    let mut state = ModelState::<f64>::new(tiny_model(4), 15).unwrap();
    let s = settings(4, 0.01);
    let contract = |r: scida_core::Result<f64>| matches!(r, Err(ScidaError::Contract(_)));
    assert!(contract(step_source_supervised(&mut state, &target_only, &s)));
    assert!(contract(step_max_discrepancy(&mut state, &target_only, &s)));
    assert!(contract(step_max_discrepancy(&mut state, &source_only, &s)));
    assert!(contract(step_min_discrepancy(&mut state, &source_only, &s)));
}

#[test]
fn pseudo_labels_keep_the_top_fraction_and_are_pure() {
    let tgt = noise_target(12, 20, 16, 16);
    let state = ModelState::<f64>::new(tiny_model(20), 17).unwrap();
    let hashes = state.group_hashes();
    let set = extract_pseudo_labels(&state, &tgt, 0.2).unwrap();
    assert_eq!(set.len(), 12);
    assert!(set.labels.iter().all(|l| l.num_positive() == 4));
    for (l, p) in set.labels.iter().zip(&set.probs) {
        let lowest_kept = l.positives().iter().map(|&i| p[i]).fold(f64::INFINITY, f64::min);
        let highest_dropped = (0..20).filter(|i| !l.contains(*i)).map(|i| p[i]).fold(0.0, f64::max);
        assert!(lowest_kept >= highest_dropped);
    }
    let (_, p2) = predict_heads(&state, &tgt).unwrap();
    assert_eq!(set.probs_matrix(), p2);

    let again = extract_pseudo_labels(&state, &tgt, 0.2).unwrap();
    assert_eq!(set, again);
    assert_eq!(hashes, state.group_hashes());

    let all = extract_pseudo_labels(&state, &tgt, 1.0).unwrap();
    assert!(all.labels.iter().all(|l| l.num_positive() == 20));
    assert!(extract_pseudo_labels(&state, &tgt, 0.01).unwrap_err().is_config());
}
