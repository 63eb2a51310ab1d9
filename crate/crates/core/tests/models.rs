mod common;

use common::*;
use ndarray::{Array2, Array4, Ix1, Ix2};
use proptest::prelude::*;
use rand::Rng;
use scida_core::lwc::lwc_forward;
use scida_core::models::{
    classify, feature_forward, fuse, fuse_backward, gcn_backward, gcn_forward, Classifier, Generator, LastLayer,
    ModelState,
};
use scida_core::nn::Module;

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.2 * v
    }
}

fn random_matrix(r: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
}

fn row_normalized(r: &mut rand_chacha::ChaCha8Rng, k: usize) -> Array2<f64> {
    let mut a = Array2::from_shape_fn((k, k), |_| r.random_range(0.0..1.0));
    for mut row in a.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    a
}

/// `sum(C * fuse(h, gcn(E, A, W)))` as a function of every input it differentiates.
fn fused_objective(c: &Array2<f64>, h: &Array2<f64>, e: &Array2<f64>, a: &Array2<f64>, w: &[Array2<f64>]) -> f64 {
    let (g, _) = gcn_forward(e, a, w, LastLayer::Linear).unwrap();
    (fuse(h, &g).unwrap() * c).sum()
}

#[test]
fn gcn_and_fuse_gradients_match_finite_differences() {
    let mut r = rng(41);
    let (k, f, d, hidden, b) = (3, 4, 3, 5, 2);
    for _ in 0..100 {
        let e = random_matrix(&mut r, k, d);
        let a = row_normalized(&mut r, k);
        let w = vec![random_matrix(&mut r, d, hidden), random_matrix(&mut r, hidden, f)];
        let h = random_matrix(&mut r, b, f);
        let c = random_matrix(&mut r, b, k);

        let (g, tape) = gcn_forward(&e, &a, &w, LastLayer::Linear).unwrap();
        let (dh, dg) = fuse_backward(&h, &g, &c);
        let dw = gcn_backward(&a, &w, &tape, &dg);

        let num_h = numeric_grad(&h, 1e-6, |x| fused_objective(&c, x, &e, &a, &w));
        for (x, y) in dh.iter().zip(num_h.iter()) {
            assert!(grad_close(*x, *y, 1e-4), "dh {x} vs {y}");
        }
        for l in 0..2 {
            let num = numeric_grad(&w[l], 1e-6, |x| {
                let mut ws = w.clone();
                ws[l] = x.clone();
                fused_objective(&c, &h, &e, &a, &ws)
            });
            for (x, y) in dw[l].iter().zip(num.iter()) {
                assert!(grad_close(*x, *y, 1e-4), "dW{l} {x} vs {y}");
            }
        }
    }
}

#[test]
fn gcn_random_single_layer_matches_dense_oracle() {
    let mut r = rng(42);
    let e = random_matrix(&mut r, 3, 2);
    let a = row_normalized(&mut r, 3);
    let w = random_matrix(&mut r, 2, 4);
    let (out, _) = gcn_forward(&e, &a, std::slice::from_ref(&w), LastLayer::Activated).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            let mut v = 0.0;
            for m in 0..3 {
                for n in 0..2 {
                    v += a[[i, m]] * e[[m, n]] * w[[n, j]];
                }
            }
            assert!((out[[i, j]] - leaky(v)).abs() < 1e-6);
        }
    }
}

#[test]
fn fuse_matches_dot_products() {
    let mut r = rng(43);
    let h = random_matrix(&mut r, 1, 4);
    let g = random_matrix(&mut r, 3, 4);
    let logits = fuse(&h, &g).unwrap();
    for i in 0..3 {
        let dot: f64 = (0..4).map(|j| g[[i, j]] * h[[0, j]]).sum();
        assert!((logits[[0, i]] - dot).abs() < 1e-12);
    }
    assert!(fuse(&h, &random_matrix(&mut r, 3, 5)).is_err());
}

proptest! {
    #[test]
    fn fuse_argmax_survives_positive_scaling(
        h in prop::collection::vec(-1.0f64..1.0, 4),
        g in prop::collection::vec(-1.0f64..1.0, 12),
        c in 0.01f64..100.0,
    ) {
        let h = Array2::from_shape_vec((1, 4), h).unwrap();
        let g = Array2::from_shape_vec((3, 4), g).unwrap();
        let argmax = |l: &Array2<f64>| {
            let row = l.row(0);
            (0..3).fold(0, |best, i| if row[i] > row[best] { i } else { best })
        };
        let base = fuse(&h, &g).unwrap();
        let scaled = fuse(&h.mapv(|v| v * c), &g).unwrap();
        let top = argmax(&base);
        prop_assume!((0..3).all(|i| i == top || (base[[0, top]] - base[[0, i]]).abs() > 1e-9));
        prop_assert_eq!(top, argmax(&scaled));
    }
}

#[test]
fn feature_and_classifier_shape_contracts() {
    let cfg = tiny_model(4);
    let state = ModelState::<f64>::new(cfg.clone(), 0).unwrap();
    let x = Array4::from_elem((3, 16, 16, 3), 0.5);
    let f = feature_forward(&state, Generator::Common, &x).unwrap();
    assert_eq!(f.dim(), (3, cfg.feature_dim));
    assert!(f.iter().all(|v| v.is_finite()));
    assert!(feature_forward(&state, Generator::Target, &Array4::zeros((1, 8, 8, 3))).is_err());
    assert!(classify(&state, Classifier::C1, &Array2::zeros((1, cfg.feature_dim + 1))).is_err());
    let logits = classify(&state, Classifier::C2, &f).unwrap();
    assert_eq!(logits.dim(), (3, 4));
}

fn linear_parts(l: &scida_core::nn::Linear<f64>) -> (Array2<f64>, Vec<f64>) {
    let w = l.weight.value.clone().into_dimensionality::<Ix2>().unwrap();
    let b = l.bias.value.clone().into_dimensionality::<Ix1>().unwrap().to_vec();
    (w, b)
}

fn dense(x: &[f64], w: &Array2<f64>, b: &[f64]) -> Vec<f64> {
    (0..w.ncols())
        .map(|j| b[j] + (0..w.nrows()).map(|i| x[i] * w[[i, j]]).sum::<f64>())
        .collect()
}

#[test]
fn lwc_forward_matches_hand_computation_with_identity_adjacency() {
    let cfg = tiny_model(3);
    let mut state = ModelState::<f64>::new(cfg.clone(), 5).unwrap();
    // Small hand-set weights keep every activation in a well-conditioned range.
    let mut r = rng(44);
    for (_, p) in state.fc.params_mut().into_iter().chain(state.gcn.params_mut()) {
        p.value.mapv_inplace(|_| r.random_range(-0.3..0.3));
    }
    let x = Array4::from_shape_fn((2, 16, 16, 3), |_| r.random_range(0.0..1.0));
    let a = Array2::eye(3);
    let y = lwc_forward(&state, &x, &a).unwrap();

    let feats = feature_forward(&state, Generator::Target, &x).unwrap();
    let (w1, b1) = linear_parts(&state.fc.first);
    let (w2, b2) = linear_parts(&state.fc.second);
    let g0 = state.gcn.weights[0].value.clone().into_dimensionality::<Ix2>().unwrap();
    let g1 = state.gcn.weights[1].value.clone().into_dimensionality::<Ix2>().unwrap();
    let e = &state.embedding.matrix;
    // With an identity adjacency each label row propagates on its own.
    let label_rows: Vec<Vec<f64>> = (0..3)
        .map(|i| {
            let z: Vec<f64> = dense(&e.row(i).to_vec(), &g0, &vec![0.0; g0.ncols()]).into_iter().map(leaky).collect();
            dense(&z, &g1, &vec![0.0; g1.ncols()])
        })
        .collect();
    for b in 0..2 {
        let hidden: Vec<f64> = dense(&feats.row(b).to_vec(), &w1, &b1).into_iter().map(leaky).collect();
        let f_fc = dense(&hidden, &w2, &b2);
        for i in 0..3 {
            let logit: f64 = f_fc.iter().zip(&label_rows[i]).map(|(p, q)| p * q).sum();
            let expected = 1.0 / (1.0 + (-logit).exp());
            assert!((y[[b, i]] - expected).abs() < 1e-6, "{} vs {expected}", y[[b, i]]);
            assert!(y[[b, i]] > 0.0 && y[[b, i]] < 1.0);
        }
    }
    assert_eq!(lwc_forward(&state, &x, &a).unwrap(), y);
    assert!(lwc_forward(&state, &x, &Array2::eye(4)).is_err());
}
