mod common;

use rbk_core::analytics::{self, ExampleRecord};
use rbk_core::attack::{self, AttackConfig};
use rbk_core::nn::{LayerSpec, Network, Selector};
use rbk_core::Tensor;

/// Examples whose linearized margin sits within this distance of ε are
/// excluded from exactness checks.
const BOUNDARY: f64 = 1e-9;

/// Independent ε_L for a linear model `z = Wx + b`: every logit gradient is a
/// row of `W`, so the ratio for class c is `(z_y − z_c) / ‖W_y − W_c‖₁`.
fn linear_eps(net: &Network, x: &[f64], y: usize) -> f64 {
    let p = net.params().iter().flatten().next().unwrap();
    let (k, d) = (p.weight.shape()[0], p.weight.shape()[1]);
    let w = p.weight.data();
    let z: Vec<f64> = (0..k)
        .map(|c| p.bias.data()[c] + (0..d).map(|j| w[c * d + j] * x[j]).sum::<f64>())
        .collect();
    (0..k)
        .filter(|&c| c != y)
        .map(|c| {
            let l1: f64 = (0..d).map(|j| (w[y * d + j] - w[c * d + j]).abs()).sum();
            (z[y] - z[c]) / l1
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn linear_model_margins_match_closed_form() {
    let (net, data) = common::linear_on_blobs();
    let recs = analytics::robustness_records(&net, &data).unwrap();
    for r in recs.iter().take(300) {
        let want = linear_eps(&net, data.images().row(r.index), r.label);
        assert!((r.eps_l - want).abs() <= 1e-12 * want.abs().max(1.0), "{} vs {want}", r.eps_l);
    }
}

#[test]
fn predicted_accuracy_is_exact_on_linear_models() {
    let (net, data) = common::linear_on_blobs();
    let recs = analytics::robustness_records(&net, &data).unwrap();
    for eps in [0.01, 0.05, 0.1, 0.2] {
        let r = attack::evaluate(&net, &data, Some(&AttackConfig::linearized(eps))).unwrap();
        let mut discordant = 0;
        for (rec, out) in recs.iter().zip(&r.outcomes) {
            if (rec.eps_l - eps).abs() < BOUNDARY {
                continue;
            }
            let predicted = rec.eps_l > eps;
            let empirical = out.adv_pred == out.true_label;
            discordant += usize::from(predicted != empirical);
        }
        assert_eq!(discordant, 0, "eps {eps}");
    }
}

#[test]
fn margin_sign_matches_correctness() {
    let (net, data) = common::mlp_on_blobs();
    let recs = analytics::robustness_records(&net, &data).unwrap();
    assert!(recs.iter().any(|r| r.predicted != r.label), "need some errors");
    for r in &recs {
        assert_eq!(r.eps_l > 0.0, r.predicted == r.label, "example {}", r.index);
    }
    let clean = recs.iter().filter(|r| r.predicted == r.label).count() as f64 / recs.len() as f64;
    assert_eq!(analytics::predicted_accuracy_of(&recs, 0.0), clean);
}

#[test]
fn margins_are_scale_invariant() {
    let (net, data) = common::mlp_on_blobs();
    let data = data.take(100);
    let base = analytics::robustness_records(&net, &data).unwrap();
    for c in [0.5, 3.0, 40.0] {
        let scaled = analytics::robustness_records(&net.with_scaled_output(c), &data).unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            assert!((a.eps_l - b.eps_l).abs() <= 1e-10 * a.eps_l.abs().max(1e-3));
            assert!((b.logit_gap - c * a.logit_gap).abs() <= 1e-9 * b.logit_gap.abs().max(1.0));
        }
    }
}

#[test]
fn jacobian_rows_match_finite_differences() {
    let (net, data) = common::mlp_on_blobs();
    let x = data.images().slice_rows(0, 1);
    let (_, jac) = net.logit_jacobians(&x).unwrap();
    let h = 1e-5;
    for (c, jc) in jac.iter().enumerate() {
        let sel = net.input_gradient(&x, Selector::Logit(c)).unwrap();
        assert_eq!(sel.data(), jc.row(0));
        for j in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[j] += h;
            let mut xm = x.clone();
            xm.data_mut()[j] -= h;
            let num = (net.logits(&xp).unwrap().row(0)[c] - net.logits(&xm).unwrap().row(0)[c]) / (2.0 * h);
            assert!((num - jc.row(0)[j]).abs() <= 1e-6 * num.abs().max(1e-2));
        }
    }
}

#[test]
fn bias_free_linear_stack_is_homogeneous() {
    let layers = vec![
        LayerSpec::Dense { inputs: 4, outputs: 6 },
        LayerSpec::Dense { inputs: 6, outputs: 3 },
    ];
    let mut net = Network::new(&[4], layers, 5).unwrap();
    for p in net.params_mut().iter_mut().flatten() {
        p.bias.data_mut().fill(0.0);
    }
    let x = Tensor::from_rows(&[vec![0.3, -0.2, 0.9, 0.1]]).unwrap();
    let z = net.logits(&x).unwrap();
    let z2 = net.logits(&x.scale(2.5)).unwrap();
    for (a, b) in z.data().iter().zip(z2.data()) {
        assert!((2.5 * a - b).abs() < 1e-12);
    }
}

#[test]
fn coherence_and_suite_are_consistent() {
    let (net, data) = common::mlp_on_blobs();
    let data = data.take(64);
    let recs: Vec<ExampleRecord> = analytics::robustness_records(&net, &data).unwrap();
    let r = &recs[3];
    let x = data.images().slice_rows(3, 4);
    let cos = analytics::gradient_coherence(&net, &x, r.label, r.runner_up_class).unwrap();
    assert!((cos - r.cosine).abs() < 1e-12);
    let suite = analytics::distribution_suite(&net, &data, 0.1).unwrap();
    for (name, h) in &suite.histograms {
        let want = match name.as_str() {
            "logit_gap_all_pairs" => 64 * 3,
            "abs_logit" | "grad_l1" => 64 * 4,
            _ => 64,
        };
        assert_eq!(h.total(), want, "{name}");
    }
    assert_eq!(suite.summary.examples, 64);
}
