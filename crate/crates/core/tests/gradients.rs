//! Backprop against central finite differences for every layer type.

use rand::Rng;
use rbk_core::defense::losses;
use rbk_core::nn::{LayerSpec, Network, Padding, Selector};
use rbk_core::{rng, Tensor};

const H: f64 = 1e-5;

/// Scalar probe: `Σ w ⊙ logits` with fixed random weights, so every logit
/// contributes.
fn probe_weights(n: usize, k: usize) -> Tensor {
    let mut r = rng::stream(99, &[n as u64, k as u64]);
    Tensor::new(vec![n, k], (0..n * k).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn scalar(net: &Network, x: &Tensor, w: &Tensor) -> f64 {
    let z = net.logits(x).unwrap();
    z.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &[7]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(0.05..0.95)).collect()).unwrap()
}

fn check(analytic: f64, numeric: f64, what: &str) {
    if analytic.abs().max(numeric.abs()) <= 1e-8 {
        return;
    }
    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
    assert!(rel < 1e-6, "{what}: analytic {analytic} numeric {numeric} rel {rel}");
}

/// Compares parameter and input gradients of `net` at `x`.
fn gradient_check(net: &Network, x: &Tensor) {
    let w = probe_weights(x.rows(), net.n_classes());
    let trace = net.forward(x).unwrap();
    let (grads, dx) = net.backward(&trace, &w, true).unwrap();
    let grads = grads.unwrap();

    for (p, slot) in dx.data().iter().enumerate() {
        let mut xp = x.clone();
        xp.data_mut()[p] += H;
        let mut xm = x.clone();
        xm.data_mut()[p] -= H;
        let num = (scalar(net, &xp, &w) - scalar(net, &xm, &w)) / (2.0 * H);
        check(*slot, num, &format!("input {p}"));
    }

    for (li, g) in grads.layers.iter().enumerate() {
        let Some(g) = g else { continue };
        for (which, analytic) in [("weight", g.weight.data()), ("bias", g.bias.data())] {
            for (p, a) in analytic.iter().enumerate() {
                let bump = |d: f64| {
                    let mut n = net.clone();
                    let params = n.params_mut()[li].as_mut().unwrap();
                    let t = if which == "weight" { &mut params.weight } else { &mut params.bias };
                    t.data_mut()[p] += d;
                    scalar(&n, x, &w)
                };
                let num = (bump(H) - bump(-H)) / (2.0 * H);
                check(*a, num, &format!("layer {li} {which} {p}"));
            }
        }
    }
}

#[test]
fn dense_and_relu() {
    let layers = vec![
        LayerSpec::Dense { inputs: 5, outputs: 7 },
        LayerSpec::Relu,
        LayerSpec::Dense { inputs: 7, outputs: 3 },
    ];
    let mut net = Network::new(&[5], layers, 1).unwrap();
    // Non-zero biases keep ReLU inputs away from the kink.
    for (i, p) in net.params_mut().iter_mut().flatten().enumerate() {
        p.bias.data_mut().iter_mut().enumerate().for_each(|(j, b)| *b = 0.1 * (i + j) as f64 - 0.2);
    }
    gradient_check(&net, &random_input(&[4, 5], 1));
}

#[test]
fn conv_same_and_valid_with_pool_and_flatten() {
    for padding in [Padding::Same, Padding::Valid] {
        let layers = vec![
            LayerSpec::Conv2d { in_channels: 2, out_channels: 3, kernel: 3, padding },
            LayerSpec::Relu,
            LayerSpec::MaxPool2x2,
            LayerSpec::Flatten,
        ];
        let conv_out = match padding {
            Padding::Same => 3 * 3 * 3,
            Padding::Valid => 3 * 2 * 2,
        };
        let mut layers = layers;
        layers.push(LayerSpec::Dense { inputs: conv_out, outputs: 4 });
        let net = Network::new(&[2, 6, 6], layers, 2).unwrap();
        gradient_check(&net, &random_input(&[3, 2, 6, 6], 2));
    }
}

#[test]
fn small_cnn_input_gradients_match_selectors() {
    let net = Network::from_architecture(&"cnn:2,3,8".parse().unwrap(), &[1, 8, 8], 4, 3).unwrap();
    let x = random_input(&[2, 1, 8, 8], 3);
    let y = [1usize, 3];
    let g = net.input_gradient(&x, Selector::CrossEntropy(&y)).unwrap();
    let loss = |x: &Tensor| -> f64 {
        let z = net.logits(x).unwrap();
        (0..2).map(|i| losses::xent_single(z.row(i), y[i]).unwrap().0).sum()
    };
    for p in (0..g.len()).step_by(7) {
        let mut xp = x.clone();
        xp.data_mut()[p] += H;
        let mut xm = x.clone();
        xm.data_mut()[p] -= H;
        check(g.data()[p], (loss(&xp) - loss(&xm)) / (2.0 * H), &format!("xent input {p}"));
    }
}

#[test]
fn logits_do_not_depend_on_batch_composition() {
    let net = Network::from_architecture(&"cnn:3,4,16".parse().unwrap(), &[1, 12, 12], 5, 4).unwrap();
    let x = random_input(&[6, 1, 12, 12], 5);
    let all = net.logits(&x).unwrap();
    for i in 0..6 {
        let one = net.logits(&x.slice_rows(i, i + 1)).unwrap();
        assert_eq!(one.row(0), all.row(i));
    }
}
