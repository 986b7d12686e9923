#![allow(dead_code)]

use rbk_core::data::{self, Dataset};
use rbk_core::defense::{self, TrainConfig};
use rbk_core::nn::{Architecture, Network};

pub fn blobs(n: usize, classes: usize, dim: usize, seed: u64) -> Dataset {
    data::synth_blobs(n, classes, dim, 0.5, seed).unwrap()
}

pub fn trained(arch: Architecture, data: &Dataset, iterations: usize, seed: u64) -> Network {
    let cfg = TrainConfig {
        arch,
        batch_size: 25,
        ..TrainConfig::natural(iterations, seed)
    };
    defense::train(&cfg, data).unwrap().0
}

pub fn linear_on_blobs() -> (Network, Dataset) {
    let d = blobs(2000, 3, 4, 11);
    (trained(Architecture::Linear, &d, 300, 1), d)
}

pub fn mlp_on_blobs() -> (Network, Dataset) {
    let d = blobs(600, 4, 6, 12);
    (trained(Architecture::Mlp { hidden: vec![16] }, &d, 300, 2), d)
}

pub fn mnist_mlp() -> (Network, Dataset) {
    let split = data::load_mnist(data::bundled_mnist_dir()).unwrap();
    let net = trained(Architecture::Mlp { hidden: vec![32] }, &split.train, 400, 3);
    (net, split.test.take(200))
}
