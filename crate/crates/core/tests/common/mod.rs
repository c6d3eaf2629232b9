#![allow(dead_code)]

use cap_core::data::{synthetic_blobs, Dataset, Normalization};
use cap_core::network::{build_small_vgg, ConvLayer, ConvSpec, LinearLayer, Network, Stage};
use cap_core::train::{train, Momentum, TrainConfig};
use cap_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const NORM: Normalization = Normalization {
    mean: [0.3; 3],
    std: [0.25; 3],
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

fn conv(c_in: usize, c_out: usize, seed: u64) -> ConvLayer {
    let spec = ConvSpec {
        c_in,
        c_out,
        k: 3,
        stride: 1,
        pad: 1,
    };
    let mut layer = ConvLayer::zeros(spec);
    let std = (2.0 / (c_in * 9) as f64).sqrt();
    layer.weight = Tensor::randn(layer.weight.shape(), std, &mut rng(seed));
    layer.bias = Tensor::randn(&[c_out], 0.05, &mut rng(seed + 100));
    layer
}

/// Stem 3→4, conv 4→4 (the compressible one), conv 4→4, pooled classifier.
/// Inputs are `[3, side, side]`.
pub fn toy_pair_net(side: usize, seed: u64) -> Network {
    Network {
        input: [3, side, side],
        num_classes: 4,
        convs: vec![conv(3, 4, seed), conv(4, 4, seed + 1), conv(4, 4, seed + 2)],
        linear: LinearLayer {
            d_in: 4,
            d_out: 4,
            weight: Tensor::randn(&[4, 4], 0.5, &mut rng(seed + 3)),
            bias: Tensor::zeros(&[4]),
        },
        stages: vec![
            Stage::Conv(0),
            Stage::Relu,
            Stage::Conv(1),
            Stage::Relu,
            Stage::Conv(2),
            Stage::Relu,
            Stage::GlobalAvgPool,
            Stage::Linear,
        ],
    }
}

pub fn blobs(n: usize, seed: u64) -> (Dataset, Dataset) {
    let all = synthetic_blobs(2 * n, 4, seed).unwrap();
    (all.subset(0, n), all.subset(n, n))
}

/// Small VGG trained briefly on separable blobs.
pub fn trained_vgg(width: f64, epochs: usize, seed: u64) -> (Network, Dataset, Dataset) {
    let (tr, te) = blobs(256, seed + 1);
    let mut net = build_small_vgg(width, 4, seed).unwrap();
    let cfg = TrainConfig {
        epochs,
        batch_size: 32,
        seed,
        ..Default::default()
    };
    train(&mut net, &tr, None, &NORM, &cfg, &mut Momentum::default(), 0).unwrap();
    (net, tr, te)
}
