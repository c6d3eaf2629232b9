//! End-to-end behaviour of projection training, relaxation and the
//! compression report.

mod common;

use std::collections::{BTreeMap, BTreeSet};

use cap_core::compress::{
    apply_plan_shapes, compress_network, kernel_relaxation, objective_value, optimize_projection, recon_sites, CompressionPlan,
    DataStream, ProjectionSettings, TeacherSnapshot,
};
use cap_core::cost::count_costs;
use cap_core::data::synthetic_blobs;
use cap_core::linalg::DEFAULT_GUARD;
use cap_core::network::{build_small_resnet, Network, ResnetDepth};
use cap_core::proxy::{channel_warm_start, ProjectionProxy};
use cap_core::train::{train, Momentum, TrainConfig};

fn settings(steps: usize, lr: f64, momentum: f64) -> ProjectionSettings {
    ProjectionSettings {
        steps,
        lr,
        momentum,
        gamma: 0.0,
        normalize: true,
        guard: DEFAULT_GUARD,
    }
}

#[test]
fn small_steps_on_a_full_batch_never_increase_the_loss() {
    let net = common::toy_pair_net(32, 4);
    let (data, _) = common::blobs(64, 2);
    let teacher = TeacherSnapshot::new(&net);
    let mut proxies = BTreeMap::from([(1, ProjectionProxy::init(4, 2, 7, None).unwrap())]);
    let sites = recon_sites(&net, &[1], &BTreeSet::from([1])).unwrap();
    let mut stream = DataStream::new(&data, common::NORM, data.len(), 0);
    let log = optimize_projection(&net, &teacher, &mut proxies, &BTreeMap::new(), &sites, &settings(60, 1e-3, 0.0), &mut stream)
        .unwrap();
    for w in log.losses.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} then {}", w[0], w[1]);
    }
    assert!(log.losses.last() < log.losses.first());
    assert!(log.max_orthonormality_defect < 1e-10);
}

#[test]
fn full_rank_projection_reconstructs_exactly() {
    let net = common::toy_pair_net(32, 5);
    let (data, _) = common::blobs(64, 3);
    let teacher = TeacherSnapshot::new(&net);
    let warm = channel_warm_start(&net.convs[1].weight, 4).unwrap();
    let mut proxies = BTreeMap::from([(1, ProjectionProxy::init(4, 4, 1, Some(warm)).unwrap())]);
    let sites = recon_sites(&net, &[1], &BTreeSet::from([1])).unwrap();
    let mut stream = DataStream::new(&data, common::NORM, 16, 0);
    let log = optimize_projection(&net, &teacher, &mut proxies, &BTreeMap::new(), &sites, &settings(20, 0.05, 0.9), &mut stream)
        .unwrap();
    assert!(*log.losses.last().unwrap() < 1e-10);
}

#[test]
fn relaxation_does_not_hurt_held_out_reconstruction() {
    for seed in 0..3 {
        let (net, train_set, test_set) = common::trained_vgg(1.0, 2, seed);
        let plan = CompressionPlan::parse(&format!(
            "layer.all.keep_ratio = 0.25\nprojection_steps = 20\nrelaxation_epochs = 0\ngamma = 0\nseed = {seed}\n"
        ))
        .unwrap();
        let out = compress_network(&net, &plan, &train_set, &common::NORM).unwrap();
        let teacher = TeacherSnapshot::new(&net);
        let layers = [1, 2];
        let sites = recon_sites(&net, &layers, &BTreeSet::from(layers)).unwrap();
        let idx: Vec<usize> = (0..test_set.len()).collect();
        let (x, y) = test_set.batch(&idx, &common::NORM);
        let before = objective_value(&out.network, &teacher, &sites, 0.0, true, &x, &y).unwrap();
        let mut relaxed = out.network.clone();
        let relax_plan = CompressionPlan {
            relaxation_epochs: 2,
            ..plan.clone()
        };
        kernel_relaxation(&mut relaxed, &teacher, &layers, &relax_plan, &train_set, &common::NORM).unwrap();
        let after = objective_value(&relaxed, &teacher, &sites, 0.0, true, &x, &y).unwrap();
        assert!(after <= before, "seed {seed}: {before} -> {after}");

        let mut untouched = out.network.clone();
        kernel_relaxation(&mut untouched, &teacher, &layers, &plan, &train_set, &common::NORM).unwrap();
        assert_eq!(untouched, out.network);
    }
}

#[test]
fn skeleton_cost_equals_compressed_cost() {
    let (net, train_set, _) = common::trained_vgg(1.0, 1, 3);
    let plan = CompressionPlan::parse("layer.1.keep_ratio = 0.5\nlayer.2.rank = 5\nprojection_steps = 5\n").unwrap();
    let out = compress_network(&net, &plan, &train_set, &common::NORM).unwrap();
    let skeleton = count_costs(&apply_plan_shapes(&net, &plan).unwrap(), 1).unwrap();
    let actual = count_costs(&out.network, 1).unwrap();
    assert_eq!(skeleton.flops, actual.flops);
    assert_eq!(skeleton.param_count, actual.param_count);
    assert_eq!(skeleton.peak_activation_bytes, actual.peak_activation_bytes);
    assert_eq!(out.report.compressed, actual);
}

#[test]
fn empty_plan_leaves_network_unchanged() {
    let (net, train_set, _) = common::trained_vgg(1.0, 1, 4);
    let plan = CompressionPlan::parse("# nothing to compress\n").unwrap();
    assert!(plan.is_empty());
    let out = compress_network(&net, &plan, &train_set, &common::NORM).unwrap();
    assert_eq!(out.network, net);
    assert_eq!(out.report.flops_pct, 100.0);
    assert_eq!(out.report.param_pct, 100.0);
    assert_eq!(out.report.peak_mem_pct, 100.0);
}

fn toy_resnet() -> (Network, cap_core::data::Dataset) {
    let net = build_small_resnet(ResnetDepth::Lite18, 4, 0).unwrap();
    (net, synthetic_blobs(64, 4, 0).unwrap())
}

#[test]
fn toy_resnet_half_plan_cost_is_about_half() {
    let (net, data) = toy_resnet();
    let plan = CompressionPlan::parse("mode = simultaneous\nlayer.all.keep_ratio = 0.5\nprojection_steps = 2\nrelaxation_epochs = 0\n")
        .unwrap();
    let out = compress_network(&net, &plan, &data, &common::NORM).unwrap();
    let pct = out.report.flops_pct;
    assert!((45.0..=55.0).contains(&pct), "{pct}");
    let exact = 100.0 * count_costs(&out.network, 1).unwrap().flops as f64 / count_costs(&net, 1).unwrap().flops as f64;
    assert_eq!(pct, exact);
}

#[test]
fn two_round_never_projects_block_final_convs() {
    let (net, data) = toy_resnet();
    let plan = CompressionPlan::parse(
        "mode = simultaneous\ntwo_round = true\nlayer.all.keep_ratio = 0.5\nprojection_steps = 2\nrelaxation_epochs = 0\n",
    )
    .unwrap();
    let out = compress_network(&net, &plan, &data, &common::NORM).unwrap();
    for &l in out.projections.keys() {
        assert_eq!(net.protection(l), None, "layer {l}");
    }
    let rounds: Vec<usize> = out.report.rounds.concat();
    assert_eq!(rounds, net.compressible_layers());
    // a block-final conv named explicitly is refused
    let final_conv = (0..net.convs.len())
        .find(|&l| net.protection(l) == Some(cap_core::network::Protection::BlockFinal))
        .unwrap();
    let bad = CompressionPlan::parse(&format!("mode = simultaneous\nlayer.{final_conv}.keep_ratio = 0.5\n")).unwrap();
    assert!(compress_network(&net, &bad, &data, &common::NORM).is_err());
}

#[test]
fn ten_epochs_on_separable_blobs_fit_the_training_set() {
    let (train_set, _) = common::blobs(256, 9);
    let mut net = cap_core::network::build_small_vgg(1.0, 4, 9).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        ..Default::default()
    };
    let rows = train(&mut net, &train_set, None, &common::NORM, &cfg, &mut Momentum::default(), 0).unwrap();
    assert!(rows.last().unwrap().train_acc > 0.95, "{:?}", rows.last());
}

#[test]
fn two_round_splits_alternate_convs_inside_a_block() {
    use cap_core::network::{ConvLayer, ConvSpec, LinearLayer, Stage};
    let spec = |c_in, c_out| ConvSpec {
        c_in,
        c_out,
        k: 3,
        stride: 1,
        pad: 1,
    };
    let net = Network {
        input: [3, 8, 8],
        num_classes: 2,
        convs: vec![
            ConvLayer::zeros(spec(3, 4)),
            ConvLayer::zeros(spec(4, 4)),
            ConvLayer::zeros(spec(4, 4)),
            ConvLayer::zeros(spec(4, 4)),
        ],
        linear: LinearLayer {
            d_in: 4,
            d_out: 2,
            weight: cap_core::Tensor::zeros(&[2, 4]),
            bias: cap_core::Tensor::zeros(&[2]),
        },
        stages: vec![
            Stage::Conv(0),
            Stage::Relu,
            Stage::Residual {
                body: vec![Stage::Conv(1), Stage::Relu, Stage::Conv(2), Stage::Relu, Stage::Conv(3)],
                shortcut: None,
            },
            Stage::GlobalAvgPool,
            Stage::Linear,
        ],
    };
    net.validate().unwrap();
    assert_eq!(net.compressible_layers(), vec![1, 2]);
    let (first, second) = cap_core::compress::two_round_split(&net, &[1, 2]);
    assert_eq!((first, second), (vec![1], vec![2]));
}
