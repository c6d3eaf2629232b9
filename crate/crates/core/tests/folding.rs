//! Folding a projection into the kernels must reproduce the projected
//! network exactly.

mod common;

use std::collections::BTreeMap;

use cap_core::autodiff::{channel_project_forward, conv2d_forward, fold_in_forward, Graph};
use cap_core::compress::{compress_network, fold_into, student_block_forward, CompressionPlan, PairGeometry};
use cap_core::network::{build_small_resnet, build_small_vgg, Network, ResnetDepth};
use cap_core::proxy::random_orthonormal;
use cap_core::Tensor;

fn logits(net: &Network, x: &Tensor, projections: &BTreeMap<usize, Tensor>) -> Tensor {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let params = net.record_params(&mut g, |_| false);
    let proj = projections.iter().map(|(&l, p)| (l, g.constant(p.clone()))).collect();
    let trace = net.forward(&mut g, xv, &params, &proj).unwrap();
    g.value(trace.logits).clone()
}

fn max_rel(a: &Tensor, b: &Tensor) -> f64 {
    let scale = b.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.max_abs_diff(b) / scale
}

fn check_fold(net: &Network, ranks: &[(usize, usize)], seed: u64) -> f64 {
    let mut projections = BTreeMap::new();
    let mut folded = net.clone();
    for (i, &(l, r)) in ranks.iter().enumerate() {
        let c = net.convs[l].spec.c_out;
        let p = random_orthonormal(c, r, seed + i as u64).unwrap().to_tensor();
        fold_into(&mut folded, l, &p).unwrap();
        projections.insert(l, p);
    }
    folded.validate().unwrap();
    let mut worst: f64 = 0.0;
    // 100 random inputs in batches of 10
    for b in 0..10 {
        let x = common::randn(&[10, 3, 32, 32], seed * 100 + b);
        let a = logits(net, &x, &projections);
        let f = logits(&folded, &x, &BTreeMap::new());
        worst = worst.max(max_rel(&f, &a));
    }
    worst
}

#[test]
fn folded_vgg_matches_projected_forward() {
    let net = build_small_vgg(1.0, 4, 3).unwrap();
    assert!(check_fold(&net, &[(1, 3)], 1) < 1e-10);
    // consecutive compressed layers
    assert!(check_fold(&net, &[(1, 4), (2, 7)], 2) < 1e-10);
}

#[test]
fn folded_resnet_matches_projected_forward() {
    let net = build_small_resnet(ResnetDepth::Lite18, 4, 5).unwrap();
    let ranks: Vec<(usize, usize)> = net
        .compressible_layers()
        .into_iter()
        .map(|l| (l, net.convs[l].spec.c_out / 2))
        .collect();
    assert!(!ranks.is_empty());
    assert!(check_fold(&net, &ranks, 7) < 1e-10);
}

#[test]
fn block_forward_is_the_composition_of_primitives() {
    let x = common::randn(&[2, 3, 6, 6], 1);
    let w = common::randn(&[5, 3, 3, 3], 2);
    let b = common::randn(&[5], 3);
    let w2 = common::randn(&[4, 5, 3, 3], 4);
    let b2 = common::randn(&[4], 5);
    let p = random_orthonormal(5, 2, 6).unwrap().to_tensor();

    let relu = |t: Tensor| {
        let d = t.data().iter().map(|v| v.max(0.0)).collect();
        Tensor::new(t.shape(), d).unwrap()
    };
    let h = relu(channel_project_forward(&conv2d_forward(&x, &w, Some(&b), 1, 1).unwrap(), &p).unwrap());
    let want = relu(conv2d_forward(&h, &fold_in_forward(&w2, &p).unwrap(), Some(&b2), 1, 1).unwrap());

    let mut g = Graph::new();
    let vars: Vec<_> = [&x, &w, &b, &p, &w2, &b2].iter().map(|t| g.constant((*t).clone())).collect();
    let out = student_block_forward(&mut g, vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], PairGeometry::SAME_3X3)
        .unwrap();
    assert!(g.value(out).max_abs_diff(&want) < 1e-12);
}

#[test]
fn full_rank_plan_is_bit_identical() {
    let (net, train, _) = common::trained_vgg(1.0, 1, 0);
    let plan = CompressionPlan::parse("layer.all.keep_ratio = 1.0\nprojection_steps = 5\n").unwrap();
    let out = compress_network(&net, &plan, &train, &common::NORM).unwrap();
    assert_eq!(out.network, net);
    let x = common::randn(&[4, 3, 32, 32], 9);
    let a = logits(&net, &x, &BTreeMap::new());
    let b = logits(&out.network, &x, &BTreeMap::new());
    assert_eq!(a.data(), b.data());
    assert_eq!(out.report.flops_pct, 100.0);
}

#[test]
fn teacher_is_never_modified() {
    let (net, train, _) = common::trained_vgg(1.0, 1, 1);
    let before = net.param_hash();
    let plan = CompressionPlan::parse("layer.all.keep_ratio = 0.5\nprojection_steps = 10\nrelaxation_epochs = 1\nfinetune_epochs = 1\n")
        .unwrap();
    let out = compress_network(&net, &plan, &train, &common::NORM).unwrap();
    assert_eq!(net.param_hash(), before);
    assert_eq!(out.report.teacher_hash, before);
    assert_ne!(out.network.param_hash(), before);
}
