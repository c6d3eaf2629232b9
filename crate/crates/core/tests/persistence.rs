//! Checkpoints round-trip exactly and every artifact is a pure function of
//! its config and seed.

mod common;

use cap_core::checkpoint::Checkpoint;
use cap_core::compress::CompressionPlan;
use cap_core::harness::{self, RunConfig};
use cap_core::proxy::ProjectionProxy;
use cap_core::train;

const CONFIG: &str = "\
seed = 3
data.kind = synthetic_blobs
data.classes = 4
data.train_size = 96
data.test_size = 48
model.arch = vgg
model.width = 1.0
train.epochs = 2
";

const PLAN: &str = "\
layer.all.keep_ratio = 0.5
projection_steps = 8
relaxation_epochs = 1
finetune_epochs = 1
";

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = RunConfig::parse(CONFIG, None).unwrap();
    let mut ck = harness::run_train(&cfg).unwrap().checkpoint;
    ck.plan = Some(CompressionPlan::parse(PLAN).unwrap().to_text());
    let mut proxy = ProjectionProxy::init(8, 3, 11, None).unwrap();
    let grad = cap_core::linalg::Mat::from_fn(8, 3, |i, j| (i * 3 + j) as f64 * 1e-3);
    proxy.sgd_step(&grad, 0.1, 0.9);
    ck.proxies.insert(1, proxy);

    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.network, ck.network);
    assert_eq!(back.optimizer, ck.optimizer);
    assert_eq!(back.rng, ck.rng);
    assert_eq!(back.plan, ck.plan);
    assert_eq!(back.proxies[&1].x(), ck.proxies[&1].x());
    assert_eq!(back.proxies[&1].velocity(), ck.proxies[&1].velocity());
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let x = common::randn(&[5, 3, 32, 32], 1);
    let a = ck.network.predict(&x).unwrap();
    let b = back.network.predict(&x).unwrap();
    let bits = |t: &cap_core::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    ck.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&path).unwrap().network, ck.network);
}

#[test]
fn training_and_compression_are_deterministic() {
    let run = || {
        let cfg = RunConfig::parse(CONFIG, None).unwrap();
        let t = harness::run_train(&cfg).unwrap();
        let plan = CompressionPlan::parse(PLAN).unwrap();
        let c = harness::run_compress(&cfg, &t.checkpoint, &plan).unwrap();
        (
            t.checkpoint.to_bytes().unwrap(),
            train::metrics_csv(&t.metrics).unwrap(),
            c.checkpoint.to_bytes().unwrap(),
            harness::to_json(&c.summary).unwrap(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn seed_override_changes_the_run() {
    let a = harness::run_train(&RunConfig::parse(CONFIG, None).unwrap()).unwrap();
    let b = harness::run_train(&RunConfig::parse(CONFIG, Some(4)).unwrap()).unwrap();
    assert_ne!(a.checkpoint.network.param_hash(), b.checkpoint.network.param_hash());
}
