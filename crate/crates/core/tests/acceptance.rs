//! Acceptance run: one PASS/FAIL line per criterion. Exits non-zero when any
//! criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use cap_core::autodiff::Graph;
use cap_core::checkpoint::Checkpoint;
use cap_core::compress::{
    fold_into, optimize_projection, reconstruction_error, recon_sites, CompressionPlan, DataStream,
    ProjectionSettings, TeacherSnapshot,
};
use cap_core::cost::{compressed_skeleton, count_costs, factorization_variant, flops_of};
use cap_core::gradcheck::{self, GradcheckConfig};
use cap_core::harness::{self, Arm, RunConfig};
use cap_core::linalg::{Mat, DEFAULT_GUARD};
use cap_core::network::{ConvLayer, ConvSpec, LinearLayer, Network, Stage};
use cap_core::proxy::{random_orthonormal, ProjectionProxy};
use cap_core::{train, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load_cfg(name: &str) -> RunConfig {
    RunConfig::load(&configs().join(name), None).unwrap()
}

fn load_plan(name: &str) -> CompressionPlan {
    CompressionPlan::parse(&std::fs::read_to_string(configs().join(name)).unwrap()).unwrap()
}

fn gradient_oracles() -> Outcome {
    let start = Instant::now();
    let cfg = GradcheckConfig::default();
    let results = gradcheck::run_all(&cfg).unwrap();
    let elapsed = start.elapsed();
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let enough = results.iter().all(|r| r.cases >= 50);
    // negative control: a corrupted gradient must be caught
    let (name, generator) = gradcheck::suites()[0];
    let corrupted = gradcheck::run_suite(name, generator, &cfg, &|_, t: Tensor| {
        let d = t.data().iter().map(|v| v * 1.01 + 1e-3).collect();
        Tensor::new(t.shape(), d).unwrap()
    })
    .unwrap();
    let pass = results.iter().all(|r| r.passed) && enough && !corrupted.passed && elapsed < Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "{} suites, max rel err {worst:.2e} (< 1e-4), corrupted backward caught: {}, {:.1}s",
            results.len(),
            !corrupted.passed,
            elapsed.as_secs_f64()
        ),
    )
}

fn orthonormality() -> Outcome {
    let cfg = load_cfg("toy_vgg.cfg");
    let base = harness::run_train(&cfg).unwrap().checkpoint;
    let plan = CompressionPlan {
        projection_steps: 250,
        ..load_plan("half.plan")
    };
    let out = harness::run_compress(&cfg, &base, &plan).unwrap();
    let r = &out.summary.report;
    outcome(
        r.projection_steps_total >= 500 && r.max_orthonormality_defect < 1e-6,
        format!(
            "{} proxy steps, max |PᵀP − I| = {:.2e} (< 1e-6)",
            r.projection_steps_total, r.max_orthonormality_defect
        ),
    )
}

fn logits(net: &Network, x: &Tensor, projections: &BTreeMap<usize, Tensor>) -> Tensor {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let params = net.record_params(&mut g, |_| false);
    let proj = projections.iter().map(|(&l, p)| (l, g.constant(p.clone()))).collect();
    let trace = net.forward(&mut g, xv, &params, &proj).unwrap();
    g.value(trace.logits).clone()
}

fn folding() -> Outcome {
    let (net, train_set, _) = common::trained_vgg(2.0, 2, 0);
    let mut projections = BTreeMap::new();
    let mut folded = net.clone();
    for (l, r) in [(1, 8), (2, 16)] {
        let p = random_orthonormal(net.convs[l].spec.c_out, r, l as u64).unwrap().to_tensor();
        fold_into(&mut folded, l, &p).unwrap();
        projections.insert(l, p);
    }
    let mut worst: f64 = 0.0;
    for b in 0..10 {
        let x = common::randn(&[10, 3, 32, 32], 500 + b);
        let a = logits(&net, &x, &projections);
        let f = logits(&folded, &x, &BTreeMap::new());
        let scale = a.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(f.max_abs_diff(&a) / scale);
    }
    let identity = CompressionPlan::parse("layer.all.keep_ratio = 1.0\n").unwrap();
    let same = cap_core::compress::compress_network(&net, &identity, &train_set, &common::NORM).unwrap().network;
    let x = common::randn(&[10, 3, 32, 32], 999);
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let identical = bits(&net.predict(&x).unwrap()) == bits(&same.predict(&x).unwrap());
    outcome(
        worst < 1e-10 && identical,
        format!("folded vs projected on 100 inputs: {worst:.2e} (< 1e-10); full-rank plan bit-identical: {identical}"),
    )
}

fn conv(c_in: usize, c_out: usize) -> ConvLayer {
    ConvLayer::zeros(ConvSpec {
        c_in,
        c_out,
        k: 3,
        stride: 1,
        pad: 1,
    })
}

fn cost_accounting() -> Outcome {
    // stem, then the 64→64→64 pair on 16×16 maps
    let net = Network {
        input: [64, 16, 16],
        num_classes: 2,
        convs: vec![conv(64, 64), conv(64, 64), conv(64, 64)],
        linear: LinearLayer {
            d_in: 64,
            d_out: 2,
            weight: Tensor::zeros(&[2, 64]),
            bias: Tensor::zeros(&[2]),
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
    };
    let ranks = BTreeMap::from([(1, 32)]);
    let cap = count_costs(&compressed_skeleton(&net, &ranks).unwrap(), 1).unwrap();
    let fact = count_costs(&factorization_variant(&net, &ranks, 1).unwrap(), 1).unwrap();
    let pair = |names: &[&str]| names.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let cap_pair = flops_of(&cap, &pair(&["conv1", "conv2"]));
    // the reprojection conv is appended as conv3
    let fact_pair = flops_of(&fact, &pair(&["conv1", "conv3", "conv2"]));
    let half = 2 * cap_pair == fact_pair;

    let vgg = cap_core::network::build_small_vgg(2.0, 4, 0).unwrap();
    let vgg_ranks = CompressionPlan::parse("layer.all.keep_ratio = 0.5\n").unwrap().ranks(&vgg).unwrap();
    let mem = |n: &Network| count_costs(n, 1).unwrap().peak_activation_bytes;
    let (m_cap, m_orig, m_fact) = (
        mem(&compressed_skeleton(&vgg, &vgg_ranks).unwrap()),
        mem(&vgg),
        mem(&factorization_variant(&vgg, &vgg_ranks, 1).unwrap()),
    );
    let ordered = m_cap < m_orig && m_orig < m_fact;
    outcome(
        half && ordered,
        format!(
            "pair FLOPs CaP {cap_pair} vs factorization {fact_pair} (ratio {:.4}, exact half: {half}); \
             peak bytes CaP {m_cap} < original {m_orig} < factorization {m_fact}: {ordered}",
            cap_pair as f64 / fact_pair as f64
        ),
    )
}

fn site_error(net: &Network, teacher: &[Tensor], x: &Tensor, site: usize, p: &Tensor) -> f64 {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let params = net.record_params(&mut g, |_| false);
    let pv = g.constant(p.clone());
    let trace = net.forward(&mut g, xv, &params, &BTreeMap::from([(1, pv)])).unwrap();
    reconstruction_error(g.value(trace.stage_outputs[site]), &teacher[site], true).unwrap()
}

/// Top-`r` eigenvectors of the channel second-moment (or covariance) of `y`.
fn pca_basis(y: &Tensor, r: usize, center: bool) -> Tensor {
    let [n, c, h, w] = y.dims4().unwrap();
    let hw = h * w;
    let mut mean = vec![0.0; c];
    if center {
        for s in 0..n {
            for (ch, m) in mean.iter_mut().enumerate() {
                *m += y.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= (n * hw) as f64);
    }
    let mut cov = DMatrix::<f64>::zeros(c, c);
    for s in 0..n {
        for q in 0..hw {
            let v: Vec<f64> = (0..c).map(|ch| y.data()[(s * c + ch) * hw + q] - mean[ch]).collect();
            for i in 0..c {
                for j in 0..c {
                    cov[(i, j)] += v[i] * v[j];
                }
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    Mat::from_fn(c, r, |i, j| eig.eigenvectors[(i, order[j])]).to_tensor()
}

fn pca_comparison() -> Outcome {
    let start = Instant::now();
    let net = common::toy_pair_net(32, 11);
    let (data, _) = common::blobs(128, 12);
    let teacher = TeacherSnapshot::new(&net);
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x, _) = data.batch(&idx, &common::NORM);
    let targets = teacher.stage_outputs(&x).unwrap();
    let site = net.recon_site(1).unwrap();

    let mut proxies = BTreeMap::from([(
        1,
        ProjectionProxy::init(4, 2, 5, Some(cap_core::proxy::channel_warm_start(&net.convs[1].weight, 2).unwrap())).unwrap(),
    )]);
    let sites = recon_sites(&net, &[1], &BTreeSet::from([1])).unwrap();
    let settings = ProjectionSettings {
        steps: 600,
        lr: 0.05,
        momentum: 0.9,
        gamma: 0.0,
        normalize: true,
        guard: DEFAULT_GUARD,
    };
    let mut stream = DataStream::new(&data, common::NORM, 32, 3);
    optimize_projection(&net, &teacher, &mut proxies, &BTreeMap::new(), &sites, &settings, &mut stream).unwrap();
    let p = proxies.get_mut(&1).unwrap().phi().unwrap().to_tensor();
    let optimized = site_error(&net, &targets, &x, site, &p);

    // stage 2 is conv1's raw output, stage 3 the same after relu
    let pca = [(2, false), (2, true), (3, false), (3, true)]
        .into_iter()
        .map(|(stage, center)| site_error(&net, &targets, &x, site, &pca_basis(&targets[stage], 2, center)))
        .fold(f64::INFINITY, f64::min);
    let random = (0..20)
        .map(|s| site_error(&net, &targets, &x, site, &random_orthonormal(4, 2, 7000 + s).unwrap().to_tensor()))
        .fold(f64::INFINITY, f64::min);
    let elapsed = start.elapsed();
    outcome(
        optimized <= 1.05 * pca && optimized < random && elapsed < Duration::from_secs(300),
        format!(
            "optimized {optimized:.4e}, best PCA {pca:.4e} (ratio {:.3}, ≤ 1.05), best of 20 random {random:.4e}, {:.1}s",
            optimized / pca,
            elapsed.as_secs_f64()
        ),
    )
}

fn ablation() -> Outcome {
    let start = Instant::now();
    let cfg = load_cfg("toy_resnet.cfg");
    let base = harness::run_train(&cfg).unwrap().checkpoint.network;
    let a = harness::run_ablate(&cfg, &base, &load_plan("half_simultaneous.plan"), 1).unwrap();
    let (pr, po, rr, fs) = (
        a.mean(Arm::ProjectionRelax),
        a.mean(Arm::ProjectionOnly),
        a.mean(Arm::RandomRelax),
        a.mean(Arm::FromScratch),
    );
    let elapsed = start.elapsed();
    outcome(
        pr >= po && pr >= rr && elapsed < Duration::from_secs(1800),
        format!(
            "mean acc over {} seeds: projection+relax {pr:.4}, projection-only {po:.4}, random+relax {rr:.4}, from scratch {fs:.4}, {:.0}s",
            cfg.ablate_seeds.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn sweep() -> Outcome {
    let cfg = load_cfg("toy_vgg.cfg");
    let base = harness::run_train(&cfg).unwrap().checkpoint.network;
    let rows = harness::run_sweep(&cfg, &base, &CompressionPlan::default()).unwrap();
    let (_, test_set) = cfg.load_data().unwrap();
    let base_acc = train::accuracy(&base, &test_set, &cfg.data.norm).unwrap();
    let trends = harness::sweep_trends(&rows);
    let worst_drop = rows
        .iter()
        .filter(|r| r.ratio >= 0.5)
        .map(|r| base_acc - r.accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    let monotone = trends.iter().all(|&(_, rho)| rho > 0.9);
    outcome(
        monotone && worst_drop < 0.01,
        format!(
            "spearman per layer {:?} (> 0.9); worst accuracy drop up to 50% compression {:.4} (< 0.01)",
            trends.iter().map(|(l, r)| format!("{l}: {r:.3}")).collect::<Vec<_>>(),
            worst_drop
        ),
    )
}

fn determinism() -> Outcome {
    let text = "seed = 5\ndata.train_size = 96\ndata.test_size = 48\nmodel.width = 1.0\ntrain.epochs = 2\n\
                sweep.layers = 1\nsweep.ratios = 0.5, 1.0\n";
    let plan = CompressionPlan::parse("layer.all.keep_ratio = 0.5\nprojection_steps = 10\nfinetune_epochs = 1\n").unwrap();
    let run = || {
        let cfg = RunConfig::parse(text, None).unwrap();
        let t = harness::run_train(&cfg).unwrap();
        let c = harness::run_compress(&cfg, &t.checkpoint, &plan).unwrap();
        let s = harness::run_sweep(&cfg, &t.checkpoint.network, &plan).unwrap();
        vec![
            t.checkpoint.to_bytes().unwrap(),
            train::metrics_csv(&t.metrics).unwrap().into_bytes(),
            c.checkpoint.to_bytes().unwrap(),
            harness::to_json(&c.summary).unwrap().into_bytes(),
            harness::to_csv(harness::SWEEP_HEADER, &s).unwrap().into_bytes(),
        ]
    };
    let first = run();
    let identical = first == run();
    let ck = Checkpoint::from_bytes(&first[2]).unwrap();
    let again = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    let x = common::randn(&[8, 3, 32, 32], 1);
    let bits = |n: &Network| n.predict(&x).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let round_trip = bits(&ck.network) == bits(&again.network) && again.to_bytes().unwrap() == first[2];
    outcome(
        identical && round_trip,
        format!("repeated artifacts byte-identical: {identical}; checkpoint round trip bit-exact: {round_trip}"),
    )
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 8] = [
        ("gradient oracles", gradient_oracles),
        ("orthonormality", orthonormality),
        ("folding identity", folding),
        ("cost accounting", cost_accounting),
        ("PCA comparison", pca_comparison),
        ("ablation ordering", ablation),
        ("sweep trends", sweep),
        ("determinism and persistence", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| f == &n.to_string()) {
            continue;
        }
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!("criterion {n} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
