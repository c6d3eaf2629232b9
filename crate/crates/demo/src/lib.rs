//! In-browser playground for the compression library. Every export returns a
//! JSON string so the page needs no generated bindings beyond plain calls.

use std::collections::{BTreeMap, BTreeSet};

use cap_core::compress::{
    fold_into, optimize_projection, recon_sites, reconstruction_error, CompressionPlan, DataStream,
    ProjectionSettings, TeacherSnapshot,
};
use cap_core::cost::{compressed_skeleton, count_costs, factorization_variant, CostReport};
use cap_core::data::{synthetic_blobs, Normalization};
use cap_core::linalg::{thin_svd, Mat, DEFAULT_GUARD};
use cap_core::network::{build_small_vgg, ConvLayer, ConvSpec, LinearLayer, Network, Stage};
use cap_core::proxy::{channel_warm_start, random_orthonormal, ProjectionProxy};
use cap_core::Tensor;
use serde::Serialize;
use wasm_bindgen::prelude::*;

type Result<T> = cap_core::Result<T>;

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string(v)?)
}

fn js(e: cap_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[derive(Serialize)]
struct Costs {
    flops: u64,
    params: usize,
    peak_bytes: u64,
}

impl From<&CostReport> for Costs {
    fn from(r: &CostReport) -> Self {
        Costs {
            flops: r.flops,
            params: r.param_count,
            peak_bytes: r.peak_activation_bytes,
        }
    }
}

#[derive(Serialize)]
struct CostComparison {
    ranks: BTreeMap<usize, usize>,
    original: Costs,
    cap: Costs,
    factorization: Costs,
}

/// Costs of the small VGG at `keep_ratio` for CaP and for factorization with
/// a 1×1 reprojection.
pub fn compression_costs(width: f64, keep_ratio: f64) -> Result<String> {
    let net = build_small_vgg(width, 10, 0)?;
    let plan = CompressionPlan::parse(&format!("layer.all.keep_ratio = {keep_ratio}\n"))?;
    let ranks = plan.ranks(&net)?;
    let cost = |n: &Network| count_costs(n, 1).map(|r| Costs::from(&r));
    json(&CostComparison {
        original: cost(&net)?,
        cap: cost(&compressed_skeleton(&net, &ranks)?)?,
        factorization: cost(&factorization_variant(&net, &ranks, 1)?)?,
        ranks,
    })
}

#[derive(Serialize)]
struct Nearest {
    p: Vec<f64>,
    sigma: Vec<f64>,
    defect: f64,
    distance: f64,
}

/// Nearest matrix with orthonormal columns to the row-major `rows × cols`
/// matrix in `values`.
pub fn nearest_orthonormal(values: &[f64], rows: usize, cols: usize) -> Result<String> {
    let x = Mat::new(rows, cols, values.to_vec())?;
    let f = thin_svd(&x)?;
    let p = f.polar();
    json(&Nearest {
        defect: p.orthonormality_defect(),
        distance: x.sub(&p).frobenius(),
        sigma: f.sigma,
        p: p.data().to_vec(),
    })
}

const NORM: Normalization = Normalization {
    mean: [0.3; 3],
    std: [0.25; 3],
};

fn layer(c_in: usize, c_out: usize, rng: &mut u64) -> ConvLayer {
    // tiny xorshift, enough for a demo initialization
    let mut next = || {
        *rng ^= *rng << 13;
        *rng ^= *rng >> 7;
        *rng ^= *rng << 17;
        (*rng >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    let mut l = ConvLayer::zeros(ConvSpec {
        c_in,
        c_out,
        k: 3,
        stride: 1,
        pad: 1,
    });
    let scale = (24.0 / (c_in * 9) as f64).sqrt();
    l.weight.data_mut().iter_mut().for_each(|w| *w = scale * next());
    l.bias.data_mut().iter_mut().for_each(|b| *b = 0.1 * next());
    l
}

/// Stem 3→4, the 4→8 layer being compressed, then 8→8.
fn toy_net(seed: u64) -> Network {
    let mut rng = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    Network {
        input: [3, 32, 32],
        num_classes: 4,
        convs: vec![layer(3, 4, &mut rng), layer(4, 8, &mut rng), layer(8, 8, &mut rng)],
        linear: LinearLayer {
            d_in: 8,
            d_out: 4,
            weight: Tensor::zeros(&[4, 8]),
            bias: Tensor::zeros(&[4]),
        },
        stages: vec![
            Stage::AvgPool(2),
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

#[derive(Serialize)]
struct ProjectionRun {
    rank: usize,
    channels: usize,
    losses: Vec<f64>,
    warm_start_error: f64,
    optimized_error: f64,
    random_errors: Vec<f64>,
    flops_pct: f64,
}

/// Trains a rank-`rank` projection of the toy net's middle layer for
/// `steps` mini-batches and compares it with random projections.
pub fn train_projection(rank: usize, steps: usize, seed: u64) -> Result<String> {
    let net = toy_net(seed);
    let channels = net.convs[1].spec.c_out;
    let data = synthetic_blobs(32, 4, seed)?;
    let teacher = TeacherSnapshot::new(&net);
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x, _) = data.batch(&idx, &NORM);
    let targets = teacher.stage_outputs(&x)?;
    let site = net.recon_site(1)?;
    let error = |p: &Tensor| -> Result<f64> {
        let mut student = net.clone();
        fold_into(&mut student, 1, p)?;
        let mut g = cap_core::Graph::new();
        let xv = g.constant(x.clone());
        let params = student.record_params(&mut g, |_| false);
        let out = student.forward_prefix(&mut g, xv, &params, &BTreeMap::new(), site + 1)?;
        reconstruction_error(g.value(out[site]), &targets[site], true)
    };

    let warm = channel_warm_start(&net.convs[1].weight, rank)?;
    let mut proxy = ProjectionProxy::init(channels, rank, seed, Some(warm))?;
    let warm_start_error = error(&proxy.phi()?.to_tensor())?;
    let mut proxies = BTreeMap::from([(1, proxy)]);
    let sites = recon_sites(&net, &[1], &BTreeSet::from([1]))?;
    let settings = ProjectionSettings {
        steps,
        lr: 0.05,
        momentum: 0.9,
        gamma: 0.0,
        normalize: true,
        guard: DEFAULT_GUARD,
    };
    let mut stream = DataStream::new(&data, NORM, 8, seed);
    let log = optimize_projection(&net, &teacher, &mut proxies, &BTreeMap::new(), &sites, &settings, &mut stream)
        ?;
    let p = proxies.get_mut(&1).expect("trained").phi()?.to_tensor();
    let random_errors = (0..5)
        .map(|s| error(&random_orthonormal(channels, rank, seed * 100 + s)?.to_tensor()))
        .collect::<Result<Vec<_>>>()?;
    let mut folded = net.clone();
    fold_into(&mut folded, 1, &p)?;
    let flops = |n: &Network| count_costs(n, 1).map(|r| r.flops as f64);
    json(&ProjectionRun {
        rank,
        channels,
        losses: log.losses,
        warm_start_error,
        optimized_error: error(&p)?,
        random_errors,
        flops_pct: 100.0 * flops(&folded)? / flops(&net)?,
    })
}

#[wasm_bindgen(js_name = compressionCosts)]
pub fn compression_costs_js(width: f64, keep_ratio: f64) -> std::result::Result<String, JsError> {
    compression_costs(width, keep_ratio).map_err(js)
}

#[wasm_bindgen(js_name = nearestOrthonormal)]
pub fn nearest_orthonormal_js(values: &[f64], rows: usize, cols: usize) -> std::result::Result<String, JsError> {
    nearest_orthonormal(values, rows, cols).map_err(js)
}

#[wasm_bindgen(js_name = trainProjection)]
pub fn train_projection_js(rank: usize, steps: usize, seed: u64) -> std::result::Result<String, JsError> {
    train_projection(rank, steps, seed).map_err(js)
}
