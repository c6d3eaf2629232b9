//! Central finite-difference checks for every differentiable op, the SVD
//! backward pass and the proxy chain `X → Φ(X) → loss`.
//!
//! Relative error is `‖a − f‖₂ / max(‖a‖₂, ‖f‖₂)` over the whole gradient of
//! one input (absolute error when both norms are below `1e-12`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance every suite must meet.
pub const REL_TOL: f64 = 1e-4;
pub const OP_STEP: f64 = 1e-5;
pub const SVD_STEP: f64 = 1e-6;

/// A scalar-valued program over leaf tensors.
pub type Program<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let d = norm(&diff);
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        d
    } else {
        d / scale
    }
}

fn eval(inputs: &[Tensor], program: &Program) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = program(&mut g, &vars)?;
    Ok(g.value(loss).item())
}

/// Central-difference gradient of `program` with respect to input `which`.
pub fn numeric_gradient(
    inputs: &[Tensor],
    which: usize,
    step: f64,
    program: &Program,
) -> Result<Tensor> {
    let mut probe = inputs.to_vec();
    let mut out = Tensor::zeros(inputs[which].shape());
    for i in 0..inputs[which].len() {
        let orig = inputs[which].data()[i];
        probe[which].data_mut()[i] = orig + step;
        let up = eval(&probe, program)?;
        probe[which].data_mut()[i] = orig - step;
        let down = eval(&probe, program)?;
        probe[which].data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(out)
}

/// Analytic gradients of `program` for every input.
pub fn analytic_gradients(inputs: &[Tensor], program: &Program) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = program(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.get(v)).collect())
}

/// Largest relative error over all inputs. `tamper` post-processes each
/// analytic gradient (identity in normal use; negative controls corrupt it).
pub fn check_program(
    inputs: &[Tensor],
    step: f64,
    program: &Program,
    tamper: &dyn Fn(usize, Tensor) -> Tensor,
) -> Result<f64> {
    let analytic = analytic_gradients(inputs, program)?;
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.into_iter().enumerate() {
        let a = tamper(i, a);
        let n = numeric_gradient(inputs, i, step, program)?;
        worst = worst.max(rel_error(a.data(), n.data()));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SuiteResult {
    pub suite: String,
    pub cases: usize,
    /// Instances rejected by the singular-gap guard before differentiation.
    pub degenerate_skipped: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Random instances per suite.
    pub instances: usize,
    /// Largest `[n, c, h, w]` used for activations.
    pub max_dims: [usize; 4],
    /// Largest `(rows, cols)` for proxy matrices.
    pub max_proxy: (usize, usize),
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            instances: 50,
            max_dims: [2, 4, 6, 6],
            max_proxy: (8, 3),
        }
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn identity_tamper(_: usize, t: Tensor) -> Tensor {
    t
}

/// One randomly drawn check: inputs, the scalar program and its FD step.
pub struct Instance {
    inputs: Vec<Tensor>,
    program: Box<Program<'static>>,
    step: f64,
}

pub type Generator = fn(&mut ChaCha8Rng, &GradcheckConfig) -> Instance;

fn act_dims(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> [usize; 4] {
    let [n, c, h, w] = cfg.max_dims;
    [
        rng.random_range(1..=n),
        rng.random_range(1..=c),
        rng.random_range(2.min(h)..=h),
        rng.random_range(2.min(w)..=w),
    ]
}

fn gen_conv(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> Instance {
    let [n, c, h, w] = act_dims(rng, cfg);
    let c_out = rng.random_range(1..=cfg.max_dims[1]);
    let pad = rng.random_range(0..=1usize);
    let kmax = 3.min(h.min(w) + 2 * pad);
    let k = rng.random_range(1..=kmax);
    let stride = rng.random_range(1..=2usize);
    let inputs = vec![
        rand_t(rng, &[n, c, h, w]),
        rand_t(rng, &[c_out, c, k, k]),
        rand_t(rng, &[c_out]),
    ];
    Instance {
        inputs,
        program: Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            Ok(g.frobenius_sq(y))
        }),
        step: OP_STEP,
    }
}

fn gen_relu(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> Instance {
    let dims = act_dims(rng, cfg);
    // keep entries away from the kink
    let mut x = rand_t(rng, &dims);
    for v in x.data_mut() {
        if v.abs() < 1e-2 {
            *v += 0.05;
        }
    }
    Instance {
        inputs: vec![x],
        program: Box::new(|g, v| {
            let y = g.relu(v[0]);
            Ok(g.frobenius_sq(y))
        }),
        step: OP_STEP,
    }
}

fn gen_add_sub_scale(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> Instance {
    let dims = act_dims(rng, cfg);
    let s: f64 = rng.random_range(-2.0..2.0);
    Instance {
        inputs: vec![rand_t(rng, &dims), rand_t(rng, &dims), rand_t(rng, &dims)],
        program: Box::new(move |g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.scale(v[2], s);
            let d = g.sub(a, b)?;
            Ok(g.frobenius_sq(d))
        }),
        step: OP_STEP,
    }
}

fn gen_channel_project(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> Instance {
    let [n, c, h, w] = act_dims(rng, cfg);
    let r = rng.random_range(1..=c);
    Instance {
        inputs: vec![rand_t(rng, &[n, c, h, w]), rand_t(rng, &[c, r])],
        program: Box::new(|g, v| {
            let y = g.channel_project(v[0], v[1])?;
            Ok(g.frobenius_sq(y))
        }),
        step: OP_STEP,
    }
}

fn gen_fold_in(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> Instance {
    let c = rng.random_range(1..=cfg.max_dims[1]);
    let o = rng.random_range(1..=cfg.max_dims[1]);
    let r = rng.random_range(1..=c);
    let k = rng.random_range(1..=3usize);
    Instance {
        inputs: vec![rand_t(rng, &[o, c, k, k]), rand_t(rng, &[c, r])],
        program: Box::new(|g, v| {
            let y = g.fold_in(v[0], v[1])?;
            Ok(g.frobenius_sq(y))
        }),
        step: OP_STEP,
    }
}

fn gen_sum(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> Instance {
    let dims = act_dims(rng, cfg);
    Instance {
        inputs: vec![rand_t(rng, &dims), rand_t(rng, &dims)],
        program: Box::new(|g, v| {
            let a = g.sum(v[0]);
            let b = g.frobenius_sq(v[1]);
            let ab = g.add(a, b)?;
            let s = g.frobenius_sq(ab);
            Ok(s)
        }),
        step: OP_STEP,
    }
}

fn gen_cross_entropy(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> Instance {
    let n = rng.random_range(1..=cfg.max_dims[0].max(2));
    let k = rng.random_range(2..=6usize);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    Instance {
        inputs: vec![rand_t(rng, &[n, k])],
        program: Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels)),
        step: OP_STEP,
    }
}

fn gen_pools(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> Instance {
    let dims = act_dims(rng, cfg);
    let k = rng.random_range(1..=2usize.min(dims[2]).min(dims[3]));
    Instance {
        inputs: vec![rand_t(rng, &dims)],
        program: Box::new(move |g, v| {
            let p = g.avg_pool(v[0], k)?;
            let q = g.global_avg_pool(p)?;
            let a = g.frobenius_sq(p);
            let b = g.frobenius_sq(q);
            g.add(a, b)
        }),
        step: OP_STEP,
    }
}

fn gen_linear(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> Instance {
    let [n, c, h, w] = act_dims(rng, cfg);
    let d_in = c * h * w;
    let d_out = rng.random_range(1..=5usize);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..d_out.max(1))).collect();
    Instance {
        inputs: vec![
            rand_t(rng, &[n, c, h, w]),
            Tensor::randn(&[d_out, d_in], 1.0 / (d_in as f64).sqrt(), rng),
            rand_t(rng, &[d_out]),
        ],
        program: Box::new(move |g, v| {
            let f = g.flatten(v[0])?;
            let y = g.linear(f, v[1], v[2])?;
            g.softmax_cross_entropy(y, &labels)
        }),
        step: OP_STEP,
    }
}

fn proxy_shape(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> (usize, usize) {
    let (rmax, cmax) = cfg.max_proxy;
    let m = rng.random_range(1..=cmax);
    let n = rng.random_range(m.max(2)..=rmax.max(m));
    (n, m)
}

fn gen_svd(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> Instance {
    let (n, m) = proxy_shape(rng, cfg);
    Instance {
        inputs: vec![rand_t(rng, &[n, m]), rand_t(rng, &[n, m])],
        program: Box::new(|g, v| {
            let p = g.phi(v[0])?;
            let d = g.sub(p, v[1])?;
            Ok(g.frobenius_sq(d))
        }),
        step: SVD_STEP,
    }
}

fn gen_proxy_chain(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> Instance {
    let (c, r) = proxy_shape(rng, cfg);
    let n = rng.random_range(1..=2usize);
    let hw = rng.random_range(2..=4usize);
    let o = rng.random_range(1..=3usize);
    let inputs = vec![
        rand_t(rng, &[c, r]),
        rand_t(rng, &[n, c, hw, hw]),
        rand_t(rng, &[o, c, 3, 3]),
        rand_t(rng, &[n, o, hw, hw]),
    ];
    Instance {
        inputs,
        program: Box::new(|g, v| {
            let p = g.phi(v[0])?;
            let z = g.channel_project(v[1], p)?;
            let a = g.relu(z);
            let wi = g.fold_in(v[2], p)?;
            let y = g.conv2d(a, wi, None, 1, 1)?;
            let d = g.sub(y, v[3])?;
            Ok(g.frobenius_sq(d))
        }),
        step: SVD_STEP,
    }
}

/// Suites in the order they are reported.
pub fn suites() -> Vec<(&'static str, Generator)> {
    vec![
        ("conv2d", gen_conv as Generator),
        ("relu", gen_relu),
        ("add_sub_scale", gen_add_sub_scale),
        ("channel_project", gen_channel_project),
        ("fold_in", gen_fold_in),
        ("sum_frobenius", gen_sum),
        ("softmax_cross_entropy", gen_cross_entropy),
        ("avg_pool", gen_pools),
        ("flatten_linear", gen_linear),
        ("svd_backward", gen_svd),
        ("proxy_chain", gen_proxy_chain),
    ]
}

/// Runs one suite until `cfg.instances` cases have been differentiated.
/// Degenerate spectra are redrawn (at most `instances` times) and counted.
pub fn run_suite(
    name: &str,
    generator: Generator,
    cfg: &GradcheckConfig,
    tamper: &dyn Fn(usize, Tensor) -> Tensor,
) -> Result<SuiteResult> {
    let salt = name.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ salt);
    let mut cases = 0;
    let mut skipped = 0;
    let mut worst: f64 = 0.0;
    while cases < cfg.instances {
        let inst = generator(&mut rng, cfg);
        match check_program(&inst.inputs, inst.step, inst.program.as_ref(), tamper) {
            Ok(err) => {
                worst = worst.max(err);
                cases += 1;
            }
            Err(Error::DegenerateSpectrum { .. }) if skipped < cfg.instances => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(SuiteResult {
        suite: name.to_string(),
        cases,
        degenerate_skipped: skipped,
        max_rel_err: worst,
        passed: worst < REL_TOL,
    })
}

pub fn run_all(cfg: &GradcheckConfig) -> Result<Vec<SuiteResult>> {
    suites()
        .into_iter()
        .map(|(name, gen)| run_suite(name, gen, cfg, &identity_tamper))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_basics() {
        assert_eq!(rel_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(rel_error(&[0.0], &[0.0]), 0.0);
        assert!((rel_error(&[1.0], &[2.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tampered_gradient_is_caught() {
        let cfg = GradcheckConfig {
            instances: 3,
            ..Default::default()
        };
        let tamper = |_: usize, t: Tensor| {
            let data = t.data().iter().map(|v| v * 1.01 + 1e-3).collect();
            Tensor::new(t.shape(), data).unwrap()
        };
        let res = run_suite("conv2d", gen_conv, &cfg, &tamper).unwrap();
        assert!(!res.passed);
    }
}
