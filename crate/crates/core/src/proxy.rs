//! Trainable proxy matrices and their projection onto orthonormal columns.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, SvdFactors, SvdGradContext};
use crate::tensor::Tensor;

pub const MAX_REPERTURB_ATTEMPTS: usize = 5;

/// Unconstrained `[c_out, r]` matrix whose polar factor is the projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionProxy {
    x: Mat,
    velocity: Mat,
    seed: u64,
    perturbations: u64,
    #[serde(skip)]
    cached: Option<SvdFactors>,
}

impl ProjectionProxy {
    /// Gaussian `N(0, 1/c_out)` entries from `seed`, unless `warm_start` is given.
    pub fn init(c_out: usize, r: usize, seed: u64, warm_start: Option<Mat>) -> Result<Self> {
        if r == 0 || r > c_out {
            return Err(Error::arg(format!(
                "projection rank {r} must lie in 1..={c_out}"
            )));
        }
        let x = match warm_start {
            Some(m) => {
                if (m.rows(), m.cols()) != (c_out, r) {
                    return Err(Error::shape(
                        "init_proxy warm start",
                        &[c_out, r],
                        &[m.rows(), m.cols()],
                    ));
                }
                m
            }
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let std = 1.0 / (c_out as f64).sqrt();
                Mat::from_fn(c_out, r, |_, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
            }
        };
        Ok(ProjectionProxy {
            velocity: Mat::zeros(c_out, r),
            x,
            seed,
            perturbations: 0,
            cached: None,
        })
    }

    /// Rebuilds a proxy from saved state.
    pub fn from_parts(x: Mat, velocity: Mat, seed: u64, perturbations: u64) -> Result<Self> {
        if (x.rows(), x.cols()) != (velocity.rows(), velocity.cols()) {
            return Err(Error::shape(
                "proxy state",
                &[x.rows(), x.cols()],
                &[velocity.rows(), velocity.cols()],
            ));
        }
        if x.cols() == 0 || x.cols() > x.rows() {
            return Err(Error::arg(format!("proxy of shape {}x{} is not tall", x.rows(), x.cols())));
        }
        Ok(ProjectionProxy {
            x,
            velocity,
            seed,
            perturbations,
            cached: None,
        })
    }

    pub fn x(&self) -> &Mat {
        &self.x
    }

    pub fn rows(&self) -> usize {
        self.x.rows()
    }

    pub fn rank(&self) -> usize {
        self.x.cols()
    }

    /// Number of noise draws applied so far.
    pub fn perturbations(&self) -> u64 {
        self.perturbations
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn velocity(&self) -> &Mat {
        &self.velocity
    }

    pub fn set_state(&mut self, x: Mat, velocity: Mat) -> Result<()> {
        if (x.rows(), x.cols()) != (self.rows(), self.rank())
            || (velocity.rows(), velocity.cols()) != (self.rows(), self.rank())
        {
            return Err(Error::shape(
                "proxy state",
                &[self.rows(), self.rank()],
                &[x.rows(), x.cols()],
            ));
        }
        self.x = x;
        self.velocity = velocity;
        self.cached = None;
        Ok(())
    }

    /// Refreshes the cached factors and returns `Φ(X) = U·Vᵀ`.
    pub fn phi(&mut self) -> Result<Mat> {
        let f = linalg::thin_svd(&self.x)?;
        let p = f.polar();
        self.cached = Some(f);
        Ok(p)
    }

    pub fn cached_factors(&self) -> Option<&SvdFactors> {
        self.cached.as_ref()
    }

    /// Makes sure the spectrum of `X` clears the singular-gap guard so that
    /// `Φ` can be differentiated, perturbing `X` if needed.
    pub fn ensure_differentiable(&mut self, guard: f64) -> Result<()> {
        let f = linalg::thin_svd(&self.x)?;
        if SvdGradContext::new(&f, guard).is_ok() {
            self.cached = Some(f);
            return Ok(());
        }
        let magnitude = 1e-6 * self.x.frobenius();
        self.reperturb(magnitude, guard)
    }

    /// Adds seeded Gaussian noise with per-entry standard deviation
    /// `magnitude` until the spectrum clears `guard`, for at most
    /// [`MAX_REPERTURB_ATTEMPTS`] draws. A zero magnitude leaves `X` as is.
    pub fn reperturb(&mut self, magnitude: f64, guard: f64) -> Result<()> {
        let mut last = None;
        for _ in 0..MAX_REPERTURB_ATTEMPTS {
            if magnitude > 0.0 {
                let stream = self.seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(self.perturbations + 1);
                let mut rng = ChaCha8Rng::seed_from_u64(stream);
                self.perturbations += 1;
                for v in self.x.data_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += magnitude * z;
                }
            }
            let f = linalg::thin_svd(&self.x)?;
            match SvdGradContext::new(&f, guard) {
                Ok(_) => {
                    self.cached = Some(f);
                    return Ok(());
                }
                Err(e) => last = Some(e),
            }
        }
        Err(Error::Numeric(format!(
            "proxy spectrum still degenerate after {MAX_REPERTURB_ATTEMPTS} perturbations of size {magnitude:e} ({}x{} proxy, last: {})",
            self.rows(),
            self.rank(),
            last.map(|e| e.to_string()).unwrap_or_default()
        )))
    }

    /// Heavy-ball SGD: `v ← μv + g`, `X ← X − lr·v`.
    pub fn sgd_step(&mut self, grad: &Mat, lr: f64, momentum: f64) {
        for ((v, x), g) in self
            .velocity
            .data_mut()
            .iter_mut()
            .zip(self.x.data_mut().iter_mut())
            .zip(grad.data())
        {
            *v = momentum * *v + g;
            *x -= lr * *v;
        }
        self.cached = None;
    }
}

/// Warm start from a layer's weights: the top-`r` left singular vectors of
/// the `[c_out, c_in·k·k]` unfolding, scaled by `1, 1 − 1/(2r), …` so the
/// Warm start that keeps the `r` output channels with the largest kernel
/// norm: `Φ` of it is a column selection, which commutes with a following
/// ReLU. Columns are scaled like [`weight_warm_start`] to separate the spectrum.
pub fn channel_warm_start(weight: &Tensor, r: usize) -> Result<Mat> {
    let [c_out, c_in, kh, kw] = weight.dims4()?;
    if r == 0 || r > c_out {
        return Err(Error::arg(format!("rank {r} out of range for {c_out} channels")));
    }
    let per = c_in * kh * kw;
    let norms: Vec<f64> = weight.data().chunks(per).map(|w| w.iter().map(|v| v * v).sum()).collect();
    let mut order: Vec<usize> = (0..c_out).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let mut x = Mat::zeros(c_out, r);
    for (j, &ch) in order[..r].iter().enumerate() {
        x.set(ch, j, 1.0 - 0.5 * j as f64 / r as f64);
    }
    Ok(x)
}

/// spectrum of `X` is well separated while `Φ(X)` is exactly that basis.
pub fn weight_warm_start(weight: &Tensor, r: usize) -> Result<Mat> {
    let [c_out, c_in, kh, kw] = weight.dims4()?;
    if r == 0 || r > c_out {
        return Err(Error::arg(format!("rank {r} out of range for {c_out} channels")));
    }
    let cols = c_in * kh * kw;
    let unfolded = Mat::new(c_out, cols, weight.data().to_vec())?;
    let basis = if c_out <= cols {
        // left singular vectors of W are the right singular vectors of Wᵀ
        let f = linalg::thin_svd(&unfolded.transpose())?;
        f.v
    } else {
        linalg::thin_svd(&unfolded)?.u
    };
    let padded = Mat::from_fn(c_out, r, |i, j| {
        if j < basis.cols() {
            basis.get(i, j)
        } else {
            0.0
        }
    });
    // c_out > cols leaves columns beyond the weight rank; complete them
    let basis = if basis.cols() < r {
        linalg::thin_svd(&padded.add(&Mat::eye(c_out, r).scale(1e-3)))?.polar()
    } else {
        padded
    };
    Ok(Mat::from_fn(c_out, r, |i, j| {
        basis.get(i, j) * (1.0 - 0.5 * j as f64 / r as f64)
    }))
}

/// Uniformly random orthonormal `[n, r]` basis (polar factor of a Gaussian matrix).
pub fn random_orthonormal(n: usize, r: usize, seed: u64) -> Result<Mat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Mat::from_fn(n, r, |_, _| StandardNormal.sample(&mut rng));
    Ok(linalg::thin_svd(&g)?.polar())
}
