//! Thin SVD by one-sided Jacobi rotations and the structured backward pass
//! through it.
//!
//! The factorization targets the small, tall matrices that parameterize the
//! channel projections (at most a few hundred rows). Jacobi is slower than
//! bidiagonalization but it is deterministic, accurate to working precision
//! in every singular value, and short enough to audit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Mat::new", &[rows, cols], &[data.len()]));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::eye(n, n)
    }

    /// `rows × cols` matrix with ones on the main diagonal.
    pub fn eye(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Mat::zeros(self.rows, other.cols);
        crate::tensor::gemm_nn(
            &self.data,
            &other.data,
            &mut out.data,
            self.rows,
            self.cols,
            other.cols,
        );
        out
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "t_matmul inner dimension");
        let mut out = Mat::zeros(self.cols, other.cols);
        crate::tensor::gemm_tn(
            &self.data,
            &other.data,
            &mut out.data,
            self.cols,
            self.rows,
            other.cols,
        );
        out
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// `‖selfᵀself − I‖_∞` (largest entry magnitude).
    pub fn orthonormality_defect(&self) -> f64 {
        self.t_matmul(self).sub(&Mat::identity(self.cols)).max_abs()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.rows, self.cols], self.data.clone()).expect("consistent dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Mat> {
        let [r, c] = t.dims2()?;
        Mat::new(r, c, t.data().to_vec())
    }
}

/// Thin SVD `X = U·diag(sigma)·Vᵀ` of an `n×m` matrix with `n ≥ m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    pub u: Mat,
    pub sigma: Vec<f64>,
    pub v: Mat,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> Mat {
        let us = Mat::from_fn(self.u.rows(), self.u.cols(), |i, j| {
            self.u.get(i, j) * self.sigma[j]
        });
        us.matmul(&self.v.transpose())
    }

    /// The polar factor `U·Vᵀ`, i.e. the nearest matrix with orthonormal columns.
    pub fn polar(&self) -> Mat {
        self.u.matmul(&self.v.transpose())
    }
}

const MAX_SWEEPS: usize = 100;

pub fn thin_svd(x: &Mat) -> Result<SvdFactors> {
    let (n, m) = (x.rows(), x.cols());
    if n < m {
        return Err(Error::arg(format!(
            "thin_svd needs rows >= cols, got {n}x{m}; transpose the input"
        )));
    }
    if m == 0 {
        return Err(Error::arg("thin_svd of a matrix with no columns"));
    }
    if !x.is_finite() {
        return Err(Error::Numeric("thin_svd input has non-finite entries".into()));
    }

    // Column-major working copies.
    let mut a: Vec<Vec<f64>> = (0..m).map(|j| x.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..m)
        .map(|j| (0..m).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let tol = n as f64 * f64::EPSILON;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..m {
            for q in p + 1..m {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "one-sided Jacobi did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let norms: Vec<f64> = a.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..m).collect();
    // stable: equal values keep column order
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).expect("finite norms"));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let null_tol = sigma[0] * (n as f64) * f64::EPSILON;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut pending_null = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        if sigma[slot] > null_tol && sigma[slot] > 0.0 {
            u_cols.push(a[j].iter().map(|x| x / sigma[slot]).collect());
        } else {
            u_cols.push(vec![0.0; n]);
            pending_null.push(slot);
        }
    }
    let mut sigma = sigma;
    for slot in pending_null {
        // numerically zero: treat as exactly zero and complete the basis
        sigma[slot] = 0.0;
        let basis = complete_basis(&u_cols, slot, n);
        u_cols[slot] = basis;
    }

    let mut u = Mat::from_fn(n, m, |i, j| u_cols[j][i]);
    let mut vm = Mat::from_fn(m, m, |i, j| v[order[j]][i]);

    // Sign convention: the largest-magnitude entry of each U column is
    // nonnegative, lowest row index wins ties.
    for j in 0..m {
        let mut best = 0;
        let mut best_abs = -1.0;
        for i in 0..n {
            let a = u.get(i, j).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if u.get(best, j) < 0.0 {
            for i in 0..n {
                u.set(i, j, -u.get(i, j));
            }
            for i in 0..m {
                vm.set(i, j, -vm.get(i, j));
            }
        }
    }

    Ok(SvdFactors { u, sigma, v: vm })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Unit vector orthogonal to every nonzero column in `cols` (except `skip`),
/// built from the standard basis vector with the largest residual.
fn complete_basis(cols: &[Vec<f64>], skip: usize, n: usize) -> Vec<f64> {
    let mut best = vec![0.0; n];
    let mut best_norm = -1.0;
    for e in 0..n {
        let mut cand = vec![0.0; n];
        cand[e] = 1.0;
        for _ in 0..2 {
            for (idx, col) in cols.iter().enumerate() {
                if idx == skip {
                    continue;
                }
                let d = dot(&cand, col);
                for (c, x) in cand.iter_mut().zip(col) {
                    *c -= d * x;
                }
            }
        }
        let norm = dot(&cand, &cand).sqrt();
        if norm > best_norm + 1e-12 {
            best_norm = norm;
            best = cand;
        }
    }
    best.iter().map(|x| x / best_norm).collect()
}

/// Relative guard on squared singular-value gaps, scaled by `sigma[0]²`.
pub const DEFAULT_GUARD: f64 = 1e-8;

/// Precomputed `K[i,j] = 1/(σ_j² − σ_i²)` (zero diagonal) for the backward
/// pass, built only when every gap clears the guard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdGradContext {
    pub k: Mat,
    pub guard: f64,
}

impl SvdGradContext {
    pub fn new(f: &SvdFactors, rel_guard: f64) -> Result<Self> {
        let m = f.sigma.len();
        let s0 = f.sigma[0] * f.sigma[0];
        let guard = rel_guard * s0;
        if s0 == 0.0 {
            return Err(Error::DegenerateSpectrum {
                i: 0,
                j: 0,
                gap: 0.0,
                guard,
            });
        }
        // the Σ⁻¹ term needs a nonvanishing smallest singular value
        let last = f.sigma[m - 1];
        if last <= rel_guard * f.sigma[0] {
            return Err(Error::DegenerateSpectrum {
                i: m - 1,
                j: m - 1,
                gap: last,
                guard: rel_guard * f.sigma[0],
            });
        }
        let mut k = Mat::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                let gap = f.sigma[j] * f.sigma[j] - f.sigma[i] * f.sigma[i];
                if gap.abs() <= guard {
                    return Err(Error::DegenerateSpectrum {
                        i: i.min(j),
                        j: i.max(j),
                        gap: gap.abs(),
                        guard,
                    });
                }
                k.set(i, j, 1.0 / gap);
            }
        }
        Ok(SvdGradContext { k, guard })
    }
}

/// Which backward formula to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SvdBackwardVariant {
    /// U-term plus V-term; agrees with finite differences.
    #[default]
    Full,
    /// Only the `U{2Σ(Kᵀ∘(VᵀV̄))_sym}Vᵀ` term, kept for comparison runs.
    VTermOnly,
}

/// Gradient with respect to `X` of a loss expressed through `U` and `V`
/// (with no direct dependence on the singular values).
pub fn svd_backward(
    f: &SvdFactors,
    ctx: &SvdGradContext,
    d_u: &Mat,
    d_v: &Mat,
    variant: SvdBackwardVariant,
) -> Result<Mat> {
    let (n, m) = (f.u.rows(), f.u.cols());
    if (d_u.rows(), d_u.cols()) != (n, m) {
        return Err(Error::shape("svd_backward dU", &[n, m], &[d_u.rows(), d_u.cols()]));
    }
    if (d_v.rows(), d_v.cols()) != (m, m) {
        return Err(Error::shape("svd_backward dV", &[m, m], &[d_v.rows(), d_v.cols()]));
    }
    let s = &f.sigma;
    let k = &ctx.k;
    let vt_dv = f.v.t_matmul(d_v);

    let inner = match variant {
        SvdBackwardVariant::Full => {
            let ut_du = f.u.t_matmul(d_u);
            Mat::from_fn(m, m, |i, j| {
                if i == j {
                    return 0.0;
                }
                let ju = ut_du.get(i, j) - ut_du.get(j, i);
                let jv = vt_dv.get(i, j) - vt_dv.get(j, i);
                k.get(i, j) * (ju * s[j] + s[i] * jv)
            })
        }
        SvdBackwardVariant::VTermOnly => {
            // 2Σ (Kᵀ ∘ VᵀV̄)_sym
            let h = Mat::from_fn(m, m, |i, j| k.get(j, i) * vt_dv.get(i, j));
            Mat::from_fn(m, m, |i, j| 2.0 * s[i] * 0.5 * (h.get(i, j) + h.get(j, i)))
        }
    };

    let mut grad = f.u.matmul(&inner).matmul(&f.v.transpose());
    if variant == SvdBackwardVariant::Full {
        // (I − UUᵀ) Ū Σ⁻¹ Vᵀ
        let proj = d_u.sub(&f.u.matmul(&f.u.t_matmul(d_u)));
        let scaled = Mat::from_fn(n, m, |i, j| proj.get(i, j) / s[j]);
        grad = grad.add(&scaled.matmul(&f.v.transpose()));
    }
    Ok(grad)
}

/// Upstream gradients `(∂L/∂U, ∂L/∂V)` for a loss that sees only `P = U·Vᵀ`.
pub fn polar_upstream(f: &SvdFactors, d_p: &Mat) -> (Mat, Mat) {
    (d_p.matmul(&f.v), d_p.t_matmul(&f.u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn check_invariants(x: &Mat, f: &SvdFactors) {
        assert!(f.u.orthonormality_defect() < 1e-10);
        assert!(f.v.orthonormality_defect() < 1e-10);
        let err = f.reconstruct().sub(x).frobenius() / x.frobenius().max(1.0);
        assert!(err < 1e-10, "reconstruction error {err}");
        assert!(f.sigma.windows(2).all(|w| w[0] >= w[1]));
        assert!(f.sigma.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn diagonal_input() {
        let x = Mat::from_fn(3, 3, |i, j| if i == j { 3.0 - i as f64 } else { 0.0 });
        let f = thin_svd(&x).unwrap();
        assert_eq!(f.sigma, vec![3.0, 2.0, 1.0]);
        assert_eq!(f.u, Mat::identity(3));
        assert_eq!(f.v, Mat::identity(3));
    }

    #[test]
    fn unsorted_diagonal_gets_sorted() {
        let x = Mat::from_fn(4, 3, |i, j| if i == j { 1.0 + i as f64 } else { 0.0 });
        let f = thin_svd(&x).unwrap();
        assert_eq!(f.sigma, vec![3.0, 2.0, 1.0]);
        check_invariants(&x, &f);
    }

    #[test]
    fn random_tall_matrices() {
        for seed in 0..20 {
            let x = random_mat(6, 4, seed);
            let f = thin_svd(&x).unwrap();
            check_invariants(&x, &f);
        }
    }

    #[test]
    fn rank_deficient_input_completes_basis() {
        let mut x = random_mat(5, 3, 9);
        for i in 0..5 {
            let v = x.get(i, 0);
            x.set(i, 2, v);
        }
        let f = thin_svd(&x).unwrap();
        check_invariants(&x, &f);
        assert!(f.sigma[2] < 1e-12);

        let z = Mat::zeros(4, 2);
        let f = thin_svd(&z).unwrap();
        assert!(f.u.orthonormality_defect() < 1e-12);
        assert_eq!(f.sigma, vec![0.0, 0.0]);
    }

    #[test]
    fn sign_convention_pins_representative() {
        let x = random_mat(7, 3, 4);
        let f = thin_svd(&x).unwrap();
        for j in 0..3 {
            let col = f.u.column(j);
            let (idx, _) = col.iter().enumerate().fold((0, -1.0), |(bi, bv), (i, v)| {
                if v.abs() > bv {
                    (i, v.abs())
                } else {
                    (bi, bv)
                }
            });
            assert!(col[idx] >= 0.0);
        }
        let neg = x.scale(-1.0);
        let g = thin_svd(&neg).unwrap();
        assert!(g.u.sub(&f.u).max_abs() < 1e-12);
        assert!(g.v.add(&f.v).max_abs() < 1e-12);
    }

    #[test]
    fn wide_input_is_rejected() {
        let err = thin_svd(&Mat::zeros(2, 3)).unwrap_err();
        assert!(err.to_string().contains("transpose"));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut x = Mat::zeros(3, 2);
        x.set(1, 1, f64::NAN);
        assert!(matches!(thin_svd(&x), Err(Error::Numeric(_))));
    }

    #[test]
    fn deterministic_bitwise() {
        let x = random_mat(8, 5, 11);
        assert_eq!(thin_svd(&x).unwrap(), thin_svd(&x).unwrap());
    }

    #[test]
    fn scaling_preserves_singular_vectors() {
        let x = random_mat(8, 3, 2);
        let f = thin_svd(&x).unwrap();
        for c in [0.5, 2.0, 3.7] {
            let g = thin_svd(&x.scale(c)).unwrap();
            assert!(g.u.sub(&f.u).max_abs() < 1e-12);
            assert!(g.v.sub(&f.v).max_abs() < 1e-12);
            for (a, b) in g.sigma.iter().zip(&f.sigma) {
                assert!((a - c * b).abs() < 1e-12 * c * b.max(1.0));
            }
        }
    }

    #[test]
    fn context_guard_flags_equal_singular_values() {
        let x = Mat::eye(5, 3);
        let f = thin_svd(&x).unwrap();
        match SvdGradContext::new(&f, DEFAULT_GUARD) {
            Err(Error::DegenerateSpectrum { i, j, .. }) => assert!(i < j),
            other => panic!("expected degenerate error, got {other:?}"),
        }
    }

    #[test]
    fn context_k_matrix() {
        let x = Mat::from_fn(3, 3, |i, j| if i == j { 3.0 - i as f64 } else { 0.0 });
        let f = thin_svd(&x).unwrap();
        let ctx = SvdGradContext::new(&f, DEFAULT_GUARD).unwrap();
        for i in 0..3 {
            assert_eq!(ctx.k.get(i, i), 0.0);
            for j in 0..3 {
                assert_eq!(ctx.k.get(i, j), -ctx.k.get(j, i));
            }
        }
        assert_eq!(ctx.k.get(0, 1), 1.0 / (4.0 - 9.0));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let x = random_mat(6, 3, 5);
        let f = thin_svd(&x).unwrap();
        let ctx = SvdGradContext::new(&f, DEFAULT_GUARD).unwrap();
        let g = svd_backward(&f, &ctx, &Mat::zeros(6, 3), &Mat::zeros(3, 3), SvdBackwardVariant::Full)
            .unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }
}
