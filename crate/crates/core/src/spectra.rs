//! Truncated SVD and symmetric orthogonalization.
//!
//! [`truncated_svd`] runs randomized block subspace iteration with a
//! Rayleigh–Ritz step per iteration. The small inner problems are solved with
//! one-sided Jacobi ([`dense_svd`]) and cyclic Jacobi ([`symmetric_eigen`]),
//! which are exact to working precision at the sizes used here.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{DenseMatrix, LinearOperator};

/// Relative eigenvalue floor below which a Gram matrix counts as singular.
pub const RANK_EPS: f64 = 1e-10;

const MAX_JACOBI_SWEEPS: usize = 80;

/// Eigendecomposition of a symmetric matrix, eigenvalues in non-increasing order.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    /// Eigenvectors as columns, in the same order as `values`.
    pub vectors: DenseMatrix,
}

/// Cyclic Jacobi eigendecomposition. The input is assumed symmetric; only
/// rotations are applied, so the result stays symmetric in floating point.
pub fn symmetric_eigen(s: &DenseMatrix) -> SymmetricEigen {
    let n = s.n_rows();
    assert_eq!(n, s.n_cols(), "symmetric_eigen needs a square matrix");
    let mut a = s.clone();
    let mut v = DenseMatrix::identity(n);
    let scale = a.frobenius_norm();

    for _ in 0..MAX_JACOBI_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= f64::EPSILON * 1e-2 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[(y, y)].total_cmp(&a[(x, x)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &v.column(src));
    }
    SymmetricEigen { values, vectors }
}

/// Thin SVD `A = U diag(sigma) V` with `U` of shape `m×r`, `V` of shape `r×n`
/// and `r = min(m, n)`.
#[derive(Debug, Clone)]
pub struct DenseSvd {
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    pub v: DenseMatrix,
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn dense_svd(a: &DenseMatrix) -> DenseSvd {
    let (m, n) = a.shape();
    if m < n {
        let t = dense_svd(&a.transpose());
        return DenseSvd {
            u: t.v.transpose(),
            sigma: t.sigma,
            v: t.u.transpose(),
        };
    }
    // m >= n: orthogonalize the columns of A
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vt: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta.abs() > 1e150 {
                    0.5 / zeta
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = w.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = vt.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = w.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let sigma: Vec<f64> = order.iter().map(|&i| norms[i]).collect();
    let floor = sigma.first().copied().unwrap_or(0.0) * f64::EPSILON * (m as f64);

    let mut u_cols: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&i| {
            (norms[i] > floor && norms[i] > 0.0)
                .then(|| w[i].iter().map(|x| x / norms[i]).collect())
        })
        .collect();
    complete_orthonormal(&mut u_cols, m);

    let mut u = DenseMatrix::zeros(m, n);
    let mut v = DenseMatrix::zeros(n, n);
    for (dst, (&src, col)) in order.iter().zip(u_cols).enumerate() {
        u.set_column(dst, &col.expect("completed"));
        v.row_mut(dst).copy_from_slice(&vt[src]);
    }
    DenseSvd { u, sigma, v }
}

/// Singular values of a small dense matrix in non-increasing order.
pub fn singular_values(a: &DenseMatrix) -> Vec<f64> {
    dense_svd(a).sigma
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Removes from `v` its components along each vector in `basis` (twice).
fn project_out(v: &mut [f64], basis: &[&[f64]]) {
    for _ in 0..2 {
        for b in basis {
            let d = dot(v, b);
            for (x, y) in v.iter_mut().zip(b.iter()) {
                *x -= d * y;
            }
        }
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other column.
fn complete_orthonormal(cols: &mut [Option<Vec<f64>>], dim: usize) {
    let mut candidate = 0;
    for slot in 0..cols.len() {
        if cols[slot].is_some() {
            continue;
        }
        loop {
            assert!(candidate < dim, "cannot complete an orthonormal basis");
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            let basis: Vec<&[f64]> = cols.iter().flatten().map(Vec::as_slice).collect();
            project_out(&mut e, &basis);
            let norm = dot(&e, &e).sqrt();
            if norm > 0.5 {
                e.iter_mut().for_each(|x| *x /= norm);
                cols[slot] = Some(e);
                break;
            }
        }
    }
}

/// Replaces the columns of `x` with an orthonormal basis of their span
/// (modified Gram–Schmidt with reorthogonalization). Columns that vanish
/// after projection are replaced by random directions drawn from `rng`.
fn orthonormalize(x: &DenseMatrix, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let (rows, cols) = x.shape();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for j in 0..cols {
        let mut v = x.column(j);
        let mut original = dot(&v, &v).sqrt();
        loop {
            let refs: Vec<&[f64]> = basis.iter().map(Vec::as_slice).collect();
            project_out(&mut v, &refs);
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-10 * original && norm > 0.0 {
                v.iter_mut().for_each(|e| *e /= norm);
                break;
            }
            v = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
            original = dot(&v, &v).sqrt();
        }
        basis.push(v);
    }
    let mut q = DenseMatrix::zeros(rows, cols);
    for (j, v) in basis.iter().enumerate() {
        q.set_column(j, v);
    }
    q
}

/// Inverse square root of a symmetric positive definite matrix.
///
/// Fails when `S` is not symmetric to `1e-10` (relative to its largest entry)
/// or when its smallest eigenvalue is at most [`RANK_EPS`] times the largest.
pub fn inv_sqrt_psd(s: &DenseMatrix) -> Result<DenseMatrix> {
    let n = s.n_rows();
    if n != s.n_cols() || n == 0 {
        return Err(Error::invalid_argument(format!(
            "inverse square root needs a non-empty square matrix, got {}x{}",
            s.n_rows(),
            s.n_cols()
        )));
    }
    let asym = s.max_abs_diff(&s.transpose());
    if asym > 1e-10 * s.max_abs().max(1.0) {
        return Err(Error::invalid_argument(format!(
            "matrix is not symmetric (max asymmetry {asym:.3e})"
        )));
    }
    let eig = symmetric_eigen(s);
    let largest = eig.values[0];
    let smallest = eig.values[n - 1];
    if largest.is_nan() || largest <= 0.0 || smallest <= RANK_EPS * largest {
        return Err(Error::RankDeficient(format!(
            "smallest eigenvalue {smallest:.3e} is below {RANK_EPS:e} x largest {largest:.3e}"
        )));
    }
    let scale: Vec<f64> = eig.values.iter().map(|l| 1.0 / l.sqrt()).collect();
    let x = eig.vectors.scale_columns(&scale).matmul(&eig.vectors.transpose());
    Ok(symmetrize(&x))
}

fn symmetrize(x: &DenseMatrix) -> DenseMatrix {
    let t = x.transpose();
    let mut out = x.clone();
    for (o, v) in out.as_mut_slice().iter_mut().zip(t.as_slice()) {
        *o = 0.5 * (*o + v);
    }
    out
}

/// Nearest matrix with orthonormal columns in Frobenius norm: `A (AᵀA)^{-1/2}`.
pub fn orthogonalize_columns(a: &DenseMatrix) -> Result<DenseMatrix> {
    let (rows, cols) = a.shape();
    if cols == 0 || rows < cols {
        return Err(Error::invalid_argument(format!(
            "column orthogonalization needs rows >= cols >= 1, got {rows}x{cols}"
        )));
    }
    let mut o = a.matmul(&inv_sqrt_psd(&a.t_matmul(a))?);
    // one polar refinement step; the polar factor of O is O itself
    if o.column_orthonormality_error() > 1e-14 {
        o = o.matmul(&inv_sqrt_psd(&o.t_matmul(&o))?);
    }
    Ok(o)
}

/// Nearest matrix with orthonormal rows in Frobenius norm: `(AAᵀ)^{-1/2} A`.
pub fn orthogonalize_rows(a: &DenseMatrix) -> Result<DenseMatrix> {
    let (rows, cols) = a.shape();
    if rows == 0 || cols < rows {
        return Err(Error::invalid_argument(format!(
            "row orthogonalization needs cols >= rows >= 1, got {rows}x{cols}"
        )));
    }
    Ok(orthogonalize_columns(&a.transpose())?.transpose())
}

/// Parameters of [`truncated_svd`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvdParams {
    pub rank: usize,
    /// Residual tolerance relative to the largest singular value.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub oversample: usize,
}

impl SvdParams {
    pub fn new(rank: usize) -> Self {
        SvdParams {
            rank,
            tol: 1e-6,
            max_iter: 300,
            seed: 0,
            oversample: 8,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_oversample(mut self, oversample: usize) -> Self {
        self.oversample = oversample;
        self
    }
}

/// Leading singular triplets `M ≈ U diag(sigma) V`.
#[derive(Debug, Clone)]
pub struct SvdTriplet {
    /// `m×k`, left singular vectors as columns.
    pub u: DenseMatrix,
    /// Non-increasing, non-negative.
    pub sigma: Vec<f64>,
    /// `k×n`, right singular vectors as rows.
    pub v: DenseMatrix,
    /// Number of singular values above the numerical zero threshold.
    pub numerical_rank: usize,
    pub iterations: usize,
    /// `‖M v_i − σ_i u_i‖₂` per returned triplet.
    pub residuals: Vec<f64>,
}

impl SvdTriplet {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_rank_deficient(&self) -> bool {
        self.numerical_rank < self.sigma.len()
    }
}

/// Leading `params.rank` singular triplets by randomized subspace iteration.
///
/// Each iteration applies `Mᵀ` then `M` to a block of `rank + oversample`
/// vectors, re-orthonormalizes, and extracts Ritz triplets from the projected
/// problem. Iteration stops once every returned triplet satisfies
/// `‖M v_i − σ_i u_i‖ ≤ tol·σ_1`. The result depends only on `params`.
pub fn truncated_svd<O: LinearOperator + ?Sized>(op: &O, params: &SvdParams) -> Result<SvdTriplet> {
    let (m, n) = (op.n_rows(), op.n_cols());
    let k = params.rank;
    let max_rank = m.min(n);
    if k == 0 || k > max_rank {
        return Err(Error::invalid_argument(format!(
            "rank {k} outside 1..={max_rank} for a {m}x{n} matrix"
        )));
    }
    if params.max_iter == 0 {
        return Err(Error::invalid_argument("max_iter must be at least 1"));
    }
    let block = (k + params.oversample).min(max_rank);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let omega = DenseMatrix::from_vec(
        n,
        block,
        (0..n * block).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let mut q = orthonormalize(&op.apply(&omega), &mut rng);
    let mut last_residuals = Vec::new();
    let mut last_target = 0.0;

    for iteration in 1..=params.max_iter {
        let w = op.apply_transpose(&q);
        let q2 = orthonormalize(&w, &mut rng);
        let r2 = q2.t_matmul(&w);
        // M ≈ Q Wᵀ = Q R2ᵀ Q2ᵀ
        let small = dense_svd(&r2.transpose());
        let u = q.matmul(&small.u);
        let v_cols = q2.matmul(&small.v.transpose());
        let mv = op.apply(&v_cols);

        let sigma_max = small.sigma[0];
        let residuals: Vec<f64> = (0..k)
            .map(|i| {
                (0..m)
                    .map(|r| {
                        let d = mv[(r, i)] - small.sigma[i] * u[(r, i)];
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let target = params.tol * sigma_max;
        let worst = residuals.iter().copied().fold(0.0, f64::max);
        log::debug!("subspace iteration {iteration}: worst residual {worst:.3e}, target {target:.3e}");

        if worst <= target {
            return Ok(finish(u, v_cols, &small.sigma, k, iteration, residuals, m.max(n)));
        }
        last_residuals = residuals;
        last_target = target;
        q = orthonormalize(&mv, &mut rng);
    }

    let worst_residual = last_residuals.iter().copied().fold(0.0, f64::max);
    Err(Error::NoConvergence {
        iterations: params.max_iter,
        residuals: last_residuals,
        worst_residual,
        target: last_target,
    })
}

fn finish(
    u_block: DenseMatrix,
    v_block: DenseMatrix,
    sigma_block: &[f64],
    k: usize,
    iterations: usize,
    residuals: Vec<f64>,
    max_dim: usize,
) -> SvdTriplet {
    let m = u_block.n_rows();
    let n = v_block.n_rows();
    let mut u = DenseMatrix::zeros(m, k);
    let mut v = DenseMatrix::zeros(k, n);
    for i in 0..k {
        let mut uc = u_block.column(i);
        let mut vc = v_block.column(i);
        // largest-magnitude entry of u_i is made positive; first one wins ties
        let pivot = uc
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (r, &x)| if x.abs() > best.1.abs() { (r, x) } else { best })
            .1;
        if pivot < 0.0 {
            uc.iter_mut().for_each(|x| *x = -*x);
            vc.iter_mut().for_each(|x| *x = -*x);
        }
        u.set_column(i, &uc);
        v.row_mut(i).copy_from_slice(&vc);
    }
    let sigma: Vec<f64> = sigma_block[..k].to_vec();
    let zero_floor = sigma[0] * f64::EPSILON * max_dim as f64 * 16.0;
    let numerical_rank = sigma.iter().filter(|&&s| s > zero_floor && s > 0.0).count();
    if numerical_rank < k {
        log::warn!("requested rank {k} but the matrix has numerical rank {numerical_rank}");
    }
    SvdTriplet {
        u,
        sigma,
        v,
        numerical_rank,
        iterations,
        residuals,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
    use rand::Rng;

    fn random_dense(seed: u64, rows: usize, cols: usize) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn to_na(a: &DenseMatrix) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(a.n_rows(), a.n_cols(), a.as_slice())
    }

    fn from_na(a: &nalgebra::DMatrix<f64>) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(a.nrows(), a.ncols());
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                d[(i, j)] = a[(i, j)];
            }
        }
        d
    }

    fn oracle_singular_values(a: &DenseMatrix) -> Vec<f64> {
        let mut s: Vec<f64> = to_na(a).singular_values().iter().copied().collect();
        s.sort_by(|x, y| y.total_cmp(x));
        s
    }

    fn oracle_polar(a: &DenseMatrix) -> DenseMatrix {
        let svd = to_na(a).svd(true, true);
        from_na(&(svd.u.unwrap() * svd.v_t.unwrap()))
    }

    #[test]
    fn eigen_reconstructs() {
        let a = random_dense(1, 6, 6);
        let s = a.t_matmul(&a);
        let eig = symmetric_eigen(&s);
        let rebuilt = eig
            .vectors
            .scale_columns(&eig.values)
            .matmul(&eig.vectors.transpose());
        assert!(rebuilt.max_abs_diff(&s) < 1e-12);
        assert!(eig.vectors.column_orthonormality_error() < 1e-13);
        assert!(eig.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn dense_svd_matches_oracle_and_reconstructs() {
        for (seed, (r, c)) in [(5, 9), (9, 5), (7, 7), (1, 4), (4, 1)].iter().enumerate() {
            let a = random_dense(seed as u64, *r, *c);
            let svd = dense_svd(&a);
            let oracle = oracle_singular_values(&a);
            for (x, y) in svd.sigma.iter().zip(&oracle) {
                assert!((x - y).abs() <= 1e-12 * oracle[0]);
            }
            let rebuilt = svd.u.scale_columns(&svd.sigma).matmul(&svd.v);
            assert!(rebuilt.max_abs_diff(&a) < 1e-12);
            assert!(svd.u.column_orthonormality_error() < 1e-12);
            assert!(svd.v.row_orthonormality_error() < 1e-12);
        }
    }

    #[test]
    fn dense_svd_of_rank_deficient_keeps_orthonormal_factors() {
        let a = DenseMatrix::from_rows(&[[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 0.0]]);
        let svd = dense_svd(&a);
        assert!(svd.sigma[1] < 1e-14 && svd.sigma[2] < 1e-14);
        assert!(svd.u.column_orthonormality_error() < 1e-12);
    }

    #[test]
    fn truncated_svd_of_diagonal() {
        let m = DenseMatrix::from_diagonal(&[3.0, 2.0, 1.0]);
        let t = truncated_svd(&m, &SvdParams::new(2)).unwrap();
        assert!((t.sigma[0] - 3.0).abs() < 1e-12);
        assert!((t.sigma[1] - 2.0).abs() < 1e-12);
        assert_eq!(t.u.shape(), (3, 2));
        assert_eq!(t.v.shape(), (2, 3));
        // sign convention: dominant entry of each u_i positive
        assert!((t.u[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((t.u[(1, 1)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn truncated_svd_full_rank_matches_oracle() {
        let a = random_dense(42, 10, 7);
        let t = truncated_svd(&a, &SvdParams::new(7)).unwrap();
        let oracle = oracle_singular_values(&a);
        for (x, y) in t.sigma.iter().zip(&oracle) {
            assert!((x - y).abs() <= 1e-8 * y, "{x} vs {y}");
        }
        assert!(t.u.column_orthonormality_error() <= 1e-8);
        assert!(t.v.row_orthonormality_error() <= 1e-8);
    }

    #[test]
    fn truncated_svd_of_outer_product_reports_rank() {
        let u = [1.0, 1.0, 1.0, 1.0];
        let v = [1.0, 2.0, 2.0];
        let mut m = DenseMatrix::zeros(4, 3);
        for i in 0..4 {
            for j in 0..3 {
                m[(i, j)] = u[i] * v[j];
            }
        }
        let t = truncated_svd(&m, &SvdParams::new(2)).unwrap();
        assert!((t.sigma[0] - 6.0).abs() < 1e-12);
        assert!(t.sigma[1] < 1e-12);
        assert_eq!(t.numerical_rank, 1);
        assert!(t.is_rank_deficient());
        assert!(t.u.column_orthonormality_error() <= 1e-8);
        assert!(t.v.row_orthonormality_error() <= 1e-8);
    }

    #[test]
    fn truncated_svd_partial_rank_on_larger_matrix() {
        let a = random_dense(11, 80, 50);
        let t = truncated_svd(&a, &SvdParams::new(5).with_tol(1e-10)).unwrap();
        let oracle = oracle_singular_values(&a);
        for (i, (x, y)) in t.sigma.iter().zip(&oracle).enumerate() {
            assert!((x - y).abs() <= 1e-8 * y, "sigma {i}: {x} vs {y}");
            assert!(t.residuals[i] <= 1e-10 * t.sigma[0]);
        }
    }

    #[test]
    fn truncated_svd_is_deterministic() {
        let a = random_dense(8, 40, 30);
        let p = SvdParams::new(4).with_seed(99);
        let x = truncated_svd(&a, &p).unwrap();
        let y = truncated_svd(&a, &p).unwrap();
        assert_eq!(x.sigma, y.sigma);
        assert_eq!(x.u, y.u);
        assert_eq!(x.v, y.v);
    }

    #[test]
    fn truncated_svd_rejects_bad_rank() {
        let a = random_dense(2, 4, 3);
        assert!(matches!(truncated_svd(&a, &SvdParams::new(0)), Err(Error::InvalidArgument(_))));
        assert!(matches!(truncated_svd(&a, &SvdParams::new(4)), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn truncated_svd_reports_non_convergence() {
        let a = random_dense(3, 200, 150);
        let p = SvdParams::new(3).with_oversample(0).with_tol(1e-14).with_max_iter(1);
        match truncated_svd(&a, &p) {
            Err(Error::NoConvergence { iterations, residuals, .. }) => {
                assert_eq!(iterations, 1);
                assert_eq!(residuals.len(), 3);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn orthogonalize_columns_cases() {
        let q = orthogonalize_columns(&random_dense(4, 6, 3)).unwrap();
        assert!(orthogonalize_columns(&q).unwrap().max_abs_diff(&q) < 1e-10);

        let d = DenseMatrix::from_diagonal(&[2.0, 3.0]);
        assert!(orthogonalize_columns(&d).unwrap().max_abs_diff(&DenseMatrix::identity(2)) < 1e-14);

        let col = DenseMatrix::from_rows(&[[3.0], [0.0], [4.0], [0.0]]);
        let o = orthogonalize_columns(&col).unwrap();
        assert!(o.max_abs_diff(&col.map(|x| x / 5.0)) < 1e-15);
    }

    #[test]
    fn orthogonalize_rows_cases() {
        let q = orthogonalize_rows(&random_dense(5, 3, 7)).unwrap();
        assert!(orthogonalize_rows(&q).unwrap().max_abs_diff(&q) < 1e-10);

        let row = DenseMatrix::from_rows(&[[1.0, -1.0, 1.0, 1.0]]);
        assert!(orthogonalize_rows(&row).unwrap().max_abs_diff(&row.map(|x| x / 2.0)) < 1e-15);

        let a = random_dense(6, 3, 8);
        let o = orthogonalize_rows(&a).unwrap();
        assert!(o.row_orthonormality_error() <= 1e-8);
        let oracle = oracle_polar(&a.transpose()).transpose();
        assert!(o.max_abs_diff(&oracle) < 1e-10);
    }

    #[test]
    fn orthogonalize_rejects_rank_deficient() {
        let a = DenseMatrix::from_rows(&[[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]);
        assert!(matches!(orthogonalize_columns(&a), Err(Error::RankDeficient(_))));
        assert!(matches!(orthogonalize_rows(&a.transpose()), Err(Error::RankDeficient(_))));
        assert!(orthogonalize_columns(&a.transpose()).is_err());
    }

    #[test]
    fn inv_sqrt_cases() {
        assert!(inv_sqrt_psd(&DenseMatrix::identity(3)).unwrap().max_abs_diff(&DenseMatrix::identity(3)) < 1e-15);
        let x = inv_sqrt_psd(&DenseMatrix::from_diagonal(&[4.0, 9.0])).unwrap();
        assert!(x.max_abs_diff(&DenseMatrix::from_diagonal(&[0.5, 1.0 / 3.0])) < 1e-15);

        let a = random_dense(12, 8, 5);
        let s = a.t_matmul(&a);
        let x = inv_sqrt_psd(&s).unwrap();
        assert!(x.max_abs_diff(&x.transpose()) == 0.0);
        assert!(x.matmul(&s).matmul(&x).max_abs_diff(&DenseMatrix::identity(5)) <= 1e-8);
    }

    #[test]
    fn inv_sqrt_rejects_bad_input() {
        let singular = DenseMatrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]);
        assert!(matches!(inv_sqrt_psd(&singular), Err(Error::RankDeficient(_))));
        let asym = DenseMatrix::from_rows(&[[2.0, 1.0], [0.0, 2.0]]);
        assert!(matches!(inv_sqrt_psd(&asym), Err(Error::InvalidArgument(_))));
        assert!(inv_sqrt_psd(&DenseMatrix::zeros(2, 3)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn truncated_svd_agrees_with_dense_oracle(
            seed in any::<u64>(), rows in 1usize..=12, cols in 1usize..=30, k_frac in 0.0f64..1.0
        ) {
            let a = random_dense(seed, rows, cols);
            let k = 1 + ((rows.min(cols) - 1) as f64 * k_frac) as usize;
            let t = truncated_svd(&a, &SvdParams::new(k).with_seed(seed)).unwrap();
            let oracle = oracle_singular_values(&a);
            for (x, y) in t.sigma.iter().zip(&oracle) {
                prop_assert!((x - y).abs() <= 1e-6 * y, "{} vs {}", x, y);
            }
        }

        #[test]
        fn orthogonalize_columns_is_polar_idempotent_and_scale_free(
            seed in any::<u64>(), rows in 1usize..10, extra in 0usize..4, c in 0.01f64..100.0
        ) {
            let cols = rows.min(1 + extra);
            let a = random_dense(seed, rows + extra, cols);
            let o = orthogonalize_columns(&a).unwrap();
            prop_assert!(o.column_orthonormality_error() <= 1e-8);
            prop_assert!(o.max_abs_diff(&oracle_polar(&a)) <= 1e-9);
            prop_assert!(orthogonalize_columns(&o).unwrap().max_abs_diff(&o) <= 1e-9);
            prop_assert!(orthogonalize_columns(&a.map(|x| c * x)).unwrap().max_abs_diff(&o) <= 1e-9);
        }
    }
}
