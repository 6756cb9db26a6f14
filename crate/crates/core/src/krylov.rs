//! Iterative and direct solver kernels: preconditioned MINRES for the
//! symmetric indefinite condensed systems, a sparse Cholesky wrapper for the
//! SPD preconditioner blocks, and generalized extreme-eigenvalue estimation
//! for spectral diagnostics.

use crate::sparse::CsrMatrix;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Symmetric operator applied matrix-free.
pub trait LinearOp {
    fn dim(&self) -> usize;
    /// y = A x
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

impl LinearOp for CsrMatrix {
    fn dim(&self) -> usize {
        debug_assert_eq!(self.nrows(), self.ncols());
        self.nrows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.fill(0.0);
        self.mul_slice_add(x, y);
    }
}

impl LinearOp for DMatrix<f64> {
    fn dim(&self) -> usize {
        debug_assert_eq!(self.nrows(), self.ncols());
        self.nrows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let xv = DVector::from_column_slice(x);
        let yv = self * xv;
        y.copy_from_slice(yv.as_slice());
    }
}

/// Applies the inverse action z = P⁻¹ r of an SPD preconditioner.
pub trait Preconditioner {
    fn dim(&self) -> usize;
    fn solve(&self, r: &[f64], z: &mut [f64]);
}

/// No preconditioning.
pub struct IdentityPc(pub usize);

impl Preconditioner for IdentityPc {
    fn dim(&self) -> usize {
        self.0
    }

    fn solve(&self, r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
    }
}

/// Applies a fixed dense matrix as the inverse action (tests, small cases).
pub struct MatrixPc(pub DMatrix<f64>);

impl Preconditioner for MatrixPc {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn solve(&self, r: &[f64], z: &mut [f64]) {
        self.0.apply(r, z);
    }
}

/// Convergence record of one MINRES run. `residuals[j]` is the preconditioned
/// relative residual after iteration j+1; the sequence is monotonically
/// non-increasing by construction of the method.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub iterations: usize,
    pub converged: bool,
    pub final_rel_residual: f64,
    pub residuals: Vec<f64>,
    pub solve_seconds: f64,
}

/// Preconditioned MINRES (Paige–Saunders recurrence) for symmetric, possibly
/// indefinite A with SPD preconditioner P. Convergence is measured in the
/// P⁻¹-norm of the residual, relative to the right-hand side; the estimate
/// |η|/γ₁ is exact in exact arithmetic and costs nothing.
///
/// Returns the solution and the convergence record. A preconditioner that
/// produces zᵀv < 0 fails with [`Error::IndefinitePreconditioner`]; running
/// out of iterations (default 10·n) fails with [`Error::NoConvergence`] —
/// the two are distinct so callers can tell a broken preconditioner from a
/// hard system.
pub fn minres(
    a: &dyn LinearOp,
    pc: &dyn Preconditioner,
    b: &[f64],
    tol: f64,
    max_iter: Option<usize>,
) -> Result<(Vec<f64>, SolveReport)> {
    let n = a.dim();
    if b.len() != n || pc.dim() != n {
        return Err(Error::DimensionMismatch(format!(
            "minres: operator {n}, rhs {}, preconditioner {}",
            b.len(),
            pc.dim()
        )));
    }
    let start = Instant::now();
    let max_iter = max_iter.unwrap_or(10 * n.max(1));

    let mut x = vec![0.0; n];
    if b.iter().all(|&v| v == 0.0) {
        return Ok((
            x,
            SolveReport {
                iterations: 0,
                converged: true,
                final_rel_residual: 0.0,
                residuals: Vec::new(),
                solve_seconds: start.elapsed().as_secs_f64(),
            },
        ));
    }

    let dot = |u: &[f64], v: &[f64]| -> f64 { u.iter().zip(v).map(|(a, b)| a * b).sum() };
    let check_zv = |zv: f64, z: &[f64], v: &[f64]| -> Result<f64> {
        if zv < 0.0 {
            let scale = dot(z, z).sqrt() * dot(v, v).sqrt();
            if zv < -1e-14 * scale.max(f64::MIN_POSITIVE) {
                return Err(Error::IndefinitePreconditioner(zv));
            }
            return Ok(0.0);
        }
        Ok(zv)
    };

    let mut v_old = vec![0.0; n];
    let mut v = b.to_vec();
    let mut z = vec![0.0; n];
    pc.solve(&v, &mut z);
    let zv = check_zv(dot(&z, &v), &z, &v)?;
    let gamma1 = zv.sqrt();
    if gamma1 == 0.0 {
        // b ≠ 0 but P⁻¹b = 0: the preconditioner is singular
        return Err(Error::IndefinitePreconditioner(0.0));
    }

    let mut gamma = gamma1;
    let mut gamma_old = 1.0;
    let mut eta = gamma1;
    let (mut c, mut c_old) = (1.0f64, 1.0f64);
    let (mut s, mut s_old) = (0.0f64, 0.0f64);
    let mut w = vec![0.0; n];
    let mut w_old = vec![0.0; n];
    let mut az = vec![0.0; n];
    let mut v_new = vec![0.0; n];
    let mut z_new = vec![0.0; n];

    let mut residuals = Vec::new();
    let mut converged = false;
    let mut relres = 1.0;
    let mut iterations = 0;

    for j in 1..=max_iter {
        for zi in z.iter_mut() {
            *zi /= gamma;
        }
        a.apply(&z, &mut az);
        let delta = dot(&az, &z);
        let cv = delta / gamma;
        let cv_old = gamma / gamma_old;
        for i in 0..n {
            v_new[i] = az[i] - cv * v[i] - cv_old * v_old[i];
        }
        pc.solve(&v_new, &mut z_new);
        let zv = check_zv(dot(&z_new, &v_new), &z_new, &v_new)?;
        let gamma_new = zv.sqrt();

        let alpha0 = c * delta - c_old * s * gamma;
        let alpha1 = (alpha0 * alpha0 + gamma_new * gamma_new).sqrt();
        let alpha2 = s * delta + c_old * c * gamma;
        let alpha3 = s_old * gamma;
        if alpha1 == 0.0 {
            // Krylov space exhausted with nothing left to rotate
            break;
        }
        c_old = c;
        s_old = s;
        c = alpha0 / alpha1;
        s = gamma_new / alpha1;
        for i in 0..n {
            let wn = (z[i] - alpha3 * w_old[i] - alpha2 * w[i]) / alpha1;
            w_old[i] = w[i];
            w[i] = wn;
            x[i] += c * eta * wn;
        }
        eta = -s * eta;
        iterations = j;
        relres = eta.abs() / gamma1;
        residuals.push(relres);
        if relres <= tol {
            converged = true;
            break;
        }
        if gamma_new == 0.0 || !gamma_new.is_finite() {
            break;
        }
        std::mem::swap(&mut v_old, &mut v);
        std::mem::swap(&mut v, &mut v_new);
        std::mem::swap(&mut z, &mut z_new);
        gamma_old = gamma;
        gamma = gamma_new;
    }

    let report = SolveReport {
        iterations,
        converged,
        final_rel_residual: relres,
        residuals,
        solve_seconds: start.elapsed().as_secs_f64(),
    };
    if !converged {
        return Err(Error::NoConvergence(report.iterations, report.final_rel_residual));
    }
    Ok((x, report))
}

// ---------------------------------------------------------------------------
// Sparse SPD factorization (wraps a supernodal sparse Cholesky).

/// Cholesky factor of a sparse SPD matrix, applied as a preconditioner block.
pub struct SpdFactor {
    n: usize,
    llt: faer::sparse::linalg::solvers::Llt<usize, f64>,
}

impl SpdFactor {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn solve_slice(&self, r: &[f64], z: &mut [f64]) {
        use faer::prelude::*;
        let b = faer::Mat::from_fn(self.n, 1, |i, _| r[i]);
        let sol = self.llt.solve(&b);
        for i in 0..self.n {
            z[i] = sol[(i, 0)];
        }
    }
}

impl Preconditioner for SpdFactor {
    fn dim(&self) -> usize {
        self.n
    }

    fn solve(&self, r: &[f64], z: &mut [f64]) {
        self.solve_slice(r, z);
    }
}

/// Factorizes a sparse SPD matrix; fails with [`Error::NotSpd`] if a
/// non-positive pivot turns up.
pub fn sparse_spd_factorize(m: &CsrMatrix) -> Result<SpdFactor> {
    use faer::sparse::{SparseColMat, Triplet};
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "cannot factorize a {}×{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    let trips: Vec<Triplet<usize, usize, f64>> =
        m.iter().map(|(r, c, v)| Triplet::new(r, c, v)).collect();
    let a = SparseColMat::try_new_from_triplets(n, n, &trips)
        .map_err(|e| Error::NotSpd(format!("sparse assembly failed: {e:?}")))?;
    let llt = a
        .sp_cholesky(faer::Side::Lower)
        .map_err(|e| Error::NotSpd(format!("sparse Cholesky failed: {e:?}")))?;
    Ok(SpdFactor { n, llt })
}

// ---------------------------------------------------------------------------
// Generalized extreme eigenvalues.

const DENSE_EIG_LIMIT: usize = 600;

fn materialize(op: &dyn LinearOp) -> DMatrix<f64> {
    let n = op.dim();
    let mut m = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        op.apply(&e, &mut col);
        e[j] = 0.0;
        for i in 0..n {
            m[(i, j)] = col[i];
        }
    }
    m
}

/// Extreme eigenvalues (λ_min, λ_max) of the pencil A x = λ B x with A
/// symmetric and B SPD. Up to [`DENSE_EIG_LIMIT`] unknowns the pencil is
/// materialized and solved exactly through a congruence transform; above
/// that a B-orthogonal Lanczos iteration with full reorthogonalization
/// estimates the extremes (pass `b_solver` for the inner B-solves).
/// An indefinite B is reported as [`Error::NotSpd`].
pub fn generalized_extreme_eigs(
    a: &dyn LinearOp,
    b: &dyn LinearOp,
    b_solver: Option<&dyn Preconditioner>,
) -> Result<(f64, f64)> {
    let n = a.dim();
    if b.dim() != n {
        return Err(Error::DimensionMismatch(format!(
            "pencil dimensions differ: {n} vs {}",
            b.dim()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty pencil".into()));
    }
    if n <= DENSE_EIG_LIMIT {
        let ad = materialize(a);
        let bd = materialize(b);
        return dense_extreme_eigs(&ad, &bd);
    }
    let solver = b_solver.ok_or_else(|| {
        Error::InvalidArgument(format!(
            "pencil of dimension {n} needs a B-solver for the Lanczos path"
        ))
    })?;
    lanczos_extreme_eigs(a, b, solver)
}

fn dense_extreme_eigs(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(f64, f64)> {
    let bs = (b + b.transpose()) * 0.5;
    let chol = bs
        .cholesky()
        .ok_or_else(|| Error::NotSpd("pencil mass matrix is not positive definite".into()))?;
    let l = chol.l();
    // C = L⁻¹ A L⁻ᵀ
    let t = l.solve_lower_triangular(a).ok_or_else(|| Error::NotSpd("singular factor".into()))?;
    let c = l
        .solve_lower_triangular(&t.transpose())
        .ok_or_else(|| Error::NotSpd("singular factor".into()))?;
    let cs = (&c + c.transpose()) * 0.5;
    let eigs = cs.symmetric_eigenvalues();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &e in eigs.iter() {
        lo = lo.min(e);
        hi = hi.max(e);
    }
    Ok((lo, hi))
}

fn lanczos_extreme_eigs(
    a: &dyn LinearOp,
    b: &dyn LinearOp,
    b_solver: &dyn Preconditioner,
) -> Result<(f64, f64)> {
    let n = a.dim();
    let m_max = 300.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_1a2c);
    let dot = |u: &[f64], v: &[f64]| -> f64 { u.iter().zip(v).map(|(a, b)| a * b).sum() };

    // basis vectors and their B-images, both kept for cheap reorthogonalization
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(m_max);
    let mut us: Vec<Vec<f64>> = Vec::with_capacity(m_max);
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();

    let mut q: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut bq = vec![0.0; n];
    b.apply(&q, &mut bq);
    let qbq = dot(&q, &bq);
    if qbq <= 0.0 {
        return Err(Error::NotSpd(format!("pencil mass matrix indefinite (qᵀBq = {qbq:.3e})")));
    }
    let nb = qbq.sqrt();
    for i in 0..n {
        q[i] /= nb;
        bq[i] /= nb;
    }
    vs.push(q);
    us.push(bq);

    let mut av = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut prev = (f64::NAN, f64::NAN);
    let mut result = (f64::NAN, f64::NAN);
    for j in 0..m_max {
        a.apply(&vs[j], &mut av);
        b_solver.solve(&av, &mut w);
        let alpha = dot(&av, &vs[j]);
        alphas.push(alpha);
        // three-term recurrence, then full reorthogonalization in the B-inner
        // product (u_i = B v_i are stored, so each sweep is dot-products only)
        for i in 0..n {
            w[i] -= alpha * vs[j][i];
            if j > 0 {
                w[i] -= betas[j - 1] * vs[j - 1][i];
            }
        }
        for _ in 0..2 {
            for i in 0..vs.len() {
                let coef = dot(&w, &us[i]);
                for l in 0..n {
                    w[l] -= coef * vs[i][l];
                }
            }
        }
        let mut bw = vec![0.0; n];
        b.apply(&w, &mut bw);
        let wbw = dot(&w, &bw);
        if wbw < 0.0 {
            return Err(Error::NotSpd(format!(
                "pencil mass matrix indefinite (wᵀBw = {wbw:.3e})"
            )));
        }
        let beta = wbw.sqrt();

        // Ritz extremes of the current tridiagonal section
        if j >= 1 && (j % 5 == 4 || beta == 0.0 || j == m_max - 1) {
            let k = alphas.len();
            let mut t = DMatrix::zeros(k, k);
            for i in 0..k {
                t[(i, i)] = alphas[i];
                if i + 1 < k {
                    t[(i, i + 1)] = betas[i];
                    t[(i + 1, i)] = betas[i];
                }
            }
            let eigs = t.symmetric_eigenvalues();
            let lo = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            result = (lo, hi);
            let scale = hi.abs().max(lo.abs()).max(f64::MIN_POSITIVE);
            if prev.0.is_finite()
                && (lo - prev.0).abs() <= 1e-7 * scale
                && (hi - prev.1).abs() <= 1e-7 * scale
            {
                return Ok(result);
            }
            prev = result;
        }
        if beta == 0.0 {
            break;
        }
        betas.push(beta);
        let v_next: Vec<f64> = w.iter().map(|&x| x / beta).collect();
        let u_next: Vec<f64> = bw.iter().map(|&x| x / beta).collect();
        vs.push(v_next);
        us.push(u_next);
    }
    if result.0.is_nan() {
        return Err(Error::NoConvergence(m_max, f64::NAN));
    }
    Ok(result)
}
