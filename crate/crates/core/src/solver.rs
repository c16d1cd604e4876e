//! Positivity-constrained least-squares recovery of fODF coefficients.
//!
//! The equality c₀₀ = 1/√(4π) is removed by substitution. What remains is a
//! convex QP in the other coefficients with one inequality per constraint
//! direction, solved by a dual active-set method.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernels::SignalBasisMatrix;
use crate::linalg::{dot, solve_dense, Cholesky, Matrix};
use crate::scalar::Real;
use crate::sh::{eval_sh, normalized_c00, FodfCoefficients, ShBasisMatrix, SphericalGrid};

/// Default number of hemisphere directions carrying positivity constraints.
pub const DEFAULT_CONSTRAINT_POINTS: usize = 181;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpConfig {
    /// Bound on the reported KKT residual for a converged solution.
    pub tol: f64,
    /// Iteration cap; `None` uses 10·(constraints + variables).
    pub max_iterations: Option<usize>,
}

impl Default for QpConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_iterations: None }
    }
}

/// min ½xᵀQx + gᵀx subject to Ax ≥ b.
#[derive(Debug, Clone)]
pub struct QpProblem<T: Real = f64> {
    pub q: Matrix<T>,
    pub g: Vec<T>,
    pub a: Matrix<T>,
    pub b: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct QpResult<T: Real = f64> {
    pub x: Vec<T>,
    /// One multiplier per constraint, zero off the working set.
    pub multipliers: Vec<T>,
    pub active: Vec<usize>,
    pub iterations: usize,
    pub kkt_residual: T,
    pub converged: bool,
}

impl<T: Real> QpProblem<T> {
    pub fn n_vars(&self) -> usize {
        self.q.rows()
    }

    pub fn n_constraints(&self) -> usize {
        self.a.rows()
    }

    pub fn objective(&self, x: &[T]) -> T {
        let qx = self.q.mul_vec(x);
        T::lit(0.5) * dot(x, &qx) + dot(&self.g, x)
    }

    pub fn gradient(&self, x: &[T]) -> Vec<T> {
        let mut gr = self.q.mul_vec(x);
        for (v, &gi) in gr.iter_mut().zip(&self.g) {
            *v = *v + gi;
        }
        gr
    }

    /// Largest of the stationarity, primal-feasibility, dual-feasibility and
    /// complementarity violations at (x, λ).
    pub fn kkt_residual(&self, x: &[T], multipliers: &[T]) -> T {
        let mut stat = self.gradient(x);
        let mut worst = T::zero();
        for i in 0..self.n_constraints() {
            let row = self.a.row(i);
            let lam = multipliers[i];
            if lam != T::zero() {
                for (s, &aij) in stat.iter_mut().zip(row) {
                    *s = *s - lam * aij;
                }
            }
            let slack = dot(row, x) - self.b[i];
            worst = worst.max(-slack).max(-lam).max((lam * slack).abs());
        }
        stat.iter().fold(worst, |w, s| w.max(s.abs()))
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_vars();
        if n == 0 || self.q.cols() != n || self.g.len() != n {
            return invalid("QP dimensions disagree");
        }
        if self.a.cols() != n || self.b.len() != self.a.rows() {
            return invalid("QP constraint dimensions disagree");
        }
        let finite = |v: &[T]| v.iter().all(|x| x.is_finite());
        if !finite(self.q.as_slice()) || !finite(&self.g) || !finite(self.a.as_slice()) || !finite(&self.b) {
            return invalid("QP data contains non-finite values");
        }
        Ok(())
    }
}

/// Factorizes Q, adding the smallest ridge that makes it positive definite.
fn factor_hessian<T: Real>(q: &Matrix<T>) -> Result<Cholesky<T>> {
    if let Ok(c) = Cholesky::new(q) {
        return Ok(c);
    }
    let scale = (0..q.rows()).fold(T::zero(), |m, i| m.max(q[(i, i)].abs())) + T::one();
    let mut eps = T::epsilon() * T::lit(1e4) * scale;
    for _ in 0..6 {
        let mut r = q.clone();
        for i in 0..q.rows() {
            r[(i, i)] = r[(i, i)] + eps;
        }
        if let Ok(c) = Cholesky::new(&r) {
            return Ok(c);
        }
        eps = eps * T::lit(100.0);
    }
    Err(Error::Solver("QP Hessian is not positive semidefinite even after regularization".into()))
}

fn to_f64_matrix<T: Real>(m: &Matrix<T>) -> Matrix<f64> {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)].as_f64())
}

fn to_f64_vec<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn from_f64_vec<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

/// Solves the QP with the Goldfarb–Idnani dual active-set method.
///
/// Iterates start at the unconstrained minimizer and stay dual feasible; the
/// most violated constraint is added at each major step, dropping active
/// constraints whose multipliers would turn negative. Variables are scaled
/// so that Q has a unit diagonal before factorization. The factorizations
/// run in double precision whatever the element type; the Hessians met in
/// fODF fitting are too ill-conditioned for single precision.
pub fn solve_qp<T: Real>(problem: &QpProblem<T>, config: &QpConfig) -> Result<QpResult<T>> {
    problem.validate()?;
    let p = QpProblem {
        q: to_f64_matrix(&problem.q),
        g: to_f64_vec(&problem.g),
        a: to_f64_matrix(&problem.a),
        b: to_f64_vec(&problem.b),
    };
    let r = dual_active_set(&p, config)?;
    Ok(QpResult {
        x: from_f64_vec(&r.x),
        multipliers: from_f64_vec(&r.multipliers),
        active: r.active,
        iterations: r.iterations,
        kkt_residual: T::lit(r.kkt_residual),
        converged: r.converged,
    })
}

fn dual_active_set<T: Real>(problem: &QpProblem<T>, config: &QpConfig) -> Result<QpResult<T>> {
    if !(config.tol > 0.0) {
        return invalid("QP tolerance must be positive");
    }
    let n = problem.n_vars();
    let m = problem.n_constraints();
    let d: Vec<T> = (0..n)
        .map(|i| {
            let q = problem.q[(i, i)];
            if q > T::zero() { T::one() / q.sqrt() } else { T::one() }
        })
        .collect();
    let q = Matrix::from_fn(n, n, |i, j| d[i] * problem.q[(i, j)] * d[j]);
    let g: Vec<T> = (0..n).map(|i| d[i] * problem.g[i]).collect();
    let c = Matrix::from_fn(m, n, |i, j| problem.a[(i, j)] * d[j]);
    let chol = factor_hessian(&q)?;
    // Q⁻¹cᵢ for every constraint, shared by all active-set solves.
    let qinv_c: Vec<Vec<T>> = (0..m).map(|i| chol.solve(c.row(i))).collect();
    let max_iter = config.max_iterations.unwrap_or(10 * (m + n) + 10);
    let feas_tol = T::lit(0.1 * config.tol);
    let dep_tol = T::epsilon() * T::lit(1e4);

    // Rows of C Q⁻¹ Cᵀ, filled in as constraints enter the working set.
    let mut cross: Vec<Vec<T>> = vec![Vec::new(); m];
    let mut y: Vec<T> = chol.solve(&g).into_iter().map(|v| -v).collect();
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<T> = Vec::new();
    let mut iterations = 0;
    let mut optimal = false;

    'outer: while iterations < max_iter {
        // Most violated constraint, measured in units of its row norm.
        let mut worst: Option<(usize, T)> = None;
        for i in 0..m {
            let s = dot(c.row(i), &y) - problem.b[i];
            if s < -feas_tol {
                let scaled = s / dot(c.row(i), c.row(i)).sqrt();
                if worst.is_none_or(|(_, w)| scaled < w) {
                    worst = Some((i, scaled));
                }
            }
        }
        let Some((p, _)) = worst else {
            optimal = true;
            break;
        };
        let np = c.row(p);
        let mut up = T::zero();
        loop {
            iterations += 1;
            if iterations > max_iter {
                break 'outer;
            }
            let k = active.len();
            let r = if k == 0 {
                Vec::new()
            } else {
                for &a in active.iter().chain(std::iter::once(&p)) {
                    if cross[a].is_empty() {
                        cross[a] = (0..m).map(|j| dot(c.row(a), &qinv_c[j])).collect();
                    }
                }
                let s = Matrix::from_fn(k, k, |a, b| cross[active[a]][active[b]]);
                let rhs: Vec<T> = active.iter().map(|&a| cross[a][p]).collect();
                match Cholesky::new(&s) {
                    Ok(cs) => cs.solve(&rhs),
                    Err(_) => solve_dense(&s, &rhs)
                        .map_err(|e| Error::Solver(format!("active constraint normals are dependent: {e}")))?,
                }
            };
            let mut z = qinv_c[p].clone();
            for (&a, &ra) in active.iter().zip(&r) {
                for (zj, &qj) in z.iter_mut().zip(&qinv_c[a]) {
                    *zj = *zj - ra * qj;
                }
            }
            let zn = dot(&z, np);
            // Largest dual step keeping the active multipliers non-negative.
            let mut t1: Option<(usize, T)> = None;
            for (j, (&rj, &uj)) in r.iter().zip(&u).enumerate() {
                if rj > T::zero() {
                    let t = uj / rj;
                    if t1.is_none_or(|(_, b)| t < b) {
                        t1 = Some((j, t));
                    }
                }
            }
            let sp = dot(np, &y) - problem.b[p];
            let dependent = zn <= dep_tol * dot(np, &qinv_c[p]);
            let t = if dependent {
                match t1 {
                    Some((_, t)) => t,
                    None => return Err(Error::Solver(format!("constraint {p} cannot be satisfied"))),
                }
            } else {
                let t2 = -sp / zn;
                match t1 {
                    Some((_, t)) if t < t2 => t,
                    _ => t2,
                }
            };
            if !dependent {
                for (yj, &zj) in y.iter_mut().zip(&z) {
                    *yj = *yj + t * zj;
                }
            }
            for (uj, &rj) in u.iter_mut().zip(&r) {
                *uj = *uj - t * rj;
            }
            up = up + t;
            match t1 {
                Some((j, t1v)) if dependent || t1v < -sp / zn => {
                    active.remove(j);
                    u.remove(j);
                }
                _ => {
                    active.push(p);
                    u.push(up);
                    continue 'outer;
                }
            }
        }
    }

    let (x, multipliers, kkt_residual) = {
        let unscale = |y: &[T]| -> Vec<T> { y.iter().zip(&d).map(|(&yi, &di)| yi * di).collect() };
        let mut lam = vec![T::zero(); m];
        for (&i, &l) in active.iter().zip(&u) {
            lam[i] = l.max(T::zero());
        }
        let x = unscale(&y);
        let res = problem.kkt_residual(&x, &lam);
        // The iterate is updated incrementally; re-solving the KKT system of
        // the final working set removes accumulated rounding drift.
        match polish(problem, &chol, &c, &qinv_c, &g, &active) {
            Some((yp, up)) => {
                let mut lp = vec![T::zero(); m];
                for (&i, &l) in active.iter().zip(&up) {
                    lp[i] = l.max(T::zero());
                }
                let xp = unscale(&yp);
                let rp = problem.kkt_residual(&xp, &lp);
                if rp < res { (xp, lp, rp) } else { (x, lam, res) }
            }
            None => (x, lam, res),
        }
    };
    let converged = optimal && kkt_residual <= T::lit(config.tol);
    active.sort_unstable();
    Ok(QpResult { x, multipliers, active, iterations, kkt_residual, converged })
}

/// Minimizer and multipliers of the scaled problem with `active` held as
/// equalities.
fn polish<T: Real>(
    problem: &QpProblem<T>,
    chol: &Cholesky<T>,
    c: &Matrix<T>,
    qinv_c: &[Vec<T>],
    g: &[T],
    active: &[usize],
) -> Option<(Vec<T>, Vec<T>)> {
    let y0: Vec<T> = chol.solve(g).into_iter().map(|v| -v).collect();
    let k = active.len();
    if k == 0 {
        return Some((y0, Vec::new()));
    }
    let s = Matrix::from_fn(k, k, |a, b| dot(c.row(active[a]), &qinv_c[active[b]]));
    let rhs: Vec<T> = active.iter().map(|&a| problem.b[a] - dot(c.row(a), &y0)).collect();
    let u = match Cholesky::new(&s) {
        Ok(cs) => cs.solve(&rhs),
        Err(_) => solve_dense(&s, &rhs).ok()?,
    };
    let mut y = y0;
    for (&a, &ua) in active.iter().zip(&u) {
        for (yj, &qj) in y.iter_mut().zip(&qinv_c[a]) {
            *yj = *yj + ua * qj;
        }
    }
    Some((y, u))
}

/// Positivity constraints for fODFs of one order on one grid.
#[derive(Debug, Clone)]
pub struct ConstraintSet<T: Real = f64> {
    pub grid: SphericalGrid<T>,
    pub sh: ShBasisMatrix<T>,
}

impl<T: Real> ConstraintSet<T> {
    pub fn new(grid: &SphericalGrid<T>, order: usize) -> Result<Self> {
        Ok(Self { grid: grid.clone(), sh: eval_sh(order, &grid.directions)? })
    }

    pub fn order(&self) -> usize {
        self.sh.max_order
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution<T: Real = f64> {
    pub coeffs: FodfCoefficients<T>,
    /// ‖Ê - Mc‖₂ over the fitted samples.
    pub residual_norm: T,
    pub kkt_residual: T,
    pub iterations: usize,
    pub converged: bool,
}

/// Fits fODF coefficients to a normalized signal with positivity on `grid`.
pub fn fit_fodf<T: Real>(
    signal: &[T],
    basis: &SignalBasisMatrix<T>,
    grid: &SphericalGrid<T>,
    tol: T,
) -> Result<QpSolution<T>> {
    let constraints = ConstraintSet::new(grid, basis.order)?;
    let config = QpConfig { tol: tol.as_f64(), max_iterations: None };
    fit_fodf_with(signal, basis, &constraints, &config)
}

/// Like [`fit_fodf`] with a precomputed constraint matrix.
pub fn fit_fodf_with<T: Real>(
    signal: &[T],
    basis: &SignalBasisMatrix<T>,
    constraints: &ConstraintSet<T>,
    config: &QpConfig,
) -> Result<QpSolution<T>> {
    if signal.len() != basis.n_samples() {
        return invalid(format!(
            "signal has {} samples, basis has {} rows",
            signal.len(),
            basis.n_samples()
        ));
    }
    if constraints.order() != basis.order {
        return invalid("constraint order differs from basis order");
    }
    if !(config.tol > 0.0) {
        return invalid("tolerance must be positive");
    }
    if signal.iter().any(|v| !v.is_finite()) {
        return invalid("signal contains non-finite values");
    }
    let r = basis.n_coeffs();
    let c00: f64 = normalized_c00();
    let mvals = to_f64_matrix(&basis.values);
    let signal = to_f64_vec(signal);
    let free: Vec<usize> = (1..r).collect();
    let m1 = mvals.select_cols(&free);
    // Residual with only the fixed c₀₀ term.
    let e0: Vec<f64> = (0..basis.n_samples()).map(|i| signal[i] - mvals[(i, 0)] * c00).collect();
    let q = m1.gram();
    let g: Vec<f64> = m1.tr_mul_vec(&e0).into_iter().map(|v| -v).collect();
    let yv = to_f64_matrix(&constraints.sh.values);
    let a = yv.select_cols(&free);
    let b: Vec<f64> = (0..yv.rows()).map(|i| -yv[(i, 0)] * c00).collect();
    let problem = QpProblem { q, g, a, b };
    problem.validate()?;
    let res = dual_active_set(&problem, config)?;
    let mut coeffs = Vec::with_capacity(r);
    coeffs.push(c00);
    coeffs.extend_from_slice(&res.x);
    let pred = mvals.mul_vec(&coeffs);
    let residual_norm = T::lit(signal.iter().zip(&pred).map(|(&s, &p)| (s - p) * (s - p)).sum::<f64>().sqrt());
    let mut coeffs: Vec<T> = from_f64_vec(&coeffs);
    coeffs[0] = normalized_c00();
    Ok(QpSolution {
        coeffs: FodfCoefficients::new(basis.order, coeffs)?,
        residual_norm,
        kkt_residual: T::lit(res.kkt_residual),
        iterations: res.iterations,
        converged: res.converged,
    })
}
