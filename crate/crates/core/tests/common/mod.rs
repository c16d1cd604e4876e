//! Reference solvers shared by the integration suites.

#![allow(dead_code)]

use noddish_core::linalg::Matrix;
use noddish_core::sh::{eval_sh, normalized_c00, UnitDirection};
use noddish_core::solver::QpProblem;
use rand::Rng;

/// Gaussian elimination with partial pivoting; `None` when singular.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[p][c].abs() < 1e-12 {
            return None;
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    Some(x)
}

fn next_subset(s: &mut [usize], m: usize) -> bool {
    let k = s.len();
    for i in (0..k).rev() {
        if s[i] < m - k + i {
            s[i] += 1;
            for j in i + 1..k {
                s[j] = s[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Solves a strictly convex QP by enumerating active sets of increasing size
/// and returning the first KKT point found (it is the unique optimum).
pub fn brute_force_qp(p: &QpProblem) -> Option<Vec<f64>> {
    let n = p.q.rows();
    let m = p.a.rows();
    for k in 0..=n.min(m) {
        let mut s: Vec<usize> = (0..k).collect();
        loop {
            let dim = n + k;
            let mut a = vec![vec![0.0; dim]; dim];
            let mut rhs = vec![0.0; dim];
            for i in 0..n {
                for j in 0..n {
                    a[i][j] = p.q[(i, j)];
                }
                rhs[i] = -p.g[i];
            }
            for (r, &ci) in s.iter().enumerate() {
                for j in 0..n {
                    a[j][n + r] = -p.a[(ci, j)];
                    a[n + r][j] = p.a[(ci, j)];
                }
                rhs[n + r] = p.b[ci];
            }
            if let Some(sol) = gauss_solve(a, rhs) {
                let x = &sol[..n];
                let dual_ok = sol[n..].iter().all(|&l| l >= -1e-10);
                let primal_ok = (0..m).all(|i| {
                    let v: f64 = (0..n).map(|j| p.a[(i, j)] * x[j]).sum();
                    v - p.b[i] >= -1e-10
                });
                if dual_ok && primal_ok {
                    return Some(x.to_vec());
                }
            }
            if k == 0 || !next_subset(&mut s, m) {
                break;
            }
        }
    }
    None
}

pub fn random_direction<R: Rng>(rng: &mut R) -> UnitDirection {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).sqrt();
    UnitDirection::normalized(r * phi.cos(), r * phi.sin(), z).unwrap()
}

/// Positivity-constrained order-2 fODF fit with c₀₀ eliminated: 5 free
/// coefficients, one constraint per random direction.
pub fn random_order2_problem<R: Rng>(rng: &mut R, constraints: usize) -> QpProblem {
    let rows = 30;
    let m = Matrix::from_fn(rows, 5, |_, _| rng.random_range(-1.0..1.0));
    let target: Vec<f64> = (0..rows).map(|_| rng.random_range(-3.0..3.0)).collect();
    let q = m.gram();
    let g: Vec<f64> = m.tr_mul_vec(&target).into_iter().map(|v| -v).collect();
    let dirs: Vec<UnitDirection> = (0..constraints).map(|_| random_direction(rng)).collect();
    let y = eval_sh(2, &dirs).unwrap();
    let a = y.values.select_cols(&[1, 2, 3, 4, 5]);
    let c00: f64 = normalized_c00();
    let b = (0..constraints).map(|i| -y.values[(i, 0)] * c00).collect();
    QpProblem { q, g, a, b }
}

/// Non-negative least squares min ‖Cλ - d‖, λ ≥ 0, by the Lawson–Hanson
/// active-set method (columns of C given as `c[j]`). Returns the residual norm.
pub fn nnls_residual(c: &[Vec<f64>], d: &[f64]) -> f64 {
    let k = c.len();
    let n = d.len();
    let resid = |lam: &[f64]| -> Vec<f64> {
        (0..n).map(|i| d[i] - (0..k).map(|j| c[j][i] * lam[j]).sum::<f64>()).collect()
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut lam = vec![0.0; k];
    let mut passive = vec![false; k];
    // Least squares restricted to the passive columns.
    let solve_passive = |passive: &[bool]| -> Vec<f64> {
        let idx: Vec<usize> = (0..k).filter(|&j| passive[j]).collect();
        let a: Vec<Vec<f64>> = idx
            .iter()
            .map(|&p| idx.iter().map(|&q| (0..n).map(|i| c[p][i] * c[q][i]).sum()).collect())
            .collect();
        let b: Vec<f64> = idx.iter().map(|&p| (0..n).map(|i| c[p][i] * d[i]).sum()).collect();
        let z = gauss_solve(a, b).unwrap_or_else(|| vec![0.0; idx.len()]);
        let mut out = vec![0.0; k];
        for (&j, v) in idx.iter().zip(z) {
            out[j] = v;
        }
        out
    };
    for _ in 0..3 * k + 10 {
        let r = resid(&lam);
        let w: Vec<f64> = (0..k).map(|j| (0..n).map(|i| c[j][i] * r[i]).sum()).collect();
        let Some(t) = (0..k).filter(|&j| !passive[j] && w[j] > 1e-14).max_by(|&a, &b| w[a].total_cmp(&w[b])) else {
            break;
        };
        passive[t] = true;
        loop {
            let z = solve_passive(&passive);
            if (0..k).filter(|&j| passive[j]).all(|j| z[j] > 0.0) {
                lam = z;
                break;
            }
            let alpha = (0..k)
                .filter(|&j| passive[j] && z[j] <= 0.0)
                .map(|j| lam[j] / (lam[j] - z[j]))
                .fold(f64::INFINITY, f64::min);
            for j in 0..k {
                lam[j] += alpha * (z[j] - lam[j]);
                if passive[j] && lam[j] <= 1e-15 {
                    passive[j] = false;
                    lam[j] = 0.0;
                }
            }
        }
    }
    norm(&resid(&lam))
}
