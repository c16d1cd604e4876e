//! Local-maximum peak extraction on an fODF and angular-error scoring.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{solve_dense, Matrix};
use crate::scalar::Real;
use crate::sh::{eval_sh, make_hemisphere_grid, FodfCoefficients, ShBasisMatrix, SphericalGrid, UnitDirection};

pub const DEFAULT_SEARCH_POINTS: usize = 3000;
pub const DEFAULT_REL_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MIN_SEPARATION_DEG: f64 = 25.0;
pub const DEFAULT_MAX_PEAKS: usize = 5;

/// Relative value range below which an fODF is treated as having no peaks.
const FLATNESS: f64 = 1e-6;
/// Neighbor radius as a multiple of the mean grid spacing.
const NEIGHBOR_RADIUS: f64 = 1.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakConfig {
    pub rel_threshold: f64,
    pub min_sep_deg: f64,
    pub max_peaks: usize,
}

impl Default for PeakConfig {
    fn default() -> Self {
        Self {
            rel_threshold: DEFAULT_REL_THRESHOLD,
            min_sep_deg: DEFAULT_MIN_SEPARATION_DEG,
            max_peaks: DEFAULT_MAX_PEAKS,
        }
    }
}

impl PeakConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_threshold > 0.0 && self.rel_threshold < 1.0) {
            return invalid(format!("relative threshold {} must lie in (0, 1)", self.rel_threshold));
        }
        if !(self.min_sep_deg > 0.0) {
            return invalid(format!("minimum separation {} must be positive", self.min_sep_deg));
        }
        Ok(())
    }
}

/// Peak directions (z ≥ 0) with their fODF amplitudes, strongest first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PeakSet<T: Real = f64> {
    pub directions: Vec<UnitDirection<T>>,
    pub amplitudes: Vec<T>,
}

impl<T: Real> PeakSet<T> {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// Search grid, its SH samples and precomputed antipodal-aware neighbor lists.
#[derive(Debug, Clone)]
pub struct PeakFinder<T: Real = f64> {
    grid: SphericalGrid<T>,
    sh: ShBasisMatrix<T>,
    neighbors: Vec<Vec<usize>>,
}

impl<T: Real> PeakFinder<T> {
    pub fn new(search_grid: &SphericalGrid<T>, order: usize) -> Result<Self> {
        let n = search_grid.count();
        if n < 12 {
            return invalid("peak search grid needs at least 12 directions");
        }
        let sh = eval_sh(order, &search_grid.directions)?;
        let spacing = (2.0 * std::f64::consts::PI / n as f64).sqrt();
        let cos_r = T::lit((NEIGHBOR_RADIUS * spacing).cos());
        let dirs = &search_grid.directions;
        let neighbors = (0..n)
            .map(|i| (0..n).filter(|&j| j != i && dirs[i].dot(&dirs[j]).abs() >= cos_r).collect())
            .collect();
        Ok(Self { grid: search_grid.clone(), sh, neighbors })
    }

    /// Finder on the default 3000-point hemisphere grid.
    pub fn with_default_grid(order: usize) -> Result<Self> {
        Self::new(&make_hemisphere_grid(DEFAULT_SEARCH_POINTS)?, order)
    }

    pub fn order(&self) -> usize {
        self.sh.max_order
    }

    pub fn grid(&self) -> &SphericalGrid<T> {
        &self.grid
    }

    pub fn find(&self, coeffs: &FodfCoefficients<T>, config: &PeakConfig) -> Result<PeakSet<T>> {
        config.validate()?;
        if coeffs.order != self.order() {
            return invalid(format!("fODF order {} differs from finder order {}", coeffs.order, self.order()));
        }
        let values = self.sh.expand(&coeffs.coeffs)?;
        let (lo, hi) = values.iter().fold((T::infinity(), T::neg_infinity()), |(a, b), &v| (a.min(v), b.max(v)));
        if !(hi > T::zero()) || hi - lo <= T::lit(FLATNESS) * hi.abs().max(lo.abs()) {
            return Ok(PeakSet::default());
        }
        let mut candidates: Vec<(UnitDirection<T>, T)> = Vec::new();
        for (i, &v) in values.iter().enumerate() {
            if v <= T::zero() {
                continue;
            }
            let is_max = self.neighbors[i].iter().all(|&j| values[j] < v || (values[j] == v && j > i));
            if is_max {
                candidates.push(self.refine(i, &values, coeffs));
            }
        }
        candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        let top = match candidates.first() {
            Some(c) => c.1,
            None => return Ok(PeakSet::default()),
        };
        let cut = T::lit(config.rel_threshold) * top;
        let min_sep = T::lit(config.min_sep_deg);
        let mut out = PeakSet::default();
        for (d, a) in candidates {
            if out.len() >= config.max_peaks || a < cut {
                break;
            }
            if out.directions.iter().all(|p| p.axial_angle_deg(&d) >= min_sep) {
                out.directions.push(d);
                out.amplitudes.push(a);
            }
        }
        Ok(out)
    }

    /// One quadratic least-squares fit over the tangent-plane neighborhood.
    fn refine(&self, i: usize, values: &[T], coeffs: &FodfCoefficients<T>) -> (UnitDirection<T>, T) {
        let d = self.grid.directions[i];
        let fallback = (d.canonical(), values[i]);
        let nb = &self.neighbors[i];
        if nb.len() < 6 {
            return fallback;
        }
        let (e1, e2) = d.tangent_frame();
        let (e1, e2) = (e1.to_array(), e2.to_array());
        let mut rows = Vec::with_capacity(6 * (nb.len() + 1));
        let mut rhs = Vec::with_capacity(nb.len() + 1);
        let mut push = |u: T, v: T, f: T| {
            rows.extend_from_slice(&[T::one(), u, v, u * u, u * v, v * v]);
            rhs.push(f - values[i]);
        };
        push(T::zero(), T::zero(), values[i]);
        let mut radius = T::zero();
        for &j in nb {
            let mut n = self.grid.directions[j];
            if n.dot(&d) < T::zero() {
                n = n.neg();
            }
            let c = n.dot(&d);
            let u = (n.x * e1[0] + n.y * e1[1] + n.z * e1[2]) / c;
            let v = (n.x * e2[0] + n.y * e2[1] + n.z * e2[2]) / c;
            radius = radius.max((u * u + v * v).sqrt());
            push(u, v, values[j]);
        }
        let a = match Matrix::from_vec(rhs.len(), 6, rows) {
            Ok(a) => a,
            Err(_) => return fallback,
        };
        let beta = match solve_dense(&a.gram(), &a.tr_mul_vec(&rhs)) {
            Ok(b) => b,
            Err(_) => return fallback,
        };
        // Stationary point of b₁u + b₂v + b₃u² + b₄uv + b₅v².
        let (h11, h12, h22) = (T::lit(2.0) * beta[3], beta[4], T::lit(2.0) * beta[5]);
        let det = h11 * h22 - h12 * h12;
        if !(h11 < T::zero() && det > T::zero()) {
            return fallback;
        }
        let u = (-beta[1] * h22 + beta[2] * h12) / det;
        let v = (-beta[2] * h11 + beta[1] * h12) / det;
        if !((u * u + v * v).sqrt() <= radius) {
            return fallback;
        }
        let nd = match UnitDirection::normalized(
            d.x + u * e1[0] + v * e2[0],
            d.y + u * e1[1] + v * e2[1],
            d.z + u * e1[2] + v * e2[2],
        ) {
            Ok(nd) => nd,
            Err(_) => return fallback,
        };
        let amp = match eval_sh(coeffs.order, &[nd]).and_then(|m| m.expand(&coeffs.coeffs)) {
            Ok(v) => v[0],
            Err(_) => return fallback,
        };
        if amp >= values[i] {
            (nd.canonical(), amp)
        } else {
            fallback
        }
    }
}

/// Extracts peaks with a finder built for this call.
pub fn extract_peaks<T: Real>(
    coeffs: &FodfCoefficients<T>,
    search_grid: &SphericalGrid<T>,
    rel_threshold: T,
    min_sep_deg: T,
    max_peaks: usize,
) -> Result<PeakSet<T>> {
    let config = PeakConfig {
        rel_threshold: rel_threshold.as_f64(),
        min_sep_deg: min_sep_deg.as_f64(),
        max_peaks,
    };
    config.validate()?;
    PeakFinder::new(search_grid, coeffs.order)?.find(coeffs, &config)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularError<T: Real = f64> {
    pub degrees: T,
    /// No peaks were available; `degrees` is the maximal 90°.
    pub no_peaks: bool,
}

/// Mean over ground-truth axes of the axial angle to the closest peak.
pub fn angular_error<T: Real>(peaks: &PeakSet<T>, ground_truth: &[UnitDirection<T>]) -> Result<AngularError<T>> {
    if ground_truth.is_empty() {
        return invalid("ground truth must contain at least one direction");
    }
    if peaks.is_empty() {
        return Ok(AngularError { degrees: T::lit(90.0), no_peaks: true });
    }
    let total: T = ground_truth
        .iter()
        .map(|g| peaks.directions.iter().map(|p| p.axial_angle_deg(g)).fold(T::infinity(), T::min))
        .sum();
    Ok(AngularError { degrees: total / T::from_usize_lossy(ground_truth.len()), no_peaks: false })
}
