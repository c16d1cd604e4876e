//! Spherical-mean estimation of microstructure parameters.
//!
//! The (0,0) column of a signal basis times c₀₀ = 1/√(4π) is the mean of the
//! signal over a shell, independent of the fODF. Matching measured shell
//! means against that prediction fixes the volume fractions (NODDI-SH, by a
//! dictionary search) or the tensor diffusivities (FORECAST, by a bounded
//! derivative-free search).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::kernels::{psi_all, DiffusivitySet, VolumeFractions, MAX_DIFFUSIVITY};
use crate::linalg::Matrix;
use crate::scalar::Real;
use crate::scheme::{AcquisitionScheme, SHELL_TOLERANCE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShellMean<T: Real = f64> {
    pub nominal_b: T,
    pub mean: T,
    pub count: usize,
}

/// Per-shell arithmetic means of a normalized signal, ascending in b.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShellMeans<T: Real = f64> {
    pub shells: Vec<ShellMean<T>>,
    /// Set when the b=0 mean differs from one by more than 0.5.
    pub not_normalized: bool,
}

impl<T: Real> ShellMeans<T> {
    pub fn nonzero(&self) -> impl Iterator<Item = &ShellMean<T>> {
        self.shells.iter().filter(|s| s.nominal_b > T::zero())
    }

    pub fn n_nonzero(&self) -> usize {
        self.nonzero().count()
    }
}

pub fn shell_means<T: Real>(signal: &[T], scheme: &AcquisitionScheme<T>) -> Result<ShellMeans<T>> {
    if signal.len() != scheme.n_samples() {
        return invalid(format!(
            "signal has {} samples, scheme has {}",
            signal.len(),
            scheme.n_samples()
        ));
    }
    let mut shells = Vec::with_capacity(scheme.shells.len());
    let mut not_normalized = false;
    for sh in &scheme.shells {
        if sh.indices.is_empty() {
            return invalid(format!("shell at b={} has no samples", sh.nominal_b));
        }
        let sum: T = sh.indices.iter().map(|&i| signal[i]).sum();
        let mean = sum / T::from_usize_lossy(sh.indices.len());
        if sh.is_b0() && (mean - T::one()).abs() > T::lit(0.5) {
            not_normalized = true;
        }
        shells.push(ShellMean { nominal_b: sh.nominal_b, mean, count: sh.indices.len() });
    }
    Ok(ShellMeans { shells, not_normalized })
}

/// Spherical mean of the three-compartment signal at `b`:
/// ν_csf e^{-bλ_csf} + ½[ν_ic Ψ₀(bλ∥) + ν_ec e^{-bλ⊥} Ψ₀(b(λ∥-λ⊥))], with λ⊥
/// from the tortuosity rule.
pub fn predict_mean<T: Real>(fractions: &VolumeFractions<T>, diff: &DiffusivitySet<T>, b: T) -> Result<T> {
    let f = VolumeFractions::new(fractions.nu_ic, fractions.nu_ec, fractions.nu_csf)?;
    if !(b >= T::zero()) || !b.is_finite() {
        return invalid(format!("b-value {b} must be finite and non-negative"));
    }
    Ok(mean_unchecked(&f, diff, b))
}

fn mean_unchecked<T: Real>(f: &VolumeFractions<T>, diff: &DiffusivitySet<T>, b: T) -> T {
    let half = T::lit(0.5);
    let mut e = f.nu_csf * (-b * diff.lambda_csf).exp() + half * f.nu_ic * psi_all(b * diff.lambda_par)[0];
    if let Some(perp) = f.tortuosity_perp(diff.lambda_par) {
        e = e + half * f.nu_ec * (-b * perp).exp() * psi_all(b * (diff.lambda_par - perp))[0];
    }
    e
}

/// Spherical mean of a single axially symmetric tensor: ½ e^{-bλ⊥} Ψ₀(b(λ∥-λ⊥)).
pub fn forecast_mean<T: Real>(lambda_par: T, lambda_perp: T, b: T) -> T {
    T::lit(0.5) * (-b * lambda_perp).exp() * psi_all(b * (lambda_par - lambda_perp))[0]
}

/// Parameters of the non-uniform volume-fraction grid.
///
/// ν_csf takes `csf_levels` evenly spaced values in [0, 1]; a level with
/// free-water fraction c holds `max(1, round((1-c)·split_scale))` evenly spaced
/// (ν_ic, ν_ec) splits of the remaining 1-c.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DictionaryConfig {
    pub csf_levels: usize,
    pub split_scale: f64,
}

impl Default for DictionaryConfig {
    /// 16 free-water levels; the scale 47.75 yields 383 entries.
    fn default() -> Self {
        Self { csf_levels: 16, split_scale: 47.75 }
    }
}

/// Enumerates the dictionary entries, ordered by ascending ν_csf then ν_ic.
pub fn dictionary_entries<T: Real>(config: &DictionaryConfig) -> Result<Vec<VolumeFractions<T>>> {
    if config.csf_levels == 0 || !config.split_scale.is_finite() || config.split_scale < 0.0 {
        return invalid(format!("dictionary config {config:?} produces no entries"));
    }
    let mut entries = Vec::new();
    let levels = config.csf_levels;
    for k in 0..levels {
        let csf = if levels == 1 { 0.0 } else { k as f64 / (levels - 1) as f64 };
        let tissue = 1.0 - csf;
        let splits = ((tissue * config.split_scale).round() as usize).max(1);
        for j in 0..splits {
            let ic = if tissue == 0.0 {
                0.0
            } else if splits == 1 {
                0.5 * tissue
            } else {
                tissue * (j as f64 / (splits - 1) as f64)
            };
            let ec = tissue - ic;
            entries.push(VolumeFractions { nu_ic: T::lit(ic), nu_ec: T::lit(ec), nu_csf: T::lit(csf) });
        }
    }
    if entries.is_empty() {
        return invalid("dictionary config produces no entries");
    }
    Ok(entries)
}

/// Volume-fraction candidates with their predicted shell means.
#[derive(Debug, Clone)]
pub struct FractionDictionary<T: Real = f64> {
    pub entries: Vec<VolumeFractions<T>>,
    /// Nominal b-values of the columns of `predicted_means`.
    pub shell_bvalues: Vec<T>,
    /// n_entries × n_shells.
    pub predicted_means: Matrix<T>,
    pub diffusivities: DiffusivitySet<T>,
}

impl<T: Real> FractionDictionary<T> {
    pub fn build(config: &DictionaryConfig, diff: &DiffusivitySet<T>, shell_bvalues: &[T]) -> Result<Self> {
        let entries = dictionary_entries(config)?;
        Self::from_entries(entries, diff, shell_bvalues)
    }

    pub fn from_entries(entries: Vec<VolumeFractions<T>>, diff: &DiffusivitySet<T>, shell_bvalues: &[T]) -> Result<Self> {
        if entries.is_empty() {
            return invalid("empty dictionary");
        }
        if !(diff.lambda_par >= T::zero() && diff.lambda_par <= T::lit(MAX_DIFFUSIVITY)) {
            return invalid("parallel diffusivity outside the supported range");
        }
        let mut predicted_means = Matrix::zeros(entries.len(), shell_bvalues.len());
        for (i, e) in entries.iter().enumerate() {
            for (j, &b) in shell_bvalues.iter().enumerate() {
                predicted_means[(i, j)] = predict_mean(e, diff, b)?;
            }
        }
        Ok(Self { entries, shell_bvalues: shell_bvalues.to_vec(), predicted_means, diffusivities: *diff })
    }

    /// Dictionary for the shells of `scheme`.
    pub fn for_scheme(config: &DictionaryConfig, diff: &DiffusivitySet<T>, scheme: &AcquisitionScheme<T>) -> Result<Self> {
        let bvals: Vec<T> = scheme.shells.iter().map(|s| s.nominal_b).collect();
        Self::build(config, diff, &bvals)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Shell means predicted by entry `i`, for every dictionary shell.
    pub fn means_of(&self, i: usize) -> ShellMeans<T> {
        ShellMeans {
            shells: self
                .shell_bvalues
                .iter()
                .enumerate()
                .map(|(j, &b)| ShellMean { nominal_b: b, mean: self.predicted_means[(i, j)], count: 1 })
                .collect(),
            not_normalized: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FractionEstimate<T: Real = f64> {
    pub fractions: VolumeFractions<T>,
    pub index: usize,
    /// Sum of squared shell-mean residuals at the selected entry.
    pub residual: T,
    /// Fewer than two non-zero shells were available.
    pub underdetermined: bool,
}

/// Picks the dictionary entry whose predicted means best match `means`
/// (least squares over the non-zero shells, ties to the lowest index).
pub fn estimate_fractions<T: Real>(means: &ShellMeans<T>, dict: &FractionDictionary<T>) -> Result<FractionEstimate<T>> {
    if dict.is_empty() {
        return invalid("empty dictionary");
    }
    let tol = T::lit(SHELL_TOLERANCE);
    let mut cols = Vec::new();
    for s in means.nonzero() {
        let col = dict
            .shell_bvalues
            .iter()
            .enumerate()
            .filter(|(_, &b)| (b - s.nominal_b).abs() <= tol)
            .min_by(|a, b| (*a.1 - s.nominal_b).abs().partial_cmp(&(*b.1 - s.nominal_b).abs()).unwrap())
            .map(|(j, _)| j);
        match col {
            Some(j) => cols.push((j, s.mean)),
            None => return invalid(format!("dictionary has no shell near b={}", s.nominal_b)),
        }
    }
    if cols.is_empty() {
        return invalid("no diffusion-weighted shells to match");
    }
    let mut best = 0;
    let mut best_r = T::infinity();
    for i in 0..dict.len() {
        let row = dict.predicted_means.row(i);
        let mut r = T::zero();
        for &(j, m) in &cols {
            let d = row[j] - m;
            r = r + d * d;
        }
        if r < best_r {
            best_r = r;
            best = i;
        }
    }
    Ok(FractionEstimate {
        fractions: dict.entries[best],
        index: best,
        residual: best_r,
        underdetermined: cols.len() < 2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastDiffusivities<T: Real = f64> {
    pub lambda_par: T,
    pub lambda_perp: T,
    /// Sum of squared shell-mean residuals at the optimum.
    pub residual: T,
    /// The signal shows no decay; diffusivities are reported as zero.
    pub degenerate: bool,
    pub underdetermined: bool,
}

const FORECAST_PAR_MIN: f64 = 0.1e-3;
const FORECAST_GRID: usize = 50;
const FORECAST_REFINEMENTS: usize = 20;

/// Fits (λ∥, λ⊥) to the shell means: a 50×50 grid over
/// λ∥ ∈ [1e-4, 4e-3], λ⊥ ∈ [0, λ∥] followed by 20 levels of pattern search
/// with the steps halved at each level.
pub fn estimate_forecast_diffusivities<T: Real>(means: &ShellMeans<T>) -> Result<ForecastDiffusivities<T>> {
    let obs: Vec<(T, T)> = means.nonzero().map(|s| (s.nominal_b, s.mean)).collect();
    if obs.is_empty() {
        return invalid("no diffusion-weighted shells to fit");
    }
    let underdetermined = obs.len() < 2;
    if obs.iter().all(|&(_, m)| m >= T::one()) {
        return Ok(ForecastDiffusivities {
            lambda_par: T::zero(),
            lambda_perp: T::zero(),
            residual: obs.iter().map(|&(_, m)| (m - T::one()) * (m - T::one())).sum(),
            degenerate: true,
            underdetermined,
        });
    }
    let cost = |par: T, perp: T| -> T {
        obs.iter()
            .map(|&(b, m)| {
                let d = forecast_mean(par, perp, b) - m;
                d * d
            })
            .sum()
    };
    // Search over (λ∥, ρ = λ⊥/λ∥) so the constraint λ⊥ ≤ λ∥ is a box bound.
    let lo = T::lit(FORECAST_PAR_MIN);
    let hi = T::lit(MAX_DIFFUSIVITY);
    let n = FORECAST_GRID;
    let last = T::from_usize_lossy(n - 1);
    let par_step = (hi - lo) / last;
    let (mut par, mut ratio, mut best) = (lo, T::zero(), T::infinity());
    for i in 0..n {
        let p = lo + par_step * T::from_usize_lossy(i);
        for j in 0..n {
            let r = T::from_usize_lossy(j) / last;
            let c = cost(p, p * r);
            if c < best {
                best = c;
                par = p;
                ratio = r;
            }
        }
    }
    let (mut sp, mut sr) = (par_step, T::one() / last);
    let zero = T::zero();
    let one = T::one();
    for _ in 0..FORECAST_REFINEMENTS {
        for _ in 0..200 {
            let mut moved = false;
            for (dp, dr) in [
                (one, zero),
                (-one, zero),
                (zero, one),
                (zero, -one),
                (one, one),
                (-one, -one),
                (one, -one),
                (-one, one),
            ] {
                let p = (par + dp * sp).max(lo).min(hi);
                let r = (ratio + dr * sr).max(zero).min(one);
                let c = cost(p, p * r);
                if c < best {
                    best = c;
                    par = p;
                    ratio = r;
                    moved = true;
                }
            }
            if !moved {
                break;
            }
        }
        sp = sp / T::lit(2.0);
        sr = sr / T::lit(2.0);
    }
    let perp = par * ratio;
    Ok(ForecastDiffusivities { lambda_par: par, lambda_perp: perp, residual: best, degenerate: false, underdetermined })
}
