//! Single-fiber response from anisotropic voxels via a diffusion tensor fit.

use log::warn;
use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use noddish_core::kernels::DEFAULT_LAMBDA_CSF;
use noddish_core::{AcquisitionScheme, DiffusivitySet};

use crate::error::{invalid, Result};
use crate::volume::VolumeContainer;

pub const DEFAULT_FA_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TensorFit {
    /// Eigenvalues, descending (mm²/s).
    pub eigenvalues: [f64; 3],
    pub fa: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseEstimate {
    pub diffusivities: DiffusivitySet,
    pub voxels_used: usize,
    /// No voxel passed the threshold; defaults were returned.
    pub fallback: bool,
}

pub fn fractional_anisotropy(ev: [f64; 3]) -> f64 {
    let [a, b, c] = ev;
    let den = (a * a + b * b + c * c).sqrt();
    if den == 0.0 {
        return 0.0;
    }
    (0.5f64).sqrt() * ((a - b).powi(2) + (b - c).powi(2) + (c - a).powi(2)).sqrt() / den
}

/// Weighted log-linear tensor fit on the b=0 samples and the lowest
/// diffusion-weighted shell. Weights are the squared signals predicted by
/// an ordinary least-squares pass.
pub fn fit_tensor(signal: &[f64], scheme: &AcquisitionScheme) -> Option<TensorFit> {
    let shell = scheme.nonzero_shells().next()?;
    let b0 = scheme.b0_shell()?;
    let rows: Vec<usize> =
        b0.indices.iter().chain(&shell.indices).copied().filter(|&i| signal[i] > 0.0 && signal[i].is_finite()).collect();
    if rows.len() < 7 {
        return None;
    }
    let x = DMatrix::from_fn(rows.len(), 7, |r, c| {
        let i = rows[r];
        let b = scheme.bvalues[i];
        let g = scheme.directions[i];
        match c {
            0 => 1.0,
            1 => -b * g.x * g.x,
            2 => -b * g.y * g.y,
            3 => -b * g.z * g.z,
            4 => -2.0 * b * g.x * g.y,
            5 => -2.0 * b * g.x * g.z,
            _ => -2.0 * b * g.y * g.z,
        }
    });
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| signal[i].ln()));
    let ols = x.clone().svd(true, true).solve(&y, 1e-12).ok()?;
    let w = (&x * &ols).map(|v| (2.0 * v).exp());
    let xw = DMatrix::from_fn(rows.len(), 7, |r, c| x[(r, c)] * w[r].sqrt());
    let yw = DVector::from_fn(rows.len(), |r, _| y[r] * w[r].sqrt());
    let beta = xw.svd(true, true).solve(&yw, 1e-12).ok()?;
    let d = Matrix3::new(beta[1], beta[4], beta[5], beta[4], beta[2], beta[6], beta[5], beta[6], beta[3]);
    let eig = SymmetricEigen::new(d);
    let mut ev = [eig.eigenvalues[0], eig.eigenvalues[1], eig.eigenvalues[2]];
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if ev.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(TensorFit { eigenvalues: ev, fa: fractional_anisotropy(ev) })
}

/// Mean principal eigenvalue (λ∥) and mean of the two minor eigenvalues (λ⊥)
/// over voxels with FA above `fa_threshold`.
pub fn estimate_response(volume: &VolumeContainer, scheme: &AcquisitionScheme, fa_threshold: f64) -> Result<ResponseEstimate> {
    if volume.n_samples() != scheme.n_samples() {
        return invalid("volume and scheme sample counts differ");
    }
    if !(0.0..1.0).contains(&fa_threshold) {
        return invalid(format!("FA threshold {fa_threshold} must lie in [0, 1)"));
    }
    if scheme.nonzero_shells().next().is_none() || scheme.b0_shell().is_none() {
        return invalid("response estimation needs b=0 samples and a diffusion-weighted shell");
    }
    let (mut par, mut perp, mut used) = (0.0, 0.0, 0usize);
    for v in 0..volume.n_voxels() {
        let signal: Vec<f64> = volume.voxel(v).iter().map(|&x| x as f64).collect();
        if let Some(t) = fit_tensor(&signal, scheme) {
            if t.fa > fa_threshold && t.eigenvalues[2] > 0.0 {
                par += t.eigenvalues[0];
                perp += 0.5 * (t.eigenvalues[1] + t.eigenvalues[2]);
                used += 1;
            }
        }
    }
    if used == 0 {
        warn!("no voxel has FA above {fa_threshold}; using default diffusivities");
        return Ok(ResponseEstimate { diffusivities: DiffusivitySet::simulation_default(), voxels_used: 0, fallback: true });
    }
    let n = used as f64;
    Ok(ResponseEstimate {
        diffusivities: DiffusivitySet::new(par / n, perp / n, DEFAULT_LAMBDA_CSF)?,
        voxels_used: used,
        fallback: false,
    })
}
