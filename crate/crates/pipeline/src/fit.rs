//! Per-voxel model fitting and the voxel-parallel batch driver.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use noddish_core::kernels::{BasisBuilder, ResponseKernel};
use noddish_core::peaks::{PeakConfig, PeakFinder, DEFAULT_SEARCH_POINTS};
use noddish_core::smt::{estimate_forecast_diffusivities, estimate_fractions, shell_means, DictionaryConfig, FractionDictionary};
use noddish_core::solver::{fit_fodf_with, ConstraintSet, QpConfig, DEFAULT_CONSTRAINT_POINTS};
use noddish_core::{
    make_hemisphere_grid, AcquisitionScheme, DiffusivitySet, FodfCoefficients, ModelKind, PeakSet, VolumeFractions,
};

use crate::error::{invalid, PipelineError, Result};
use crate::volume::VolumeContainer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub model: ModelKind,
    pub order: usize,
    pub constraint_points: usize,
    pub search_points: usize,
    pub dictionary: DictionaryConfig,
    /// λ∥ and λ_csf for NODDI-SH; λ_csf only for FORECAST.
    pub diffusivities: DiffusivitySet,
    pub qp: QpConfig,
    pub peaks: PeakConfig,
    /// Skip the fODF and peaks; only fractions or diffusivities are estimated.
    pub fractions_only: bool,
    /// Worker threads; 0 lets the thread pool decide.
    pub workers: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::NoddiSh,
            order: 8,
            constraint_points: DEFAULT_CONSTRAINT_POINTS,
            search_points: DEFAULT_SEARCH_POINTS,
            dictionary: DictionaryConfig::default(),
            diffusivities: DiffusivitySet::simulation_default(),
            qp: QpConfig::default(),
            peaks: PeakConfig::default(),
            fractions_only: false,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VoxelStatus {
    Fitted,
    /// Excluded by the mask.
    Masked,
    /// Mean b=0 signal not positive; nothing can be normalized.
    ZeroB0,
    /// A model step failed; the pipeline continued.
    Failed,
}

impl VoxelStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fitted => "fitted",
            Self::Masked => "masked",
            Self::ZeroB0 => "zero-b0",
            Self::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelFit {
    pub status: VoxelStatus,
    pub fractions: Option<VolumeFractions>,
    pub diffusivities: Option<DiffusivitySet>,
    pub coeffs: Option<FodfCoefficients>,
    pub peaks: PeakSet,
    /// Mean squared error over every sample of the full scheme.
    pub mse: Option<f64>,
    /// Mean squared error over the fitted samples only.
    pub fit_mse: Option<f64>,
    pub converged: bool,
    pub kkt_residual: Option<f64>,
    pub iterations: usize,
    pub not_normalized: bool,
    pub underdetermined: bool,
    pub degenerate: bool,
    pub message: Option<String>,
}

impl VoxelFit {
    fn empty(status: VoxelStatus) -> Self {
        Self {
            status,
            fractions: None,
            diffusivities: None,
            coeffs: None,
            peaks: PeakSet::default(),
            mse: None,
            fit_mse: None,
            converged: false,
            kkt_residual: None,
            iterations: 0,
            not_normalized: false,
            underdetermined: false,
            degenerate: false,
            message: None,
        }
    }
}

/// Everything shared by the voxels of one fit: bases, dictionary, grids.
pub struct VoxelFitter {
    config: FitConfig,
    fit_indices: Vec<usize>,
    fit_scheme: AcquisitionScheme,
    fit_builder: BasisBuilder,
    full_builder: BasisBuilder,
    n_full: usize,
    dictionary: Option<FractionDictionary>,
    constraints: Option<ConstraintSet>,
    finder: Option<PeakFinder>,
}

impl VoxelFitter {
    /// `fit_indices` selects the samples used for estimation (all when `None`);
    /// the error is always evaluated on the full scheme.
    pub fn new(scheme: &AcquisitionScheme, fit_indices: Option<&[usize]>, config: &FitConfig) -> Result<Self> {
        config.peaks.validate()?;
        if !(config.qp.tol > 0.0) {
            return invalid("QP tolerance must be positive");
        }
        let fit_indices: Vec<usize> = match fit_indices {
            Some(idx) => idx.to_vec(),
            None => (0..scheme.n_samples()).collect(),
        };
        let fit_scheme = scheme.subset(&fit_indices)?;
        if fit_scheme.b0_shell().is_none() {
            return invalid("fitted samples must include at least one b=0 sample");
        }
        if fit_scheme.nonzero_shells().next().is_none() {
            return invalid("fitted samples must include a diffusion-weighted shell");
        }
        let dictionary = match config.model {
            ModelKind::NoddiSh => Some(FractionDictionary::for_scheme(&config.dictionary, &config.diffusivities, &fit_scheme)?),
            ModelKind::Forecast => None,
        };
        let (constraints, finder) = if config.fractions_only {
            (None, None)
        } else {
            let grid = make_hemisphere_grid(config.constraint_points)?;
            let search = make_hemisphere_grid(config.search_points)?;
            (Some(ConstraintSet::new(&grid, config.order)?), Some(PeakFinder::new(&search, config.order)?))
        };
        Ok(Self {
            config: config.clone(),
            fit_builder: BasisBuilder::new(&fit_scheme, config.order)?,
            full_builder: BasisBuilder::new(scheme, config.order)?,
            n_full: scheme.n_samples(),
            fit_indices,
            fit_scheme,
            dictionary,
            constraints,
            finder,
        })
    }

    pub fn config(&self) -> &FitConfig {
        &self.config
    }

    pub fn fit_scheme(&self) -> &AcquisitionScheme {
        &self.fit_scheme
    }

    /// Fits one voxel given its full (unnormalized) signal.
    pub fn fit(&self, signal: &[f64]) -> VoxelFit {
        match self.try_fit(signal) {
            Ok(v) => v,
            Err(e) => {
                let mut v = VoxelFit::empty(VoxelStatus::Failed);
                v.message = Some(e.to_string());
                v
            }
        }
    }

    fn try_fit(&self, signal: &[f64]) -> Result<VoxelFit> {
        if signal.len() != self.n_full {
            return invalid(format!("voxel has {} samples, scheme has {}", signal.len(), self.n_full));
        }
        let fit_raw: Vec<f64> = self.fit_indices.iter().map(|&i| signal[i]).collect();
        let b0 = self.fit_scheme.b0_shell().expect("checked in new");
        let b0_mean = b0.indices.iter().map(|&i| fit_raw[i]).sum::<f64>() / b0.len() as f64;
        if !(b0_mean > 0.0) || !b0_mean.is_finite() {
            return Ok(VoxelFit::empty(VoxelStatus::ZeroB0));
        }
        let fit_sig: Vec<f64> = fit_raw.iter().map(|v| v / b0_mean).collect();
        let means = shell_means(&fit_sig, &self.fit_scheme)?;
        let mut out = VoxelFit::empty(VoxelStatus::Fitted);
        out.not_normalized = means.not_normalized;

        let kernel = match &self.dictionary {
            Some(dict) => {
                let est = estimate_fractions(&means, dict)?;
                out.fractions = Some(est.fractions);
                out.underdetermined = est.underdetermined;
                out.diffusivities = Some(self.config.diffusivities);
                ResponseKernel::NoddiSh(self.config.diffusivities, est.fractions)
            }
            None => {
                let est = estimate_forecast_diffusivities(&means)?;
                out.underdetermined = est.underdetermined;
                out.degenerate = est.degenerate;
                let d = DiffusivitySet::new(est.lambda_par, est.lambda_perp, self.config.diffusivities.lambda_csf)?;
                out.diffusivities = Some(d);
                ResponseKernel::Forecast(d)
            }
        };
        let (constraints, finder) = match (&self.constraints, &self.finder) {
            (Some(c), Some(f)) => (c, f),
            _ => return Ok(out),
        };
        let basis = self.fit_builder.build(&kernel);
        let sol = fit_fodf_with(&fit_sig, &basis, constraints, &self.config.qp)?;
        out.converged = sol.converged;
        out.kkt_residual = Some(sol.kkt_residual);
        out.iterations = sol.iterations;
        out.fit_mse = Some(sol.residual_norm * sol.residual_norm / fit_sig.len() as f64);
        let pred = self.full_builder.build(&kernel).predict(&sol.coeffs.coeffs)?;
        let sse: f64 = signal.iter().zip(&pred).map(|(&s, &p)| (s / b0_mean - p).powi(2)).sum();
        out.mse = Some(sse / self.n_full as f64);
        out.peaks = finder.find(&sol.coeffs, &self.config.peaks)?;
        out.coeffs = Some(sol.coeffs);
        Ok(out)
    }
}

/// Runs `f` over `0..n` on `workers` threads (0 = default) and returns the
/// results in index order.
pub fn parallel_map<R: Send>(n: usize, workers: usize, f: impl Fn(usize) -> R + Sync + Send) -> Result<Vec<R>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| (0..n).into_par_iter().map(f).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub voxels: usize,
    pub fitted: usize,
    pub failed: usize,
    pub skipped: usize,
    pub not_converged: usize,
    pub mean_nu_ic: Option<f64>,
    pub std_nu_ic: Option<f64>,
    pub mean_mse: Option<f64>,
    pub std_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub voxels: Vec<VoxelFit>,
    pub summary: FitSummary,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

impl FitReport {
    pub fn new(voxels: Vec<VoxelFit>) -> Self {
        let count = |s: VoxelStatus| voxels.iter().filter(|v| v.status == s).count();
        let nu: Vec<f64> = voxels.iter().filter_map(|v| v.fractions.map(|f| f.nu_ic)).collect();
        let mse: Vec<f64> = voxels.iter().filter_map(|v| v.mse).collect();
        let (mean_nu_ic, std_nu_ic) = mean_std(&nu).unzip();
        let (mean_mse, std_mse) = mean_std(&mse).unzip();
        let summary = FitSummary {
            voxels: voxels.len(),
            fitted: count(VoxelStatus::Fitted),
            failed: count(VoxelStatus::Failed),
            skipped: count(VoxelStatus::Masked) + count(VoxelStatus::ZeroB0),
            not_converged: voxels.iter().filter(|v| v.coeffs.is_some() && !v.converged).count(),
            mean_nu_ic,
            std_nu_ic,
            mean_mse,
            std_mse,
        };
        Self { voxels, summary }
    }
}

/// Fits every voxel of `volume`. Voxels are independent and results are
/// assembled in voxel order, so output does not depend on `config.workers`.
pub fn fit_volume(
    volume: &VolumeContainer,
    scheme: &AcquisitionScheme,
    fit_indices: Option<&[usize]>,
    mask: Option<&VolumeContainer>,
    config: &FitConfig,
) -> Result<FitReport> {
    if volume.n_samples() != scheme.n_samples() {
        return invalid(format!(
            "volume has {} samples per voxel, scheme has {}",
            volume.n_samples(),
            scheme.n_samples()
        ));
    }
    if let Some(m) = mask {
        if m.dims[..3] != volume.dims[..3] || m.n_samples() != 1 {
            return invalid(format!("mask dims {:?} do not match volume {:?}", m.dims, volume.dims));
        }
    }
    let fitter = VoxelFitter::new(scheme, fit_indices, config)?;
    let voxels = parallel_map(volume.n_voxels(), config.workers, |v| {
        if mask.is_some_and(|m| m.data[v] == 0.0) {
            return VoxelFit::empty(VoxelStatus::Masked);
        }
        let signal: Vec<f64> = volume.voxel(v).iter().map(|&x| x as f64).collect();
        fitter.fit(&signal)
    })?;
    let failed = voxels.iter().filter(|v| v.status == VoxelStatus::Failed).count();
    if failed > 0 {
        warn!("{failed} voxel(s) failed to fit");
    }
    Ok(FitReport::new(voxels))
}

/// Per-voxel maps: fractions (ν_ic, ν_ec, ν_csf), diffusivities (λ∥, λ⊥),
/// SH coefficients and full-signal MSE. Missing values are NaN.
pub struct FitMaps {
    pub fractions: VolumeContainer,
    pub diffusivities: VolumeContainer,
    pub coefficients: VolumeContainer,
    pub mse: VolumeContainer,
}

pub fn fit_maps(report: &FitReport, spatial: [usize; 3], order: usize) -> Result<FitMaps> {
    let n = spatial.iter().product::<usize>();
    if n != report.voxels.len() {
        return invalid("report size does not match spatial dims");
    }
    let r = noddish_core::sh_count(order);
    let nan = f32::NAN;
    let mut fr = Vec::with_capacity(3 * n);
    let mut df = Vec::with_capacity(2 * n);
    let mut co = Vec::with_capacity(r * n);
    let mut mse = Vec::with_capacity(n);
    for v in &report.voxels {
        match v.fractions {
            Some(f) => fr.extend([f.nu_ic as f32, f.nu_ec as f32, f.nu_csf as f32]),
            None => fr.extend([nan; 3]),
        }
        match v.diffusivities {
            Some(d) => df.extend([d.lambda_par as f32, d.lambda_perp as f32]),
            None => df.extend([nan; 2]),
        }
        match &v.coeffs {
            Some(c) if c.coeffs.len() == r => co.extend(c.coeffs.iter().map(|&x| x as f32)),
            _ => co.extend(std::iter::repeat_n(nan, r)),
        }
        mse.push(v.mse.map_or(nan, |m| m as f32));
    }
    let [nx, ny, nz] = spatial;
    Ok(FitMaps {
        fractions: VolumeContainer::new([nx, ny, nz, 3], fr)?.with_provenance("fraction", "nu_ic nu_ec nu_csf"),
        diffusivities: VolumeContainer::new([nx, ny, nz, 2], df)?.with_provenance("mm^2/s", "lambda_par lambda_perp"),
        coefficients: VolumeContainer::new([nx, ny, nz, r], co)?.with_provenance("sh", &format!("fODF SH order {order}")),
        mse: VolumeContainer::new([nx, ny, nz, 1], mse)?.with_provenance("normalized^2", "full-signal MSE"),
    })
}

/// Peak file text: one `voxel x y z amplitude` line per peak.
pub fn peaks_text(report: &FitReport) -> String {
    let mut s = String::new();
    for (i, v) in report.voxels.iter().enumerate() {
        for (d, a) in v.peaks.directions.iter().zip(&v.peaks.amplitudes) {
            s.push_str(&format!("{i} {} {} {} {}\n", d.x, d.y, d.z, a));
        }
    }
    s
}

/// One row of the per-voxel fit report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelRecord {
    pub voxel: usize,
    pub x: usize,
    pub y: usize,
    pub z: usize,
    pub status: String,
    pub nu_ic: Option<f64>,
    pub nu_ec: Option<f64>,
    pub nu_csf: Option<f64>,
    pub lambda_par: Option<f64>,
    pub lambda_perp: Option<f64>,
    pub mse: Option<f64>,
    pub fit_mse: Option<f64>,
    pub peaks: usize,
    pub converged: bool,
    pub iterations: usize,
    pub kkt_residual: Option<f64>,
    pub message: String,
}

pub fn voxel_records(report: &FitReport, volume: &VolumeContainer) -> Vec<VoxelRecord> {
    report
        .voxels
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let [x, y, z] = volume.coords(i);
            VoxelRecord {
                voxel: i,
                x,
                y,
                z,
                status: v.status.as_str().into(),
                nu_ic: v.fractions.map(|f| f.nu_ic),
                nu_ec: v.fractions.map(|f| f.nu_ec),
                nu_csf: v.fractions.map(|f| f.nu_csf),
                lambda_par: v.diffusivities.map(|d| d.lambda_par),
                lambda_perp: v.diffusivities.map(|d| d.lambda_perp),
                mse: v.mse,
                fit_mse: v.fit_mse,
                peaks: v.peaks.len(),
                converged: v.converged,
                iterations: v.iterations,
                kkt_residual: v.kkt_residual,
                message: v.message.clone().unwrap_or_default(),
            }
        })
        .collect()
}
