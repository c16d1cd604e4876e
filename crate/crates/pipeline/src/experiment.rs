//! Phantom sweeps driven by a TOML experiment file, with CSV reports.
//!
//! ```toml
//! sweep = "crossing"        # fanning | crossing | subsample
//! root_seed = 7
//! output_dir = "out/crossing"
//! draws = 3
//! snr = 20.0                # omit with noiseless = true for clean signals
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use noddish_core::phantom::{
    crossing_sweep, default_nu_ic_levels, fanning_sweep, synth_signal, CrossingSweep, FanningSweep, GroundTruth,
    PhantomVoxelSpec, DEFAULT_DIRECTIONS_PER_VOXEL,
};
use noddish_core::smt::shell_means;
use noddish_core::{angular_error, hcp_like_scheme, AcquisitionScheme, DiffusivitySet, ModelKind, UnitDirection};

use crate::error::{invalid, PipelineError, Result};
use crate::fit::{mean_std, parallel_map, FitConfig, VoxelFit, VoxelFitter};
use crate::scheme_io::load_scheme;
use crate::subsample::subsample_scheme;
use crate::volume::VolumeContainer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Fanning,
    Crossing,
    Subsample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomOverrides {
    pub kappas: Option<Vec<f64>>,
    pub beta_fractions: Option<Vec<f64>>,
    pub rotations_deg: Option<Vec<f64>>,
    pub angles_deg: Option<Vec<f64>>,
    pub orientations: Option<usize>,
    pub nu_ic: Option<Vec<f64>>,
    pub directions: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsampleOptions {
    #[serde(default = "default_subsample_directions")]
    pub directions: Vec<usize>,
    #[serde(default = "default_subsample_max_b")]
    pub max_b: Vec<f64>,
    /// Voxels with estimated ν_ic above this enter the MSE histogram.
    #[serde(default = "default_histogram_nu_ic")]
    pub histogram_min_nu_ic: f64,
    #[serde(default = "default_histogram_bins")]
    pub histogram_bins: usize,
}

fn default_subsample_directions() -> Vec<usize> {
    vec![90, 60, 30]
}
fn default_subsample_max_b() -> Vec<f64> {
    vec![2000.0, 3000.0]
}
fn default_histogram_nu_ic() -> f64 {
    0.6
}
fn default_histogram_bins() -> usize {
    20
}

impl Default for SubsampleOptions {
    fn default() -> Self {
        Self {
            directions: default_subsample_directions(),
            max_b: default_subsample_max_b(),
            histogram_min_nu_ic: default_histogram_nu_ic(),
            histogram_bins: default_histogram_bins(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub sweep: SweepKind,
    pub root_seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_snr")]
    pub snr: f64,
    #[serde(default)]
    pub noiseless: bool,
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_model")]
    pub model: ModelKind,
    /// Defaults to true for the fanning sweep, false otherwise.
    pub fractions_only: Option<bool>,
    pub bvals: Option<PathBuf>,
    pub bvecs: Option<PathBuf>,
    pub phantom: Option<PhantomOverrides>,
    pub subsample: Option<SubsampleOptions>,
}

fn default_draws() -> usize {
    10
}
fn default_snr() -> f64 {
    20.0
}
fn default_model() -> ModelKind {
    ModelKind::NoddiSh
}

impl ExperimentSpec {
    pub fn new(sweep: SweepKind, root_seed: u64, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            sweep,
            root_seed,
            output_dir: output_dir.into(),
            draws: default_draws(),
            snr: default_snr(),
            noiseless: false,
            workers: 0,
            model: default_model(),
            fractions_only: None,
            bvals: None,
            bvecs: None,
            phantom: None,
            subsample: None,
        }
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
            PipelineError::parse(path, line, column, e.message().to_string())
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::parse(path, &text)
    }

    fn validate(&self) -> Result<()> {
        if self.draws == 0 {
            return invalid("draws must be at least 1");
        }
        if !self.noiseless && !(self.snr > 0.0) {
            return invalid("snr must be positive");
        }
        if self.bvals.is_some() != self.bvecs.is_some() {
            return invalid("bvals and bvecs must be given together");
        }
        Ok(())
    }

    fn snr_option(&self) -> Option<f64> {
        (!self.noiseless).then_some(self.snr)
    }

    pub fn scheme(&self) -> Result<AcquisitionScheme> {
        match (&self.bvals, &self.bvecs) {
            (Some(a), Some(b)) => load_scheme(a, b, noddish_core::scheme::HCP_TAU),
            _ => Ok(hcp_like_scheme()),
        }
    }

    pub fn fanning_sweep(&self) -> FanningSweep {
        let d = FanningSweep::default();
        let o = self.phantom.clone().unwrap_or_else(no_overrides);
        FanningSweep {
            kappas: o.kappas.unwrap_or(d.kappas),
            beta_fractions: o.beta_fractions.unwrap_or(d.beta_fractions),
            rotations_deg: o.rotations_deg.unwrap_or(d.rotations_deg),
            orientations: o.orientations.unwrap_or(d.orientations),
            nu_ic: o.nu_ic.unwrap_or(d.nu_ic),
            draws: self.draws,
            snr: self.snr_option(),
            directions: o.directions.unwrap_or(DEFAULT_DIRECTIONS_PER_VOXEL),
            root_seed: self.root_seed,
        }
    }

    pub fn crossing_sweep(&self) -> CrossingSweep {
        let d = CrossingSweep::default();
        let o = self.phantom.clone().unwrap_or_else(no_overrides);
        CrossingSweep {
            angles_deg: o.angles_deg.unwrap_or(d.angles_deg),
            kappa: o.kappas.and_then(|k| k.first().copied()).unwrap_or(d.kappa),
            orientations: o.orientations.unwrap_or(d.orientations),
            nu_ic: o.nu_ic.unwrap_or_else(default_nu_ic_levels),
            draws: self.draws,
            snr: self.snr_option(),
            directions: o.directions.unwrap_or(DEFAULT_DIRECTIONS_PER_VOXEL),
            root_seed: self.root_seed,
        }
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            model: self.model,
            fractions_only: self.fractions_only.unwrap_or(self.sweep == SweepKind::Fanning),
            workers: self.workers,
            ..FitConfig::default()
        }
    }
}

fn no_overrides() -> PhantomOverrides {
    PhantomOverrides {
        kappas: None,
        beta_fractions: None,
        rotations_deg: None,
        angles_deg: None,
        orientations: None,
        nu_ic: None,
        directions: None,
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |p| before.len() - p - 1) + 1;
    (line, col)
}

/// Synthesizes every voxel of a sweep (in sweep order) as a volume of shape
/// (n, 1, 1, samples), plus the ground truth records.
pub fn simulate_voxels(
    specs: &[PhantomVoxelSpec],
    scheme: &AcquisitionScheme,
    diff: &DiffusivitySet,
    workers: usize,
) -> Result<(Vec<Vec<f64>>, Vec<GroundTruth>)> {
    let out = parallel_map(specs.len(), workers, |i| synth_signal(&specs[i], scheme, diff))?;
    let mut signals = Vec::with_capacity(out.len());
    let mut truths = Vec::with_capacity(out.len());
    for r in out {
        let (s, t) = r?;
        signals.push(s);
        truths.push(t);
    }
    Ok((signals, truths))
}

pub fn signals_to_volume(signals: &[Vec<f64>], provenance: &str) -> Result<VolumeContainer> {
    let n = signals.first().map_or(0, Vec::len);
    let data = signals.iter().flat_map(|s| s.iter().map(|&v| v as f32)).collect();
    Ok(VolumeContainer::new([signals.len(), 1, 1, n], data)?.with_provenance("normalized", provenance))
}

fn fit_all(fitter: &VoxelFitter, signals: &[Vec<f64>], workers: usize) -> Result<Vec<VoxelFit>> {
    parallel_map(signals.len(), workers, |i| fitter.fit(&signals[i]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanningRow {
    pub index: usize,
    pub kappa: f64,
    pub beta: f64,
    pub rotation_deg: f64,
    pub orientation: usize,
    pub draw: usize,
    pub nu_ic_true: f64,
    pub status: String,
    pub nu_ic: Option<f64>,
    pub nu_ec: Option<f64>,
    pub nu_csf: Option<f64>,
    pub nu_ic_abs_error: Option<f64>,
    pub peaks: usize,
    pub mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossingRow {
    pub index: usize,
    pub angle_deg: f64,
    pub orientation: usize,
    pub draw: usize,
    pub nu_ic_true: f64,
    pub status: String,
    pub nu_ic: Option<f64>,
    pub nu_ic_abs_error: Option<f64>,
    pub peaks: usize,
    pub angular_error_deg: Option<f64>,
    pub no_peaks: bool,
    pub mse: Option<f64>,
    pub converged: bool,
}

pub fn fanning_results(spec: &ExperimentSpec) -> Result<Vec<FanningRow>> {
    let scheme = spec.scheme()?;
    let diff = DiffusivitySet::simulation_default();
    let voxels = fanning_sweep(&spec.fanning_sweep())?;
    let specs: Vec<_> = voxels.iter().map(|v| v.spec.clone()).collect();
    let (signals, _) = simulate_voxels(&specs, &scheme, &diff, spec.workers)?;
    let fitter = VoxelFitter::new(&scheme, None, &spec.fit_config())?;
    let fits = fit_all(&fitter, &signals, spec.workers)?;
    Ok(voxels
        .iter()
        .zip(&fits)
        .enumerate()
        .map(|(index, (v, f))| {
            let c = v.condition;
            let nu = f.fractions.map(|x| x.nu_ic);
            FanningRow {
                index,
                kappa: c.kappa,
                beta: c.beta,
                rotation_deg: c.rotation_deg,
                orientation: c.orientation,
                draw: c.draw,
                nu_ic_true: c.nu_ic,
                status: f.status.as_str().into(),
                nu_ic: nu,
                nu_ec: f.fractions.map(|x| x.nu_ec),
                nu_csf: f.fractions.map(|x| x.nu_csf),
                nu_ic_abs_error: nu.map(|n| (n - c.nu_ic).abs()),
                peaks: f.peaks.len(),
                mse: f.mse,
            }
        })
        .collect())
}

pub fn crossing_results(spec: &ExperimentSpec) -> Result<Vec<CrossingRow>> {
    let scheme = spec.scheme()?;
    let diff = DiffusivitySet::simulation_default();
    let voxels = crossing_sweep(&spec.crossing_sweep())?;
    let specs: Vec<_> = voxels.iter().map(|v| v.spec.clone()).collect();
    let (signals, truths) = simulate_voxels(&specs, &scheme, &diff, spec.workers)?;
    let fitter = VoxelFitter::new(&scheme, None, &spec.fit_config())?;
    let fits = fit_all(&fitter, &signals, spec.workers)?;
    let mut rows = Vec::with_capacity(fits.len());
    for (index, ((v, f), t)) in voxels.iter().zip(&fits).zip(&truths).enumerate() {
        let c = v.condition;
        let nu = f.fractions.map(|x| x.nu_ic);
        let ae = if f.coeffs.is_some() { Some(angular_error(&f.peaks, &t.kent_means)?) } else { None };
        rows.push(CrossingRow {
            index,
            angle_deg: c.angle_deg,
            orientation: c.orientation,
            draw: c.draw,
            nu_ic_true: c.nu_ic,
            status: f.status.as_str().into(),
            nu_ic: nu,
            nu_ic_abs_error: nu.map(|n| (n - c.nu_ic).abs()),
            peaks: f.peaks.len(),
            angular_error_deg: ae.map(|a| a.degrees),
            no_peaks: ae.is_some_and(|a| a.no_peaks),
            mse: f.mse,
            converged: f.converged,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleRow {
    pub scheme: String,
    pub directions: usize,
    pub max_b: f64,
    pub index: usize,
    pub nu_ic_true: f64,
    pub status: String,
    pub nu_ic: Option<f64>,
    pub mse: Option<f64>,
    pub fit_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleSummaryRow {
    pub scheme: String,
    pub directions: usize,
    pub max_b: f64,
    pub samples: usize,
    pub voxels_in_histogram: usize,
    pub mean_mse: Option<f64>,
    pub median_mse: Option<f64>,
    pub nu_ic_correlation_with_full: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShellMeanDiffRow {
    pub directions: usize,
    pub nominal_b: f64,
    /// Mean over voxels of |mean_subset - mean_all| / mean_all.
    pub mean_relative_difference: f64,
    pub max_relative_difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub scheme: String,
    pub bin: usize,
    pub log10_mse_low: f64,
    pub log10_mse_high: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsampleResults {
    pub rows: Vec<SubsampleRow>,
    pub summary: Vec<SubsampleSummaryRow>,
    pub shell_means: Vec<ShellMeanDiffRow>,
    pub histogram: Vec<HistogramRow>,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Relative shell-mean differences between the first `n` directions of each
/// shell and the full shell, per voxel.
pub fn shell_mean_differences(signals: &[Vec<f64>], scheme: &AcquisitionScheme, n: usize) -> Result<Vec<ShellMeanDiffRow>> {
    let max_b = scheme.shells.last().map_or(0.0, |s| s.nominal_b);
    let (sub, idx) = subsample_scheme(scheme, n, max_b)?;
    let mut rows = Vec::new();
    let shells: Vec<f64> = scheme.nonzero_shells().map(|s| s.nominal_b).collect();
    let mut diffs = vec![Vec::with_capacity(signals.len()); shells.len()];
    for s in signals {
        let full = shell_means(s, scheme)?;
        let part: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
        let partial = shell_means(&part, &sub)?;
        for (k, (a, b)) in full.nonzero().zip(partial.nonzero()).enumerate() {
            diffs[k].push(((b.mean - a.mean) / a.mean).abs());
        }
    }
    for (b, d) in shells.iter().zip(diffs) {
        let (mean, _) = mean_std(&d).unwrap_or((0.0, 0.0));
        rows.push(ShellMeanDiffRow {
            directions: n,
            nominal_b: *b,
            mean_relative_difference: mean,
            max_relative_difference: d.iter().copied().fold(0.0, f64::max),
        });
    }
    Ok(rows)
}

/// Fits the crossing phantom with every (directions, max_b) subset; errors
/// are evaluated on all samples of the full scheme.
pub fn subsample_results(spec: &ExperimentSpec) -> Result<SubsampleResults> {
    let opts = spec.subsample.clone().unwrap_or_default();
    let scheme = spec.scheme()?;
    let diff = DiffusivitySet::simulation_default();
    let voxels = crossing_sweep(&spec.crossing_sweep())?;
    let specs: Vec<_> = voxels.iter().map(|v| v.spec.clone()).collect();
    let (signals, _) = simulate_voxels(&specs, &scheme, &diff, spec.workers)?;
    let config = spec.fit_config();
    let full_fit = fit_all(&VoxelFitter::new(&scheme, None, &config)?, &signals, spec.workers)?;
    let full_nu: Vec<Option<f64>> = full_fit.iter().map(|f| f.fractions.map(|x| x.nu_ic)).collect();

    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut histogram = Vec::new();
    let mut per_scheme_mse = Vec::new();
    for &n in &opts.directions {
        for &max_b in &opts.max_b {
            let name = format!("{n}dirs-b{max_b}");
            let (sub, idx) = subsample_scheme(&scheme, n, max_b)?;
            let fits = fit_all(&VoxelFitter::new(&scheme, Some(&idx), &config)?, &signals, spec.workers)?;
            let mut hist_mse = Vec::new();
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for (i, f) in fits.iter().enumerate() {
                let nu = f.fractions.map(|x| x.nu_ic);
                rows.push(SubsampleRow {
                    scheme: name.clone(),
                    directions: n,
                    max_b,
                    index: i,
                    nu_ic_true: voxels[i].condition.nu_ic,
                    status: f.status.as_str().into(),
                    nu_ic: nu,
                    mse: f.mse,
                    fit_mse: f.fit_mse,
                });
                if let (Some(fv), Some(sv)) = (full_nu[i], nu) {
                    a.push(fv);
                    b.push(sv);
                    if fv > opts.histogram_min_nu_ic {
                        if let Some(m) = f.mse {
                            hist_mse.push(m);
                        }
                    }
                }
            }
            let mean_mse = mean_std(&hist_mse).map(|m| m.0);
            summary.push(SubsampleSummaryRow {
                scheme: name.clone(),
                directions: n,
                max_b,
                samples: sub.n_samples(),
                voxels_in_histogram: hist_mse.len(),
                mean_mse,
                median_mse: median(&mut hist_mse.clone()),
                nu_ic_correlation_with_full: pearson(&a, &b),
            });
            per_scheme_mse.push((name, hist_mse));
        }
    }
    // Shared log-spaced bins across schemes so histograms are comparable.
    let all: Vec<f64> = per_scheme_mse.iter().flat_map(|(_, v)| v.iter().copied()).filter(|&m| m > 0.0).collect();
    if !all.is_empty() && opts.histogram_bins > 0 {
        let lo = all.iter().copied().fold(f64::INFINITY, f64::min).log10();
        let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max).log10();
        let width = ((hi - lo) / opts.histogram_bins as f64).max(1e-12);
        for (name, v) in &per_scheme_mse {
            let mut counts = vec![0usize; opts.histogram_bins];
            for &m in v.iter().filter(|&&m| m > 0.0) {
                let k = (((m.log10() - lo) / width) as usize).min(opts.histogram_bins - 1);
                counts[k] += 1;
            }
            let total = v.len().max(1) as f64;
            for (k, c) in counts.into_iter().enumerate() {
                histogram.push(HistogramRow {
                    scheme: name.clone(),
                    bin: k,
                    log10_mse_low: lo + k as f64 * width,
                    log10_mse_high: lo + (k + 1) as f64 * width,
                    fraction: c as f64 / total,
                });
            }
        }
    }
    let mut shell_rows = Vec::new();
    for &n in &opts.directions {
        shell_rows.extend(shell_mean_differences(&signals, &scheme, n)?);
    }
    Ok(SubsampleResults { rows, summary, shell_means: shell_rows, histogram })
}

pub fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| PipelineError::format("csv output", e))?;
    for r in rows {
        w.serialize(r).map_err(|e| PipelineError::format("csv output", e))?;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub voxels: usize,
    pub mean_nu_ic_abs_error: Option<f64>,
    pub std_nu_ic_abs_error: Option<f64>,
    pub mean_angular_error_deg: Option<f64>,
    pub std_angular_error_deg: Option<f64>,
}

fn group_summary(group: String, nu_err: &[f64], ae: &[f64]) -> GroupSummary {
    let nu = mean_std(nu_err);
    let a = mean_std(ae);
    GroupSummary {
        group,
        voxels: nu_err.len().max(ae.len()),
        mean_nu_ic_abs_error: nu.map(|x| x.0),
        std_nu_ic_abs_error: nu.map(|x| x.1),
        mean_angular_error_deg: a.map(|x| x.0),
        std_angular_error_deg: a.map(|x| x.1),
    }
}

/// Groups rows by a key, preserving first-appearance order.
fn grouped<R, K: PartialEq + Clone>(rows: &[R], key: impl Fn(&R) -> K) -> Vec<(K, Vec<&R>)> {
    let mut out: Vec<(K, Vec<&R>)> = Vec::new();
    for r in rows {
        let k = key(r);
        match out.iter_mut().find(|(g, _)| *g == k) {
            Some((_, v)) => v.push(r),
            None => out.push((k, vec![r])),
        }
    }
    out
}

pub fn fanning_summary(rows: &[FanningRow]) -> Vec<GroupSummary> {
    let mut out = Vec::new();
    for (k, g) in grouped(rows, |r| r.kappa.to_bits()) {
        let e: Vec<f64> = g.iter().filter_map(|r| r.nu_ic_abs_error).collect();
        out.push(group_summary(format!("kappa={}", f64::from_bits(k)), &e, &[]));
    }
    for (k, g) in grouped(rows, |r| (r.kappa.to_bits(), r.beta.to_bits())) {
        let e: Vec<f64> = g.iter().filter_map(|r| r.nu_ic_abs_error).collect();
        out.push(group_summary(format!("kappa={} beta={}", f64::from_bits(k.0), f64::from_bits(k.1)), &e, &[]));
    }
    out
}

pub fn crossing_summary(rows: &[CrossingRow]) -> Vec<GroupSummary> {
    let mut out = Vec::new();
    let all: Vec<f64> = rows.iter().filter_map(|r| r.nu_ic_abs_error).collect();
    out.push(group_summary("all".into(), &all, &[]));
    for (k, g) in grouped(rows, |r| r.angle_deg.to_bits()) {
        let e: Vec<f64> = g.iter().filter_map(|r| r.nu_ic_abs_error).collect();
        let a: Vec<f64> = g.iter().filter_map(|r| r.angular_error_deg).collect();
        out.push(group_summary(format!("angle={}", f64::from_bits(k)), &e, &a));
    }
    for (k, g) in grouped(rows, |r| (r.angle_deg.to_bits(), r.nu_ic_true.to_bits())) {
        let e: Vec<f64> = g.iter().filter_map(|r| r.nu_ic_abs_error).collect();
        let a: Vec<f64> = g.iter().filter_map(|r| r.angular_error_deg).collect();
        out.push(group_summary(format!("angle={} nu_ic={}", f64::from_bits(k.0), f64::from_bits(k.1)), &e, &a));
    }
    out
}

fn summary_text(title: &str, groups: &[GroupSummary]) -> String {
    let mut s = format!("{title}\n");
    let fmt = |v: Option<f64>, scale: f64| v.map_or("-".to_string(), |x| format!("{:.3}", x * scale));
    for g in groups {
        let _ = writeln!(
            s,
            "{:<28} n={:<6} |nu_ic err| {}% ± {}%  AE {}° ± {}°",
            g.group,
            g.voxels,
            fmt(g.mean_nu_ic_abs_error, 100.0),
            fmt(g.std_nu_ic_abs_error, 100.0),
            fmt(g.mean_angular_error_deg, 1.0),
            fmt(g.std_angular_error_deg, 1.0)
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

/// Runs the sweep named in `spec` and writes its reports to `spec.output_dir`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    let dir = &spec.output_dir;
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let mut files = Vec::new();
    let mut out = |name: &str| {
        let p = dir.join(name);
        files.push(p.clone());
        p
    };
    let summary = match spec.sweep {
        SweepKind::Fanning => {
            let rows = fanning_results(spec)?;
            let groups = fanning_summary(&rows);
            write_csv(&out("voxels.csv"), &rows)?;
            write_csv(&out("summary.csv"), &groups)?;
            summary_text("fanning sweep: nu_ic error", &groups)
        }
        SweepKind::Crossing => {
            let rows = crossing_results(spec)?;
            let groups = crossing_summary(&rows);
            write_csv(&out("voxels.csv"), &rows)?;
            write_csv(&out("summary.csv"), &groups)?;
            summary_text("crossing sweep: nu_ic and angular error", &groups)
        }
        SweepKind::Subsample => {
            let r = subsample_results(spec)?;
            write_csv(&out("voxels.csv"), &r.rows)?;
            write_csv(&out("summary.csv"), &r.summary)?;
            write_csv(&out("shell_means.csv"), &r.shell_means)?;
            write_csv(&out("mse_histogram.csv"), &r.histogram)?;
            let mut s = String::from("subsample sweep: full-signal MSE\n");
            for row in &r.summary {
                let _ = writeln!(
                    s,
                    "{:<18} samples={:<4} mean MSE {:.3e} median {:.3e} r(nu_ic) {}",
                    row.scheme,
                    row.samples,
                    row.mean_mse.unwrap_or(f64::NAN),
                    row.median_mse.unwrap_or(f64::NAN),
                    row.nu_ic_correlation_with_full.map_or("-".into(), |r| format!("{r:.4}"))
                );
            }
            s
        }
    };
    let txt = out("summary.txt");
    fs::write(&txt, &summary).map_err(|e| PipelineError::io(&txt, e))?;
    Ok(ExperimentReport { files, summary })
}

/// Canonical ground-truth axes as `x y z` text.
pub fn format_axes(axes: &[UnitDirection]) -> String {
    axes.iter().map(|d| format!("{} {} {}", d.x, d.y, d.z)).collect::<Vec<_>>().join(";")
}

/// Voxel specifications of the fanning sweep configured by `spec`.
pub fn fanning_sweep_voxels(spec: &ExperimentSpec) -> Result<Vec<PhantomVoxelSpec>> {
    Ok(fanning_sweep(&spec.fanning_sweep())?.into_iter().map(|v| v.spec).collect())
}

/// Voxel specifications of the crossing sweep configured by `spec`.
pub fn crossing_sweep_voxels(spec: &ExperimentSpec) -> Result<Vec<PhantomVoxelSpec>> {
    Ok(crossing_sweep(&spec.crossing_sweep())?.into_iter().map(|v| v.spec).collect())
}
