use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use noddish::error::{PipelineError, Result};
use noddish::experiment::{
    crossing_sweep_voxels, fanning_sweep_voxels, run_experiment, signals_to_volume, simulate_voxels, write_csv,
    ExperimentSpec, SweepKind,
};
use noddish::fit::{fit_maps, peaks_text, voxel_records, FitConfig};
use noddish::response::{estimate_response, DEFAULT_FA_THRESHOLD};
use noddish::{fit_volume, load_scheme, subsample_scheme, write_scheme, VolumeContainer};
use noddish_core::peaks::{PeakConfig, PeakFinder};
use noddish_core::scheme::HCP_TAU;
use noddish_core::smt::DictionaryConfig;
use noddish_core::solver::QpConfig;
use noddish_core::{hcp_like_scheme, make_hemisphere_grid, DiffusivitySet, FodfCoefficients, ModelKind};

#[derive(Parser)]
#[command(name = "noddish", version, about = "Spherical-harmonic NODDI and FORECAST fitting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a phantom sweep as a volume plus scheme files.
    Simulate(SimulateArgs),
    /// Fit every voxel of a volume.
    Fit(FitArgs),
    /// Keep the first N directions per shell up to a maximum b-value.
    Subsample(SubsampleArgs),
    /// Estimate the fiber response from high-FA voxels.
    Response(ResponseArgs),
    /// Run a sweep described by a TOML file.
    Experiment(ExperimentArgs),
    /// Extract peaks from an SH coefficient volume.
    Peaks(PeaksArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Forecast,
    NoddiSh,
}

impl From<Model> for ModelKind {
    fn from(m: Model) -> Self {
        match m {
            Model::Forecast => ModelKind::Forecast,
            Model::NoddiSh => ModelKind::NoddiSh,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Sweep {
    Fanning,
    Crossing,
}

#[derive(Args)]
struct SchemeArgs {
    #[arg(long)]
    bvals: PathBuf,
    #[arg(long)]
    bvecs: PathBuf,
    /// Diffusion time in seconds.
    #[arg(long, default_value_t = HCP_TAU)]
    tau: f64,
}

#[derive(Args)]
struct PeakArgs {
    #[arg(long, default_value_t = PeakConfig::default().rel_threshold)]
    rel_threshold: f64,
    #[arg(long, default_value_t = PeakConfig::default().min_sep_deg)]
    min_sep_deg: f64,
    #[arg(long, default_value_t = PeakConfig::default().max_peaks)]
    max_peaks: usize,
    /// Points on the hemisphere searched for maxima.
    #[arg(long, default_value_t = FitConfig::default().search_points)]
    search_points: usize,
}

impl PeakArgs {
    fn config(&self) -> PeakConfig {
        PeakConfig { rel_threshold: self.rel_threshold, min_sep_deg: self.min_sep_deg, max_peaks: self.max_peaks }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    sweep: Sweep,
    /// Output stem; writes <stem>.f32, .json, .bvals, .bvecs and _truth.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    draws: usize,
    #[arg(long, default_value_t = 20.0)]
    snr: f64,
    #[arg(long)]
    noiseless: bool,
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct FitArgs {
    /// Input volume stem (<stem>.f32 + <stem>.json).
    #[arg(long)]
    volume: PathBuf,
    #[command(flatten)]
    scheme: SchemeArgs,
    /// Mask volume stem; voxels with value 0 are skipped.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "noddi-sh")]
    model: Model,
    #[arg(long, default_value_t = 8)]
    order: usize,
    /// Hemisphere points carrying the positivity constraints.
    #[arg(long, default_value_t = FitConfig::default().constraint_points)]
    grid_size: usize,
    #[arg(long)]
    fractions_only: bool,
    #[arg(long, default_value_t = DictionaryConfig::default().csf_levels)]
    csf_levels: usize,
    #[arg(long, default_value_t = DictionaryConfig::default().split_scale)]
    split_scale: f64,
    #[arg(long, default_value_t = QpConfig::default().tol)]
    tol: f64,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long, default_value_t = DiffusivitySet::<f64>::simulation_default().lambda_par)]
    lambda_par: f64,
    #[arg(long, default_value_t = DiffusivitySet::<f64>::simulation_default().lambda_perp)]
    lambda_perp: f64,
    #[arg(long, default_value_t = DiffusivitySet::<f64>::simulation_default().lambda_csf)]
    lambda_csf: f64,
    /// Fit only the first N directions per shell (MSE still uses every sample).
    #[arg(long, requires = "max_b")]
    subsample_directions: Option<usize>,
    #[arg(long)]
    max_b: Option<f64>,
    #[command(flatten)]
    peaks: PeakArgs,
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct SubsampleArgs {
    #[command(flatten)]
    scheme: SchemeArgs,
    #[arg(long)]
    directions: usize,
    #[arg(long)]
    max_b: f64,
    #[arg(long)]
    out_bvals: PathBuf,
    #[arg(long)]
    out_bvecs: PathBuf,
    /// Writes the kept sample indices, one per line.
    #[arg(long)]
    index_out: Option<PathBuf>,
}

#[derive(Args)]
struct ResponseArgs {
    #[arg(long)]
    volume: PathBuf,
    #[command(flatten)]
    scheme: SchemeArgs,
    #[arg(long, default_value_t = DEFAULT_FA_THRESHOLD)]
    fa_threshold: f64,
}

#[derive(Args)]
struct ExperimentArgs {
    spec: PathBuf,
    /// Overrides the worker count in the spec.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct PeaksArgs {
    /// SH coefficient volume stem.
    #[arg(long)]
    coeffs: PathBuf,
    #[arg(long, default_value_t = 8)]
    order: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    peaks: PeakArgs,
}

#[derive(Serialize)]
struct TruthRow {
    voxel: usize,
    nu_ic: f64,
    nu_ec: f64,
    nu_csf: f64,
    fiber_directions: String,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| PipelineError::Io { path: dir.display().to_string(), source: e })?;
    }
    fs::write(path, text).map_err(|e| PipelineError::Io { path: path.display().to_string(), source: e })
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut spec = ExperimentSpec::new(SweepKind::Crossing, a.seed, ".");
    spec.draws = a.draws;
    spec.snr = a.snr;
    spec.noiseless = a.noiseless;
    let specs = match a.sweep {
        Sweep::Fanning => fanning_sweep_voxels(&spec)?,
        Sweep::Crossing => crossing_sweep_voxels(&spec)?,
    };
    let scheme = hcp_like_scheme();
    let (signals, truths) = simulate_voxels(&specs, &scheme, &DiffusivitySet::simulation_default(), a.workers)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| PipelineError::Io { path: dir.display().to_string(), source: e })?;
    }
    signals_to_volume(&signals, &format!("simulated sweep, seed {}", a.seed))?.write(&a.out)?;
    write_scheme(&scheme, &with_suffix(&a.out, ".bvals"), &with_suffix(&a.out, ".bvecs"))?;
    let rows: Vec<TruthRow> = truths
        .iter()
        .enumerate()
        .map(|(voxel, t)| TruthRow {
            voxel,
            nu_ic: t.fractions.nu_ic,
            nu_ec: t.fractions.nu_ec,
            nu_csf: t.fractions.nu_csf,
            fiber_directions: noddish::experiment::format_axes(&t.kent_means),
        })
        .collect();
    write_csv(&with_suffix(&a.out, "_truth.csv"), &rows)?;
    info!("wrote {} voxels to {}", signals.len(), a.out.display());
    Ok(())
}

fn fit(a: FitArgs) -> Result<()> {
    let scheme = load_scheme(&a.scheme.bvals, &a.scheme.bvecs, a.scheme.tau)?;
    let volume = VolumeContainer::read(&a.volume)?;
    let mask = a.mask.as_deref().map(VolumeContainer::read).transpose()?;
    let config = FitConfig {
        model: a.model.into(),
        order: a.order,
        constraint_points: a.grid_size,
        search_points: a.peaks.search_points,
        dictionary: DictionaryConfig { csf_levels: a.csf_levels, split_scale: a.split_scale },
        diffusivities: DiffusivitySet::new(a.lambda_par, a.lambda_perp, a.lambda_csf)?,
        qp: QpConfig { tol: a.tol, max_iterations: a.max_iterations },
        peaks: a.peaks.config(),
        fractions_only: a.fractions_only,
        workers: a.workers,
    };
    let indices = match (a.subsample_directions, a.max_b) {
        (Some(n), Some(b)) => Some(subsample_scheme(&scheme, n, b)?.1),
        _ => None,
    };
    let report = fit_volume(&volume, &scheme, indices.as_deref(), mask.as_ref(), &config)?;
    fs::create_dir_all(&a.out).map_err(|e| PipelineError::Io { path: a.out.display().to_string(), source: e })?;
    let [nx, ny, nz, _] = volume.dims;
    let maps = fit_maps(&report, [nx, ny, nz], a.order)?;
    maps.fractions.write(&a.out.join("fractions"))?;
    maps.diffusivities.write(&a.out.join("diffusivities"))?;
    maps.mse.write(&a.out.join("mse"))?;
    if !config.fractions_only {
        maps.coefficients.write(&a.out.join("coefficients"))?;
        write_text(&a.out.join("peaks.txt"), &peaks_text(&report))?;
    }
    write_csv(&a.out.join("voxels.csv"), &voxel_records(&report, &volume))?;
    let s = &report.summary;
    println!(
        "voxels {} fitted {} failed {} skipped {} not-converged {} mean nu_ic {} mean mse {}",
        s.voxels,
        s.fitted,
        s.failed,
        s.skipped,
        s.not_converged,
        s.mean_nu_ic.map_or("-".into(), |v| format!("{v:.4}")),
        s.mean_mse.map_or("-".into(), |v| format!("{v:.3e}"))
    );
    Ok(())
}

fn subsample(a: SubsampleArgs) -> Result<()> {
    let scheme = load_scheme(&a.scheme.bvals, &a.scheme.bvecs, a.scheme.tau)?;
    let (sub, idx) = subsample_scheme(&scheme, a.directions, a.max_b)?;
    write_scheme(&sub, &a.out_bvals, &a.out_bvecs)?;
    if let Some(p) = a.index_out {
        let text: String = idx.iter().map(|i| format!("{i}\n")).collect();
        write_text(&p, &text)?;
    }
    println!("kept {} of {} samples", sub.n_samples(), scheme.n_samples());
    Ok(())
}

fn response(a: ResponseArgs) -> Result<()> {
    let scheme = load_scheme(&a.scheme.bvals, &a.scheme.bvecs, a.scheme.tau)?;
    let volume = VolumeContainer::read(&a.volume)?;
    let r = estimate_response(&volume, &scheme, a.fa_threshold)?;
    println!(
        "lambda_par {:e} lambda_perp {:e} voxels {}{}",
        r.diffusivities.lambda_par,
        r.diffusivities.lambda_perp,
        r.voxels_used,
        if r.fallback { " (fallback)" } else { "" }
    );
    Ok(())
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    let mut spec = ExperimentSpec::load(&a.spec)?;
    if let Some(w) = a.workers {
        spec.workers = w;
    }
    let report = run_experiment(&spec)?;
    print!("{}", report.summary);
    for f in &report.files {
        info!("wrote {}", f.display());
    }
    Ok(())
}

fn peaks(a: PeaksArgs) -> Result<()> {
    let volume = VolumeContainer::read(&a.coeffs)?;
    let r = noddish_core::sh_count(a.order);
    if volume.n_samples() != r {
        return Err(PipelineError::InvalidArgument(format!(
            "coefficient volume has {} samples, order {} needs {r}",
            volume.n_samples(),
            a.order
        )));
    }
    let finder = PeakFinder::new(&make_hemisphere_grid(a.peaks.search_points)?, a.order)?;
    let config = a.peaks.config();
    let mut text = String::new();
    for v in 0..volume.n_voxels() {
        let c: Vec<f64> = volume.voxel(v).iter().map(|&x| x as f64).collect();
        if c.iter().any(|x| !x.is_finite()) {
            continue;
        }
        let p = finder.find(&FodfCoefficients::new(a.order, c)?, &config)?;
        for (d, amp) in p.directions.iter().zip(&p.amplitudes) {
            text.push_str(&format!("{v} {} {} {} {}\n", d.x, d.y, d.z, amp));
        }
    }
    write_text(&a.out, &text)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 4 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Subsample(a) => subsample(a),
        Command::Response(a) => response(a),
        Command::Experiment(a) => experiment(a),
        Command::Peaks(a) => peaks(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
