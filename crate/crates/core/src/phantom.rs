//! Synthetic white-matter voxels: Kent-distributed fiber dispersion,
//! stick/zeppelin/free-water signals and Rician noise, plus the fanning and
//! crossing sweeps used for validation.
//!
//! Everything here is double precision; the phantom is a reference generator,
//! not a fitting path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernels::{DiffusivitySet, VolumeFractions};
use crate::scheme::AcquisitionScheme;
use crate::sh::UnitDirection;

const ORTHO_TOL: f64 = 1e-10;
const SERIES_REL_TOL: f64 = 1e-15;
const SERIES_MAX_TERMS: usize = 200;
const MIN_ACCEPTANCE: f64 = 1e-6;

/// Fisher–Bingham (FB5) parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KentParams {
    pub kappa: f64,
    pub beta: f64,
    pub mu: UnitDirection,
    pub gamma1: UnitDirection,
    pub gamma2: UnitDirection,
}

impl KentParams {
    pub fn new(kappa: f64, beta: f64, mu: UnitDirection, gamma1: UnitDirection, gamma2: UnitDirection) -> Result<Self> {
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return invalid(format!("kappa {kappa} must be finite and non-negative"));
        }
        if !(beta >= 0.0 && beta <= 0.5 * kappa) {
            return invalid(format!("beta {beta} must lie in [0, kappa/2]"));
        }
        for (name, d) in [("mu", mu), ("gamma1", gamma1), ("gamma2", gamma2)] {
            UnitDirection::new(d.x, d.y, d.z).map_err(|_| Error::InvalidArgument(format!("{name} is not a unit vector")))?;
        }
        if mu.dot(&gamma1).abs() > ORTHO_TOL || mu.dot(&gamma2).abs() > ORTHO_TOL || gamma1.dot(&gamma2).abs() > ORTHO_TOL {
            return invalid("mu, gamma1 and gamma2 must be mutually orthogonal");
        }
        Ok(Self { kappa, beta, mu, gamma1, gamma2 })
    }

    /// Distribution about `mu` whose major axis is turned by `rotation`
    /// radians about `mu` from a fixed reference frame.
    pub fn oriented(kappa: f64, beta: f64, mu: UnitDirection, rotation: f64) -> Result<Self> {
        let mu = UnitDirection::new(mu.x, mu.y, mu.z)?;
        let (e1, e2) = mu.tangent_frame();
        let (s, c) = rotation.sin_cos();
        let g1 = UnitDirection::normalized(c * e1.x + s * e2.x, c * e1.y + s * e2.y, c * e1.z + s * e2.z)?;
        let x = mu.cross(&g1);
        let g2 = UnitDirection::normalized(x[0], x[1], x[2])?;
        Self::new(kappa, beta, mu, g1, g2)
    }

    /// Exponent κ μ·u + β[(γ₁·u)² - (γ₂·u)²].
    pub fn exponent(&self, u: &UnitDirection) -> f64 {
        let a = self.gamma1.dot(u);
        let b = self.gamma2.dot(u);
        self.kappa * self.mu.dot(u) + self.beta * (a * a - b * b)
    }
}

/// Scaled modified Bessel functions e^{-x} I_{k+½}(x) for k = 0..=n, x > 0.
fn scaled_bessel_half(n: usize, x: f64) -> Vec<f64> {
    // Ratios I_{ν+1}/I_ν by downward continued-fraction recurrence.
    let top = n + 2 * (x.ceil() as usize) + 64;
    let mut ratios = vec![0.0; n + 1];
    let mut r = 0.0;
    for k in (0..top).rev() {
        let nu = k as f64 + 0.5;
        r = 1.0 / (2.0 * (nu + 1.0) / x + r);
        if k < n {
            ratios[k] = r;
        }
    }
    let mut out = Vec::with_capacity(n + 1);
    // I_{1/2}(x) = √(2/(πx)) sinh x.
    let mut v = (2.0 / (std::f64::consts::PI * x)).sqrt() * (-(-2.0 * x).exp_m1()) * 0.5;
    out.push(v);
    for &ratio in ratios.iter().take(n) {
        v *= ratio;
        out.push(v);
    }
    out
}

/// ln c(κ, β) for the normalizer
/// c = 2π Σ_j Γ(j+½)/Γ(j+1) β^{2j} (κ/2)^{-2j-½} I_{2j+½}(κ).
pub fn kent_log_normalizer(kappa: f64, beta: f64) -> Result<f64> {
    if !(kappa >= 0.0) || !kappa.is_finite() || !(beta >= 0.0 && beta <= 0.5 * kappa) {
        return invalid(format!("invalid Kent parameters kappa={kappa}, beta={beta}"));
    }
    if kappa == 0.0 {
        return Ok((4.0 * std::f64::consts::PI).ln());
    }
    let bessel = scaled_bessel_half(2 * SERIES_MAX_TERMS + 1, kappa);
    let ratio2 = (2.0 * beta / kappa).powi(2);
    let pre = (0.5 * kappa).powf(-0.5);
    let mut gamma_ratio = std::f64::consts::PI.sqrt();
    let mut power = 1.0;
    let mut sum = 0.0;
    for j in 0..SERIES_MAX_TERMS {
        let term = gamma_ratio * power * pre * bessel[2 * j];
        sum += term;
        if term <= SERIES_REL_TOL * sum {
            return Ok((2.0 * std::f64::consts::PI).ln() + kappa + sum.ln());
        }
        gamma_ratio *= (j as f64 + 0.5) / (j as f64 + 1.0);
        power *= ratio2;
    }
    Err(Error::Numeric(format!(
        "Kent normalizer series did not converge in {SERIES_MAX_TERMS} terms (kappa={kappa}, beta={beta})"
    )))
}

pub fn kent_pdf(p: &KentParams, u: &UnitDirection) -> Result<f64> {
    let p = KentParams::new(p.kappa, p.beta, p.mu, p.gamma1, p.gamma2)?;
    let log_c = kent_log_normalizer(p.kappa, p.beta)?;
    Ok((p.exponent(u) - log_c).exp())
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn uniform_sphere<R: Rng>(rng: &mut R) -> UnitDirection {
    let z: f64 = 2.0 * rng.random::<f64>() - 1.0;
    let phi = 2.0 * std::f64::consts::PI * rng.random::<f64>();
    let r = (1.0 - z * z).max(0.0).sqrt();
    UnitDirection { x: r * phi.cos(), y: r * phi.sin(), z }
}

fn sample_kent_with<R: Rng>(p: &KentParams, n: usize, rng: &mut R) -> Result<Vec<UnitDirection>> {
    let p = KentParams::new(p.kappa, p.beta, p.mu, p.gamma1, p.gamma2)?;
    if n == 0 {
        return invalid("sample count must be at least 1");
    }
    // For β ≤ κ/2 the exponent peaks at u = μ with value κ, so e^κ bounds the
    // unnormalized density and acceptance is c(κ,β)/(4π e^κ).
    let log_c = kent_log_normalizer(p.kappa, p.beta)?;
    let acceptance = (log_c - p.kappa).exp() / (4.0 * std::f64::consts::PI);
    if acceptance < MIN_ACCEPTANCE {
        return Err(Error::Numeric(format!("Kent rejection acceptance {acceptance:e} is too low")));
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u = uniform_sphere(rng);
        let log_ratio = p.exponent(&u) - p.kappa;
        if rng.random::<f64>().ln() <= log_ratio {
            out.push(u);
        }
    }
    Ok(out)
}

/// `n` independent Kent draws by rejection from the uniform sphere.
pub fn sample_kent(p: &KentParams, n: usize, seed: u64) -> Result<Vec<UnitDirection>> {
    sample_kent_with(p, n, &mut rng_for(seed, 0))
}

fn rician_with<R: Rng>(signal: &[f64], snr: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(snr > 0.0) {
        return invalid(format!("SNR {snr} must be positive"));
    }
    if snr.is_infinite() {
        return Ok(signal.to_vec());
    }
    let normal = Normal::new(0.0, 1.0 / snr).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(signal
        .iter()
        .map(|&e| {
            let n1 = normal.sample(rng);
            let n2 = normal.sample(rng);
            ((e + n1) * (e + n1) + n2 * n2).sqrt()
        })
        .collect())
}

/// Rician magnitude noise with σ = 1/snr; an infinite SNR is the identity.
pub fn add_rician_noise(signal: &[f64], snr: f64, seed: u64) -> Result<Vec<f64>> {
    rician_with(signal, snr, &mut rng_for(seed, 0))
}

pub const DEFAULT_DIRECTIONS_PER_VOXEL: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomVoxelSpec {
    /// One population (fanning) or two (crossing).
    pub populations: Vec<KentParams>,
    pub fractions: VolumeFractions,
    /// Total sampled fiber directions, split evenly between populations.
    pub directions: usize,
    /// `None` for a noiseless signal.
    pub snr: Option<f64>,
    pub seed: u64,
}

impl PhantomVoxelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.populations.is_empty() || self.populations.len() > 2 {
            return invalid(format!("a voxel holds 1 or 2 populations, got {}", self.populations.len()));
        }
        for p in &self.populations {
            KentParams::new(p.kappa, p.beta, p.mu, p.gamma1, p.gamma2)?;
        }
        VolumeFractions::new(self.fractions.nu_ic, self.fractions.nu_ec, self.fractions.nu_csf)?;
        if self.directions < self.populations.len() || self.directions % self.populations.len() != 0 {
            return invalid(format!(
                "{} directions cannot be split evenly across {} populations",
                self.directions,
                self.populations.len()
            ));
        }
        if let Some(snr) = self.snr {
            if !(snr > 0.0) {
                return invalid(format!("SNR {snr} must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Mean axis of each population.
    pub kent_means: Vec<UnitDirection>,
    /// Sampled fiber axes (z ≥ 0), population by population.
    pub fiber_directions: Vec<UnitDirection>,
    pub fractions: VolumeFractions,
}

/// Noiseless (or noisy, when `spec.snr` is set) signal of one phantom voxel.
///
/// Each sampled axis μᵢ contributes a stick exp(-bλ∥(g·μᵢ)²) and a zeppelin
/// with the tortuosity λ⊥; contributions are averaged over all axes and free
/// water exp(-bλ_csf) is added.
pub fn synth_signal(
    spec: &PhantomVoxelSpec,
    scheme: &AcquisitionScheme,
    diff: &DiffusivitySet,
) -> Result<(Vec<f64>, GroundTruth)> {
    spec.validate()?;
    let per_pop = spec.directions / spec.populations.len();
    let mut fibers = Vec::with_capacity(spec.directions);
    for (k, p) in spec.populations.iter().enumerate() {
        let mut rng = rng_for(spec.seed, 1 + k as u64);
        fibers.extend(sample_kent_with(p, per_pop, &mut rng)?.into_iter().map(UnitDirection::canonical));
    }
    let f = spec.fractions;
    let par = diff.lambda_par;
    let perp = f.tortuosity_perp(par).unwrap_or(0.0);
    let inv_m = 1.0 / fibers.len() as f64;
    let mut signal = Vec::with_capacity(scheme.n_samples());
    for (g, &b) in scheme.directions.iter().zip(&scheme.bvalues) {
        if b == 0.0 {
            signal.push(f.nu_ic + f.nu_ec + f.nu_csf);
            continue;
        }
        let mut stick = 0.0;
        let mut zep = 0.0;
        for mu in &fibers {
            let c = g.dot(mu);
            let c2 = c * c;
            stick += (-b * par * c2).exp();
            zep += (-b * (perp + (par - perp) * c2)).exp();
        }
        signal.push(f.nu_ic * stick * inv_m + f.nu_ec * zep * inv_m + f.nu_csf * (-b * diff.lambda_csf).exp());
    }
    if let Some(snr) = spec.snr {
        signal = rician_with(&signal, snr, &mut rng_for(spec.seed, 0))?;
    }
    let truth = GroundTruth {
        kent_means: spec.populations.iter().map(|p| p.mu.canonical()).collect(),
        fiber_directions: fibers,
        fractions: f,
    };
    Ok((signal, truth))
}

/// `n` axes spread over the hemisphere by minimizing the Coulomb energy of
/// the 2n charges ±uᵢ. Deterministic.
pub fn electrostatic_directions(n: usize) -> Result<Vec<UnitDirection>> {
    if n == 0 {
        return invalid("need at least one direction");
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut pts: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = i as f64 * golden;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect();
    let mut step = 0.05;
    for _ in 0..2000 {
        let mut forces = vec![[0.0; 3]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                for sign in [1.0, -1.0] {
                    let d = [pts[i][0] - sign * pts[j][0], pts[i][1] - sign * pts[j][1], pts[i][2] - sign * pts[j][2]];
                    let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                    let inv = 1.0 / (r2 * r2.sqrt());
                    for k in 0..3 {
                        forces[i][k] += d[k] * inv;
                    }
                }
            }
        }
        for (p, fo) in pts.iter_mut().zip(&forces) {
            let radial = p[0] * fo[0] + p[1] * fo[1] + p[2] * fo[2];
            let t = [fo[0] - radial * p[0], fo[1] - radial * p[1], fo[2] - radial * p[2]];
            let norm = (p[0] + step * t[0]).hypot(p[1] + step * t[1]).hypot(p[2] + step * t[2]);
            for k in 0..3 {
                p[k] = (p[k] + step * t[k]) / norm;
            }
        }
        step *= 0.998;
    }
    pts.into_iter().map(|p| UnitDirection::normalized(p[0], p[1], p[2]).map(UnitDirection::canonical)).collect()
}

/// ν_ic levels 0.60, 0.65, …, 1.00.
pub fn default_nu_ic_levels() -> Vec<f64> {
    (0..9).map(|k| (60 + 5 * k) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanningSweep {
    pub kappas: Vec<f64>,
    /// β as a fraction of κ.
    pub beta_fractions: Vec<f64>,
    pub rotations_deg: Vec<f64>,
    pub orientations: usize,
    pub nu_ic: Vec<f64>,
    pub draws: usize,
    pub snr: Option<f64>,
    pub directions: usize,
    pub root_seed: u64,
}

impl Default for FanningSweep {
    fn default() -> Self {
        Self {
            kappas: vec![128.0, 32.0, 4.0],
            beta_fractions: vec![0.0, 0.25, 0.5],
            rotations_deg: vec![0.0, 60.0, 120.0],
            orientations: 11,
            nu_ic: default_nu_ic_levels(),
            draws: 10,
            snr: Some(20.0),
            directions: DEFAULT_DIRECTIONS_PER_VOXEL,
            root_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FanningCondition {
    pub kappa: f64,
    pub beta: f64,
    pub rotation_deg: f64,
    pub orientation: usize,
    pub nu_ic: f64,
    pub draw: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepVoxel<C> {
    pub condition: C,
    pub spec: PhantomVoxelSpec,
}

fn tissue_fractions(nu_ic: f64) -> Result<VolumeFractions> {
    VolumeFractions::new(nu_ic, 1.0 - nu_ic, 0.0)
}

/// Single-population voxels over κ × β × rotation × orientation × ν_ic × draw,
/// in that nesting order. Voxel i gets seed `root_seed ^ i`.
pub fn fanning_sweep(cfg: &FanningSweep) -> Result<Vec<SweepVoxel<FanningCondition>>> {
    let orient = electrostatic_directions(cfg.orientations)?;
    let mut out = Vec::new();
    for &kappa in &cfg.kappas {
        for &bf in &cfg.beta_fractions {
            let beta = bf * kappa;
            for &rot in &cfg.rotations_deg {
                for (oi, &mu) in orient.iter().enumerate() {
                    let kent = KentParams::oriented(kappa, beta, mu, rot.to_radians())?;
                    for &nu_ic in &cfg.nu_ic {
                        let fractions = tissue_fractions(nu_ic)?;
                        for draw in 0..cfg.draws {
                            let seed = cfg.root_seed ^ out.len() as u64;
                            out.push(SweepVoxel {
                                condition: FanningCondition { kappa, beta, rotation_deg: rot, orientation: oi, nu_ic, draw },
                                spec: PhantomVoxelSpec {
                                    populations: vec![kent],
                                    fractions,
                                    directions: cfg.directions,
                                    snr: cfg.snr,
                                    seed,
                                },
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossingSweep {
    pub angles_deg: Vec<f64>,
    pub kappa: f64,
    pub orientations: usize,
    pub nu_ic: Vec<f64>,
    pub draws: usize,
    pub snr: Option<f64>,
    pub directions: usize,
    pub root_seed: u64,
}

impl Default for CrossingSweep {
    fn default() -> Self {
        Self {
            angles_deg: vec![90.0, 60.0, 45.0],
            kappa: 128.0,
            orientations: 11,
            nu_ic: default_nu_ic_levels(),
            draws: 10,
            snr: Some(20.0),
            directions: DEFAULT_DIRECTIONS_PER_VOXEL,
            root_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossingCondition {
    pub angle_deg: f64,
    pub orientation: usize,
    pub nu_ic: f64,
    pub draw: usize,
}

/// The two axes cos(α/2)o ± sin(α/2)p of a crossing bisected by `o`, with p
/// the first tangent-frame vector of `o`.
pub fn crossing_axes(o: &UnitDirection, angle_deg: f64) -> Result<(UnitDirection, UnitDirection)> {
    let (p, _) = o.tangent_frame();
    let (s, c) = (0.5 * angle_deg.to_radians()).sin_cos();
    let a = UnitDirection::normalized(c * o.x + s * p.x, c * o.y + s * p.y, c * o.z + s * p.z)?;
    let b = UnitDirection::normalized(c * o.x - s * p.x, c * o.y - s * p.y, c * o.z - s * p.z)?;
    Ok((a, b))
}

/// Two-population voxels (β = 0) over angle × orientation × ν_ic × draw.
pub fn crossing_sweep(cfg: &CrossingSweep) -> Result<Vec<SweepVoxel<CrossingCondition>>> {
    let orient = electrostatic_directions(cfg.orientations)?;
    let mut out = Vec::new();
    for &angle in &cfg.angles_deg {
        for (oi, o) in orient.iter().enumerate() {
            let (a, b) = crossing_axes(o, angle)?;
            let pops = vec![KentParams::oriented(cfg.kappa, 0.0, a, 0.0)?, KentParams::oriented(cfg.kappa, 0.0, b, 0.0)?];
            for &nu_ic in &cfg.nu_ic {
                let fractions = tissue_fractions(nu_ic)?;
                for draw in 0..cfg.draws {
                    let seed = cfg.root_seed ^ out.len() as u64;
                    out.push(SweepVoxel {
                        condition: CrossingCondition { angle_deg: angle, orientation: oi, nu_ic, draw },
                        spec: PhantomVoxelSpec {
                            populations: pops.clone(),
                            fractions,
                            directions: cfg.directions,
                            snr: cfg.snr,
                            seed,
                        },
                    });
                }
            }
        }
    }
    Ok(out)
}
