//! Analytic spherical-convolution kernels and the signal bases built on them.
//!
//! An axially symmetric response `f(uᵀv)` convolved with `Y_l^m` collapses to
//! `2π Ψ_l · Y_l^m(u)` where `Ψ_l(ξ) = ∫₋₁¹ P_l(t) e^{-ξt²} dt`. `Ψ_l` is a
//! fixed combination of the moments `Φ_k(ξ) = ∫₋₁¹ t^k e^{-ξt²} dt`, which
//! have closed forms in `erf(√ξ)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;
use crate::scheme::AcquisitionScheme;
use crate::sh::{eval_sh, sh_count, ShBasisMatrix, ShIndex};

/// Highest order for which the kernels are provided.
pub const MAX_KERNEL_ORDER: usize = 8;
/// Free-water diffusivity, mm²/s.
pub const DEFAULT_LAMBDA_CSF: f64 = 3e-3;
/// Upper bound on tissue diffusivities, mm²/s.
pub const MAX_DIFFUSIVITY: f64 = 4e-3;

/// Below this argument the moments are summed from their power series;
/// the closed forms lose digits to cancellation for small ξ.
const SERIES_THRESHOLD: f64 = 1.0;

fn kernel_slot(l: usize) -> Result<usize> {
    if l % 2 != 0 || l > MAX_KERNEL_ORDER {
        return invalid(format!("kernel order must be one of 0, 2, 4, 6, 8; got {l}"));
    }
    Ok(l / 2)
}

fn check_xi<T: Real>(xi: T) -> Result<()> {
    if !xi.is_finite() || xi < T::zero() {
        return invalid(format!("kernel argument must be finite and non-negative, got {xi}"));
    }
    Ok(())
}

/// Φ_0, Φ_2, …, Φ_8 at `xi`.
pub(crate) fn phi_all<T: Real>(xi: T) -> [T; 5] {
    if xi == T::zero() {
        return [0usize, 1, 2, 3, 4].map(|k| T::lit(2.0 / (2 * k + 1) as f64));
    }
    if xi < T::lit(SERIES_THRESHOLD) {
        return phi_series(xi);
    }
    let two = T::lit(2.0);
    let sx = xi.sqrt();
    let spe = T::PI().sqrt() * sx.erf();
    let e = (-xi).exp();
    let x2 = xi * xi;
    let x3 = x2 * xi;
    [
        spe / sx,
        (spe - two * e * sx) / (two * xi * sx),
        (T::lit(3.0) * spe - two * e * sx * (two * xi + T::lit(3.0))) / (T::lit(4.0) * x2 * sx),
        (T::lit(15.0) * spe - two * e * sx * (T::lit(4.0) * x2 + T::lit(10.0) * xi + T::lit(15.0)))
            / (T::lit(8.0) * x3 * sx),
        (T::lit(105.0) * spe
            - two * e * sx * (T::lit(8.0) * x3 + T::lit(28.0) * x2 + T::lit(70.0) * xi + T::lit(105.0)))
            / (T::lit(16.0) * x2 * x2 * sx),
    ]
}

/// Φ_l(ξ) = 2 Σ_k (-ξ)^k / (k! (l + 2k + 1)).
fn phi_series<T: Real>(xi: T) -> [T; 5] {
    let mut out = [T::zero(); 5];
    for (slot, o) in out.iter_mut().enumerate() {
        let l = 2 * slot;
        let mut term = T::one();
        let mut sum = T::zero();
        for k in 0..60 {
            let t = T::lit(2.0) * term / T::from_usize_lossy(l + 2 * k + 1);
            sum = sum + t;
            if t.abs() <= T::epsilon() * T::lit(1e-3) * sum.abs() {
                break;
            }
            term = -term * xi / T::from_usize_lossy(k + 1);
        }
        *o = sum;
    }
    out
}

/// Ψ_0, Ψ_2, …, Ψ_8 at `xi`.
pub(crate) fn psi_all<T: Real>(xi: T) -> [T; 5] {
    if xi == T::zero() {
        return [T::lit(2.0), T::zero(), T::zero(), T::zero(), T::zero()];
    }
    let [p0, p2, p4, p6, p8] = phi_all(xi);
    let c = T::lit;
    [
        p0,
        (c(3.0) * p2 - p0) / c(2.0),
        (c(35.0) * p4 - c(30.0) * p2 + c(3.0) * p0) / c(8.0),
        (c(231.0) * p6 - c(315.0) * p4 + c(105.0) * p2 - c(5.0) * p0) / c(16.0),
        (c(6435.0) * p8 - c(12012.0) * p6 + c(6930.0) * p4 - c(1260.0) * p2 + c(35.0) * p0) / c(128.0),
    ]
}

/// Φ_l(ξ) = ∫₋₁¹ t^l exp(-ξt²) dt for l ∈ {0, 2, 4, 6, 8}.
pub fn phi_l<T: Real>(l: usize, xi: T) -> Result<T> {
    let slot = kernel_slot(l)?;
    check_xi(xi)?;
    Ok(phi_all(xi)[slot])
}

/// Ψ_l(ξ) = ∫₋₁¹ P_l(t) exp(-ξt²) dt for l ∈ {0, 2, 4, 6, 8}.
pub fn psi_l<T: Real>(l: usize, xi: T) -> Result<T> {
    let slot = kernel_slot(l)?;
    check_xi(xi)?;
    Ok(psi_all(xi)[slot])
}

/// Compartment diffusivities in mm²/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusivitySet<T: Real = f64> {
    pub lambda_par: T,
    pub lambda_perp: T,
    pub lambda_csf: T,
}

impl<T: Real> DiffusivitySet<T> {
    pub fn new(lambda_par: T, lambda_perp: T, lambda_csf: T) -> Result<Self> {
        let max = T::lit(MAX_DIFFUSIVITY);
        if !(lambda_perp >= T::zero() && lambda_perp <= lambda_par && lambda_par <= max) {
            return invalid(format!(
                "diffusivities must satisfy 0 <= perp <= par <= {MAX_DIFFUSIVITY}; got par={lambda_par}, perp={lambda_perp}"
            ));
        }
        if !(lambda_csf > T::zero()) || !lambda_csf.is_finite() {
            return invalid("free-water diffusivity must be positive");
        }
        Ok(Self { lambda_par, lambda_perp, lambda_csf })
    }

    /// λ∥ = 1.7e-3, λ⊥ = 0.1e-3, λ_csf = 3e-3 mm²/s.
    pub fn simulation_default() -> Self {
        Self { lambda_par: T::lit(1.7e-3), lambda_perp: T::lit(0.1e-3), lambda_csf: T::lit(DEFAULT_LAMBDA_CSF) }
    }
}

/// Intracellular, extracellular and free-water volume fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeFractions<T: Real = f64> {
    pub nu_ic: T,
    pub nu_ec: T,
    pub nu_csf: T,
}

impl<T: Real> VolumeFractions<T> {
    pub fn new(nu_ic: T, nu_ec: T, nu_csf: T) -> Result<Self> {
        let slack = T::lit(1e-12);
        for (name, v) in [("nu_ic", nu_ic), ("nu_ec", nu_ec), ("nu_csf", nu_csf)] {
            if !(v >= -slack && v <= T::one() + slack) {
                return invalid(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if (nu_ic + nu_ec + nu_csf - T::one()).abs() > T::lit(1e-9) {
            return invalid(format!("fractions sum to {}, not 1", nu_ic + nu_ec + nu_csf));
        }
        Ok(Self { nu_ic, nu_ec, nu_csf })
    }

    /// Extracellular perpendicular diffusivity λ∥·ν_ec/(ν_ec+ν_ic), or `None`
    /// when the tissue fraction is zero.
    pub fn tortuosity_perp(&self, lambda_par: T) -> Option<T> {
        let tissue = self.nu_ic + self.nu_ec;
        (tissue > T::zero()).then(|| lambda_par * self.nu_ec / tissue)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Forecast,
    NoddiSh,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Forecast => f.write_str("forecast"),
            ModelKind::NoddiSh => f.write_str("noddi-sh"),
        }
    }
}

/// Single-fiber response whose convolution with the fODF defines the signal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResponseKernel<T: Real = f64> {
    /// One axially symmetric tensor (λ∥, λ⊥).
    Forecast(DiffusivitySet<T>),
    /// Stick + tortuous zeppelin + free water.
    NoddiSh(DiffusivitySet<T>, VolumeFractions<T>),
}

impl<T: Real> ResponseKernel<T> {
    pub fn model(&self) -> ModelKind {
        match self {
            ResponseKernel::Forecast(_) => ModelKind::Forecast,
            ResponseKernel::NoddiSh(..) => ModelKind::NoddiSh,
        }
    }

    /// Per-band multipliers `w_l(b)` (l = 0, 2, …, 8) and the additive
    /// free-water term of the (0,0) column.
    pub fn weights(&self, b: T) -> ([T; 5], T) {
        let two_pi = T::TAU();
        match *self {
            ResponseKernel::Forecast(d) => {
                let att = (-b * d.lambda_perp).exp();
                let psi = psi_all(b * (d.lambda_par - d.lambda_perp));
                (psi.map(|p| two_pi * att * p), T::zero())
            }
            ResponseKernel::NoddiSh(d, f) => {
                let psi_ic = psi_all(b * d.lambda_par);
                let mut w = psi_ic.map(|p| two_pi * f.nu_ic * p);
                if let Some(perp) = f.tortuosity_perp(d.lambda_par) {
                    let att = (-b * perp).exp();
                    let psi_ec = psi_all(b * (d.lambda_par - perp));
                    for (wl, p) in w.iter_mut().zip(psi_ec) {
                        *wl = *wl + two_pi * f.nu_ec * att * p;
                    }
                }
                let csf = (T::lit(4.0) * T::PI()).sqrt() * f.nu_csf * (-b * d.lambda_csf).exp();
                (w, csf)
            }
        }
    }
}

/// Maps SH fODF coefficients to predicted signal samples.
#[derive(Debug, Clone)]
pub struct SignalBasisMatrix<T: Real = f64> {
    pub values: Matrix<T>,
    pub model: ModelKind,
    pub order: usize,
    pub diffusivities: DiffusivitySet<T>,
    pub fractions: Option<VolumeFractions<T>>,
}

impl<T: Real> SignalBasisMatrix<T> {
    pub fn n_samples(&self) -> usize {
        self.values.rows()
    }

    pub fn n_coeffs(&self) -> usize {
        self.values.cols()
    }

    /// Predicted signal M·c.
    pub fn predict(&self, coeffs: &[T]) -> Result<Vec<T>> {
        if coeffs.len() != self.n_coeffs() {
            return invalid(format!(
                "coefficient vector has length {}, basis has {} columns",
                coeffs.len(),
                self.n_coeffs()
            ));
        }
        Ok(self.values.mul_vec(coeffs))
    }

    /// Basis restricted to the given sample rows.
    pub fn select_samples(&self, rows: &[usize]) -> Self {
        Self { values: self.values.select_rows(rows), ..self.clone() }
    }
}

/// Precomputed SH samples of a scheme, from which bases for many kernels
/// are assembled cheaply.
#[derive(Debug, Clone)]
pub struct BasisBuilder<T: Real = f64> {
    bvalues: Vec<T>,
    order: usize,
    band: Vec<usize>,
    /// Diffusion-weighted sample rows and their SH values.
    dw: Vec<usize>,
    sh: Option<ShBasisMatrix<T>>,
}

impl<T: Real> BasisBuilder<T> {
    pub fn new(scheme: &AcquisitionScheme<T>, order: usize) -> Result<Self> {
        if order > MAX_KERNEL_ORDER || order % 2 != 0 {
            return invalid(format!("signal basis order must be even and at most {MAX_KERNEL_ORDER}, got {order}"));
        }
        let n = scheme.n_samples();
        let band = (0..sh_count(order)).map(|j| ShIndex::from_flat(j).l / 2).collect();
        // Directions of b=0 samples are irrelevant; evaluate SH only where b > 0.
        let dw: Vec<usize> = (0..n).filter(|&i| scheme.bvalues[i] > T::zero()).collect();
        let dirs: Vec<_> = dw.iter().map(|&i| scheme.directions[i]).collect();
        let sh = if dirs.is_empty() { None } else { Some(eval_sh(order, &dirs)?) };
        Ok(Self { bvalues: scheme.bvalues.clone(), order, band, dw, sh })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn build(&self, kernel: &ResponseKernel<T>) -> SignalBasisMatrix<T> {
        let n = self.bvalues.len();
        let r = self.band.len();
        let mut values = Matrix::zeros(n, r);
        let sqrt4pi = (T::lit(4.0) * T::PI()).sqrt();
        for i in 0..n {
            if self.bvalues[i] == T::zero() {
                values[(i, 0)] = sqrt4pi;
            }
        }
        // Samples on one shell often share a b-value exactly; reuse their weights.
        let mut cached: Option<(T, [T; 5], T)> = None;
        for (k, &i) in self.dw.iter().enumerate() {
            let b = self.bvalues[i];
            let (w, csf) = match cached {
                Some((cb, w, csf)) if cb == b => (w, csf),
                _ => {
                    let (w, csf) = kernel.weights(b);
                    cached = Some((b, w, csf));
                    (w, csf)
                }
            };
            let y = self.sh.as_ref().unwrap().values.row(k);
            let row = values.row_mut(i);
            for j in 0..r {
                row[j] = w[self.band[j]] * y[j];
            }
            row[0] = row[0] + csf;
        }
        let (diffusivities, fractions) = match *kernel {
            ResponseKernel::Forecast(d) => (d, None),
            ResponseKernel::NoddiSh(d, f) => (d, Some(f)),
        };
        SignalBasisMatrix { values, model: kernel.model(), order: self.order, diffusivities, fractions }
    }
}

/// Assembles the signal basis for any response kernel.
pub fn signal_basis<T: Real>(
    scheme: &AcquisitionScheme<T>,
    kernel: &ResponseKernel<T>,
    order: usize,
) -> Result<SignalBasisMatrix<T>> {
    Ok(BasisBuilder::new(scheme, order)?.build(kernel))
}

/// FORECAST basis: 2π·exp(-bλ⊥)·Ψ_l(b(λ∥-λ⊥))·Y_l^m(u).
pub fn forecast_basis<T: Real>(
    scheme: &AcquisitionScheme<T>,
    diff: &DiffusivitySet<T>,
    order: usize,
) -> Result<SignalBasisMatrix<T>> {
    let d = DiffusivitySet::new(diff.lambda_par, diff.lambda_perp, diff.lambda_csf)?;
    signal_basis(scheme, &ResponseKernel::Forecast(d), order)
}

/// NODDI-SH basis: stick, tortuous zeppelin and free water. `diff.lambda_perp`
/// is ignored; the extracellular λ⊥ follows from the fractions.
pub fn noddish_basis<T: Real>(
    scheme: &AcquisitionScheme<T>,
    diff: &DiffusivitySet<T>,
    fractions: &VolumeFractions<T>,
    order: usize,
) -> Result<SignalBasisMatrix<T>> {
    let f = VolumeFractions::new(fractions.nu_ic, fractions.nu_ec, fractions.nu_csf)?;
    if !(diff.lambda_par >= T::zero() && diff.lambda_par <= T::lit(MAX_DIFFUSIVITY)) || !(diff.lambda_csf > T::zero()) {
        return invalid("invalid diffusivities for the NODDI-SH basis");
    }
    signal_basis(scheme, &ResponseKernel::NoddiSh(*diff, f), order)
}
