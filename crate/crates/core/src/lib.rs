//! Diffusion MRI microstructure models built on spherical convolution.
//!
//! The fiber ODF is expanded in even real spherical harmonics and convolved
//! with an axially symmetric single-fiber response. Two responses are
//! provided: a single axially symmetric tensor (FORECAST) and a
//! stick/zeppelin/free-water mixture (NODDI-SH). Spherical means of each shell
//! fix the microstructure parameters, after which the fODF is recovered by a
//! positivity-constrained least-squares fit.
//!
//! All numerical code is generic over [`Real`] (`f32` or `f64`); the `*F32`
//! aliases below name the single-precision variants, while the unsuffixed
//! types default to `f64`.

pub mod error;
pub mod kernels;
pub mod linalg;
pub mod peaks;
pub mod phantom;
pub mod scalar;
pub mod scheme;
pub mod sh;
pub mod smt;
pub mod solver;

pub use error::{Error, Result};
pub use kernels::{
    forecast_basis, noddish_basis, phi_l, psi_l, signal_basis, BasisBuilder, DiffusivitySet, ModelKind, ResponseKernel,
    SignalBasisMatrix, VolumeFractions,
};
pub use linalg::Matrix;
pub use peaks::{angular_error, extract_peaks, AngularError, PeakConfig, PeakFinder, PeakSet};
pub use phantom::{
    add_rician_noise, kent_log_normalizer, kent_pdf, sample_kent, synth_signal, GroundTruth, KentParams,
    PhantomVoxelSpec,
};
pub use scalar::Real;
pub use scheme::{hcp_like_scheme, multi_shell_scheme, AcquisitionScheme, Shell};
pub use smt::{
    estimate_forecast_diffusivities, estimate_fractions, predict_mean, shell_means, DictionaryConfig,
    FractionDictionary, FractionEstimate, ShellMeans,
};
pub use solver::{fit_fodf, fit_fodf_with, solve_qp, ConstraintSet, QpConfig, QpProblem, QpSolution};
pub use sh::{
    eval_sh, fibonacci_sphere, make_hemisphere_grid, sh_count, sh_expand_on_grid, FodfCoefficients, ShBasisMatrix,
    ShIndex, SphericalGrid, UnitDirection,
};

pub type UnitDirectionF32 = UnitDirection<f32>;
pub type ShBasisMatrixF32 = ShBasisMatrix<f32>;
pub type SphericalGridF32 = SphericalGrid<f32>;
pub type FodfCoefficientsF32 = FodfCoefficients<f32>;
pub type AcquisitionSchemeF32 = AcquisitionScheme<f32>;
pub type DiffusivitySetF32 = DiffusivitySet<f32>;
pub type VolumeFractionsF32 = VolumeFractions<f32>;
pub type SignalBasisMatrixF32 = SignalBasisMatrix<f32>;
pub type ShellMeansF32 = ShellMeans<f32>;
pub type FractionDictionaryF32 = FractionDictionary<f32>;
pub type QpSolutionF32 = QpSolution<f32>;
pub type PeakSetF32 = PeakSet<f32>;
pub type PeakFinderF32 = PeakFinder<f32>;
