//! File formats, batch fitting and experiment drivers around `noddish-core`.

pub mod error;
pub mod experiment;
pub mod fit;
pub mod response;
pub mod scheme_io;
pub mod subsample;
pub mod volume;

pub use error::{PipelineError, Result};
pub use fit::{fit_volume, FitConfig, FitReport, VoxelFit, VoxelFitter, VoxelStatus};
pub use scheme_io::{load_scheme, write_scheme};
pub use subsample::subsample_scheme;
pub use volume::VolumeContainer;
