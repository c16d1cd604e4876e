use noddish_core::AcquisitionScheme;

use crate::error::{invalid, Result};

/// Keeps the first `directions_per_shell` samples of every diffusion-weighted
/// shell with nominal b ≤ `max_b`, plus all b=0 samples. Returns the reduced
/// scheme and, for each of its samples, the index in the original scheme.
pub fn subsample_scheme(
    scheme: &AcquisitionScheme,
    directions_per_shell: usize,
    max_b: f64,
) -> Result<(AcquisitionScheme, Vec<usize>)> {
    if directions_per_shell == 0 {
        return invalid("directions per shell must be at least 1");
    }
    let mut keep = Vec::new();
    for shell in &scheme.shells {
        if shell.is_b0() {
            keep.extend_from_slice(&shell.indices);
            continue;
        }
        if shell.nominal_b > max_b {
            continue;
        }
        if directions_per_shell > shell.len() {
            return invalid(format!(
                "requested {directions_per_shell} directions but the b={} shell has {}",
                shell.nominal_b,
                shell.len()
            ));
        }
        keep.extend_from_slice(&shell.indices[..directions_per_shell]);
    }
    keep.sort_unstable();
    if !keep.iter().any(|&i| scheme.bvalues[i] > 0.0) {
        return invalid(format!("no diffusion-weighted shell at or below b={max_b}"));
    }
    let sub = scheme.subset(&keep)?;
    Ok((sub, keep))
}
