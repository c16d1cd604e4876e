//! FSL-style `bvals` / `bvecs` text files.

use std::fs;
use std::path::Path;

use noddish_core::scheme::B0_THRESHOLD;
use noddish_core::{AcquisitionScheme, UnitDirection};

use crate::error::{PipelineError, Result};

/// Allowed deviation from unit norm for gradient directions at b > 0.
pub const UNIT_TOLERANCE: f64 = 1e-3;

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))
}

/// Numbers of one line with their 1-based column (token) positions.
fn parse_line(path: &Path, line_no: usize, line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .enumerate()
        .map(|(k, tok)| {
            tok.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| PipelineError::parse(path, line_no, k + 1, format!("'{tok}' is not a finite number")))
        })
        .collect()
}

fn data_lines(text: &str) -> Vec<(usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty()).collect()
}

pub fn parse_bvals(path: &Path, text: &str) -> Result<Vec<f64>> {
    let lines = data_lines(text);
    match lines.as_slice() {
        [] => Err(PipelineError::parse(path, 1, 1, "no b-values")),
        [(n, l)] => {
            let v = parse_line(path, *n, l)?;
            if let Some(k) = v.iter().position(|&b| b < 0.0) {
                return Err(PipelineError::parse(path, *n, k + 1, "negative b-value"));
            }
            Ok(v)
        }
        [_, (n, _), ..] => Err(PipelineError::parse(path, *n, 1, "b-values must be on a single line")),
    }
}

pub fn parse_bvecs(path: &Path, text: &str) -> Result<[Vec<f64>; 3]> {
    let lines = data_lines(text);
    if lines.len() != 3 {
        let line = lines.get(3).map_or(lines.last().map_or(1, |l| l.0), |l| l.0);
        return Err(PipelineError::parse(path, line, 1, format!("expected 3 lines of components, found {}", lines.len())));
    }
    let x = parse_line(path, lines[0].0, lines[0].1)?;
    let y = parse_line(path, lines[1].0, lines[1].1)?;
    let z = parse_line(path, lines[2].0, lines[2].1)?;
    for (v, (n, _)) in [&y, &z].into_iter().zip(&lines[1..]) {
        if v.len() != x.len() {
            return Err(PipelineError::parse(
                path,
                *n,
                v.len().min(x.len()) + 1,
                format!("{} columns, first line has {}", v.len(), x.len()),
            ));
        }
    }
    Ok([x, y, z])
}

/// Reads a scheme and clusters its shells.
pub fn load_scheme(bvals_path: &Path, bvecs_path: &Path, tau: f64) -> Result<AcquisitionScheme> {
    let bvals = parse_bvals(bvals_path, &read(bvals_path)?)?;
    let [x, y, z] = parse_bvecs(bvecs_path, &read(bvecs_path)?)?;
    if x.len() != bvals.len() {
        return Err(PipelineError::parse(
            bvecs_path,
            1,
            x.len().min(bvals.len()) + 1,
            format!("{} gradient columns but {} b-values", x.len(), bvals.len()),
        ));
    }
    // Vectors already unit to rounding are kept as written so that a
    // write/read cycle is exact.
    let unit = |x: f64, y: f64, z: f64, norm: f64| {
        if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
            UnitDirection { x, y, z }
        } else {
            UnitDirection { x: x / norm, y: y / norm, z: z / norm }
        }
    };
    let mut dirs = Vec::with_capacity(bvals.len());
    for i in 0..bvals.len() {
        let norm = (x[i] * x[i] + y[i] * y[i] + z[i] * z[i]).sqrt();
        if bvals[i] >= B0_THRESHOLD {
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(PipelineError::parse(bvecs_path, 1, i + 1, format!("gradient has norm {norm:.6}, expected 1")));
            }
            dirs.push(unit(x[i], y[i], z[i], norm));
        } else if norm > 0.0 {
            dirs.push(unit(x[i], y[i], z[i], norm));
        } else {
            dirs.push(UnitDirection::unit_z());
        }
    }
    Ok(AcquisitionScheme::new(dirs, bvals, tau)?)
}

/// Writes `scheme` in the format read by [`load_scheme`]. Values are printed
/// in shortest round-trip form, so reloading reproduces them exactly.
pub fn write_scheme(scheme: &AcquisitionScheme, bvals_path: &Path, bvecs_path: &Path) -> Result<()> {
    let join = |v: Vec<f64>| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ");
    let bvals = join(scheme.bvalues.clone()) + "\n";
    let comp = |f: fn(&UnitDirection) -> f64| {
        join(scheme.directions.iter().zip(&scheme.bvalues).map(|(d, &b)| if b > 0.0 { f(d) } else { 0.0 }).collect())
    };
    let bvecs = format!("{}\n{}\n{}\n", comp(|d| d.x), comp(|d| d.y), comp(|d| d.z));
    fs::write(bvals_path, bvals).map_err(|e| PipelineError::io(bvals_path, e))?;
    fs::write(bvecs_path, bvecs).map_err(|e| PipelineError::io(bvecs_path, e))?;
    Ok(())
}
