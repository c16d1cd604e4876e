//! Acquisition schemes: per-sample gradient directions and b-values grouped
//! into shells.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Real;
use crate::sh::UnitDirection;

/// b-values below this (s/mm²) are treated as b = 0.
pub const B0_THRESHOLD: f64 = 50.0;
/// Samples whose b-values differ by at most this much share a shell.
pub const SHELL_TOLERANCE: f64 = 50.0;
/// Effective diffusion time Δ - δ/3 of the HCP protocol, in seconds.
pub const HCP_TAU: f64 = 0.0396;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shell<T: Real = f64> {
    /// Mean b-value of the member samples (exactly 0 for the b=0 shell).
    pub nominal_b: T,
    /// Sample indices in stored order.
    pub indices: Vec<usize>,
}

impl<T: Real> Shell<T> {
    pub fn is_b0(&self) -> bool {
        self.nominal_b == T::zero()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionScheme<T: Real = f64> {
    pub directions: Vec<UnitDirection<T>>,
    /// s/mm²; values under [`B0_THRESHOLD`] are stored as exactly zero.
    pub bvalues: Vec<T>,
    pub shell_ids: Vec<usize>,
    /// Shells ordered by ascending nominal b-value.
    pub shells: Vec<Shell<T>>,
    /// Effective diffusion time in seconds.
    pub tau: T,
}

impl<T: Real> AcquisitionScheme<T> {
    /// Builds a scheme and clusters samples into shells.
    pub fn new(directions: Vec<UnitDirection<T>>, bvalues: Vec<T>, tau: T) -> Result<Self> {
        if directions.len() != bvalues.len() {
            return invalid(format!(
                "{} directions but {} b-values",
                directions.len(),
                bvalues.len()
            ));
        }
        if bvalues.is_empty() {
            return invalid("acquisition scheme has no samples");
        }
        if !(tau >= T::zero()) {
            return invalid("diffusion time must be non-negative");
        }
        let b0 = T::lit(B0_THRESHOLD);
        let mut bvalues = bvalues;
        for (i, b) in bvalues.iter_mut().enumerate() {
            if !b.is_finite() || *b < T::zero() {
                return invalid(format!("sample {i} has invalid b-value {b}"));
            }
            if *b < b0 {
                *b = T::zero();
            }
        }
        for (i, d) in directions.iter().enumerate() {
            if bvalues[i] > T::zero() {
                UnitDirection::new(d.x, d.y, d.z)?;
            }
        }

        let mut order: Vec<usize> = (0..bvalues.len()).collect();
        order.sort_by(|&a, &b| bvalues[a].partial_cmp(&bvalues[b]).unwrap().then(a.cmp(&b)));
        let tol = T::lit(SHELL_TOLERANCE);
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut first_b = T::zero();
        for &i in &order {
            let b = bvalues[i];
            let start_new = match groups.last() {
                None => true,
                Some(_) => (first_b == T::zero()) != (b == T::zero()) || b - first_b > tol,
            };
            if start_new {
                groups.push(Vec::new());
                first_b = b;
            }
            groups.last_mut().unwrap().push(i);
        }
        let mut shell_ids = vec![0; bvalues.len()];
        let shells = groups
            .into_iter()
            .enumerate()
            .map(|(sid, mut idx)| {
                idx.sort_unstable();
                for &i in &idx {
                    shell_ids[i] = sid;
                }
                let sum: T = idx.iter().map(|&i| bvalues[i]).sum();
                Shell { nominal_b: sum / T::from_usize_lossy(idx.len()), indices: idx }
            })
            .collect();
        Ok(Self { directions, bvalues, shell_ids, shells, tau })
    }

    pub fn n_samples(&self) -> usize {
        self.bvalues.len()
    }

    pub fn b0_shell(&self) -> Option<&Shell<T>> {
        self.shells.first().filter(|s| s.is_b0())
    }

    pub fn nonzero_shells(&self) -> impl Iterator<Item = &Shell<T>> {
        self.shells.iter().filter(|s| !s.is_b0())
    }

    /// Scheme restricted to `indices` (kept in the given order).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n_samples()) {
            return invalid(format!("sample index {bad} out of range"));
        }
        Self::new(
            indices.iter().map(|&i| self.directions[i]).collect(),
            indices.iter().map(|&i| self.bvalues[i]).collect(),
            self.tau,
        )
    }

    /// q-value (1/mm) of sample `i` from b = 4π²τq²; zero when τ is zero.
    pub fn qvalue(&self, i: usize) -> T {
        if self.tau == T::zero() {
            return T::zero();
        }
        let four_pi2 = T::lit(4.0) * T::PI() * T::PI();
        (self.bvalues[i] / (four_pi2 * self.tau)).sqrt()
    }
}

/// Orders `dirs` so that every prefix is spread out (greedy farthest point,
/// antipodal-aware), starting from the direction closest to +z.
pub fn incremental_order(dirs: &[UnitDirection]) -> Vec<UnitDirection> {
    if dirs.is_empty() {
        return Vec::new();
    }
    let n = dirs.len();
    let mut taken = vec![false; n];
    let start = (0..n)
        .max_by(|&a, &b| dirs[a].z.abs().partial_cmp(&dirs[b].z.abs()).unwrap().then(b.cmp(&a)))
        .unwrap();
    // closest[i]: largest |cos| between i and any selected direction
    let mut closest = vec![f64::NEG_INFINITY; n];
    let mut out = Vec::with_capacity(n);
    let mut cur = start;
    for _ in 0..n {
        taken[cur] = true;
        out.push(dirs[cur]);
        let mut next = None;
        let mut best = f64::INFINITY;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let c = dirs[i].dot(&dirs[cur]).abs();
            if c > closest[i] {
                closest[i] = c;
            }
            if closest[i] < best {
                best = closest[i];
                next = Some(i);
            }
        }
        match next {
            Some(i) => cur = i,
            None => break,
        }
    }
    out
}

fn rotate(d: UnitDirection, axis: [f64; 3], angle: f64) -> UnitDirection {
    let (s, c) = angle.sin_cos();
    let [kx, ky, kz] = axis;
    let v = [d.x, d.y, d.z];
    let kv = kx * v[0] + ky * v[1] + kz * v[2];
    let cr = [ky * v[2] - kz * v[1], kz * v[0] - kx * v[2], kx * v[1] - ky * v[0]];
    let r: Vec<f64> = (0..3).map(|i| v[i] * c + cr[i] * s + axis[i] * kv * (1.0 - c)).collect();
    UnitDirection::normalized(r[0], r[1], r[2]).expect("rotation keeps unit norm")
}

/// Directions added per nested block of a shell.
pub const NESTED_BLOCK: usize = 30;

/// Adds `n` antipodally symmetric directions to `fixed` by minimizing the
/// electrostatic energy of the new points against each other and against
/// the fixed ones. Only the new points move.
pub fn electrostatic_extend(fixed: &[UnitDirection], n: usize) -> Vec<UnitDirection> {
    let m = fixed.len();
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let anchors: Vec<[f64; 3]> = fixed.iter().map(|d| [d.x, d.y, d.z]).collect();
    let mut pts: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = i as f64 * golden + 0.3 * m as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect();
    let mut step = 0.05;
    for _ in 0..3000 {
        let mut forces = vec![[0.0; 3]; n];
        for (i, f) in forces.iter_mut().enumerate() {
            let p = pts[i];
            for (j, q) in anchors.iter().chain(&pts).enumerate() {
                for sign in [1.0, -1.0] {
                    if sign > 0.0 && j == m + i {
                        continue;
                    }
                    let d = [p[0] - sign * q[0], p[1] - sign * q[1], p[2] - sign * q[2]];
                    let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                    let inv = 1.0 / (r2 * r2.sqrt());
                    for k in 0..3 {
                        f[k] += d[k] * inv;
                    }
                }
            }
        }
        let mut largest = 1.0f64;
        for (p, f) in pts.iter().zip(forces.iter_mut()) {
            let radial = p[0] * f[0] + p[1] * f[1] + p[2] * f[2];
            for k in 0..3 {
                f[k] -= radial * p[k];
                largest = largest.max(f[k].abs());
            }
        }
        for (p, f) in pts.iter_mut().zip(&forces) {
            let q = [p[0] + step * f[0] / largest, p[1] + step * f[1] / largest, p[2] + step * f[2] / largest];
            let norm = q[0].hypot(q[1]).hypot(q[2]);
            *p = [q[0] / norm, q[1] / norm, q[2] / norm];
        }
        step *= 0.999;
    }
    pts.into_iter()
        .map(|p| UnitDirection::normalized(p[0], p[1], p[2]).expect("unit point").canonical())
        .collect()
}

/// Deterministic multi-shell scheme in the style of the HCP protocol:
/// `n_b0` b=0 samples first, then each shell in turn with
/// `directions_per_shell` directions. A shell is built from nested blocks of
/// [`NESTED_BLOCK`] directions, each optimized against the blocks before it,
/// so the first 30, 60, ... directions of a shell are each evenly spread.
/// Shells are rotated relative to each other.
pub fn multi_shell_scheme(
    n_b0: usize,
    shell_bvalues: &[f64],
    directions_per_shell: usize,
    tau: f64,
) -> Result<AcquisitionScheme> {
    if directions_per_shell < 12 {
        return invalid("need at least 12 directions per shell");
    }
    let mut shell = Vec::with_capacity(directions_per_shell);
    while shell.len() < directions_per_shell {
        let mut add = NESTED_BLOCK.min(directions_per_shell - shell.len());
        // a short trailing block is merged into the previous one
        if directions_per_shell - shell.len() - add < 12 {
            add = directions_per_shell - shell.len();
        }
        let block = electrostatic_extend(&shell, add);
        shell.extend(incremental_order(&block));
    }
    let mut dirs = vec![UnitDirection::unit_z(); n_b0];
    let mut bvals = vec![0.0; n_b0];
    let axis = [0.267_261_241_912_424_4, 0.534_522_483_824_848_8, 0.801_783_725_737_273_2];
    for (s, &b) in shell_bvalues.iter().enumerate() {
        dirs.extend(shell.iter().map(|&d| rotate(d, axis, 0.7 * s as f64).canonical()));
        bvals.extend(std::iter::repeat(b).take(directions_per_shell));
    }
    AcquisitionScheme::new(dirs, bvals, tau)
}

/// 18 b=0 samples plus 90 directions at b = 1000, 2000 and 3000 s/mm².
pub fn hcp_like_scheme() -> AcquisitionScheme {
    multi_shell_scheme(18, &[1000.0, 2000.0, 3000.0], 90, HCP_TAU).expect("valid built-in scheme")
}
