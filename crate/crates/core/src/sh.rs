//! Real symmetric spherical harmonics, unit directions and deterministic
//! spherical point sets.
//!
//! The basis keeps only even orders `l` and is laid out band by band with
//! `m = -l..=l` inside each band, so the flat index of `(l, m)` is
//! `l(l+1)/2 + m`. For `m < 0` the column holds `√2·K·P_l^|m|(cos θ)·cos(|m|φ)`,
//! for `m > 0` it holds `√2·K·P_l^m(cos θ)·sin(mφ)`, with
//! `K = √((2l+1)(l-m)!/(4π(l+m)!))`. No Condon-Shortley phase is applied.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

/// Highest SH order accepted by [`eval_sh`].
pub const MAX_SH_ORDER: usize = 16;

/// Unit vector in R³. θ is measured from +z and φ from +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitDirection<T: Real = f64> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> UnitDirection<T> {
    fn norm_tolerance() -> T {
        T::lit(1e-12).max(T::epsilon() * T::lit(64.0))
    }

    /// Builds a direction, rejecting vectors whose norm differs from one.
    pub fn new(x: T, y: T, z: T) -> Result<Self> {
        let n = (x * x + y * y + z * z).sqrt();
        if !n.is_finite() || (n - T::one()).abs() > Self::norm_tolerance() {
            return invalid(format!("direction ({x}, {y}, {z}) is not unit length (norm {n})"));
        }
        Ok(Self { x, y, z })
    }

    /// Normalizes an arbitrary non-zero vector.
    pub fn normalized(x: T, y: T, z: T) -> Result<Self> {
        let n = (x * x + y * y + z * z).sqrt();
        if !(n > T::zero()) || !n.is_finite() {
            return invalid("cannot normalize a zero or non-finite vector");
        }
        Ok(Self { x: x / n, y: y / n, z: z / n })
    }

    pub fn from_polar(theta: T, phi: T) -> Self {
        let s = theta.sin();
        Self { x: s * phi.cos(), y: s * phi.sin(), z: theta.cos() }
    }

    pub fn unit_z() -> Self {
        Self { x: T::zero(), y: T::zero(), z: T::one() }
    }

    pub fn unit_x() -> Self {
        Self { x: T::one(), y: T::zero(), z: T::zero() }
    }

    pub fn unit_y() -> Self {
        Self { x: T::zero(), y: T::one(), z: T::zero() }
    }

    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    #[inline]
    pub fn dot(&self, other: &Self) -> T {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(&self, other: &Self) -> [T; 3] {
        [
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        ]
    }

    pub fn neg(self) -> Self {
        Self { x: -self.x, y: -self.y, z: -self.z }
    }

    /// Polar angle θ ∈ [0, π].
    pub fn theta(&self) -> T {
        let rho = (self.x * self.x + self.y * self.y).sqrt();
        rho.atan2(self.z)
    }

    /// Azimuth φ ∈ [0, 2π).
    pub fn phi(&self) -> T {
        let p = self.y.atan2(self.x);
        if p < T::zero() {
            p + T::TAU()
        } else {
            p
        }
    }

    /// Antipodal representative with z ≥ 0 (ties on the equator resolved by y, then x).
    pub fn canonical(self) -> Self {
        let flip = self.z < T::zero()
            || (self.z == T::zero() && (self.y < T::zero() || (self.y == T::zero() && self.x < T::zero())));
        if flip {
            self.neg()
        } else {
            self
        }
    }

    /// Angle in degrees between the axes through `self` and `other`, in [0, 90].
    pub fn axial_angle_deg(&self, other: &Self) -> T {
        self.dot(other).abs().min(T::one()).acos().to_degrees()
    }

    /// Plain angle in degrees, in [0, 180].
    pub fn angle_deg(&self, other: &Self) -> T {
        self.dot(other).max(-T::one()).min(T::one()).acos().to_degrees()
    }

    /// Two unit vectors completing `self` to a right-handed orthonormal frame.
    pub fn tangent_frame(&self) -> (Self, Self) {
        let helper = if self.x.abs() < T::lit(0.9) { Self::unit_x() } else { Self::unit_y() };
        let c = self.cross(&helper);
        let n = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        let e1 = Self { x: c[0] / n, y: c[1] / n, z: c[2] / n };
        let c = self.cross(&e1);
        (e1, Self { x: c[0], y: c[1], z: c[2] })
    }

    /// Converts the components to another scalar type.
    pub fn cast<U: Real>(self) -> UnitDirection<U> {
        UnitDirection { x: U::lit(self.x.as_f64()), y: U::lit(self.y.as_f64()), z: U::lit(self.z.as_f64()) }
    }
}

/// Degree/order pair of an even-order real SH.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShIndex {
    pub l: usize,
    pub m: i32,
}

impl ShIndex {
    pub fn flat(self) -> usize {
        ((self.l * (self.l + 1) / 2) as i64 + self.m as i64) as usize
    }

    pub fn from_flat(j: usize) -> Self {
        let mut l = 0;
        while (l + 2) * (l + 1) / 2 <= j {
            l += 2;
        }
        let m = j as i64 - (l * (l + 1) / 2) as i64;
        Self { l, m: m as i32 }
    }
}

/// Number of even-order SH coefficients up to `order`: (N+1)(N+2)/2.
pub fn sh_count(order: usize) -> usize {
    (order + 1) * (order + 2) / 2
}

/// Inverse of [`sh_count`]; `None` for lengths that are not a basis size.
pub fn order_for_count(count: usize) -> Option<usize> {
    (0..=MAX_SH_ORDER).step_by(2).find(|&n| sh_count(n) == count)
}

pub(crate) fn check_order(order: usize) -> Result<()> {
    if order % 2 != 0 || order > MAX_SH_ORDER {
        return invalid(format!("SH order must be even and at most {MAX_SH_ORDER}, got {order}"));
    }
    Ok(())
}

/// The (0,0) basis function, 1/(2√π).
pub fn y00<T: Real>() -> T {
    T::one() / (T::lit(2.0) * T::PI().sqrt())
}

/// SH values sampled on a list of directions.
#[derive(Debug, Clone)]
pub struct ShBasisMatrix<T: Real = f64> {
    pub values: Matrix<T>,
    pub max_order: usize,
}

impl<T: Real> ShBasisMatrix<T> {
    pub fn n_directions(&self) -> usize {
        self.values.rows()
    }

    pub fn n_coeffs(&self) -> usize {
        self.values.cols()
    }

    /// Evaluates Σ c_lm Y_l^m at every stored direction.
    pub fn expand(&self, coeffs: &[T]) -> Result<Vec<T>> {
        if coeffs.len() != self.n_coeffs() {
            return invalid(format!(
                "coefficient vector has length {}, basis has {} columns",
                coeffs.len(),
                self.n_coeffs()
            ));
        }
        Ok(self.values.mul_vec(coeffs))
    }
}

/// Samples the even-order real symmetric SH basis up to `order` on `dirs`.
pub fn eval_sh<T: Real>(order: usize, dirs: &[UnitDirection<T>]) -> Result<ShBasisMatrix<T>> {
    check_order(order)?;
    if dirs.is_empty() {
        return invalid("eval_sh needs at least one direction");
    }
    for d in dirs {
        UnitDirection::new(d.x, d.y, d.z)?;
    }
    let r = sh_count(order);
    let norms = normalization_table::<T>(order);
    let mut values = Matrix::zeros(dirs.len(), r);
    let mut plm = vec![T::zero(); order + 1];
    let sqrt2 = T::SQRT_2();
    for (i, d) in dirs.iter().enumerate() {
        let ct = d.z;
        let st = (d.x * d.x + d.y * d.y).sqrt();
        let phi = d.y.atan2(d.x);
        let row = values.row_mut(i);
        for m in 0..=order {
            legendre_column(order, m, ct, st, &mut plm);
            let (sm, cm) = if m == 0 {
                (T::zero(), T::one())
            } else {
                (T::from_usize_lossy(m) * phi).sin_cos()
            };
            let l0 = if m % 2 == 0 { m } else { m + 1 };
            for l in (l0..=order).step_by(2) {
                let base = l * (l + 1) / 2;
                let v = norms[l][m] * plm[l];
                if m == 0 {
                    row[base] = v;
                } else {
                    row[base - m] = sqrt2 * v * cm;
                    row[base + m] = sqrt2 * v * sm;
                }
            }
        }
    }
    Ok(ShBasisMatrix { values, max_order: order })
}

/// K_l^m = √((2l+1)/(4π) · (l-m)!/(l+m)!) for 0 ≤ m ≤ l ≤ order.
fn normalization_table<T: Real>(order: usize) -> Vec<Vec<T>> {
    (0..=order)
        .map(|l| {
            (0..=order)
                .map(|m| {
                    if m > l {
                        return T::zero();
                    }
                    let mut ratio = 1.0f64;
                    for k in (l - m + 1)..=(l + m) {
                        ratio /= k as f64;
                    }
                    T::lit(((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI) * ratio).sqrt())
                })
                .collect()
        })
        .collect()
}

/// Fills `out[l]` with P_l^m(x) for l = m..=order (three-term recurrence in l).
fn legendre_column<T: Real>(order: usize, m: usize, x: T, s: T, out: &mut [T]) {
    // P_m^m = (2m-1)!! s^m
    let mut pmm = T::one();
    for k in 1..=m {
        pmm = pmm * T::from_usize_lossy(2 * k - 1) * s;
    }
    out[m] = pmm;
    if m == order {
        return;
    }
    let mut prev = pmm;
    let mut cur = x * T::from_usize_lossy(2 * m + 1) * pmm;
    out[m + 1] = cur;
    for l in (m + 2)..=order {
        let next = (x * T::from_usize_lossy(2 * l - 1) * cur - T::from_usize_lossy(l + m - 1) * prev)
            / T::from_usize_lossy(l - m);
        out[l] = next;
        prev = cur;
        cur = next;
    }
}

/// Directions on the z ≥ 0 hemisphere used for positivity constraints and peak search.
#[derive(Debug, Clone, PartialEq)]
pub struct SphericalGrid<T: Real = f64> {
    pub directions: Vec<UnitDirection<T>>,
}

impl<T: Real> SphericalGrid<T> {
    pub fn from_directions(directions: Vec<UnitDirection<T>>) -> Result<Self> {
        if directions.is_empty() {
            return invalid("grid must contain at least one direction");
        }
        if let Some(d) = directions.iter().find(|d| d.z < T::zero()) {
            return invalid(format!("grid direction ({}, {}, {}) lies below the equator", d.x, d.y, d.z));
        }
        Ok(Self { directions })
    }

    pub fn count(&self) -> usize {
        self.directions.len()
    }
}

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653; // π(3 - √5)

/// Deterministic Fibonacci spiral over the upper hemisphere.
pub fn make_hemisphere_grid<T: Real>(count: usize) -> Result<SphericalGrid<T>> {
    if count < 12 {
        return invalid(format!("hemisphere grid needs at least 12 points, got {count}"));
    }
    let n = count as f64;
    let directions = (0..count)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n;
            let r = (1.0 - z * z).sqrt();
            let phi = i as f64 * GOLDEN_ANGLE;
            UnitDirection { x: T::lit(r * phi.cos()), y: T::lit(r * phi.sin()), z: T::lit(z) }
        })
        .collect();
    Ok(SphericalGrid { directions })
}

/// Deterministic Fibonacci spiral over the full sphere, usable as an
/// equal-weight quadrature rule (weight 4π/count).
pub fn fibonacci_sphere<T: Real>(count: usize) -> Vec<UnitDirection<T>> {
    let n = count as f64;
    (0..count)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = i as f64 * GOLDEN_ANGLE;
            UnitDirection { x: T::lit(r * phi.cos()), y: T::lit(r * phi.sin()), z: T::lit(z) }
        })
        .collect()
}

/// SH coefficient vector of a fiber ODF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FodfCoefficients<T: Real = f64> {
    pub coeffs: Vec<T>,
    pub order: usize,
}

impl<T: Real> FodfCoefficients<T> {
    pub fn new(order: usize, coeffs: Vec<T>) -> Result<Self> {
        check_order(order)?;
        if coeffs.len() != sh_count(order) {
            return invalid(format!(
                "order {order} needs {} coefficients, got {}",
                sh_count(order),
                coeffs.len()
            ));
        }
        Ok(Self { coeffs, order })
    }

    /// The normalized isotropic fODF, c₀₀ = 1/√(4π).
    pub fn isotropic(order: usize) -> Result<Self> {
        let mut c = vec![T::zero(); sh_count(order)];
        c[0] = normalized_c00();
        Self::new(order, c)
    }

    pub fn c00(&self) -> T {
        self.coeffs[0]
    }
}

/// The c₀₀ value that makes the fODF integrate to one.
pub fn normalized_c00<T: Real>() -> T {
    T::one() / (T::lit(4.0) * T::PI()).sqrt()
}

/// Evaluates the fODF ρ(v) = Σ c_lm Y_l^m(v) on every grid direction.
pub fn sh_expand_on_grid<T: Real>(coeffs: &FodfCoefficients<T>, grid: &SphericalGrid<T>) -> Result<Vec<T>> {
    if coeffs.coeffs.len() != sh_count(coeffs.order) {
        return invalid("coefficient length does not match its order");
    }
    eval_sh(coeffs.order, &grid.directions)?.expand(&coeffs.coeffs)
}
