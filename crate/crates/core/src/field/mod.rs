//! Regular-grid scalar/vector fields, interpolation, differentiation,
//! warping and Jacobian determinants.
//!
//! Fields are immutable after construction and safe to share across threads.
//! Deformation maps are stored as absolute position maps in voxel
//! coordinates; the identity map has positions equal to voxel indices.

pub mod gff;

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Maximum supported dimensionality.
pub const MAX_DIM: usize = 3;

/// Geometry of a regular grid: per-axis voxel counts and physical spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
}

impl GridSpec {
    /// Isotropic grid with unit spacing.
    pub fn new(dims: &[usize]) -> Result<Self> {
        Self::with_spacing(dims, &vec![1.0; dims.len()])
    }

    pub fn with_spacing(dims: &[usize], spacing: &[f64]) -> Result<Self> {
        if dims.len() < 2 || dims.len() > MAX_DIM {
            return Err(Error::InvalidGrid(format!(
                "dimensionality must be 2 or 3, got {}",
                dims.len()
            )));
        }
        if spacing.len() != dims.len() {
            return Err(Error::InvalidGrid(
                "spacing length must match dims".into(),
            ));
        }
        if dims.iter().any(|&n| n < 4) {
            return Err(Error::InvalidGrid(format!("every dim must be >= 4, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGrid(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Self { dims: dims.to_vec(), spacing: spacing.to_vec() })
    }

    /// Number of axes (2 or 3).
    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// Total voxel count.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Row-major strides (axis 0 slowest).
    pub fn strides(&self) -> [usize; MAX_DIM] {
        let d = self.ndim();
        let mut s = [0usize; MAX_DIM];
        s[d - 1] = 1;
        for a in (0..d - 1).rev() {
            s[a] = s[a + 1] * self.dims[a + 1];
        }
        s
    }

    /// Physical volume of one voxel.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Flat index of a multi-index.
    pub fn flat(&self, idx: &[usize]) -> usize {
        let strides = self.strides();
        idx.iter().zip(strides.iter()).map(|(i, s)| i * s).sum()
    }

    /// Multi-index of a flat index.
    pub fn unflat(&self, mut flat: usize) -> [usize; MAX_DIM] {
        let strides = self.strides();
        let mut idx = [0usize; MAX_DIM];
        for a in 0..self.ndim() {
            idx[a] = flat / strides[a];
            flat %= strides[a];
        }
        idx
    }

    fn check_same(&self, other: &GridSpec, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

/// Scalar image on a regular grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: GridSpec,
    pub data: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: GridSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "data length {} != voxel count {}",
                data.len(),
                grid.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("scalar field contains non-finite values".into()));
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: &GridSpec) -> Self {
        Self { grid: grid.clone(), data: vec![0.0; grid.len()] }
    }

    pub fn constant(grid: &GridSpec, value: f64) -> Self {
        Self { grid: grid.clone(), data: vec![value; grid.len()] }
    }

    /// Build from a function of the multi-index.
    pub fn from_fn(grid: &GridSpec, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let d = grid.ndim();
        let mut data = vec![0.0; grid.len()];
        for (flat, v) in data.iter_mut().enumerate() {
            let idx = grid.unflat(flat);
            *v = f(&idx[..d]);
        }
        Self { grid: grid.clone(), data }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }
}

/// d-component vector field on a regular grid (momenta, velocities).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub grid: GridSpec,
    pub comps: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn new(grid: GridSpec, comps: Vec<Vec<f64>>) -> Result<Self> {
        if comps.len() != grid.ndim() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} components, got {}",
                grid.ndim(),
                comps.len()
            )));
        }
        for c in &comps {
            if c.len() != grid.len() {
                return Err(Error::ShapeMismatch("component length != voxel count".into()));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("vector field contains non-finite values".into()));
            }
        }
        Ok(Self { grid, comps })
    }

    pub fn zeros(grid: &GridSpec) -> Self {
        Self { grid: grid.clone(), comps: vec![vec![0.0; grid.len()]; grid.ndim()] }
    }

    pub fn constant(grid: &GridSpec, value: &[f64]) -> Self {
        Self {
            grid: grid.clone(),
            comps: value.iter().map(|&v| vec![v; grid.len()]).collect(),
        }
    }

    pub fn ndim(&self) -> usize {
        self.grid.ndim()
    }

    pub fn is_finite(&self) -> bool {
        self.comps.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.comps
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f64, |acc, &v| acc.max(v.abs()))
    }

    /// self + other, elementwise.
    pub fn add(&self, other: &VectorField) -> Result<VectorField> {
        self.grid.check_same(&other.grid, "vector add")?;
        let comps = self
            .comps
            .iter()
            .zip(&other.comps)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        Ok(VectorField { grid: self.grid.clone(), comps })
    }

    /// self - other, elementwise.
    pub fn sub(&self, other: &VectorField) -> Result<VectorField> {
        self.grid.check_same(&other.grid, "vector sub")?;
        let comps = self
            .comps
            .iter()
            .zip(&other.comps)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect();
        Ok(VectorField { grid: self.grid.clone(), comps })
    }

    pub fn scale(&self, factor: f64) -> VectorField {
        VectorField {
            grid: self.grid.clone(),
            comps: self.comps.iter().map(|c| c.iter().map(|v| v * factor).collect()).collect(),
        }
    }

    /// self += factor * other, in place.
    pub fn axpy(&mut self, factor: f64, other: &VectorField) {
        for (a, b) in self.comps.iter_mut().zip(&other.comps) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += factor * y;
            }
        }
    }
}

/// Inverse map stored as a position map in voxel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationMap {
    pub grid: GridSpec,
    pub positions: Vec<Vec<f64>>,
}

impl DeformationMap {
    pub fn new(grid: GridSpec, positions: Vec<Vec<f64>>) -> Result<Self> {
        if positions.len() != grid.ndim() {
            return Err(Error::ShapeMismatch("position component count != dimensionality".into()));
        }
        for p in &positions {
            if p.len() != grid.len() {
                return Err(Error::ShapeMismatch("position length != voxel count".into()));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("deformation map contains non-finite values".into()));
            }
        }
        Ok(Self { grid, positions })
    }

    /// Identity map: positions equal voxel indices.
    pub fn identity(grid: &GridSpec) -> Self {
        let d = grid.ndim();
        let mut positions = vec![vec![0.0; grid.len()]; d];
        for flat in 0..grid.len() {
            let idx = grid.unflat(flat);
            for a in 0..d {
                positions[a][flat] = idx[a] as f64;
            }
        }
        Self { grid: grid.clone(), positions }
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }

    /// Position at voxel `flat` as a fixed-size array.
    pub fn position_at(&self, flat: usize) -> [f64; MAX_DIM] {
        let mut p = [0.0; MAX_DIM];
        for (a, comp) in self.positions.iter().enumerate() {
            p[a] = comp[flat];
        }
        p
    }

    /// Composition self(other(x)): sample own positions at the other map.
    pub fn compose(&self, other: &DeformationMap) -> Result<DeformationMap> {
        self.grid.check_same(&other.grid, "map composition")?;
        let d = self.grid.ndim();
        let mut positions = vec![vec![0.0; self.grid.len()]; d];
        for flat in 0..self.grid.len() {
            let p = other.position_at(flat);
            for a in 0..d {
                positions[a][flat] = interpolate_slice(&self.positions[a], &self.grid, &p[..d]);
            }
        }
        Ok(DeformationMap { grid: self.grid.clone(), positions })
    }

    /// Displacement view: positions minus the identity.
    pub fn displacement(&self) -> VectorField {
        let d = self.grid.ndim();
        let mut comps = vec![vec![0.0; self.grid.len()]; d];
        for flat in 0..self.grid.len() {
            let idx = self.grid.unflat(flat);
            for a in 0..d {
                comps[a][flat] = self.positions[a][flat] - idx[a] as f64;
            }
        }
        VectorField { grid: self.grid.clone(), comps }
    }

    /// Largest displacement magnitude in voxels.
    pub fn max_displacement(&self) -> f64 {
        let d = self.grid.ndim();
        let mut max = 0.0f64;
        for flat in 0..self.grid.len() {
            let idx = self.grid.unflat(flat);
            let mut sq = 0.0;
            for a in 0..d {
                let u = self.positions[a][flat] - idx[a] as f64;
                sq += u * u;
            }
            max = max.max(sq.sqrt());
        }
        max
    }
}

/// Boolean region-of-interest mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub grid: GridSpec,
    pub flags: Vec<bool>,
}

impl Mask {
    pub fn new(grid: GridSpec, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != grid.len() {
            return Err(Error::ShapeMismatch("mask length != voxel count".into()));
        }
        Ok(Self { grid, flags })
    }

    pub fn from_fn(grid: &GridSpec, mut f: impl FnMut(&[usize]) -> bool) -> Self {
        let d = grid.ndim();
        let flags = (0..grid.len())
            .map(|flat| {
                let idx = grid.unflat(flat);
                f(&idx[..d])
            })
            .collect();
        Self { grid: grid.clone(), flags }
    }

    pub fn all(grid: &GridSpec) -> Self {
        Self { grid: grid.clone(), flags: vec![true; grid.len()] }
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&b| b).count()
    }
}

// ---------------------------------------------------------------------------
// Interpolation
// ---------------------------------------------------------------------------

/// Multilinear interpolation with coordinates clamped to the grid boundary.
pub fn interpolate(f: &ScalarField, p: &[f64]) -> f64 {
    interpolate_slice(&f.data, &f.grid, p)
}

/// Interpolate a raw component slice; same clamping convention.
pub fn interpolate_slice(data: &[f64], grid: &GridSpec, p: &[f64]) -> f64 {
    let d = grid.ndim();
    let strides = grid.strides();
    let mut base = [0usize; MAX_DIM];
    let mut frac = [0.0f64; MAX_DIM];
    for a in 0..d {
        let n = grid.dims[a];
        let x = p[a].clamp(0.0, (n - 1) as f64);
        let i0 = (x.floor() as usize).min(n - 2);
        base[a] = i0;
        frac[a] = x - i0 as f64;
    }
    let mut value = 0.0;
    for corner in 0..(1usize << d) {
        let mut w = 1.0;
        let mut flat = 0usize;
        for a in 0..d {
            let hi = (corner >> a) & 1;
            w *= if hi == 1 { frac[a] } else { 1.0 - frac[a] };
            flat += (base[a] + hi) * strides[a];
        }
        value += w * data[flat];
    }
    value
}

/// Interpolated value together with its derivative w.r.t. each coordinate
/// (in voxel units). The derivative is zero along clamped axes.
pub fn interpolate_slice_with_grad(
    data: &[f64],
    grid: &GridSpec,
    p: &[f64],
) -> (f64, [f64; MAX_DIM]) {
    let d = grid.ndim();
    let strides = grid.strides();
    let mut base = [0usize; MAX_DIM];
    let mut frac = [0.0f64; MAX_DIM];
    let mut clamped = [false; MAX_DIM];
    for a in 0..d {
        let n = grid.dims[a];
        let x = p[a];
        clamped[a] = x <= 0.0 || x >= (n - 1) as f64;
        let x = x.clamp(0.0, (n - 1) as f64);
        let i0 = (x.floor() as usize).min(n - 2);
        base[a] = i0;
        frac[a] = x - i0 as f64;
    }
    let mut value = 0.0;
    let mut grad = [0.0f64; MAX_DIM];
    for corner in 0..(1usize << d) {
        let mut w = 1.0;
        let mut flat = 0usize;
        for a in 0..d {
            let hi = (corner >> a) & 1;
            w *= if hi == 1 { frac[a] } else { 1.0 - frac[a] };
            flat += (base[a] + hi) * strides[a];
        }
        let v = data[flat];
        value += w * v;
        // d/dp_r replaces the axis-r weight by ±1.
        for r in 0..d {
            if clamped[r] {
                continue;
            }
            let mut wr = 1.0;
            for a in 0..d {
                let hi = (corner >> a) & 1;
                if a == r {
                    wr *= if hi == 1 { 1.0 } else { -1.0 };
                } else {
                    wr *= if hi == 1 { frac[a] } else { 1.0 - frac[a] };
                }
            }
            grad[r] += wr * v;
        }
    }
    (value, grad)
}

/// Scatter adjoint of `interpolate_slice`: accumulates `weight` onto the
/// interpolation stencil of `p` in `out`.
pub fn scatter_interpolation(out: &mut [f64], grid: &GridSpec, p: &[f64], weight: f64) {
    let d = grid.ndim();
    let strides = grid.strides();
    let mut base = [0usize; MAX_DIM];
    let mut frac = [0.0f64; MAX_DIM];
    for a in 0..d {
        let n = grid.dims[a];
        let x = p[a].clamp(0.0, (n - 1) as f64);
        let i0 = (x.floor() as usize).min(n - 2);
        base[a] = i0;
        frac[a] = x - i0 as f64;
    }
    for corner in 0..(1usize << d) {
        let mut w = 1.0;
        let mut flat = 0usize;
        for a in 0..d {
            let hi = (corner >> a) & 1;
            w *= if hi == 1 { frac[a] } else { 1.0 - frac[a] };
            flat += (base[a] + hi) * strides[a];
        }
        out[flat] += weight * w;
    }
}

// ---------------------------------------------------------------------------
// Warping
// ---------------------------------------------------------------------------

/// Pull back an image through an inverse map: output(x) = f(phi_inv(x)).
pub fn warp(f: &ScalarField, phi_inv: &DeformationMap) -> Result<ScalarField> {
    f.grid.check_same(&phi_inv.grid, "warp")?;
    let d = f.grid.ndim();
    let mut data = vec![0.0; f.grid.len()];
    for (flat, v) in data.iter_mut().enumerate() {
        let p = phi_inv.position_at(flat);
        *v = interpolate_slice(&f.data, &f.grid, &p[..d]);
    }
    Ok(ScalarField { grid: f.grid.clone(), data })
}

// ---------------------------------------------------------------------------
// Differentiation
// ---------------------------------------------------------------------------

/// Flat start indices of all 1D lines along `axis`.
pub(crate) fn line_starts(grid: &GridSpec, axis: usize) -> Vec<usize> {
    let dims = &grid.dims;
    let strides = grid.strides();
    let mut out = Vec::with_capacity(grid.len() / dims[axis]);
    match grid.ndim() {
        2 => {
            let other = 1 - axis;
            for j in 0..dims[other] {
                out.push(j * strides[other]);
            }
        }
        3 => {
            let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
            for j in 0..dims[others[0]] {
                for k in 0..dims[others[1]] {
                    out.push(j * strides[others[0]] + k * strides[others[1]]);
                }
            }
        }
        _ => unreachable!(),
    }
    out
}

/// Partial derivative along `axis` in index units: central differences in
/// the interior, one-sided at the boundary.
pub fn axis_derivative_index(data: &[f64], grid: &GridSpec, axis: usize) -> Vec<f64> {
    let n = grid.dims[axis];
    let stride = grid.strides()[axis];
    let mut out = vec![0.0; data.len()];
    for start in line_starts(grid, axis) {
        out[start] = data[start + stride] - data[start];
        for i in 1..n - 1 {
            let idx = start + i * stride;
            out[idx] = 0.5 * (data[idx + stride] - data[idx - stride]);
        }
        let last = start + (n - 1) * stride;
        out[last] = data[last] - data[last - stride];
    }
    out
}

/// Physical partial derivative along `axis` (index derivative / spacing).
pub fn axis_derivative(data: &[f64], grid: &GridSpec, axis: usize) -> Vec<f64> {
    let inv_h = 1.0 / grid.spacing[axis];
    let mut out = axis_derivative_index(data, grid, axis);
    for v in &mut out {
        *v *= inv_h;
    }
    out
}

/// Exact transpose of [`axis_derivative`] (used by adjoint sweeps).
pub fn axis_derivative_transpose(data: &[f64], grid: &GridSpec, axis: usize) -> Vec<f64> {
    let n = grid.dims[axis];
    let stride = grid.strides()[axis];
    let inv_h = 1.0 / grid.spacing[axis];
    let mut out = vec![0.0; data.len()];
    for start in line_starts(grid, axis) {
        // Scatter each row of the forward stencil.
        let u0 = data[start] * inv_h;
        out[start] -= u0;
        out[start + stride] += u0;
        for i in 1..n - 1 {
            let u = data[start + i * stride] * 0.5 * inv_h;
            out[start + (i + 1) * stride] += u;
            out[start + (i - 1) * stride] -= u;
        }
        let ul = data[start + (n - 1) * stride] * inv_h;
        out[start + (n - 1) * stride] += ul;
        out[start + (n - 2) * stride] -= ul;
    }
    out
}

/// Spatial gradient of a scalar field (physical units).
pub fn central_gradient(f: &ScalarField) -> VectorField {
    let d = f.grid.ndim();
    let comps = (0..d).map(|a| axis_derivative(&f.data, &f.grid, a)).collect();
    VectorField { grid: f.grid.clone(), comps }
}

/// Per-voxel determinant of the Jacobian of a position map.
///
/// Derivatives are taken in index units; because positions are stored in
/// voxel coordinates the determinant is the volume ratio irrespective of
/// spacing.
pub fn jacobian_determinant(phi: &DeformationMap) -> ScalarField {
    let grid = &phi.grid;
    let d = grid.ndim();
    let mut jac = Vec::with_capacity(d * d);
    for r in 0..d {
        for c in 0..d {
            jac.push(axis_derivative_index(&phi.positions[r], grid, c));
        }
    }
    let mut data = vec![0.0; grid.len()];
    match d {
        2 => {
            for (flat, v) in data.iter_mut().enumerate() {
                let a = jac[0][flat];
                let b = jac[1][flat];
                let c = jac[2][flat];
                let e = jac[3][flat];
                *v = a * e - b * c;
            }
        }
        3 => {
            for (flat, v) in data.iter_mut().enumerate() {
                let m = |r: usize, c: usize| jac[r * 3 + c][flat];
                *v = m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1))
                    - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
                    + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
            }
        }
        _ => unreachable!(),
    }
    ScalarField { grid: grid.clone(), data }
}

#[cfg(test)]
mod tests;
