//! The smoothing operator K and its inverse L connecting momentum and
//! velocity: v = K m, m = L v with K = L^{-1} = (-a lap - b grad(div) + c)^{-2}.
//!
//! The operators are applied per component as Fourier multipliers under
//! periodic boundary conditions. The Laplacian symbol is the discrete
//! stencil symbol l(xi) = sum_j (2 - 2 cos(2 pi xi_j / N_j)) / spacing_j^2,
//! so L is exactly the squared 5-point (7-point in 3D) stencil plus the
//! identity term, and L(K m) = m to machine precision.

use crate::error::{Error, Result};
use crate::field::{GridSpec, VectorField};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftDirection, FftPlanner};
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

/// Parameters of the regularization kernel; the exponent is fixed at 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Laplacian weight.
    pub a: f64,
    /// grad(div) weight. Only b = 0 is supported; nonzero values are
    /// rejected when the kernel is applied rather than silently ignored.
    pub b: f64,
    /// Identity weight; must be positive so the operator is invertible.
    pub c: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self { a: 1.0, b: 0.0, c: 0.1 }
    }
}

impl KernelParams {
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    pub fn validate(&self) -> Result<()> {
        if self.b != 0.0 {
            return Err(Error::UnsupportedParameter(format!(
                "kernel b = {} not supported; the grad(div) coupling term is not implemented",
                self.b
            )));
        }
        if !(self.a >= 0.0) || !self.a.is_finite() {
            return Err(Error::InvalidParameter(format!("kernel a must be >= 0, got {}", self.a)));
        }
        if !(self.c > 0.0) || !self.c.is_finite() {
            return Err(Error::InvalidParameter(format!("kernel c must be > 0, got {}", self.c)));
        }
        Ok(())
    }
}

thread_local! {
    static PLAN_CACHE: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> =
        RefCell::new(HashMap::new());
}

fn plan(len: usize, forward: bool) -> Arc<dyn Fft<f64>> {
    PLAN_CACHE.with(|cache| {
        cache
            .borrow_mut()
            .entry((len, forward))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                planner.plan_fft(
                    len,
                    if forward { FftDirection::Forward } else { FftDirection::Inverse },
                )
            })
            .clone()
    })
}

/// In-place FFT along every axis of a complex row-major buffer.
fn fft_all_axes(data: &mut [Complex<f64>], grid: &GridSpec, forward: bool) {
    let strides = grid.strides();
    for axis in 0..grid.ndim() {
        let n = grid.dims[axis];
        let stride = strides[axis];
        let fft = plan(n, forward);
        let mut line = vec![Complex::default(); n];
        for start in crate::field::line_starts(grid, axis) {
            for (i, v) in line.iter_mut().enumerate() {
                *v = data[start + i * stride];
            }
            fft.process(&mut line);
            for (i, v) in line.iter().enumerate() {
                data[start + i * stride] = *v;
            }
        }
    }
}

/// Symbol of the discrete vector Laplacian at every frequency.
fn laplacian_symbol(grid: &GridSpec) -> Vec<f64> {
    let d = grid.ndim();
    let per_axis: Vec<Vec<f64>> = (0..d)
        .map(|a| {
            let n = grid.dims[a];
            let h2 = grid.spacing[a] * grid.spacing[a];
            (0..n)
                .map(|k| (2.0 - 2.0 * (std::f64::consts::TAU * k as f64 / n as f64).cos()) / h2)
                .collect()
        })
        .collect();
    let mut out = vec![0.0; grid.len()];
    for (flat, v) in out.iter_mut().enumerate() {
        let idx = grid.unflat(flat);
        *v = (0..d).map(|a| per_axis[a][idx[a]]).sum();
    }
    out
}

fn apply_multiplier(m: &VectorField, k: &KernelParams, inverse: bool) -> Result<VectorField> {
    k.validate()?;
    let grid = &m.grid;
    let symbol = laplacian_symbol(grid);
    let mult: Vec<f64> = symbol
        .iter()
        .map(|&l| {
            let op = k.a * l + k.c;
            let sq = op * op;
            if inverse { sq } else { 1.0 / sq }
        })
        .collect();
    let norm = 1.0 / grid.len() as f64;
    let mut comps = Vec::with_capacity(m.comps.len());
    for comp in &m.comps {
        let mut buf: Vec<Complex<f64>> = comp.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft_all_axes(&mut buf, grid, true);
        for (v, &w) in buf.iter_mut().zip(&mult) {
            *v *= w;
        }
        fft_all_axes(&mut buf, grid, false);
        comps.push(buf.iter().map(|v| v.re * norm).collect());
    }
    Ok(VectorField { grid: grid.clone(), comps })
}

/// Velocity from momentum: v = K m.
pub fn apply_k(m: &VectorField, k: &KernelParams) -> Result<VectorField> {
    apply_multiplier(m, k, false)
}

/// Momentum from velocity: m = L v.
pub fn apply_l(v: &VectorField, k: &KernelParams) -> Result<VectorField> {
    apply_multiplier(v, k, true)
}

/// Metric pairing <m1, K m2> = sum over voxels and components of
/// m1 . (K m2) times the voxel volume. Symmetric and positive definite.
pub fn inner_product_k(m1: &VectorField, m2: &VectorField, k: &KernelParams) -> Result<f64> {
    if m1.grid != m2.grid {
        return Err(Error::GridMismatch("kernel inner product".into()));
    }
    let km2 = apply_k(m2, k)?;
    let vol = m1.grid.voxel_volume();
    let mut acc = 0.0;
    for (c1, c2) in m1.comps.iter().zip(&km2.comps) {
        for (x, y) in c1.iter().zip(c2) {
            acc += x * y;
        }
    }
    Ok(acc * vol)
}

/// Metric energy <m, K m>.
pub fn metric_energy(m: &VectorField, k: &KernelParams) -> Result<f64> {
    inner_product_k(m, m, k)
}
