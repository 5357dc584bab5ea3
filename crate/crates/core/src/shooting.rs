//! Forward integration of the geodesic equations: EPDiff for the momentum,
//! advection of the inverse map, and the pointwise flow of the forward map.
//!
//! The image is advected by map pullback I(t) = I0 o Phi_inv(t) rather than
//! by solving the advection PDE directly; this avoids numerical diffusion
//! and keeps I(t) consistent with the map used for Jacobian analytics.

use crate::error::{Error, Result};
use crate::field::{
    self, axis_derivative, interpolate_slice, DeformationMap, GridSpec, ScalarField, VectorField,
};
use crate::kernel::{self, KernelParams};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Integrator {
    Euler,
    Rk4,
}

/// Time discretization of a shoot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShootConfig {
    /// Integration steps per unit time; at least one step is always taken.
    pub steps_per_unit: usize,
    pub integrator: Integrator,
}

impl Default for ShootConfig {
    fn default() -> Self {
        Self { steps_per_unit: 10, integrator: Integrator::Rk4 }
    }
}

impl ShootConfig {
    pub fn steps_for(&self, duration: f64) -> usize {
        ((self.steps_per_unit as f64 * duration).ceil() as usize).max(1)
    }
}

/// One time sample of a geodesic.
#[derive(Debug, Clone)]
pub struct GeodesicState {
    pub t: f64,
    pub image: ScalarField,
    pub momentum: VectorField,
    pub map_inv: DeformationMap,
}

/// Time-sampled geodesic produced by [`shoot`].
#[derive(Debug, Clone)]
pub struct GeodesicTrajectory {
    pub states: Vec<GeodesicState>,
    /// Forward map Phi at the final time: warping the target by it pulls
    /// the target back toward the source frame.
    pub forward_map: DeformationMap,
}

impl GeodesicTrajectory {
    pub fn final_state(&self) -> &GeodesicState {
        self.states.last().expect("trajectory has at least the initial state")
    }

    /// Write the trajectory as numbered GFF files plus a JSON manifest.
    pub fn export(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (i, s) in self.states.iter().enumerate() {
            let image = format!("step_{i:04}.image.gff");
            let momentum = format!("step_{i:04}.momentum.gff");
            let map_inv = format!("step_{i:04}.map_inv.gff");
            field::gff::write_scalar(dir.join(&image), &s.image)?;
            field::gff::write_vector(dir.join(&momentum), &s.momentum)?;
            field::gff::write_map(dir.join(&map_inv), &s.map_inv)?;
            entries.push(serde_json::json!({
                "step": i,
                "t": s.t,
                "image": image,
                "momentum": momentum,
                "map_inv": map_inv,
            }));
        }
        field::gff::write_map(dir.join("forward_map.gff"), &self.forward_map)?;
        let manifest = serde_json::json!({
            "steps": entries,
            "forward_map": "forward_map.gff",
        });
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?,
        )?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Right-hand sides
// ---------------------------------------------------------------------------

/// EPDiff right-hand side: -ad*_v m = -((Dv)^T m + (Dm) v + m div v)
/// with v = K m, central differences, clamped boundary stencils.
pub fn epdiff_rhs(m: &VectorField, k: &KernelParams) -> Result<VectorField> {
    let v = kernel::apply_k(m, k)?;
    Ok(epdiff_rhs_with_velocity(m, &v))
}

/// Same as [`epdiff_rhs`] but with the velocity already computed.
pub fn epdiff_rhs_with_velocity(m: &VectorField, v: &VectorField) -> VectorField {
    let grid = &m.grid;
    let d = grid.ndim();
    let len = grid.len();
    // dv[s][c] = d v_s / d x_c
    let dv: Vec<Vec<Vec<f64>>> = (0..d)
        .map(|s| (0..d).map(|c| axis_derivative(&v.comps[s], grid, c)).collect())
        .collect();
    let mut div = vec![0.0; len];
    for c in 0..d {
        for (acc, x) in div.iter_mut().zip(&dv[c][c]) {
            *acc += x;
        }
    }
    let mut out = VectorField::zeros(grid);
    for r in 0..d {
        let dm_r: Vec<Vec<f64>> = (0..d).map(|c| axis_derivative(&m.comps[r], grid, c)).collect();
        let o = &mut out.comps[r];
        for flat in 0..len {
            let mut acc = 0.0;
            for s in 0..d {
                acc += dv[s][r][flat] * m.comps[s][flat]; // (Dv)^T m
            }
            for c in 0..d {
                acc += dm_r[c][flat] * v.comps[c][flat]; // (Dm) v
            }
            acc += m.comps[r][flat] * div[flat]; // m div v
            o[flat] = -acc;
        }
    }
    out
}

/// Integration state: momentum, inverse-map positions and (optionally)
/// forward-map positions, all as raw component arrays.
#[derive(Clone)]
pub(crate) struct FlowState {
    pub(crate) m: Vec<Vec<f64>>,
    pub(crate) p_inv: Vec<Vec<f64>>,
    pub(crate) p_fwd: Option<Vec<Vec<f64>>>,
}

impl FlowState {
    pub(crate) fn axpy(&mut self, s: f64, other: &FlowState) {
        let add = |dst: &mut Vec<Vec<f64>>, src: &Vec<Vec<f64>>| {
            for (a, b) in dst.iter_mut().zip(src) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += s * y;
                }
            }
        };
        add(&mut self.m, &other.m);
        add(&mut self.p_inv, &other.p_inv);
        if let (Some(pf), Some(of)) = (self.p_fwd.as_mut(), other.p_fwd.as_ref()) {
            for (a, b) in pf.iter_mut().zip(of) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += s * y;
                }
            }
        }
    }

    pub(crate) fn is_finite(&self) -> bool {
        let ok = |c: &Vec<Vec<f64>>| c.iter().all(|v| v.iter().all(|x| x.is_finite()));
        ok(&self.m) && ok(&self.p_inv) && self.p_fwd.as_ref().map_or(true, ok)
    }
}

pub(crate) fn flow_rhs(state: &FlowState, grid: &GridSpec, k: &KernelParams) -> Result<FlowState> {
    let d = grid.ndim();
    let len = grid.len();
    let m = VectorField { grid: grid.clone(), comps: state.m.clone() };
    let v = kernel::apply_k(&m, k)?;
    let dm = epdiff_rhs_with_velocity(&m, &v);

    // Inverse map advection: dP_r/dt = -sum_c (dP_r/dx_c) v_c.
    let mut dp_inv = vec![vec![0.0; len]; d];
    for r in 0..d {
        for c in 0..d {
            let deriv = axis_derivative(&state.p_inv[r], grid, c);
            for flat in 0..len {
                dp_inv[r][flat] -= deriv[flat] * v.comps[c][flat];
            }
        }
    }

    // Forward map flow: dF_r/dt = v_r(F(x)) / spacing_r (positions in voxels).
    let dp_fwd = state.p_fwd.as_ref().map(|pf| {
        let mut out = vec![vec![0.0; len]; d];
        for flat in 0..len {
            let mut pos = [0.0f64; field::MAX_DIM];
            for a in 0..d {
                pos[a] = pf[a][flat];
            }
            for (r, o) in out.iter_mut().enumerate() {
                o[flat] = interpolate_slice(&v.comps[r], grid, &pos[..d]) / grid.spacing[r];
            }
        }
        out
    });

    Ok(FlowState { m: dm.comps, p_inv: dp_inv, p_fwd: dp_fwd })
}

pub(crate) fn step(state: &FlowState, grid: &GridSpec, k: &KernelParams, dt: f64, integ: Integrator) -> Result<FlowState> {
    match integ {
        Integrator::Euler => {
            let k1 = flow_rhs(state, grid, k)?;
            let mut next = state.clone();
            next.axpy(dt, &k1);
            Ok(next)
        }
        Integrator::Rk4 => {
            let k1 = flow_rhs(state, grid, k)?;
            let mut a2 = state.clone();
            a2.axpy(dt / 2.0, &k1);
            let k2 = flow_rhs(&a2, grid, k)?;
            let mut a3 = state.clone();
            a3.axpy(dt / 2.0, &k2);
            let k3 = flow_rhs(&a3, grid, k)?;
            let mut a4 = state.clone();
            a4.axpy(dt, &k3);
            let k4 = flow_rhs(&a4, grid, k)?;
            let mut next = state.clone();
            next.axpy(dt / 6.0, &k1);
            next.axpy(dt / 3.0, &k2);
            next.axpy(dt / 3.0, &k3);
            next.axpy(dt / 6.0, &k4);
            Ok(next)
        }
    }
}

/// Rough displacement per step in voxels at t = 0 (CFL-style estimate;
/// informational, not enforced).
pub fn cfl_estimate(m0: &VectorField, k: &KernelParams, duration: f64, cfg: &ShootConfig) -> Result<f64> {
    let v = kernel::apply_k(m0, k)?;
    let dt = duration / cfg.steps_for(duration) as f64;
    let mut vmax = 0.0f64;
    for (a, comp) in v.comps.iter().enumerate() {
        let inv_h = 1.0 / m0.grid.spacing[a];
        for &x in comp {
            vmax = vmax.max((x * inv_h).abs());
        }
    }
    Ok(vmax * dt)
}

/// Integrate the geodesic from (I0, m0) for `duration` time units.
///
/// Returns the trajectory sampled at every step, with the image advected as
/// I0 o Phi_inv(t), plus the forward map at the final time.
pub fn shoot(
    i0: &ScalarField,
    m0: &VectorField,
    duration: f64,
    cfg: &ShootConfig,
    k: &KernelParams,
) -> Result<GeodesicTrajectory> {
    if i0.grid != m0.grid {
        return Err(Error::GridMismatch("shoot: image vs momentum".into()));
    }
    if !(duration >= 0.0) {
        return Err(Error::InvalidParameter(format!("shoot duration must be >= 0, got {duration}")));
    }
    let grid = &i0.grid;
    let identity = DeformationMap::identity(grid);
    let mut state = FlowState {
        m: m0.comps.clone(),
        p_inv: identity.positions.clone(),
        p_fwd: Some(identity.positions.clone()),
    };
    let mut states = vec![GeodesicState {
        t: 0.0,
        image: i0.clone(),
        momentum: m0.clone(),
        map_inv: identity.clone(),
    }];
    if duration == 0.0 {
        return Ok(GeodesicTrajectory { states, forward_map: identity });
    }
    let n = cfg.steps_for(duration);
    let dt = duration / n as f64;
    for i in 0..n {
        state = step(&state, grid, k, dt, cfg.integrator)?;
        if !state.is_finite() {
            return Err(Error::Divergence { step: i + 1, context: "geodesic shooting".into() });
        }
        let map_inv = DeformationMap { grid: grid.clone(), positions: state.p_inv.clone() };
        let image = field::warp(i0, &map_inv)?;
        states.push(GeodesicState {
            t: dt * (i + 1) as f64,
            image,
            momentum: VectorField { grid: grid.clone(), comps: state.m.clone() },
            map_inv,
        });
    }
    let forward_map = DeformationMap {
        grid: grid.clone(),
        positions: state.p_fwd.expect("forward map tracked"),
    };
    Ok(GeodesicTrajectory { states, forward_map })
}

/// Exp_Id(t m0): inverse map at time t of the geodesic shot from m0.
///
/// Exp_Id(0 m0) is the identity. Only the momentum and inverse map are
/// integrated, so this is cheaper than a full [`shoot`].
pub fn exponential_map(
    m0: &VectorField,
    t: f64,
    cfg: &ShootConfig,
    k: &KernelParams,
) -> Result<DeformationMap> {
    if !(t >= 0.0) {
        return Err(Error::InvalidParameter(format!("exponential map time must be >= 0, got {t}")));
    }
    let grid = &m0.grid;
    let identity = DeformationMap::identity(grid);
    if t == 0.0 {
        return Ok(identity);
    }
    let mut state =
        FlowState { m: m0.comps.clone(), p_inv: identity.positions.clone(), p_fwd: None };
    let n = cfg.steps_for(t);
    let dt = t / n as f64;
    for i in 0..n {
        state = step(&state, grid, k, dt, cfg.integrator)?;
        if !state.is_finite() {
            return Err(Error::Divergence { step: i + 1, context: "exponential map".into() });
        }
    }
    Ok(DeformationMap { grid: grid.clone(), positions: state.p_inv })
}
