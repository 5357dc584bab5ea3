//! Optimization-based registration: gradient descent with backtracking on
//! the shooting energy, and the geodesic distance derived from it.
//!
//! The gradient is the exact gradient of the fully discretized energy,
//! obtained by a reverse sweep through the integrator stages
//! (discretize-then-differentiate). Gradients follow the volume-weighted L2
//! convention: dE = sum(grad . delta) * voxel_volume, so the gradient of
//! the regularizer 1/2 <m, K m> alone is exactly K m.

use crate::error::{Error, Result};
use crate::field::{
    axis_derivative, axis_derivative_transpose, interpolate_slice_with_grad, jacobian_determinant,
    DeformationMap, GridSpec, ScalarField, VectorField,
};
use crate::kernel::{self, KernelParams};
use crate::shooting::{flow_rhs, step, FlowState, Integrator, ShootConfig};
use serde::{Deserialize, Serialize};

/// Registration configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    /// Similarity weight sigma in 1/sigma^2 ||I0 o Phi_inv(1) - Y||^2.
    pub sigma: f64,
    pub max_iters: usize,
    /// Initial line-search step.
    pub step_size: f64,
    /// Backtracking shrink factor (0, 1).
    pub shrink: f64,
    /// Step growth factor after an accepted step (>= 1).
    pub grow: f64,
    /// Stop when the gradient norm falls below grad_tol times the initial
    /// gradient norm.
    pub grad_tol: f64,
    /// Take steps along -K grad instead of -grad.
    pub sobolev_precondition: bool,
    pub shoot: ShootConfig,
    pub kernel: KernelParams,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            max_iters: 300,
            step_size: 1.0,
            shrink: 0.5,
            grow: 1.5,
            grad_tol: 1e-6,
            sobolev_precondition: false,
            shoot: ShootConfig::default(),
            kernel: KernelParams::default(),
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidParameter(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if self.max_iters < 1 {
            return Err(Error::InvalidParameter("max_iters must be >= 1".into()));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::InvalidParameter("shrink must be in (0, 1)".into()));
        }
        self.kernel.validate()
    }
}

/// How a registration run terminated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    GradientTolerance,
    MaxIterations,
}

/// Per-run trace of an optimization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegReport {
    /// Energy after every accepted step, starting with the initial energy;
    /// non-increasing by the line-search contract.
    pub energies: Vec<f64>,
    pub iterations: usize,
    pub energy_evaluations: usize,
    pub gradient_evaluations: usize,
    pub stop: StopReason,
    /// Mean absolute residual |I0 o Phi_inv(1) - Y| over the grid.
    pub final_overlay_l1: f64,
    /// Minimum Jacobian determinant of the final inverse map.
    pub min_jacobian: f64,
    pub final_gradient_norm: f64,
}

/// Result of [`register`]: optimal initial momentum plus the trace.
#[derive(Debug, Clone)]
pub struct Registration {
    pub momentum: VectorField,
    pub report: RegReport,
}

// ---------------------------------------------------------------------------
// Forward energy
// ---------------------------------------------------------------------------

struct Forward {
    /// State checkpoints s_0 .. s_N (momentum + inverse-map positions).
    checkpoints: Vec<FlowState>,
    energy: f64,
    similarity: f64,
    dt: f64,
}

fn initial_state(grid: &GridSpec, m0: &VectorField) -> FlowState {
    FlowState {
        m: m0.comps.clone(),
        p_inv: DeformationMap::identity(grid).positions,
        p_fwd: None,
    }
}

fn similarity_term(
    p_inv: &[Vec<f64>],
    i0: &ScalarField,
    target: &ScalarField,
    sigma: f64,
) -> f64 {
    let grid = &i0.grid;
    let d = grid.ndim();
    let mut acc = 0.0;
    for flat in 0..grid.len() {
        let mut pos = [0.0f64; crate::field::MAX_DIM];
        for a in 0..d {
            pos[a] = p_inv[a][flat];
        }
        let warped = crate::field::interpolate_slice(&i0.data, grid, &pos[..d]);
        let r = warped - target.data[flat];
        acc += r * r;
    }
    acc * grid.voxel_volume() / (sigma * sigma)
}

fn energy_forward(
    m0: &VectorField,
    i0: &ScalarField,
    target: &ScalarField,
    cfg: &RegConfig,
) -> Result<Forward> {
    let grid = &i0.grid;
    let n = cfg.shoot.steps_for(1.0);
    let dt = 1.0 / n as f64;
    let mut checkpoints = Vec::with_capacity(n + 1);
    checkpoints.push(initial_state(grid, m0));
    for i in 0..n {
        let next = step(checkpoints.last().unwrap(), grid, &cfg.kernel, dt, cfg.shoot.integrator)?;
        if !next.is_finite() {
            return Err(Error::Divergence { step: i + 1, context: "registration shoot".into() });
        }
        checkpoints.push(next);
    }
    let similarity = similarity_term(&checkpoints[n].p_inv, i0, target, cfg.sigma);
    let regularizer = 0.5 * kernel::metric_energy(m0, &cfg.kernel)?;
    Ok(Forward { checkpoints, energy: regularizer + similarity, similarity, dt })
}

/// E(m0) = 1/2 <m0, K m0> + (1/sigma^2) ||I0 o Phi_inv(1) - Y||_2^2 vol.
pub fn registration_energy(
    m0: &VectorField,
    i0: &ScalarField,
    target: &ScalarField,
    cfg: &RegConfig,
) -> Result<f64> {
    check_grids(m0, i0, target)?;
    cfg.validate()?;
    Ok(energy_forward(m0, i0, target, cfg)?.energy)
}

fn check_grids(m0: &VectorField, i0: &ScalarField, target: &ScalarField) -> Result<()> {
    if m0.grid != i0.grid || i0.grid != target.grid {
        return Err(Error::GridMismatch("registration inputs".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Adjoint sweep
// ---------------------------------------------------------------------------

/// Cotangent of a flow state (Euclidean coefficient convention).
#[derive(Clone)]
struct Cotangent {
    m: Vec<Vec<f64>>,
    p: Vec<Vec<f64>>,
}

impl Cotangent {
    fn zeros(d: usize, len: usize) -> Self {
        Self { m: vec![vec![0.0; len]; d], p: vec![vec![0.0; len]; d] }
    }

    fn axpy(&mut self, s: f64, other: &Cotangent) {
        for (a, b) in self.m.iter_mut().zip(&other.m) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
        for (a, b) in self.p.iter_mut().zip(&other.p) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }

    fn scale(&self, s: f64) -> Cotangent {
        let mul = |c: &Vec<Vec<f64>>| c.iter().map(|v| v.iter().map(|x| x * s).collect()).collect();
        Cotangent { m: mul(&self.m), p: mul(&self.p) }
    }
}

/// Vector-Jacobian product of the flow right-hand side at `state`.
fn vjp_flow(state: &FlowState, cot: &Cotangent, grid: &GridSpec, k: &KernelParams) -> Result<Cotangent> {
    let d = grid.ndim();
    let len = grid.len();
    let m = VectorField { grid: grid.clone(), comps: state.m.clone() };
    let v = kernel::apply_k(&m, k)?;

    // dv[s][c] = d v_s / d x_c, dp[r][c] = d P_r / d x_c
    let dv: Vec<Vec<Vec<f64>>> = (0..d)
        .map(|s| (0..d).map(|c| axis_derivative(&v.comps[s], grid, c)).collect())
        .collect();
    let dp: Vec<Vec<Vec<f64>>> = (0..d)
        .map(|r| (0..d).map(|c| axis_derivative(&state.p_inv[r], grid, c)).collect())
        .collect();
    let mut div = vec![0.0; len];
    for c in 0..d {
        for (acc, x) in div.iter_mut().zip(&dv[c][c]) {
            *acc += x;
        }
    }

    let mut m_hat = vec![vec![0.0; len]; d];
    let mut v_hat = vec![vec![0.0; len]; d];
    let mut p_hat = vec![vec![0.0; len]; d];
    let mut tmp = vec![0.0; len];

    // EPDiff term (Dv)^T m: direct m part and v part.
    for s in 0..d {
        for r in 0..d {
            for flat in 0..len {
                m_hat[s][flat] -= dv[s][r][flat] * cot.m[r][flat];
            }
            for flat in 0..len {
                tmp[flat] = state.m[s][flat] * cot.m[r][flat];
            }
            let t = axis_derivative_transpose(&tmp, grid, r);
            for flat in 0..len {
                v_hat[s][flat] -= t[flat];
            }
        }
    }
    // EPDiff term (Dm) v.
    for r in 0..d {
        for c in 0..d {
            for flat in 0..len {
                tmp[flat] = v.comps[c][flat] * cot.m[r][flat];
            }
            let t = axis_derivative_transpose(&tmp, grid, c);
            for flat in 0..len {
                m_hat[r][flat] -= t[flat];
            }
            let dm_rc = axis_derivative(&state.m[r], grid, c);
            for flat in 0..len {
                v_hat[c][flat] -= dm_rc[flat] * cot.m[r][flat];
            }
        }
    }
    // EPDiff term m div v.
    for r in 0..d {
        for flat in 0..len {
            m_hat[r][flat] -= div[flat] * cot.m[r][flat];
        }
    }
    {
        let mut w = vec![0.0; len];
        for r in 0..d {
            for flat in 0..len {
                w[flat] += state.m[r][flat] * cot.m[r][flat];
            }
        }
        for (c, vh) in v_hat.iter_mut().enumerate() {
            let t = axis_derivative_transpose(&w, grid, c);
            for flat in 0..len {
                vh[flat] -= t[flat];
            }
        }
    }
    // Advection dP_r/dt = -sum_c (D_c P_r) v_c.
    for r in 0..d {
        for c in 0..d {
            for flat in 0..len {
                v_hat[c][flat] -= dp[r][c][flat] * cot.p[r][flat];
            }
            for flat in 0..len {
                tmp[flat] = v.comps[c][flat] * cot.p[r][flat];
            }
            let t = axis_derivative_transpose(&tmp, grid, c);
            for flat in 0..len {
                p_hat[r][flat] -= t[flat];
            }
        }
    }
    // Close over v = K m; K is self-adjoint.
    let kv = kernel::apply_k(&VectorField { grid: grid.clone(), comps: v_hat }, k)?;
    for (mh, kvc) in m_hat.iter_mut().zip(&kv.comps) {
        for (x, y) in mh.iter_mut().zip(kvc) {
            *x += y;
        }
    }
    Ok(Cotangent { m: m_hat, p: p_hat })
}

/// Pull a cotangent back through one integrator step starting at `state`.
fn vjp_step(
    state: &FlowState,
    lambda: &Cotangent,
    grid: &GridSpec,
    k: &KernelParams,
    dt: f64,
    integ: Integrator,
) -> Result<Cotangent> {
    match integ {
        Integrator::Euler => {
            let w = vjp_flow(state, lambda, grid, k)?;
            let mut out = lambda.clone();
            out.axpy(dt, &w);
            Ok(out)
        }
        Integrator::Rk4 => {
            // Recompute the stage states of the forward step.
            let k1 = flow_rhs(state, grid, k)?;
            let mut a2 = state.clone();
            a2.axpy(dt / 2.0, &k1);
            let k2 = flow_rhs(&a2, grid, k)?;
            let mut a3 = state.clone();
            a3.axpy(dt / 2.0, &k2);
            let mut a4 = state.clone();
            a4.axpy(dt, &flow_rhs(&a3, grid, k)?);
            let _ = k2;

            let mut l_k1 = lambda.scale(dt / 6.0);
            let mut l_k2 = lambda.scale(dt / 3.0);
            let mut l_k3 = lambda.scale(dt / 3.0);
            let l_k4 = lambda.scale(dt / 6.0);
            let mut out = lambda.clone();

            let w4 = vjp_flow(&a4, &l_k4, grid, k)?;
            out.axpy(1.0, &w4);
            l_k3.axpy(dt, &w4);

            let w3 = vjp_flow(&a3, &l_k3, grid, k)?;
            out.axpy(1.0, &w3);
            l_k2.axpy(dt / 2.0, &w3);

            let w2 = vjp_flow(&a2, &l_k2, grid, k)?;
            out.axpy(1.0, &w2);
            l_k1.axpy(dt / 2.0, &w2);

            let w1 = vjp_flow(state, &l_k1, grid, k)?;
            out.axpy(1.0, &w1);
            Ok(out)
        }
    }
}

fn gradient_from_forward(
    fwd: &Forward,
    m0: &VectorField,
    i0: &ScalarField,
    target: &ScalarField,
    cfg: &RegConfig,
) -> Result<VectorField> {
    let grid = &i0.grid;
    let d = grid.ndim();
    let len = grid.len();
    let vol = grid.voxel_volume();
    let inv_sigma2 = 1.0 / (cfg.sigma * cfg.sigma);

    // Terminal cotangent: derivative of the similarity w.r.t. the final
    // inverse-map positions, through the interpolation of I0.
    let mut lambda = Cotangent::zeros(d, len);
    let p_final = &fwd.checkpoints.last().unwrap().p_inv;
    for flat in 0..len {
        let mut pos = [0.0f64; crate::field::MAX_DIM];
        for a in 0..d {
            pos[a] = p_final[a][flat];
        }
        let (warped, grad) = interpolate_slice_with_grad(&i0.data, grid, &pos[..d]);
        let factor = 2.0 * inv_sigma2 * vol * (warped - target.data[flat]);
        for a in 0..d {
            lambda.p[a][flat] = factor * grad[a];
        }
    }

    for i in (0..fwd.checkpoints.len() - 1).rev() {
        lambda = vjp_step(&fwd.checkpoints[i], &lambda, grid, &cfg.kernel, fwd.dt, cfg.shoot.integrator)?;
    }

    // Euclidean -> volume-weighted L2 convention, plus the regularizer K m0.
    let km0 = kernel::apply_k(m0, &cfg.kernel)?;
    let mut comps = lambda.m;
    for (gc, kc) in comps.iter_mut().zip(&km0.comps) {
        for (g, kv) in gc.iter_mut().zip(kc) {
            *g = *g / vol + kv;
        }
    }
    Ok(VectorField { grid: grid.clone(), comps })
}

/// Gradient of the discretized registration energy with respect to m0.
pub fn energy_gradient(
    m0: &VectorField,
    i0: &ScalarField,
    target: &ScalarField,
    cfg: &RegConfig,
) -> Result<VectorField> {
    check_grids(m0, i0, target)?;
    cfg.validate()?;
    let fwd = energy_forward(m0, i0, target, cfg)?;
    gradient_from_forward(&fwd, m0, i0, target, cfg)
}

// ---------------------------------------------------------------------------
// Descent loop
// ---------------------------------------------------------------------------

fn l2_norm(f: &VectorField) -> f64 {
    let vol = f.grid.voxel_volume();
    (f.comps.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>()).sum::<f64>() * vol).sqrt()
}

fn dot_l2(a: &VectorField, b: &VectorField) -> f64 {
    let vol = a.grid.voxel_volume();
    a.comps
        .iter()
        .zip(&b.comps)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .sum::<f64>()
        * vol
}

fn overlay_l1(p_inv: &[Vec<f64>], i0: &ScalarField, target: &ScalarField) -> f64 {
    let grid = &i0.grid;
    let d = grid.ndim();
    let mut acc = 0.0;
    for flat in 0..grid.len() {
        let mut pos = [0.0f64; crate::field::MAX_DIM];
        for a in 0..d {
            pos[a] = p_inv[a][flat];
        }
        let warped = crate::field::interpolate_slice(&i0.data, grid, &pos[..d]);
        acc += (warped - target.data[flat]).abs();
    }
    acc / grid.len() as f64
}

const MAX_SHRINKS: usize = 20;
const ARMIJO_C: f64 = 1e-4;

/// Gradient descent with backtracking line search from m0 = 0.
///
/// The energy trace is monotone non-increasing; the loop stops when the
/// gradient norm drops below `grad_tol` relative to its initial value or
/// after `max_iters` accepted iterations. Twenty consecutive rejected
/// shrinks with a non-small gradient is a stall error carrying the best
/// iterate.
pub fn register(i0: &ScalarField, target: &ScalarField, cfg: &RegConfig) -> Result<Registration> {
    if i0.grid != target.grid {
        return Err(Error::GridMismatch("registration inputs".into()));
    }
    cfg.validate()?;
    let grid = &i0.grid;
    let mut m = VectorField::zeros(grid);
    let mut fwd = energy_forward(&m, i0, target, cfg)?;
    let mut grad = gradient_from_forward(&fwd, &m, i0, target, cfg)?;
    let mut energy_evaluations = 1usize;
    let mut gradient_evaluations = 1usize;
    let grad_norm0 = l2_norm(&grad);
    let mut grad_norm = grad_norm0;
    let mut energies = vec![fwd.energy];
    let mut iterations = 0usize;
    let mut stop = StopReason::MaxIterations;
    // Previous iterate/gradient for the Barzilai-Borwein step estimate.
    let mut previous: Option<(VectorField, VectorField)> = None;
    let mut last_tau = f64::NAN;

    'outer: while iterations < cfg.max_iters {
        if grad_norm <= cfg.grad_tol * grad_norm0 || grad_norm == 0.0 {
            stop = StopReason::GradientTolerance;
            break;
        }
        let direction = if cfg.sobolev_precondition {
            kernel::apply_k(&grad, &cfg.kernel)?.scale(-1.0)
        } else {
            grad.scale(-1.0)
        };
        let slope = dot_l2(&grad, &direction); // negative for a descent direction

        // Trial step: spectral (BB) estimate when history exists, so that
        // tau P y ~ s in the preconditioned metric; otherwise a step of
        // length step_size in momentum norm.
        let mut tau = match &previous {
            Some((pm, pg)) => {
                let s = m.sub(pm).expect("same grid");
                let y = grad.sub(pg).expect("same grid");
                let sy = dot_l2(&s, &y);
                let py = if cfg.sobolev_precondition {
                    kernel::apply_k(&y, &cfg.kernel)?
                } else {
                    y.clone()
                };
                let ypy = dot_l2(&y, &py);
                if sy > 0.0 && ypy > 0.0 {
                    (sy / ypy).clamp(1e-12, 1e12)
                } else {
                    last_tau * cfg.grow
                }
            }
            None => cfg.step_size / l2_norm(&direction).max(f64::MIN_POSITIVE),
        };

        let mut shrinks = 0usize;
        loop {
            let mut candidate = m.clone();
            candidate.axpy(tau, &direction);
            // Divergence during a trial step is treated as "no decrease".
            let trial = energy_forward(&candidate, i0, target, cfg);
            energy_evaluations += 1;
            let accepted = match &trial {
                Ok(f) => f.energy <= fwd.energy + ARMIJO_C * tau * slope,
                Err(_) => false,
            };
            if accepted {
                previous = Some((m.clone(), grad.clone()));
                m = candidate;
                fwd = trial.unwrap();
                grad = gradient_from_forward(&fwd, &m, i0, target, cfg)?;
                gradient_evaluations += 1;
                grad_norm = l2_norm(&grad);
                energies.push(fwd.energy);
                iterations += 1;
                last_tau = tau;
                break;
            }
            shrinks += 1;
            tau *= cfg.shrink;
            if shrinks >= MAX_SHRINKS {
                if grad_norm <= 1e-8 * grad_norm0.max(1.0) {
                    // Flat to rounding with a vanished gradient: converged.
                    stop = StopReason::GradientTolerance;
                    break 'outer;
                }
                return Err(Error::Stall {
                    iteration: iterations,
                    shrinks,
                    best_energy: fwd.energy,
                    best_momentum: Box::new(m),
                });
            }
        }
    }

    let final_map = DeformationMap {
        grid: grid.clone(),
        positions: fwd.checkpoints.last().unwrap().p_inv.clone(),
    };
    let jd = jacobian_determinant(&final_map);
    let report = RegReport {
        energies,
        iterations,
        energy_evaluations,
        gradient_evaluations,
        stop,
        final_overlay_l1: overlay_l1(&final_map.positions, i0, target),
        min_jacobian: jd.data.iter().cloned().fold(f64::INFINITY, f64::min),
        final_gradient_norm: grad_norm,
    };
    Ok(Registration { momentum: m, report })
}

/// Squared geodesic distance between two images: register A to B and report
/// the metric energy 1/2 <m0*, K m0*> (constant along the geodesic).
pub fn geodesic_distance(a: &ScalarField, b: &ScalarField, cfg: &RegConfig) -> Result<f64> {
    let reg = register(a, b, cfg)?;
    Ok(0.5 * kernel::metric_energy(&reg.momentum, &cfg.kernel)?)
}
