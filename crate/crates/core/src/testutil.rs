//! Shared helpers for unit tests: seeded smooth fields with controlled
//! magnitude.

use crate::field::{GridSpec, ScalarField, VectorField};
use crate::kernel::{self, KernelParams};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Smooth scalar field from a handful of seeded sinusoids, values O(amplitude).
pub fn smooth_scalar(grid: &GridSpec, seed: u64, amplitude: f64) -> ScalarField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = grid.ndim();
    let waves: Vec<(Vec<f64>, f64, f64)> = (0..4)
        .map(|_| {
            let k: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.5..2.5)).collect();
            (k, rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.3..1.0))
        })
        .collect();
    ScalarField::from_fn(grid, |idx| {
        let mut v = 0.0;
        for (k, phase, a) in &waves {
            let mut arg = *phase;
            for (ax, &i) in idx.iter().enumerate() {
                arg += std::f64::consts::TAU * k[ax] * i as f64 / grid.dims[ax] as f64;
            }
            v += a * arg.sin();
        }
        amplitude * v / 2.0
    })
}

/// Smooth vector field built per component from [`smooth_scalar`].
pub fn smooth_vector(grid: &GridSpec, seed: u64, amplitude: f64) -> VectorField {
    let comps = (0..grid.ndim())
        .map(|a| smooth_scalar(grid, seed.wrapping_add(1 + a as u64 * 7919), amplitude).data)
        .collect();
    VectorField { grid: grid.clone(), comps }
}

/// Smooth momentum normalized so the induced velocity K m has the given
/// maximum magnitude in voxels per unit time.
pub fn momentum_with_velocity(
    grid: &GridSpec,
    seed: u64,
    max_velocity: f64,
    k: &KernelParams,
) -> VectorField {
    let m = smooth_vector(grid, seed, 1.0);
    let v = kernel::apply_k(&m, k).expect("kernel");
    let mut vmax = 0.0f64;
    for (a, comp) in v.comps.iter().enumerate() {
        let inv_h = 1.0 / grid.spacing[a];
        for &x in comp {
            vmax = vmax.max((x * inv_h).abs());
        }
    }
    m.scale(max_velocity / vmax)
}

/// Volume-weighted L2 dot product of two vector fields.
pub fn dot_l2(a: &VectorField, b: &VectorField) -> f64 {
    let vol = a.grid.voxel_volume();
    a.comps
        .iter()
        .zip(&b.comps)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .sum::<f64>()
        * vol
}
