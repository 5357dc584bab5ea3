//! Sliding-window patch extraction with mask pruning, and re-assembly of
//! per-patch predictions into a full momentum field.

use super::NetConfig;
use crate::error::{Error, Result};
use crate::field::{GridSpec, Mask, ScalarField, VectorField, MAX_DIM};

/// One training/prediction sample: co-located source and target patches,
/// optionally with the momentum patch as regression label.
#[derive(Debug, Clone)]
pub struct PatchSample {
    /// Voxel index of the patch corner in the full grid.
    pub origin: [usize; MAX_DIM],
    pub source: Vec<f64>,
    pub target: Vec<f64>,
    /// d momentum component patches.
    pub label: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct PatchDataset {
    pub grid: GridSpec,
    pub patch_size: usize,
    pub samples: Vec<PatchSample>,
}

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn merge(mut datasets: Vec<PatchDataset>) -> Result<PatchDataset> {
        let mut iter = datasets.drain(..);
        let mut first = iter
            .next()
            .ok_or_else(|| Error::EmptyInput("no datasets to merge".into()))?;
        for mut ds in iter {
            if ds.patch_size != first.patch_size {
                return Err(Error::ShapeMismatch("patch sizes differ".into()));
            }
            first.samples.append(&mut ds.samples);
        }
        Ok(first)
    }
}

/// Patch start offsets along one axis: stride steps from 0, with the last
/// start pinned to n - p so the axis is fully covered.
pub fn axis_starts(n: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut s = 0;
    while s + patch <= n {
        starts.push(s);
        s += stride;
    }
    let last = n - patch;
    if *starts.last().expect("patch <= n") != last {
        starts.push(last);
    }
    starts
}

fn patch_origins(grid: &GridSpec, cfg: &NetConfig) -> Vec<[usize; MAX_DIM]> {
    let d = grid.ndim();
    let per_axis: Vec<Vec<usize>> =
        (0..d).map(|a| axis_starts(grid.dims[a], cfg.patch_size, cfg.stride)).collect();
    let mut out = Vec::new();
    match d {
        2 => {
            for &i in &per_axis[0] {
                for &j in &per_axis[1] {
                    out.push([i, j, 0]);
                }
            }
        }
        3 => {
            for &i in &per_axis[0] {
                for &j in &per_axis[1] {
                    for &k in &per_axis[2] {
                        out.push([i, j, k]);
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    out
}

fn copy_patch(data: &[f64], grid: &GridSpec, origin: &[usize; MAX_DIM], p: usize) -> Vec<f64> {
    let d = grid.ndim();
    let strides = grid.strides();
    let mut out = Vec::with_capacity(p.pow(d as u32));
    match d {
        2 => {
            for i in 0..p {
                let base = (origin[0] + i) * strides[0] + origin[1];
                out.extend_from_slice(&data[base..base + p]);
            }
        }
        3 => {
            for i in 0..p {
                for j in 0..p {
                    let base =
                        (origin[0] + i) * strides[0] + (origin[1] + j) * strides[1] + origin[2];
                    out.extend_from_slice(&data[base..base + p]);
                }
            }
        }
        _ => unreachable!(),
    }
    out
}

fn mask_intersects(mask: &Mask, origin: &[usize; MAX_DIM], p: usize) -> bool {
    let d = mask.grid.ndim();
    let strides = mask.grid.strides();
    match d {
        2 => {
            for i in 0..p {
                let base = (origin[0] + i) * strides[0] + origin[1];
                if mask.flags[base..base + p].iter().any(|&f| f) {
                    return true;
                }
            }
            false
        }
        3 => {
            for i in 0..p {
                for j in 0..p {
                    let base =
                        (origin[0] + i) * strides[0] + (origin[1] + j) * strides[1] + origin[2];
                    if mask.flags[base..base + p].iter().any(|&f| f) {
                        return true;
                    }
                }
            }
            false
        }
        _ => unreachable!(),
    }
}

/// Sliding-window patches at the configured stride. A patch is kept iff it
/// intersects the mask (no mask keeps everything); when a momentum field is
/// given, the co-located momentum patch is attached as the label.
pub fn extract_patches(
    source: &ScalarField,
    target: &ScalarField,
    momentum: Option<&VectorField>,
    mask: Option<&Mask>,
    cfg: &NetConfig,
) -> Result<PatchDataset> {
    cfg.validate()?;
    let grid = &source.grid;
    if target.grid != *grid {
        return Err(Error::GridMismatch("patch extraction: source vs target".into()));
    }
    if let Some(m) = momentum {
        if m.grid != *grid {
            return Err(Error::GridMismatch("patch extraction: momentum".into()));
        }
    }
    if let Some(m) = mask {
        if m.grid != *grid {
            return Err(Error::GridMismatch("patch extraction: mask".into()));
        }
    }
    if grid.ndim() != cfg.dim {
        return Err(Error::ShapeMismatch(format!(
            "grid is {}D but net config is {}D",
            grid.ndim(),
            cfg.dim
        )));
    }
    if grid.dims.iter().any(|&n| n < cfg.patch_size) {
        return Err(Error::ShapeMismatch(format!(
            "patch size {} exceeds grid {:?}",
            cfg.patch_size, grid.dims
        )));
    }

    let p = cfg.patch_size;
    let mut samples = Vec::new();
    for origin in patch_origins(grid, cfg) {
        if let Some(m) = mask {
            if !mask_intersects(m, &origin, p) {
                continue;
            }
        }
        let label = momentum.map(|m| {
            m.comps.iter().map(|c| copy_patch(c, grid, &origin, p)).collect::<Vec<_>>()
        });
        samples.push(PatchSample {
            origin,
            source: copy_patch(&source.data, grid, &origin, p),
            target: copy_patch(&target.data, grid, &origin, p),
            label,
        });
    }
    Ok(PatchDataset { grid: grid.clone(), patch_size: p, samples })
}

/// Assemble per-patch momentum predictions into a full field: overlapping
/// voxels are averaged, voxels not covered by any kept patch stay zero.
pub fn assemble_field(
    grid: &GridSpec,
    patch_size: usize,
    patches: &[([usize; MAX_DIM], Vec<Vec<f64>>)],
) -> VectorField {
    let d = grid.ndim();
    let strides = grid.strides();
    let mut sums = vec![vec![0.0; grid.len()]; d];
    let mut counts = vec![0u32; grid.len()];
    let p = patch_size;
    for (origin, comps) in patches {
        let mut patch_flat = 0usize;
        match d {
            2 => {
                for i in 0..p {
                    let base = (origin[0] + i) * strides[0] + origin[1];
                    for j in 0..p {
                        for (a, comp) in comps.iter().enumerate() {
                            sums[a][base + j] += comp[patch_flat];
                        }
                        counts[base + j] += 1;
                        patch_flat += 1;
                    }
                }
            }
            3 => {
                for i in 0..p {
                    for j in 0..p {
                        let base = (origin[0] + i) * strides[0]
                            + (origin[1] + j) * strides[1]
                            + origin[2];
                        for k in 0..p {
                            for (a, comp) in comps.iter().enumerate() {
                                sums[a][base + k] += comp[patch_flat];
                            }
                            counts[base + k] += 1;
                            patch_flat += 1;
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
    }
    for comp in &mut sums {
        for (v, &c) in comp.iter_mut().zip(&counts) {
            if c > 0 {
                *v /= c as f64;
            }
        }
    }
    VectorField { grid: grid.clone(), comps: sums }
}
