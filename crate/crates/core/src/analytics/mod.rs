//! Atrophy scores, overlay and deformation errors, and cohort statistics.

pub mod stats;

pub use stats::{
    average_ranks, benjamini_hochberg, linfit_ci, paired_t_test, percentiles, spearman,
    t_quantile, top_fraction_by_magnitude, wilcoxon_signed_rank, CiTriple, FitResult,
};

use crate::error::{Error, Result};
use crate::field::{jacobian_determinant, DeformationMap, Mask, ScalarField};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Default percentiles for deformation-error tables.
pub const DEFAULT_PERCENTILES: [f64; 7] = [0.3, 5.0, 25.0, 50.0, 75.0, 95.0, 99.7];

/// One atrophy measurement of one subject at one time point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtrophyRecord {
    pub subject: String,
    /// Months since baseline.
    pub time: f64,
    /// Percent volume loss in the stat-ROI; positive means loss.
    pub atrophy: f64,
    /// Diagnosis code: 0 = NC, 1 = MCI, 2 = AD.
    pub diagnosis: u8,
    /// Cognitive score (MMSE analogue).
    pub cognitive: f64,
    /// Which momentum source produced the estimate.
    pub backend: String,
}

/// First/last diagnosis codes over a subject's visits (e.g. MCI-AD).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DxChangeGroup {
    pub first: u8,
    pub last: u8,
}

impl DxChangeGroup {
    pub fn label(&self) -> String {
        let name = |c: u8| match c {
            0 => "NC",
            1 => "MCI",
            2 => "AD",
            other => panic!("diagnosis code {other} out of range"),
        };
        format!("{}-{}", name(self.first), name(self.last))
    }
}

/// Relative volume change of the ROI in percent: (1 - mean JD over ROI) x 100.
/// Positive when the region lost volume.
pub fn atrophy_score(map: &DeformationMap, roi: &Mask) -> Result<f64> {
    if map.grid != roi.grid {
        return Err(Error::GridMismatch("atrophy score".into()));
    }
    let count = roi.count();
    if count == 0 {
        return Err(Error::EmptyInput("empty ROI".into()));
    }
    let jd = jacobian_determinant(map);
    let sum: f64 = jd
        .data
        .iter()
        .zip(&roi.flags)
        .filter(|(_, &f)| f)
        .map(|(v, _)| v)
        .sum();
    Ok((1.0 - sum / count as f64) * 100.0)
}

/// Voxelwise atrophy (1 - JD) x 100 inside the ROI, zero outside. Its mean
/// over the ROI equals [`atrophy_score`] exactly.
pub fn local_atrophy(map: &DeformationMap, roi: &Mask) -> Result<ScalarField> {
    if map.grid != roi.grid {
        return Err(Error::GridMismatch("local atrophy".into()));
    }
    let jd = jacobian_determinant(map);
    let data = jd
        .data
        .iter()
        .zip(&roi.flags)
        .map(|(v, &f)| if f { (1.0 - v) * 100.0 } else { 0.0 })
        .collect();
    Ok(ScalarField { grid: map.grid.clone(), data })
}

/// Mean absolute intensity difference over the mask.
pub fn overlay_error(regressed: &ScalarField, measured: &ScalarField, brain: &Mask) -> Result<f64> {
    if regressed.grid != measured.grid || regressed.grid != brain.grid {
        return Err(Error::GridMismatch("overlay error".into()));
    }
    let count = brain.count();
    if count == 0 {
        return Err(Error::EmptyInput("empty brain mask".into()));
    }
    let sum: f64 = regressed
        .data
        .iter()
        .zip(&measured.data)
        .zip(&brain.flags)
        .filter(|(_, &f)| f)
        .map(|((a, b), _)| (a - b).abs())
        .sum();
    Ok(sum / count as f64)
}

/// Voxelwise Euclidean norm of the position difference over the mask,
/// summarized at the requested percentiles. Returns (percentile, value)
/// pairs.
pub fn deformation_error_percentiles(
    pred: &DeformationMap,
    reference: &DeformationMap,
    mask: &Mask,
    which: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if pred.grid != reference.grid || pred.grid != mask.grid {
        return Err(Error::GridMismatch("deformation error".into()));
    }
    let d = pred.grid.ndim();
    let mut errors = Vec::with_capacity(mask.count());
    for flat in 0..pred.grid.len() {
        if !mask.flags[flat] {
            continue;
        }
        let mut sq = 0.0;
        for a in 0..d {
            let diff = pred.positions[a][flat] - reference.positions[a][flat];
            sq += diff * diff;
        }
        errors.push(sq.sqrt());
    }
    if errors.is_empty() {
        return Err(Error::EmptyInput("empty mask".into()));
    }
    let values = percentiles(&errors, which)?;
    Ok(which.iter().cloned().zip(values).collect())
}

/// Voxelwise mean Jacobian determinant over a group of maps.
pub fn mean_jd_map(maps: &[DeformationMap]) -> Result<ScalarField> {
    let first = maps.first().ok_or_else(|| Error::EmptyInput("mean JD of no maps".into()))?;
    let mut acc = vec![0.0; first.grid.len()];
    for map in maps {
        if map.grid != first.grid {
            return Err(Error::GridMismatch("mean JD group".into()));
        }
        let jd = jacobian_determinant(map);
        for (a, v) in acc.iter_mut().zip(&jd.data) {
            *a += v;
        }
    }
    let n = maps.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Ok(ScalarField { grid: first.grid.clone(), data: acc })
}

// ---------------------------------------------------------------------------
// Flat-file outputs
// ---------------------------------------------------------------------------

/// Write atrophy records as `atrophy.csv`.
pub fn write_atrophy_csv(path: impl AsRef<Path>, records: &[AtrophyRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "subject,time,atrophy,dx,mmse,backend")?;
    for r in records {
        writeln!(
            w,
            "{},{},{:.10e},{},{:.10e},{}",
            r.subject, r.time, r.atrophy, r.diagnosis, r.cognitive, r.backend
        )?;
    }
    Ok(())
}

pub fn read_atrophy_csv(path: impl AsRef<Path>) -> Result<Vec<AtrophyRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Format(format!("atrophy.csv line {}: {line}", i + 1)));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|e| Error::Format(format!("atrophy.csv line {}: {e}", i + 1)))
        };
        out.push(AtrophyRecord {
            subject: f[0].to_string(),
            time: parse(f[1])?,
            atrophy: parse(f[2])?,
            diagnosis: f[3]
                .parse()
                .map_err(|e| Error::Format(format!("atrophy.csv line {}: {e}", i + 1)))?,
            cognitive: parse(f[4])?,
            backend: f[5].to_string(),
        });
    }
    Ok(out)
}

/// Write per-group linear fits as `fits.csv`.
pub fn write_fits_csv(path: impl AsRef<Path>, fits: &[(String, FitResult)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "group,slope_lo,slope,slope_hi,intercept_lo,intercept,intercept_hi,n")?;
    for (group, f) in fits {
        writeln!(
            w,
            "{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{}",
            group, f.slope.lo, f.slope.point, f.slope.hi, f.intercept.lo, f.intercept.point,
            f.intercept.hi, f.n
        )?;
    }
    Ok(())
}

/// One row of the correlation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub time: f64,
    pub backend: String,
    pub rho_mmse: f64,
    pub p_mmse: f64,
    pub rho_dx: f64,
    pub p_dx: f64,
    pub n: usize,
    pub bh_significant: bool,
}

pub fn write_correlations_csv(path: impl AsRef<Path>, rows: &[CorrelationRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "time,backend,rho_mmse,p_mmse,rho_dx,p_dx,n,bh_flag")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.10e},{:.10e},{:.10e},{:.10e},{},{}",
            r.time, r.backend, r.rho_mmse, r.p_mmse, r.rho_dx, r.p_dx, r.n,
            if r.bh_significant { 1 } else { 0 }
        )?;
    }
    Ok(())
}

/// 8-bit binary PGM of a mid-volume slice, intensities windowed to [lo, hi].
pub fn write_pgm_slice(
    path: impl AsRef<Path>,
    f: &ScalarField,
    window: (f64, f64),
) -> Result<()> {
    let d = f.grid.ndim();
    let (rows, cols, at): (usize, usize, Box<dyn Fn(usize, usize) -> f64>) = if d == 2 {
        let n1 = f.grid.dims[1];
        let data = f.data.clone();
        (f.grid.dims[0], n1, Box::new(move |i, j| data[i * n1 + j]))
    } else {
        // middle slice along axis 0
        let mid = f.grid.dims[0] / 2;
        let (n1, n2) = (f.grid.dims[1], f.grid.dims[2]);
        let data = f.data.clone();
        (n1, n2, Box::new(move |i, j| data[(mid * n1 + i) * n2 + j]))
    };
    let (lo, hi) = window;
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut bytes = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let v = ((at(i, j) - lo) * scale).clamp(0.0, 255.0);
            bytes.push(v.round() as u8);
        }
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(w, "P5\n{cols} {rows}\n255\n")?;
    w.write_all(&bytes)?;
    Ok(())
}
