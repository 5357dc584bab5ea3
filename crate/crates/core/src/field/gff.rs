//! On-disk field format ("GFF").
//!
//! Layout: 16-byte magic `GEOFIELD\0\0\0\0v001`, then little-endian u32
//! dimensionality `d`, component count `c` and `dims[d]`, then `f32[d]`
//! spacing, then `c * prod(dims)` f32 values, component-major then
//! row-major. Masks are stored with c = 1 and values 0.0/1.0. Optional
//! sidecar metadata lives in a JSON file with the same stem.

use super::{DeformationMap, GridSpec, Mask, ScalarField, VectorField};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 16] = b"GEOFIELD\0\0\0\0v001";

/// Sidecar metadata (subject id, acquisition time, units).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FieldMeta {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
}

fn write_header(w: &mut impl Write, grid: &GridSpec, components: usize) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(grid.ndim() as u32).to_le_bytes())?;
    w.write_all(&(components as u32).to_le_bytes())?;
    for &n in &grid.dims {
        w.write_all(&(n as u32).to_le_bytes())?;
    }
    for &s in &grid.spacing {
        w.write_all(&(s as f32).to_le_bytes())?;
    }
    Ok(())
}

fn write_values(w: &mut impl Write, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

fn read_header(r: &mut impl Read) -> Result<(GridSpec, usize)> {
    let mut magic = [0u8; 16];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad GFF magic".into()));
    }
    let d = read_u32(r)? as usize;
    if !(2..=3).contains(&d) {
        return Err(Error::Format(format!("unsupported dimensionality {d}")));
    }
    let c = read_u32(r)? as usize;
    let mut dims = Vec::with_capacity(d);
    for _ in 0..d {
        dims.push(read_u32(r)? as usize);
    }
    let mut spacing = Vec::with_capacity(d);
    for _ in 0..d {
        spacing.push(read_f32(r)? as f64);
    }
    Ok((GridSpec::with_spacing(&dims, &spacing)?, c))
}

fn read_values(r: &mut impl Read, count: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

pub fn write_scalar(path: impl AsRef<Path>, f: &ScalarField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, &f.grid, 1)?;
    write_values(&mut w, &f.data)?;
    w.flush()?;
    Ok(())
}

pub fn read_scalar(path: impl AsRef<Path>) -> Result<ScalarField> {
    let mut r = BufReader::new(File::open(path)?);
    let (grid, c) = read_header(&mut r)?;
    if c != 1 {
        return Err(Error::Format(format!("expected 1 component, found {c}")));
    }
    let data = read_values(&mut r, grid.len())?;
    ScalarField::new(grid, data)
}

fn write_components(path: impl AsRef<Path>, grid: &GridSpec, comps: &[Vec<f64>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, grid, comps.len())?;
    for comp in comps {
        write_values(&mut w, comp)?;
    }
    w.flush()?;
    Ok(())
}

fn read_components(path: impl AsRef<Path>) -> Result<(GridSpec, Vec<Vec<f64>>)> {
    let mut r = BufReader::new(File::open(path)?);
    let (grid, c) = read_header(&mut r)?;
    if c != grid.ndim() {
        return Err(Error::Format(format!(
            "expected {} components, found {c}",
            grid.ndim()
        )));
    }
    let mut comps = Vec::with_capacity(c);
    for _ in 0..c {
        comps.push(read_values(&mut r, grid.len())?);
    }
    Ok((grid, comps))
}

pub fn write_vector(path: impl AsRef<Path>, f: &VectorField) -> Result<()> {
    write_components(path, &f.grid, &f.comps)
}

pub fn read_vector(path: impl AsRef<Path>) -> Result<VectorField> {
    let (grid, comps) = read_components(path)?;
    VectorField::new(grid, comps)
}

pub fn write_map(path: impl AsRef<Path>, f: &DeformationMap) -> Result<()> {
    write_components(path, &f.grid, &f.positions)
}

pub fn read_map(path: impl AsRef<Path>) -> Result<DeformationMap> {
    let (grid, positions) = read_components(path)?;
    DeformationMap::new(grid, positions)
}

pub fn write_mask(path: impl AsRef<Path>, m: &Mask) -> Result<()> {
    let values: Vec<f64> = m.flags.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, &m.grid, 1)?;
    write_values(&mut w, &values)?;
    w.flush()?;
    Ok(())
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let f = read_scalar(path)?;
    let flags = f.data.iter().map(|&v| v != 0.0).collect();
    Mask::new(f.grid, flags)
}

/// Sidecar path: same stem, `.json` extension.
pub fn sidecar_path(path: impl AsRef<Path>) -> std::path::PathBuf {
    path.as_ref().with_extension("json")
}

pub fn write_meta(field_path: impl AsRef<Path>, meta: &FieldMeta) -> Result<()> {
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::Format(format!("metadata encode: {e}")))?;
    std::fs::write(sidecar_path(field_path), json)?;
    Ok(())
}

pub fn read_meta(field_path: impl AsRef<Path>) -> Result<FieldMeta> {
    let json = std::fs::read_to_string(sidecar_path(field_path))?;
    serde_json::from_str(&json).map_err(|e| Error::Format(format!("metadata decode: {e}")))
}
