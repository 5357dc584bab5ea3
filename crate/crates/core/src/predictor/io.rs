//! Model checkpoint format: magic, JSON header (net config + training
//! fingerprint), then the flat parameter vector as little-endian f32 in
//! declaration order.

use super::{NetConfig, PredictorModel, TrainingFingerprint};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"GEOPRED1";

#[derive(Serialize, Deserialize)]
struct Header {
    net_config: NetConfig,
    fingerprint: TrainingFingerprint,
    param_len: usize,
}

pub fn write_model(path: impl AsRef<Path>, model: &PredictorModel) -> Result<()> {
    let header = Header {
        net_config: model.net_config.clone(),
        fingerprint: model.fingerprint,
        param_len: model.params.len(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(model.params.len() * 4);
    for &p in &model.params {
        buf.extend_from_slice(&(p as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<PredictorModel> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad model checkpoint magic".into()));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let json_len = u32::from_le_bytes(len_bytes) as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| Error::Format(e.to_string()))?;
    header.net_config.validate()?;
    let expected = super::net::Architecture::build(&header.net_config).param_len;
    if header.param_len != expected {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, architecture wants {expected}",
            header.param_len
        )));
    }
    let mut buf = vec![0u8; header.param_len * 4];
    r.read_exact(&mut buf)?;
    let params = buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(PredictorModel {
        net_config: header.net_config,
        params,
        fingerprint: header.fingerprint,
    })
}
