//! Patch-wise learned momentum prediction: an encoder-decoder regressor
//! from (source, target) image patches to initial-momentum patches, plus a
//! correction network predicting the residual momentum from the source and
//! the warped-back target.

pub mod dataset;
pub mod io;
pub mod net;
pub mod train;

pub use dataset::{assemble_field, extract_patches, PatchDataset, PatchSample};
pub use io::{read_model, write_model};
pub use train::{train, TrainedPredictor};

use crate::error::{Error, Result};
use crate::field::{warp, Mask, ScalarField, VectorField, MAX_DIM};
use crate::kernel::KernelParams;
use crate::shooting::{shoot, ShootConfig};
use net::{Architecture, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Whether a model predicts the initial momentum or a correction to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelRole {
    Prediction,
    Correction,
}

/// Architecture and patch-extraction parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Per-axis patch width; must be odd.
    pub patch_size: usize,
    /// Sliding-window stride of the patch grid.
    pub stride: usize,
    /// Feature count of the first encoder block; doubles in the second.
    pub base_features: usize,
    /// 2 or 3 spatial dimensions.
    pub dim: usize,
    pub role: ModelRole,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { patch_size: 15, stride: 14, base_features: 64, dim: 3, role: ModelRole::Prediction }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "patch size must be odd, got {}",
                self.patch_size
            )));
        }
        if self.stride == 0 || self.stride > self.patch_size {
            return Err(Error::InvalidParameter(format!(
                "stride must satisfy 1 <= stride <= patch_size, got {}",
                self.stride
            )));
        }
        if !(2..=3).contains(&self.dim) {
            return Err(Error::InvalidParameter(format!("dim must be 2 or 3, got {}", self.dim)));
        }
        if self.base_features == 0 {
            return Err(Error::InvalidParameter("base_features must be >= 1".into()));
        }
        if self.patch_size < 7 {
            return Err(Error::InvalidParameter(
                "patch size must be >= 7 to survive two stride-2 stages".into(),
            ));
        }
        Ok(())
    }
}

/// Adam training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Patches per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidParameter("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter("learning rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Seed and epoch count a model was trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingFingerprint {
    pub seed: u64,
    pub epochs: usize,
}

/// Layered weights of the patch-wise encoder-decoder.
#[derive(Debug, Clone)]
pub struct PredictorModel {
    pub net_config: NetConfig,
    /// Flat parameter vector in declaration order.
    pub params: Vec<f64>,
    pub fingerprint: TrainingFingerprint,
}

impl PredictorModel {
    /// Freshly initialized (untrained) model.
    pub fn init(net_config: &NetConfig, seed: u64) -> Result<Self> {
        net_config.validate()?;
        let arch = Architecture::build(net_config);
        Ok(Self {
            net_config: net_config.clone(),
            params: arch.init_params(seed),
            fingerprint: TrainingFingerprint { seed, epochs: 0 },
        })
    }

    /// Model with every weight zero: forward output is identically zero.
    pub fn zeros(net_config: &NetConfig) -> Result<Self> {
        net_config.validate()?;
        let arch = Architecture::build(net_config);
        Ok(Self {
            net_config: net_config.clone(),
            params: vec![0.0; arch.param_len],
            fingerprint: TrainingFingerprint { seed: 0, epochs: 0 },
        })
    }
}

fn patch_tensor(data: &[f64], cfg: &NetConfig) -> Result<Tensor> {
    let expect = cfg.patch_size.pow(cfg.dim as u32);
    if data.len() != expect {
        return Err(Error::ShapeMismatch(format!(
            "patch has {} values, config wants {expect}",
            data.len()
        )));
    }
    Ok(Tensor { channels: 1, spatial: vec![cfg.patch_size; cfg.dim], data: data.to_vec() })
}

/// Deterministic forward pass on one patch pair; returns d momentum
/// component patches of the input spatial shape.
pub fn forward(
    model: &PredictorModel,
    source_patch: &[f64],
    target_patch: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let cfg = &model.net_config;
    cfg.validate()?;
    let src = patch_tensor(source_patch, cfg)?;
    let tgt = patch_tensor(target_patch, cfg)?;
    let arch = Architecture::build(cfg);
    let outputs = arch.forward(&model.params, &src, &tgt);
    Ok(outputs.into_iter().map(|t| t.data).collect())
}

/// Predict the full momentum field patch-by-patch: patches intersecting the
/// mask are predicted, overlaps averaged, uncovered voxels zero.
pub fn predict_momentum(
    model: &PredictorModel,
    source: &ScalarField,
    target: &ScalarField,
    mask: Option<&Mask>,
) -> Result<VectorField> {
    let cfg = &model.net_config;
    let dataset = extract_patches(source, target, None, mask, cfg)?;
    let arch = Architecture::build(cfg);
    let spatial = vec![cfg.patch_size; cfg.dim];
    let predictions: Vec<([usize; MAX_DIM], Vec<Vec<f64>>)> = dataset
        .samples
        .par_iter()
        .map(|s| {
            let src = Tensor { channels: 1, spatial: spatial.clone(), data: s.source.clone() };
            let tgt = Tensor { channels: 1, spatial: spatial.clone(), data: s.target.clone() };
            let out = arch.forward(&model.params, &src, &tgt);
            (s.origin, out.into_iter().map(|t| t.data).collect())
        })
        .collect();
    Ok(assemble_field(&source.grid, cfg.patch_size, &predictions))
}

/// Prediction followed by one correction pass: shoot the predicted
/// momentum, pull the target back toward the source through the forward
/// map, predict the residual momentum from (source, warped-back target),
/// and return the sum.
pub fn predict_with_correction(
    prediction: &PredictorModel,
    correction: &PredictorModel,
    source: &ScalarField,
    target: &ScalarField,
    mask: Option<&Mask>,
    shoot_cfg: &ShootConfig,
    kernel: &KernelParams,
) -> Result<VectorField> {
    if prediction.net_config.patch_size != correction.net_config.patch_size
        || prediction.net_config.dim != correction.net_config.dim
    {
        return Err(Error::ShapeMismatch(
            "prediction and correction models have different patch geometry".into(),
        ));
    }
    let m_p = predict_momentum(prediction, source, target, mask)?;
    let traj = shoot(source, &m_p, 1.0, shoot_cfg, kernel)?;
    let warped_back = warp(target, &traj.forward_map)?;
    let m_c = predict_momentum(correction, source, &warped_back, mask)?;
    m_p.add(&m_c)
}

/// One labeled registration case for training or correction-set building.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub source: ScalarField,
    pub target: ScalarField,
    /// Unit-time initial momentum (optimization result or synthetic truth).
    pub momentum: VectorField,
    pub mask: Option<Mask>,
}

/// Build the correction-network dataset: inputs are (source, warped-back
/// target) under the prediction model's momentum; labels are the residual
/// ground-truth-minus-predicted momentum patches.
pub fn make_correction_dataset(
    prediction: &PredictorModel,
    pairs: &[TrainingPair],
    shoot_cfg: &ShootConfig,
    kernel: &KernelParams,
) -> Result<PatchDataset> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no training pairs".into()));
    }
    let cfg = &prediction.net_config;
    let mut datasets = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let m_p = predict_momentum(prediction, &pair.source, &pair.target, pair.mask.as_ref())?;
        let traj = shoot(&pair.source, &m_p, 1.0, shoot_cfg, kernel)?;
        let warped_back = warp(&pair.target, &traj.forward_map)?;
        let residual = pair.momentum.sub(&m_p)?;
        datasets.push(extract_patches(
            &pair.source,
            &warped_back,
            Some(&residual),
            pair.mask.as_ref(),
            cfg,
        )?);
    }
    PatchDataset::merge(datasets)
}

#[cfg(test)]
mod tests;
