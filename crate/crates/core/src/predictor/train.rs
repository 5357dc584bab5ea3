//! Adam training of the patch-wise momentum regressor.

use super::dataset::PatchDataset;
use super::net::{Architecture, Tensor};
use super::{NetConfig, PredictorModel, TrainConfig, TrainingFingerprint};
use crate::error::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Trained model plus the mean training loss of every epoch.
#[derive(Debug, Clone)]
pub struct TrainedPredictor {
    pub model: PredictorModel,
    pub epoch_losses: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let b1 = cfg.adam_beta1;
        let b2 = cfg.adam_beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Mean-squared-error loss over the momentum components of one patch and
/// its gradient with respect to the outputs.
fn mse_and_grad(outputs: &[Tensor], label: &[Vec<f64>]) -> (f64, Vec<Tensor>) {
    let d = outputs.len();
    let len = outputs[0].data.len();
    let norm = 1.0 / (d * len) as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(d);
    for (out, lab) in outputs.iter().zip(label) {
        let mut g = Tensor::zeros(out.channels, &out.spatial);
        for i in 0..len {
            let r = out.data[i] - lab[i];
            loss += r * r * norm;
            g.data[i] = 2.0 * r * norm;
        }
        grads.push(g);
    }
    (loss, grads)
}

/// (loss, gradient) of the batch mean loss over the given samples.
/// Work is split into a fixed number of chunks reduced in order, so the
/// result does not depend on the worker count.
fn batch_loss_and_grad(
    arch: &Architecture,
    params: &[f64],
    dataset: &PatchDataset,
    indices: &[usize],
    spatial: &[usize],
) -> (f64, Vec<f64>) {
    const CHUNKS: usize = 4;
    let chunk_size = indices.len().div_ceil(CHUNKS);
    let parts: Vec<(f64, Vec<f64>)> = indices
        .par_chunks(chunk_size.max(1))
        .map(|chunk| {
            let mut grads = vec![0.0; arch.param_len];
            let mut loss = 0.0;
            for &idx in chunk {
                let s = &dataset.samples[idx];
                let label = s.label.as_ref().expect("labeled dataset");
                let src = Tensor { channels: 1, spatial: spatial.to_vec(), data: s.source.clone() };
                let tgt = Tensor { channels: 1, spatial: spatial.to_vec(), data: s.target.clone() };
                loss += arch.forward_backward(
                    params,
                    &src,
                    &tgt,
                    |outputs| mse_and_grad(outputs, label),
                    &mut grads,
                );
            }
            (loss, grads)
        })
        .collect();
    let mut grads = vec![0.0; arch.param_len];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let scale = 1.0 / indices.len() as f64;
    for g in &mut grads {
        *g *= scale;
    }
    (loss * scale, grads)
}

/// Minimize the mean squared error between predicted and label momentum
/// patches with Adam. Bit-reproducible for a fixed seed: the shuffle is
/// seeded and gradient reduction order is fixed.
pub fn train(
    dataset: &PatchDataset,
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
) -> Result<TrainedPredictor> {
    net_cfg.validate()?;
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training dataset is empty".into()));
    }
    if dataset.samples.iter().any(|s| s.label.is_none()) {
        return Err(Error::InvalidParameter("training dataset has unlabeled samples".into()));
    }
    if dataset.patch_size != net_cfg.patch_size {
        return Err(Error::ShapeMismatch(format!(
            "dataset patch size {} != net config {}",
            dataset.patch_size, net_cfg.patch_size
        )));
    }

    let arch = Architecture::build(net_cfg);
    let mut params = arch.init_params(cfg.seed);
    let mut adam = Adam::new(arch.param_len);
    let spatial = vec![net_cfg.patch_size; net_cfg.dim];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = batch_loss_and_grad(&arch, &params, dataset, batch, &spatial);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: epoch,
                    context: "training loss became non-finite".into(),
                });
            }
            epoch_loss += loss * batch.len() as f64;
            adam.step(&mut params, &grads, cfg);
        }
        epoch_losses.push(epoch_loss / dataset.len() as f64);
    }

    Ok(TrainedPredictor {
        model: PredictorModel {
            net_config: net_cfg.clone(),
            params,
            fingerprint: TrainingFingerprint { seed: cfg.seed, epochs: cfg.epochs },
        },
        epoch_losses,
    })
}
