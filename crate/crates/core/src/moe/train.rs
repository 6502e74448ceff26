use serde::{Deserialize, Serialize};

use super::balance::balancing_loss;
use super::model::{MoeModel, Routing};
use crate::encoder::Tower;
use crate::error::{Error, Result};
use crate::mcl::infonce;
use crate::mcl::stage::epoch_batches;
use crate::optim::{AdamW, AdamWConfig};
use crate::synth::PairedData;
use crate::tape::{Tape, Var};
use crate::tensor::gather_rows;

pub const DEFAULT_ALPHA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RouterTrainConfig {
    fn default() -> Self {
        RouterTrainConfig {
            epochs: 10,
            lr: 1e-2,
            alpha: DEFAULT_ALPHA,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl RouterTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config("alpha must be non-negative".into()));
        }
        Ok(())
    }
}

/// Plain contrastive loss plus `alpha` times the mean balancing loss of the
/// given per-block router logits.
pub fn total_loss(
    tape: &mut Tape,
    img: Var,
    txt: Var,
    temperature: f64,
    router_logits: &[Var],
    alpha: f64,
) -> Result<Var> {
    let clip = infonce(tape, img, txt, temperature)?;
    if router_logits.is_empty() || alpha == 0.0 {
        return Ok(clip);
    }
    let mut sum: Option<Var> = None;
    for &l in router_logits {
        let b = balancing_loss(tape, l)?;
        sum = Some(match sum {
            Some(s) => tape.add(s, b)?,
            None => b,
        });
    }
    let reg = tape.scale(sum.expect("non-empty"), alpha / router_logits.len() as f64);
    tape.add(clip, reg)
}

/// Recorded forward pass of both towers plus the total loss.
pub fn batch_loss(model: &MoeModel, tape: &mut Tape, data: &PairedData, idx: &[usize], alpha: f64) -> Result<Var> {
    let dtype = model.dtype();
    let xi = tape.constant(gather_rows(&data.image, idx)?.to_dtype(dtype));
    let xt = tape.constant(gather_rows(&data.text, idx)?.to_dtype(dtype));
    let oi = model.forward(tape, Tower::Image, xi, Routing::Learned)?;
    let ot = model.forward(tape, Tower::Text, xt, Routing::Learned)?;
    let logits: Vec<Var> = oi.router_logits.iter().chain(&ot.router_logits).copied().collect();
    total_loss(tape, oi.embedding, ot.embedding, model.config.temperature, &logits, alpha)
}

/// Fine-tunes the routers with every other parameter frozen. Returns the mean
/// batch loss of every epoch.
pub fn train_router(model: &mut MoeModel, data: &PairedData, cfg: &RouterTrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    model.freeze_non_router();
    let mut optimizer = AdamW::new(AdamWConfig::with_lr(cfg.lr));
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch);
        let mut total = 0.0;
        for idx in &batches {
            let mut tape = Tape::new();
            let loss = batch_loss(model, &mut tape, data, idx, cfg.alpha)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::LossDivergence { epoch });
            }
            total += value;
            let grads = tape.backward(loss)?;
            optimizer.step(&mut model.store, &grads)?;
        }
        trace.push(total / batches.len().max(1) as f64);
    }
    Ok(trace)
}
