//! The dual encoder: two towers of residual blocks, each a frozen linear mixer
//! followed by a two-layer GELU feed-forward sublayer.
//!
//! Blocks are indexed globally: image blocks occupy `0..A`, text blocks
//! `A..A+B`. That index is also the `block_<i>` prefix in parameter names.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub input_dim_image: usize,
    pub input_dim_text: usize,
    pub model_dim: usize,
    pub ffn_hidden: usize,
    pub blocks_image: usize,
    pub blocks_text: usize,
    pub temperature: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim_image: 24,
            input_dim_text: 24,
            model_dim: 32,
            ffn_hidden: 64,
            blocks_image: 2,
            blocks_text: 2,
            temperature: 0.07,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks_image < 1 || self.blocks_text < 1 {
            return Err(Error::Config("each tower needs at least one block".into()));
        }
        if self.model_dim < 2 {
            return Err(Error::Config("model_dim must be at least 2".into()));
        }
        if self.ffn_hidden < self.model_dim {
            return Err(Error::Config("ffn_hidden must be >= model_dim".into()));
        }
        if self.input_dim_image == 0 || self.input_dim_text == 0 {
            return Err(Error::Config("input dims must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks_image + self.blocks_text
    }

    /// Global block indices of a tower.
    pub fn tower_blocks(&self, tower: Tower) -> std::ops::Range<usize> {
        match tower {
            Tower::Image => 0..self.blocks_image,
            Tower::Text => self.blocks_image..self.num_blocks(),
        }
    }

    pub fn input_dim(&self, tower: Tower) -> usize {
        match tower {
            Tower::Image => self.input_dim_image,
            Tower::Text => self.input_dim_text,
        }
    }

    /// Scalar count of one block's feed-forward parameters.
    pub fn ffn_param_count(&self) -> usize {
        let (d, h) = (self.model_dim, self.ffn_hidden);
        d * h + h + h * d + d
    }

    pub fn ffn_shapes(&self) -> [(&'static str, [usize; 2]); 4] {
        let (d, h) = (self.model_dim, self.ffn_hidden);
        [("w1", [d, h]), ("b1", [1, h]), ("w2", [h, d]), ("b2", [1, d])]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tower {
    Image,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Input projections and feed-forward sublayers train; mixers stay frozen.
    BaseTraining,
    FfnOnly,
    AllFrozen,
}

/// Parameter handles of one feed-forward sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnIds {
    pub fn all(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub(crate) fn register(
        store: &mut ParamStore,
        prefix: &str,
        weights: FfnWeights,
    ) -> Result<FfnIds> {
        Ok(FfnIds {
            w1: store.register(format!("{prefix}.w1"), weights.w1)?,
            b1: store.register(format!("{prefix}.b1"), weights.b1)?,
            w2: store.register(format!("{prefix}.w2"), weights.w2)?,
            b2: store.register(format!("{prefix}.b2"), weights.b2)?,
        })
    }

    pub fn weights(&self, store: &ParamStore) -> FfnWeights {
        FfnWeights {
            w1: store.value(self.w1).clone(),
            b1: store.value(self.b1).clone(),
            w2: store.value(self.w2).clone(),
            b2: store.value(self.b2).clone(),
        }
    }
}

/// Owned copy of one feed-forward sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FfnWeights {
    pub fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    pub fn zeros(config: &EncoderConfig, dtype: DType) -> Self {
        let (d, h) = (config.model_dim, config.ffn_hidden);
        FfnWeights {
            w1: Tensor::zeros(&[d, h], dtype),
            b1: Tensor::zeros(&[1, h], dtype),
            w2: Tensor::zeros(&[h, d], dtype),
            b2: Tensor::zeros(&[1, d], dtype),
        }
    }

    fn random(config: &EncoderConfig, rng: &mut impl rand::Rng, dtype: DType) -> Self {
        let (d, h) = (config.model_dim, config.ffn_hidden);
        FfnWeights {
            w1: rng::uniform(rng, d, h, 1.0 / (d as f64).sqrt(), dtype),
            b1: Tensor::zeros(&[1, h], dtype),
            w2: rng::uniform(rng, h, d, 1.0 / (h as f64).sqrt(), dtype),
            b2: Tensor::zeros(&[1, d], dtype),
        }
    }

    /// Shape check against a config; names the offending tensor.
    pub fn check_shapes(&self, config: &EncoderConfig) -> std::result::Result<(), String> {
        for ((name, t), (_, expected)) in self.tensors().into_iter().zip(config.ffn_shapes()) {
            if t.shape() != expected {
                return Err(format!("{name} has shape {:?}, expected {expected:?}", t.shape()));
            }
        }
        Ok(())
    }
}

/// Frozen copy of every feed-forward sublayer of both towers after one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnSnapshot {
    pub stage_id: usize,
    /// One entry per global block index.
    pub blocks: Vec<FfnWeights>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockIds {
    pub mixer: ParamId,
    pub ffn: FfnIds,
}

/// `h = x + x·mixer`
pub(crate) fn mix(tape: &mut Tape, store: &ParamStore, mixer: ParamId, x: Var) -> Result<Var> {
    let m = tape.param(store, mixer);
    let xm = tape.matmul(x, m)?;
    tape.add(x, xm)
}

/// `W2·gelu(W1·h + b1) + b2`, without the residual.
pub(crate) fn ffn(tape: &mut Tape, store: &ParamStore, ids: &FfnIds, h: Var) -> Result<Var> {
    let w1 = tape.param(store, ids.w1);
    let b1 = tape.param(store, ids.b1);
    let w2 = tape.param(store, ids.w2);
    let b2 = tape.param(store, ids.b2);
    let z = tape.matmul(h, w1)?;
    let z = tape.add_row(z, b1)?;
    let a = tape.gelu(z);
    let o = tape.matmul(a, w2)?;
    tape.add_row(o, b2)
}

pub(crate) fn check_batch(config: &EncoderConfig, tower: Tower, batch: &Tensor) -> Result<()> {
    let want = config.input_dim(tower);
    if batch.shape().len() != 2 || batch.cols() != want {
        return Err(Error::Config(format!(
            "{tower:?} batch has shape {:?}, expected n×{want}",
            batch.shape()
        )));
    }
    Ok(())
}

/// Anything that maps a tower's raw inputs to unit-norm embeddings.
pub trait Encode {
    fn encode(&self, tower: Tower, batch: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub config: EncoderConfig,
    pub store: ParamStore,
    pub image_in: ParamId,
    pub text_in: ParamId,
    /// Global block order: image blocks then text blocks.
    pub blocks: Vec<BlockIds>,
    phase: Phase,
}

impl DualEncoder {
    /// Freshly initialized model in the [`Phase::BaseTraining`] phase.
    pub fn new(config: EncoderConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed, 0x656e_636f);
        let d = config.model_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let mut store = ParamStore::new();
        let image_in = store.register(
            "image_in",
            rng::uniform(&mut rng, config.input_dim_image, d, bound, dtype),
        )?;
        let text_in = store.register(
            "text_in",
            rng::uniform(&mut rng, config.input_dim_text, d, bound, dtype),
        )?;
        let mut blocks = Vec::with_capacity(config.num_blocks());
        for i in 0..config.num_blocks() {
            let mixer = store.register(
                format!("block_{i}.mixer"),
                rng::uniform(&mut rng, d, d, bound, dtype),
            )?;
            let weights = FfnWeights::random(&config, &mut rng, dtype);
            let ffn = FfnIds::register(&mut store, &format!("block_{i}.ffn"), weights)?;
            blocks.push(BlockIds { mixer, ffn });
        }
        let mut model = DualEncoder {
            config,
            store,
            image_in,
            text_in,
            blocks,
            phase: Phase::BaseTraining,
        };
        model.set_phase(Phase::BaseTraining);
        Ok(model)
    }

    pub fn dtype(&self) -> DType {
        self.store.value(self.image_in).dtype()
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
        self.store.freeze_all();
        let projections_trainable = phase == Phase::BaseTraining;
        let ffn_trainable = matches!(phase, Phase::BaseTraining | Phase::FfnOnly);
        self.store.set_frozen(self.image_in, !projections_trainable);
        self.store.set_frozen(self.text_in, !projections_trainable);
        for b in &self.blocks {
            for id in b.ffn.all() {
                self.store.set_frozen(id, !ffn_trainable);
            }
        }
    }

    pub fn ffn_param_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| b.ffn.all()).collect()
    }

    /// Records one tower's forward pass; the result is row-normalized.
    pub fn forward(&self, tape: &mut Tape, tower: Tower, batch: Var) -> Result<Var> {
        check_batch(&self.config, tower, tape.value(batch))?;
        let proj = match tower {
            Tower::Image => self.image_in,
            Tower::Text => self.text_in,
        };
        let p = tape.param(&self.store, proj);
        let mut x = tape.matmul(batch, p)?;
        for i in self.config.tower_blocks(tower) {
            let b = &self.blocks[i];
            let h = mix(tape, &self.store, b.mixer, x)?;
            let f = ffn(tape, &self.store, &b.ffn, h)?;
            x = tape.add(h, f)?;
        }
        tape.l2_normalize_rows(x)
    }

    pub fn encode(&self, tower: Tower, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.to_dtype(self.dtype()));
        let out = self.forward(&mut tape, tower, x)?;
        Ok(tape.value(out).clone())
    }

    /// One residual block applied to hidden states `x: n×d`.
    pub fn block_forward(&self, block: usize, x: &Tensor) -> Result<Tensor> {
        let b = self.blocks.get(block).ok_or(Error::Index {
            index: block,
            len: self.blocks.len(),
        })?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.to_dtype(self.dtype()));
        let h = mix(&mut tape, &self.store, b.mixer, xv)?;
        let f = ffn(&mut tape, &self.store, &b.ffn, h)?;
        let out = tape.add(h, f)?;
        Ok(tape.value(out).clone())
    }

    pub fn encode_image(&self, batch: &Tensor) -> Result<Tensor> {
        self.encode(Tower::Image, batch)
    }

    pub fn encode_text(&self, batch: &Tensor) -> Result<Tensor> {
        self.encode(Tower::Text, batch)
    }

    pub fn extract_ffn_snapshot(&self, stage_id: usize) -> FfnSnapshot {
        FfnSnapshot {
            stage_id,
            blocks: self.blocks.iter().map(|b| b.ffn.weights(&self.store)).collect(),
        }
    }

    /// Overwrites the live feed-forward weights with a snapshot's.
    pub fn load_ffn_snapshot(&mut self, snapshot: &FfnSnapshot) -> Result<()> {
        if snapshot.blocks.len() != self.blocks.len() {
            return Err(Error::Assembly {
                block: snapshot.blocks.len(),
                snapshot: snapshot.stage_id,
                reason: format!("snapshot covers {} blocks, model has {}", snapshot.blocks.len(), self.blocks.len()),
            });
        }
        for (i, (b, w)) in self.blocks.iter().zip(&snapshot.blocks).enumerate() {
            w.check_shapes(&self.config).map_err(|reason| Error::Assembly {
                block: i,
                snapshot: snapshot.stage_id,
                reason,
            })?;
            let dtype = self.store.value(b.ffn.w1).dtype();
            for (id, t) in b.ffn.all().into_iter().zip([&w.w1, &w.b1, &w.w2, &w.b2]) {
                self.store.get_mut(id).value = t.to_dtype(dtype);
            }
        }
        Ok(())
    }

    /// Model with the same frozen weights and the given snapshot's feed-forward layers.
    pub fn with_snapshot(&self, snapshot: &FfnSnapshot) -> Result<Self> {
        let mut m = self.clone();
        m.load_ffn_snapshot(snapshot)?;
        Ok(m)
    }
}

impl Encode for DualEncoder {
    fn encode(&self, tower: Tower, batch: &Tensor) -> Result<Tensor> {
        DualEncoder::encode(self, tower, batch)
    }
}
