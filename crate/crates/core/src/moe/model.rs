//! Mixture-of-experts dual encoder assembled from feed-forward snapshots.
//!
//! Each dense block's feed-forward sublayer is replaced by `E` experts and a
//! `d×E` router. For hidden state `h = x + x·mixer` the block computes
//! `h + Σ_{j ∈ topK} w_j · FFN_j(h)`; unselected experts are never evaluated.

use std::path::Path;

use super::routing::{topk_indices, topk_mask};
use crate::checkpoint::{self, CheckpointKind, Manifest};
use crate::encoder::{check_batch, ffn, mix, DualEncoder, Encode, EncoderConfig, FfnIds, FfnSnapshot, Tower};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MoeBlock {
    pub mixer: ParamId,
    pub router: ParamId,
    pub experts: Vec<FfnIds>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routing {
    /// Top-K routing through the learned router.
    Learned,
    /// All weight on one expert in every block.
    Forced(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    pub config: EncoderConfig,
    pub store: ParamStore,
    pub image_in: ParamId,
    pub text_in: ParamId,
    /// Global block order, as in [`DualEncoder`].
    pub blocks: Vec<MoeBlock>,
    pub top_k: usize,
}

/// Result of one recorded tower pass.
#[derive(Debug, Clone)]
pub struct TowerOutput {
    pub embedding: Var,
    /// Router logits per block of the tower (empty under forced routing).
    pub router_logits: Vec<Var>,
}

impl MoeModel {
    pub fn num_experts(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.experts.len())
    }

    pub fn dtype(&self) -> DType {
        self.store.value(self.image_in).dtype()
    }

    pub fn router_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().map(|b| b.router).collect()
    }

    /// Freezes everything except the routers.
    pub fn freeze_non_router(&mut self) {
        self.store.freeze_all();
        for id in self.router_ids() {
            self.store.set_frozen(id, false);
        }
    }

    fn block_step(
        &self,
        tape: &mut Tape,
        block: &MoeBlock,
        x: Var,
        routing: Routing,
    ) -> Result<(Var, Option<Var>)> {
        let h = mix(tape, &self.store, block.mixer, x)?;
        if let Routing::Forced(j) = routing {
            let f = ffn(tape, &self.store, &block.experts[j], h)?;
            return Ok((tape.add(h, f)?, None));
        }
        let r = tape.param(&self.store, block.router);
        let logits = tape.matmul(h, r)?;
        let mask = topk_mask(tape.value(logits), self.top_k)?;
        let masked = tape.add_const(logits, &mask)?;
        let weights = tape.softmax_rows(masked)?;

        let n = tape.value(h).rows();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); block.experts.len()];
        for i in 0..n {
            for j in topk_indices(tape.value(logits).row(i), self.top_k) {
                members[j].push(i);
            }
        }
        let mut out = h;
        for (j, rows) in members.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let hj = tape.gather_rows(h, rows)?;
            let fj = ffn(tape, &self.store, &block.experts[j], hj)?;
            let coords: Vec<(usize, usize)> = rows.iter().map(|&i| (i, j)).collect();
            let wj = tape.pick(weights, &coords)?;
            let scaled = tape.mul_col(fj, wj)?;
            let placed = tape.scatter_rows(scaled, rows, n)?;
            out = tape.add(out, placed)?;
        }
        Ok((out, Some(logits)))
    }

    pub fn forward(&self, tape: &mut Tape, tower: Tower, batch: Var, routing: Routing) -> Result<TowerOutput> {
        check_batch(&self.config, tower, tape.value(batch))?;
        if let Routing::Forced(j) = routing {
            if j >= self.num_experts() {
                return Err(Error::Index {
                    index: j,
                    len: self.num_experts(),
                });
            }
        }
        let proj = match tower {
            Tower::Image => self.image_in,
            Tower::Text => self.text_in,
        };
        let p = tape.param(&self.store, proj);
        let mut x = tape.matmul(batch, p)?;
        let mut router_logits = Vec::new();
        for i in self.config.tower_blocks(tower) {
            let (next, logits) = self.block_step(tape, &self.blocks[i], x, routing)?;
            x = next;
            router_logits.extend(logits);
        }
        Ok(TowerOutput {
            embedding: tape.l2_normalize_rows(x)?,
            router_logits,
        })
    }

    pub fn encode_with(&self, tower: Tower, batch: &Tensor, routing: Routing) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.to_dtype(self.dtype()));
        let out = self.forward(&mut tape, tower, x, routing)?;
        Ok(tape.value(out.embedding).clone())
    }

    /// Router logits of every block of `tower` for a batch of raw inputs.
    pub fn router_logits(&self, tower: Tower, batch: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.to_dtype(self.dtype()));
        let out = self.forward(&mut tape, tower, x, Routing::Learned)?;
        Ok(out.router_logits.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// One MoE block applied to hidden states `x: n×d`.
    pub fn block_forward(&self, block: usize, x: &Tensor, routing: Routing) -> Result<Tensor> {
        let b = self.blocks.get(block).ok_or(Error::Index {
            index: block,
            len: self.blocks.len(),
        })?;
        if let Routing::Forced(j) = routing {
            if j >= b.experts.len() {
                return Err(Error::Index {
                    index: j,
                    len: b.experts.len(),
                });
            }
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.to_dtype(self.dtype()));
        let (out, _) = self.block_step(&mut tape, b, xv, routing)?;
        Ok(tape.value(out).clone())
    }

    /// View of the model that sends all routing weight to expert `j`.
    pub fn force_expert(&self, j: usize) -> Result<ForcedExpert<'_>> {
        if j >= self.num_experts() {
            return Err(Error::Index {
                index: j,
                len: self.num_experts(),
            });
        }
        Ok(ForcedExpert { model: self, expert: j })
    }

    /// Dense model carrying expert `j` of every block as its feed-forward layer.
    pub fn expert_as_dense(&self, j: usize) -> Result<DualEncoder> {
        self.force_expert(j)?;
        let mut dense = DualEncoder::new(self.config.clone(), self.dtype(), 0)?;
        dense.store.get_mut(dense.image_in).value = self.store.value(self.image_in).clone();
        dense.store.get_mut(dense.text_in).value = self.store.value(self.text_in).clone();
        for (db, mb) in dense.blocks.clone().iter().zip(&self.blocks) {
            dense.store.get_mut(db.mixer).value = self.store.value(mb.mixer).clone();
        }
        let snapshot = FfnSnapshot {
            stage_id: j,
            blocks: self.blocks.iter().map(|b| b.experts[j].weights(&self.store)).collect(),
        };
        dense.load_ffn_snapshot(&snapshot)?;
        dense.set_phase(crate::encoder::Phase::AllFrozen);
        Ok(dense)
    }

    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.shape().to_vec()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut manifest = Manifest::new(CheckpointKind::Moe, self.config.clone());
        manifest.num_experts = Some(self.num_experts());
        manifest.top_k = Some(self.top_k);
        let tensors: Vec<_> = self.store.iter().map(|(_, p)| (p.name.clone(), &p.value)).collect();
        checkpoint::write(path, manifest, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, tensors) = checkpoint::read(path)?;
        if manifest.kind != CheckpointKind::Moe {
            return Err(Error::CorruptManifest(format!(
                "expected a Moe checkpoint, found {:?}",
                manifest.kind
            )));
        }
        manifest
            .config
            .validate()
            .map_err(|e| Error::CorruptManifest(e.to_string()))?;
        let (Some(e), Some(k)) = (manifest.num_experts, manifest.top_k) else {
            return Err(Error::CorruptManifest("moe checkpoint without num_experts/top_k".into()));
        };
        if e < 1 || k < 1 || k > e {
            return Err(Error::CorruptManifest(format!("top_k {k} with {e} experts")));
        }
        let base = DualEncoder::new(manifest.config.clone(), DType::F32, 0)?;
        let snaps: Vec<_> = (0..e).map(|j| base.extract_ffn_snapshot(j)).collect();
        let mut model = build(&base, &snaps, k, 0)?;
        let values = checkpoint::match_layout(tensors, &model.layout())?;
        let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
        for (id, v) in ids.into_iter().zip(values) {
            model.store.get_mut(id).value = v;
        }
        Ok(model)
    }
}

impl Encode for MoeModel {
    fn encode(&self, tower: Tower, batch: &Tensor) -> Result<Tensor> {
        self.encode_with(tower, batch, Routing::Learned)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForcedExpert<'a> {
    pub model: &'a MoeModel,
    pub expert: usize,
}

impl Encode for ForcedExpert<'_> {
    fn encode(&self, tower: Tower, batch: &Tensor) -> Result<Tensor> {
        self.model.encode_with(tower, batch, Routing::Forced(self.expert))
    }
}

fn build(base: &DualEncoder, snapshots: &[FfnSnapshot], top_k: usize, seed: u64) -> Result<MoeModel> {
    let config = base.config.clone();
    let e = snapshots.len();
    if top_k < 1 || top_k > e {
        return Err(Error::Config(format!("top-k {top_k} outside 1..={e}")));
    }
    for (s, snap) in snapshots.iter().enumerate() {
        if snap.blocks.len() != config.num_blocks() {
            return Err(Error::Assembly {
                block: snap.blocks.len(),
                snapshot: s,
                reason: format!("snapshot covers {} blocks, model has {}", snap.blocks.len(), config.num_blocks()),
            });
        }
        for (i, w) in snap.blocks.iter().enumerate() {
            w.check_shapes(&config).map_err(|reason| Error::Assembly {
                block: i,
                snapshot: s,
                reason,
            })?;
        }
    }
    let dtype = base.dtype();
    let d = config.model_dim;
    let bound = 1.0 / (d as f64).sqrt();
    let mut r = rng::seeded(seed, 0x726f_7574);
    let mut store = ParamStore::new();
    let image_in = store.register("image_in", base.store.value(base.image_in).clone())?;
    let text_in = store.register("text_in", base.store.value(base.text_in).clone())?;
    let mut blocks = Vec::with_capacity(config.num_blocks());
    for (i, b) in base.blocks.iter().enumerate() {
        let mixer = store.register(format!("block_{i}.mixer"), base.store.value(b.mixer).clone())?;
        let router = store.register(format!("block_{i}.router"), rng::uniform(&mut r, d, e, bound, dtype))?;
        let mut experts = Vec::with_capacity(e);
        for (j, snap) in snapshots.iter().enumerate() {
            let w = &snap.blocks[i];
            let w = crate::encoder::FfnWeights {
                w1: w.w1.to_dtype(dtype),
                b1: w.b1.to_dtype(dtype),
                w2: w.w2.to_dtype(dtype),
                b2: w.b2.to_dtype(dtype),
            };
            experts.push(FfnIds::register(&mut store, &format!("block_{i}.expert_{j}"), w)?);
        }
        blocks.push(MoeBlock { mixer, router, experts });
    }
    let mut model = MoeModel {
        config,
        store,
        image_in,
        text_in,
        blocks,
        top_k,
    };
    model.freeze_non_router();
    Ok(model)
}

/// Uses snapshot `j` as expert `j` of every block. Routers are freshly
/// initialized; every other parameter is frozen.
pub fn assemble_moe(base: &DualEncoder, snapshots: &[FfnSnapshot], top_k: usize, seed: u64) -> Result<MoeModel> {
    if snapshots.len() < 2 {
        return Err(Error::Config(format!("need at least 2 snapshots, got {}", snapshots.len())));
    }
    build(base, snapshots, top_k, seed)
}

/// Sparse upcycling baseline: `num_experts` copies of the base model's own
/// feed-forward layers.
pub fn assemble_upcycled(base: &DualEncoder, num_experts: usize, top_k: usize, seed: u64) -> Result<MoeModel> {
    if num_experts < 2 {
        return Err(Error::Config(format!("need at least 2 experts, got {num_experts}")));
    }
    let snaps: Vec<_> = (0..num_experts).map(|j| base.extract_ffn_snapshot(j)).collect();
    build(base, &snaps, top_k, seed)
}
