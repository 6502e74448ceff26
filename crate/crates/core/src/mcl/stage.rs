use serde::{Deserialize, Serialize};

use super::clusters::{accumulate_clusters, key_ids, ClusterAssignment};
use super::kmeans::kmeans;
use super::loss::masked_infonce;
use crate::encoder::{DualEncoder, FfnSnapshot, Phase, Tower};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng;
use crate::synth::PairedData;
use crate::tape::Tape;
use crate::tensor::{gather_rows, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub k_image: usize,
    pub k_text: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            k_image: 3,
            k_text: 3,
            epochs: 10,
            lr: 2e-3,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_image < 1 || self.k_text < 1 {
            return Err(Error::Config("cluster counts must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

/// Contiguous batches over a seeded permutation of `0..n`. A trailing batch
/// with fewer than two samples is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut r = rng::seeded(seed, 0x6261_0000 + epoch as u64);
    let perm = rng::permutation(&mut r, n);
    perm.chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Trains the model's non-frozen parameters with the key-masked contrastive
/// loss. Returns the mean batch loss of every epoch.
pub fn train_contrastive(
    model: &mut DualEncoder,
    data: &PairedData,
    keys: &[usize],
    epochs: usize,
    opt: AdamWConfig,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if keys.len() != data.len() {
        return Err(Error::Alignment(format!("{} keys for {} samples", keys.len(), data.len())));
    }
    let dtype = model.dtype();
    let (image, text) = (data.image.to_dtype(dtype), data.text.to_dtype(dtype));
    let mut optimizer = AdamW::new(opt);
    let mut trace = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let batches = epoch_batches(data.len(), batch_size, seed, epoch);
        let mut total = 0.0;
        for idx in &batches {
            let mut tape = Tape::new();
            let xi = tape.constant(gather_rows(&image, idx)?);
            let xt = tape.constant(gather_rows(&text, idx)?);
            let zi = model.forward(&mut tape, Tower::Image, xi)?;
            let zt = model.forward(&mut tape, Tower::Text, xt)?;
            let batch_keys: Vec<usize> = idx.iter().map(|&i| keys[i]).collect();
            let loss = masked_infonce(&mut tape, zi, zt, &batch_keys, model.config.temperature)?;
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

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub snapshot: FfnSnapshot,
    pub assignments: Vec<ClusterAssignment>,
    pub epoch_losses: Vec<f64>,
}

fn encode_all(model: &DualEncoder, data: &PairedData) -> Result<(Tensor, Tensor)> {
    Ok((model.encode_image(&data.image)?, model.encode_text(&data.text)?))
}

/// One cluster-then-contrast round: cluster the current embeddings, extend
/// the accumulated keys, train only the feed-forward sublayers with negatives
/// restricted to each anchor's accumulated cluster, and snapshot them.
pub fn run_mcl_stage(
    model: &mut DualEncoder,
    data: &PairedData,
    prev: &[ClusterAssignment],
    cfg: &StageConfig,
) -> Result<StageOutcome> {
    cfg.validate()?;
    let stage_id = prev.first().map_or(0, |a| a.labels.len()) + 1;
    let (zi, zt) = encode_all(model, data)?;
    let stage_seed = cfg.seed.wrapping_add(1000 * stage_id as u64);
    let img = kmeans(&zi, cfg.k_image, stage_seed)?;
    let txt = kmeans(&zt, cfg.k_text, stage_seed.wrapping_add(1))?;
    let assignments = accumulate_clusters(prev, &data.ids, &img.labels, &txt.labels)?;
    let keys = key_ids(&assignments);

    let restore = model.phase();
    model.set_phase(Phase::FfnOnly);
    let losses = train_contrastive(
        model,
        data,
        &keys,
        cfg.epochs,
        AdamWConfig::with_lr(cfg.lr),
        cfg.batch_size,
        stage_seed,
    );
    model.set_phase(restore);
    let epoch_losses = losses?;
    Ok(StageOutcome {
        snapshot: model.extract_ffn_snapshot(stage_id),
        assignments,
        epoch_losses,
    })
}

#[derive(Debug, Clone)]
pub struct MclOutcome {
    /// `num_stages + 1` snapshots; index 0 holds the untouched base FFNs.
    pub snapshots: Vec<FfnSnapshot>,
    pub assignments: Vec<ClusterAssignment>,
    pub stage_losses: Vec<Vec<f64>>,
}

pub fn run_mcl(
    model: &mut DualEncoder,
    data: &PairedData,
    num_stages: usize,
    cfg: &StageConfig,
) -> Result<MclOutcome> {
    if num_stages < 1 {
        return Err(Error::Config("num_stages must be at least 1".into()));
    }
    let mut snapshots = vec![model.extract_ffn_snapshot(0)];
    let mut assignments = Vec::new();
    let mut stage_losses = Vec::new();
    for _ in 0..num_stages {
        let out = run_mcl_stage(model, data, &assignments, cfg)?;
        snapshots.push(out.snapshot);
        assignments = out.assignments;
        stage_losses.push(out.epoch_losses);
    }
    Ok(MclOutcome {
        snapshots,
        assignments,
        stage_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::synth::{generate_dataset, AttributeSpec};
    use crate::tensor::DType;

    fn setup(n: usize) -> (DualEncoder, PairedData) {
        let d = generate_dataset(n, 0, &AttributeSpec::default(), 5).unwrap();
        let m = DualEncoder::new(EncoderConfig::default(), DType::F32, 5).unwrap();
        (m, PairedData::from_samples(&d.train))
    }

    #[test]
    fn batches_cover_each_index_once() {
        let b = epoch_batches(10, 4, 1, 0);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        // 9 = 4 + 4 + 1: the singleton is dropped
        assert_eq!(epoch_batches(9, 4, 1, 0).concat().len(), 8);
    }

    #[test]
    fn zero_epoch_stage_keeps_ffns_and_extends_keys() {
        let (mut m, data) = setup(120);
        let cfg = StageConfig {
            epochs: 0,
            ..StageConfig::default()
        };
        let before = m.extract_ffn_snapshot(0);
        let out = run_mcl_stage(&mut m, &data, &[], &cfg).unwrap();
        assert_eq!(out.snapshot.blocks, before.blocks);
        assert_eq!(out.snapshot.stage_id, 1);
        assert!(out.assignments.iter().all(|a| a.labels.len() == 1));
    }

    #[test]
    fn stage_changes_only_ffn_parameters() {
        let (mut m, data) = setup(160);
        let before = m.clone();
        let cfg = StageConfig {
            epochs: 2,
            batch_size: 32,
            ..StageConfig::default()
        };
        let out = run_mcl_stage(&mut m, &data, &[], &cfg).unwrap();
        let mut changed = false;
        for (id, p) in m.store.iter() {
            let old = before.store.get(id);
            if m.ffn_param_ids().contains(&id) {
                changed |= p.value != old.value;
            } else {
                assert_eq!(p.value.data(), old.value.data(), "{}", p.name);
            }
        }
        assert!(changed);
        assert_eq!(m.phase(), before.phase());
        assert_eq!(out.epoch_losses.len(), 2);
    }

    #[test]
    fn run_mcl_produces_stage_count_plus_one() {
        let (mut m, data) = setup(100);
        let base = m.extract_ffn_snapshot(0);
        let cfg = StageConfig {
            epochs: 1,
            batch_size: 50,
            ..StageConfig::default()
        };
        let out = run_mcl(&mut m, &data, 3, &cfg).unwrap();
        assert_eq!(out.snapshots.len(), 4);
        assert_eq!(out.snapshots[0], base);
        for (j, s) in out.snapshots.iter().enumerate() {
            assert_eq!(s.stage_id, j);
            for (a, b) in s.blocks.iter().zip(&base.blocks) {
                assert_eq!(a.w1.shape(), b.w1.shape());
                assert_eq!(a.b2.shape(), b.b2.shape());
            }
        }
        assert!(out.assignments.iter().all(|a| a.labels.len() == 3));
        assert!(run_mcl(&mut m, &data, 0, &cfg).is_err());
    }
}
