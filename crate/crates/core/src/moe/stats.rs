use std::path::Path;

use serde::{Deserialize, Serialize};

use super::balance::first_choice_fractions;
use super::model::MoeModel;
use super::routing::topk_indices;
use crate::encoder::Tower;
use crate::error::{Error, Result};
use crate::synth::PairedData;
use crate::tensor::softmax_rows;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRouting {
    pub block: usize,
    /// Share of (sample, choice-slot) pairs among the top-K picks.
    pub topk_fraction: Vec<f64>,
    /// Share of samples whose first choice is each expert.
    pub first_choice_fraction: Vec<f64>,
    pub mean_probability: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub num_experts: usize,
    pub top_k: usize,
    pub blocks: Vec<BlockRouting>,
}

impl RoutingStats {
    pub fn min_topk_fraction(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.topk_fraction.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["block", "expert", "topk_fraction", "mean_probability"])
            .map_err(|e| csv_err(path, e))?;
        for b in &self.blocks {
            for (j, (f, p)) in b.topk_fraction.iter().zip(&b.mean_probability).enumerate() {
                w.write_record([b.block.to_string(), j.to_string(), f.to_string(), p.to_string()])
                    .map_err(|e| csv_err(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Per-block routing statistics over a whole dataset, image blocks first.
pub fn routing_stats(model: &MoeModel, data: &PairedData) -> Result<RoutingStats> {
    let e = model.num_experts();
    let k = model.top_k;
    let mut logits = model.router_logits(Tower::Image, &data.image)?;
    logits.extend(model.router_logits(Tower::Text, &data.text)?);
    let mut blocks = Vec::with_capacity(logits.len());
    for (block, l) in logits.iter().enumerate() {
        let n = l.rows();
        let mut counts = vec![0usize; e];
        for i in 0..n {
            for j in topk_indices(l.row(i), k) {
                counts[j] += 1;
            }
        }
        let slots = (n * k).max(1) as f64;
        let probs = softmax_rows(l)?;
        let mean_probability = (0..e)
            .map(|j| (0..n).map(|i| probs.get(i, j)).sum::<f64>() / n.max(1) as f64)
            .collect();
        blocks.push(BlockRouting {
            block,
            topk_fraction: counts.iter().map(|&c| c as f64 / slots).collect(),
            first_choice_fraction: first_choice_fractions(l),
            mean_probability,
        });
    }
    Ok(RoutingStats {
        num_experts: e,
        top_k: k,
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{DualEncoder, EncoderConfig};
    use crate::moe::assemble_upcycled;
    use crate::synth::{generate_dataset, AttributeSpec};
    use crate::tensor::DType;

    fn data() -> PairedData {
        PairedData::from_samples(&generate_dataset(64, 0, &AttributeSpec::default(), 1).unwrap().train)
    }

    #[test]
    fn full_k_gives_exact_uniform_share() {
        let base = DualEncoder::new(EncoderConfig::default(), DType::F32, 1).unwrap();
        let moe = assemble_upcycled(&base, 4, 4, 2).unwrap();
        let s = routing_stats(&moe, &data()).unwrap();
        assert_eq!(s.blocks.len(), 4);
        for b in &s.blocks {
            assert_eq!(b.topk_fraction, vec![0.25; 4]);
        }
    }

    #[test]
    fn fractions_sum_to_one() {
        let base = DualEncoder::new(EncoderConfig::default(), DType::F32, 1).unwrap();
        let moe = assemble_upcycled(&base, 4, 2, 2).unwrap();
        let s = routing_stats(&moe, &data()).unwrap();
        for b in &s.blocks {
            assert!((b.topk_fraction.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((b.first_choice_fraction.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((b.mean_probability.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(b.topk_fraction.iter().chain(&b.mean_probability).all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn csv_header_and_rows() {
        let base = DualEncoder::new(EncoderConfig::default(), DType::F32, 1).unwrap();
        let moe = assemble_upcycled(&base, 3, 2, 2).unwrap();
        let s = routing_stats(&moe, &data()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        s.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("block,expert,topk_fraction,mean_probability"));
        assert_eq!(lines.count(), 4 * 3);
    }
}
