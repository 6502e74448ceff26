#![allow(dead_code)]

use dmu::encoder::{DualEncoder, EncoderConfig, FfnSnapshot};
use dmu::moe::{assemble_moe, MoeModel};
use dmu::rng;
use dmu::tensor::{l2_normalize_rows, DType, Tensor};

/// Per-anchor evaluation of the key-restricted contrastive loss, written
/// directly from the definition with scalar loops.
pub fn brute_force_masked_infonce(img: &Tensor, txt: &Tensor, keys: &[usize], tau: f64) -> f64 {
    let n = img.rows();
    let sim = |a: &Tensor, i: usize, b: &Tensor, j: usize| -> f64 {
        a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum::<f64>() / tau
    };
    let mut total = 0.0;
    for (q, g) in [(img, txt), (txt, img)] {
        let mut dir = 0.0;
        for a in 0..n {
            let pos = sim(q, a, g, a);
            let negs: Vec<f64> = (0..n)
                .filter(|&b| b != a && keys[b] == keys[a])
                .map(|b| sim(q, a, g, b))
                .collect();
            if negs.is_empty() {
                continue;
            }
            let m = negs.iter().copied().fold(pos, f64::max);
            let z = (pos - m).exp() + negs.iter().map(|s| (s - m).exp()).sum::<f64>();
            dir += -(pos - m) + z.ln();
        }
        total += dir / n as f64;
    }
    0.5 * total
}

pub fn random_unit_rows(n: usize, d: usize, seed: u64) -> Tensor {
    let raw = rng::uniform(&mut rng::seeded(seed, 77), n, d, 1.0, DType::F64);
    l2_normalize_rows(&raw).unwrap()
}

pub fn small_config() -> EncoderConfig {
    EncoderConfig {
        input_dim_image: 6,
        input_dim_text: 5,
        model_dim: 8,
        ffn_hidden: 12,
        blocks_image: 2,
        blocks_text: 2,
        temperature: 0.07,
    }
}

/// Snapshots taken from differently seeded encoders, snapshot 0 from `base`.
pub fn distinct_snapshots(base: &DualEncoder, e: usize) -> Vec<FfnSnapshot> {
    let mut out = vec![base.extract_ffn_snapshot(0)];
    for j in 1..e {
        let other = DualEncoder::new(base.config.clone(), base.dtype(), 1000 + j as u64).unwrap();
        out.push(other.extract_ffn_snapshot(j));
    }
    out
}

pub fn f64_moe(config: EncoderConfig, e: usize, k: usize, seed: u64) -> (DualEncoder, MoeModel) {
    let base = DualEncoder::new(config, DType::F64, seed).unwrap();
    let snaps = distinct_snapshots(&base, e);
    let moe = assemble_moe(&base, &snaps, k, seed + 1).unwrap();
    (base, moe)
}
