//! Retrieval and linear-probe metrics.

use serde::{Deserialize, Serialize};

use crate::encoder::{Encode, Tower};
use crate::error::{Error, Result};
use crate::rng;
use crate::synth::PairedData;
use crate::tensor::{matmul_t, Tensor};

pub const PROBE_ITERATIONS: usize = 500;
pub const PROBE_LR: f64 = 0.5;
pub const PROBE_TRAIN_FRACTION: f64 = 0.8;
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Fraction of queries whose positive (the same row of `gallery`) ranks in
/// the top `k` by cosine similarity. Equal scores rank the lower gallery
/// index first.
pub fn recall_at_k(query: &Tensor, gallery: &Tensor, k: usize) -> Result<f64> {
    let n = query.rows();
    if gallery.rows() != n || gallery.cols() != query.cols() {
        return Err(Error::Dimension {
            op: "recall_at_k",
            left: query.shape().to_vec(),
            right: gallery.shape().to_vec(),
        });
    }
    if k == 0 || k > n {
        return Err(Error::Contract(format!("recall@{k} over {n} candidates")));
    }
    let sims = matmul_t(query, gallery)?;
    let hits = (0..n)
        .filter(|&i| {
            let row = sims.row(i);
            let pos = row[i];
            let ahead = row
                .iter()
                .enumerate()
                .filter(|&(j, &s)| s > pos || (s == pos && j < i))
                .count();
            ahead < k
        })
        .count();
    Ok(hits as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recalls {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl Recalls {
    pub fn compute(query: &Tensor, gallery: &Tensor) -> Result<Recalls> {
        let n = query.rows();
        let at = |k: usize| recall_at_k(query, gallery, k.min(n));
        Ok(Recalls {
            r1: at(RECALL_KS[0])?,
            r5: at(RECALL_KS[1])?,
            r10: at(RECALL_KS[2])?,
        })
    }

    pub fn is_monotone(&self) -> bool {
        self.r1 <= self.r5 && self.r5 <= self.r10
    }

    pub fn in_unit_interval(&self) -> bool {
        [self.r1, self.r5, self.r10].iter().all(|v| (0.0..=1.0).contains(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub i2t: Recalls,
    pub t2i: Recalls,
}

impl Retrieval {
    pub fn from_embeddings(img: &Tensor, txt: &Tensor) -> Result<Retrieval> {
        Ok(Retrieval {
            i2t: Recalls::compute(img, txt)?,
            t2i: Recalls::compute(txt, img)?,
        })
    }

    pub fn evaluate(model: &impl Encode, data: &PairedData) -> Result<Retrieval> {
        let img = model.encode(Tower::Image, &data.image)?;
        let txt = model.encode(Tower::Text, &data.text)?;
        Retrieval::from_embeddings(&img, &txt)
    }

    /// Recall@1 averaged over both directions.
    pub fn mean_r1(&self) -> f64 {
        0.5 * (self.i2t.r1 + self.t2i.r1)
    }

    pub fn all(&self) -> [f64; 6] {
        [self.i2t.r1, self.i2t.r5, self.i2t.r10, self.t2i.r1, self.t2i.r5, self.t2i.r10]
    }
}

/// Held-out accuracy of a multinomial logistic regression fit by full-batch
/// gradient descent on a seeded 80/20 split.
pub fn linear_probe(embeddings: &Tensor, labels: &[usize], n_classes: usize, seed: u64) -> Result<f64> {
    let (n, d) = (embeddings.rows(), embeddings.cols());
    if labels.len() != n {
        return Err(Error::Alignment(format!("{} labels for {n} rows", labels.len())));
    }
    if n_classes < 2 || n < 5 * n_classes {
        return Err(Error::Contract(format!("probe needs n ≥ 5·classes, got n={n}, classes={n_classes}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Index {
            index: bad,
            len: n_classes,
        });
    }
    let perm = rng::permutation(&mut rng::seeded(seed, 0x7072_6f62), n);
    let n_train = ((n as f64) * PROBE_TRAIN_FRACTION).round() as usize;
    let (train, test) = perm.split_at(n_train);
    let mut present = vec![false; n_classes];
    for &i in train {
        present[labels[i]] = true;
    }
    if let Some(class) = present.iter().position(|&p| !p) {
        return Err(Error::Stratification { class });
    }

    let x = embeddings.data();
    let c = n_classes;
    let mut w = vec![0.0; d * c];
    let mut b = vec![0.0; c];
    let mut logits = vec![0.0; c];
    let mut gw = vec![0.0; d * c];
    let mut gb = vec![0.0; c];
    let scale = 1.0 / train.len() as f64;
    for _ in 0..PROBE_ITERATIONS {
        gw.iter_mut().for_each(|v| *v = 0.0);
        gb.iter_mut().for_each(|v| *v = 0.0);
        for &i in train {
            let xi = &x[i * d..(i + 1) * d];
            scores(xi, &w, &b, &mut logits);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in &mut logits {
                *l = (*l - max).exp();
                z += *l;
            }
            for (k, l) in logits.iter_mut().enumerate() {
                *l /= z;
                if k == labels[i] {
                    *l -= 1.0;
                }
            }
            for (r, &xv) in xi.iter().enumerate() {
                for k in 0..c {
                    gw[r * c + k] += xv * logits[k];
                }
            }
            for k in 0..c {
                gb[k] += logits[k];
            }
        }
        for (wv, g) in w.iter_mut().zip(&gw) {
            *wv -= PROBE_LR * g * scale;
        }
        for (bv, g) in b.iter_mut().zip(&gb) {
            *bv -= PROBE_LR * g * scale;
        }
    }

    let correct = test
        .iter()
        .filter(|&&i| {
            scores(&x[i * d..(i + 1) * d], &w, &b, &mut logits);
            crate::tensor::argmax(&logits) == labels[i]
        })
        .count();
    Ok(correct as f64 / test.len().max(1) as f64)
}

fn scores(xi: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let c = b.len();
    out.copy_from_slice(b);
    for (r, &xv) in xi.iter().enumerate() {
        for k in 0..c {
            out[k] += xv * w[r * c + k];
        }
    }
}
