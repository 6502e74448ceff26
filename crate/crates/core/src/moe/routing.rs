//! Top-K softmax routing: keep the K largest router logits of each row and
//! renormalize over exactly those.

use crate::error::{Error, Result};
use crate::tensor::{matmul, DType, Tensor, NEG_SENTINEL};

#[derive(Debug, Clone, PartialEq)]
pub struct Routes {
    /// Per row, the selected experts in descending logit order.
    pub indices: Vec<Vec<usize>>,
    /// Per row, the routing weight of each selected expert.
    pub weights: Vec<Vec<f64>>,
}

/// Indices of the `k` largest values, largest first; ties go to the lower index.
pub fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn check_k(k: usize, experts: usize) -> Result<()> {
    if k < 1 || k > experts {
        return Err(Error::Config(format!("top-k {k} outside 1..={experts}")));
    }
    Ok(())
}

/// Additive mask that keeps each row's top-`k` entries.
pub fn topk_mask(logits: &Tensor, k: usize) -> Result<Tensor> {
    let (n, e) = (logits.rows(), logits.cols());
    check_k(k, e)?;
    let mut data = vec![NEG_SENTINEL; n * e];
    for i in 0..n {
        for j in topk_indices(logits.row(i), k) {
            data[i * e + j] = 0.0;
        }
    }
    Ok(Tensor::from_rows(n, e, data, DType::F64))
}

pub fn route_logits(logits: &Tensor, k: usize) -> Result<Routes> {
    check_k(k, logits.cols())?;
    let mut indices = Vec::with_capacity(logits.rows());
    let mut weights = Vec::with_capacity(logits.rows());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let sel = topk_indices(row, k);
        let max = row[sel[0]];
        let exps: Vec<f64> = sel.iter().map(|&j| (row[j] - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        weights.push(exps.into_iter().map(|v| v / z).collect());
        indices.push(sel);
    }
    Ok(Routes { indices, weights })
}

/// Routes the rows of `x` through router matrix `router: d×E`.
pub fn route(x: &Tensor, router: &Tensor, k: usize) -> Result<Routes> {
    route_logits(&matmul(x, router)?, k)
}
