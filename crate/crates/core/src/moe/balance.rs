//! Load-balancing auxiliary loss `N · Σ_j f_j · P_j` with `N = E − 1`.
//!
//! `f_j` is the fraction of rows whose highest router logit is expert `j`
//! (a constant under differentiation) and `P_j` the mean full-softmax
//! probability of expert `j` over the batch.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{argmax, softmax_rows, Tensor};

/// Fraction of rows whose argmax is each expert.
pub fn first_choice_fractions(logits: &Tensor) -> Vec<f64> {
    let (n, e) = (logits.rows(), logits.cols());
    let mut f = vec![0.0; e];
    for i in 0..n {
        f[argmax(logits.row(i))] += 1.0;
    }
    for v in &mut f {
        *v /= n.max(1) as f64;
    }
    f
}

/// Balancing loss of one block's router logits `n×E`.
pub fn balancing_loss(tape: &mut Tape, logits: Var) -> Result<Var> {
    let lv = tape.value(logits);
    if lv.shape().len() != 2 || lv.rows() == 0 {
        return Err(Error::Contract("balancing loss needs a non-empty batch".into()));
    }
    let e = lv.cols();
    let f = first_choice_fractions(lv);
    let dtype = lv.dtype();
    let scale = e.saturating_sub(1) as f64;
    let f = Tensor::from_rows(1, e, f.into_iter().map(|v| v * scale).collect(), dtype);
    let probs = tape.softmax_rows(logits)?;
    let mean = tape.mean_rows(probs);
    tape.dot_const(mean, &f)
}

/// Value of the balancing loss from fractions `f` and mean probabilities `p`.
pub fn balance_from_parts(f: &[f64], p: &[f64]) -> f64 {
    f.len().saturating_sub(1) as f64 * f.iter().zip(p).map(|(a, b)| a * b).sum::<f64>()
}

pub fn balance_value(logits: &Tensor) -> Result<f64> {
    if logits.shape().len() != 2 || logits.rows() == 0 {
        return Err(Error::Contract("balancing loss needs a non-empty batch".into()));
    }
    let f = first_choice_fractions(logits);
    let probs = softmax_rows(logits)?;
    let n = probs.rows() as f64;
    let p: Vec<f64> = (0..probs.cols())
        .map(|j| (0..probs.rows()).map(|i| probs.get(i, j)).sum::<f64>() / n)
        .collect();
    Ok(balance_from_parts(&f, &p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    #[test]
    fn uniform_over_four_is_three_quarters() {
        assert!((balance_from_parts(&[0.25; 4], &[0.25; 4]) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn collapse_and_degenerate() {
        assert!((balance_from_parts(&[1.0, 0.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]) - 3.0).abs() < 1e-12);
        assert_eq!(balance_from_parts(&[1.0], &[1.0]), 0.0);
        let l = Tensor::from_nested(&[vec![0.3, 0.3, 0.3, 0.3]], DType::F64);
        // one row, uniform probabilities, argmax at 0: 3 · 1 · 0.25
        assert!((balance_value(&l).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn heterogeneous_batch_can_undercut_uniform() {
        // Three quarters of the rows near (½, ½) with argmax 0, one quarter at
        // (0, 1): f = (¾, ¼), P = (⅜, ⅝) gives 0.4375 < ½.
        let v = balance_from_parts(&[0.75, 0.25], &[0.375, 0.625]);
        assert!((v - 0.4375).abs() < 1e-12);
        assert!(v < 0.5);
    }

    #[test]
    fn tape_matches_value() {
        let l = Tensor::from_nested(&[vec![1.0, 0.2, -0.3], vec![0.1, 0.9, 0.0], vec![2.0, 0.0, 0.5]], DType::F64);
        let mut tape = Tape::new();
        let v = tape.constant(l.clone());
        let loss = balancing_loss(&mut tape, v).unwrap();
        assert!((tape.value(loss).item() - balance_value(&l).unwrap()).abs() < 1e-12);
        assert_eq!(first_choice_fractions(&l), vec![2.0 / 3.0, 1.0 / 3.0, 0.0]);
    }

    #[test]
    fn empty_batch_rejected() {
        let l = Tensor::zeros(&[0, 3], DType::F64);
        assert!(matches!(balance_value(&l), Err(Error::Contract(_))));
        let mut tape = Tape::new();
        let v = tape.constant(l);
        assert!(matches!(balancing_loss(&mut tape, v), Err(Error::Contract(_))));
    }
}
