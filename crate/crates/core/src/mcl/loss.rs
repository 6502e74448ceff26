//! Symmetric InfoNCE with negatives restricted to the anchor's accumulated
//! cluster.
//!
//! For anchor `a` in the image→text direction the softmax runs over the
//! positive `t_a` and every `t_b` (b ≠ a) with `key_b == key_a`; the loss is
//! `-log p(t_a)`, averaged over all anchors. An anchor without same-key
//! negatives contributes exactly zero. The text→image direction is the
//! transpose with the same mask; the two are averaged.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{DType, Tensor, NEG_SENTINEL};

const UNIT_NORM_TOL: f64 = 1e-5;

/// Additive `n×n` mask: 0 on the diagonal and between equal keys, the
/// sentinel elsewhere. Symmetric.
pub fn same_key_mask(keys: &[usize], dtype: DType) -> Tensor {
    let n = keys.len();
    let mut data = vec![NEG_SENTINEL; n * n];
    for a in 0..n {
        for b in 0..n {
            if a == b || keys[a] == keys[b] {
                data[a * n + b] = 0.0;
            }
        }
    }
    Tensor::from_rows(n, n, data, dtype)
}

fn check_inputs(img: &Tensor, txt: &Tensor, keys: &[usize]) -> Result<()> {
    let n = img.rows();
    if n < 2 {
        return Err(Error::Batch(n));
    }
    if img.shape() != txt.shape() {
        return Err(Error::Dimension {
            op: "masked_infonce",
            left: img.shape().to_vec(),
            right: txt.shape().to_vec(),
        });
    }
    if keys.len() != n {
        return Err(Error::Contract(format!("{} keys for a batch of {n}", keys.len())));
    }
    for (name, t) in [("image", img), ("text", txt)] {
        for r in 0..n {
            let norm: f64 = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Contract(format!(
                    "{name} embedding row {r} has norm {norm}, expected 1"
                )));
            }
        }
    }
    Ok(())
}

fn direction(tape: &mut Tape, logits: Var, mask: &Tensor) -> Result<Var> {
    let n = tape.value(logits).rows();
    let masked = tape.add_const(logits, mask)?;
    let lsm = tape.log_softmax_rows(masked)?;
    let diag: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let pos = tape.pick(lsm, &diag)?;
    let m = tape.mean(pos);
    Ok(tape.scale(m, -1.0))
}

/// Records the loss on `tape`. `img` and `txt` must be unit-norm rows.
pub fn masked_infonce(
    tape: &mut Tape,
    img: Var,
    txt: Var,
    keys: &[usize],
    temperature: f64,
) -> Result<Var> {
    check_inputs(tape.value(img), tape.value(txt), keys)?;
    let mask = same_key_mask(keys, tape.value(img).dtype());
    let inv_t = 1.0 / temperature;
    let s_it = tape.matmul_t(img, txt)?;
    let l_it = tape.scale(s_it, inv_t);
    let s_ti = tape.matmul_t(txt, img)?;
    let l_ti = tape.scale(s_ti, inv_t);
    let i2t = direction(tape, l_it, &mask)?;
    let t2i = direction(tape, l_ti, &mask)?;
    let both = tape.add(i2t, t2i)?;
    Ok(tape.scale(both, 0.5))
}

/// Standard symmetric InfoNCE: every in-batch sample is a negative.
pub fn infonce(tape: &mut Tape, img: Var, txt: Var, temperature: f64) -> Result<Var> {
    let n = tape.value(img).rows();
    masked_infonce(tape, img, txt, &vec![0; n], temperature)
}

/// Loss value without recording gradients.
pub fn masked_infonce_value(img: &Tensor, txt: &Tensor, keys: &[usize], temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let (i, t) = (tape.constant(img.clone()), tape.constant(txt.clone()));
    let l = masked_infonce(&mut tape, i, t, keys, temperature)?;
    Ok(tape.value(l).item())
}
