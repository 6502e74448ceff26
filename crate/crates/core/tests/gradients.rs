//! Finite-difference checks of every differentiable tape op and of the
//! composite training graphs.

mod common;

use dmu::gradcheck::check_gradients;
use dmu::mcl::masked_infonce;
use dmu::moe::{balancing_loss, total_loss};
use dmu::param::{ParamId, ParamStore};
use dmu::rng;
use dmu::tape::{Tape, Var};
use dmu::tensor::{DType, Tensor, NEG_SENTINEL};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand(rows: usize, cols: usize, seed: u64) -> Tensor {
    rng::uniform(&mut rng::seeded(seed, 1), rows, cols, 1.0, DType::F64)
}

fn store_with(shapes: &[(usize, usize)]) -> (ParamStore, Vec<ParamId>) {
    let mut s = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| s.register(format!("p{i}"), rand(r, c, 10 + i as u64)).unwrap())
        .collect();
    (s, ids)
}

/// Weighted sum so every output entry gets a distinct upstream gradient.
fn weighted(tape: &mut Tape, v: Var, seed: u64) -> dmu::Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let w = rand(shape[0], shape[1], seed);
    tape.dot_const(v, &w)
}

fn check(shapes: &[(usize, usize)], f: impl Fn(&mut Tape, &[Var]) -> dmu::Result<Var>) {
    let (mut store, ids) = store_with(shapes);
    let report = check_gradients(&mut store, 24, 5, H, |s, tape| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
        f(tape, &vars)
    })
    .unwrap();
    let worst = report.worst().unwrap();
    assert!(report.max_rel_error() < TOL, "{worst:?}");
}

#[test]
fn matmul_3x4_by_4x2() {
    check(&[(3, 4), (4, 2)], |t, v| {
        let m = t.matmul(v[0], v[1])?;
        weighted(t, m, 1)
    });
}

#[test]
fn matmul_transposed() {
    check(&[(3, 4), (5, 4)], |t, v| {
        let m = t.matmul_t(v[0], v[1])?;
        weighted(t, m, 2)
    });
}

#[test]
fn add_and_bias() {
    check(&[(3, 4), (3, 4), (1, 4)], |t, v| {
        let a = t.add(v[0], v[1])?;
        let b = t.add_row(a, v[2])?;
        weighted(t, b, 3)
    });
}

#[test]
fn scale_and_gelu() {
    check(&[(4, 3)], |t, v| {
        let s = t.scale(v[0], 2.5);
        let g = t.gelu(s);
        weighted(t, g, 4)
    });
}

#[test]
fn masked_softmax_and_log_softmax() {
    let mut mask = Tensor::zeros(&[3, 4], DType::F64).into_data();
    mask[1] = NEG_SENTINEL;
    mask[6] = NEG_SENTINEL;
    let mask = Tensor::from_rows(3, 4, mask, DType::F64);
    check(&[(3, 4)], |t, v| {
        let m = t.add_const(v[0], &mask)?;
        let s = t.softmax_rows(m)?;
        let a = weighted(t, s, 5)?;
        let l = t.log_softmax_rows(m)?;
        let picked = t.pick(l, &[(0, 0), (1, 3), (2, 1)])?;
        let b = t.sum(picked);
        t.add(a, b)
    });
}

#[test]
fn l2_normalize() {
    check(&[(5, 8)], |t, v| {
        let n = t.l2_normalize_rows(v[0])?;
        weighted(t, n, 6)
    });
}

#[test]
fn gather_scatter_pick_mul_col() {
    check(&[(6, 3), (6, 4)], |t, v| {
        let g = t.gather_rows(v[0], &[4, 1, 1, 5])?;
        let w = t.softmax_rows(v[1])?;
        let col = t.pick(w, &[(4, 0), (1, 2), (1, 3), (5, 1)])?;
        let scaled = t.mul_col(g, col)?;
        let back = t.scatter_rows(scaled, &[4, 1, 1, 5], 6)?;
        weighted(t, back, 7)
    });
}

#[test]
fn reductions() {
    check(&[(4, 3)], |t, v| {
        let g = t.gelu(v[0]);
        let m = t.mean_rows(g);
        let a = weighted(t, m, 8)?;
        let b = t.mean(g);
        let c = t.sum(v[0]);
        let ab = t.add(a, b)?;
        let c = t.scale(c, 0.3);
        t.add(ab, c)
    });
}

#[test]
fn masked_infonce_plus_balancing_on_four_samples() {
    // Embeddings come from trainable projections; router logits from a
    // trainable router applied to the image embeddings.
    let keys = [0, 0, 1, 0];
    check(&[(4, 5), (5, 6), (4, 5), (5, 6), (6, 4)], |t, v| {
        let a = t.matmul(v[0], v[1])?;
        let zi = t.l2_normalize_rows(a)?;
        let b = t.matmul(v[2], v[3])?;
        let zt = t.l2_normalize_rows(b)?;
        let contrast = masked_infonce(t, zi, zt, &keys, 0.07)?;
        let logits = t.matmul(zi, v[4])?;
        let bal = balancing_loss(t, logits)?;
        let bal = t.scale(bal, 0.01);
        t.add(contrast, bal)
    });
}

#[test]
fn total_loss_graph() {
    check(&[(6, 4), (6, 4), (4, 3), (4, 3)], |t, v| {
        let zi = t.l2_normalize_rows(v[0])?;
        let zt = t.l2_normalize_rows(v[1])?;
        let l1 = t.matmul(zi, v[2])?;
        let l2 = t.matmul(zt, v[3])?;
        total_loss(t, zi, zt, 0.07, &[l1, l2], 0.01)
    });
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let (mut store, ids) = store_with(&[(2, 3), (3, 2)]);
    store.set_frozen(ids[1], true);
    let mut t = Tape::new();
    let a = t.param(&store, ids[0]);
    let b = t.param(&store, ids[1]);
    let m = t.matmul(a, b).unwrap();
    let l = t.sum(m);
    let g = t.backward(l).unwrap();
    assert!(g.get(ids[0]).is_some());
    assert!(g.get(ids[1]).is_none());
    assert_eq!(g.get(ids[0]).unwrap().shape(), &[2, 3]);
}
