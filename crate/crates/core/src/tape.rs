//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node whose inputs are earlier nodes, so the
//! recording order is already a topological order and the backward pass is a
//! single reverse sweep.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{self, DType, Tensor, MASK_THRESHOLD};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    L2Normalize(Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    Pick(Var, Vec<(usize, usize)>),
    MulCol(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    DotConst(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the non-frozen parameters that
/// took part in its computation.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
    /// Number of nodes visited by the backward sweep.
    pub visited: usize,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(&id, g)| (id, g))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A parameter leaf; tracked unless the parameter is frozen.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), !p.frozen)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_t(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Broadcasts a `1×n` bias over the rows of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = tensor::add_row(self.value(a), self.value(bias))?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(out, Op::AddRow(a, bias), rg))
    }

    /// `a + c` for a constant `c` of the same shape (used for additive masks).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let av = self.value(a);
        let c = c.to_dtype(av.dtype());
        let out = av.zip_map(&c, "add_const", |x, y| x + y)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::AddConst(a), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = tensor::gelu(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = tensor::log_softmax_rows(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LogSoftmax(a), rg))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let out = tensor::l2_normalize_rows(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::L2Normalize(a), rg))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let out = tensor::gather_rows(self.value(a), rows)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GatherRows(a, rows.to_vec()), rg))
    }

    /// Places row `i` of `a` at row `rows[i]` of an `n_rows`-row zero matrix,
    /// summing rows that land on the same index.
    pub fn scatter_rows(&mut self, a: Var, rows: &[usize], n_rows: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rows() != rows.len() {
            return Err(Error::Dimension {
                op: "scatter_rows",
                left: av.shape().to_vec(),
                right: vec![rows.len()],
            });
        }
        let n = av.cols();
        let mut data = vec![0.0; n_rows * n];
        for (i, &r) in rows.iter().enumerate() {
            if r >= n_rows {
                return Err(Error::Index {
                    index: r,
                    len: n_rows,
                });
            }
            for (d, s) in data[r * n..(r + 1) * n].iter_mut().zip(av.row(i)) {
                *d += s;
            }
        }
        let out = Tensor::new(vec![n_rows, n], data, av.dtype())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::ScatterRows(a, rows.to_vec()), rg))
    }

    /// Column vector `[a[r0,c0], a[r1,c1], …]ᵀ`.
    pub fn pick(&mut self, a: Var, coords: &[(usize, usize)]) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(coords.len());
        for &(r, c) in coords {
            if r >= m || c >= n {
                return Err(Error::Index {
                    index: r * n + c,
                    len: m * n,
                });
            }
            data.push(av.get(r, c));
        }
        let out = Tensor::new(vec![coords.len(), 1], data, av.dtype())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Pick(a, coords.to_vec()), rg))
    }

    /// Scales row `i` of `a` by `col[i]` where `col` is `m×1`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.numel() != av.rows() || av.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "mul_col",
                left: av.shape().to_vec(),
                right: cv.shape().to_vec(),
            });
        }
        let n = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * cv.data()[i / n])
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data, av.dtype())?;
        let rg = self.rg(&[a, col]);
        Ok(self.push(out, Op::MulCol(a, col), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::scalar(av.sum(), av.dtype());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::scalar(av.sum() / av.numel() as f64, av.dtype());
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    /// Column means of an `m×n` matrix as a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let mut data = vec![0.0; n];
        for i in 0..m {
            for (d, v) in data.iter_mut().zip(av.row(i)) {
                *d += v;
            }
        }
        for d in &mut data {
            *d /= m as f64;
        }
        let out = Tensor::from_rows(1, n, data, av.dtype());
        let rg = self.rg(&[a]);
        self.push(out, Op::MeanRows(a), rg)
    }

    /// `Σ a ⊙ c` with `c` held constant.
    pub fn dot_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let av = self.value(a);
        if av.numel() != c.numel() {
            return Err(Error::Dimension {
                op: "dot_const",
                left: av.shape().to_vec(),
                right: c.shape().to_vec(),
            });
        }
        let out = Tensor::scalar(tensor::dot(av.data(), c.data()), av.dtype());
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::DotConst(a, c.clone()), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        let mut param_dtypes = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            out.visited += 1;
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    param_dtypes.insert(*id, y.dtype());
                    // Accumulated wide, rounded to the parameter dtype at the end.
                    let entry = out
                        .grads
                        .entry(*id)
                        .or_insert_with(|| Tensor::zeros(y.shape(), DType::F64));
                    for (d, s) in entry.data_mut().iter_mut().zip(&g) {
                        *d += s;
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let gt = wide(y.shape(), g);
                    if self.requires_grad(*a) {
                        // dA = dC · Bᵀ
                        let da = tensor::matmul_t(&gt, &bv.to_dtype(DType::F64))?;
                        accumulate(&mut adj, *a, da.into_data());
                    }
                    if self.requires_grad(*b) {
                        // dB = Aᵀ · dC
                        let db = tensor::matmul(&av.to_dtype(DType::F64).transpose()?, &gt)?;
                        accumulate(&mut adj, *b, db.into_data());
                    }
                }
                Op::MatMulT(a, b) => {
                    // C = A · Bᵀ
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let gt = wide(y.shape(), g);
                    if self.requires_grad(*a) {
                        let da = tensor::matmul(&gt, &bv.to_dtype(DType::F64))?;
                        accumulate(&mut adj, *a, da.into_data());
                    }
                    if self.requires_grad(*b) {
                        let db = tensor::matmul(&gt.transpose()?, &av.to_dtype(DType::F64))?;
                        accumulate(&mut adj, *b, db.into_data());
                    }
                }
                Op::Add(a, b) => {
                    if self.requires_grad(*a) {
                        accumulate(&mut adj, *a, g.clone());
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut adj, *b, g);
                    }
                }
                Op::AddRow(a, bias) => {
                    let n = y.cols();
                    if self.requires_grad(*bias) {
                        let mut db = vec![0.0; n];
                        for row in g.chunks(n) {
                            for (d, s) in db.iter_mut().zip(row) {
                                *d += s;
                            }
                        }
                        accumulate(&mut adj, *bias, db);
                    }
                    if self.requires_grad(*a) {
                        accumulate(&mut adj, *a, g);
                    }
                }
                Op::AddConst(a) => accumulate(&mut adj, *a, g),
                Op::Scale(a, s) => {
                    accumulate(&mut adj, *a, g.iter().map(|v| v * s).collect());
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let da = g
                        .iter()
                        .zip(x.data())
                        .map(|(gv, &xv)| gv * tensor::gelu_grad_scalar(xv))
                        .collect();
                    accumulate(&mut adj, *a, da);
                }
                Op::Softmax(a) => {
                    let n = y.cols();
                    let mut da = vec![0.0; g.len()];
                    for ((yr, gr), dr) in y.data().chunks(n).zip(g.chunks(n)).zip(da.chunks_mut(n)) {
                        let s: f64 = tensor::dot(yr, gr);
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - s);
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::LogSoftmax(a) => {
                    let n = y.cols();
                    let x = self.value(*a);
                    let mut da = vec![0.0; g.len()];
                    for (((yr, gr), dr), xr) in y
                        .data()
                        .chunks(n)
                        .zip(g.chunks(n))
                        .zip(da.chunks_mut(n))
                        .zip(x.data().chunks(n))
                    {
                        let s: f64 = gr
                            .iter()
                            .zip(xr)
                            .filter(|(_, &xv)| xv > MASK_THRESHOLD)
                            .map(|(gv, _)| gv)
                            .sum();
                        for (((d, &yv), &gv), &xv) in dr.iter_mut().zip(yr).zip(gr).zip(xr) {
                            if xv > MASK_THRESHOLD {
                                *d = gv - yv.exp() * s;
                            }
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::L2Normalize(a) => {
                    let n = y.cols();
                    let x = self.value(*a);
                    let mut da = vec![0.0; g.len()];
                    for (((yr, gr), dr), xr) in y
                        .data()
                        .chunks(n)
                        .zip(g.chunks(n))
                        .zip(da.chunks_mut(n))
                        .zip(x.data().chunks(n))
                    {
                        let norm = tensor::dot(xr, xr).sqrt();
                        let s = tensor::dot(yr, gr);
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = (gv - yv * s) / norm;
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::GatherRows(a, rows) => {
                    let x = self.value(*a);
                    let n = x.cols();
                    let mut da = vec![0.0; x.numel()];
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, s) in da[r * n..(r + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *d += s;
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::ScatterRows(a, rows) => {
                    let n = y.cols();
                    let mut da = Vec::with_capacity(rows.len() * n);
                    for &r in rows {
                        da.extend_from_slice(&g[r * n..(r + 1) * n]);
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::Pick(a, coords) => {
                    let x = self.value(*a);
                    let n = x.cols();
                    let mut da = vec![0.0; x.numel()];
                    for (i, &(r, c)) in coords.iter().enumerate() {
                        da[r * n + c] += g[i];
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::MulCol(a, col) => {
                    let (av, cv) = (self.value(*a), self.value(*col));
                    let n = av.cols();
                    if self.requires_grad(*a) {
                        let da = g
                            .iter()
                            .enumerate()
                            .map(|(i, gv)| gv * cv.data()[i / n])
                            .collect();
                        accumulate(&mut adj, *a, da);
                    }
                    if self.requires_grad(*col) {
                        let dc = g
                            .chunks(n)
                            .zip(av.data().chunks(n))
                            .map(|(gr, ar)| tensor::dot(gr, ar))
                            .collect();
                        accumulate(&mut adj, *col, dc);
                    }
                }
                Op::Sum(a) => {
                    let len = self.value(*a).numel();
                    accumulate(&mut adj, *a, vec![g[0]; len]);
                }
                Op::Mean(a) => {
                    let len = self.value(*a).numel();
                    accumulate(&mut adj, *a, vec![g[0] / len as f64; len]);
                }
                Op::MeanRows(a) => {
                    let x = self.value(*a);
                    let m = x.rows() as f64;
                    let n = x.cols();
                    let da = (0..x.numel()).map(|i| g[i % n] / m).collect();
                    accumulate(&mut adj, *a, da);
                }
                Op::DotConst(a, c) => {
                    accumulate(&mut adj, *a, c.data().iter().map(|v| v * g[0]).collect());
                }
            }
        }

        for (id, grad) in out.grads.iter_mut() {
            *grad = grad.to_dtype(param_dtypes[id]);
        }
        Ok(out)
    }
}

fn wide(shape: &[usize], g: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), g, DType::F64).expect("gradient shape")
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (e, s) in existing.iter_mut().zip(&g) {
                *e += s;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::NEG_SENTINEL;

    fn store_with(name: &str, t: Tensor) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register(name, t).unwrap();
        (s, id)
    }

    #[test]
    fn sum_gives_ones() {
        let (store, id) = store_with("p", Tensor::from_rows(2, 3, vec![0.3, -1.0, 2.0, 4.0, 0.0, 1.5], DType::F64));
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(id).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn half_square_norm_gives_value() {
        let vals = vec![0.3, -1.0, 2.0, 4.0];
        let (store, id) = store_with("p", Tensor::from_rows(2, 2, vals.clone(), DType::F64));
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let flat = tape.param(&store, id);
        // 0.5 * sum(p ⊙ p) via mul_col on a reshaped view is awkward; use dot with
        // matmul of row vectors instead: sum_i p_i^2 = trace(P Pᵀ)
        let ppt = tape.matmul_t(p, flat).unwrap();
        let diag = tape.pick(ppt, &[(0, 0), (1, 1)]).unwrap();
        let s = tape.sum(diag);
        let loss = tape.scale(s, 0.5);
        let g = tape.backward(loss).unwrap();
        let got = g.get(id).unwrap().data();
        for (a, b) in got.iter().zip(&vals) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let (store, id) = store_with("p", Tensor::zeros(&[2, 2], DType::F64));
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        assert!(matches!(tape.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::full(&[1, 2], 1.0, DType::F64)).unwrap();
        let b = store.register("b", Tensor::full(&[1, 2], 2.0, DType::F64)).unwrap();
        store.set_frozen(b, true);
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(&store, a), tape.param(&store, b));
        let s = tape.add(va, vb).unwrap();
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(a).is_some());
        assert!(g.get(b).is_none());
    }

    #[test]
    fn masked_log_softmax_has_zero_gradient_at_mask() {
        let (store, id) = store_with("p", Tensor::from_rows(1, 3, vec![0.5, -0.2, 1.0], DType::F64));
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let mask = Tensor::from_rows(1, 3, vec![0.0, NEG_SENTINEL, 0.0], DType::F64);
        let m = tape.add_const(p, &mask).unwrap();
        let ls = tape.log_softmax_rows(m).unwrap();
        let loss = tape.sum(ls);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(id).unwrap().data()[1], 0.0);
    }

    #[test]
    fn each_node_visited_once() {
        let (store, id) = store_with("p", Tensor::from_rows(1, 2, vec![1.0, 2.0], DType::F64));
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let a = tape.scale(p, 2.0);
        let b = tape.add(a, p).unwrap();
        let loss = tape.sum(b);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.visited, tape.len());
        assert_eq!(g.get(id).unwrap().data(), &[3.0, 3.0]);
    }
}
