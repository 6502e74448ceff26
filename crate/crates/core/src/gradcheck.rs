//! Central finite-difference check of tape gradients.

use rand::Rng;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::DType;

/// Denominator floor of the relative error, so exact zeros compare sanely.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub probes: Vec<Probe>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares `backward` against `(L(θ+h) − L(θ−h)) / 2h` at `probes` randomly
/// chosen entries of the trainable parameters. Parameters must be f64.
pub fn check_gradients(
    store: &mut ParamStore,
    probes: usize,
    seed: u64,
    h: f64,
    loss: impl Fn(&ParamStore, &mut Tape) -> Result<Var>,
) -> Result<GradCheck> {
    let ids: Vec<ParamId> = store.trainable_ids();
    if ids.is_empty() {
        return Err(Error::Contract("no trainable parameters to check".into()));
    }
    if ids.iter().any(|&id| store.value(id).dtype() != DType::F64) {
        return Err(Error::DType { op: "check_gradients" });
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let l = loss(store, &mut tape)?;
        Ok(tape.value(l).item())
    };
    let mut tape = Tape::new();
    let l = loss(store, &mut tape)?;
    let grads = tape.backward(l)?;

    let mut r = rng::seeded(seed, 0x6763);
    let mut out = Vec::with_capacity(probes);
    for _ in 0..probes {
        let id = ids[r.random_range(0..ids.len())];
        let index = r.random_range(0..store.value(id).numel());
        let orig = store.value(id).data()[index];
        store.get_mut(id).value.data_mut()[index] = orig + h;
        let up = eval(store)?;
        store.get_mut(id).value.data_mut()[index] = orig - h;
        let down = eval(store)?;
        store.get_mut(id).value.data_mut()[index] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[index]);
        out.push(Probe {
            param: store.get(id).name.clone(),
            index,
            analytic,
            numeric,
            rel_error: rel_error(analytic, numeric),
        });
    }
    Ok(GradCheck { probes: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_passes() {
        let mut store = ParamStore::new();
        let p = store
            .register("p", Tensor::from_rows(2, 2, vec![0.3, -1.0, 2.0, 0.5], DType::F64))
            .unwrap();
        let c = store.register("c", Tensor::eye(2, DType::F64)).unwrap();
        store.set_frozen(c, true);
        let report = check_gradients(&mut store, 8, 1, 1e-5, |s, t| {
            let a = t.param(s, p);
            let b = t.param(s, c);
            let m = t.matmul(a, b)?;
            let g = t.gelu(m);
            Ok(t.sum(g))
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-6);
        assert!(report.probes.iter().all(|q| q.param == "p"));
    }
}
