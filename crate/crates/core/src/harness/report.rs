use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::eval::Retrieval;
use crate::error::{Error, Result};
use crate::moe::RoutingStats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Specialization {
    /// `E × num_attributes` probe accuracies under forced routing.
    pub probe: Vec<Vec<f64>>,
    pub recall: Vec<Retrieval>,
    /// Per expert, the attribute with the highest probe accuracy.
    pub best_attribute: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTraces {
    pub base: Vec<f64>,
    pub stages: Vec<Vec<f64>>,
    pub router_dmu: Vec<f64>,
    pub router_upcycled: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub num_experts: usize,
    pub top_k: usize,
    pub base: Retrieval,
    pub dmu: Retrieval,
    pub upcycled: Retrieval,
    /// Per-attribute probe accuracy of every stage snapshot, index 0 = base.
    pub stage_probes: Vec<Vec<f64>>,
    pub specialization: Specialization,
    pub routing_dmu: RoutingStats,
    pub routing_upcycled: RoutingStats,
    /// Largest absolute embedding difference between the upcycled model and the base.
    pub upcycled_divergence: f64,
    pub losses: LossTraces,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Vec<PhaseTiming>>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("report: {e}")))
    }

    pub fn retrievals(&self) -> [(&'static str, &Retrieval); 3] {
        [("base", &self.base), ("dmu", &self.dmu), ("upcycled", &self.upcycled)]
    }

    pub fn to_text(&self) -> String {
        let mut t = String::new();
        let _ = writeln!(t, "seed {}  experts {}  top-k {}", self.seed, self.num_experts, self.top_k);
        let _ = writeln!(t);
        let _ = writeln!(t, "{:<12} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}", "model", "i2t@1", "i2t@5", "i2t@10", "t2i@1", "t2i@5", "t2i@10");
        let mut row = |name: String, r: &Retrieval| {
            let _ = write!(t, "{name:<12}");
            for v in r.all() {
                let _ = write!(t, " {v:>7.4}");
            }
            let _ = writeln!(t);
        };
        for (name, r) in self.retrievals() {
            row(name.to_string(), r);
        }
        for (j, r) in self.specialization.recall.iter().enumerate() {
            row(format!("expert_{j}"), r);
        }
        let _ = writeln!(t);
        let attrs = self.stage_probes.first().map_or(0, Vec::len);
        let _ = write!(t, "{:<12}", "probe");
        for a in 0..attrs {
            let _ = write!(t, " {:>7}", format!("attr_{a}"));
        }
        let _ = writeln!(t);
        for (s, accs) in self.stage_probes.iter().enumerate() {
            let _ = write!(t, "{:<12}", format!("stage_{s}"));
            for v in accs {
                let _ = write!(t, " {v:>7.4}");
            }
            let _ = writeln!(t);
        }
        let _ = writeln!(t);
        for (name, stats) in [("dmu", &self.routing_dmu), ("upcycled", &self.routing_upcycled)] {
            let _ = writeln!(t, "routing {name} (top-k fraction per expert)");
            for b in &stats.blocks {
                let _ = write!(t, "  block_{:<5}", b.block);
                for v in &b.topk_fraction {
                    let _ = write!(t, " {v:>7.4}");
                }
                let _ = writeln!(t);
            }
        }
        let _ = writeln!(t);
        let _ = writeln!(t, "upcycled divergence {:.3e}", self.upcycled_divergence);
        if let Some(timings) = &self.timings {
            for p in timings {
                let _ = writeln!(t, "{:<16} {:>9.3}s", p.phase, p.seconds);
            }
        }
        t
    }
}

/// Writes `<path>.json` and `<path>.txt` renderings of the report.
pub fn emit_report(report: &EvalReport, path: &Path) -> Result<()> {
    let json = path.with_extension("json");
    let text = path.with_extension("txt");
    std::fs::write(&json, report.to_json()).map_err(|e| Error::io(&json, e))?;
    std::fs::write(&text, report.to_text()).map_err(|e| Error::io(&text, e))?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EvalReport::from_json(&text)
}
