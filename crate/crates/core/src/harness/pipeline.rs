//! End-to-end driver: data, base training, staged extraction, assembly,
//! router fine-tuning for both expert constructions, and evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::config::PipelineConfig;
use super::eval::{linear_probe, Retrieval};
use super::report::{emit_report, EvalReport, LossTraces, PhaseTiming, Specialization};
use crate::checkpoint;
use crate::encoder::{DualEncoder, Encode, FfnSnapshot, Phase, Tower};
use crate::error::{Error, Result};
use crate::mcl::{self, clusters, run_mcl_stage, train_contrastive, ClusterAssignment};
use crate::moe::{assemble_moe, assemble_upcycled, routing_stats, train_router, MoeModel, RoutingStats};
use crate::optim::AdamWConfig;
use crate::synth::{self, attribute_labels, generate_dataset, DatasetSplit, PairedData, SynthSample};
use crate::tensor::Tensor;

/// Progress records streamed while a pipeline runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    BaseEpoch { seed: u64, epoch: usize, loss: f64 },
    StageEpoch { seed: u64, stage: usize, epoch: usize, loss: f64 },
    RouterEpoch { seed: u64, model: &'static str, epoch: usize, loss: f64 },
    Retrieval { seed: u64, model: String, i2t_r1: f64, i2t_r5: f64, i2t_r10: f64, t2i_r1: f64, t2i_r5: f64, t2i_r10: f64 },
    Probe { seed: u64, snapshot: usize, attribute: usize, accuracy: f64 },
    ExpertProbe { seed: u64, expert: usize, attribute: usize, accuracy: f64 },
    Routing { seed: u64, model: &'static str, block: usize, expert: usize, topk_fraction: f64, mean_probability: f64 },
    Artifact { path: String },
    Summary { seed: u64, base_r1: f64, dmu_r1: f64, upcycled_r1: f64, min_topk_fraction: f64 },
}

impl Event {
    pub fn retrieval(seed: u64, model: impl Into<String>, r: &Retrieval) -> Event {
        Event::Retrieval {
            seed,
            model: model.into(),
            i2t_r1: r.i2t.r1,
            i2t_r5: r.i2t.r5,
            i2t_r10: r.i2t.r10,
            t2i_r1: r.t2i.r1,
            t2i_r5: r.t2i.r5,
            t2i_r10: r.t2i.r10,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }
}

/// Seed offsets that keep every random source of a run independent.
pub mod seeds {
    pub const MODEL: u64 = 0;
    pub const BASE_BATCHES: u64 = 1;
    pub const ROUTER_INIT: u64 = 2;
    pub const ROUTER_BATCHES: u64 = 3;
    pub const PROBE: u64 = 4;
}

/// Trains the base dual encoder with the plain contrastive loss.
pub fn train_base(cfg: &PipelineConfig, train: &PairedData, seed: u64, sink: &mut dyn FnMut(Event)) -> Result<(DualEncoder, Vec<f64>)> {
    let mut model = DualEncoder::new(cfg.encoder.clone(), cfg.dtype, seed.wrapping_add(seeds::MODEL))?;
    model.set_phase(Phase::BaseTraining);
    let keys = vec![0usize; train.len()];
    let losses = train_contrastive(
        &mut model,
        train,
        &keys,
        cfg.base.epochs,
        AdamWConfig::with_lr(cfg.base.lr),
        cfg.base.batch_size,
        seed.wrapping_add(seeds::BASE_BATCHES),
    )?;
    for (epoch, &loss) in losses.iter().enumerate() {
        sink(Event::BaseEpoch { seed, epoch, loss });
    }
    model.set_phase(Phase::AllFrozen);
    Ok((model, losses))
}

/// Runs the extraction stages starting from the base weights.
pub fn run_stages(
    cfg: &PipelineConfig,
    base: &DualEncoder,
    train: &PairedData,
    seed: u64,
    sink: &mut dyn FnMut(Event),
) -> Result<(Vec<FfnSnapshot>, Vec<ClusterAssignment>, Vec<Vec<f64>>)> {
    let stage_cfg = mcl::StageConfig {
        seed,
        ..cfg.stage.clone()
    };
    let mut model = base.clone();
    let mut snapshots = vec![model.extract_ffn_snapshot(0)];
    let mut assignments = Vec::new();
    let mut losses = Vec::new();
    for _ in 0..cfg.num_stages {
        let out = run_mcl_stage(&mut model, train, &assignments, &stage_cfg)?;
        for (epoch, &loss) in out.epoch_losses.iter().enumerate() {
            sink(Event::StageEpoch {
                seed,
                stage: out.snapshot.stage_id,
                epoch,
                loss,
            });
        }
        snapshots.push(out.snapshot);
        assignments = out.assignments;
        losses.push(out.epoch_losses);
    }
    Ok((snapshots, assignments, losses))
}

pub fn attribute_probes(model: &impl Encode, eval: &[SynthSample], data: &PairedData, cfg: &PipelineConfig, seed: u64) -> Result<Vec<f64>> {
    let emb = model.encode(Tower::Image, &data.image)?;
    probe_embeddings(&emb, eval, cfg.spec.num_attributes, cfg.spec.values_per_attribute, seed)
}

pub fn probe_embeddings(emb: &Tensor, samples: &[SynthSample], num_attributes: usize, classes: usize, seed: u64) -> Result<Vec<f64>> {
    (0..num_attributes)
        .map(|a| linear_probe(emb, &attribute_labels(samples, a)?, classes, seed.wrapping_add(seeds::PROBE)))
        .collect()
}

/// Probe accuracies and forced-routing recalls of every expert.
pub fn specialization_report(moe: &MoeModel, eval: &[SynthSample], data: &PairedData, cfg: &PipelineConfig, seed: u64) -> Result<Specialization> {
    let mut probe = Vec::new();
    let mut recall = Vec::new();
    for j in 0..moe.num_experts() {
        let view = moe.force_expert(j)?;
        probe.push(attribute_probes(&view, eval, data, cfg, seed)?);
        recall.push(Retrieval::evaluate(&view, data)?);
    }
    let best_attribute = probe.iter().map(|p| crate::tensor::argmax(p)).collect();
    Ok(Specialization {
        probe,
        recall,
        best_attribute,
    })
}

fn max_divergence(a: &impl Encode, b: &impl Encode, data: &PairedData) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (tower, x) in [(Tower::Image, &data.image), (Tower::Text, &data.text)] {
        let (ea, eb) = (a.encode(tower, x)?, b.encode(tower, x)?);
        for (u, v) in ea.data().iter().zip(eb.data()) {
            worst = worst.max((u - v).abs());
        }
    }
    Ok(worst)
}

struct Artifacts<'a> {
    dir: Option<PathBuf>,
    sink: &'a mut dyn FnMut(Event),
}

impl Artifacts<'_> {
    fn write(&mut self, name: &str, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        if let Some(dir) = &self.dir {
            let path = dir.join(name);
            f(&path)?;
            (self.sink)(Event::Artifact {
                path: path.display().to_string(),
            });
        }
        Ok(())
    }
}

fn emit_routing(sink: &mut dyn FnMut(Event), seed: u64, model: &'static str, stats: &RoutingStats) {
    for b in &stats.blocks {
        for (expert, (&f, &p)) in b.topk_fraction.iter().zip(&b.mean_probability).enumerate() {
            sink(Event::Routing {
                seed,
                model,
                block: b.block,
                expert,
                topk_fraction: f,
                mean_probability: p,
            });
        }
    }
}

/// Runs the whole pipeline for `cfg.seed`, writing artifacts into
/// `cfg.output_dir` as they are produced.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<EvalReport> {
    run_pipeline_with(cfg, &mut |_| {})
}

pub fn run_pipeline_with(cfg: &PipelineConfig, sink: &mut dyn FnMut(Event)) -> Result<EvalReport> {
    cfg.validate()?;
    let seed = cfg.seed;
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |phase: &str, timings: &mut Vec<PhaseTiming>| {
        timings.push(PhaseTiming {
            phase: phase.to_string(),
            seconds: clock.elapsed().as_secs_f64(),
        });
        clock = Instant::now();
    };
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let split: DatasetSplit = generate_dataset(cfg.n_train, cfg.n_eval, &cfg.spec, seed)?;
    let train = PairedData::from_samples(&split.train);
    let eval = PairedData::from_samples(&split.eval);
    lap("data", &mut timings);

    let (base, base_losses, snapshots, stage_losses) = {
        let mut art = Artifacts {
            dir: cfg.output_dir.clone(),
            sink: &mut *sink,
        };
        art.write("train.csv", |p| synth::write_csv(&split.train, p))?;
        art.write("eval.csv", |p| synth::write_csv(&split.eval, p))?;
        let (base, base_losses) = train_base(cfg, &train, seed, art.sink)?;
        art.write("base", |p| checkpoint::save_model(&base, p))?;
        let (snapshots, assignments, stage_losses) = run_stages(cfg, &base, &train, seed, art.sink)?;
        for s in &snapshots {
            art.write(&format!("stage_{}.snapshot", s.stage_id), |p| {
                checkpoint::save_snapshot(s, &base.config, p)
            })?;
        }
        art.write("assignments.csv", |p| clusters::write_csv(&assignments, p))?;
        (base, base_losses, snapshots, stage_losses)
    };
    lap("base+stages", &mut timings);

    let e = cfg.num_experts();
    let router_seed = seed.wrapping_add(seeds::ROUTER_INIT);
    let mut dmu = assemble_moe(&base, &snapshots, cfg.moe.top_k, router_seed)?;
    let mut upcycled = assemble_upcycled(&base, e, cfg.moe.top_k, router_seed)?;
    let rcfg = cfg.router_config(seed.wrapping_add(seeds::ROUTER_BATCHES));
    let dmu_losses = train_router(&mut dmu, &train, &rcfg)?;
    for (epoch, &loss) in dmu_losses.iter().enumerate() {
        sink(Event::RouterEpoch { seed, model: "dmu", epoch, loss });
    }
    let up_losses = train_router(&mut upcycled, &train, &rcfg)?;
    for (epoch, &loss) in up_losses.iter().enumerate() {
        sink(Event::RouterEpoch { seed, model: "upcycled", epoch, loss });
    }
    {
        let mut art = Artifacts {
            dir: cfg.output_dir.clone(),
            sink: &mut *sink,
        };
        art.write("dmu_moe", |p| dmu.save(p))?;
        art.write("upcycled_moe", |p| upcycled.save(p))?;
    }
    lap("routers", &mut timings);

    let base_r = Retrieval::evaluate(&base, &eval)?;
    let dmu_r = Retrieval::evaluate(&dmu, &eval)?;
    let up_r = Retrieval::evaluate(&upcycled, &eval)?;
    for (name, r) in [("base", &base_r), ("dmu", &dmu_r), ("upcycled", &up_r)] {
        sink(Event::retrieval(seed, name, r));
    }
    let mut stage_probes = Vec::with_capacity(snapshots.len());
    for s in &snapshots {
        let accs = attribute_probes(&base.with_snapshot(s)?, &split.eval, &eval, cfg, seed)?;
        for (attribute, &accuracy) in accs.iter().enumerate() {
            sink(Event::Probe {
                seed,
                snapshot: s.stage_id,
                attribute,
                accuracy,
            });
        }
        stage_probes.push(accs);
    }
    let specialization = specialization_report(&dmu, &split.eval, &eval, cfg, seed)?;
    for (j, r) in specialization.recall.iter().enumerate() {
        sink(Event::retrieval(seed, format!("expert_{j}"), r));
    }
    let routing_dmu = routing_stats(&dmu, &eval)?;
    let routing_upcycled = routing_stats(&upcycled, &eval)?;
    emit_routing(sink, seed, "dmu", &routing_dmu);
    emit_routing(sink, seed, "upcycled", &routing_upcycled);
    let upcycled_divergence = max_divergence(&upcycled, &base, &eval)?;
    lap("eval", &mut timings);

    let report = EvalReport {
        seed,
        num_experts: e,
        top_k: cfg.moe.top_k,
        base: base_r,
        dmu: dmu_r,
        upcycled: up_r,
        stage_probes,
        specialization,
        routing_dmu,
        routing_upcycled,
        upcycled_divergence,
        losses: LossTraces {
            base: base_losses,
            stages: stage_losses,
            router_dmu: dmu_losses,
            router_upcycled: up_losses,
        },
        timings: cfg.record_timings.then_some(timings),
    };
    let mut art = Artifacts {
        dir: cfg.output_dir.clone(),
        sink,
    };
    art.write("routing_dmu.csv", |p| report.routing_dmu.write_csv(p))?;
    art.write("routing_upcycled.csv", |p| report.routing_upcycled.write_csv(p))?;
    art.write("report", |p| emit_report(&report, p))?;
    Ok(report)
}

/// Runs [`run_pipeline_with`] once per seed of the sweep, each into its own
/// `seed_<s>` subdirectory.
pub fn run_sweep(cfg: &PipelineConfig, sink: &mut dyn FnMut(Event)) -> Result<Vec<EvalReport>> {
    cfg.seed_list()
        .into_iter()
        .map(|s| {
            let mut one = cfg.clone();
            one.seed = s;
            one.seeds.clear();
            if cfg.seeds.len() > 1 {
                one.output_dir = cfg.output_dir.as_ref().map(|d| d.join(format!("seed_{s}")));
            }
            run_pipeline_with(&one, sink)
        })
        .collect()
}
