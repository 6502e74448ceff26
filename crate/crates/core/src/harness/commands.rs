//! Implementations behind the `dmu` subcommands. Each reads its inputs from
//! files, writes artifacts under `out`, and reports through an event sink.

use std::path::{Path, PathBuf};

use super::config::PipelineConfig;
use super::eval::Retrieval;
use super::pipeline::{self, attribute_probes, run_stages, specialization_report, Event};
use crate::checkpoint::{self, CheckpointKind};
use crate::encoder::FfnSnapshot;
use crate::error::{Error, Result};
use crate::mcl::clusters;
use crate::moe::{assemble_moe, assemble_upcycled, routing_stats, train_router, MoeModel};
use crate::synth::{self, generate_dataset, PairedData, SynthSample};

pub type Sink<'a> = &'a mut dyn FnMut(Event);

pub const TRAIN_CSV: &str = "train.csv";
pub const EVAL_CSV: &str = "eval.csv";

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn artifact(sink: Sink<'_>, path: &Path) {
    sink(Event::Artifact {
        path: path.display().to_string(),
    });
}

pub fn load_split(data_dir: &Path, file: &str) -> Result<(Vec<SynthSample>, PairedData)> {
    let samples = synth::read_csv(&data_dir.join(file))?;
    if samples.is_empty() {
        return Err(Error::Data(format!("{} has no samples", data_dir.join(file).display())));
    }
    let paired = PairedData::from_samples(&samples);
    Ok((samples, paired))
}

pub fn gen_data(cfg: &PipelineConfig, out: &Path, sink: Sink<'_>) -> Result<()> {
    cfg.spec.validate()?;
    ensure_dir(out)?;
    let split = generate_dataset(cfg.n_train, cfg.n_eval, &cfg.spec, cfg.seed)?;
    for (name, samples) in [(TRAIN_CSV, &split.train), (EVAL_CSV, &split.eval)] {
        let p = out.join(name);
        synth::write_csv(samples, &p)?;
        artifact(sink, &p);
    }
    Ok(())
}

pub fn train_base(cfg: &PipelineConfig, data: &Path, out: &Path, sink: Sink<'_>) -> Result<PathBuf> {
    cfg.validate()?;
    ensure_dir(out)?;
    let (_, train) = load_split(data, TRAIN_CSV)?;
    let (model, _) = pipeline::train_base(cfg, &train, cfg.seed, sink)?;
    let p = out.join("base");
    checkpoint::save_model(&model, &p)?;
    artifact(sink, &p);
    Ok(p)
}

pub fn mcl(cfg: &PipelineConfig, model: &Path, data: &Path, out: &Path, sink: Sink<'_>) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    ensure_dir(out)?;
    let base = checkpoint::load_model(model)?;
    let (_, train) = load_split(data, TRAIN_CSV)?;
    let (snapshots, assignments, _) = run_stages(cfg, &base, &train, cfg.seed, sink)?;
    let mut paths = Vec::new();
    for s in &snapshots {
        let p = out.join(format!("stage_{}.snapshot", s.stage_id));
        checkpoint::save_snapshot(s, &base.config, &p)?;
        artifact(sink, &p);
        paths.push(p);
    }
    let p = out.join("assignments.csv");
    clusters::write_csv(&assignments, &p)?;
    artifact(sink, &p);
    Ok(paths)
}

pub fn assemble(cfg: &PipelineConfig, model: &Path, snapshots: &[PathBuf], out: &Path, sink: Sink<'_>) -> Result<PathBuf> {
    ensure_dir(out)?;
    let base = checkpoint::load_model(model)?;
    let snaps: Vec<FfnSnapshot> = snapshots
        .iter()
        .map(|p| checkpoint::load_snapshot(p).map(|(s, _)| s))
        .collect::<Result<_>>()?;
    let moe = assemble_moe(&base, &snaps, cfg.moe.top_k, cfg.seed.wrapping_add(pipeline::seeds::ROUTER_INIT))?;
    let p = out.join("dmu_moe");
    moe.save(&p)?;
    artifact(sink, &p);
    Ok(p)
}

pub fn assemble_upcycled_cmd(cfg: &PipelineConfig, model: &Path, experts: usize, out: &Path, sink: Sink<'_>) -> Result<PathBuf> {
    ensure_dir(out)?;
    let base = checkpoint::load_model(model)?;
    let moe = assemble_upcycled(&base, experts, cfg.moe.top_k, cfg.seed.wrapping_add(pipeline::seeds::ROUTER_INIT))?;
    let p = out.join("upcycled_moe");
    moe.save(&p)?;
    artifact(sink, &p);
    Ok(p)
}

fn stem(path: &Path) -> String {
    path.file_name().map_or_else(|| "moe".into(), |s| s.to_string_lossy().into_owned())
}

pub fn train_router_cmd(cfg: &PipelineConfig, moe_path: &Path, data: &Path, out: &Path, sink: Sink<'_>) -> Result<PathBuf> {
    ensure_dir(out)?;
    let mut moe = MoeModel::load(moe_path)?;
    let (_, train) = load_split(data, TRAIN_CSV)?;
    let rcfg = cfg.router_config(cfg.seed.wrapping_add(pipeline::seeds::ROUTER_BATCHES));
    let losses = train_router(&mut moe, &train, &rcfg)?;
    for (epoch, &loss) in losses.iter().enumerate() {
        sink(Event::RouterEpoch {
            seed: cfg.seed,
            model: "moe",
            epoch,
            loss,
        });
    }
    let p = out.join(format!("{}_trained", stem(moe_path)));
    moe.save(&p)?;
    artifact(sink, &p);
    Ok(p)
}

/// Retrieval and attribute probes of a dense or MoE checkpoint on the eval split.
pub fn eval(cfg: &PipelineConfig, model: &Path, data: &Path, sink: Sink<'_>) -> Result<Retrieval> {
    let (samples, eval) = load_split(data, EVAL_CSV)?;
    let (manifest, _) = checkpoint::read(model)?;
    let name = stem(model);
    let (r, probes) = match manifest.kind {
        CheckpointKind::Dense => {
            let m = checkpoint::load_model(model)?;
            (Retrieval::evaluate(&m, &eval)?, attribute_probes(&m, &samples, &eval, cfg, cfg.seed)?)
        }
        CheckpointKind::Moe => {
            let m = MoeModel::load(model)?;
            (Retrieval::evaluate(&m, &eval)?, attribute_probes(&m, &samples, &eval, cfg, cfg.seed)?)
        }
        CheckpointKind::Snapshot => {
            return Err(Error::Config(format!(
                "{} is an FFN snapshot, not a model",
                model.display()
            )))
        }
    };
    sink(Event::retrieval(cfg.seed, name, &r));
    for (attribute, &accuracy) in probes.iter().enumerate() {
        sink(Event::Probe {
            seed: cfg.seed,
            snapshot: 0,
            attribute,
            accuracy,
        });
    }
    Ok(r)
}

pub fn specialize(cfg: &PipelineConfig, moe_path: &Path, data: &Path, out: &Path, sink: Sink<'_>) -> Result<()> {
    ensure_dir(out)?;
    let moe = MoeModel::load(moe_path)?;
    let (samples, eval) = load_split(data, EVAL_CSV)?;
    let spec = specialization_report(&moe, &samples, &eval, cfg, cfg.seed)?;
    for (expert, (accs, r)) in spec.probe.iter().zip(&spec.recall).enumerate() {
        sink(Event::retrieval(cfg.seed, format!("expert_{expert}"), r));
        for (attribute, &accuracy) in accs.iter().enumerate() {
            sink(Event::ExpertProbe {
                seed: cfg.seed,
                expert,
                attribute,
                accuracy,
            });
        }
    }
    let p = out.join("specialization.json");
    let json = serde_json::to_string_pretty(&spec).expect("serializes") + "\n";
    std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    artifact(sink, &p);
    Ok(())
}

pub fn routing_stats_cmd(cfg: &PipelineConfig, moe_path: &Path, data: &Path, out: &Path, sink: Sink<'_>) -> Result<PathBuf> {
    ensure_dir(out)?;
    let moe = MoeModel::load(moe_path)?;
    let (_, eval) = load_split(data, EVAL_CSV)?;
    let stats = routing_stats(&moe, &eval)?;
    for b in &stats.blocks {
        for (expert, (&f, &p)) in b.topk_fraction.iter().zip(&b.mean_probability).enumerate() {
            sink(Event::Routing {
                seed: cfg.seed,
                model: "moe",
                block: b.block,
                expert,
                topk_fraction: f,
                mean_probability: p,
            });
        }
    }
    let p = out.join(format!("routing_{}.csv", stem(moe_path)));
    stats.write_csv(&p)?;
    artifact(sink, &p);
    Ok(p)
}

pub fn run_pipeline_cmd(cfg: &PipelineConfig, sink: Sink<'_>) -> Result<()> {
    let reports = pipeline::run_sweep(cfg, sink)?;
    for r in &reports {
        sink(Event::Summary {
            seed: r.seed,
            base_r1: r.base.mean_r1(),
            dmu_r1: r.dmu.mean_r1(),
            upcycled_r1: r.upcycled.mean_r1(),
            min_topk_fraction: r.routing_dmu.min_topk_fraction(),
        });
    }
    Ok(())
}
