//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use common::{brute_force_masked_infonce, f64_moe, random_unit_rows, small_config};
use dmu::checkpoint::{self, Manifest};
use dmu::encoder::{DualEncoder, EncoderConfig, Phase, Tower};
use dmu::error::Error;
use dmu::gradcheck::check_gradients;
use dmu::harness::{run_pipeline, EvalReport, PipelineConfig};
use dmu::mcl::{masked_infonce, masked_infonce_value, run_mcl_stage, StageConfig};
use dmu::moe::{
    assemble_upcycled, balance_from_parts, balance_value, batch_loss, route_logits, train_router, MoeModel, Routing,
    RouterTrainConfig,
};
use dmu::rng;
use dmu::synth::{generate_dataset, AttributeSpec, PairedData};
use dmu::tensor::{DType, Tensor};

const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const FD_MIN_PROBES: usize = 20;

struct Outcome {
    pass: bool,
    detail: String,
    /// Runtime measured outside the check itself (shared pipeline runs).
    elapsed: Option<Duration>,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
        elapsed: None,
    }
}

fn paired(n: usize, seed: u64) -> PairedData {
    PairedData::from_samples(&generate_dataset(n, 0, &AttributeSpec::default(), seed).unwrap().train)
}

fn c1_gradients() -> Outcome {
    let probes = 2 * FD_MIN_PROBES;
    // Router-training graph: MoE forward of both towers, top-K routing,
    // balancing terms and the plain contrastive loss. Every parameter is
    // unfrozen so the expert and projection paths are probed too.
    let cfg = EncoderConfig {
        input_dim_image: 24,
        input_dim_text: 24,
        ..small_config()
    };
    let (_, mut moe) = f64_moe(cfg.clone(), 4, 2, 3);
    let ids: Vec<_> = moe.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        moe.store.set_frozen(id, false);
    }
    let data = paired(16, 3);
    let idx: Vec<usize> = (0..8).collect();
    let template = moe.clone();
    let mut store = moe.store.clone();
    let moe_check = check_gradients(&mut store, probes, 11, FD_STEP, |s, tape| {
        let m = MoeModel {
            store: s.clone(),
            ..template.clone()
        };
        batch_loss(&m, tape, &data, &idx, 0.01)
    });
    let mut router_store = moe.store.clone();
    router_store.freeze_all();
    for id in moe.router_ids() {
        router_store.set_frozen(id, false);
    }
    let router_check = check_gradients(&mut router_store, probes, 12, FD_STEP, |s, tape| {
        let m = MoeModel {
            store: s.clone(),
            ..template.clone()
        };
        batch_loss(&m, tape, &data, &idx, 0.01)
    });

    // Key-masked contrastive graph through the dense encoder.
    let mut enc = DualEncoder::new(cfg, DType::F64, 5).unwrap();
    enc.set_phase(Phase::BaseTraining);
    let keys = [0, 1, 0, 0, 1, 2, 1, 0];
    let enc_template = enc.clone();
    let mut enc_store = enc.store.clone();
    let mcl_check = check_gradients(&mut enc_store, probes, 13, FD_STEP, |s, tape| {
        let mut m = enc_template.clone();
        m.store = s.clone();
        let xi = tape.constant(dmu::tensor::gather_rows(&data.image, &idx)?.to_dtype(DType::F64));
        let xt = tape.constant(dmu::tensor::gather_rows(&data.text, &idx)?.to_dtype(DType::F64));
        let zi = m.forward(tape, Tower::Image, xi)?;
        let zt = m.forward(tape, Tower::Text, xt)?;
        masked_infonce(tape, zi, zt, &keys, m.config.temperature)
    });

    match (moe_check, router_check, mcl_check) {
        (Ok(a), Ok(r), Ok(b)) => {
            let n = a.probes.len() + r.probes.len() + b.probes.len();
            let worst = a.max_rel_error().max(r.max_rel_error()).max(b.max_rel_error());
            outcome(
                worst < FD_REL_TOL && n >= FD_MIN_PROBES,
                format!(
                    "{n} probes; max rel err moe={:.2e} router={:.2e} masked={:.2e}",
                    a.max_rel_error(),
                    r.max_rel_error(),
                    b.max_rel_error()
                ),
            )
        }
        (a, r, b) => outcome(false, format!("error: {:?} {:?} {:?}", a.err(), r.err(), b.err())),
    }
}

fn c2_balancing() -> Outcome {
    let tol = 1e-9;
    let uniform = balance_from_parts(&[0.25; 4], &[0.25; 4]);
    let collapse_parts = balance_from_parts(&[1.0, 0.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]);
    // A batch whose router puts essentially all mass on expert 0.
    let collapse_logits = Tensor::from_nested(&vec![vec![60.0, 0.0, 0.0, 0.0]; 8], DType::F64);
    let collapse = balance_value(&collapse_logits).unwrap();
    let mut r = rng::seeded(2024, 2);
    let mut min: f64 = f64::INFINITY;
    for _ in 0..1000 {
        let w: Vec<f64> = (0..4).map(|_| Exp1.sample(&mut r)).collect::<Vec<f64>>();
        let z: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|v| v / z).collect();
        let rows = r.random_range(1..6);
        let logits = Tensor::from_nested(&vec![p.iter().map(|v| v.ln()).collect(); rows], DType::F64);
        min = min.min(balance_value(&logits).unwrap());
    }
    let pass = (uniform - 0.75).abs() <= tol
        && (collapse_parts - 3.0).abs() <= tol
        && (collapse - 3.0).abs() <= tol
        && min >= 0.75 - tol;
    outcome(
        pass,
        format!("uniform={uniform:.12} collapse={collapse:.12} min over 1000 simplex points={min:.6}"),
    )
}

fn c3_mask_oracle() -> Outcome {
    let mut r = rng::seeded(3, 3);
    let mut worst: f64 = 0.0;
    for batch in 0..200u64 {
        let n = r.random_range(2..=16);
        let groups = r.random_range(1..=5);
        let keys: Vec<usize> = (0..n).map(|_| r.random_range(0..groups)).collect();
        let d = r.random_range(2..=8);
        let img = random_unit_rows(n, d, 2 * batch);
        let txt = random_unit_rows(n, d, 2 * batch + 1);
        let fast = masked_infonce_value(&img, &txt, &keys, 0.07).unwrap();
        let slow = brute_force_masked_infonce(&img, &txt, &keys, 0.07);
        worst = worst.max((fast - slow).abs());
    }
    outcome(worst <= 1e-10, format!("200 batches, max abs diff {worst:.2e}"))
}

fn c4_freeze() -> Outcome {
    let data = paired(256, 4);
    let mut model = DualEncoder::new(EncoderConfig::default(), DType::F32, 4).unwrap();
    let before = model.clone();
    let cfg = StageConfig {
        epochs: 2,
        batch_size: 64,
        ..StageConfig::default()
    };
    let ffn = model.ffn_param_ids();
    let first = run_mcl_stage(&mut model, &data, &[], &cfg).unwrap();
    let after_one = model.clone();
    run_mcl_stage(&mut model, &data, &first.assignments, &cfg).unwrap();
    let mut stage_ok = true;
    for (prev, next) in [(&before, &after_one), (&after_one, &model)] {
        for (id, p) in next.store.iter() {
            if !ffn.contains(&id) && p.value.data() != prev.store.get(id).value.data() {
                stage_ok = false;
            }
        }
    }
    let ffn_moved = ffn.iter().any(|&id| model.store.value(id) != before.store.value(id));

    let mut moe = assemble_upcycled(&model, 4, 2, 9).unwrap();
    let assembled = moe.clone();
    let rcfg = RouterTrainConfig {
        epochs: 2,
        batch_size: 64,
        ..RouterTrainConfig::default()
    };
    train_router(&mut moe, &data, &rcfg).unwrap();
    let routers = moe.router_ids();
    let mut router_ok = true;
    let mut router_moved = false;
    for (id, p) in moe.store.iter() {
        let old = &assembled.store.get(id).value;
        if routers.contains(&id) {
            router_moved |= p.value != *old;
        } else if p.value.data() != old.data() {
            router_ok = false;
        }
    }
    outcome(
        stage_ok && router_ok && ffn_moved && router_moved,
        format!("stage non-FFN identical={stage_ok}, non-router identical={router_ok}, trained params moved={}", ffn_moved && router_moved),
    )
}

fn c5_routing() -> Outcome {
    let mut r = rng::seeded(5, 5);
    let mut contract_ok = true;
    for _ in 0..200 {
        let e = r.random_range(2..=8);
        let k = r.random_range(1..=e);
        let logits = rng::uniform(&mut r, 6, e, 3.0, DType::F64);
        let routes = route_logits(&logits, k).unwrap();
        let shift: f64 = r.random_range(-50.0..50.0);
        let shifted = route_logits(&logits.map(|v| v + shift), k).unwrap();
        for (w, idx) in routes.weights.iter().zip(&routes.indices) {
            contract_ok &= w.len() == k && idx.len() == k && w.iter().all(|&v| v > 0.0);
            contract_ok &= (w.iter().sum::<f64>() - 1.0).abs() <= 1e-6;
        }
        contract_ok &= routes.indices == shifted.indices;
    }
    let base = DualEncoder::new(small_config(), DType::F64, 6).unwrap();
    let moe = assemble_upcycled(&base, 4, 2, 7).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let x = rng::uniform(&mut rng::seeded(i, 55), 4, 8, 2.0, DType::F64);
        let block = (i % 4) as usize;
        let a = moe.block_forward(block, &x, Routing::Learned).unwrap();
        let b = base.block_forward(block, &x).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            worst = worst.max((u - v).abs());
        }
    }
    outcome(
        contract_ok && worst <= 1e-6,
        format!("weights/shift contract={contract_ok}, identical-expert max diff {worst:.2e} over 100 inputs"),
    )
}

fn stage_gains(report: &EvalReport) -> Vec<f64> {
    let base = &report.stage_probes[0];
    report.stage_probes[1..]
        .iter()
        .map(|accs| accs.iter().zip(base).map(|(a, b)| a - b).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

fn c6_diversification(report: &EvalReport) -> Outcome {
    let gains = stage_gains(report);
    let hits = gains.iter().filter(|&&g| g >= 0.10).count();
    outcome(
        hits >= 2,
        format!(
            "stages with a >=0.10 attribute gain: {hits}/3; best gain per stage {gains:.3?}; base probes {:?}",
            report.stage_probes[0]
        ),
    )
}

fn c7_ablation(reports: &[EvalReport]) -> Outcome {
    let pairs: Vec<(f64, f64)> = reports.iter().map(|r| (r.dmu.mean_r1(), r.upcycled.mean_r1())).collect();
    let within = pairs.iter().all(|&(d, u)| d >= u - 0.01);
    let strict = pairs.iter().filter(|&&(d, u)| d > u).count();
    outcome(
        within && strict >= 3,
        format!(
            "dmu-upcycled mean R@1 per seed {:?}; strictly greater in {strict}/5",
            pairs.iter().map(|(d, u)| format!("{:+.3}", d - u)).collect::<Vec<_>>()
        ),
    )
}

fn c8_utilization(reports: &[EvalReport]) -> Outcome {
    let mins: Vec<f64> = reports.iter().map(|r| r.routing_dmu.min_topk_fraction()).collect();
    let ok = mins.iter().filter(|&&m| m >= 0.05).count();
    outcome(ok >= 4, format!("min top-K fraction per seed {mins:.3?}; {ok}/5 seeds >= 0.05"))
}

fn c9_persistence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let bytes = |path: &std::path::Path| {
        (
            std::fs::read(checkpoint::manifest_path(path)).unwrap(),
            std::fs::read(checkpoint::blob_path(path)).unwrap(),
        )
    };
    let mut model = DualEncoder::new(EncoderConfig::default(), DType::F32, 9).unwrap();
    model.set_phase(Phase::FfnOnly);
    let snap = model.extract_ffn_snapshot(2);
    let moe = assemble_upcycled(&model, 4, 2, 9).unwrap();

    checkpoint::save_model(&model, &p("a")).unwrap();
    checkpoint::save_model(&checkpoint::load_model(&p("a")).unwrap(), &p("b")).unwrap();
    checkpoint::save_snapshot(&snap, &model.config, &p("c")).unwrap();
    let (s2, c2) = checkpoint::load_snapshot(&p("c")).unwrap();
    checkpoint::save_snapshot(&s2, &c2, &p("d")).unwrap();
    moe.save(&p("e")).unwrap();
    MoeModel::load(&p("e")).unwrap().save(&p("f")).unwrap();
    let identical = bytes(&p("a")) == bytes(&p("b")) && bytes(&p("c")) == bytes(&p("d")) && bytes(&p("e")) == bytes(&p("f"));

    let manifest: Manifest = serde_json::from_slice(&std::fs::read(checkpoint::manifest_path(&p("a"))).unwrap()).unwrap();
    let blob = std::fs::read(checkpoint::blob_path(&p("a"))).unwrap();
    let write_case = |name: &str, m: &Manifest, b: &[u8]| {
        let path = p(name);
        std::fs::write(checkpoint::manifest_path(&path), serde_json::to_string(m).unwrap()).unwrap();
        std::fs::write(checkpoint::blob_path(&path), b).unwrap();
        checkpoint::load_model(&path).err()
    };
    let mut checks = Vec::new();
    let mut m = manifest.clone();
    m.format_version = 99;
    checks.push(matches!(write_case("v", &m, &blob), Some(Error::CorruptManifest(_))));
    let mut m = manifest.clone();
    m.tensors[1].byte_length += 4;
    checks.push(matches!(write_case("len", &m, &blob), Some(Error::ShapeMismatch { .. })));
    let mut m = manifest.clone();
    m.tensors[2].byte_offset += 4;
    checks.push(matches!(write_case("off", &m, &blob), Some(Error::CorruptManifest(_))));
    checks.push(matches!(write_case("trunc", &manifest, &blob[..blob.len() - 8]), Some(Error::TruncatedBlob { .. })));
    // Transposed declared shape: byte lengths still agree, layout does not.
    let mut m = manifest.clone();
    m.tensors[0].shape.reverse();
    checks.push(matches!(write_case("shape", &m, &blob), Some(Error::ShapeMismatch { .. })));
    let mut m = manifest.clone();
    m.tensors[3].name = "block_9.ffn.w1".into();
    checks.push(matches!(write_case("name", &m, &blob), Some(Error::CorruptManifest(_))));
    std::fs::write(checkpoint::manifest_path(&p("junk")), "{not json").unwrap();
    std::fs::write(checkpoint::blob_path(&p("junk")), &blob).unwrap();
    checks.push(matches!(checkpoint::load_model(&p("junk")), Err(Error::CorruptManifest(_))));
    let mutations_ok = checks.iter().all(|&c| c);
    outcome(
        identical && mutations_ok,
        format!("save-load-save identical={identical}; {}/{} mutations raised the designated error", checks.iter().filter(|&&c| c).count(), checks.len()),
    )
}

fn c10_determinism(first: &EvalReport) -> Outcome {
    let cfg = PipelineConfig::default();
    let again = run_pipeline(&cfg).unwrap();
    let (a, b) = (first.to_json(), again.to_json());
    outcome(a == b, format!("{} report bytes, identical={}", a.len(), a == b))
}

fn main() {
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().unwrap();
    let mut results: Vec<(usize, &str, Duration, Duration, Outcome)> = Vec::new();
    let mut run = |id: usize, name: &'static str, budget: u64, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let took = o.elapsed.unwrap_or_else(|| t.elapsed());
        let budget = Duration::from_secs(budget);
        let line = format!(
            "criterion {id:>2} {name}: {} ({}; {:.1}s, budget {}s)",
            if o.pass && took <= budget { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
        println!("{line}");
        results.push((id, name, took, budget, o));
    };

    run(1, "gradient fidelity", 60, &mut c1_gradients);
    run(2, "balancing-loss landmarks", 5, &mut c2_balancing);
    run(3, "masked contrastive oracle", 30, &mut c3_mask_oracle);
    run(4, "freeze partitions", 60, &mut c4_freeze);
    run(5, "routing contract", 30, &mut c5_routing);

    let mut reports = Vec::new();
    let sweep_start = Instant::now();
    let mut seed0_time = Duration::ZERO;
    for seed in 0..5 {
        let t = Instant::now();
        let cfg = PipelineConfig {
            seed,
            ..PipelineConfig::default()
        };
        reports.push(run_pipeline(&cfg).expect("pipeline run"));
        if seed == 0 {
            seed0_time = t.elapsed();
        }
    }
    let sweep_time = sweep_start.elapsed();
    run(6, "diversification", 600, &mut || {
        let mut o = c6_diversification(&reports[0]);
        o.elapsed = Some(seed0_time);
        o
    });
    run(7, "ablation direction", 900, &mut || {
        let mut o = c7_ablation(&reports);
        o.elapsed = Some(sweep_time);
        o
    });
    run(8, "router utilization", 900, &mut || Outcome {
        elapsed: Some(sweep_time),
        ..c8_utilization(&reports)
    });
    run(9, "persistence", 5, &mut c9_persistence);
    run(10, "determinism", 1200, &mut || {
        let t = Instant::now();
        let mut o = c10_determinism(&reports[0]);
        o.elapsed = Some(seed0_time + t.elapsed());
        o
    });

    let failed: Vec<_> = results
        .iter()
        .filter(|(_, _, took, budget, o)| !o.pass || took > budget)
        .map(|(id, name, ..)| format!("{id} ({name})"))
        .collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
