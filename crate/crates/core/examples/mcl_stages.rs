//! Base training followed by three cluster-then-contrast stages, printing
//! how the accumulated clusters refine and how the FFN weights move.
//!
//! cargo run --release --example mcl_stages

use dmu::harness::pipeline::train_base;
use dmu::harness::PipelineConfig;
use dmu::mcl::{clusters::distinct_keys, run_mcl};
use dmu::synth::{generate_dataset, PairedData};

fn main() -> dmu::Result<()> {
    let cfg = PipelineConfig {
        n_train: 1000,
        n_eval: 0,
        ..PipelineConfig::default()
    };
    let split = generate_dataset(cfg.n_train, cfg.n_eval, &cfg.spec, cfg.seed)?;
    let train = PairedData::from_samples(&split.train);
    let (mut model, base_losses) = train_base(&cfg, &train, cfg.seed, &mut |_| {})?;
    println!("base final loss {:.4}", base_losses.last().copied().unwrap_or(f64::NAN));

    let stage_cfg = dmu::mcl::StageConfig {
        seed: cfg.seed,
        ..cfg.stage.clone()
    };
    let out = run_mcl(&mut model, &train, cfg.num_stages, &stage_cfg)?;
    for (s, losses) in out.stage_losses.iter().enumerate() {
        let keys: Vec<_> = out
            .assignments
            .iter()
            .map(|a| dmu::mcl::ClusterAssignment {
                sample_id: a.sample_id,
                labels: a.key(s + 1).to_vec(),
            })
            .collect();
        let moved: f64 = out.snapshots[s + 1]
            .blocks
            .iter()
            .zip(&out.snapshots[0].blocks)
            .flat_map(|(a, b)| a.w1.data().iter().zip(b.w1.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        println!(
            "stage {}: {} accumulated clusters, final loss {:.4}, max |dW1| vs base {:.4}",
            s + 1,
            distinct_keys(&keys),
            losses.last().copied().unwrap_or(f64::NAN),
            moved
        );
    }
    Ok(())
}
