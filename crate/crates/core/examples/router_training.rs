//! Router-only fine-tuning of an assembled mixture, followed by per-block
//! utilization.
//!
//! cargo run --release --example router_training

use dmu::harness::pipeline::{run_stages, train_base};
use dmu::harness::PipelineConfig;
use dmu::moe::{assemble_moe, routing_stats, train_router};
use dmu::synth::{generate_dataset, PairedData};

fn main() -> dmu::Result<()> {
    let cfg = PipelineConfig {
        n_train: 1000,
        n_eval: 250,
        ..PipelineConfig::default()
    };
    let split = generate_dataset(cfg.n_train, cfg.n_eval, &cfg.spec, cfg.seed)?;
    let train = PairedData::from_samples(&split.train);
    let eval = PairedData::from_samples(&split.eval);
    let (base, _) = train_base(&cfg, &train, cfg.seed, &mut |_| {})?;
    let (snapshots, _, _) = run_stages(&cfg, &base, &train, cfg.seed, &mut |_| {})?;
    let mut moe = assemble_moe(&base, &snapshots, cfg.moe.top_k, cfg.seed)?;

    let before = routing_stats(&moe, &eval)?;
    let losses = train_router(&mut moe, &train, &cfg.router_config(cfg.seed))?;
    for (epoch, l) in losses.iter().enumerate() {
        println!("epoch {epoch:>2} loss {l:.4}");
    }
    let after = routing_stats(&moe, &eval)?;
    println!("min top-k fraction: before {:.3}, after {:.3}", before.min_topk_fraction(), after.min_topk_fraction());
    for b in &after.blocks {
        let f: Vec<String> = b.topk_fraction.iter().map(|x| format!("{x:.3}")).collect();
        println!("block {} top-k fractions [{}]", b.block, f.join(", "));
    }
    Ok(())
}
