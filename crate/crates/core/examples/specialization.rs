//! Forces every token through a single expert and reports which attribute
//! each expert encodes best.
//!
//! cargo run --release --example specialization

use dmu::harness::pipeline::{run_stages, train_base};
use dmu::harness::{specialization_report, PipelineConfig};
use dmu::moe::assemble_moe;
use dmu::synth::{generate_dataset, PairedData};

fn main() -> dmu::Result<()> {
    let cfg = PipelineConfig::default();
    let split = generate_dataset(cfg.n_train, cfg.n_eval, &cfg.spec, cfg.seed)?;
    let train = PairedData::from_samples(&split.train);
    let eval = PairedData::from_samples(&split.eval);
    let (base, _) = train_base(&cfg, &train, cfg.seed, &mut |_| {})?;
    let (snapshots, _, _) = run_stages(&cfg, &base, &train, cfg.seed, &mut |_| {})?;
    let moe = assemble_moe(&base, &snapshots, cfg.moe.top_k, cfg.seed)?;

    let spec = specialization_report(&moe, &split.eval, &eval, &cfg, cfg.seed)?;
    for (j, probes) in spec.probe.iter().enumerate() {
        let p: Vec<String> = probes.iter().map(|x| format!("{x:.3}")).collect();
        println!(
            "expert {j}: probes [{}], best attribute {}, mean R@1 {:.3}",
            p.join(", "),
            spec.best_attribute[j],
            spec.recall[j].mean_r1()
        );
    }
    Ok(())
}
