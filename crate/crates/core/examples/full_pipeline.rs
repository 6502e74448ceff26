//! Full run: base training, three extraction stages, DMU and upcycled MoE
//! assembly, router fine-tuning and evaluation.
//!
//! cargo run --release --example full_pipeline -- [seed] [out_dir]

use dmu::harness::{run_pipeline_with, Event, PipelineConfig};

fn main() -> dmu::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = PipelineConfig::default();
    if let Some(seed) = args.next() {
        cfg.seed = seed.parse().expect("seed must be an integer");
    }
    cfg.output_dir = args.next().map(Into::into);
    cfg.record_timings = true;
    let report = run_pipeline_with(&cfg, &mut |e| {
        if !matches!(e, Event::StageEpoch { .. } | Event::BaseEpoch { .. } | Event::Routing { .. }) {
            println!("{}", e.to_json_line());
        }
    })?;
    print!("{}", report.to_text());
    Ok(())
}
