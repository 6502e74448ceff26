//! Builds the DMU mixture from stage snapshots and the upcycled baseline from
//! copies of the base FFNs, then checks what each one computes.
//!
//! cargo run --release --example assemble_moe

use dmu::encoder::Tower;
use dmu::harness::pipeline::{run_stages, train_base};
use dmu::harness::PipelineConfig;
use dmu::moe::{assemble_moe, assemble_upcycled, Routing};
use dmu::synth::{generate_dataset, PairedData};

fn max_abs_diff(a: &dmu::tensor::Tensor, b: &dmu::tensor::Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn main() -> dmu::Result<()> {
    let cfg = PipelineConfig {
        n_train: 800,
        n_eval: 200,
        ..PipelineConfig::default()
    };
    let split = generate_dataset(cfg.n_train, cfg.n_eval, &cfg.spec, cfg.seed)?;
    let train = PairedData::from_samples(&split.train);
    let eval = PairedData::from_samples(&split.eval);
    let (base, _) = train_base(&cfg, &train, cfg.seed, &mut |_| {})?;
    let (snapshots, _, _) = run_stages(&cfg, &base, &train, cfg.seed, &mut |_| {})?;

    let dmu_moe = assemble_moe(&base, &snapshots, cfg.moe.top_k, cfg.seed)?;
    let upcycled = assemble_upcycled(&base, snapshots.len(), cfg.moe.top_k, cfg.seed)?;
    println!(
        "experts {}, top-k {}, trainable router parameters {}",
        dmu_moe.num_experts(),
        dmu_moe.top_k,
        dmu_moe.store.trainable_count()
    );

    let reference = base.encode(Tower::Image, &eval.image)?;
    let up = upcycled.encode_with(Tower::Image, &eval.image, Routing::Learned)?;
    println!("upcycled vs base, max |diff|: {:.3e}", max_abs_diff(&up, &reference));
    for j in 0..dmu_moe.num_experts() {
        let forced = dmu_moe.encode_with(Tower::Image, &eval.image, Routing::Forced(j))?;
        println!("DMU forced to expert {j} vs base, max |diff|: {:.3e}", max_abs_diff(&forced, &reference));
    }
    let learned = dmu_moe.encode_with(Tower::Image, &eval.image, Routing::Learned)?;
    println!("DMU learned routing vs base, max |diff|: {:.3e}", max_abs_diff(&learned, &reference));
    Ok(())
}
