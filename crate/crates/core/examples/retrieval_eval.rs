//! Recall@K in both directions and per-attribute linear probes, for raw
//! inputs and for a trained base encoder.
//!
//! cargo run --release --example retrieval_eval

use dmu::encoder::Tower;
use dmu::harness::pipeline::{probe_embeddings, train_base};
use dmu::harness::{PipelineConfig, Retrieval};
use dmu::synth::{generate_dataset, PairedData};

fn main() -> dmu::Result<()> {
    let cfg = PipelineConfig::default();
    let split = generate_dataset(cfg.n_train, cfg.n_eval, &cfg.spec, cfg.seed)?;
    let train = PairedData::from_samples(&split.train);
    let eval = PairedData::from_samples(&split.eval);
    let (base, _) = train_base(&cfg, &train, cfg.seed, &mut |_| {})?;

    let r = Retrieval::evaluate(&base, &eval)?;
    println!("image->text R@1 {:.3} R@5 {:.3} R@10 {:.3}", r.i2t.r1, r.i2t.r5, r.i2t.r10);
    println!("text->image R@1 {:.3} R@5 {:.3} R@10 {:.3}", r.t2i.r1, r.t2i.r5, r.t2i.r10);

    let (a, v) = (cfg.spec.num_attributes, cfg.spec.values_per_attribute);
    let raw = probe_embeddings(&eval.image, &split.eval, a, v, cfg.seed)?;
    let emb = base.encode(Tower::Image, &eval.image)?;
    let learned = probe_embeddings(&emb, &split.eval, a, v, cfg.seed)?;
    for i in 0..a {
        println!("attribute {i}: probe on raw inputs {:.3}, on base embeddings {:.3}", raw[i], learned[i]);
    }
    Ok(())
}
