//! Finite-difference check of the key-masked contrastive loss through a
//! float64 dual encoder.
//!
//! cargo run --example gradcheck

use dmu::encoder::{DualEncoder, EncoderConfig, Phase, Tower};
use dmu::gradcheck::check_gradients;
use dmu::mcl::masked_infonce;
use dmu::rng;
use dmu::tensor::DType;

fn main() -> dmu::Result<()> {
    let cfg = EncoderConfig {
        input_dim_image: 12,
        input_dim_text: 10,
        model_dim: 8,
        ffn_hidden: 16,
        blocks_image: 2,
        blocks_text: 2,
        temperature: 0.07,
    };
    let mut enc = DualEncoder::new(cfg.clone(), DType::F64, 1)?;
    enc.set_phase(Phase::BaseTraining);
    let img = rng::uniform(&mut rng::seeded(2, 0), 8, cfg.input_dim_image, 1.0, DType::F64);
    let txt = rng::uniform(&mut rng::seeded(2, 1), 8, cfg.input_dim_text, 1.0, DType::F64);
    let keys = [0, 0, 1, 1, 0, 2, 1, 0];

    let template = enc.clone();
    let mut store = enc.store.clone();
    let check = check_gradients(&mut store, 64, 3, 1e-6, |s, tape| {
        let mut m = template.clone();
        m.store = s.clone();
        let xi = tape.constant(img.clone());
        let xt = tape.constant(txt.clone());
        let zi = m.forward(tape, Tower::Image, xi)?;
        let zt = m.forward(tape, Tower::Text, xt)?;
        masked_infonce(tape, zi, zt, &keys, cfg.temperature)
    })?;

    println!("probes: {}", check.probes.len());
    println!("max relative error: {:.3e}", check.max_rel_error());
    if let Some(p) = check.worst() {
        println!(
            "worst: {}[{}] analytic {:.6e} numeric {:.6e}",
            p.param, p.index, p.analytic, p.numeric
        );
    }
    Ok(())
}
