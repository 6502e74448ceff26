//! Saves a dense encoder, an FFN snapshot and an MoE to disk and reloads
//! them bit for bit.
//!
//! cargo run --example checkpoint_roundtrip -- [dir]

use dmu::checkpoint::{blob_path, load_model, load_snapshot, manifest_path, save_model, save_snapshot};
use dmu::encoder::{DualEncoder, EncoderConfig};
use dmu::moe::{assemble_upcycled, MoeModel};
use dmu::tensor::DType;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "runs/checkpoints".into());
    let dir = std::path::PathBuf::from(dir);
    std::fs::create_dir_all(&dir)?;

    let model = DualEncoder::new(EncoderConfig::default(), DType::F32, 9)?;
    let path = dir.join("base");
    save_model(&model, &path)?;
    let back = load_model(&path)?;
    println!("{} + {}", manifest_path(&path).display(), blob_path(&path).display());
    println!("dense round trip identical: {}", back.store.iter().zip(model.store.iter()).all(|(a, b)| a.1.value == b.1.value));

    let snap = model.extract_ffn_snapshot(1);
    let snap_path = dir.join("stage_1.snapshot");
    save_snapshot(&snap, &model.config, &snap_path)?;
    let (snap_back, _) = load_snapshot(&snap_path)?;
    println!("snapshot round trip identical: {}", snap_back == snap);

    let moe = assemble_upcycled(&model, 4, 2, 9)?;
    let moe_path = dir.join("moe");
    moe.save(&moe_path)?;
    let moe_back = MoeModel::load(&moe_path)?;
    println!(
        "moe round trip identical: {}",
        moe_back.store.iter().zip(moe.store.iter()).all(|(a, b)| a.1.value == b.1.value)
    );
    Ok(())
}
