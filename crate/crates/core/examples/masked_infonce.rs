//! How restricting negatives to an anchor's cluster changes the
//! contrastive loss.
//!
//! cargo run --example masked_infonce

use dmu::mcl::masked_infonce_value;
use dmu::rng;
use dmu::tensor::{l2_normalize_rows, DType};

fn main() -> dmu::Result<()> {
    let n = 8;
    let img = l2_normalize_rows(&rng::uniform(&mut rng::seeded(0, 0), n, 6, 1.0, DType::F64))?;
    let txt = l2_normalize_rows(&rng::uniform(&mut rng::seeded(0, 1), n, 6, 1.0, DType::F64))?;
    let tau = 0.07;

    let cases: [(&str, Vec<usize>); 4] = [
        ("one cluster (plain InfoNCE)", vec![0; n]),
        ("two clusters", vec![0, 0, 0, 0, 1, 1, 1, 1]),
        ("four clusters", vec![0, 0, 1, 1, 2, 2, 3, 3]),
        ("singletons (no negatives)", (0..n).collect()),
    ];
    for (name, keys) in &cases {
        println!("{name:<30} loss {:.6}", masked_infonce_value(&img, &txt, keys, tau)?);
    }
    Ok(())
}
