//! Load-balancing term on flat, collapsed and mixed router logits.
//!
//! cargo run --example balancing_loss

use dmu::moe::{balance_value, first_choice_fractions};
use dmu::tensor::{DType, Tensor};

fn main() -> dmu::Result<()> {
    let uniform = Tensor::from_rows(4, 4, vec![0.0; 16], DType::F64);
    let collapsed = Tensor::from_nested(&vec![vec![30.0, 0.0, 0.0, 0.0]; 4], DType::F64);
    let mixed = Tensor::from_nested(
        &[
            vec![2.0, 0.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0, 0.0],
            vec![2.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ],
        DType::F64,
    );
    for (name, logits) in [("flat", &uniform), ("collapsed", &collapsed), ("mixed", &mixed)] {
        println!(
            "{name:<10} f = {:?}  loss = {:.4}",
            first_choice_fractions(logits),
            balance_value(logits)?
        );
    }
    Ok(())
}
