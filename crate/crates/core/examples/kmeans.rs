//! Seeded k-means on three well separated blobs.
//!
//! cargo run --example kmeans

use dmu::mcl::kmeans;
use dmu::rng;
use dmu::tensor::{DType, Tensor};

fn main() -> dmu::Result<()> {
    let centers = [[4.0, 0.0], [-4.0, 0.0], [0.0, 5.0]];
    let noise = rng::uniform(&mut rng::seeded(0, 0), 90, 2, 0.5, DType::F64);
    let data: Vec<f64> = (0..90)
        .flat_map(|i| {
            let c = centers[i % 3];
            [c[0] + noise.get(i, 0), c[1] + noise.get(i, 1)]
        })
        .collect();
    let points = Tensor::from_rows(90, 2, data, DType::F64);

    let res = kmeans(&points, 3, 42)?;
    println!("iterations: {}", res.iterations_run);
    println!("inertia: {:.4}", res.inertia);
    for j in 0..3 {
        let size = res.labels.iter().filter(|&&l| l == j).count();
        println!("cluster {j}: size {size}, centroid {:?}", res.centroids.row(j));
    }
    let again = kmeans(&points, 3, 42)?;
    println!("same seed reproduces labels: {}", again.labels == res.labels);
    Ok(())
}
