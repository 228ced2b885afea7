//! Shared inputs for the benchmarks.

use graphlift::pipeline::stack_rows;
use graphlift::synth::{generate_dataset, GraspSpec, SampleRecord};
use graphlift::Tensor;

pub const BATCH: usize = 8;

pub fn records(n: usize) -> Vec<SampleRecord> {
    generate_dataset(n, 0, &GraspSpec::default()).expect("synthetic data")
}

/// Stacked `(n·29)×2` pixel inputs and `(n·29)×3` targets.
pub fn lift_batch(n: usize) -> (Tensor, Tensor) {
    let r = records(n);
    let x: Vec<Tensor> = r.iter().map(SampleRecord::gt2d_tensor).collect();
    let y: Vec<Tensor> = r.iter().map(SampleRecord::gt3d_tensor).collect();
    (
        stack_rows(&x.iter().collect::<Vec<_>>()).expect("same shapes"),
        stack_rows(&y.iter().collect::<Vec<_>>()).expect("same shapes"),
    )
}
