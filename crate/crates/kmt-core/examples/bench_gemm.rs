//! Rough single-core GEMM throughput probe for sizing training budgets.
//!
//! Run with `cargo run --release -p kmt-core --example bench_gemm`.

use ndarray::Array2;
use std::time::Instant;

fn bench(m: usize, k: usize, n: usize, reps: usize) {
    let a = Array2::<f32>::from_elem((m, k), 1.0f32);
    let b = Array2::<f32>::from_elem((k, n), 0.5f32);
    // Warm up once.
    let mut sink = a.dot(&b);
    let start = Instant::now();
    for _ in 0..reps {
        sink = a.dot(&b);
    }
    let secs = start.elapsed().as_secs_f64();
    let flops = 2.0 * (m * k * n * reps) as f64;
    println!(
        "{m:>5} x {k:>4} x {n:>5}: {:>7.2} GFLOP/s  ({:.1} ms/call, sink {:.1})",
        flops / secs / 1e9,
        secs * 1e3 / reps as f64,
        sink[[0, 0]]
    );
}

fn main() {
    // Shapes that appear in the training step at desk scale.
    bench(2048, 256, 256, 40); // qkv/out projections, batch of packed rows
    bench(2048, 256, 1024, 10); // mlp up
    bench(2048, 1024, 256, 10); // mlp down
    bench(2048, 256, 2048, 6); // lm head (vocab ~2k)
    bench(256, 2048, 1024, 10); // weight gradient shape
    bench(128, 32, 128, 400); // per-head attention scores
}
