//! Criterion benchmarks for kernel sums, score evaluation and the sampler
//! live under `benches/`; run them with `cargo bench -p flowode-bench`.
