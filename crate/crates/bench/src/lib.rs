//! Criterion benchmarks for the numeric kernels live in `benches/`; run them with `cargo bench -p slowfast-bench`.
