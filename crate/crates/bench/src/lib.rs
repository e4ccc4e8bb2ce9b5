//! Criterion benchmarks live under `benches/`; run them with `cargo bench -p trackbench-bench`.
