//! Criterion benchmarks for the kernels, blocks and full network live in
//! `benches/`; run them with `cargo bench -p sact-bench`.
