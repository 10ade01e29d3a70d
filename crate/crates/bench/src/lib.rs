//! Criterion benchmarks for bragg-core; see `benches/`.
