//! Criterion benchmarks for the scoring and network kernels; see `benches/`.
