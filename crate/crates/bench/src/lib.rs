//! Criterion benchmarks for the numeric kernels and training steps; see `benches/`.
