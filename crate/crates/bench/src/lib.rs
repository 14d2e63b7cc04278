//! Criterion benchmarks for the laboratory kernels; see `benches/`.
