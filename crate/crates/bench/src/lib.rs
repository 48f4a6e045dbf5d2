//! Criterion benchmarks for the kkflow kernels; see `benches/`.
