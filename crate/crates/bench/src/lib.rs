//! Criterion benchmarks for the matching and convolution hot paths live in `benches/`.
