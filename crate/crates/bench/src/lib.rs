//! Criterion benchmarks for the attention layer, convolutions and label assignment live in `benches/kernels.rs`.
