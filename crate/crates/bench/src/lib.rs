//! Criterion benchmarks for the PAD workspace live under `benches/`.
