//! Criterion benchmarks for skydmd live under `benches/`.
