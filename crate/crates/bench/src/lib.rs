//! Criterion benchmarks for the hot paths of `ancl-core`; see `benches/`.
