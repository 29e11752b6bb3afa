//! Criterion benchmarks for `dmamba`; see `benches/`.
