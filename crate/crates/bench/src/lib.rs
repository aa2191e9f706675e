//! Criterion benchmarks for the sleepradar hot paths; see `benches/`.
