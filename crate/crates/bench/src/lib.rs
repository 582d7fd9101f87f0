//! Benchmarks only; see `benches/layers.rs`.
