//! Benchmark support crate; the benches live under `benches/`.
