//! Benchmark-only crate; see `benches/render.rs`.
