//! Microbenchmark crate; see `benches/hot_paths.rs`.
