//! Benchmarks live in `benches/`; run them with `cargo bench -p u3ds3-bench`.
