//! Benchmarks live in `benches/`; this library target is intentionally empty.
