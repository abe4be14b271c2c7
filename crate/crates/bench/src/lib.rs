//! Criterion benchmarks for the model and the augmentation hot paths; see
//! `benches/`. Run with `cargo bench -p segflow-bench`.
