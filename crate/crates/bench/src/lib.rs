//! Criterion benchmarks for the numeric kernels and a full model step; see
//! `benches/kernels.rs`. Run with `cargo bench -p dvlta-bench`.
