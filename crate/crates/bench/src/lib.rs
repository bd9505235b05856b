//! Criterion benchmarks for the distillation kernels live in `benches/`.
