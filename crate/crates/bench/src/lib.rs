//! Benchmarks live under `benches/`: `kernels` times matmul and conv2d,
//! `model` times toy-scale forward and forward/backward passes.
