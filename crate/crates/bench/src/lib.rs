//! Criterion benchmarks for the simulator and the policy network; see `benches/`.
