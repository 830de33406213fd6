//! Criterion benches live under `benches/`; see `cargo bench -p spikelab-bench`.
