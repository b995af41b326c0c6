//! Coverage-guided greybox fuzzing engine that computes feedback directly
//! from a hardware-style branch-packet stream, alongside edge-coverage
//! baselines, a packet-emitting CFG virtual machine, and a parallel trace
//! decoding pipeline.

pub mod codec;
pub mod feedback;
pub mod fuzzer;
pub mod harness;
pub mod pipeline;
pub mod randprog;
pub mod vm;
