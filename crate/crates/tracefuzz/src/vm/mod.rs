//! The deterministic control-flow-graph virtual machine standing in for a
//! hardware-traced binary: programs, execution, and built-in benchmarks.

pub mod bench;
pub mod exec;
pub mod parse;
pub mod program;

pub use bench::{
    build_benchmark, seed_corpus, Benchmark, CHUNK_NAME_HANDLER_BLOCK, MAZE_GOAL_BLOCK,
};
pub use exec::{
    execute, ExecLimits, ExecOutcome, ExecStatus, NullTraceSink, TraceSink, TrapKind,
    VecTraceSink,
};
pub use parse::{load_program, serialize_program, ParseError};
pub use program::{
    Block, BlockId, MicroOp, Predicate, ProgramError, Reg, TargetProgram, Terminator,
};
