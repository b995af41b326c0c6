//! Built-in benchmark targets.
//!
//! `chunk-name` models a 4-byte tag check behind a validation loop: each
//! input byte runs through three range predicates (upper/lower-case style,
//! early exit on violation) and a ladder of per-character probes whose two
//! arms rejoin, so character matches are visible in branch history but not
//! in edge coverage. A final 4-byte constant match guards the distinguished
//! handler block.
//!
//! `deep-recursion` models a parser where each `(` input byte triggers one
//! recursive call; the recursion body's work grows with depth, and crossing
//! the call-depth limit is a stack-exhaustion crash.
//!
//! `maze` is a staged state machine over input byte classes, used for
//! coverage-curve and calibration experiments.

use std::str::FromStr;

use super::program::{Block, BlockId, MicroOp, Predicate, Reg, TargetProgram, Terminator};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Benchmark {
    ChunkName,
    DeepRecursion,
    Maze,
}

impl Benchmark {
    pub const ALL: [Benchmark; 3] = [
        Benchmark::ChunkName,
        Benchmark::DeepRecursion,
        Benchmark::Maze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Benchmark::ChunkName => "chunk-name",
            Benchmark::DeepRecursion => "deep-recursion",
            Benchmark::Maze => "maze",
        }
    }
}

impl FromStr for Benchmark {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "chunk-name" => Ok(Benchmark::ChunkName),
            "deep-recursion" => Ok(Benchmark::DeepRecursion),
            "maze" => Ok(Benchmark::Maze),
            other => Err(format!(
                "unknown benchmark `{other}` (expected chunk-name, deep-recursion, or maze)"
            )),
        }
    }
}

/// The distinguished handler block of `chunk-name`; reaching it is the
/// case-study probe.
pub const CHUNK_NAME_HANDLER_BLOCK: BlockId = 21;
/// The block guarding the handler; `(CHUNK_NAME_CHECK_BLOCK, HANDLER)` is
/// the handler's only incoming edge.
pub const CHUNK_NAME_CHECK_BLOCK: BlockId = 14;
/// Exit code of the handler path.
pub const CHUNK_NAME_HANDLER_EXIT: u64 = 42;
/// The four-byte tag the check block matches.
pub const CHUNK_NAME_TAG: &[u8; 4] = b"IDAT";

/// Goal block of the maze.
pub const MAZE_GOAL_BLOCK: BlockId = 25;
pub const MAZE_GOAL_EXIT: u64 = 9;
const MAZE_STAGES: [u64; 12] = [0, 1, 2, 3, 1, 0, 3, 2, 0, 2, 1, 3];

pub fn build_benchmark(which: Benchmark) -> TargetProgram {
    match which {
        Benchmark::ChunkName => chunk_name(),
        Benchmark::DeepRecursion => deep_recursion(),
        Benchmark::Maze => maze(),
    }
}

/// Starting inputs shipped with each benchmark.
pub fn seed_corpus(which: Benchmark) -> Vec<Vec<u8>> {
    match which {
        Benchmark::ChunkName => vec![b"AAAA".to_vec(), b"zzzz".to_vec(), b"0123".to_vec()],
        Benchmark::DeepRecursion => {
            vec![b"((((".to_vec(), b"()()".to_vec(), b"xxxx".to_vec()]
        }
        Benchmark::Maze => vec![
            vec![0x00, 0x40, 0x80, 0xC0],
            vec![0xC0, 0x80, 0x40, 0x00, 0x55, 0xAA],
            vec![0x10; 8],
        ],
    }
}

fn r(i: u8) -> Reg {
    Reg::new(i).unwrap()
}

fn b(id: BlockId, micro_ops: Vec<MicroOp>, terminator: Terminator) -> Block {
    Block {
        id,
        micro_ops,
        terminator,
    }
}

fn br(pred: Predicate, t: BlockId, f: BlockId) -> Terminator {
    Terminator::CondBranch {
        pred,
        true_target: t,
        false_target: f,
    }
}

fn set(reg: u8, value: u64) -> MicroOp {
    MicroOp::SetConst { reg: r(reg), value }
}

fn add(dst: u8, a: u8, bb: u8) -> MicroOp {
    MicroOp::Add {
        dst: r(dst),
        a: r(a),
        b: r(bb),
    }
}

fn sub(dst: u8, a: u8, bb: u8) -> MicroOp {
    MicroOp::Sub {
        dst: r(dst),
        a: r(a),
        b: r(bb),
    }
}

/// r0 = loop index, r1 = current byte, r2 = tag accumulator, r5 = validity
/// flag out of the classifier, r7 = 1.
fn chunk_name() -> TargetProgram {
    let tag = u32::from_be_bytes(*CHUNK_NAME_TAG) as u64;
    let mut acc_ops = vec![MicroOp::LoadInput { reg: r(1) }];
    // acc = acc * 256 + byte, via repeated doubling.
    for _ in 0..8 {
        acc_ops.push(add(2, 2, 2));
    }
    acc_ops.push(add(2, 2, 1));

    let blocks = vec![
        // 0: entry
        b(
            0,
            vec![set(0, 0), set(2, 0), set(7, 1)],
            Terminator::Call {
                target: 1,
                return_to: 2,
            },
        ),
        // 1: loop head, four iterations
        b(1, vec![], br(Predicate::Eq(r(0), 4), 14, 3)),
        // 2: finish
        b(2, vec![], Terminator::Exit { code: 0 }),
        // 3: loop body, then classify the byte
        b(
            3,
            acc_ops,
            Terminator::Call {
                target: 4,
                return_to: 16,
            },
        ),
        // 4..=7: classifier preamble, records the loop index in branch
        // history (both arms rejoin).
        b(4, vec![], br(Predicate::Eq(r(0), 0), 5, 5)),
        b(5, vec![], br(Predicate::Eq(r(0), 1), 6, 6)),
        b(6, vec![], br(Predicate::Eq(r(0), 2), 7, 7)),
        b(7, vec![], br(Predicate::Eq(r(0), 3), 8, 8)),
        // 8..=10: the three range predicates; violation exits early
        b(8, vec![], br(Predicate::Lt(r(1), b'A' as u64), 13, 9)),
        b(9, vec![], br(Predicate::Gt(r(1), b'z' as u64), 13, 10)),
        b(
            10,
            vec![],
            br(
                Predicate::InSet(r(1), (b'Z' as u64 + 1..b'a' as u64).collect()),
                13,
                11,
            ),
        ),
        // 11, 17..=19: per-character probes of the expected tag (arms rejoin)
        b(11, vec![], br(Predicate::Eq(r(1), b'I' as u64), 17, 17)),
        // 12: classified valid
        b(12, vec![set(5, 1)], Terminator::Return),
        // 13: classified invalid
        b(13, vec![set(5, 0)], Terminator::Return),
        // 14: the 4-byte constant match guarding the handler
        b(14, vec![], br(Predicate::Eq(r(2), tag), 21, 22)),
        // 15: next iteration
        b(15, vec![add(0, 0, 7)], Terminator::Jump { target: 1 }),
        // 16: after classify: early exit on violation
        b(16, vec![], br(Predicate::Eq(r(5), 0), 20, 15)),
        b(17, vec![], br(Predicate::Eq(r(1), b'D' as u64), 18, 18)),
        b(18, vec![], br(Predicate::Eq(r(1), b'A' as u64), 19, 19)),
        b(19, vec![], br(Predicate::Eq(r(1), b'T' as u64), 12, 12)),
        // 20: early exit out of the loop function
        b(20, vec![], Terminator::Return),
        // 21: handlerX
        b(
            21,
            vec![],
            Terminator::Exit {
                code: CHUNK_NAME_HANDLER_EXIT,
            },
        ),
        // 22: well-formed but unknown tag
        b(22, vec![], Terminator::Return),
    ];
    TargetProgram::new(blocks, 0, 0x40_0000).unwrap()
}

/// Unreachable padding so the block count (the TNT cap source) comfortably
/// exceeds the deepest recursion's branch run, mirroring the block-count to
/// recursion-depth ratio of a real parser.
const DEEP_RECURSION_PADDING: usize = 300;

/// r0 = depth, r1 = byte, r2 = spin counter, r5 = 4, r6 = 0, r7 = 1.
fn deep_recursion() -> TargetProgram {
    let mut blocks = vec![
        // 0: entry
        b(
            0,
            vec![set(7, 1), set(5, 4), set(6, 0)],
            Terminator::Call {
                target: 1,
                return_to: 2,
            },
        ),
        // 1: scan the next input byte
        b(
            1,
            vec![MicroOp::LoadInput { reg: r(1) }],
            br(Predicate::Eof, 8, 3),
        ),
        // 2: finish
        b(2, vec![], Terminator::Exit { code: 0 }),
        // 3: '(' triggers one recursive call
        b(3, vec![], br(Predicate::Eq(r(1), b'(' as u64), 4, 8)),
        // 4: bump depth, spin counter = depth
        b(4, vec![add(0, 0, 7), add(2, 0, 6)], Terminator::Jump { target: 5 }),
        // 5-6: per-level work proportional to depth (4 units per branch)
        b(5, vec![], br(Predicate::Lt(r(2), 4), 7, 6)),
        b(6, vec![sub(2, 2, 5)], Terminator::Jump { target: 5 }),
        // 7: recurse
        b(
            7,
            vec![],
            Terminator::Call {
                target: 1,
                return_to: 9,
            },
        ),
        // 8: leaf return
        b(8, vec![], Terminator::Return),
        // 9: unwind
        b(9, vec![], Terminator::Return),
    ];
    for i in 0..DEEP_RECURSION_PADDING {
        blocks.push(b(10 + i as BlockId, vec![], Terminator::Trap { kind: 200 }));
    }
    TargetProgram::new(blocks, 0, 0x40_0000).unwrap()
}

/// r0 = stage, r1 = byte, r3 = byte class, r7 = 1.
fn maze() -> TargetProgram {
    let mut dispatch_table: Vec<BlockId> = (13..25).collect();
    dispatch_table.push(MAZE_GOAL_BLOCK);
    let mut blocks = vec![
        // 0: entry
        b(
            0,
            vec![set(0, 0), set(7, 1)],
            Terminator::Call {
                target: 1,
                return_to: 2,
            },
        ),
        // 1: next input byte
        b(
            1,
            vec![MicroOp::LoadInput { reg: r(1) }],
            br(Predicate::Eof, 9, 3),
        ),
        // 2: finish
        b(2, vec![], Terminator::Exit { code: 0 }),
        // 3: classify then dispatch on stage
        b(
            3,
            vec![],
            Terminator::Call {
                target: 4,
                return_to: 8,
            },
        ),
        // 4..=7, 10..=12: byte class = byte >> 6
        b(4, vec![], br(Predicate::Lt(r(1), 64), 10, 5)),
        b(5, vec![], br(Predicate::Lt(r(1), 128), 11, 6)),
        b(6, vec![], br(Predicate::Lt(r(1), 192), 12, 7)),
        b(7, vec![set(3, 3)], Terminator::Return),
        // 8: stage dispatch
        b(
            8,
            vec![],
            Terminator::IndirectJump {
                selector: r(0),
                table: dispatch_table,
            },
        ),
        // 9: ran out of input
        b(9, vec![], Terminator::Return),
        b(10, vec![set(3, 0)], Terminator::Return),
        b(11, vec![set(3, 1)], Terminator::Return),
        b(12, vec![set(3, 2)], Terminator::Return),
    ];
    // 13..=24: one block per stage, advancing on the wanted class
    for (k, want) in MAZE_STAGES.iter().enumerate() {
        blocks.push(b(
            13 + k as BlockId,
            vec![],
            br(Predicate::Eq(r(3), *want), 26, 27),
        ));
    }
    // 25: goal
    blocks.push(b(
        MAZE_GOAL_BLOCK,
        vec![],
        Terminator::Exit { code: MAZE_GOAL_EXIT },
    ));
    // 26: advance, 27: stay
    blocks.push(b(26, vec![add(0, 0, 7)], Terminator::Jump { target: 1 }));
    blocks.push(b(27, vec![], Terminator::Jump { target: 1 }));
    TargetProgram::new(blocks, 0, 0x40_0000).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::exec::{execute, ExecLimits, ExecStatus, NullTraceSink, TrapKind};
    use crate::vm::parse::{load_program, serialize_program};

    fn run_edges(
        p: &TargetProgram,
        input: &[u8],
    ) -> (ExecStatus, Vec<(BlockId, BlockId)>, Vec<u32>) {
        let mut edges = Vec::new();
        let outcome = execute(
            p,
            input,
            &mut NullTraceSink,
            |a, bb| edges.push((a, bb)),
            &ExecLimits::default(),
        );
        (outcome.status, edges, outcome.call_chains)
    }

    #[test]
    fn chunk_name_tag_reaches_handler() {
        let p = build_benchmark(Benchmark::ChunkName);
        let (status, edges, _) = run_edges(&p, CHUNK_NAME_TAG);
        assert_eq!(status, ExecStatus::Exit(CHUNK_NAME_HANDLER_EXIT));
        assert!(edges.contains(&(CHUNK_NAME_CHECK_BLOCK, CHUNK_NAME_HANDLER_BLOCK)));
    }

    #[test]
    fn chunk_name_invalid_byte_exits_early() {
        let p = build_benchmark(Benchmark::ChunkName);
        let (status, edges, _) = run_edges(&p, &[0x00, 0x01, 0x02, 0x03]);
        assert_eq!(status, ExecStatus::Exit(0));
        assert!(!edges.contains(&(CHUNK_NAME_CHECK_BLOCK, CHUNK_NAME_HANDLER_BLOCK)));
    }

    #[test]
    fn chunk_name_valid_unknown_tag_is_rejected() {
        let p = build_benchmark(Benchmark::ChunkName);
        let (status, edges, _) = run_edges(&p, b"IDAx");
        assert_eq!(status, ExecStatus::Exit(0));
        assert!(!edges.contains(&(CHUNK_NAME_CHECK_BLOCK, CHUNK_NAME_HANDLER_BLOCK)));
    }

    #[test]
    fn deep_recursion_crashes_past_the_depth_limit() {
        let p = build_benchmark(Benchmark::DeepRecursion);
        let input = vec![b'('; 300];
        let outcome = execute(
            &p,
            &input,
            &mut NullTraceSink,
            |_, _| {},
            &ExecLimits::default(),
        );
        assert_eq!(outcome.status, ExecStatus::Crash(TrapKind::StackExhaustion));
    }

    #[test]
    fn deep_recursion_ten_triggers_deepens_the_call_chain() {
        let p = build_benchmark(Benchmark::DeepRecursion);
        let (status, _, chains) = run_edges(&p, &vec![b'('; 10]);
        assert!(matches!(status, ExecStatus::Exit(0)));
        assert!(chains.iter().any(|&d| d >= 10), "chains: {chains:?}");
    }

    #[test]
    fn maze_wanted_classes_reach_the_goal() {
        let p = build_benchmark(Benchmark::Maze);
        let mut input: Vec<u8> = MAZE_STAGES.iter().map(|&c| (c as u8) << 6).collect();
        // The goal dispatch fires while consuming the byte after the last
        // stage advance, so one trailing byte is needed.
        input.push(0x00);
        let (status, edges, _) = run_edges(&p, &input);
        assert_eq!(status, ExecStatus::Exit(MAZE_GOAL_EXIT));
        assert!(edges.iter().any(|&(_, t)| t == MAZE_GOAL_BLOCK));
    }

    #[test]
    fn maze_junk_input_exits_normally() {
        let p = build_benchmark(Benchmark::Maze);
        let (status, edges, _) = run_edges(&p, &[0xFF; 6]);
        assert_eq!(status, ExecStatus::Exit(0));
        assert!(!edges.iter().any(|&(_, t)| t == MAZE_GOAL_BLOCK));
    }

    #[test]
    fn benchmarks_roundtrip_through_the_text_format() {
        for which in Benchmark::ALL {
            let p = build_benchmark(which);
            let text = serialize_program(&p);
            let p2 = load_program(&text).unwrap();
            assert_eq!(p, p2, "roundtrip failed for {}", which.name());
            assert_eq!(serialize_program(&p2), text);
        }
    }

    #[test]
    fn benchmark_names_parse() {
        for which in Benchmark::ALL {
            assert_eq!(which.name().parse::<Benchmark>().unwrap(), which);
        }
        assert!("bogus".parse::<Benchmark>().is_err());
    }
}
