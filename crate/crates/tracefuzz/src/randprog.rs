//! Random well-formed target programs and inputs, for differential and
//! property testing of the decoder, the pipeline, and edge reconstruction.

use rand::Rng;

use crate::vm::{Block, BlockId, MicroOp, Predicate, Reg, TargetProgram, Terminator};

/// Generates a valid program with `2..=max_blocks` blocks.
///
/// Unconditional jumps only target higher block ids, so every cycle contains
/// at least one packet-emitting terminator and any finite trace pins down a
/// unique CFG walk. All other terminators may target any block.
pub fn random_program(rng: &mut impl Rng, max_blocks: usize) -> TargetProgram {
    assert!(max_blocks >= 2);
    let n = rng.gen_range(2..=max_blocks) as BlockId;
    let blocks = (0..n)
        .map(|id| Block {
            id,
            micro_ops: random_micro_ops(rng),
            terminator: random_terminator(rng, id, n),
        })
        .collect();
    let entry = rng.gen_range(0..n);
    let base = 0x40_0000 + (rng.gen_range(0u64..16) << 20);
    TargetProgram::new(blocks, entry, base).expect("generator invariant")
}

fn reg(rng: &mut impl Rng) -> Reg {
    Reg::new(rng.gen_range(0..8)).unwrap()
}

fn random_micro_ops(rng: &mut impl Rng) -> Vec<MicroOp> {
    let count = rng.gen_range(0..4);
    (0..count)
        .map(|_| match rng.gen_range(0..4) {
            0 => MicroOp::LoadInput { reg: reg(rng) },
            1 => MicroOp::SetConst {
                reg: reg(rng),
                value: rng.gen_range(0..300),
            },
            2 => MicroOp::Add {
                dst: reg(rng),
                a: reg(rng),
                b: reg(rng),
            },
            _ => MicroOp::Sub {
                dst: reg(rng),
                a: reg(rng),
                b: reg(rng),
            },
        })
        .collect()
}

fn random_predicate(rng: &mut impl Rng) -> Predicate {
    let r = reg(rng);
    match rng.gen_range(0..6) {
        0 => Predicate::Eq(r, rng.gen_range(0..300)),
        1 => Predicate::Ne(r, rng.gen_range(0..300)),
        2 => Predicate::Lt(r, rng.gen_range(1..300)),
        3 => Predicate::Gt(r, rng.gen_range(0..300)),
        4 => Predicate::InSet(r, (0..rng.gen_range(1..4)).map(|_| rng.gen_range(0..300)).collect()),
        _ => Predicate::Eof,
    }
}

fn random_terminator(rng: &mut impl Rng, id: BlockId, n: BlockId) -> Terminator {
    let any = |rng: &mut dyn rand::RngCore| rng.gen_range(0..n);
    match rng.gen_range(0..12) {
        0..=3 => Terminator::CondBranch {
            pred: random_predicate(rng),
            true_target: any(rng),
            false_target: any(rng),
        },
        4 | 5 if id + 1 < n => Terminator::Jump {
            target: rng.gen_range(id + 1..n),
        },
        6 => Terminator::IndirectJump {
            selector: reg(rng),
            table: (0..rng.gen_range(1..5)).map(|_| any(rng)).collect(),
        },
        7 | 8 => Terminator::Call {
            target: any(rng),
            return_to: any(rng),
        },
        9 => Terminator::Return,
        10 => Terminator::Trap {
            kind: rng.gen_range(0..4),
        },
        _ => Terminator::Exit {
            code: rng.gen_range(0..4),
        },
    }
}

pub fn random_input(rng: &mut impl Rng) -> Vec<u8> {
    let len = rng.gen_range(0..64);
    (0..len).map(|_| rng.gen()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::reconstruct_edges;
    use crate::vm::{execute, ExecLimits, VecTraceSink};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn jumps_never_close_a_packet_free_cycle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let p = random_program(&mut rng, 24);
            for id in 0..p.block_count() as BlockId {
                if let Terminator::Jump { target } = p.block(id).terminator {
                    assert!(target > id);
                }
            }
        }
    }

    #[test]
    fn generated_traces_reconstruct_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let limits = ExecLimits {
            step_budget: 2_000,
            call_depth: 64,
        };
        for _ in 0..300 {
            let p = random_program(&mut rng, 24);
            let input = random_input(&mut rng);
            let mut sink = VecTraceSink::default();
            let mut truth = Vec::new();
            execute(&p, &input, &mut sink, |a, b| truth.push((a, b)), &limits);
            let rebuilt = reconstruct_edges(&p, &sink.0).expect("well-formed trace");
            assert_eq!(rebuilt, truth);
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let make = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let p = random_program(&mut rng, 16);
            (crate::vm::serialize_program(&p), random_input(&mut rng))
        };
        assert_eq!(make(), make());
    }
}
