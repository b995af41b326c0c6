//! Deterministic execution of target programs with packet and edge emission.

use crate::codec::{Packet, TntPacker};

use super::program::{BlockId, MicroOp, Predicate, TargetProgram, Terminator, NUM_REGS};

/// Receives the packet stream of one execution, in emission order.
///
/// `step` is invoked once per executed block and is the hook the pipeline's
/// flush controller hangs off.
pub trait TraceSink {
    fn packet(&mut self, p: &Packet);
    fn step(&mut self) {}
}

/// Discards the trace; used by the direct-edge baseline.
pub struct NullTraceSink;

impl TraceSink for NullTraceSink {
    fn packet(&mut self, _p: &Packet) {}
}

/// Collects packets into a vector.
#[derive(Default)]
pub struct VecTraceSink(pub Vec<Packet>);

impl TraceSink for VecTraceSink {
    fn packet(&mut self, p: &Packet) {
        self.0.push(*p);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrapKind {
    StackExhaustion,
    ReturnUnderflow,
    User(u8),
}

impl std::fmt::Display for TrapKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrapKind::StackExhaustion => write!(f, "stack-exhaustion"),
            TrapKind::ReturnUnderflow => write!(f, "return-underflow"),
            TrapKind::User(k) => write!(f, "trap-{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecStatus {
    Exit(u64),
    Crash(TrapKind),
    Hang,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecOutcome {
    pub status: ExecStatus,
    /// Executed block count.
    pub steps: u64,
    /// Number of conditional-branch executions (= TNT bits emitted).
    pub tnt_total: u64,
    /// Call-stack-depth samples taken at dynamic leaf calls.
    pub call_chains: Vec<u32>,
    /// The block where execution stopped; part of the crash dedup key.
    pub final_block: BlockId,
}

#[derive(Debug, Clone, Copy)]
pub struct ExecLimits {
    pub step_budget: u64,
    pub call_depth: usize,
}

impl Default for ExecLimits {
    fn default() -> Self {
        Self {
            step_budget: 100_000,
            call_depth: 256,
        }
    }
}

struct Frame {
    return_to: BlockId,
    made_call: bool,
}

/// Runs `program` over `input`, feeding packets to `trace` and ground-truth
/// `(prev, cur)` block pairs to `edge`.
///
/// Identical `(program, input, limits)` triples produce byte-identical packet
/// streams, edge sequences, and outcomes.
pub fn execute(
    program: &TargetProgram,
    input: &[u8],
    trace: &mut impl TraceSink,
    mut edge: impl FnMut(BlockId, BlockId),
    limits: &ExecLimits,
) -> ExecOutcome {
    let mut regs = [0u64; NUM_REGS];
    let mut cursor = 0usize;
    let mut eof = false;
    let mut stack: Vec<Frame> = Vec::new();
    let mut packer = TntPacker::default();
    let mut steps = 0u64;
    let mut tnt_total = 0u64;
    let mut call_chains = Vec::new();

    let mut cur = program.entry();
    trace.packet(&Packet::Pge(program.address_of(cur)));

    macro_rules! flush_tnt {
        () => {
            if let Some(g) = packer.flush() {
                trace.packet(&Packet::Tnt(g));
            }
        };
    }

    let status = loop {
        if steps >= limits.step_budget {
            break ExecStatus::Hang;
        }
        steps += 1;
        let block = program.block(cur);
        for op in &block.micro_ops {
            match *op {
                MicroOp::LoadInput { reg } => {
                    if cursor < input.len() {
                        regs[reg.index()] = input[cursor] as u64;
                    } else {
                        regs[reg.index()] = 0;
                        eof = true;
                    }
                    cursor = cursor.saturating_add(1);
                }
                MicroOp::SetConst { reg, value } => regs[reg.index()] = value,
                MicroOp::Add { dst, a, b } => {
                    regs[dst.index()] = regs[a.index()].wrapping_add(regs[b.index()])
                }
                MicroOp::Sub { dst, a, b } => {
                    regs[dst.index()] = regs[a.index()].wrapping_sub(regs[b.index()])
                }
            }
        }
        let next = match &block.terminator {
            Terminator::CondBranch {
                pred,
                true_target,
                false_target,
            } => {
                let taken = match pred {
                    Predicate::Eq(r, c) => regs[r.index()] == *c,
                    Predicate::Ne(r, c) => regs[r.index()] != *c,
                    Predicate::Lt(r, c) => regs[r.index()] < *c,
                    Predicate::Gt(r, c) => regs[r.index()] > *c,
                    Predicate::InSet(r, set) => set.contains(&regs[r.index()]),
                    Predicate::Eof => eof,
                };
                tnt_total += 1;
                if let Some(g) = packer.push(taken) {
                    trace.packet(&Packet::Tnt(g));
                }
                if taken {
                    *true_target
                } else {
                    *false_target
                }
            }
            Terminator::Jump { target } => *target,
            Terminator::IndirectJump { selector, table } => {
                let next = table[regs[selector.index()] as usize % table.len()];
                flush_tnt!();
                trace.packet(&Packet::Tip(program.address_of(next)));
                next
            }
            Terminator::Call { target, return_to } => {
                if stack.len() >= limits.call_depth {
                    break ExecStatus::Crash(TrapKind::StackExhaustion);
                }
                if let Some(top) = stack.last_mut() {
                    top.made_call = true;
                }
                stack.push(Frame {
                    return_to: *return_to,
                    made_call: false,
                });
                flush_tnt!();
                trace.packet(&Packet::Tip(program.address_of(*target)));
                *target
            }
            Terminator::Return => {
                let Some(frame) = stack.pop() else {
                    break ExecStatus::Crash(TrapKind::ReturnUnderflow);
                };
                if !frame.made_call {
                    // Leaf call: this frame returned without calling anyone.
                    call_chains.push(stack.len() as u32 + 1);
                }
                flush_tnt!();
                trace.packet(&Packet::Tip(program.address_of(frame.return_to)));
                frame.return_to
            }
            Terminator::Exit { code } => break ExecStatus::Exit(*code),
            Terminator::Trap { kind } => break ExecStatus::Crash(TrapKind::User(*kind)),
        };
        edge(cur, next);
        cur = next;
        trace.step();
    };

    flush_tnt!();
    trace.packet(&Packet::Pgd(program.address_of(cur)));
    ExecOutcome {
        status,
        steps,
        tnt_total,
        call_chains,
        final_block: cur,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::program::{Block, Reg, TargetProgram, DEFAULT_ADDRESS_BASE};

    fn r(i: u8) -> Reg {
        Reg::new(i).unwrap()
    }

    fn program(blocks: Vec<Block>, entry: BlockId) -> TargetProgram {
        TargetProgram::new(blocks, entry, DEFAULT_ADDRESS_BASE).unwrap()
    }

    fn run(p: &TargetProgram, input: &[u8]) -> (ExecOutcome, Vec<Packet>, Vec<(BlockId, BlockId)>) {
        let mut sink = VecTraceSink::default();
        let mut edges = Vec::new();
        let outcome = execute(
            p,
            input,
            &mut sink,
            |a, b| edges.push((a, b)),
            &ExecLimits::default(),
        );
        (outcome, sink.0, edges)
    }

    #[test]
    fn straight_line_emits_only_pge_pgd() {
        let p = program(
            vec![
                Block {
                    id: 0,
                    micro_ops: vec![],
                    terminator: Terminator::Jump { target: 1 },
                },
                Block {
                    id: 1,
                    micro_ops: vec![],
                    terminator: Terminator::Exit { code: 0 },
                },
            ],
            0,
        );
        let (outcome, packets, edges) = run(&p, b"whatever");
        assert_eq!(outcome.status, ExecStatus::Exit(0));
        assert_eq!(
            packets,
            vec![Packet::Pge(p.address_of(0)), Packet::Pgd(p.address_of(1))]
        );
        assert_eq!(edges, vec![(0, 1)]);
        assert_eq!(outcome.tnt_total, 0);
    }

    #[test]
    fn fig2_shaped_trace() {
        // entry -> cond (taken) -> call -> return -> exit
        let p = program(
            vec![
                Block {
                    id: 0,
                    micro_ops: vec![MicroOp::SetConst { reg: r(0), value: 1 }],
                    terminator: Terminator::CondBranch {
                        pred: Predicate::Eq(r(0), 1),
                        true_target: 1,
                        false_target: 3,
                    },
                },
                Block {
                    id: 1,
                    micro_ops: vec![],
                    terminator: Terminator::Call {
                        target: 2,
                        return_to: 3,
                    },
                },
                Block {
                    id: 2,
                    micro_ops: vec![],
                    terminator: Terminator::Return,
                },
                Block {
                    id: 3,
                    micro_ops: vec![],
                    terminator: Terminator::Exit { code: 0 },
                },
            ],
            0,
        );
        let (outcome, packets, _) = run(&p, &[]);
        assert_eq!(outcome.status, ExecStatus::Exit(0));
        let kinds: Vec<&str> = packets
            .iter()
            .map(|p| match p {
                Packet::Pge(_) => "pge",
                Packet::Tnt(g) => {
                    assert!(g.bit(0));
                    "tnt"
                }
                Packet::Tip(_) => "tip",
                Packet::Pgd(_) => "pgd",
            })
            .collect();
        assert_eq!(kinds, vec!["pge", "tnt", "tip", "tip", "pgd"]);
        assert_eq!(packets[2], Packet::Tip(p.address_of(2)));
        assert_eq!(packets[3], Packet::Tip(p.address_of(3)));
        assert_eq!(outcome.tnt_total, 1);
    }

    fn self_recursive() -> TargetProgram {
        // Each input byte '(' triggers one recursive call.
        program(
            vec![
                Block {
                    id: 0,
                    micro_ops: vec![MicroOp::LoadInput { reg: r(1) }],
                    terminator: Terminator::CondBranch {
                        pred: Predicate::Eq(r(1), b'(' as u64),
                        true_target: 1,
                        false_target: 2,
                    },
                },
                Block {
                    id: 1,
                    micro_ops: vec![],
                    terminator: Terminator::Call {
                        target: 0,
                        return_to: 2,
                    },
                },
                Block {
                    id: 2,
                    micro_ops: vec![],
                    terminator: Terminator::Return,
                },
            ],
            0,
        )
    }

    #[test]
    fn recursion_past_depth_limit_is_stack_exhaustion() {
        let p = self_recursive();
        let input = vec![b'('; 300];
        let mut sink = NullTraceSink;
        let outcome = execute(
            &p,
            &input,
            &mut sink,
            |_, _| {},
            &ExecLimits {
                step_budget: 100_000,
                call_depth: 256,
            },
        );
        assert_eq!(outcome.status, ExecStatus::Crash(TrapKind::StackExhaustion));
    }

    #[test]
    fn return_underflow_is_a_crash() {
        let p = self_recursive();
        // No '(' at all: block 0 falls to block 2 which returns with an
        // empty stack.
        let (outcome, _, _) = run(&p, b"x");
        assert_eq!(outcome.status, ExecStatus::Crash(TrapKind::ReturnUnderflow));
    }

    #[test]
    fn step_budget_exhaustion_is_a_hang() {
        let p = program(
            vec![Block {
                id: 0,
                micro_ops: vec![],
                terminator: Terminator::Jump { target: 0 },
            }],
            0,
        );
        let mut sink = NullTraceSink;
        let outcome = execute(
            &p,
            &[],
            &mut sink,
            |_, _| {},
            &ExecLimits {
                step_budget: 50,
                call_depth: 256,
            },
        );
        assert_eq!(outcome.status, ExecStatus::Hang);
        assert_eq!(outcome.steps, 50);
    }

    #[test]
    fn determinism_across_runs() {
        let p = self_recursive();
        let input: Vec<u8> = (0..64).map(|i| if i % 3 == 0 { b'(' } else { b'x' }).collect();
        let a = run(&p, &input);
        let b = run(&p, &input);
        assert_eq!(a, b);
    }

    #[test]
    fn tnt_total_counts_cond_branches() {
        let p = self_recursive();
        let (outcome, packets, _) = run(&p, b"(((x");
        let bits: usize = packets
            .iter()
            .filter_map(|p| match p {
                Packet::Tnt(g) => Some(g.len()),
                _ => None,
            })
            .sum();
        assert_eq!(outcome.tnt_total as usize, bits);
    }
}
