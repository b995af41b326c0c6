//! Control-flow-graph program representation and validation.

use thiserror::Error;

pub type BlockId = u32;

pub const NUM_REGS: usize = 8;
pub const DEFAULT_ADDRESS_BASE: u64 = 0x40_0000;

/// Spacing between synthetic block addresses.
pub const BLOCK_ADDR_STRIDE: u64 = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProgramError {
    #[error("program has no blocks")]
    Empty,
    #[error("block {0} is missing (ids must be dense from 0)")]
    MissingBlock(BlockId),
    #[error("duplicate definition of block {0}")]
    DuplicateBlock(BlockId),
    #[error("block {block} references missing block {target}")]
    DanglingTarget { block: BlockId, target: BlockId },
    #[error("entry block {0} does not exist")]
    BadEntry(BlockId),
    #[error("block {0} has an empty indirect-jump table")]
    EmptyJumpTable(BlockId),
    #[error("register index {0} out of range (0..{})", NUM_REGS)]
    BadRegister(u8),
}

/// One of the eight unsigned 64-bit register cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reg(u8);

impl Reg {
    pub fn new(index: u8) -> Result<Self, ProgramError> {
        if (index as usize) < NUM_REGS {
            Ok(Reg(index))
        } else {
            Err(ProgramError::BadRegister(index))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MicroOp {
    /// Read the byte at the input cursor into `reg` and advance the cursor;
    /// reads past the end yield 0 and set the eof flag.
    LoadInput { reg: Reg },
    SetConst { reg: Reg, value: u64 },
    Add { dst: Reg, a: Reg, b: Reg },
    Sub { dst: Reg, a: Reg, b: Reg },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Predicate {
    Eq(Reg, u64),
    Ne(Reg, u64),
    Lt(Reg, u64),
    Gt(Reg, u64),
    InSet(Reg, Vec<u64>),
    Eof,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Terminator {
    /// Emits one TNT bit per execution; taken means the true branch.
    CondBranch {
        pred: Predicate,
        true_target: BlockId,
        false_target: BlockId,
    },
    /// Direct unconditional transfer; produces no trace packet.
    Jump { target: BlockId },
    /// Emits a TIP with the destination address; the destination is
    /// `table[selector % table.len()]`.
    IndirectJump { selector: Reg, table: Vec<BlockId> },
    /// Emits a TIP with the callee address and pushes `return_to`.
    Call { target: BlockId, return_to: BlockId },
    /// Emits a TIP with the return-site address.
    Return,
    Exit { code: u64 },
    Trap { kind: u8 },
}

impl Terminator {
    pub fn targets(&self) -> Vec<BlockId> {
        match self {
            Terminator::CondBranch {
                true_target,
                false_target,
                ..
            } => vec![*true_target, *false_target],
            Terminator::Jump { target } => vec![*target],
            Terminator::IndirectJump { table, .. } => table.clone(),
            Terminator::Call { target, return_to } => vec![*target, *return_to],
            Terminator::Return | Terminator::Exit { .. } | Terminator::Trap { .. } => vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub id: BlockId,
    pub micro_ops: Vec<MicroOp>,
    pub terminator: Terminator,
}

/// A validated, immutable target program.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetProgram {
    blocks: Vec<Block>,
    entry: BlockId,
    address_base: u64,
}

impl TargetProgram {
    pub fn new(
        mut blocks: Vec<Block>,
        entry: BlockId,
        address_base: u64,
    ) -> Result<Self, ProgramError> {
        if blocks.is_empty() {
            return Err(ProgramError::Empty);
        }
        blocks.sort_by_key(|b| b.id);
        for (i, b) in blocks.iter().enumerate() {
            let expected = i as BlockId;
            if b.id > expected {
                return Err(ProgramError::MissingBlock(expected));
            }
            if b.id < expected {
                return Err(ProgramError::DuplicateBlock(b.id));
            }
        }
        let count = blocks.len() as BlockId;
        if entry >= count {
            return Err(ProgramError::BadEntry(entry));
        }
        for b in &blocks {
            if let Terminator::IndirectJump { table, .. } = &b.terminator {
                if table.is_empty() {
                    return Err(ProgramError::EmptyJumpTable(b.id));
                }
            }
            for t in b.terminator.targets() {
                if t >= count {
                    return Err(ProgramError::DanglingTarget {
                        block: b.id,
                        target: t,
                    });
                }
            }
        }
        Ok(Self {
            blocks,
            entry,
            address_base,
        })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, id: BlockId) -> &Block {
        &self.blocks[id as usize]
    }

    pub fn entry(&self) -> BlockId {
        self.entry
    }

    pub fn address_base(&self) -> u64 {
        self.address_base
    }

    /// Number of basic blocks; this is what the MAX_TNT cap derives from.
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Synthetic, stable virtual address of a block.
    pub fn address_of(&self, id: BlockId) -> u64 {
        self.address_base + BLOCK_ADDR_STRIDE * id as u64
    }

    /// Inverse of `address_of`; used by the edge reconstructor.
    pub fn block_at_address(&self, addr: u64) -> Option<BlockId> {
        let off = addr.checked_sub(self.address_base)?;
        if off % BLOCK_ADDR_STRIDE != 0 {
            return None;
        }
        let id = off / BLOCK_ADDR_STRIDE;
        if id < self.blocks.len() as u64 {
            Some(id as BlockId)
        } else {
            None
        }
    }

    /// Set of possible ground-truth edges, for coverage denominators.
    pub fn possible_edges(&self) -> Vec<(BlockId, BlockId)> {
        let mut edges = Vec::new();
        for b in &self.blocks {
            let mut ts = b.terminator.targets();
            ts.sort_unstable();
            ts.dedup();
            for t in ts {
                edges.push((b.id, t));
            }
        }
        edges
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(i: u8) -> Reg {
        Reg::new(i).unwrap()
    }

    fn exit_block(id: BlockId) -> Block {
        Block {
            id,
            micro_ops: vec![],
            terminator: Terminator::Exit { code: 0 },
        }
    }

    #[test]
    fn rejects_empty_program() {
        assert_eq!(
            TargetProgram::new(vec![], 0, DEFAULT_ADDRESS_BASE).unwrap_err(),
            ProgramError::Empty
        );
    }

    #[test]
    fn rejects_dangling_target() {
        let blocks = vec![Block {
            id: 0,
            micro_ops: vec![],
            terminator: Terminator::Jump { target: 99 },
        }];
        assert_eq!(
            TargetProgram::new(blocks, 0, DEFAULT_ADDRESS_BASE).unwrap_err(),
            ProgramError::DanglingTarget {
                block: 0,
                target: 99
            }
        );
    }

    #[test]
    fn rejects_sparse_ids() {
        let blocks = vec![exit_block(0), exit_block(2)];
        assert_eq!(
            TargetProgram::new(blocks, 0, DEFAULT_ADDRESS_BASE).unwrap_err(),
            ProgramError::MissingBlock(1)
        );
    }

    #[test]
    fn address_mapping_roundtrips() {
        let blocks = vec![exit_block(0), exit_block(1)];
        let p = TargetProgram::new(blocks, 0, DEFAULT_ADDRESS_BASE).unwrap();
        assert_eq!(p.address_of(1), DEFAULT_ADDRESS_BASE + 16);
        assert_eq!(p.block_at_address(p.address_of(1)), Some(1));
        assert_eq!(p.block_at_address(DEFAULT_ADDRESS_BASE + 32), None);
        assert_eq!(p.block_at_address(3), None);
    }

    #[test]
    fn register_bounds() {
        assert!(Reg::new(7).is_ok());
        assert_eq!(Reg::new(8).unwrap_err(), ProgramError::BadRegister(8));
        let _ = r(0);
    }
}
