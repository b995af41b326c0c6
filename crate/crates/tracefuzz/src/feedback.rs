//! Coverage feedback: slice-hash path feedback over the packet stream, the
//! AFL-style edge+hitcount baseline, and edge reconstruction from packets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::{CodecError, Packet, PGD_HEADER, PGE_HEADER, TIP_HEADER};
use crate::vm::{BlockId, TargetProgram, Terminator};

/// Default bitmap byte budget, matching AFL's 64KB map.
pub const DEFAULT_BITMAP_SIZE: usize = 65_536;
/// Default slice length pending per-target calibration.
pub const DEFAULT_MAX_TIP: u32 = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FeedbackError {
    #[error("bitmap bit count must be a power of two >= 2, got {0}")]
    BadBitSize(u64),
    #[error("bitmap mode or size mismatch")]
    BitmapMismatch,
    #[error("trace desynchronized from CFG at packet {position}: {reason}")]
    Desync { position: usize, reason: String },
}

/// Streaming SDBM hash step: `b + (h << 6) + (h << 16) - h`, mod 2^64.
#[inline]
pub fn sdbm_update(h: u64, b: u8) -> u64 {
    (b as u64)
        .wrapping_add(h << 6)
        .wrapping_add(h << 16)
        .wrapping_sub(h)
}

#[inline]
pub fn sdbm_bytes(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h = sdbm_update(h, b);
    }
    h
}

/// Folds a 64-bit hash into `[0, bit_size)` by XOR-ing `log2(bit_size)`-wide
/// pieces of the hash.
pub fn encode_index(bit_hash: u64, bit_size: u64) -> Result<u64, FeedbackError> {
    if bit_size < 2 || !bit_size.is_power_of_two() {
        return Err(FeedbackError::BadBitSize(bit_size));
    }
    let width = bit_size.trailing_zeros() as u64;
    let mask = bit_size - 1;
    let rounds = 64 / width;
    let mut index = 0u64;
    for k in 0..=rounds {
        let shift = k * width;
        let piece = if shift >= 64 { 0 } else { bit_hash >> shift };
        index ^= piece & mask;
    }
    Ok(index)
}

/// The encoding as literally printed (`rnd = 64 / bit_size`, shifting by
/// `bit_size`); for any realistic bitmap this degenerates to masking the low
/// bits. Kept behind a flag for fidelity experiments.
pub fn encode_index_literal(bit_hash: u64, bit_size: u64) -> Result<u64, FeedbackError> {
    if bit_size < 2 || !bit_size.is_power_of_two() {
        return Err(FeedbackError::BadBitSize(bit_size));
    }
    let mask = bit_size - 1;
    let rounds = 64 / bit_size;
    let mut index = bit_hash & mask;
    let mut h = bit_hash;
    for _ in 0..=rounds {
        h = if bit_size >= 64 { 0 } else { h >> bit_size };
        index ^= h & mask;
    }
    Ok(index & mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitmapMode {
    /// One bit per slot; used by path-slice feedback.
    BitGranular,
    /// One byte per slot holding a raw hit count, classified into AFL
    /// buckets at comparison time.
    ByteHitcount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NewBits {
    Nothing,
    NewCoverage,
}

/// Fixed-size coverage store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    mode: BitmapMode,
    bytes: Vec<u8>,
    // Byte indices touched since the last clear; only maintained in
    // BitGranular mode, where local maps are sparse.
    dirty: Vec<u32>,
}

impl Bitmap {
    pub fn new(mode: BitmapMode, size: usize) -> Self {
        Self {
            mode,
            bytes: vec![0; size],
            dirty: Vec::new(),
        }
    }

    pub fn mode(&self) -> BitmapMode {
        self.mode
    }

    pub fn size(&self) -> usize {
        self.bytes.len()
    }

    /// Number of addressable one-bit slots (`size << 3`).
    pub fn bit_size(&self) -> u64 {
        (self.bytes.len() as u64) << 3
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn set_bit(&mut self, index: u64) {
        debug_assert_eq!(self.mode, BitmapMode::BitGranular);
        let byte = (index >> 3) as usize;
        let bit = (index & 7) as u8;
        if self.bytes[byte] == 0 {
            self.dirty.push(byte as u32);
        }
        self.bytes[byte] |= 1 << bit;
    }

    pub fn bit(&self, index: u64) -> bool {
        let byte = (index >> 3) as usize;
        self.bytes[byte] >> (index & 7) & 1 == 1
    }

    pub fn bump_slot(&mut self, slot: usize) {
        debug_assert_eq!(self.mode, BitmapMode::ByteHitcount);
        self.bytes[slot] = self.bytes[slot].saturating_add(1);
    }

    pub fn slot(&self, slot: usize) -> u8 {
        self.bytes[slot]
    }

    /// Covered slots: set bits in bit mode, nonzero bytes in hitcount mode.
    pub fn occupancy(&self) -> u64 {
        match self.mode {
            BitmapMode::BitGranular => self
                .bytes
                .iter()
                .map(|b| b.count_ones() as u64)
                .sum(),
            BitmapMode::ByteHitcount => {
                self.bytes.iter().filter(|&&b| b != 0).count() as u64
            }
        }
    }

    /// Bytes holding at least one touched slot; the structural footprint
    /// probe for the bit-vs-byte space claim.
    pub fn touched_bytes(&self) -> u64 {
        self.bytes.iter().filter(|&&b| b != 0).count() as u64
    }

    /// Indices of covered slots, ascending.
    pub fn touched_slots(&self) -> Vec<u64> {
        match self.mode {
            BitmapMode::BitGranular => {
                let mut dirty = self.dirty.clone();
                dirty.sort_unstable();
                dirty
                    .iter()
                    .flat_map(|&byte| {
                        let bits = self.bytes[byte as usize];
                        (0..8)
                            .filter(move |b| bits >> b & 1 == 1)
                            .map(move |b| ((byte as u64) << 3) + b)
                    })
                    .collect()
            }
            BitmapMode::ByteHitcount => self
                .bytes
                .iter()
                .enumerate()
                .filter(|(_, &b)| b != 0)
                .map(|(i, _)| i as u64)
                .collect(),
        }
    }

    pub fn clear(&mut self) {
        match self.mode {
            BitmapMode::BitGranular => {
                for &i in &self.dirty {
                    self.bytes[i as usize] = 0;
                }
                self.dirty.clear();
            }
            BitmapMode::ByteHitcount => self.bytes.fill(0),
        }
    }
}

/// AFL hit-count bucket classification; one byte logs at most 255 hits and
/// everything from 128 up lands in the same bucket.
#[inline]
pub fn bucket(count: u8) -> u8 {
    match count {
        0 => 0,
        1 => 1,
        2 => 2,
        3 => 4,
        4..=7 => 8,
        8..=15 => 16,
        16..=31 => 32,
        32..=127 => 64,
        _ => 128,
    }
}

/// Compares a per-execution map against the global accumulator and absorbs
/// it. Bit mode: any locally set bit that is globally clear is new coverage.
/// Hitcount mode: a slot is new if its local bucket has not been seen in the
/// global slot's bucket set.
pub fn has_new_bits(local: &Bitmap, global: &mut Bitmap) -> Result<NewBits, FeedbackError> {
    if local.mode != global.mode || local.bytes.len() != global.bytes.len() {
        return Err(FeedbackError::BitmapMismatch);
    }
    let mut new = false;
    match local.mode {
        BitmapMode::BitGranular => {
            for &i in &local.dirty {
                let i = i as usize;
                let l = local.bytes[i];
                if l & !global.bytes[i] != 0 {
                    new = true;
                }
                global.bytes[i] |= l;
            }
        }
        BitmapMode::ByteHitcount => {
            // Buckets are powers of two, so the global byte accumulates the
            // set of observed buckets per slot. Scan word-at-a-time; local
            // maps are overwhelmingly zero.
            let words = local.bytes.len() / 8;
            for w in 0..words {
                let span = w * 8..w * 8 + 8;
                let lw = u64::from_ne_bytes(local.bytes[span.clone()].try_into().unwrap());
                if lw == 0 {
                    continue;
                }
                for i in span {
                    let l = local.bytes[i];
                    if l == 0 {
                        continue;
                    }
                    let lb = bucket(l);
                    let g = &mut global.bytes[i];
                    if lb & !*g != 0 {
                        new = true;
                    }
                    *g |= lb;
                }
            }
            for i in words * 8..local.bytes.len() {
                let l = local.bytes[i];
                if l == 0 {
                    continue;
                }
                let lb = bucket(l);
                let g = &mut global.bytes[i];
                if lb & !*g != 0 {
                    new = true;
                }
                *g |= lb;
            }
        }
    }
    Ok(if new {
        NewBits::NewCoverage
    } else {
        NewBits::Nothing
    })
}

#[derive(Debug, Clone, Copy)]
pub struct FeedbackConfig {
    /// TIP packets per slice.
    pub max_tip: u32,
    /// Cap on TNT branch bits hashed between two TIPs.
    pub max_tnt: u64,
    /// Bitmap byte budget.
    pub bitmap_size: usize,
    /// Use the literally-printed encoding instead of the corrected fold.
    pub literal_encoding: bool,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            max_tip: DEFAULT_MAX_TIP,
            max_tnt: u64::MAX,
            bitmap_size: DEFAULT_BITMAP_SIZE,
            literal_encoding: false,
        }
    }
}

impl FeedbackConfig {
    /// MAX_TNT derives from the target's basic-block count.
    pub fn for_program(program: &TargetProgram) -> Self {
        Self {
            max_tnt: program.block_count() as u64,
            ..Self::default()
        }
    }
}

/// Streaming slice hasher: cuts the packet stream into slices of `max_tip`
/// TIPs and records each slice as one bitmap bit.
#[derive(Debug, Clone)]
pub struct SliceHasher {
    bit_hash: u64,
    tip_cnt: u32,
    tnt_cnt: u64,
    max_tip: u32,
    max_tnt: u64,
    literal_encoding: bool,
}

impl SliceHasher {
    pub fn new(cfg: &FeedbackConfig) -> Self {
        assert!(cfg.max_tip >= 1 && cfg.max_tnt >= 1);
        Self {
            bit_hash: 0,
            tip_cnt: 0,
            tnt_cnt: 0,
            max_tip: cfg.max_tip,
            max_tnt: cfg.max_tnt,
            literal_encoding: cfg.literal_encoding,
        }
    }

    pub fn bit_hash(&self) -> u64 {
        self.bit_hash
    }

    fn encode(&self, bitmap: &Bitmap) -> u64 {
        let bit_size = bitmap.bit_size();
        if self.literal_encoding {
            encode_index_literal(self.bit_hash, bit_size).expect("validated bitmap size")
        } else {
            encode_index(self.bit_hash, bit_size).expect("validated bitmap size")
        }
    }

    /// One step of the bitmap updating algorithm. PGE/PGD packets are run
    /// delimiters and do not contribute.
    pub fn update(&mut self, packet: &Packet, bitmap: &mut Bitmap) {
        self.update_observed(packet, bitmap, |_, _| {});
    }

    /// Like [`update`](Self::update), reporting each completed slice's
    /// `(hash, index)` pair to `observe`; used for calibration diagnostics.
    pub fn update_observed(
        &mut self,
        packet: &Packet,
        bitmap: &mut Bitmap,
        mut observe: impl FnMut(u64, u64),
    ) {
        match packet {
            Packet::Tip(addr) => {
                let bytes = addr.to_le_bytes();
                self.bit_hash = sdbm_bytes(self.bit_hash, &bytes);
                self.tip_cnt += 1;
                self.tnt_cnt = 0;
                if self.tip_cnt >= self.max_tip {
                    let index = self.encode(bitmap);
                    observe(self.bit_hash, index);
                    bitmap.set_bit(index);
                    self.tip_cnt = 0;
                    // Start a new slice, seeded with the boundary TIP.
                    self.bit_hash = sdbm_bytes(0, &bytes);
                }
            }
            Packet::Tnt(group) => {
                if self.tnt_cnt <= self.max_tnt {
                    self.bit_hash = sdbm_update(self.bit_hash, group.payload_byte());
                    self.tnt_cnt += group.len() as u64;
                }
            }
            Packet::Pge(_) | Packet::Pgd(_) => {}
        }
    }

    /// Hashes raw PTX1 bytes straight off the wire, skipping packet
    /// materialization entirely; this is the hot path of path-slice feedback.
    ///
    /// Consumes whole packets only and returns how many bytes were taken; a
    /// trailing partial address packet is withheld for the caller to
    /// re-present once more bytes arrive. Observable bitmap effects are
    /// identical to feeding the decoded packets through
    /// [`update`](Self::update).
    pub fn update_bytes(
        &mut self,
        bytes: &[u8],
        bitmap: &mut Bitmap,
    ) -> Result<usize, CodecError> {
        let mut pos = 0;
        while pos < bytes.len() {
            let b = bytes[pos];
            if b & 1 == 0 {
                // TNT byte; strip the stop bit to get the hashed payload.
                let stop = 7u32.wrapping_sub(b.leading_zeros());
                if b == 0 || stop < 2 {
                    return Err(CodecError::Malformed {
                        offset: pos,
                        byte: b,
                    });
                }
                if self.tnt_cnt <= self.max_tnt {
                    self.bit_hash = sdbm_update(self.bit_hash, b & !(1 << stop));
                    self.tnt_cnt += (stop - 1) as u64;
                }
                pos += 1;
            } else {
                match b {
                    TIP_HEADER => {
                        if pos + 9 > bytes.len() {
                            break;
                        }
                        let addr = &bytes[pos + 1..pos + 9];
                        self.bit_hash = sdbm_bytes(self.bit_hash, addr);
                        self.tip_cnt += 1;
                        self.tnt_cnt = 0;
                        if self.tip_cnt >= self.max_tip {
                            let index = self.encode(bitmap);
                            bitmap.set_bit(index);
                            self.tip_cnt = 0;
                            self.bit_hash = sdbm_bytes(0, addr);
                        }
                        pos += 9;
                    }
                    PGE_HEADER | PGD_HEADER => {
                        if pos + 9 > bytes.len() {
                            break;
                        }
                        pos += 9;
                    }
                    _ => {
                        return Err(CodecError::Malformed {
                            offset: pos,
                            byte: b,
                        })
                    }
                }
            }
        }
        Ok(pos)
    }

    /// Records the trailing partial slice at end of stream, if any TIP has
    /// been absorbed since the last slice boundary. Without this, runs
    /// shorter than one full slice would produce no feedback at all.
    pub fn finalize(&mut self, bitmap: &mut Bitmap) {
        self.finalize_observed(bitmap, |_, _| {});
    }

    /// [`finalize`](Self::finalize) with the same observation hook as
    /// [`update_observed`](Self::update_observed).
    pub fn finalize_observed(&mut self, bitmap: &mut Bitmap, mut observe: impl FnMut(u64, u64)) {
        if self.tip_cnt > 0 {
            let index = self.encode(bitmap);
            observe(self.bit_hash, index);
            bitmap.set_bit(index);
            self.tip_cnt = 0;
            self.bit_hash = 0;
            self.tnt_cnt = 0;
        }
    }
}

/// Fixed pseudorandom labeling of block ids for the AFL edge map, so runs
/// are reproducible.
#[derive(Debug, Clone)]
pub struct EdgeLabels {
    labels: Vec<u32>,
    slots: u32,
}

const EDGE_LABEL_SEED: u64 = 0x51_0a_f1;

impl EdgeLabels {
    pub fn new(block_count: usize, bitmap_size: usize) -> Self {
        let slots = bitmap_size as u32;
        assert!(slots.is_power_of_two());
        let mut rng = ChaCha8Rng::seed_from_u64(EDGE_LABEL_SEED);
        let labels = (0..block_count).map(|_| rng.gen::<u32>()).collect();
        Self { labels, slots }
    }

    pub fn for_program(program: &TargetProgram, bitmap_size: usize) -> Self {
        Self::new(program.block_count(), bitmap_size)
    }

    fn label(&self, id: BlockId) -> u32 {
        self.labels[id as usize]
    }
}

/// Rolling state of the AFL edge hit-count instrumentation.
#[derive(Debug, Clone, Copy, Default)]
pub struct EdgeState {
    prev_carry: u32,
}

impl EdgeState {
    /// Registers one executed edge ending at `cur`.
    pub fn update(&mut self, labels: &EdgeLabels, cur: BlockId, bitmap: &mut Bitmap) {
        let label = labels.label(cur);
        let slot = (label ^ self.prev_carry) & (labels.slots - 1);
        bitmap.bump_slot(slot as usize);
        self.prev_carry = label >> 1;
    }
}

/// Replays a packet stream against the program's CFG, reproducing the
/// ground-truth edge sequence.
pub fn reconstruct_edges(
    program: &TargetProgram,
    packets: &[Packet],
) -> Result<Vec<(BlockId, BlockId)>, FeedbackError> {
    let desync = |position: usize, reason: &str| FeedbackError::Desync {
        position,
        reason: reason.to_string(),
    };

    let mut pos = 0usize;
    let mut bits: std::collections::VecDeque<bool> = std::collections::VecDeque::new();
    let mut edges = Vec::new();

    let mut cur = match packets.first() {
        Some(Packet::Pge(addr)) => program
            .block_at_address(*addr)
            .ok_or_else(|| desync(0, "PGE address maps to no block"))?,
        _ => return Err(desync(0, "stream does not begin with PGE")),
    };
    if cur != program.entry() {
        return Err(desync(0, "PGE address is not the entry block"));
    }
    pos += 1;

    loop {
        let next = match &program.block(cur).terminator {
            Terminator::CondBranch {
                true_target,
                false_target,
                ..
            } => {
                if bits.is_empty() {
                    match packets.get(pos) {
                        Some(Packet::Tnt(g)) => {
                            bits.extend(g.iter());
                            pos += 1;
                        }
                        Some(Packet::Pgd(_)) | None => break,
                        Some(other) => {
                            return Err(desync(
                                pos,
                                &format!("expected TNT at conditional branch, got {other:?}"),
                            ))
                        }
                    }
                }
                let taken = bits.pop_front().expect("refilled above");
                if taken {
                    *true_target
                } else {
                    *false_target
                }
            }
            Terminator::Jump { target } => {
                // Jumps emit nothing; a budget stop *at* this block is only
                // distinguishable by the trailing PGD carrying its address.
                if bits.is_empty() {
                    if let Some(Packet::Pgd(addr)) = packets.get(pos) {
                        if program.block_at_address(*addr) == Some(cur) {
                            break;
                        }
                    }
                }
                *target
            }
            Terminator::IndirectJump { table, .. } => {
                if !bits.is_empty() {
                    return Err(desync(pos, "TNT bits pending at indirect jump"));
                }
                match packets.get(pos) {
                    Some(Packet::Tip(addr)) => {
                        pos += 1;
                        let id = program
                            .block_at_address(*addr)
                            .ok_or_else(|| desync(pos - 1, "TIP address maps to no block"))?;
                        if !table.contains(&id) {
                            return Err(desync(pos - 1, "TIP target not in jump table"));
                        }
                        id
                    }
                    Some(Packet::Pgd(_)) | None => break,
                    Some(other) => {
                        return Err(desync(
                            pos,
                            &format!("expected TIP at indirect jump, got {other:?}"),
                        ))
                    }
                }
            }
            Terminator::Call { target, .. } => {
                if !bits.is_empty() {
                    return Err(desync(pos, "TNT bits pending at call"));
                }
                match packets.get(pos) {
                    Some(Packet::Tip(addr)) => {
                        pos += 1;
                        let id = program
                            .block_at_address(*addr)
                            .ok_or_else(|| desync(pos - 1, "TIP address maps to no block"))?;
                        if id != *target {
                            return Err(desync(pos - 1, "TIP does not match call target"));
                        }
                        id
                    }
                    // A PGD here is a stack-exhaustion or budget stop.
                    Some(Packet::Pgd(_)) | None => break,
                    Some(other) => {
                        return Err(desync(
                            pos,
                            &format!("expected TIP at call, got {other:?}"),
                        ))
                    }
                }
            }
            Terminator::Return => {
                if !bits.is_empty() {
                    return Err(desync(pos, "TNT bits pending at return"));
                }
                match packets.get(pos) {
                    Some(Packet::Tip(addr)) => {
                        pos += 1;
                        program
                            .block_at_address(*addr)
                            .ok_or_else(|| desync(pos - 1, "TIP address maps to no block"))?
                    }
                    Some(Packet::Pgd(_)) | None => break,
                    Some(other) => {
                        return Err(desync(
                            pos,
                            &format!("expected TIP at return, got {other:?}"),
                        ))
                    }
                }
            }
            Terminator::Exit { .. } | Terminator::Trap { .. } => break,
        };
        edges.push((cur, next));
        cur = next;
    }
    Ok(edges)
}
