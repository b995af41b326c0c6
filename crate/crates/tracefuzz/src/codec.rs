//! PTX1 packet codec: the wire format for control-flow trace packets, plus
//! the single-producer/single-consumer trace ring the pipeline runs over.
//!
//! Wire format (bit-exact):
//! - TNT packet: one byte `B` with `B & 1 == 0`. Branch bits occupy bits
//!   `1..=k` (`k <= 6`) in execution order (bit 1 = earliest branch), bit
//!   `k + 1` is a stop bit set to 1, and everything above the stop bit is 0.
//! - Address packets: a header byte (`0x03` TIP, `0x05` PGE, `0x07` PGD)
//!   followed by the 64-bit target address, little-endian.
//!
//! Trace dump files carry raw PTX1 bytes with no framing.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

pub const TIP_HEADER: u8 = 0x03;
pub const PGE_HEADER: u8 = 0x05;
pub const PGD_HEADER: u8 = 0x07;

const ADDR_PACKET_LEN: usize = 9;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("TNT group must carry between 1 and {} bits, got {0}", TntGroup::MAX_BITS)]
    InvalidTntLen(usize),
    #[error("malformed packet stream at byte offset {offset}: header byte {byte:#04x}")]
    Malformed { offset: usize, byte: u8 },
}

/// An ordered group of 1..=6 conditional-branch outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TntGroup {
    len: u8,
    // Bit i (LSB first) is the i-th branch outcome in execution order.
    bits: u8,
}

impl TntGroup {
    pub const MAX_BITS: usize = 6;

    pub fn new(outcomes: &[bool]) -> Result<Self, CodecError> {
        if outcomes.is_empty() || outcomes.len() > Self::MAX_BITS {
            return Err(CodecError::InvalidTntLen(outcomes.len()));
        }
        let mut bits = 0u8;
        for (i, &taken) in outcomes.iter().enumerate() {
            if taken {
                bits |= 1 << i;
            }
        }
        Ok(Self {
            len: outcomes.len() as u8,
            bits,
        })
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bit(&self, i: usize) -> bool {
        debug_assert!(i < self.len());
        self.bits >> i & 1 == 1
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len()).map(move |i| self.bit(i))
    }

    /// The encoded wire byte: branch bits shifted up by one, stop bit above.
    pub fn encoded_byte(&self) -> u8 {
        (self.bits << 1) | (1 << (self.len + 1))
    }

    /// The packed payload with the stop bit cleared; this is the byte the
    /// slice hasher consumes.
    pub fn payload_byte(&self) -> u8 {
        self.bits << 1
    }
}

/// A decoded control-flow trace event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Packet {
    /// Conditional-branch outcomes, earliest first.
    Tnt(TntGroup),
    /// Destination of an indirect transfer, call, or return.
    Tip(u64),
    /// Trace-on marker carrying the entry address.
    Pge(u64),
    /// Trace-off marker carrying the final address.
    Pgd(u64),
}

impl Packet {
    pub fn tnt(outcomes: &[bool]) -> Result<Self, CodecError> {
        TntGroup::new(outcomes).map(Packet::Tnt)
    }
}

/// Appends the PTX1 encoding of `p` to `out`.
pub fn encode_packet(p: &Packet, out: &mut Vec<u8>) {
    match *p {
        Packet::Tnt(g) => out.push(g.encoded_byte()),
        Packet::Tip(addr) => {
            out.push(TIP_HEADER);
            out.extend_from_slice(&addr.to_le_bytes());
        }
        Packet::Pge(addr) => {
            out.push(PGE_HEADER);
            out.extend_from_slice(&addr.to_le_bytes());
        }
        Packet::Pgd(addr) => {
            out.push(PGD_HEADER);
            out.extend_from_slice(&addr.to_le_bytes());
        }
    }
}

pub fn encode_packets(packets: &[Packet]) -> Vec<u8> {
    let mut out = Vec::new();
    for p in packets {
        encode_packet(p, &mut out);
    }
    out
}

/// Decodes all complete packets from a stream prefix.
///
/// Returns the packets in order and the number of bytes consumed. A trailing
/// partial packet is left unconsumed; a byte matching no header pattern is a
/// malformed-stream error reporting its offset.
pub fn decode_stream(bytes: &[u8]) -> Result<(Vec<Packet>, usize), CodecError> {
    let mut packets = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let b = bytes[pos];
        if b & 1 == 0 {
            // TNT byte: the highest set bit is the stop bit, which must sit
            // at position 2..=7 so the group carries 1..=6 branch bits.
            if b == 0 {
                return Err(CodecError::Malformed {
                    offset: pos,
                    byte: b,
                });
            }
            let stop = 7 - b.leading_zeros() as u8;
            if stop < 2 {
                return Err(CodecError::Malformed {
                    offset: pos,
                    byte: b,
                });
            }
            let len = stop - 1;
            let bits = (b >> 1) & ((1 << len) - 1);
            packets.push(Packet::Tnt(TntGroup { len, bits }));
            pos += 1;
        } else {
            match b {
                TIP_HEADER | PGE_HEADER | PGD_HEADER => {
                    if pos + ADDR_PACKET_LEN > bytes.len() {
                        break; // partial packet, withheld
                    }
                    let mut addr = [0u8; 8];
                    addr.copy_from_slice(&bytes[pos + 1..pos + 9]);
                    let addr = u64::from_le_bytes(addr);
                    packets.push(match b {
                        TIP_HEADER => Packet::Tip(addr),
                        PGE_HEADER => Packet::Pge(addr),
                        _ => Packet::Pgd(addr),
                    });
                    pos += ADDR_PACKET_LEN;
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
    Ok((packets, pos))
}

/// Accumulates single branch bits into byte-aligned TNT groups.
///
/// A group is emitted when it reaches six bits; the pipeline flushes a
/// partial group whenever an address packet has to be emitted.
#[derive(Debug, Default)]
pub struct TntPacker {
    len: u8,
    bits: u8,
}

impl TntPacker {
    pub fn push(&mut self, taken: bool) -> Option<TntGroup> {
        if taken {
            self.bits |= 1 << self.len;
        }
        self.len += 1;
        if self.len as usize == TntGroup::MAX_BITS {
            self.flush()
        } else {
            None
        }
    }

    pub fn flush(&mut self) -> Option<TntGroup> {
        if self.len == 0 {
            return None;
        }
        let g = TntGroup {
            len: self.len,
            bits: self.bits,
        };
        self.len = 0;
        self.bits = 0;
        Some(g)
    }
}

/// Append-only trace buffer shared between one producer and one consumer.
///
/// Bytes in `[0, pt_off)` are published and immutable; `pt_off` only moves
/// at flush points (with release semantics, so the consumer never observes
/// unpublished bytes), and `last_off` only advances after whole packets have
/// been decoded.
#[derive(Debug, Default)]
pub struct TraceRing {
    storage: Mutex<Vec<u8>>,
    pt_off: AtomicUsize,
    last_off: AtomicUsize,
}

impl TraceRing {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(bytes: usize) -> Self {
        Self {
            storage: Mutex::new(Vec::with_capacity(bytes)),
            ..Self::default()
        }
    }

    /// Producer side: append `bytes` and publish them.
    pub fn publish(&self, bytes: &[u8]) {
        if bytes.is_empty() {
            return;
        }
        let mut storage = self.storage.lock().unwrap();
        storage.extend_from_slice(bytes);
        let len = storage.len();
        drop(storage);
        self.pt_off.store(len, Ordering::Release);
    }

    /// Consumer side: decode every complete packet in `[last_off, pt_off)`.
    ///
    /// Idempotent when nothing new has been published.
    pub fn consume(&self) -> Result<Vec<Packet>, CodecError> {
        let published = self.pt_off.load(Ordering::Acquire);
        let last = self.last_off.load(Ordering::Relaxed);
        if last >= published {
            return Ok(Vec::new());
        }
        let chunk = {
            let storage = self.storage.lock().unwrap();
            storage[last..published].to_vec()
        };
        let (packets, consumed) = decode_stream(&chunk).map_err(|e| match e {
            CodecError::Malformed { offset, byte } => CodecError::Malformed {
                offset: last + offset,
                byte,
            },
            other => other,
        })?;
        self.last_off.store(last + consumed, Ordering::Relaxed);
        Ok(packets)
    }

    /// Consumer side: process published bytes in place, avoiding a copy.
    ///
    /// `f` receives `[last_off, pt_off)` and returns how many bytes it
    /// consumed. Runs under the storage lock, so a concurrent producer
    /// blocks for the duration; meant for sequential draining.
    pub fn consume_in_place(&self, f: impl FnOnce(&[u8]) -> usize) -> usize {
        let published = self.pt_off.load(Ordering::Acquire);
        let last = self.last_off.load(Ordering::Relaxed);
        if last >= published {
            return 0;
        }
        let consumed = {
            let storage = self.storage.lock().unwrap();
            f(&storage[last..published])
        };
        debug_assert!(consumed <= published - last);
        self.last_off.store(last + consumed, Ordering::Relaxed);
        consumed
    }

    /// Consumer side: append every published byte in `[last_off, pt_off)` to
    /// `out` without decoding, returning how many were taken. Raw consumers
    /// own reassembly of packets split across publishes.
    pub fn consume_raw(&self, out: &mut Vec<u8>) -> usize {
        let published = self.pt_off.load(Ordering::Acquire);
        let last = self.last_off.load(Ordering::Relaxed);
        if last >= published {
            return 0;
        }
        {
            let storage = self.storage.lock().unwrap();
            out.extend_from_slice(&storage[last..published]);
        }
        self.last_off.store(published, Ordering::Relaxed);
        published - last
    }

    pub fn pt_off(&self) -> usize {
        self.pt_off.load(Ordering::Acquire)
    }

    pub fn last_off(&self) -> usize {
        self.last_off.load(Ordering::Relaxed)
    }

    /// Published bytes not yet consumed.
    pub fn backlog(&self) -> usize {
        self.pt_off().saturating_sub(self.last_off())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tnt(outcomes: &[bool]) -> Packet {
        Packet::tnt(outcomes).unwrap()
    }

    #[test]
    fn encode_tnt_single_taken() {
        assert_eq!(encode_packets(&[tnt(&[true])]), vec![0x06]);
    }

    #[test]
    fn encode_tnt_taken_not_taken() {
        assert_eq!(encode_packets(&[tnt(&[true, false])]), vec![0x0A]);
    }

    #[test]
    fn encode_tip_fig2_entry() {
        // TIP 0x400629, header then little-endian address.
        assert_eq!(
            encode_packets(&[Packet::Tip(0x400629)]),
            vec![0x03, 0x29, 0x06, 0x40, 0, 0, 0, 0, 0]
        );
    }

    #[test]
    fn tnt_group_rejects_bad_lengths() {
        assert_eq!(TntGroup::new(&[]), Err(CodecError::InvalidTntLen(0)));
        assert_eq!(TntGroup::new(&[true; 7]), Err(CodecError::InvalidTntLen(7)));
    }

    #[test]
    fn decode_tip_then_tnt() {
        let bytes = [0x03, 0x29, 0x06, 0x40, 0, 0, 0, 0, 0, 0x06];
        let (packets, consumed) = decode_stream(&bytes).unwrap();
        assert_eq!(packets, vec![Packet::Tip(0x400629), tnt(&[true])]);
        assert_eq!(consumed, 10);
    }

    #[test]
    fn decode_empty() {
        assert_eq!(decode_stream(&[]).unwrap(), (vec![], 0));
    }

    #[test]
    fn decode_withholds_truncated_tip() {
        assert_eq!(decode_stream(&[0x03, 0x29, 0x06]).unwrap(), (vec![], 0));
    }

    #[test]
    fn decode_rejects_unknown_headers() {
        // Odd byte that is not an address header.
        assert_eq!(
            decode_stream(&[0x06, 0x09]),
            Err(CodecError::Malformed {
                offset: 1,
                byte: 0x09
            })
        );
        // TNT byte with no stop bit.
        assert_eq!(
            decode_stream(&[0x00]),
            Err(CodecError::Malformed {
                offset: 0,
                byte: 0x00
            })
        );
        // Stop bit in position 1 would mean a zero-bit group.
        assert_eq!(
            decode_stream(&[0x02]),
            Err(CodecError::Malformed {
                offset: 0,
                byte: 0x02
            })
        );
    }

    #[test]
    fn tnt_packer_groups_six_bits() {
        let mut packer = TntPacker::default();
        for i in 0..5 {
            assert_eq!(packer.push(i % 2 == 0), None);
        }
        let full = packer.push(true).unwrap();
        assert_eq!(full.len(), 6);
        let outcomes: Vec<bool> = full.iter().collect();
        assert_eq!(outcomes, vec![true, false, true, false, true, true]);
        assert_eq!(packer.flush(), None);
    }

    #[test]
    fn ring_publish_advances_pt_off() {
        let ring = TraceRing::new();
        ring.publish(&[0u8; 11]);
        assert_eq!(ring.pt_off(), 11);
        let ring = TraceRing::new();
        ring.publish(&[1u8; 4]);
        ring.publish(&[2u8; 7]);
        assert_eq!(ring.pt_off(), 11);
        ring.publish(&[]);
        assert_eq!(ring.pt_off(), 11);
    }

    #[test]
    fn ring_consume_is_idempotent_when_drained() {
        let ring = TraceRing::new();
        assert_eq!(ring.consume().unwrap(), vec![]);
        let fig2 = [
            Packet::Tip(0x400629),
            tnt(&[true]),
            Packet::Tip(0x4005e4),
            Packet::Tip(0x4006b8),
        ];
        ring.publish(&encode_packets(&fig2));
        assert_eq!(ring.consume().unwrap(), fig2.to_vec());
        assert_eq!(ring.last_off(), ring.pt_off());
        assert_eq!(ring.consume().unwrap(), vec![]);
    }

    #[test]
    fn ring_reassembles_packets_split_across_flushes() {
        // Enumerate every split point of a two-packet stream and check that
        // the first consume only ever returns whole packets.
        let stream = encode_packets(&[Packet::Tip(0x400629), tnt(&[true, true, false])]);
        for split in 0..=stream.len() {
            let ring = TraceRing::new();
            ring.publish(&stream[..split]);
            let first = ring.consume().unwrap();
            for p in &first {
                match p {
                    Packet::Tip(a) => assert_eq!(*a, 0x400629),
                    Packet::Tnt(g) => assert_eq!(g.len(), 3),
                    other => panic!("unexpected packet {other:?}"),
                }
            }
            ring.publish(&stream[split..]);
            let mut all = first;
            all.extend(ring.consume().unwrap());
            assert_eq!(
                all,
                vec![Packet::Tip(0x400629), tnt(&[true, true, false])]
            );
            assert_eq!(ring.last_off(), ring.pt_off());
        }
    }

    #[test]
    fn ring_concurrent_producer_consumer() {
        let packets: Vec<Packet> = (0..500)
            .map(|i| match i % 3 {
                0 => Packet::Tip(0x1000 + i),
                1 => tnt(&[i % 2 == 0, true]),
                _ => Packet::Tip(0x9999_0000 + i),
            })
            .collect();
        let stream = encode_packets(&packets);
        let ring = TraceRing::new();
        std::thread::scope(|s| {
            let producer = s.spawn(|| {
                for chunk in stream.chunks(7) {
                    ring.publish(chunk);
                }
            });
            let consumer = s.spawn(|| {
                let mut seen = Vec::new();
                while seen.len() < packets.len() {
                    seen.extend(ring.consume().unwrap());
                    std::hint::spin_loop();
                }
                seen
            });
            producer.join().unwrap();
            let seen = consumer.join().unwrap();
            assert_eq!(seen, packets);
        });
    }

    fn arb_packet() -> impl Strategy<Value = Packet> {
        prop_oneof![
            prop::collection::vec(any::<bool>(), 1..=6)
                .prop_map(|v| Packet::tnt(&v).unwrap()),
            any::<u64>().prop_map(Packet::Tip),
            any::<u64>().prop_map(Packet::Pge),
            any::<u64>().prop_map(Packet::Pgd),
        ]
    }

    proptest! {
        #[test]
        fn roundtrip_identity(packets in prop::collection::vec(arb_packet(), 0..64)) {
            let bytes = encode_packets(&packets);
            let (decoded, consumed) = decode_stream(&bytes).unwrap();
            prop_assert_eq!(decoded, packets);
            prop_assert_eq!(consumed, bytes.len());
        }

        #[test]
        fn prefix_monotonicity(packets in prop::collection::vec(arb_packet(), 1..32),
                               cut in any::<prop::sample::Index>()) {
            let bytes = encode_packets(&packets);
            let cut = cut.index(bytes.len() + 1);
            let (short, _) = decode_stream(&bytes[..cut]).unwrap();
            let (full, _) = decode_stream(&bytes).unwrap();
            prop_assert_eq!(&full[..short.len()], &short[..]);
        }
    }
}
