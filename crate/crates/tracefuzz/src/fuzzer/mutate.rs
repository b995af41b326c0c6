//! Input mutators: the deterministic stage walk and the stacked random
//! havoc/splice stages.

use rand::Rng;

/// Values that tend to trigger edge cases in integer comparisons.
const INTERESTING_8: [u8; 9] = [
    0x80, // -128
    0xFF, // -1
    0, 1, 16, 32, 64, 100, 127,
];

const ARITH_MAX: u8 = 35;
/// Upper bound on bytes moved by a single insert/overwrite havoc op, keeping
/// growth gradual so intermediate lengths stay visible to the queue.
const HAVOC_CHUNK: usize = 16;
pub const HAVOC_MAX_LEN: usize = 4096;

#[inline]
fn flip_bit(data: &mut [u8], bit: usize) {
    // MSB-first within each byte, so bit 0 of the buffer is 0x80 of byte 0.
    data[bit >> 3] ^= 0x80 >> (bit & 7);
}

/// The full deterministic stage walk over `input`, in a fixed order:
/// single/double/quad walking bit flips, byte flips, 8-bit arithmetic, and
/// interesting-byte substitution. Each result is paired with the stage name.
pub fn deterministic_mutations(input: &[u8]) -> Vec<(Vec<u8>, &'static str)> {
    let mut out = Vec::new();
    let nbits = input.len() * 8;

    for width in [1usize, 2, 4] {
        let op = match width {
            1 => "bitflip1",
            2 => "bitflip2",
            _ => "bitflip4",
        };
        for start in 0..nbits.saturating_sub(width - 1) {
            let mut d = input.to_vec();
            for b in start..start + width {
                flip_bit(&mut d, b);
            }
            out.push((d, op));
        }
    }

    for i in 0..input.len() {
        let mut d = input.to_vec();
        d[i] ^= 0xFF;
        out.push((d, "byteflip"));
    }

    for i in 0..input.len() {
        for delta in 1..=ARITH_MAX {
            let mut d = input.to_vec();
            d[i] = d[i].wrapping_add(delta);
            out.push((d, "arith+"));
            let mut d = input.to_vec();
            d[i] = d[i].wrapping_sub(delta);
            out.push((d, "arith-"));
        }
    }

    for i in 0..input.len() {
        for v in INTERESTING_8 {
            if v != input[i] {
                let mut d = input.to_vec();
                d[i] = v;
                out.push((d, "interesting"));
            }
        }
    }

    out
}

fn havoc_op(rng: &mut impl Rng, data: &mut Vec<u8>) {
    match rng.gen_range(0..9) {
        0 if !data.is_empty() => {
            let bit = rng.gen_range(0..data.len() * 8);
            flip_bit(data, bit);
        }
        1 if !data.is_empty() => {
            let i = rng.gen_range(0..data.len());
            data[i] = rng.gen();
        }
        2 if !data.is_empty() => {
            let i = rng.gen_range(0..data.len());
            let delta = rng.gen_range(1..=ARITH_MAX);
            data[i] = if rng.gen() {
                data[i].wrapping_add(delta)
            } else {
                data[i].wrapping_sub(delta)
            };
        }
        3 if !data.is_empty() => {
            let i = rng.gen_range(0..data.len());
            data[i] = INTERESTING_8[rng.gen_range(0..INTERESTING_8.len())];
        }
        4 if !data.is_empty() => {
            // Delete a chunk.
            let len = rng.gen_range(1..=data.len().min(HAVOC_CHUNK));
            let at = rng.gen_range(0..=data.len() - len);
            data.drain(at..at + len);
        }
        5 if data.len() < HAVOC_MAX_LEN => {
            // Insert random bytes.
            let len = rng.gen_range(1..=HAVOC_CHUNK.min(HAVOC_MAX_LEN - data.len()));
            let at = rng.gen_range(0..=data.len());
            let chunk: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            data.splice(at..at, chunk);
        }
        6 if !data.is_empty() && data.len() < HAVOC_MAX_LEN => {
            // Clone a chunk of the input elsewhere into itself.
            let len = rng
                .gen_range(1..=data.len().min(HAVOC_CHUNK).min(HAVOC_MAX_LEN - data.len()));
            let from = rng.gen_range(0..=data.len() - len);
            let chunk: Vec<u8> = data[from..from + len].to_vec();
            let at = rng.gen_range(0..=data.len());
            data.splice(at..at, chunk);
        }
        7 if data.len() >= 2 => {
            // Overwrite a chunk with another chunk of the input.
            let len = rng.gen_range(1..=(data.len() / 2).max(1).min(HAVOC_CHUNK));
            let from = rng.gen_range(0..=data.len() - len);
            let to = rng.gen_range(0..=data.len() - len);
            let chunk: Vec<u8> = data[from..from + len].to_vec();
            data[to..to + len].copy_from_slice(&chunk);
        }
        _ => {
            // Repeat one byte a few times (run extension).
            if data.is_empty() || data.len() >= HAVOC_MAX_LEN {
                return;
            }
            let i = rng.gen_range(0..data.len());
            let len = rng.gen_range(1..=HAVOC_CHUNK.min(HAVOC_MAX_LEN - data.len()));
            let b = data[i];
            data.splice(i..i, std::iter::repeat(b).take(len));
        }
    }
}

/// A stacked random mutation: `2^(1..=6)` basic ops applied in sequence.
pub fn havoc(rng: &mut impl Rng, input: &[u8]) -> Vec<u8> {
    let mut data = input.to_vec();
    let stack = 1 << rng.gen_range(1..=6);
    for _ in 0..stack {
        havoc_op(rng, &mut data);
    }
    data
}

/// Crossover: a random prefix of `a` joined to a random suffix of `b`,
/// followed by a havoc pass.
pub fn splice(rng: &mut impl Rng, a: &[u8], b: &[u8]) -> Vec<u8> {
    let cut_a = rng.gen_range(0..=a.len());
    let cut_b = rng.gen_range(0..=b.len());
    let mut data: Vec<u8> = a[..cut_a].to_vec();
    data.extend_from_slice(&b[cut_b..]);
    if data.len() > HAVOC_MAX_LEN {
        data.truncate(HAVOC_MAX_LEN);
    }
    havoc(rng, &data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bitflip1_starts_at_the_high_bit() {
        let muts = deterministic_mutations(&[0x00]);
        assert_eq!(muts[0], (vec![0x80], "bitflip1"));
        assert_eq!(muts[7], (vec![0x01], "bitflip1"));
    }

    #[test]
    fn deterministic_walk_count() {
        let input = [0u8; 4];
        let muts = deterministic_mutations(&input);
        let nbits = 32;
        let expected = nbits + (nbits - 1) + (nbits - 3)   // bit flips
            + 4                                            // byte flips
            + 4 * 70                                       // arith +/-
            + 4 * 8; // interesting, minus the one equal to 0x00
        assert_eq!(muts.len(), expected);
    }

    #[test]
    fn deterministic_mutations_differ_from_input() {
        let input = b"abcd";
        for (m, op) in deterministic_mutations(input) {
            assert_ne!(m, input.to_vec(), "{op} produced the identity");
        }
    }

    #[test]
    fn empty_input_has_no_deterministic_stage() {
        assert!(deterministic_mutations(&[]).is_empty());
    }

    #[test]
    fn havoc_is_deterministic_per_seed() {
        let out1: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            (0..50).map(|_| havoc(&mut rng, b"hello world")).collect()
        };
        let out2: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            (0..50).map(|_| havoc(&mut rng, b"hello world")).collect()
        };
        assert_eq!(out1, out2);
    }

    #[test]
    fn havoc_respects_the_length_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut data = vec![0xAB; 64];
        for _ in 0..500 {
            data = havoc(&mut rng, &data);
            assert!(data.len() <= HAVOC_MAX_LEN);
        }
    }

    #[test]
    fn havoc_handles_empty_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let _ = havoc(&mut rng, &[]);
        }
    }

    #[test]
    fn splice_mixes_both_parents() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = vec![0xAA; 20];
        let b = vec![0xBB; 20];
        let mixed = (0..100).any(|_| {
            let s = splice(&mut rng, &a, &b);
            s.contains(&0xAA) && s.contains(&0xBB)
        });
        assert!(mixed);
    }
}
