//! Canonical Huffman coding of quantized message digits.
//!
//! Each digit of a message stream is coded independently with a code built
//! from that digit's bin histogram, so the mean code length can be compared
//! directly against the per-digit entropy.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::Serialize;

use crate::entropy::{histogram, DigitHistogram, MessageBatch};
use crate::error::{Error, Result};
use crate::quantization::Quantizer;

const MAX_CODE_LEN: usize = 64;

/// Bin indices of one digit across a message stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolStream {
    symbols: Vec<usize>,
    alphabet: usize,
}

impl SymbolStream {
    pub fn new(symbols: Vec<usize>, alphabet: usize) -> Result<Self> {
        if let Some(&s) = symbols.iter().find(|&&s| s >= alphabet) {
            return Err(Error::UnknownSymbol(s));
        }
        Ok(SymbolStream { symbols, alphabet })
    }

    pub fn from_digit(batch: &MessageBatch, digit: usize, q: &Quantizer) -> Result<Self> {
        if digit >= batch.len() {
            return Err(Error::DigitOutOfRange {
                digit,
                len: batch.len(),
            });
        }
        let symbols = batch.digit(digit).map(|x| q.bin_index(x)).collect::<Result<_>>()?;
        Self::new(symbols, q.num_bins())
    }

    pub fn symbols(&self) -> &[usize] {
        &self.symbols
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    pub fn histogram(&self) -> DigitHistogram {
        let mut counts = vec![0u64; self.alphabet];
        for &s in &self.symbols {
            counts[s] += 1;
        }
        DigitHistogram::from_counts(counts, 0.0).expect("alphabet is non-empty")
    }
}

/// Canonical prefix code. Symbols with zero count have no codeword.
///
/// A source with a single used symbol gets the empty codeword: the table
/// alone identifies every symbol, and the decoder is told how many to emit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeTable {
    lengths: Vec<u8>,
    codes: Vec<u64>,
    sole: Option<usize>,
}

/// Packed bits, most significant bit of each byte first.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Bits {
    bytes: Vec<u8>,
    len: usize,
}

impl Bits {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn truncated(&self, len: usize) -> Bits {
        let len = len.min(self.len);
        let mut bytes = self.bytes[..len.div_ceil(8)].to_vec();
        if !len.is_multiple_of(8) {
            let last = bytes.len() - 1;
            bytes[last] &= 0xff << (8 - len % 8);
        }
        Bits { bytes, len }
    }

    fn push(&mut self, code: u64, width: u8) {
        for b in (0..width).rev() {
            if self.len.is_multiple_of(8) {
                self.bytes.push(0);
            }
            if (code >> b) & 1 == 1 {
                let last = self.bytes.len() - 1;
                self.bytes[last] |= 0x80 >> (self.len % 8);
            }
            self.len += 1;
        }
    }

    fn get(&self, i: usize) -> bool {
        (self.bytes[i / 8] >> (7 - i % 8)) & 1 == 1
    }
}

/// Huffman code lengths for the histogram, made canonical.
pub fn build_code(hist: &DigitHistogram) -> Result<CodeTable> {
    let counts = hist.counts();
    let used: Vec<usize> = (0..counts.len()).filter(|&s| counts[s] > 0).collect();
    let mut lengths = vec![0u8; counts.len()];
    match used.len() {
        0 => return Err(Error::EmptyHistogram),
        1 => {
            return Ok(CodeTable {
                lengths,
                codes: vec![0; counts.len()],
                sole: Some(used[0]),
            })
        }
        _ => {
            // Nodes 0..counts.len() are leaves; internal nodes are appended.
            // Ties break on node id so the tree is deterministic.
            let mut parent: Vec<usize> = vec![usize::MAX; counts.len()];
            let mut heap: BinaryHeap<Reverse<(u64, usize)>> =
                used.iter().map(|&s| Reverse((counts[s], s))).collect();
            while heap.len() > 1 {
                let Reverse((wa, a)) = heap.pop().expect("len > 1");
                let Reverse((wb, b)) = heap.pop().expect("len > 1");
                let id = parent.len();
                parent.push(usize::MAX);
                parent[a] = id;
                parent[b] = id;
                heap.push(Reverse((wa + wb, id)));
            }
            for &s in &used {
                let mut depth = 0;
                let mut node = s;
                while parent[node] != usize::MAX {
                    node = parent[node];
                    depth += 1;
                }
                if depth > MAX_CODE_LEN {
                    return Err(Error::InvalidCounts(format!("code length {depth} exceeds {MAX_CODE_LEN}")));
                }
                lengths[s] = depth as u8;
            }
        }
    }
    Ok(CodeTable::canonical(lengths))
}

impl CodeTable {
    /// Assigns canonical codewords: shorter codes first, ties by symbol.
    fn canonical(lengths: Vec<u8>) -> Self {
        let mut order: Vec<usize> = (0..lengths.len()).filter(|&s| lengths[s] > 0).collect();
        order.sort_by_key(|&s| (lengths[s], s));
        let mut codes = vec![0u64; lengths.len()];
        let mut code = 0u64;
        let mut prev = 0u8;
        for (i, &s) in order.iter().enumerate() {
            if i > 0 {
                code += 1;
            }
            code <<= lengths[s] - prev;
            prev = lengths[s];
            codes[s] = code;
        }
        CodeTable {
            lengths,
            codes,
            sole: None,
        }
    }

    pub fn lengths(&self) -> &[u8] {
        &self.lengths
    }

    pub fn codeword(&self, symbol: usize) -> Option<(u64, u8)> {
        if self.sole == Some(symbol) {
            return Some((0, 0));
        }
        match self.lengths.get(symbol) {
            Some(&l) if l > 0 => Some((self.codes[symbol], l)),
            _ => None,
        }
    }

    pub fn kraft_sum(&self) -> f64 {
        if self.sole.is_some() {
            return 1.0;
        }
        self.lengths
            .iter()
            .filter(|&&l| l > 0)
            .map(|&l| 2f64.powi(-i32::from(l)))
            .sum()
    }

    /// Expected bits per symbol under the histogram's empirical distribution.
    pub fn mean_length(&self, hist: &DigitHistogram) -> f64 {
        let n = hist.total() as f64;
        hist.counts()
            .iter()
            .zip(&self.lengths)
            .map(|(&c, &l)| c as f64 * f64::from(l))
            .sum::<f64>()
            / n
    }

    pub fn encode(&self, symbols: &[usize]) -> Result<Bits> {
        let mut bits = Bits::default();
        for &s in symbols {
            let (code, len) = self.codeword(s).ok_or(Error::UnknownSymbol(s))?;
            bits.push(code, len);
        }
        Ok(bits)
    }

    /// Decodes exactly `count` symbols; the bitstream must hold nothing else.
    pub fn decode(&self, bits: &Bits, count: usize) -> Result<Vec<usize>> {
        if let Some(s) = self.sole {
            return if bits.is_empty() {
                Ok(vec![s; count])
            } else {
                Err(Error::InvalidCounts(format!("{} stray bits after a single-symbol stream", bits.len())))
            };
        }
        let max_len = self.lengths.iter().copied().max().unwrap_or(0) as usize;
        // Canonical decoding tables indexed by code length.
        let mut per_len = vec![0u64; max_len + 1];
        let mut first = vec![0u64; max_len + 1];
        let mut offset = vec![0usize; max_len + 1];
        let mut order: Vec<usize> = (0..self.lengths.len()).filter(|&s| self.lengths[s] > 0).collect();
        order.sort_by_key(|&s| (self.lengths[s], s));
        for &s in &order {
            per_len[self.lengths[s] as usize] += 1;
        }
        let mut idx = 0;
        for l in 1..=max_len {
            if per_len[l] > 0 {
                first[l] = self.codes[order[idx]];
                offset[l] = idx;
                idx += per_len[l] as usize;
            }
        }

        let mut out = Vec::with_capacity(count);
        let mut code = 0u64;
        let mut len = 0usize;
        for i in 0..bits.len() {
            if out.len() == count {
                return Err(Error::InvalidCounts(format!("{} stray bits after {count} symbols", bits.len() - i)));
            }
            code = (code << 1) | u64::from(bits.get(i));
            len += 1;
            if len > max_len {
                return Err(Error::Truncated(i + 1));
            }
            if per_len[len] > 0 && code >= first[len] && code - first[len] < per_len[len] {
                out.push(order[offset[len] + (code - first[len]) as usize]);
                code = 0;
                len = 0;
            }
        }
        if out.len() != count {
            return Err(Error::Truncated(bits.len()));
        }
        Ok(out)
    }
}

/// Coding statistics of one digit stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DigitCodeStats {
    pub digit: usize,
    pub symbols: usize,
    pub entropy_bits: f64,
    pub mean_code_len: f64,
    pub coded_bits: usize,
    pub lossless: bool,
}

impl DigitCodeStats {
    /// `H <= L̄ < H + 1`, with a small allowance for rounding in `H`.
    pub fn within_source_bound(&self) -> bool {
        self.mean_code_len >= self.entropy_bits - 1e-9 && self.mean_code_len < self.entropy_bits + 1.0
    }
}

/// Codes every digit of the batch separately and checks the round trip.
pub fn code_batch(batch: &MessageBatch, q: &Quantizer) -> Result<Vec<DigitCodeStats>> {
    (0..batch.len())
        .map(|d| {
            let stream = SymbolStream::from_digit(batch, d, q)?;
            let hist = histogram(batch, d, q)?;
            let table = build_code(&hist)?;
            let bits = table.encode(stream.symbols())?;
            let lossless = table.decode(&bits, stream.symbols().len())? == stream.symbols();
            Ok(DigitCodeStats {
                digit: d,
                symbols: batch.n(),
                entropy_bits: hist.entropy_bits(),
                mean_code_len: table.mean_length(&hist),
                coded_bits: bits.len(),
                lossless,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hist(counts: &[u64]) -> DigitHistogram {
        DigitHistogram::from_counts(counts.to_vec(), 0.0).unwrap()
    }

    #[test]
    fn hand_built_lengths() {
        assert_eq!(build_code(&hist(&[5, 5])).unwrap().lengths(), &[1, 1]);
        assert_eq!(build_code(&hist(&[7, 3])).unwrap().lengths(), &[1, 1]);
        assert_eq!(build_code(&hist(&[4, 2, 1, 1])).unwrap().lengths(), &[1, 2, 3, 3]);
        let single = build_code(&hist(&[0, 9, 0])).unwrap();
        assert_eq!(single.codeword(1), Some((0, 0)));
        assert_eq!(single.codeword(0), None);
        assert_eq!(single.mean_length(&hist(&[0, 9, 0])), 0.0);
        assert_eq!(single.kraft_sum(), 1.0);
        let bits = single.encode(&[1, 1, 1]).unwrap();
        assert!(bits.is_empty());
        assert_eq!(single.decode(&bits, 3).unwrap(), vec![1, 1, 1]);
    }

    #[test]
    fn canonical_codewords() {
        let t = build_code(&hist(&[4, 2, 1, 1])).unwrap();
        assert_eq!(t.codeword(0), Some((0b0, 1)));
        assert_eq!(t.codeword(1), Some((0b10, 2)));
        assert_eq!(t.codeword(2), Some((0b110, 3)));
        assert_eq!(t.codeword(3), Some((0b111, 3)));
    }

    #[test]
    fn empty_histogram_is_an_error() {
        assert!(matches!(build_code(&hist(&[0, 0])), Err(Error::EmptyHistogram)));
    }

    #[test]
    fn dyadic_distributions_meet_entropy() {
        let eight = hist(&[1; 8]);
        let t = build_code(&eight).unwrap();
        assert_eq!(t.mean_length(&eight), 3.0);
        assert!((eight.entropy_bits() - 3.0).abs() < 1e-15);

        let d = hist(&[4, 2, 1, 1]);
        let t = build_code(&d).unwrap();
        assert_eq!(t.mean_length(&d), 1.75);
        assert!((d.entropy_bits() - 1.75).abs() < 1e-15);
        assert_eq!(t.kraft_sum(), 1.0);
    }

    #[test]
    fn unknown_symbol_and_truncation() {
        let t = build_code(&hist(&[4, 2, 1, 0])).unwrap();
        assert!(matches!(t.encode(&[0, 3]), Err(Error::UnknownSymbol(3))));
        let bits = t.encode(&[2, 2]).unwrap();
        assert!(matches!(t.decode(&bits.truncated(bits.len() - 1), 2), Err(Error::Truncated(_))));
        assert!(matches!(t.decode(&bits, 3), Err(Error::Truncated(_))));
        assert!(t.decode(&bits, 1).is_err());
        assert!(SymbolStream::new(vec![0, 9], 9).is_err());
    }

    #[test]
    fn random_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let counts: Vec<u64> = (0..9).map(|_| rng.random_range(0..50)).collect();
        let table = build_code(&hist(&counts)).unwrap();
        let used: Vec<usize> = (0..9).filter(|&s| counts[s] > 0).collect();
        let symbols: Vec<usize> = (0..10_000).map(|_| used[rng.random_range(0..used.len())]).collect();
        let bits = table.encode(&symbols).unwrap();
        assert_eq!(table.decode(&bits, symbols.len()).unwrap(), symbols);
    }

    #[test]
    fn code_batch_reports_every_digit() {
        let b = MessageBatch::from_rows(&[[0.0, 0.9], [0.0, -0.9], [0.3, 0.9], [0.0, 0.9]]).unwrap();
        let stats = code_batch(&b, &Quantizer::default()).unwrap();
        assert_eq!(stats.len(), 2);
        assert!(stats.iter().all(|s| s.lossless && s.within_source_bound()));
        assert_eq!(stats[0].coded_bits, 4);
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_assume, proptest};

        proptest! {
            #[test]
            fn source_coding_bound_and_round_trip(
                counts in proptest::collection::vec(0u64..200, 1..20),
                seed in any::<u64>(),
            ) {
                prop_assume!(counts.iter().any(|&c| c > 0));
                let h = hist(&counts);
                let table = build_code(&h).unwrap();
                let entropy = h.entropy_bits();
                let mean = table.mean_length(&h);
                prop_assert!(mean >= entropy - 1e-9);
                prop_assert!(mean < entropy + 1.0);
                prop_assert!(table.kraft_sum() <= 1.0 + 1e-12);

                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let used: Vec<usize> = (0..counts.len()).filter(|&s| counts[s] > 0).collect();
                let symbols: Vec<usize> = (0..300).map(|_| used[rng.random_range(0..used.len())]).collect();
                let bits = table.encode(&symbols).unwrap();
                prop_assert_eq!(table.decode(&bits, symbols.len()).unwrap(), symbols);
            }
        }
    }
}
