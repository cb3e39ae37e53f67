//! Byte-level tokenizer, corpus handling, and evaluation windows.

pub mod perplexity;
pub mod report;
pub mod sweep;

use crate::error::{Error, Result};

/// Byte vocabulary: ids 0..=255 are raw bytes, 256 is BOS, 257 is EOS.
/// BOS is prepended per window; EOS is reserved and unused in LM evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const BOS: u32 = 256;
    pub const EOS: u32 = 257;
    pub const VOCAB: usize = 258;

    pub fn encode(&self, bytes: &[u8]) -> Vec<u32> {
        bytes.iter().map(|&b| b as u32).collect()
    }

    /// Inverse of encode; control ids (BOS/EOS) are dropped.
    pub fn decode(&self, ids: &[u32]) -> Vec<u8> {
        ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect()
    }
}

/// Train/val/test byte splits (90/5/5 at byte boundaries).
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<u8>,
    pub val: Vec<u8>,
    pub test: Vec<u8>,
}

/// Generated plain text bundled with the crate so runs are hermetic.
const BUILTIN_CORPUS: &[u8] = include_bytes!("../../data/corpus.txt");

impl Corpus {
    pub fn builtin() -> Self {
        Corpus::from_bytes(BUILTIN_CORPUS)
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        let n = bytes.len();
        let train_end = n * 90 / 100;
        let val_end = train_end + n * 5 / 100;
        Corpus {
            train: bytes[..train_end].to_vec(),
            val: bytes[train_end..val_end].to_vec(),
            test: bytes[val_end..].to_vec(),
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(Corpus::from_bytes(&std::fs::read(path)?))
    }

    pub fn split(&self, name: &str) -> Result<&[u8]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// One evaluation/training window: `input[0]` is BOS followed by seq-1 bytes;
/// `targets` are the seq bytes the model must predict.
#[derive(Debug, Clone)]
pub struct Window {
    pub input: Vec<u32>,
    pub targets: Vec<u32>,
}

impl Window {
    pub fn seq(&self) -> usize {
        self.input.len()
    }
}

/// Cut `split` into windows of `seq` predicted bytes starting at multiples of
/// `stride` (stride == seq gives the default non-overlapping cover; the tail
/// remainder shorter than seq is dropped).
pub fn windows(split: &[u8], seq: usize, stride: usize) -> Result<Vec<Window>> {
    if split.is_empty() {
        return Err(Error::Contract("empty corpus split".into()));
    }
    if seq == 0 || stride == 0 {
        return Err(Error::Config("seq and stride must be >= 1".into()));
    }
    let mut out = Vec::new();
    let mut start = 0usize;
    while start + seq <= split.len() {
        let span = &split[start..start + seq];
        let mut input = Vec::with_capacity(seq);
        input.push(ByteTokenizer::BOS);
        input.extend(span[..seq - 1].iter().map(|&b| b as u32));
        let targets = span.iter().map(|&b| b as u32).collect();
        out.push(Window { input, targets });
        start += stride;
    }
    if out.is_empty() {
        return Err(Error::Contract(format!(
            "split of {} bytes yields no window of seq {seq}",
            split.len()
        )));
    }
    Ok(out)
}

/// Worker cap from COMEPRESS_THREADS (defaults to the machine parallelism).
pub fn worker_count() -> usize {
    if let Ok(v) = std::env::var("COMEPRESS_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use proptest::prelude::*;

    #[test]
    fn tokenizer_roundtrips_all_single_bytes() {
        let tok = ByteTokenizer;
        for b in 0u8..=255 {
            assert_eq!(tok.decode(&tok.encode(&[b])), vec![b]);
        }
    }

    #[test]
    fn tokenizer_roundtrips_random_strings() {
        let tok = ByteTokenizer;
        let mut rng = CounterRng::new(77);
        for _ in 0..1000 {
            let len = rng.below(64);
            let bytes: Vec<u8> = (0..len).map(|_| rng.below(256) as u8).collect();
            assert_eq!(tok.decode(&tok.encode(&bytes)), bytes);
        }
    }

    #[test]
    fn windows_cover_without_overlap_by_default() {
        let data: Vec<u8> = (0..100).collect();
        let ws = windows(&data, 32, 32).unwrap();
        assert_eq!(ws.len(), 3);
        for (i, w) in ws.iter().enumerate() {
            assert_eq!(w.input[0], ByteTokenizer::BOS);
            assert_eq!(w.targets[0] as usize, i * 32);
            assert_eq!(w.input[1], w.targets[0]);
        }
    }

    #[test]
    fn empty_split_is_contract_error() {
        assert!(windows(&[], 8, 8).is_err());
    }

    proptest! {
        #[test]
        fn window_inputs_shift_targets_by_one(seq in 2usize..40, n in 40usize..200) {
            let data: Vec<u8> = (0..n as u32).map(|i| (i % 251) as u8).collect();
            if data.len() >= seq {
                let ws = windows(&data, seq, seq).unwrap();
                for w in &ws {
                    prop_assert_eq!(w.input.len(), seq);
                    prop_assert_eq!(w.targets.len(), seq);
                    prop_assert_eq!(&w.input[1..], &w.targets[..seq - 1]);
                }
            }
        }
    }
}
