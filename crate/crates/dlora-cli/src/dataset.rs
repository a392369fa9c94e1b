//! Synthetic task data. Three tasks, all deterministic per seed:
//!
//! * `copy`    — `[s1 .. sk SEP s1 .. sk]`; the model is scored on
//!   reproducing the segment after the separator.
//! * `reverse` — `[s1 .. sk SEP sk .. s1]`; scored on the reversal.
//! * `charlm`  — next-token prediction over windows of a fixed embedded
//!   corpus; every position after the first is scored.
//!
//! The separator is the top token id (`vocab - 1`); segments draw from the
//! remaining ids so it never appears inside a payload.

use crate::config::TaskField;
use anyhow::{bail, Result};
use dlora_core::rng::Rng;
use dlora_core::runtime::Sample;

/// A paragraph to feed the character model. Lowercase letters, space and
/// basic punctuation only, so the derived character set stays well under a
/// 64-token vocabulary.
const CORPUS: &str = "the quick brown fox jumps over the lazy dog. \
pack my box with five dozen liquor jugs. how vexingly quick daft zebras \
jump! sphinx of black quartz, judge my vow. the five boxing wizards jump \
quickly. a quart jar of oil mixed with zinc oxide makes a very bright \
paint. few quips galvanized the mock jury box.";

/// Distinct corpus characters in first-appearance order; the token id of a
/// character is its index here.
fn charlm_alphabet() -> Vec<char> {
    let mut alphabet = Vec::new();
    for c in CORPUS.chars() {
        if !alphabet.contains(&c) {
            alphabet.push(c);
        }
    }
    alphabet
}

pub fn gen_dataset(
    task: TaskField,
    seed: u64,
    n_samples: usize,
    vocab: usize,
    seg_len: usize,
) -> Result<Vec<Sample>> {
    if n_samples == 0 {
        bail!("n_samples must be positive");
    }
    if seg_len == 0 {
        bail!("seg_len must be positive");
    }
    let mut rng = Rng::new(seed);
    match task {
        TaskField::Copy | TaskField::Reverse => {
            if vocab < 3 {
                bail!("copy/reverse need a vocabulary of at least 3");
            }
            let sep = (vocab - 1) as u32;
            let mut out = Vec::with_capacity(n_samples);
            for _ in 0..n_samples {
                let segment: Vec<u32> = (0..seg_len)
                    .map(|_| rng.next_below(vocab as u64 - 1) as u32)
                    .collect();
                let mut tokens = segment.clone();
                tokens.push(sep);
                if task == TaskField::Copy {
                    tokens.extend_from_slice(&segment);
                } else {
                    tokens.extend(segment.iter().rev());
                }
                out.push(
                    Sample::new(tokens, seg_len)
                        .map_err(|e| anyhow::anyhow!("building sample: {e}"))?,
                );
            }
            Ok(out)
        }
        TaskField::Charlm => {
            let alphabet = charlm_alphabet();
            if alphabet.len() > vocab {
                bail!(
                    "charlm needs a vocabulary of at least {} tokens",
                    alphabet.len()
                );
            }
            let ids: Vec<u32> = CORPUS
                .chars()
                .map(|c| alphabet.iter().position(|&a| a == c).unwrap() as u32)
                .collect();
            let window = 2 * seg_len + 1;
            if window > ids.len() {
                bail!("charlm window {window} exceeds the corpus length");
            }
            let max_start = (ids.len() - window) as u64 + 1;
            let mut out = Vec::with_capacity(n_samples);
            for _ in 0..n_samples {
                let start = rng.next_below(max_start) as usize;
                out.push(
                    Sample::new(ids[start..start + window].to_vec(), 0)
                        .map_err(|e| anyhow::anyhow!("building sample: {e}"))?,
                );
            }
            Ok(out)
        }
    }
}
