//! Corpus and vocabulary ingestion plus deterministic minibatch sampling.
//!
//! The vocabulary file maps tokens to ids, one `token id` pair per line.
//! Two ids are reserved past the vocabulary: `unk` (out-of-vocabulary
//! tokens) and `mask` (masked-position inputs).

use crate::{HarnessError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::path::Path;
use tfnas_core::netbuild::{Minibatch, IGNORE_TARGET};

/// Fraction of positions masked in `masked` mode.
pub const MASK_RATE: f64 = 0.15;

#[derive(Debug, Clone)]
pub struct Corpus {
    ids: Vec<u32>,
    vocab_size: usize,
    unk_id: u32,
    mask_id: u32,
    oov_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    NextToken,
    Masked,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Model vocabulary size including the reserved unk and mask ids.
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn mask_id(&self) -> u32 {
        self.mask_id
    }

    pub fn unk_id(&self) -> u32 {
        self.unk_id
    }

    pub fn oov_rate(&self) -> f64 {
        if self.ids.is_empty() {
            0.0
        } else {
            self.oov_tokens as f64 / self.ids.len() as f64
        }
    }
}

/// Load a whitespace-tokenized corpus against a `token id` vocabulary file.
/// Unknown tokens map to the reserved unk id. `vocab_cap`, when set, keeps
/// only ids below the cap.
pub fn load_corpus(corpus_path: &Path, vocab_path: &Path, vocab_cap: Option<usize>) -> Result<Corpus> {
    let vocab_text =
        std::fs::read_to_string(vocab_path).map_err(|e| HarnessError::io(vocab_path, e))?;
    let mut mapping: HashMap<String, u32> = HashMap::new();
    let mut max_id = 0u32;
    for (lineno, raw) in vocab_text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let (token, id_text) = match (fields.next(), fields.next(), fields.next()) {
            (Some(t), Some(i), None) => (t, i),
            _ => {
                return Err(HarnessError::file_parse(
                    vocab_path,
                    lineno + 1,
                    format!("expected 'token id', got '{line}'"),
                ))
            }
        };
        let id: u32 = id_text.parse().map_err(|_| {
            HarnessError::file_parse(vocab_path, lineno + 1, format!("bad id '{id_text}'"))
        })?;
        if let Some(cap) = vocab_cap {
            if id as usize >= cap {
                continue;
            }
        }
        if mapping.insert(token.to_string(), id).is_some() {
            return Err(HarnessError::file_parse(
                vocab_path,
                lineno + 1,
                format!("duplicate token '{token}'"),
            ));
        }
        max_id = max_id.max(id);
    }
    if mapping.is_empty() {
        return Err(HarnessError::file_parse(vocab_path, 0, "empty vocabulary"));
    }
    let unk_id = max_id + 1;
    let mask_id = max_id + 2;

    let corpus_text =
        std::fs::read_to_string(corpus_path).map_err(|e| HarnessError::io(corpus_path, e))?;
    let mut ids = Vec::new();
    let mut oov_tokens = 0usize;
    for token in corpus_text.split_whitespace() {
        match mapping.get(token) {
            Some(&id) => ids.push(id),
            None => {
                ids.push(unk_id);
                oov_tokens += 1;
            }
        }
    }
    if ids.is_empty() {
        return Err(HarnessError::file_parse(corpus_path, 0, "empty corpus"));
    }
    Ok(Corpus { ids, vocab_size: mask_id as usize + 1, unk_id, mask_id, oov_tokens })
}

/// Sample N random windows of length T with next-token or masked targets.
/// Deterministic given the rng state.
///
/// Windows are kept disjoint when the corpus is long enough: duplicated or
/// heavily overlapping windows make batch inputs collide, which needlessly
/// degenerates every correlation-based metric.
pub fn sample_minibatch(
    corpus: &Corpus,
    rng: &mut ChaCha8Rng,
    n: usize,
    t: usize,
    mode: BatchMode,
) -> Result<Minibatch> {
    let needed = match mode {
        BatchMode::NextToken => t + 1,
        BatchMode::Masked => t,
    };
    if corpus.len() < needed {
        return Err(HarnessError::Config(format!(
            "corpus of {} tokens is shorter than a window of {needed}",
            corpus.len()
        )));
    }
    let keep_disjoint = corpus.len() >= 2 * n * needed;
    let mut taken: Vec<usize> = Vec::with_capacity(n);
    let mut tokens = Vec::with_capacity(n * t);
    let mut targets = Vec::with_capacity(n * t);
    let masked_per_seq = ((t as f64 * MASK_RATE).ceil() as usize).max(1);
    for _ in 0..n {
        let start = loop {
            let candidate = rng.gen_range(0..=corpus.len() - needed);
            if !keep_disjoint
                || taken.iter().all(|&s| candidate + needed <= s || s + needed <= candidate)
            {
                break candidate;
            }
        };
        taken.push(start);
        let window = &corpus.ids[start..start + needed];
        match mode {
            BatchMode::NextToken => {
                tokens.extend_from_slice(&window[..t]);
                targets.extend_from_slice(&window[1..t + 1]);
            }
            BatchMode::Masked => {
                let mut positions: Vec<usize> = (0..t).collect();
                for k in 0..masked_per_seq {
                    let pick = rng.gen_range(k..t);
                    positions.swap(k, pick);
                }
                let mut seq_tokens = window.to_vec();
                let mut seq_targets = vec![IGNORE_TARGET; t];
                for &pos in &positions[..masked_per_seq] {
                    seq_targets[pos] = seq_tokens[pos];
                    seq_tokens[pos] = corpus.mask_id();
                }
                tokens.extend_from_slice(&seq_tokens);
                targets.extend_from_slice(&seq_targets);
            }
        }
    }
    Ok(Minibatch::new(tokens, targets, n, t)?)
}

/// The fixed minibatch identified by `minibatch_id`: independent of the
/// architecture and the init seed, so ablation sweeps reuse the same inputs.
pub fn minibatch_for(
    corpus: &Corpus,
    minibatch_id: u32,
    n: usize,
    t: usize,
    mode: BatchMode,
) -> Result<Minibatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xBA7C4 ^ ((minibatch_id as u64) << 17));
    sample_minibatch(corpus, &mut rng, n, t, mode)
}
