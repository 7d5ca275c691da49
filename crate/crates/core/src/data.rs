//! Token datasets: synthetic copy / modular-sum tasks and plain text files.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A batch of equal-length sequences with per-position targets.
///
/// `None` targets are not scored by the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub inputs: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabPolicy {
    Byte,
    Char,
}

fn default_validation_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetDescriptor {
    /// `[a₁…a_P, SEP, a₁…a_P]`; the second half is scored.
    SyntheticCopy {
        vocab_size: usize,
        seq_len: usize,
        samples: usize,
        seed: u64,
    },
    /// `[a₁…a_n, EQ] → (Σ aᵢ) mod m`; only the answer is scored.
    SyntheticModsum {
        modulus: usize,
        operands: usize,
        samples: usize,
        seed: u64,
    },
    TextFile {
        path: PathBuf,
        seq_len: usize,
        vocab: VocabPolicy,
        #[serde(default = "default_validation_fraction")]
        validation_fraction: f64,
    },
}

/// A fixed set of examples served in a seeded, step-indexed order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab_size: usize,
    pub seq_len: usize,
    examples: Vec<Example>,
    order: Vec<usize>,
    /// Held-out examples (text files only).
    pub validation: Vec<Example>,
    pub split: Option<SplitSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub train_chunks: usize,
    pub validation_chunks: usize,
    pub train_fraction: f64,
    pub validation_fraction: f64,
}

impl Dataset {
    pub fn from_examples(vocab_size: usize, examples: Vec<Example>, seed: u64) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::Data("dataset has no examples".into()))?;
        let seq_len = first.inputs.len();
        for ex in &examples {
            if ex.inputs.len() != seq_len || ex.targets.len() != seq_len {
                return Err(Error::Data("examples differ in length".into()));
            }
            let oob = ex.inputs.iter().any(|&t| t >= vocab_size)
                || ex.targets.iter().flatten().any(|&t| t >= vocab_size);
            if oob {
                return Err(Error::Data(format!("token outside vocabulary of {vocab_size}")));
            }
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            vocab_size,
            seq_len,
            examples,
            order,
            validation: Vec::new(),
            split: None,
        })
    }

    pub fn from_descriptor(desc: &DatasetDescriptor) -> Result<Self> {
        match *desc {
            DatasetDescriptor::SyntheticCopy {
                vocab_size,
                seq_len,
                samples,
                seed,
            } => synthetic_copy(vocab_size, seq_len, samples, seed),
            DatasetDescriptor::SyntheticModsum {
                modulus,
                operands,
                samples,
                seed,
            } => synthetic_modsum(modulus, operands, samples, seed),
            DatasetDescriptor::TextFile {
                ref path,
                seq_len,
                vocab,
                validation_fraction,
            } => {
                let corpus = ingest_text(path, vocab)?;
                corpus.into_dataset(seq_len, validation_fraction)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    /// The batch for optimizer step `step` (0-based). The same step always
    /// yields the same batch.
    pub fn batch(&self, step: usize, batch_size: usize) -> TokenBatch {
        let n = self.examples.len();
        let mut inputs = Vec::with_capacity(batch_size * self.seq_len);
        let mut targets = Vec::with_capacity(batch_size * self.seq_len);
        for j in 0..batch_size {
            let ex = &self.examples[self.order[(step * batch_size + j) % n]];
            inputs.extend_from_slice(&ex.inputs);
            targets.extend_from_slice(&ex.targets);
        }
        TokenBatch {
            batch: batch_size,
            seq: self.seq_len,
            inputs,
            targets,
        }
    }
}

fn synthetic_copy(vocab_size: usize, seq_len: usize, samples: usize, seed: u64) -> Result<Dataset> {
    if vocab_size < 3 || seq_len < 2 || samples == 0 {
        return Err(Error::Config(
            "synthetic_copy needs vocab_size >= 3, seq_len >= 2, samples >= 1".into(),
        ));
    }
    let payload = seq_len / 2;
    let sep = vocab_size - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..samples)
        .map(|_| {
            let body: Vec<usize> = (0..payload).map(|_| rng.random_range(0..sep)).collect();
            let mut full = body.clone();
            full.push(sep);
            full.extend_from_slice(&body);
            let inputs = full[..2 * payload].to_vec();
            let targets = (0..2 * payload)
                .map(|t| (t >= payload).then(|| full[t + 1]))
                .collect();
            Example { inputs, targets }
        })
        .collect();
    Dataset::from_examples(vocab_size, examples, seed)
}

fn synthetic_modsum(modulus: usize, operands: usize, samples: usize, seed: u64) -> Result<Dataset> {
    if modulus < 2 || operands == 0 || samples == 0 {
        return Err(Error::Config(
            "synthetic_modsum needs modulus >= 2, operands >= 1, samples >= 1".into(),
        ));
    }
    let eq = modulus;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..samples)
        .map(|_| {
            let mut inputs: Vec<usize> = (0..operands).map(|_| rng.random_range(0..modulus)).collect();
            let answer = inputs.iter().sum::<usize>() % modulus;
            inputs.push(eq);
            let mut targets = vec![None; operands + 1];
            targets[operands] = Some(answer);
            Example { inputs, targets }
        })
        .collect();
    Dataset::from_examples(modulus + 1, examples, seed)
}

/// A tokenized text file with a deterministic symbol vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCorpus {
    /// Symbols in token-id order (sorted).
    pub vocab: Vec<String>,
    pub tokens: Vec<usize>,
}

/// Reads and tokenizes a text file at byte or character level.
///
/// The vocabulary is the sorted set of symbols present in the file.
pub fn ingest_text(path: &Path, policy: VocabPolicy) -> Result<TextCorpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::Data(format!("{} is empty", path.display())));
    }
    let symbols: Vec<String> = match policy {
        VocabPolicy::Byte => bytes.iter().map(|b| format!("{b:02x}")).collect(),
        VocabPolicy::Char => std::str::from_utf8(&bytes)
            .map_err(|e| Error::Data(format!("{} is not UTF-8: {e}", path.display())))?
            .chars()
            .map(String::from)
            .collect(),
    };
    let vocab: Vec<String> = symbols.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let tokens = symbols
        .iter()
        .map(|s| vocab.binary_search(s).expect("symbol is in vocab"))
        .collect();
    Ok(TextCorpus { vocab, tokens })
}

impl TextCorpus {
    /// Non-overlapping chunks of `seq_len + 1` tokens.
    pub fn chunks(&self, seq_len: usize) -> Vec<&[usize]> {
        self.tokens.chunks_exact(seq_len + 1).collect()
    }

    /// Splits the chunk set: the trailing `validation_fraction` of chunks
    /// (rounded down) is held out.
    pub fn into_dataset(self, seq_len: usize, validation_fraction: f64) -> Result<Dataset> {
        if seq_len == 0 {
            return Err(Error::Config("seq_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction {validation_fraction} outside [0, 1)"
            )));
        }
        let to_example = |c: &[usize]| Example {
            inputs: c[..seq_len].to_vec(),
            targets: c[1..].iter().map(|&t| Some(t)).collect(),
        };
        let chunks = self.chunks(seq_len);
        if chunks.is_empty() {
            return Err(Error::Data(format!(
                "text has {} tokens, fewer than one chunk of {}",
                self.tokens.len(),
                seq_len + 1
            )));
        }
        let n_val = ((chunks.len() as f64) * validation_fraction).floor() as usize;
        let n_val = n_val.min(chunks.len() - 1);
        let n_train = chunks.len() - n_val;
        let train: Vec<Example> = chunks[..n_train].iter().map(|c| to_example(c)).collect();
        let validation: Vec<Example> = chunks[n_train..].iter().map(|c| to_example(c)).collect();
        let mut ds = Dataset::from_examples(self.vocab.len(), train, 0)?;
        ds.validation = validation;
        ds.split = Some(SplitSummary {
            train_chunks: n_train,
            validation_chunks: n_val,
            train_fraction: n_train as f64 / chunks.len() as f64,
            validation_fraction: n_val as f64 / chunks.len() as f64,
        });
        Ok(ds)
    }
}
