//! Synthetic token streams for the toy model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// A random prefix followed by a repeat of it; only the repeat is scored.
    Copy,
    /// Packed `a b = c` quadruples with `c = (a + b) mod (vocab − 1)`; only `c` is scored.
    ModularAddition,
    /// Windows of a small built-in English text.
    CharLm,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::ModularAddition => "modular-addition",
            Task::CharLm => "char-lm",
        }
    }

    pub fn min_vocab(&self) -> usize {
        match self {
            Task::Copy => 2,
            Task::ModularAddition => 3,
            Task::CharLm => CHAR_CLASSES,
        }
    }
}

/// One training sequence: inputs and, per position, the scored next token.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

/// Deterministic sample source. Training and validation draw from separate
/// ChaCha streams of the same seed.
#[derive(Clone, Debug)]
pub struct TaskStream {
    task: Task,
    vocab: usize,
    seq_len: usize,
    rng: ChaCha8Rng,
}

const TRAIN_STREAM: u64 = 0;
const VALIDATION_STREAM: u64 = 1;

impl TaskStream {
    pub fn new(task: Task, vocab: usize, seq_len: usize, seed: u64, stream: u64) -> Result<Self> {
        if vocab < task.min_vocab() {
            return Err(HarnessError::Config(format!(
                "task {} needs vocab_size >= {}, got {vocab}",
                task.name(),
                task.min_vocab()
            )));
        }
        if seq_len < 2 {
            return Err(HarnessError::Config(format!("seq_len must be at least 2, got {seq_len}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Ok(Self { task, vocab, seq_len, rng })
    }

    pub fn training(task: Task, vocab: usize, seq_len: usize, seed: u64) -> Result<Self> {
        Self::new(task, vocab, seq_len, seed, TRAIN_STREAM)
    }

    pub fn validation(task: Task, vocab: usize, seq_len: usize, seed: u64) -> Result<Self> {
        Self::new(task, vocab, seq_len, seed, VALIDATION_STREAM)
    }

    pub fn batch(&mut self, size: usize) -> Vec<Sample> {
        (0..size).map(|_| self.sample()).collect()
    }

    pub fn sample(&mut self) -> Sample {
        let n = self.seq_len + 1;
        let (seq, scored): (Vec<usize>, Vec<bool>) = match self.task {
            Task::Copy => {
                let half = n.div_ceil(2);
                let prefix: Vec<usize> = (0..half).map(|_| self.rng.random_range(0..self.vocab)).collect();
                (0..n).map(|i| (prefix[i % half], i >= half)).unzip()
            }
            Task::ModularAddition => {
                let p = self.vocab - 1;
                let eq = p;
                let mut seq = Vec::with_capacity(n + 3);
                let mut scored = Vec::with_capacity(n + 3);
                // random phase so every position sees every role
                let offset = self.rng.random_range(0..4);
                while seq.len() < n + offset {
                    let a = self.rng.random_range(0..p);
                    let b = self.rng.random_range(0..p);
                    seq.extend([a, b, eq, (a + b) % p]);
                    scored.extend([false, false, false, true]);
                }
                (seq[offset..offset + n].to_vec(), scored[offset..offset + n].to_vec())
            }
            Task::CharLm => {
                let text = corpus();
                let start = self.rng.random_range(0..text.len() - n);
                (text[start..start + n].to_vec(), vec![true; n])
            }
        };
        let tokens = seq[..self.seq_len].to_vec();
        let targets = (1..n).map(|i| scored[i].then_some(seq[i])).collect();
        Sample { tokens, targets }
    }
}

const CHAR_CLASSES: usize = 32;

const TEXT: &str = "Alice was beginning to get very tired of sitting by her sister on the bank, \
and of having nothing to do: once or twice she had peeped into the book her sister was reading, \
but it had no pictures or conversations in it, 'and what is the use of a book,' thought Alice \
'without pictures or conversations?' So she was considering in her own mind (as well as she could, \
for the hot day made her feel very sleepy and stupid), whether the pleasure of making a \
daisy-chain would be worth the trouble of getting up and picking the daisies, when suddenly a \
White Rabbit with pink eyes ran close by her. There was nothing so very remarkable in that; nor \
did Alice think it so very much out of the way to hear the Rabbit say to itself, 'Oh dear! Oh \
dear! I shall be late!' (when she thought it over afterwards, it occurred to her that she ought \
to have wondered at this, but at the time it all seemed quite natural); but when the Rabbit \
actually took a watch out of its waistcoat-pocket, and looked at it, and then hurried on, Alice \
started to her feet, for it flashed across her mind that she had never before seen a rabbit with \
either a waistcoat-pocket, or a watch to take out of it, and burning with curiosity, she ran \
across the field after it, and fortunately was just in time to see it pop down a large \
rabbit-hole under the hedge. In another moment down went Alice after it, never once considering \
how in the world she was to get out again.";

fn encode(c: char) -> usize {
    match c.to_ascii_lowercase() {
        c @ 'a'..='z' => c as usize - 'a' as usize,
        ' ' => 26,
        '.' | '!' | '?' => 27,
        ',' | ';' | ':' => 28,
        '\'' => 29,
        '-' | '(' | ')' => 30,
        _ => 31,
    }
}

fn corpus() -> &'static [usize] {
    static CORPUS: std::sync::OnceLock<Vec<usize>> = std::sync::OnceLock::new();
    CORPUS.get_or_init(|| TEXT.chars().map(encode).collect())
}
