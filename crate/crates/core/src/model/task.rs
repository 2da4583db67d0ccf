//! Synthetic sequence-classification tasks.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::named_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Label = number of odd token ids, mod `num_classes`.
    Parity,
    /// Vocabulary split into `num_classes` contiguous bins; label = most
    /// populated bin (lowest bin on ties).
    Majority,
    /// Label = first token id mod `num_classes`.
    CopyFirst,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Parity => "parity",
            TaskKind::Majority => "majority",
            TaskKind::CopyFirst => "copy-first",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "parity" => Ok(TaskKind::Parity),
            "majority" => Ok(TaskKind::Majority),
            "copy-first" | "copyfirst" | "copy_first" => Ok(TaskKind::CopyFirst),
            other => Err(Error::Config(format!("unknown task `{other}` (expected parity|majority|copy-first)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthTask {
    pub kind: TaskKind,
    pub seq_len: usize,
    pub vocab: usize,
    pub num_classes: usize,
    pub sample_count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub inputs: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl SynthTask {
    pub fn new(kind: TaskKind, seq_len: usize, vocab: usize, sample_count: usize, seed: u64) -> Self {
        Self { kind, seq_len, vocab, num_classes: 2, sample_count, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.sample_count == 0 {
            return Err(Error::Config("task needs positive seq_len and sample_count".into()));
        }
        if self.num_classes < 2 || self.vocab < self.num_classes {
            return Err(Error::Config(format!(
                "task needs 2 <= num_classes <= vocab, got {} classes over {} tokens",
                self.num_classes, self.vocab
            )));
        }
        Ok(())
    }

    pub fn label(&self, seq: &[usize]) -> usize {
        let c = self.num_classes;
        match self.kind {
            TaskKind::Parity => seq.iter().filter(|&&id| id % 2 == 1).count() % c,
            TaskKind::Majority => {
                let mut counts = vec![0usize; c];
                for &id in seq {
                    counts[id * c / self.vocab] += 1;
                }
                let best = *counts.iter().max().unwrap();
                counts.iter().position(|&n| n == best).unwrap()
            }
            TaskKind::CopyFirst => seq[0] % c,
        }
    }

    /// Regenerates the dataset; identical for identical fields.
    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        let mut rng = named_rng(self.seed, &format!("task.{}", self.kind));
        let mut inputs = Vec::with_capacity(self.sample_count);
        let mut labels = Vec::with_capacity(self.sample_count);
        for _ in 0..self.sample_count {
            let seq: Vec<usize> = (0..self.seq_len).map(|_| rng.random_range(0..self.vocab)).collect();
            labels.push(self.label(&seq));
            inputs.push(seq);
        }
        Ok(Dataset { inputs, labels })
    }

    /// A disjointly seeded copy for held-out evaluation.
    pub fn held_out(&self, sample_count: usize) -> SynthTask {
        SynthTask { sample_count, seed: self.seed ^ 0x5eed_e7a1_0000_0001, ..self.clone() }
    }
}
