use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labeled token sequence. `tokens[0]` is the BOS token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

/// Labeled data for one task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task_id: String,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskDataset {
    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }

    /// Detaches the held-out test split so that evaluation data can outlive
    /// the training data.
    pub fn take_test(&mut self) -> Vec<Example> {
        std::mem::take(&mut self.test)
    }
}

/// A batch of equal-length sequences flattened row-wise.
#[derive(Clone, Debug)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
    pub seq_len: usize,
    pub count: usize,
}

impl Batch {
    pub fn new<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Result<Batch> {
        let mut tokens = Vec::new();
        let mut labels = Vec::new();
        let mut seq_len = None;
        for ex in examples {
            match seq_len {
                None => seq_len = Some(ex.tokens.len()),
                Some(t) if t != ex.tokens.len() => {
                    return Err(Error::shape("Batch::new", format!("mixed sequence lengths {t} and {}", ex.tokens.len())))
                }
                _ => {}
            }
            tokens.extend_from_slice(&ex.tokens);
            labels.push(ex.label);
        }
        let seq_len = seq_len.ok_or(Error::Empty("batch"))?;
        if seq_len == 0 {
            return Err(Error::Empty("sequence"));
        }
        Ok(Batch { count: labels.len(), tokens, labels, seq_len })
    }

    /// A single unlabeled sequence.
    pub fn sequence(tokens: &[usize]) -> Result<Batch> {
        if tokens.is_empty() {
            return Err(Error::Empty("sequence"));
        }
        Ok(Batch { tokens: tokens.to_vec(), labels: vec![0], seq_len: tokens.len(), count: 1 })
    }

    /// Next-token targets, one per non-final position.
    pub fn lm_targets(&self) -> (Vec<usize>, Vec<usize>) {
        let mut rows = Vec::with_capacity(self.count * (self.seq_len - 1));
        let mut targets = Vec::with_capacity(rows.capacity());
        for s in 0..self.count {
            for i in 0..self.seq_len - 1 {
                rows.push(s * self.seq_len + i);
                targets.push(self.tokens[s * self.seq_len + i + 1]);
            }
        }
        (rows, targets)
    }
}
