//! Synthetic sequence tasks: copy, reverse, and modular prefix-sum.
//!
//! A task example is a payload sequence and its transform. On the wire the
//! model sees `[BOS] src [SEP] target [EOS]` with payload symbols offset
//! past the special tokens; training and evaluation score only the answer
//! region (everything after `SEP`).

use std::collections::BTreeSet;

use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const SEP: u32 = 1;
pub const EOS: u32 = 2;
/// First payload token id; symbols `0..alphabet` map to `PAYLOAD_BASE..`.
pub const PAYLOAD_BASE: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    ModularSum,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::ModularSum => "modular_sum",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "modular_sum" => Ok(TaskKind::ModularSum),
            other => Err(Error::Config(format!(
                "unknown task {other:?}; expected copy, reverse, or modular_sum"
            ))),
        }
    }
}

/// Task family plus sampling parameters. Splits are disjoint by source
/// sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    /// Number of payload symbols in use.
    pub alphabet: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl SyntheticTask {
    /// Defaults tuned for the toy model: short sequences over a small
    /// alphabet, validation held out per the training protocol.
    pub fn new(kind: TaskKind) -> Self {
        SyntheticTask {
            kind,
            alphabet: 12,
            min_len: 2,
            max_len: 6,
            train_size: 2048,
            val_size: 500,
            test_size: 500,
            seed: 1,
        }
    }

    /// Token count of one encoded example stream.
    pub fn stream_len(&self, example: &Example) -> usize {
        example.src.len() + example.target.len() + 3
    }

    pub fn max_stream_len(&self) -> usize {
        2 * self.max_len + 3
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.alphabet < 2 {
            return Err(Error::Config("task alphabet needs at least 2 symbols".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if PAYLOAD_BASE as usize + self.alphabet > vocab_size {
            return Err(Error::Config(format!(
                "alphabet {} plus special tokens exceeds vocab {}",
                self.alphabet, vocab_size
            )));
        }
        if self.train_size == 0 || self.val_size == 0 {
            return Err(Error::Config("train and validation splits must be nonempty".into()));
        }
        // the sampled space must be large enough for disjoint splits
        let want = (self.train_size + self.val_size + self.test_size) as f64;
        let mut space = 0.0f64;
        for len in self.min_len..=self.max_len {
            space += (self.alphabet as f64).powi(len as i32);
            if space > want * 4.0 {
                break;
            }
        }
        if space < want * 2.0 {
            return Err(Error::Config(format!(
                "task space (~{space:.0} sequences) too small for {want} disjoint examples"
            )));
        }
        Ok(())
    }

    fn target_of(&self, src: &[u32]) -> Vec<u32> {
        match self.kind {
            TaskKind::Copy => src.to_vec(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::ModularSum => {
                let mut acc = 0u32;
                src.iter()
                    .map(|&s| {
                        acc = (acc + s) % self.alphabet as u32;
                        acc
                    })
                    .collect()
            }
        }
    }

    /// Samples the train/validation/test splits. Source sequences are
    /// unique across the whole dataset, so held-out splits are disjoint
    /// from training by construction.
    pub fn generate(&self) -> Result<Dataset> {
        let total = self.train_size + self.val_size + self.test_size;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut seen = BTreeSet::new();
        let mut examples = Vec::with_capacity(total);
        let mut attempts = 0usize;
        while examples.len() < total {
            attempts += 1;
            if attempts > total * 1000 {
                return Err(Error::Config(
                    "failed to sample enough distinct sequences; enlarge the task space".into(),
                ));
            }
            let len = rng.random_range(self.min_len..=self.max_len);
            let src: Vec<u32> = (0..len)
                .map(|_| rng.random_range(0..self.alphabet as u32))
                .collect();
            if !seen.insert(src.clone()) {
                continue;
            }
            let target = self.target_of(&src);
            examples.push(Example { src, target });
        }
        let test = examples.split_off(self.train_size + self.val_size);
        let val = examples.split_off(self.train_size);
        Ok(Dataset { train: examples, val, test })
    }
}

/// One task instance, in payload-symbol space (0..alphabet).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<u32>,
    pub target: Vec<u32>,
}

impl Example {
    /// Full token stream `[BOS] src [SEP] target [EOS]`.
    pub fn stream(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.src.len() + self.target.len() + 3);
        out.push(BOS);
        out.extend(self.src.iter().map(|&s| s + PAYLOAD_BASE));
        out.push(SEP);
        out.extend(self.target.iter().map(|&s| s + PAYLOAD_BASE));
        out.push(EOS);
        out
    }

    /// Prompt shown at evaluation time: everything up to and including SEP.
    pub fn prompt(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.src.len() + 2);
        out.push(BOS);
        out.extend(self.src.iter().map(|&s| s + PAYLOAD_BASE));
        out.push(SEP);
        out
    }

    /// Tokens the model must produce after the prompt.
    pub fn expected_output(&self) -> Vec<u32> {
        let mut out: Vec<u32> = self.target.iter().map(|&s| s + PAYLOAD_BASE).collect();
        out.push(EOS);
        out
    }

    /// Next-token training pair: inputs and per-position targets, with
    /// `None` outside the answer region.
    pub fn training_pair(&self) -> (Vec<u32>, Vec<Option<u32>>) {
        let stream = self.stream();
        let sep_idx = self.src.len() + 1;
        let inputs = stream[..stream.len() - 1].to_vec();
        let targets = (0..inputs.len())
            .map(|i| (i >= sep_idx).then(|| stream[i + 1]))
            .collect();
        (inputs, targets)
    }

    /// Count of scored positions (the answer region).
    pub fn answer_tokens(&self) -> usize {
        self.target.len() + 1
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_encoding_round_trips() {
        let ex = Example { src: vec![0, 4, 2], target: vec![2, 4, 0] };
        assert_eq!(ex.stream(), vec![BOS, 3, 7, 5, SEP, 5, 7, 3, EOS]);
        assert_eq!(ex.prompt(), vec![BOS, 3, 7, 5, SEP]);
        assert_eq!(ex.expected_output(), vec![5, 7, 3, EOS]);

        let (inputs, targets) = ex.training_pair();
        assert_eq!(inputs, vec![BOS, 3, 7, 5, SEP, 5, 7, 3]);
        // answer region: predictions from SEP onward
        assert_eq!(
            targets,
            vec![None, None, None, None, Some(5), Some(7), Some(3), Some(EOS)]
        );
        assert_eq!(ex.answer_tokens(), 4);
    }

    #[test]
    fn task_kinds_compute_expected_targets() {
        let mut t = SyntheticTask::new(TaskKind::Copy);
        t.alphabet = 5;
        assert_eq!(t.target_of(&[1, 2, 3]), vec![1, 2, 3]);
        t.kind = TaskKind::Reverse;
        assert_eq!(t.target_of(&[1, 2, 3]), vec![3, 2, 1]);
        t.kind = TaskKind::ModularSum;
        // prefix sums mod 5: 1, 3, 6 % 5 = 1
        assert_eq!(t.target_of(&[1, 2, 3]), vec![1, 3, 1]);
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let mut task = SyntheticTask::new(TaskKind::Copy);
        task.train_size = 100;
        task.val_size = 40;
        task.test_size = 30;
        let ds = task.generate().unwrap();
        assert_eq!(ds.train.len(), 100);
        assert_eq!(ds.val.len(), 40);
        assert_eq!(ds.test.len(), 30);
        let train: BTreeSet<_> = ds.train.iter().map(|e| e.src.clone()).collect();
        for e in ds.val.iter().chain(ds.test.iter()) {
            assert!(!train.contains(&e.src), "held-out example seen in training");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let task = SyntheticTask::new(TaskKind::ModularSum);
        let a = task.generate().unwrap();
        let b = task.generate().unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
    }

    #[test]
    fn validate_rejects_impossible_spaces() {
        let mut task = SyntheticTask::new(TaskKind::Copy);
        task.alphabet = 2;
        task.min_len = 2;
        task.max_len = 3;
        // 4 + 8 = 12 possible sequences, far fewer than requested
        assert!(task.validate(256).is_err());

        let task = SyntheticTask::new(TaskKind::Copy);
        assert!(task.validate(256).is_ok());
        assert!(task.validate(10).is_err()); // vocab too small
    }
}
