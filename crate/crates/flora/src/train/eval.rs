//! Deterministic evaluation over a task split: greedy-decoded token
//! accuracy, sequence exact match, and teacher-forced mean loss.

use serde::Serialize;

use crate::adapters::ExecPath;
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::tape::Tape;
use crate::tensor::Element;
use crate::train::task::Example;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    /// Fraction of answer-region tokens the greedy decode got right.
    pub token_accuracy: f64,
    /// Fraction of examples decoded exactly (target plus terminator).
    pub sequence_exact_match: f64,
    /// Teacher-forced cross-entropy per answer token.
    pub mean_loss: f64,
}

/// Evaluates a split with greedy decoding. Metrics are micro-averaged over
/// answer tokens, so they are invariant to how the split is partitioned.
pub fn evaluate<E: Element>(
    model: &TransformerModel<E>,
    examples: &[Example],
) -> Result<Metrics> {
    if examples.is_empty() {
        return Err(Error::Contract("evaluate requires a nonempty split".into()));
    }
    let mut matched = 0usize;
    let mut total = 0usize;
    let mut exact = 0usize;
    let mut loss_sum = 0.0f64;

    for example in examples {
        let expected = example.expected_output();
        let got = model.generate(&example.prompt(), expected.len())?;
        let ok = expected
            .iter()
            .zip(&got)
            .filter(|(want, have)| want == have)
            .count();
        matched += ok;
        total += expected.len();
        if ok == expected.len() {
            exact += 1;
        }

        let (inputs, targets) = example.training_pair();
        let mut tape = Tape::inference();
        let logits = model.forward_sequence(&mut tape, &inputs, ExecPath::Fused)?;
        let loss = tape.cross_entropy_cols(&logits, &targets)?;
        loss_sum += loss.item().to_f64() * example.answer_tokens() as f64;
    }

    Ok(Metrics {
        token_accuracy: matched as f64 / total as f64,
        sequence_exact_match: exact as f64 / examples.len() as f64,
        mean_loss: loss_sum / total as f64,
    })
}
