//! CTC prediction head: frame posteriors over the vocabulary, the alignment
//! marginal loss, and greedy (best-path) decoding.

use super::ModelConfig;
use crate::error::Result;
use crate::params::{Binding, Init, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::vocab::BLANK;

pub fn init_ctc_params(init: &mut Init, store: &mut ParamStore, cfg: &ModelConfig) -> Result<()> {
    init.linear(store, "ctc.out.weight", cfg.d_model, cfg.vocab)?;
    init.zeros(store, "ctc.out.bias", vec![cfg.vocab])?;
    Ok(())
}

/// Per-frame log posteriors over the vocabulary, [L_sub, V].
pub fn ctc_log_probs(tape: &mut Tape, bind: &mut Binding, h: NodeId) -> Result<NodeId> {
    let w = bind.get(tape, "ctc.out.weight")?;
    let b = bind.get(tape, "ctc.out.bias")?;
    let hw = tape.matmul(h, w)?;
    let logits = tape.add_row(hw, b)?;
    tape.log_softmax(logits)
}

/// Negative log likelihood of `labels` under the CTC alignment marginal.
pub fn ctc_loss(tape: &mut Tape, bind: &mut Binding, h: NodeId, labels: &[usize]) -> Result<NodeId> {
    let lp = ctc_log_probs(tape, bind, h)?;
    tape.ctc_loss(lp, labels, BLANK)
}

/// Best-path decoding: framewise argmax, collapse repeats, drop blanks.
pub fn ctc_greedy_decode(log_probs: &Tensor) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let arg = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if arg != prev && arg != BLANK {
            out.push(arg);
        }
        prev = arg;
    }
    out
}
