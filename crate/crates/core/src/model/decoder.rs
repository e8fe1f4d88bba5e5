//! Attention decoder: pre-norm transformer layers with causal self-attention
//! and cross-attention over the encoder output, trained with label-smoothed
//! cross-entropy, decoded greedily.

use super::attention::{causal_mask, init_attention_params, multi_head_attention};
use super::{sinusoidal_pe, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{Binding, Init, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::vocab::{BLANK, SOS_EOS};

pub fn init_decoder_params(init: &mut Init, store: &mut ParamStore, cfg: &ModelConfig) -> Result<()> {
    let d = cfg.d_model;
    let e = cfg.ffn_expansion;
    init.uniform_fan(store, "dec.embed.weight", vec![cfg.vocab, d], cfg.vocab, d)?;
    for l in 0..cfg.dec_layers {
        let p = format!("dec.l{l}");
        init.ones(store, &format!("{p}.self.norm.gain"), vec![d])?;
        init.zeros(store, &format!("{p}.self.norm.bias"), vec![d])?;
        init_attention_params(init, store, &format!("{p}.self"), d)?;
        init.ones(store, &format!("{p}.cross.norm.gain"), vec![d])?;
        init.zeros(store, &format!("{p}.cross.norm.bias"), vec![d])?;
        init_attention_params(init, store, &format!("{p}.cross"), d)?;
        init.ones(store, &format!("{p}.ffn.norm.gain"), vec![d])?;
        init.zeros(store, &format!("{p}.ffn.norm.bias"), vec![d])?;
        init.linear(store, &format!("{p}.ffn.w1.weight"), d, e * d)?;
        init.zeros(store, &format!("{p}.ffn.w1.bias"), vec![e * d])?;
        init.linear(store, &format!("{p}.ffn.w2.weight"), e * d, d)?;
        init.zeros(store, &format!("{p}.ffn.w2.bias"), vec![d])?;
    }
    init.ones(store, "dec.final_norm.gain", vec![d])?;
    init.zeros(store, "dec.final_norm.bias", vec![d])?;
    init.linear(store, "dec.out.weight", d, cfg.vocab)?;
    init.zeros(store, "dec.out.bias", vec![cfg.vocab])?;
    Ok(())
}

/// Logits [len(tokens), V] for the next token at every input position.
/// `tokens` is the teacher-forced input (sos followed by labels).
pub fn decoder_forward(
    tape: &mut Tape,
    bind: &mut Binding,
    cfg: &ModelConfig,
    enc_out: NodeId,
    tokens: &[usize],
) -> Result<NodeId> {
    if tokens.is_empty() {
        return Err(Error::Input("decoder needs at least the start token".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", cfg.vocab)));
    }
    let d = cfg.d_model;
    let eps = cfg.ln_eps;
    let embed = bind.get(tape, "dec.embed.weight")?;
    let gathered = tape.gather_rows(embed, tokens)?;
    let scaled = tape.scale(gathered, (d as f64).sqrt());
    let pe = tape.constant(sinusoidal_pe(tokens.len(), d));
    let mut x = tape.add(scaled, pe)?;
    let mask = causal_mask(tokens.len());

    for l in 0..cfg.dec_layers {
        let p = format!("dec.l{l}");
        let ln = |tape: &mut Tape, bind: &mut Binding, name: &str, input: NodeId| -> Result<NodeId> {
            let gain = bind.get(tape, &format!("{name}.gain"))?;
            let bias = bind.get(tape, &format!("{name}.bias"))?;
            tape.layer_norm(input, gain, bias, eps)
        };

        let normed = ln(tape, bind, &format!("{p}.self.norm"), x)?;
        let (self_att, _) =
            multi_head_attention(tape, bind, &format!("{p}.self"), normed, normed, cfg.heads, Some(&mask))?;
        x = tape.add(x, self_att)?;

        let normed = ln(tape, bind, &format!("{p}.cross.norm"), x)?;
        let (cross_att, _) =
            multi_head_attention(tape, bind, &format!("{p}.cross"), normed, enc_out, cfg.heads, None)?;
        x = tape.add(x, cross_att)?;

        let normed = ln(tape, bind, &format!("{p}.ffn.norm"), x)?;
        let w1 = bind.get(tape, &format!("{p}.ffn.w1.weight"))?;
        let b1 = bind.get(tape, &format!("{p}.ffn.w1.bias"))?;
        let h1 = tape.matmul(normed, w1)?;
        let h1b = tape.add_row(h1, b1)?;
        let act = tape.swish(h1b);
        let w2 = bind.get(tape, &format!("{p}.ffn.w2.weight"))?;
        let b2 = bind.get(tape, &format!("{p}.ffn.w2.bias"))?;
        let h2 = tape.matmul(act, w2)?;
        let h2b = tape.add_row(h2, b2)?;
        x = tape.add(x, h2b)?;
    }

    let gain = bind.get(tape, "dec.final_norm.gain")?;
    let bias = bind.get(tape, "dec.final_norm.bias")?;
    let normed = tape.layer_norm(x, gain, bias, eps)?;
    let w = bind.get(tape, "dec.out.weight")?;
    let b = bind.get(tape, "dec.out.bias")?;
    let logits = tape.matmul(normed, w)?;
    tape.add_row(logits, b)
}

/// Mean label-smoothed cross-entropy of `targets` under `logits`:
/// H(q, p) with q = (1-eps) * onehot + eps/V.
pub fn label_smoothed_ce(
    tape: &mut Tape,
    logits: NodeId,
    targets: &[usize],
    vocab: usize,
    smoothing: f64,
) -> Result<NodeId> {
    let rows = tape.value(logits).rows();
    if rows != targets.len() || tape.value(logits).cols() != vocab {
        return Err(Error::Shape(format!(
            "logits {:?} do not match {} targets over vocab {vocab}",
            tape.value(logits).shape(),
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::Input(format!("target id {bad} outside vocabulary of {vocab}")));
    }
    let lp = tape.log_softmax(logits)?;
    let mut q = vec![smoothing / vocab as f64; rows * vocab];
    for (r, &t) in targets.iter().enumerate() {
        q[r * vocab + t] += 1.0 - smoothing;
    }
    let qc = tape.constant(Tensor::new(vec![rows, vocab], q)?);
    let prod = tape.mul(lp, qc)?;
    let total = tape.sum(prod);
    Ok(tape.scale(total, -1.0 / rows as f64))
}

/// Teacher-forced attention loss: input sos+labels, targets labels+eos.
pub fn attention_loss(
    tape: &mut Tape,
    bind: &mut Binding,
    cfg: &ModelConfig,
    enc_out: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let mut input = Vec::with_capacity(labels.len() + 1);
    input.push(SOS_EOS);
    input.extend_from_slice(labels);
    let mut targets = labels.to_vec();
    targets.push(SOS_EOS);
    let logits = decoder_forward(tape, bind, cfg, enc_out, &input)?;
    label_smoothed_ce(tape, logits, &targets, cfg.vocab, cfg.label_smoothing)
}

/// Greedy autoregressive decoding from sos until eos or `max_len` tokens.
/// The blank id is excluded from the argmax; it belongs to the CTC head and
/// never appears in attention targets.
pub fn greedy_decode(
    tape: &mut Tape,
    bind: &mut Binding,
    cfg: &ModelConfig,
    enc_out: NodeId,
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut tokens = vec![SOS_EOS];
    for _ in 0..max_len {
        let logits = decoder_forward(tape, bind, cfg, enc_out, &tokens)?;
        let last = tape.value(logits).row(tape.value(logits).rows() - 1);
        let next = last
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != BLANK)
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if next == SOS_EOS {
            break;
        }
        tokens.push(next);
    }
    Ok(tokens[1..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FusionConfig, FusionMode, Model, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.d_model = 8;
        cfg.heads = 2;
        cfg.enc_layers = 1;
        cfg.dec_layers = 2;
        cfg.ffn_expansion = 2;
        cfg.depthwise_kernel = 3;
        cfg.d_fbank = 6;
        cfg.vocab = 7;
        cfg.fusion = FusionConfig { mode: FusionMode::None, ssl_dims: vec![], sv: 2 };
        cfg
    }

    fn rand_enc(rng: &mut ChaCha8Rng, l: usize, d: usize) -> Tensor {
        Tensor::new(vec![l, d], (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn uniform_logits_cost_log_vocab_regardless_of_smoothing() {
        let vocab = 7;
        for smoothing in [0.0, 0.1, 0.3] {
            let mut tape = Tape::new();
            let logits = tape.leaf(Tensor::filled(vec![4, vocab], 1.7), false);
            let loss =
                label_smoothed_ce(&mut tape, logits, &[0, 3, 5, 6], vocab, smoothing).unwrap();
            let want = (vocab as f64).ln();
            assert!(
                (tape.value(loss).data()[0] - want).abs() < 1e-12,
                "smoothing {smoothing}"
            );
        }
    }

    #[test]
    fn smoothed_ce_matches_direct_formula_on_a_peaked_row() {
        let vocab = 3;
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 3], vec![2.0, 0.0, -1.0]).unwrap(), false);
        let loss = label_smoothed_ce(&mut tape, logits, &[0], vocab, 0.1).unwrap();
        let lse = (2.0f64.exp() + 1.0 + (-1.0f64).exp()).ln();
        let lp = [2.0 - lse, -lse, -1.0 - lse];
        let q = [0.9 + 0.1 / 3.0, 0.1 / 3.0, 0.1 / 3.0];
        let want: f64 = -q.iter().zip(lp).map(|(a, b)| a * b).sum::<f64>();
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn future_tokens_do_not_affect_earlier_logits() {
        let cfg = tiny_cfg();
        let model = Model::init(cfg.clone(), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let enc_val = rand_enc(&mut rng, 5, cfg.d_model);

        let run = |tokens: &[usize]| {
            let mut tape = Tape::new();
            let mut bind = Binding::new(&model.store, false);
            let enc = tape.leaf(enc_val.clone(), false);
            let logits = decoder_forward(&mut tape, &mut bind, &cfg, enc, tokens).unwrap();
            tape.value(logits).clone()
        };
        let a = run(&[1, 3, 4, 5]);
        let b = run(&[1, 3, 6, 2]);
        for r in 0..2 {
            for c in 0..cfg.vocab {
                assert_eq!(a.at2(r, c), b.at2(r, c), "row {r} changed with future tokens");
            }
        }
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn decoder_that_prefers_eos_emits_nothing() {
        let cfg = tiny_cfg();
        let mut model = Model::init(cfg.clone(), 23).unwrap();
        model.store.get_mut("dec.out.bias").unwrap().data_mut()[SOS_EOS] = 1e4;
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut tape = Tape::new();
        let mut bind = Binding::new(&model.store, false);
        let enc = tape.leaf(rand_enc(&mut rng, 4, cfg.d_model), false);
        let out = greedy_decode(&mut tape, &mut bind, &cfg, enc, 10).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn greedy_decode_respects_max_len_and_skips_blank() {
        let cfg = tiny_cfg();
        let mut model = Model::init(cfg.clone(), 25).unwrap();
        // make blank irresistible; the decoder must still never emit it
        model.store.get_mut("dec.out.bias").unwrap().data_mut()[BLANK] = 1e4;
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let mut tape = Tape::new();
        let mut bind = Binding::new(&model.store, false);
        let enc = tape.leaf(rand_enc(&mut rng, 4, cfg.d_model), false);
        let out = greedy_decode(&mut tape, &mut bind, &cfg, enc, 5).unwrap();
        assert!(out.len() <= 5);
        assert!(out.iter().all(|&t| t != BLANK && t != SOS_EOS));
    }

    #[test]
    fn attention_loss_is_finite_and_differentiable() {
        let cfg = tiny_cfg();
        let model = Model::init(cfg.clone(), 27).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let mut tape = Tape::new();
        let mut bind = Binding::new(&model.store, true);
        let enc = tape.leaf(rand_enc(&mut rng, 5, cfg.d_model), false);
        let loss = attention_loss(&mut tape, &mut bind, &cfg, enc, &[2, 4, 3]).unwrap();
        assert!(tape.value(loss).all_finite());
        tape.backward(loss).unwrap();
        let grads = bind.grads(&tape);
        assert!(grads.contains_key("dec.embed.weight"));
        assert!(grads.contains_key("dec.out.weight"));
        assert!(grads.contains_key("dec.l1.cross.q.weight"));
        assert!(grads.values().all(|g| g.all_finite()));
    }

    #[test]
    fn out_of_vocabulary_tokens_are_rejected() {
        let cfg = tiny_cfg();
        let model = Model::init(cfg.clone(), 29).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut tape = Tape::new();
        let mut bind = Binding::new(&model.store, false);
        let enc = tape.leaf(rand_enc(&mut rng, 3, cfg.d_model), false);
        assert!(decoder_forward(&mut tape, &mut bind, &cfg, enc, &[1, 99]).is_err());
    }
}
