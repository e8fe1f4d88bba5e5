//! Scaled dot-product multi-head attention over tape nodes.

use crate::error::{Error, Result};
use crate::params::Binding;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Additive mask value for disallowed positions; finite so softmax stays
/// NaN-free even when a whole row is masked.
pub const MASK_NEG: f64 = -1e30;

/// Multi-head attention with parameters `{prefix}.{q,k,v,o}.{weight,bias}`.
///
/// `query` is [Lq, d], `keys_values` is [Lk, d]. Returns the projected output
/// [Lq, d] and the head-averaged attention matrix [Lq, Lk] (a plain value,
/// not a tape node). `mask`, when given, is added to every head's scores
/// before softmax (0 = keep, `MASK_NEG` = drop).
pub fn multi_head_attention(
    tape: &mut Tape,
    bind: &mut Binding,
    prefix: &str,
    query: NodeId,
    keys_values: NodeId,
    heads: usize,
    mask: Option<&Tensor>,
) -> Result<(NodeId, Tensor)> {
    let d = tape.value(query).cols();
    if d != tape.value(keys_values).cols() {
        return Err(Error::Shape(format!(
            "attention width mismatch: query {:?} vs keys {:?}",
            tape.value(query).shape(),
            tape.value(keys_values).shape()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let lq = tape.value(query).rows();
    let lk = tape.value(keys_values).rows();
    if let Some(m) = mask {
        if m.shape() != [lq, lk] {
            return Err(Error::Shape(format!(
                "mask {:?} does not cover scores [{lq}, {lk}]",
                m.shape()
            )));
        }
    }
    let dh = d / heads;

    let project = |tape: &mut Tape, bind: &mut Binding, input: NodeId, name: &str| -> Result<NodeId> {
        let w = bind.get(tape, &format!("{prefix}.{name}.weight"))?;
        let b = bind.get(tape, &format!("{prefix}.{name}.bias"))?;
        let xw = tape.matmul(input, w)?;
        tape.add_row(xw, b)
    };
    let q = project(tape, bind, query, "q")?;
    let k = project(tape, bind, keys_values, "k")?;
    let v = project(tape, bind, keys_values, "v")?;

    let mask_node = mask.map(|m| tape.constant(m.clone()));
    let mut head_outs = Vec::with_capacity(heads);
    let mut attn_avg = vec![0.0; lq * lk];
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores_raw = tape.matmul(qh, kt)?;
        let mut scores = tape.scale(scores_raw, 1.0 / (dh as f64).sqrt());
        if let Some(mn) = mask_node {
            scores = tape.add(scores, mn)?;
        }
        let a = tape.softmax(scores, 1)?;
        for (acc, w) in attn_avg.iter_mut().zip(tape.value(a).data()) {
            *acc += w / heads as f64;
        }
        head_outs.push(tape.matmul(a, vh)?);
    }
    let concat = tape.concat_cols(&head_outs)?;
    let out = project(tape, bind, concat, "o")?;
    Ok((out, Tensor::new(vec![lq, lk], attn_avg)?))
}

/// Strictly-causal additive mask: position i may attend to j <= i.
pub fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = MASK_NEG;
        }
    }
    Tensor::new(vec![len, len], data).unwrap()
}

/// Register the four projection weight/bias pairs of one attention block.
pub fn init_attention_params(
    init: &mut crate::params::Init,
    store: &mut crate::params::ParamStore,
    prefix: &str,
    d: usize,
) -> Result<()> {
    for name in ["q", "k", "v", "o"] {
        init.linear(store, &format!("{prefix}.{name}.weight"), d, d)?;
        init.zeros(store, &format!("{prefix}.{name}.bias"), vec![d])?;
    }
    Ok(())
}

/// Scalar parameter count of one attention block.
pub fn attention_param_count(d: usize) -> usize {
    4 * (d * d + d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store_with_attention(d: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        init_attention_params(&mut init, &mut store, "att", d).unwrap();
        store
    }

    fn identity_store(d: usize) -> ParamStore {
        let mut store = ParamStore::new();
        for name in ["q", "k", "v", "o"] {
            let mut w = Tensor::filled(vec![d, d], 0.0);
            for i in 0..d {
                w.data_mut()[i * d + i] = 1.0;
            }
            store.register(&format!("att.{name}.weight"), w).unwrap();
            store.register(&format!("att.{name}.bias"), Tensor::filled(vec![d], 0.0)).unwrap();
        }
        store
    }

    #[test]
    fn zero_query_with_identity_projections_averages_values() {
        let store = identity_store(1);
        let mut tape = Tape::new();
        let mut bind = Binding::new(&store, false);
        let q = tape.leaf(Tensor::new(vec![1, 1], vec![0.0]).unwrap(), false);
        let kv = tape.leaf(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap(), false);
        let (out, attn) = multi_head_attention(&mut tape, &mut bind, "att", q, kv, 1, None).unwrap();
        assert!((tape.value(out).data()[0] - 2.0).abs() < 1e-12);
        assert_eq!(attn.data(), &[0.5, 0.5]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let store = store_with_attention(8, 5);
        let mut tape = Tape::new();
        let mut bind = Binding::new(&store, false);
        let qv: Vec<f64> = (0..3 * 8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let kvv: Vec<f64> = (0..5 * 8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let q = tape.leaf(Tensor::new(vec![3, 8], qv).unwrap(), false);
        let kv = tape.leaf(Tensor::new(vec![5, 8], kvv).unwrap(), false);
        let (_, attn) = multi_head_attention(&mut tape, &mut bind, "att", q, kv, 2, None).unwrap();
        for i in 0..3 {
            let s: f64 = attn.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "row {i} sums to {s}");
        }
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let store = store_with_attention(4, 6);
        let mut tape = Tape::new();
        let mut bind = Binding::new(&store, false);
        let x = tape.leaf(Tensor::filled(vec![3, 4], 0.5), false);
        let mask = causal_mask(3);
        let (_, attn) =
            multi_head_attention(&mut tape, &mut bind, "att", x, x, 2, Some(&mask)).unwrap();
        for i in 0..3 {
            for j in i + 1..3 {
                assert_eq!(attn.at2(i, j), 0.0, "position ({i},{j}) should be masked");
            }
            let s: f64 = attn.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gradients_flow_to_all_projections() {
        let store = store_with_attention(4, 7);
        let mut tape = Tape::new();
        let mut bind = Binding::new(&store, true);
        let q = tape.leaf(Tensor::filled(vec![2, 4], 0.3), false);
        let kv = tape.leaf(Tensor::filled(vec![3, 4], -0.2), false);
        let (out, _) = multi_head_attention(&mut tape, &mut bind, "att", q, kv, 2, None).unwrap();
        let loss = tape.sum(out);
        tape.backward(loss).unwrap();
        let grads = bind.grads(&tape);
        for name in ["att.q.weight", "att.k.weight", "att.v.weight", "att.o.weight"] {
            assert!(grads.contains_key(name), "missing grad for {name}");
        }
    }

    #[test]
    fn head_divisibility_is_enforced() {
        let store = store_with_attention(6, 8);
        let mut tape = Tape::new();
        let mut bind = Binding::new(&store, false);
        let x = tape.leaf(Tensor::filled(vec![2, 6], 0.1), false);
        assert!(matches!(
            multi_head_attention(&mut tape, &mut bind, "att", x, x, 4, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn param_count_formula_matches_store() {
        let store = store_with_attention(16, 9);
        assert_eq!(store.num_elements(), attention_param_count(16));
    }
}
