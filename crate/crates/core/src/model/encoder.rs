//! Convolutional two-factor subsampling and the conformer encoder stack.

use super::attention::{init_attention_params, multi_head_attention};
use super::fusion::{self, AttentionExport};
use super::{sinusoidal_pe, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{Binding, Init, ParamStore};
use crate::tape::{NodeId, Tape};

pub fn init_subsample_params(init: &mut Init, store: &mut ParamStore, cfg: &ModelConfig) -> Result<()> {
    let d = cfg.d_model;
    // 3x3 kernel, one input channel, d output channels
    init.uniform_fan(store, "sub.conv.weight", vec![d, 1, 3, 3], 9, 9 * d)?;
    init.zeros(store, "sub.conv.bias", vec![d])?;
    init.linear(store, "sub.proj.weight", d * cfg.d_fbank, d)?;
    init.zeros(store, "sub.proj.bias", vec![d])?;
    Ok(())
}

pub fn init_block_params(init: &mut Init, store: &mut ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<()> {
    let d = cfg.d_model;
    let e = cfg.ffn_expansion;
    let k = cfg.depthwise_kernel;
    for ffn in ["ffn1", "ffn2"] {
        init.ones(store, &format!("{prefix}.{ffn}.norm.gain"), vec![d])?;
        init.zeros(store, &format!("{prefix}.{ffn}.norm.bias"), vec![d])?;
        init.linear(store, &format!("{prefix}.{ffn}.w1.weight"), d, e * d)?;
        init.zeros(store, &format!("{prefix}.{ffn}.w1.bias"), vec![e * d])?;
        init.linear(store, &format!("{prefix}.{ffn}.w2.weight"), e * d, d)?;
        init.zeros(store, &format!("{prefix}.{ffn}.w2.bias"), vec![d])?;
    }
    init.ones(store, &format!("{prefix}.att.norm.gain"), vec![d])?;
    init.zeros(store, &format!("{prefix}.att.norm.bias"), vec![d])?;
    init_attention_params(init, store, &format!("{prefix}.att"), d)?;
    init.ones(store, &format!("{prefix}.conv.norm.gain"), vec![d])?;
    init.zeros(store, &format!("{prefix}.conv.norm.bias"), vec![d])?;
    init.linear(store, &format!("{prefix}.conv.pw1.weight"), d, 2 * d)?;
    init.zeros(store, &format!("{prefix}.conv.pw1.bias"), vec![2 * d])?;
    init.uniform_fan(store, &format!("{prefix}.conv.dw.weight"), vec![d, k], k, k)?;
    init.zeros(store, &format!("{prefix}.conv.dw.bias"), vec![d])?;
    init.ones(store, &format!("{prefix}.conv.mid_norm.gain"), vec![d])?;
    init.zeros(store, &format!("{prefix}.conv.mid_norm.bias"), vec![d])?;
    init.linear(store, &format!("{prefix}.conv.pw2.weight"), d, d)?;
    init.zeros(store, &format!("{prefix}.conv.pw2.bias"), vec![d])?;
    init.ones(store, &format!("{prefix}.final_norm.gain"), vec![d])?;
    init.zeros(store, &format!("{prefix}.final_norm.bias"), vec![d])?;
    Ok(())
}

fn layer_norm_named(
    tape: &mut Tape,
    bind: &mut Binding,
    prefix: &str,
    x: NodeId,
    eps: f64,
) -> Result<NodeId> {
    let gain = bind.get(tape, &format!("{prefix}.gain"))?;
    let bias = bind.get(tape, &format!("{prefix}.bias"))?;
    tape.layer_norm(x, gain, bias, eps)
}

fn linear_named(tape: &mut Tape, bind: &mut Binding, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w = bind.get(tape, &format!("{prefix}.weight"))?;
    let b = bind.get(tape, &format!("{prefix}.bias"))?;
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

/// Strided 3x3 convolution over the [T, d_fbank] spectrogram (stride 2 along
/// time), swish, channel merge, then a linear map to model width. A trailing
/// frame is dropped for odd T so L_sub = floor(T/2) always holds.
pub fn conv_subsample(
    tape: &mut Tape,
    bind: &mut Binding,
    cfg: &ModelConfig,
    fbank: NodeId,
) -> Result<NodeId> {
    let t = tape.value(fbank).rows();
    let w = tape.value(fbank).cols();
    if tape.value(fbank).ndim() != 2 || w != cfg.d_fbank {
        return Err(Error::Shape(format!(
            "subsampling expects [T, {}], got {:?}",
            cfg.d_fbank,
            tape.value(fbank).shape()
        )));
    }
    if t < 4 {
        return Err(Error::Input(format!("need at least 4 fbank frames, got {t}")));
    }
    let lifted = tape.reshape(fbank, vec![1, t, w])?;
    let cw = bind.get(tape, "sub.conv.weight")?;
    let cb = bind.get(tape, "sub.conv.bias")?;
    let conv = tape.conv2d(lifted, cw, cb, (2, 1), (1, 1))?;
    let act = tape.swish(conv);
    let merged = tape.merge_channels(act)?;
    let l_sub = t / 2;
    let trimmed = if tape.value(merged).rows() > l_sub {
        tape.slice_rows(merged, 0, l_sub)?
    } else {
        merged
    };
    linear_named(tape, bind, "sub.proj", trimmed)
}

/// One conformer block: half FFN, self-attention, depthwise-conv module,
/// half FFN, closing layer norm. Pre-norm residuals throughout.
pub fn conformer_block(
    tape: &mut Tape,
    bind: &mut Binding,
    cfg: &ModelConfig,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let d = cfg.d_model;
    if tape.value(x).ndim() != 2 || tape.value(x).cols() != d {
        return Err(Error::Shape(format!(
            "conformer block expects [L, {d}], got {:?}",
            tape.value(x).shape()
        )));
    }
    let eps = cfg.ln_eps;

    let half_ffn = |tape: &mut Tape, bind: &mut Binding, name: &str, input: NodeId| -> Result<NodeId> {
        let p = format!("{prefix}.{name}");
        let normed = layer_norm_named(tape, bind, &format!("{p}.norm"), input, eps)?;
        let h1 = linear_named(tape, bind, &format!("{p}.w1"), normed)?;
        let a = tape.swish(h1);
        let h2 = linear_named(tape, bind, &format!("{p}.w2"), a)?;
        let half = tape.scale(h2, 0.5);
        tape.add(input, half)
    };

    let x = half_ffn(tape, bind, "ffn1", x)?;

    let normed = layer_norm_named(tape, bind, &format!("{prefix}.att.norm"), x, eps)?;
    let (att, _) =
        multi_head_attention(tape, bind, &format!("{prefix}.att"), normed, normed, cfg.heads, None)?;
    let x = tape.add(x, att)?;

    let normed = layer_norm_named(tape, bind, &format!("{prefix}.conv.norm"), x, eps)?;
    let pw1 = linear_named(tape, bind, &format!("{prefix}.conv.pw1"), normed)?;
    let gate_in = tape.slice_cols(pw1, 0, d)?;
    let gate_ctl = tape.slice_cols(pw1, d, d)?;
    let sig = tape.sigmoid(gate_ctl);
    let glu = tape.mul(gate_in, sig)?;
    let dw_w = bind.get(tape, &format!("{prefix}.conv.dw.weight"))?;
    let dw_b = bind.get(tape, &format!("{prefix}.conv.dw.bias"))?;
    let dw = tape.depthwise_conv1d(glu, dw_w, dw_b, (cfg.depthwise_kernel - 1) / 2)?;
    let mid = layer_norm_named(tape, bind, &format!("{prefix}.conv.mid_norm"), dw, eps)?;
    let act = tape.swish(mid);
    let pw2 = linear_named(tape, bind, &format!("{prefix}.conv.pw2"), act)?;
    let x = tape.add(x, pw2)?;

    let x = half_ffn(tape, bind, "ffn2", x)?;
    layer_norm_named(tape, bind, &format!("{prefix}.final_norm"), x, eps)
}

/// Full encoder forward: subsample, add sinusoidal positions, fuse the SSL
/// inputs per the configured mode, then run the block stack. Positions go on
/// before fusion so the fusion queries carry them (the fusion ops themselves
/// stay position-free); the residual hands them on to the block stack.
pub fn encode(
    tape: &mut Tape,
    bind: &mut Binding,
    cfg: &ModelConfig,
    fbank: NodeId,
    ssl_inputs: &[(String, NodeId)],
) -> Result<(NodeId, Vec<AttentionExport>)> {
    let u_sub = conv_subsample(tape, bind, cfg, fbank)?;
    let l_sub = tape.value(u_sub).rows();
    let pe = tape.constant(sinusoidal_pe(l_sub, cfg.d_model));
    let u_hat = tape.add(u_sub, pe)?;
    let (mut h, exports) = fusion::fuse(tape, bind, cfg, u_hat, ssl_inputs)?;
    for l in 0..cfg.enc_layers {
        h = conformer_block(tape, bind, cfg, &format!("enc.l{l}"), h)?;
    }
    Ok((h, exports))
}
