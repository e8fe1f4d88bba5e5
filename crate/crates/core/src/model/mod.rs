//! Model assembly: configuration, parameter registration, and the
//! closed-form parameter accounting used to audit what each component adds.

pub mod attention;
pub mod ctc_head;
pub mod decoder;
pub mod encoder;
pub mod fusion;

use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;
use crate::vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Baseline conformer; SSL inputs ignored.
    None,
    /// Subsampled framewise addition.
    Sfa,
    /// Cross attention from fbank queries to SSL keys/values.
    Ca,
    /// Independent cross attention per SSL source, outputs summed.
    MultiCa,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionMode::None),
            "sfa" => Ok(FusionMode::Sfa),
            "ca" => Ok(FusionMode::Ca),
            "multi-ca" => Ok(FusionMode::MultiCa),
            other => Err(Error::Config(format!(
                "unknown fusion mode {other:?} (expected none|sfa|ca|multi-ca)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::Sfa => "sfa",
            FusionMode::Ca => "ca",
            FusionMode::MultiCa => "multi-ca",
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Input width d' of each SSL source, in manifest column order.
    pub ssl_dims: Vec<usize>,
    /// SFA subsample factor s_v.
    pub sv: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { mode: FusionMode::None, ssl_dims: Vec::new(), sv: 2 }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_expansion: usize,
    pub depthwise_kernel: usize,
    pub d_fbank: usize,
    pub vocab: usize,
    pub fusion: FusionConfig,
    pub label_smoothing: f64,
    pub lambda_ctc: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 256,
            heads: 4,
            enc_layers: 12,
            dec_layers: 6,
            ffn_expansion: 4,
            depthwise_kernel: 15,
            d_fbank: 80,
            vocab: vocab::VOCAB_SIZE,
            fusion: FusionConfig::default(),
            label_smoothing: 0.1,
            lambda_ctc: 0.3,
            ln_eps: 1e-12,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.depthwise_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "depthwise kernel {} must be odd",
                self.depthwise_kernel
            )));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::Config("need at least one encoder and one decoder layer".into()));
        }
        if self.vocab < 3 {
            return Err(Error::Config("vocabulary must hold blank, sos/eos, and a symbol".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_ctc) {
            return Err(Error::Config(format!("lambda_ctc {} outside [0,1]", self.lambda_ctc)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0,1)",
                self.label_smoothing
            )));
        }
        if self.fusion.sv == 0 {
            return Err(Error::Config("ssl subsample factor s_v must be >= 1".into()));
        }
        let n = self.fusion.ssl_dims.len();
        match self.fusion.mode {
            FusionMode::None => {}
            FusionMode::Sfa | FusionMode::Ca if n != 1 => {
                return Err(Error::Config(format!(
                    "fusion mode {} needs exactly one SSL source, got {n}",
                    self.fusion.mode.as_str()
                )));
            }
            FusionMode::MultiCa if n < 2 => {
                return Err(Error::Config(format!(
                    "multi-ca needs at least two SSL sources, got {n}"
                )));
            }
            _ => {}
        }
        if self.fusion.ssl_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("ssl source width must be positive".into()));
        }
        Ok(())
    }

    /// Canonical key=value rendering; checkpoint compatibility is decided by
    /// comparing this text.
    pub fn to_canonical_text(&self) -> String {
        let dims: Vec<String> = self.fusion.ssl_dims.iter().map(|d| d.to_string()).collect();
        format!(
            "d_fbank={}\nd_model={}\ndec_layers={}\ndepthwise_kernel={}\nenc_layers={}\n\
             ffn_expansion={}\nfusion_mode={}\nheads={}\nlabel_smoothing={}\nlambda_ctc={}\n\
             ln_eps={}\nssl_dims={}\nssl_sv={}\nvocab={}\n",
            self.d_fbank,
            self.d_model,
            self.dec_layers,
            self.depthwise_kernel,
            self.enc_layers,
            self.ffn_expansion,
            self.fusion.mode.as_str(),
            self.heads,
            self.label_smoothing,
            self.lambda_ctc,
            self.ln_eps,
            dims.join(","),
            self.fusion.sv,
            self.vocab,
        )
    }

    /// Inverse of [`Self::to_canonical_text`]: defaults plus one override per
    /// line. Also accepts any hand-written key=value file.
    pub fn from_canonical_text(text: &str) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {line:?} is not key=value")))?;
            cfg.apply_kv(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one key=value override; unknown keys are rejected so typos in
    /// config files fail loudly.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_usize = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}")))
        };
        let parse_f64 = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::Config(format!("{key}: expected a number, got {v:?}")))
        };
        match key {
            "d_model" => self.d_model = parse_usize(value)?,
            "heads" => self.heads = parse_usize(value)?,
            "enc_layers" => self.enc_layers = parse_usize(value)?,
            "dec_layers" => self.dec_layers = parse_usize(value)?,
            "ffn_expansion" => self.ffn_expansion = parse_usize(value)?,
            "depthwise_kernel" => self.depthwise_kernel = parse_usize(value)?,
            "d_fbank" => self.d_fbank = parse_usize(value)?,
            "vocab" => self.vocab = parse_usize(value)?,
            "label_smoothing" => self.label_smoothing = parse_f64(value)?,
            "lambda_ctc" => self.lambda_ctc = parse_f64(value)?,
            "ln_eps" => self.ln_eps = parse_f64(value)?,
            "fusion_mode" => self.fusion.mode = FusionMode::parse(value)?,
            "ssl_sv" => self.fusion.sv = parse_usize(value)?,
            "ssl_dims" => {
                self.fusion.ssl_dims = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|v| {
                            v.parse::<usize>().map_err(|_| {
                                Error::Config(format!("ssl_dims: bad entry {v:?}"))
                            })
                        })
                        .collect::<Result<_>>()?
                };
            }
            other => return Err(Error::Config(format!("unknown model config key {other:?}"))),
        }
        Ok(())
    }
}

/// Sinusoidal absolute positional encoding, [len, d].
pub fn sinusoidal_pe(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for j in 0..d {
            let pair = (j / 2) * 2;
            let angle = pos as f64 / 10000f64.powf(pair as f64 / d as f64);
            data[pos * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).unwrap()
}

/// A configured model: hyperparameters plus every trainable tensor.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

impl Model {
    /// Register all parameters in a fixed order with seeded initialization.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        encoder::init_subsample_params(&mut init, &mut store, &cfg)?;
        fusion::init_fusion_params(&mut init, &mut store, &cfg)?;
        for l in 0..cfg.enc_layers {
            encoder::init_block_params(&mut init, &mut store, &format!("enc.l{l}"), &cfg)?;
        }
        ctc_head::init_ctc_params(&mut init, &mut store, &cfg)?;
        decoder::init_decoder_params(&mut init, &mut store, &cfg)?;
        Ok(Model { cfg, store })
    }
}

/// One utterance's loss terms and attention exports.
pub struct ForwardOutput {
    /// Scalar joint loss node, lambda * ctc + (1 - lambda) * att.
    pub loss: crate::tape::NodeId,
    pub ctc_loss: f64,
    pub att_loss: f64,
    pub attention: Vec<fusion::AttentionExport>,
}

/// Joint CTC-attention loss of one utterance. `ssl_inputs` pairs each
/// source's tag with its raw [T', d'] feature matrix; mode NONE ignores them.
pub fn forward_loss(
    tape: &mut crate::tape::Tape,
    bind: &mut crate::params::Binding,
    cfg: &ModelConfig,
    fbank: &Tensor,
    ssl_inputs: &[(String, Tensor)],
    labels: &[usize],
) -> Result<ForwardOutput> {
    if labels.is_empty() {
        return Err(Error::Input("cannot train on an empty label sequence".into()));
    }
    let f = tape.leaf(fbank.clone(), false);
    let ssl_nodes: Vec<(String, crate::tape::NodeId)> = ssl_inputs
        .iter()
        .map(|(tag, frames)| (tag.clone(), tape.leaf(frames.clone(), false)))
        .collect();
    let (h, attention) = encoder::encode(tape, bind, cfg, f, &ssl_nodes)?;
    let ctc = ctc_head::ctc_loss(tape, bind, h, labels)?;
    let att = decoder::attention_loss(tape, bind, cfg, h, labels)?;
    let ctc_scaled = tape.scale(ctc, cfg.lambda_ctc);
    let att_scaled = tape.scale(att, 1.0 - cfg.lambda_ctc);
    let loss = tape.add(ctc_scaled, att_scaled)?;
    Ok(ForwardOutput {
        loss,
        ctc_loss: tape.value(ctc).data()[0],
        att_loss: tape.value(att).data()[0],
        attention,
    })
}

/// Both heads' greedy hypotheses for one utterance, with frozen parameters.
pub struct Recognition {
    pub ctc_tokens: Vec<usize>,
    pub att_tokens: Vec<usize>,
    pub attention: Vec<fusion::AttentionExport>,
}

pub fn recognize(
    model: &Model,
    fbank: &Tensor,
    ssl_inputs: &[(String, Tensor)],
    max_len: usize,
) -> Result<Recognition> {
    let mut tape = crate::tape::Tape::new();
    let mut bind = crate::params::Binding::new(&model.store, false);
    let f = tape.leaf(fbank.clone(), false);
    let ssl_nodes: Vec<(String, crate::tape::NodeId)> = ssl_inputs
        .iter()
        .map(|(tag, frames)| (tag.clone(), tape.leaf(frames.clone(), false)))
        .collect();
    let (h, attention) = encoder::encode(&mut tape, &mut bind, &model.cfg, f, &ssl_nodes)?;
    let lp = ctc_head::ctc_log_probs(&mut tape, &mut bind, h)?;
    let ctc_tokens = ctc_head::ctc_greedy_decode(tape.value(lp));
    let att_tokens = decoder::greedy_decode(&mut tape, &mut bind, &model.cfg, h, max_len)?;
    Ok(Recognition { ctc_tokens, att_tokens, attention })
}

/// Closed-form scalar parameter counts per component. Kept as plain
/// arithmetic, independent of [`ParamStore`] bookkeeping, so the two can be
/// cross-checked against each other.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub subsample: usize,
    pub fusion_per_source: Vec<usize>,
    pub fusion: usize,
    pub encoder: usize,
    pub ctc: usize,
    pub decoder: usize,
    pub total: usize,
}

pub fn expected_param_counts(cfg: &ModelConfig) -> ParamReport {
    let d = cfg.d_model;
    let e = cfg.ffn_expansion;
    let ln = 2 * d;
    let att = attention::attention_param_count(d);
    let ffn = ln + (d * (e * d) + e * d) + ((e * d) * d + d);

    let subsample = (d * 9 + d) + (d * cfg.d_fbank * d + d);

    let fusion_per_source: Vec<usize> = cfg
        .fusion
        .ssl_dims
        .iter()
        .map(|&dp| {
            let project = dp * d + d + ln;
            match cfg.fusion.mode {
                FusionMode::None => 0,
                FusionMode::Sfa => project,
                FusionMode::Ca | FusionMode::MultiCa => project + att,
            }
        })
        .collect();
    let fusion: usize = fusion_per_source.iter().sum();

    let conv_module = ln + (d * 2 * d + 2 * d) + (d * cfg.depthwise_kernel + d) + ln + (d * d + d);
    let enc_block = 2 * ffn + (ln + att) + conv_module + ln;
    let encoder = cfg.enc_layers * enc_block;

    let ctc = d * cfg.vocab + cfg.vocab;

    let dec_block = (ln + att) + (ln + att) + ffn;
    let decoder =
        cfg.vocab * d + cfg.dec_layers * dec_block + ln + (d * cfg.vocab + cfg.vocab);

    ParamReport {
        subsample,
        fusion,
        fusion_per_source,
        encoder,
        ctc,
        decoder,
        total: subsample + fusion + encoder + ctc + decoder,
    }
}
