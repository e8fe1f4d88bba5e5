//! Deterministic training loop: seeded shuffling, length-bucketed batches,
//! gradient accumulation, Noam-scheduled Adam, epoch-wise validation, and a
//! best-by-validation-loss checkpoint.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::frontend::{fbank, read_wav, FrontendConfig};
use crate::manifest::Manifest;
use crate::model::{forward_loss, recognize, FusionMode, Model, ModelConfig};
use crate::optim::{lr_at, Adam, AdamSlot};
use crate::params::Binding;
use crate::ssl::read_features;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::vocab;
use crate::wer::{wer, WerBreakdown};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Micro-batches accumulated into one optimizer step.
    pub grad_accum: usize,
    pub noam_scale: f64,
    pub warmup_steps: u64,
    /// Decoupled weight decay passed to the optimizer; 0 disables it.
    pub weight_decay: f64,
    pub seed: u64,
    /// Feature cache tags, aligned with the manifest's feature columns and
    /// with `model.fusion.ssl_dims`.
    pub source_tags: Vec<String>,
    /// End training early once attention-greedy train WER reaches zero.
    pub stop_at_zero_train_wer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            epochs: 50,
            batch_size: 4,
            grad_accum: 4,
            noam_scale: 1.0,
            warmup_steps: 500,
            weight_decay: 0.0,
            seed: 0,
            source_tags: Vec::new(),
            stop_at_zero_train_wer: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::Config(
                "epochs, batch_size, and grad_accum must be positive".into(),
            ));
        }
        if self.warmup_steps == 0 || self.noam_scale <= 0.0 {
            return Err(Error::Config(
                "warmup_steps and noam_scale must be positive".into(),
            ));
        }
        if self.model.fusion.mode != FusionMode::None
            && self.source_tags.len() != self.model.fusion.ssl_dims.len()
        {
            return Err(Error::Config(format!(
                "{} source tags for {} configured SSL widths",
                self.source_tags.len(),
                self.model.fusion.ssl_dims.len()
            )));
        }
        Ok(())
    }

    /// Frontend settings are fixed except that the mel count must match the
    /// encoder's expected input width.
    pub fn frontend(&self) -> FrontendConfig {
        FrontendConfig { n_mels: self.model.d_fbank, ..FrontendConfig::default() }
    }

    /// One key=value override; harness keys first, model keys otherwise.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_usize = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}")))
        };
        match key {
            "epochs" => self.epochs = parse_usize(value)?,
            "batch_size" => self.batch_size = parse_usize(value)?,
            "grad_accum" => self.grad_accum = parse_usize(value)?,
            "warmup_steps" => self.warmup_steps = parse_usize(value)? as u64,
            "seed" => self.seed = parse_usize(value)? as u64,
            "noam_scale" => {
                self.noam_scale = value.parse::<f64>().map_err(|_| {
                    Error::Config(format!("noam_scale: expected a number, got {value:?}"))
                })?;
            }
            "weight_decay" => {
                self.weight_decay = value.parse::<f64>().map_err(|_| {
                    Error::Config(format!("weight_decay: expected a number, got {value:?}"))
                })?;
            }
            "stop_at_zero_train_wer" => {
                self.stop_at_zero_train_wer = value.parse::<bool>().map_err(|_| {
                    Error::Config(format!("stop_at_zero_train_wer: expected a bool, got {value:?}"))
                })?;
            }
            _ => self.model.apply_kv(key, value)?,
        }
        Ok(())
    }
}

/// One fully materialized utterance: frontend features, cached SSL features,
/// label ids, and the normalized reference text.
#[derive(Debug)]
pub struct LoadedUtterance {
    pub id: String,
    pub fbank: Tensor,
    pub ssl: Vec<(String, Tensor)>,
    pub labels: Vec<usize>,
    pub reference: String,
}

/// Per-utterance mean-variance normalization of each mel column. Raw log-mel
/// values sit near the log floor (about -23) and would swamp everything the
/// encoder adds to them, positional encodings included.
fn cmvn(feats: &mut Tensor) {
    let (t, d) = (feats.rows(), feats.cols());
    for j in 0..d {
        let col: Vec<f64> = (0..t).map(|i| feats.at2(i, j)).collect();
        let mean = col.iter().sum::<f64>() / t as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
        let std = var.sqrt().max(1e-6);
        for i in 0..t {
            feats.data_mut()[i * d + j] = (col[i] - mean) / std;
        }
    }
}

/// Reads every utterance in the manifest into memory. Feature caches are
/// only touched for the configured fusion sources; mode NONE reads none.
pub fn load_dataset(m: &Manifest, cfg: &TrainConfig) -> Result<Vec<LoadedUtterance>> {
    let fe = cfg.frontend();
    let n_sources = match cfg.model.fusion.mode {
        FusionMode::None => 0,
        _ => cfg.model.fusion.ssl_dims.len(),
    };
    let mut out = Vec::with_capacity(m.records.len());
    for r in &m.records {
        let audio = read_wav(&m.audio_path(r))?;
        let mut feats = fbank(&audio, &fe)?;
        cmvn(&mut feats);
        let mut ssl = Vec::with_capacity(n_sources);
        for k in 0..n_sources {
            if k >= r.feature_paths.len() {
                return Err(Error::Input(format!(
                    "utterance {}: manifest has {} feature columns but source {} is configured",
                    r.utterance_id,
                    r.feature_paths.len(),
                    cfg.source_tags[k]
                )));
            }
            let seq = read_features(&m.feature_path(r, k), &r.utterance_id, &cfg.source_tags[k])
                .map_err(|e| Error::Input(format!("utterance {}: {e}", r.utterance_id)))?;
            ssl.push((cfg.source_tags[k].clone(), seq.frames));
        }
        out.push(LoadedUtterance {
            id: r.utterance_id.clone(),
            fbank: feats,
            ssl,
            labels: vocab::encode(&r.transcript)?,
            reference: vocab::normalize(&r.transcript),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_wer: f64,
    pub seconds: f64,
}

impl EpochReport {
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.3}",
            self.epoch, self.train_loss, self.val_loss, self.val_wer, self.seconds
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Final-epoch parameters (the overfit model when early stop fires).
    pub model: Model,
    pub reports: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Length-sorted contiguous batches; the batch order is reshuffled per call.
fn epoch_batches(lengths: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    idx.sort_by_key(|&i| (lengths[i], i));
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

/// Mean joint loss over a set, no gradients.
pub fn dataset_loss(model: &Model, set: &[LoadedUtterance]) -> Result<f64> {
    let mut sum = 0.0;
    for u in set {
        let mut tape = Tape::new();
        let mut bind = Binding::new(&model.store, false);
        let out = forward_loss(&mut tape, &mut bind, &model.cfg, &u.fbank, &u.ssl, &u.labels)?;
        sum += tape.value(out.loss).data()[0];
    }
    Ok(sum / set.len() as f64)
}

/// Attention-greedy hypothesis for one utterance.
pub fn transcribe(model: &Model, u: &LoadedUtterance) -> Result<String> {
    // enough budget for one token per subsampled frame plus slack
    let max_len = u.fbank.rows() / 2 + 10;
    let rec = recognize(model, &u.fbank, &u.ssl, max_len)?;
    vocab::decode(&rec.att_tokens)
}

/// Corpus WER of attention-greedy decoding over a set.
pub fn dataset_wer(model: &Model, set: &[LoadedUtterance]) -> Result<WerBreakdown> {
    let mut total = WerBreakdown::default();
    for u in set {
        let hyp = transcribe(model, u)?;
        total.absorb(&wer(&u.reference, &hyp)?);
    }
    Ok(total)
}

fn snapshot(model: &Model, adam: &Adam, slots: &HashMap<String, AdamSlot>, epoch: u32) -> Checkpoint {
    let mut params = Vec::new();
    let mut adam_m = Vec::new();
    let mut adam_v = Vec::new();
    for name in model.store.names() {
        let p = model.store.get(name).unwrap();
        params.push((name.to_string(), p.clone()));
        let slot = &slots[name];
        adam_m.push((name.to_string(), Tensor::new(p.shape().to_vec(), slot.m.clone()).unwrap()));
        adam_v.push((name.to_string(), Tensor::new(p.shape().to_vec(), slot.v.clone()).unwrap()));
    }
    Checkpoint {
        config_text: model.cfg.to_canonical_text(),
        epoch,
        step: adam.step(),
        params,
        adam_m,
        adam_v,
    }
}

/// Rebuilds a model from a checkpoint: the embedded canonical config defines
/// the architecture, then every stored parameter overwrites its tensor.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
    let cfg = ModelConfig::from_canonical_text(&ckpt.config_text)?;
    let mut model = Model::init(cfg, 0)?;
    if ckpt.params.len() != model.store.num_tensors() {
        return Err(Error::Config(format!(
            "checkpoint holds {} parameter tensors, model defines {}",
            ckpt.params.len(),
            model.store.num_tensors()
        )));
    }
    for (name, tensor) in &ckpt.params {
        let dst = model
            .store
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("checkpoint parameter {name:?} not in model")))?;
        if dst.shape() != tensor.shape() {
            return Err(Error::Shape(format!(
                "checkpoint parameter {name:?} has shape {:?}, model expects {:?}",
                tensor.shape(),
                dst.shape()
            )));
        }
        *dst = tensor.clone();
    }
    Ok(model)
}

/// Trains from scratch. `log_line` receives each epoch's report as it
/// completes; the best-by-validation-loss checkpoint is written to
/// `checkpoint_path` whenever validation improves.
pub fn train(
    train_set: &[LoadedUtterance],
    valid_set: &[LoadedUtterance],
    cfg: &TrainConfig,
    checkpoint_path: Option<&Path>,
    mut log_line: impl FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::Input("training and validation sets must be non-empty".into()));
    }

    let mut model = Model::init(cfg.model.clone(), cfg.seed)?;
    let names: Vec<String> = model.store.names().map(str::to_string).collect();
    let mut slots: HashMap<String, AdamSlot> = names
        .iter()
        .map(|n| (n.clone(), AdamSlot::zeros(model.store.get(n).unwrap().data().len())))
        .collect();
    let mut adam = Adam::new();
    adam.weight_decay = cfg.weight_decay;
    // distinct stream from parameter init so reordering one never shifts the other
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let lengths: Vec<usize> = train_set.iter().map(|u| u.fbank.rows()).collect();

    let mut grad_acc: HashMap<String, Tensor> = HashMap::new();
    let mut micro_in_window = 0usize;
    let mut reports: Vec<EpochReport> = Vec::new();
    let mut best: Option<(f64, usize)> = None;

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for batch in epoch_batches(&lengths, cfg.batch_size, &mut shuffle_rng) {
            let mut tape = Tape::new();
            let mut bind = Binding::new(&model.store, true);
            let mut total: Option<NodeId> = None;
            for &i in &batch {
                let u = &train_set[i];
                let out =
                    forward_loss(&mut tape, &mut bind, &cfg.model, &u.fbank, &u.ssl, &u.labels)
                        .map_err(|e| match e {
                            // a diverged run surfaces wherever a finiteness
                            // guard fires first; all aborts name the step
                            Error::Numeric(m) => Error::Numeric(format!(
                                "optimizer step {}, utterance {}: {m}",
                                adam.step() + 1,
                                u.id
                            )),
                            other => other,
                        })?;
                loss_sum += tape.value(out.loss).data()[0];
                loss_count += 1;
                total = Some(match total {
                    None => out.loss,
                    Some(t) => tape.add(t, out.loss)?,
                });
            }
            // mean over the accumulation window: mean within the micro-batch,
            // then 1/grad_accum across micro-batches
            let scaled =
                tape.scale(total.unwrap(), 1.0 / (batch.len() as f64 * cfg.grad_accum as f64));
            if !tape.value(scaled).data()[0].is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss while accumulating optimizer step {}",
                    adam.step() + 1
                )));
            }
            tape.backward(scaled)?;
            for (name, g) in bind.grads(&tape) {
                match grad_acc.get_mut(&name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        grad_acc.insert(name, g);
                    }
                }
            }

            micro_in_window += 1;
            if micro_in_window == cfg.grad_accum {
                let step = adam.begin_step();
                let lr = lr_at(step, cfg.noam_scale, cfg.model.d_model, cfg.warmup_steps);
                for name in &names {
                    if let Some(g) = grad_acc.get(name) {
                        adam.update(
                            model.store.get_mut(name).unwrap().data_mut(),
                            g.data(),
                            slots.get_mut(name).unwrap(),
                            lr,
                        )?;
                    }
                }
                grad_acc.clear();
                micro_in_window = 0;
            }
        }

        let val_loss = dataset_loss(&model, valid_set)?;
        let val_wer = dataset_wer(&model, valid_set)?;
        let report = EpochReport {
            epoch,
            train_loss: loss_sum / loss_count as f64,
            val_loss,
            val_wer: val_wer.rate(),
            seconds: t0.elapsed().as_secs_f64(),
        };
        log_line(&report);
        reports.push(report);

        if best.is_none_or(|(b, _)| val_loss < b) {
            best = Some((val_loss, epoch));
            if let Some(path) = checkpoint_path {
                save_checkpoint(path, &snapshot(&model, &adam, &slots, epoch as u32))?;
            }
        }
        if cfg.stop_at_zero_train_wer && dataset_wer(&model, train_set)?.distance() == 0 {
            break;
        }
    }

    let (best_val_loss, best_epoch) = best.unwrap();
    Ok(TrainOutcome { model, reports, best_epoch, best_val_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_toy_corpus, ToyCorpusConfig};
    use crate::manifest::read_manifest;
    use crate::model::FusionConfig;
    use crate::ssl::SynthConfig;

    /// Tiny everything: fast enough for unit tests, still end to end.
    fn tiny_train_cfg(mode: FusionMode) -> TrainConfig {
        let ssl_dims = if mode == FusionMode::None { vec![] } else { vec![16] };
        let source_tags = if mode == FusionMode::None {
            vec![]
        } else {
            vec!["synthetic".to_string()]
        };
        TrainConfig {
            model: ModelConfig {
                d_model: 16,
                heads: 2,
                enc_layers: 1,
                dec_layers: 1,
                ffn_expansion: 2,
                depthwise_kernel: 3,
                d_fbank: 20,
                fusion: FusionConfig { mode, ssl_dims, sv: 2 },
                ..ModelConfig::default()
            },
            epochs: 1,
            batch_size: 2,
            grad_accum: 2,
            noam_scale: 0.2,
            warmup_steps: 40,
            weight_decay: 0.0,
            seed: 11,
            source_tags,
            stop_at_zero_train_wer: false,
        }
    }

    fn tiny_corpus(dir: &Path, n: usize) -> ToyCorpusConfig {
        let cfg = ToyCorpusConfig {
            num_utterances: n,
            num_valid: 2,
            ssl: SynthConfig {
                dim: 16,
                stride: 160,
                seed: 3,
                content_bins: 8,
                content_mix: 0.8,
                positional_dims: 4,
                positional_unit: 320,
            },
            ..ToyCorpusConfig::default()
        };
        gen_toy_corpus(dir, &cfg).unwrap();
        cfg
    }

    fn load_sets(dir: &Path, cfg: &TrainConfig) -> (Vec<LoadedUtterance>, Vec<LoadedUtterance>) {
        let train = read_manifest(&dir.join("train.tsv")).unwrap();
        let valid = read_manifest(&dir.join("valid.tsv")).unwrap();
        (load_dataset(&train, cfg).unwrap(), load_dataset(&valid, cfg).unwrap())
    }

    #[test]
    fn loader_reads_features_only_for_configured_sources() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), 6);
        let ca = tiny_train_cfg(FusionMode::Ca);
        let (train, _) = load_sets(dir.path(), &ca);
        assert_eq!(train.len(), 4);
        assert_eq!(train[0].ssl.len(), 1);
        assert_eq!(train[0].ssl[0].1.cols(), 16);
        assert!(!train[0].labels.is_empty());

        let none = tiny_train_cfg(FusionMode::None);
        let (train, _) = load_sets(dir.path(), &none);
        assert!(train[0].ssl.is_empty());
    }

    #[test]
    fn loader_names_the_utterance_with_a_missing_feature_file() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), 6);
        let cfg = tiny_train_cfg(FusionMode::Ca);
        std::fs::remove_file(dir.path().join("feats/synthetic/toy001.ssf1")).unwrap();
        let m = read_manifest(&dir.path().join("train.tsv")).unwrap();
        let err = load_dataset(&m, &cfg).unwrap_err();
        assert!(err.to_string().contains("toy001"), "got: {err}");
    }

    #[test]
    fn no_step_happens_before_the_accumulation_window_fills() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), 6);
        let mut cfg = tiny_train_cfg(FusionMode::None);
        let (train, valid) = load_sets(dir.path(), &cfg);
        let init = Model::init(cfg.model.clone(), cfg.seed).unwrap();

        // 4 train utterances, batch 2: two micro-batches per epoch
        cfg.grad_accum = 3;
        let out = train_run(&train, &valid, &cfg);
        for name in init.store.names() {
            assert_eq!(
                out.model.store.get(name).unwrap().data(),
                init.store.get(name).unwrap().data(),
                "{name} moved without a full accumulation window"
            );
        }

        cfg.grad_accum = 2;
        let out = train_run(&train, &valid, &cfg);
        let moved = init
            .store
            .names()
            .any(|n| out.model.store.get(n).unwrap().data() != init.store.get(n).unwrap().data());
        assert!(moved, "a full window must produce an optimizer step");
    }

    fn train_run(
        train_set: &[LoadedUtterance],
        valid_set: &[LoadedUtterance],
        cfg: &TrainConfig,
    ) -> TrainOutcome {
        train(train_set, valid_set, cfg, None, |_| {}).unwrap()
    }

    #[test]
    fn same_seed_reproduces_parameters_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), 6);
        let mut cfg = tiny_train_cfg(FusionMode::Ca);
        cfg.epochs = 2;
        let (train_set, valid_set) = load_sets(dir.path(), &cfg);
        let a = train_run(&train_set, &valid_set, &cfg);
        let b = train_run(&train_set, &valid_set, &cfg);
        for name in a.model.store.names() {
            let xa = a.model.store.get(name).unwrap().data();
            let xb = b.model.store.get(name).unwrap().data();
            assert!(
                xa.iter().zip(xb).all(|(p, q)| p.to_bits() == q.to_bits()),
                "{name} differs between identically seeded runs"
            );
        }
        assert_eq!(a.reports.len(), b.reports.len());
        for (ra, rb) in a.reports.iter().zip(&b.reports) {
            assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
            assert_eq!(ra.val_loss.to_bits(), rb.val_loss.to_bits());
            assert_eq!(ra.val_wer.to_bits(), rb.val_wer.to_bits());
        }
    }

    #[test]
    fn exploding_rate_aborts_with_the_step_index() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), 6);
        let mut cfg = tiny_train_cfg(FusionMode::None);
        cfg.epochs = 4;
        cfg.batch_size = 1;
        cfg.grad_accum = 1;
        cfg.noam_scale = 1e28;
        let (train_set, valid_set) = load_sets(dir.path(), &cfg);
        let err = train(&train_set, &valid_set, &cfg, None, |_| {}).unwrap_err();
        assert!(
            matches!(&err, Error::Numeric(m) if m.contains("step")),
            "got: {err}"
        );
    }

    #[test]
    fn checkpoint_restores_the_best_model_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), 6);
        let cfg = tiny_train_cfg(FusionMode::Ca);
        let (train_set, valid_set) = load_sets(dir.path(), &cfg);
        let ckpt_path = dir.path().join("best.ckpt");
        let out = train(&train_set, &valid_set, &cfg, Some(&ckpt_path), |_| {}).unwrap();
        // one epoch: best == final
        assert_eq!(out.best_epoch, 1);
        let ckpt = crate::checkpoint::load_checkpoint(&ckpt_path).unwrap();
        ckpt.require_config(&cfg.model.to_canonical_text()).unwrap();
        assert_eq!(ckpt.epoch, 1);
        let restored = model_from_checkpoint(&ckpt).unwrap();
        for name in out.model.store.names() {
            let trained = out.model.store.get(name).unwrap().data();
            let loaded = restored.store.get(name).unwrap().data();
            for (t, l) in trained.iter().zip(loaded) {
                assert_eq!(*t as f32, *l as f32, "{name} lost more than f32 precision");
            }
        }
    }
}
