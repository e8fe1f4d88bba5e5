//! Scratch diagnostic: train the toy CA model and print attention argmax
//! sequences per utterance to see where monotonicity breaks.

use sslfuse_core::corpus::{gen_toy_corpus, ToyCorpusConfig};
use sslfuse_core::manifest::read_manifest;
use sslfuse_core::model::{FusionConfig, FusionMode, ModelConfig};
use sslfuse_core::ssl::SynthConfig;
use sslfuse_core::train::{load_dataset, train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let stride: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(160);
    let content_bins: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(32);
    let content_mix: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.8);
    let epochs: u32 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(150);
    let d_fbank: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(40);
    let positional_dims: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(24);
    let lambda_ctc: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let noam_scale: f64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(0.15);
    let letters_per_tone: usize = args.get(9).and_then(|s| s.parse().ok()).unwrap_or(1);
    let aligned: bool = args.get(10).map(|s| s == "1").unwrap_or(false);
    let enc_layers: usize = args.get(11).and_then(|s| s.parse().ok()).unwrap_or(2);
    let ssl_dim: usize = args.get(12).and_then(|s| s.parse().ok()).unwrap_or(64);
    let train_seed: u64 = args.get(13).and_then(|s| s.parse().ok()).unwrap_or(77);
    let positional_unit: usize = args.get(14).and_then(|s| s.parse().ok()).unwrap_or(320);
    let weight_decay: f64 = args.get(15).and_then(|s| s.parse().ok()).unwrap_or(0.0);

    let dir = tempfile::tempdir().unwrap();
    let corpus_cfg = ToyCorpusConfig {
        ssl: SynthConfig { dim: ssl_dim, stride, seed: 7, content_bins, content_mix, positional_dims, positional_unit },
        letters_per_tone,
        aligned_features: aligned,
        ..ToyCorpusConfig::default()
    };
    gen_toy_corpus(dir.path(), &corpus_cfg).unwrap();

    let cfg = TrainConfig {
        model: ModelConfig {
            d_model: 48,
            heads: 4,
            enc_layers,
            dec_layers: 1,
            ffn_expansion: 2,
            depthwise_kernel: 3,
            d_fbank,
            fusion: FusionConfig { mode: FusionMode::Ca, ssl_dims: vec![ssl_dim], sv: 2 },
            lambda_ctc,
            ..ModelConfig::default()
        },
        epochs: epochs as usize,
        batch_size: 2,
        grad_accum: 2,
        noam_scale,
        warmup_steps: 40,
        weight_decay,
        seed: train_seed,
        source_tags: vec!["synthetic".to_string()],
        stop_at_zero_train_wer: false,
    };
    let train_set = load_dataset(&read_manifest(&dir.path().join("train.tsv")).unwrap(), &cfg).unwrap();
    let valid_set = load_dataset(&read_manifest(&dir.path().join("valid.tsv")).unwrap(), &cfg).unwrap();
    let out = train(&train_set, &valid_set, &cfg, None, |r| {
        if r.epoch % 25 == 0 {
            eprintln!("epoch {}: train {:.3} val {:.3} wer {:.2}", r.epoch, r.train_loss, r.val_loss, r.val_wer);
        }
    })
    .unwrap();

    let mut pairs = 0usize;
    let mut good = 0usize;
    for u in &train_set {
        let rec = sslfuse_core::model::recognize(&out.model, &u.fbank, &u.ssl, u.fbank.rows() / 2 + 10).unwrap();
        let attn = &rec.attention[0].weights;
        let argmax: Vec<usize> = (0..attn.rows())
            .map(|i| {
                let row = attn.row(i);
                (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap()
            })
            .collect();
        let bad: Vec<usize> =
            (1..argmax.len()).filter(|&i| argmax[i] < argmax[i - 1]).collect();
        pairs += argmax.len() - 1;
        good += argmax.len() - 1 - bad.len();
        println!(
            "{} ref={:?} T'={} argmax={:?} drops at {:?}",
            u.id,
            u.reference,
            attn.cols(),
            argmax,
            bad
        );
    }
    let train_wer = sslfuse_core::train::dataset_wer(&out.model, &train_set).unwrap();
    println!(
        "monotone fraction: {}/{} = {:.3}  train-wer-dist {}",
        good,
        pairs,
        good as f64 / pairs as f64,
        train_wer.distance()
    );
}
