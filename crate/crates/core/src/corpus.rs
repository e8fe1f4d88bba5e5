//! Deterministic toy corpus: 20 utterances whose words are single letters,
//! each rendered as a 0.1 s sinusoid with one frequency per tone, plus
//! cached synthetic features for each configured source. Small enough that
//! the full recognizer overfits it in minutes on a CPU.

use std::fs;
use std::path::{Path, PathBuf};

use rand::prelude::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::error::{Error, Result};
use crate::frontend::{read_wav, write_wav, Waveform};
use crate::manifest::{write_manifest, UtteranceRecord};
use crate::ssl::{
    fill_positional_channel, synth_features_from_audio, window_log_mels, write_features,
    SslSequence, SynthConfig,
};
use crate::tensor::Tensor;

/// Tone count when every letter has its own frequency.
const DISTINCT_TONES: usize = 8;
/// Tone count when letters share frequencies (keeps 12 letters at 2 per tone).
const SHARED_TONES: usize = 6;
const TONE_SECONDS: f64 = 0.1;
const TONE_AMPLITUDE: f64 = 0.3;

pub struct ToyCorpusConfig {
    pub seed: u64,
    pub sample_rate: u32,
    pub num_utterances: usize,
    /// Trailing utterances held out into the validation manifest.
    pub num_valid: usize,
    /// One synthetic feature cache per tag, all driven by `ssl`.
    pub source_tags: Vec<String>,
    pub ssl: SynthConfig,
    /// Letters sharing each tone frequency. 1 keeps the audio→letter map
    /// injective; 2 makes letter pairs homophones, so transcribing them
    /// needs information beyond the audio.
    pub letters_per_tone: usize,
    /// Write transcript-aligned features (per-frame letter code plus the
    /// positional channel) instead of audio-derived content. Paired with
    /// homophone audio this makes the cached features the only source that
    /// can disambiguate the transcript.
    pub aligned_features: bool,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        ToyCorpusConfig {
            seed: 7,
            sample_rate: 16_000,
            num_utterances: 20,
            num_valid: 4,
            source_tags: vec!["synthetic".to_string()],
            // content-mixed so the cached features actually encode the tones
            ssl: SynthConfig {
                dim: 64,
                stride: 160,
                seed: 7,
                content_bins: 24,
                content_mix: 0.8,
                positional_dims: 24,
                positional_unit: 320,
            },
            letters_per_tone: 1,
            aligned_features: false,
        }
    }
}

pub struct ToyCorpus {
    pub train_manifest: PathBuf,
    pub valid_manifest: PathBuf,
    pub transcripts: Vec<(String, String)>,
}

fn num_tones(letters_per_tone: usize) -> usize {
    if letters_per_tone == 1 { DISTINCT_TONES } else { SHARED_TONES }
}

fn letter_for(tone: usize, member: usize, letters_per_tone: usize) -> char {
    (b'a' + (tone * letters_per_tone + member) as u8) as char
}

fn tone_frequency(letter: char, letters_per_tone: usize) -> f64 {
    let tone = ((letter as u8 - b'a') as usize / letters_per_tone) as f64;
    300.0 + 150.0 * tone
}

fn render_transcript(transcript: &str, rate: u32, letters_per_tone: usize) -> Waveform {
    let tone_len = (TONE_SECONDS * rate as f64).round() as usize;
    let mut samples = Vec::new();
    for word in transcript.split_whitespace() {
        let freq = tone_frequency(word.chars().next().unwrap(), letters_per_tone);
        let omega = 2.0 * std::f64::consts::PI * freq / rate as f64;
        for n in 0..tone_len {
            samples.push(TONE_AMPLITUDE * (omega * n as f64).sin());
        }
    }
    Waveform { samples, sample_rate: rate }
}

/// Width of the one-hot letter code at the front of aligned features.
const ALIGNED_CODE_DIMS: usize = 12;
/// Words per utterance in the fixed-audio aligned variant.
const ALIGNED_FIXED_WORDS: usize = 6;

/// The fixed tone ladder shared by every fixed-audio utterance: one 0.1 s
/// segment per word position, frequency ascending with position.
fn render_fixed_ladder(n_words: usize, rate: u32) -> Waveform {
    let tone_len = (TONE_SECONDS * rate as f64).round() as usize;
    let mut samples = Vec::new();
    for k in 0..n_words {
        let freq = 300.0 + 150.0 * k as f64;
        let omega = 2.0 * std::f64::consts::PI * freq / rate as f64;
        for n in 0..tone_len {
            samples.push(TONE_AMPLITUDE * (omega * n as f64).sin());
        }
    }
    Waveform { samples, sample_rate: rate }
}

/// Transcript-aligned features: each frame carries a one-hot code of the
/// letter sounding at that frame's midpoint in the leading dims, the
/// standardized log-mel content of its own window next (so key content lives
/// in the same basis as the query stream), and the positional channel in the
/// trailing dims. Fully deterministic, so no per-utterance fingerprint leaks
/// in through noise.
fn aligned_features(
    utterance_id: &str,
    transcript: &str,
    audio: &Waveform,
    cfg: &SynthConfig,
) -> Result<SslSequence> {
    let letters: Vec<char> =
        transcript.split_whitespace().map(|w| w.chars().next().unwrap()).collect();
    let width = letters.iter().map(|&c| (c as u8 - b'a') as usize + 1).max().unwrap_or(0);
    if width > ALIGNED_CODE_DIMS
        || cfg.content_bins < ALIGNED_CODE_DIMS
        || cfg.content_bins + cfg.positional_dims > cfg.dim
    {
        return Err(Error::Config(format!(
            "aligned features need {width} <= code dims {ALIGNED_CODE_DIMS} <= content_bins {} and content_bins plus positional_dims {} within dim {}",
            cfg.content_bins, cfg.positional_dims, cfg.dim
        )));
    }
    let tone_len = (TONE_SECONDS * audio.sample_rate as f64).round() as usize;
    let t = audio.samples.len() / cfg.stride;
    if t == 0 {
        return Err(Error::Input(format!(
            "waveform of {} samples is shorter than one {}-sample stride",
            audio.samples.len(),
            cfg.stride
        )));
    }
    let mut data = vec![0.0; t * cfg.dim];
    for i in 0..t {
        let mid = i * cfg.stride + cfg.stride / 2;
        let token = (mid / tone_len).min(letters.len() - 1);
        let code = (letters[token] as u8 - b'a') as usize;
        data[i * cfg.dim + code] = 1.0;
    }
    let mel_bins = cfg.content_bins - ALIGNED_CODE_DIMS;
    if mel_bins > 0 {
        let energies = window_log_mels(audio, cfg.stride, mel_bins, t)?;
        for j in 0..mel_bins {
            let col: Vec<f64> = (0..t).map(|i| energies[i * mel_bins + j]).collect();
            let mean = col.iter().sum::<f64>() / t as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
            let std = var.sqrt().max(1e-6);
            for i in 0..t {
                data[i * cfg.dim + ALIGNED_CODE_DIMS + j] = (col[i] - mean) / std;
            }
        }
    }
    fill_positional_channel(&mut data, t, cfg);
    Ok(SslSequence {
        utterance_id: utterance_id.to_string(),
        source_tag: "synthetic".to_string(),
        frames: Tensor::new(vec![t, cfg.dim], data)?,
    })
}

/// Generates the corpus under `out_dir`: WAVs, SSF1 caches, and train/valid
/// manifests. Byte-identical across runs with the same config.
pub fn gen_toy_corpus(out_dir: &Path, cfg: &ToyCorpusConfig) -> Result<ToyCorpus> {
    if cfg.num_valid >= cfg.num_utterances {
        return Err(Error::Config(format!(
            "cannot hold out {} of {} utterances",
            cfg.num_valid, cfg.num_utterances
        )));
    }
    let audio_dir = out_dir.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    for tag in &cfg.source_tags {
        let d = out_dir.join("feats").join(tag);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    if cfg.letters_per_tone == 0 || cfg.letters_per_tone > 2 {
        return Err(Error::Config(format!(
            "letters_per_tone must be 1 or 2, got {}",
            cfg.letters_per_tone
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    let mut transcripts = Vec::new();
    for i in 0..cfg.num_utterances {
        let id = format!("toy{i:03}");
        let transcript = if cfg.letters_per_tone == 1 && cfg.aligned_features {
            // every utterance shares one fixed tone ladder, so the audio
            // carries timing only and the letters exist solely in the
            // cached features — reading them out demands aligned attention
            (0..ALIGNED_FIXED_WORDS)
                .map(|_| {
                    let letter = (b'a' + rng.gen_range(0..ALIGNED_CODE_DIMS) as u8) as char;
                    letter.to_string()
                })
                .collect::<Vec<_>>()
                .join(" ")
        } else if cfg.letters_per_tone == 1 {
            // distinct letters per utterance keep each word's tone unambiguous
            let n_words = rng.gen_range(3..=6);
            let mut tones: Vec<usize> = (0..DISTINCT_TONES).collect();
            tones.shuffle(&mut rng);
            tones[..n_words]
                .iter()
                .map(|&tone| letter_for(tone, 0, 1).to_string())
                .collect::<Vec<_>>()
                .join(" ")
        } else {
            // each chosen tone sounds twice, once per letter sharing it, so
            // the audio fixes everything except which occurrence is which
            // letter — that bit exists only in the cached features
            let n_tones = rng.gen_range(2..=3);
            let mut tones: Vec<usize> = (0..SHARED_TONES).collect();
            tones.shuffle(&mut rng);
            let mut words: Vec<(usize, usize)> = Vec::new();
            for &tone in &tones[..n_tones] {
                let first = rng.gen_range(0..2);
                words.push((tone, first));
                words.push((tone, 1 - first));
            }
            // forbid same-tone adjacency so every word boundary stays audible
            loop {
                words.shuffle(&mut rng);
                if words.windows(2).all(|w| w[0].0 != w[1].0) {
                    break;
                }
            }
            words
                .iter()
                .map(|&(tone, member)| letter_for(tone, member, cfg.letters_per_tone).to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };

        let audio_rel = PathBuf::from("audio").join(format!("{id}.wav"));
        let audio_abs = out_dir.join(&audio_rel);
        let rendered = if cfg.letters_per_tone == 1 && cfg.aligned_features {
            render_fixed_ladder(ALIGNED_FIXED_WORDS, cfg.sample_rate)
        } else {
            render_transcript(&transcript, cfg.sample_rate, cfg.letters_per_tone)
        };
        write_wav(&audio_abs, &rendered)?;
        // features derive from the quantized samples on disk, so the cache
        // agrees with what any later reader of the WAV sees
        let quantized = read_wav(&audio_abs)?;

        let mut feature_paths = Vec::new();
        for (k, tag) in cfg.source_tags.iter().enumerate() {
            // distinct noise per source, shared content channel
            let src_cfg = SynthConfig { seed: cfg.ssl.seed.wrapping_add(k as u64), ..cfg.ssl };
            let mut seq = if cfg.aligned_features {
                aligned_features(&id, &transcript, &quantized, &src_cfg)?
            } else {
                synth_features_from_audio(&id, &quantized, &src_cfg)?
            };
            seq.source_tag = tag.clone();
            let feat_rel = PathBuf::from("feats").join(tag).join(format!("{id}.ssf1"));
            write_features(&seq, &out_dir.join(&feat_rel))?;
            feature_paths.push(feat_rel);
        }

        records.push(UtteranceRecord {
            utterance_id: id.clone(),
            audio_path: audio_rel,
            transcript: transcript.clone(),
            feature_paths,
        });
        transcripts.push((id, transcript));
    }

    let split = cfg.num_utterances - cfg.num_valid;
    let train_manifest = out_dir.join("train.tsv");
    let valid_manifest = out_dir.join("valid.tsv");
    write_manifest(&train_manifest, &records[..split])?;
    write_manifest(&valid_manifest, &records[split..])?;
    Ok(ToyCorpus { train_manifest, valid_manifest, transcripts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{read_manifest, validate_manifest};
    use crate::ssl::read_features;

    fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                    out.push((rel, fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = ToyCorpusConfig::default();
        gen_toy_corpus(d1.path(), &cfg).unwrap();
        gen_toy_corpus(d2.path(), &cfg).unwrap();
        assert_eq!(tree_bytes(d1.path()), tree_bytes(d2.path()));
    }

    #[test]
    fn manifests_validate_cleanly_and_split_16_4() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyCorpusConfig::default();
        let corpus = gen_toy_corpus(dir.path(), &cfg).unwrap();
        let train = read_manifest(&corpus.train_manifest).unwrap();
        let valid = read_manifest(&corpus.valid_manifest).unwrap();
        assert_eq!(train.records.len(), 16);
        assert_eq!(valid.records.len(), 4);
        let sources: Vec<(String, Option<usize>)> =
            cfg.source_tags.iter().map(|t| (t.clone(), Some(cfg.ssl.dim))).collect();
        assert!(validate_manifest(&train, &sources).is_empty());
        assert!(validate_manifest(&valid, &sources).is_empty());
    }

    #[test]
    fn feature_length_matches_stride_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyCorpusConfig::default();
        let corpus = gen_toy_corpus(dir.path(), &cfg).unwrap();
        let m = read_manifest(&corpus.train_manifest).unwrap();
        for r in &m.records {
            let audio = read_wav(&m.audio_path(r)).unwrap();
            let seq = read_features(&m.feature_path(r, 0), &r.utterance_id, "synthetic").unwrap();
            assert_eq!(seq.frames.rows(), audio.samples.len() / cfg.ssl.stride);
            assert_eq!(seq.frames.cols(), cfg.ssl.dim);
        }
    }

    #[test]
    fn transcripts_are_three_to_six_distinct_letter_words() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = gen_toy_corpus(dir.path(), &ToyCorpusConfig::default()).unwrap();
        assert_eq!(corpus.transcripts.len(), 20);
        for (_, text) in &corpus.transcripts {
            let words: Vec<&str> = text.split_whitespace().collect();
            assert!((3..=6).contains(&words.len()));
            let mut sorted = words.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), words.len(), "repeated word in {text:?}");
            for w in words {
                assert_eq!(w.len(), 1);
                assert!(('a'..='h').contains(&w.chars().next().unwrap()));
            }
        }
    }
}
