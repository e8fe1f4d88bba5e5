//! Command-line surface: feature cache tooling, the audio frontend, training,
//! decoding, scoring, attention export, and parameter accounting.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error.
//! Results go to stdout as tab-separated text; diagnostics go to stderr.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sslfuse_core::corpus::{gen_toy_corpus, ToyCorpusConfig};
use sslfuse_core::frontend::{fbank, read_wav, FrontendConfig};
use sslfuse_core::manifest::{read_manifest, validate_manifest, write_manifest, Manifest, UtteranceRecord};
use sslfuse_core::model::fusion::write_attention_csv;
use sslfuse_core::model::{expected_param_counts, recognize, FusionMode};
use sslfuse_core::ssl::{expected_dim, synth_features_from_audio, write_features, SynthConfig};
use sslfuse_core::train::{
    load_dataset, model_from_checkpoint, train, transcribe, LoadedUtterance, TrainConfig,
};
use sslfuse_core::wer::{wer, WerBreakdown};
use sslfuse_core::vocab;

#[derive(Parser)]
#[command(
    name = "sslfuse",
    version,
    about = "Joint CTC-attention speech recognizer fusing cached SSL features into a conformer encoder"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Feature cache tooling: synthesize or validate SSF1 files.
    #[command(subcommand)]
    Features(FeaturesCmd),
    /// Log-mel filterbank matrix of one WAV file.
    Fbank(FbankArgs),
    /// Train a recognizer and keep the best-by-validation checkpoint.
    Train(TrainArgs),
    /// Greedy-decode every utterance in a manifest with a checkpoint.
    Decode(DecodeArgs),
    /// Score a hypothesis file against a reference file.
    Score(ScoreArgs),
    /// Export the fusion attention matrices of one utterance as CSV.
    AttnDump(AttnDumpArgs),
    /// Closed-form parameter accounting for a model configuration.
    Params(ParamsArgs),
    /// Generate the deterministic sinusoid toy corpus.
    GenCorpus(GenCorpusArgs),
}

#[derive(Subcommand)]
enum FeaturesCmd {
    /// Write deterministic synthetic caches for every utterance in a manifest.
    Synth(SynthArgs),
    /// Check audio presence, cache readability, and feature widths.
    Validate(ValidateArgs),
}

/// A feature source named on the command line: `tag:width`, or a bare tag
/// whose width the registry knows (w2v-base, hubert-base, hubert-large).
#[derive(Clone, Debug)]
struct SourceSpec {
    tag: String,
    dim: usize,
}

fn parse_source(s: &str) -> std::result::Result<SourceSpec, String> {
    if let Some((tag, dim)) = s.split_once(':') {
        if tag.is_empty() {
            return Err(format!("empty tag in {s:?}"));
        }
        let dim: usize = dim.parse().map_err(|_| format!("bad width in {s:?}"))?;
        if dim == 0 {
            return Err(format!("width must be positive in {s:?}"));
        }
        Ok(SourceSpec { tag: tag.to_string(), dim })
    } else if let Some(dim) = expected_dim(s) {
        Ok(SourceSpec { tag: s.to_string(), dim })
    } else {
        Err(format!("unknown source tag {s:?}; write tag:width, e.g. {s}:768"))
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Repeatable; one cache directory per source.
    #[arg(long = "ssl-source", value_parser = parse_source, required = true)]
    sources: Vec<SourceSpec>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Waveform samples per feature frame.
    #[arg(long, default_value_t = 320)]
    stride: usize,
    /// Leading dims carrying standardized log-mel content; 0 = pure noise.
    #[arg(long, default_value_t = 0)]
    content_bins: usize,
    #[arg(long, default_value_t = 0.8)]
    content_mix: f64,
    /// Trailing dims carrying frame-time sinusoids.
    #[arg(long, default_value_t = 0)]
    positional_dims: usize,
    /// Samples per unit of positional phase.
    #[arg(long, default_value_t = 320)]
    positional_unit: usize,
    /// Output directory; also receives a manifest referencing the caches.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long = "ssl-source", value_parser = parse_source, required = true)]
    sources: Vec<SourceSpec>,
}

#[derive(Args)]
struct FbankArgs {
    #[arg(long)]
    wav: PathBuf,
    #[arg(long, default_value_t = 80)]
    mels: usize,
    /// Write the matrix here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Validation manifest, scored every epoch.
    #[arg(long)]
    valid_manifest: PathBuf,
    /// key=value lines overriding training and model defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fusion mode: none, sfa, ca, or multi-ca.
    #[arg(long)]
    mode: Option<String>,
    /// Repeatable; order must match the manifest's feature columns.
    #[arg(long = "ssl-source", value_parser = parse_source)]
    sources: Vec<SourceSpec>,
    /// Best-by-validation-loss checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Also append per-epoch reports to this file.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which hypotheses to emit: attention (default) or ctc.
    #[arg(long, default_value = "attention")]
    head: String,
    /// Write "id<TAB>text" lines here as well as stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Reference file, one "id<TAB>text" line per utterance.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Hypothesis file in the same format; missing ids score as deletions.
    #[arg(long)]
    hyp: PathBuf,
}

#[derive(Args)]
struct AttnDumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    utterance: String,
    /// CSV path; multi-source checkpoints add a .srcK suffix per source.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ParamsArgs {
    /// key=value lines overriding model defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    /// Repeatable; defaults to 768-wide sources when the mode needs them.
    #[arg(long = "ssl-source", value_parser = parse_source)]
    sources: Vec<SourceSpec>,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    utterances: usize,
    /// Trailing utterances held out for validation.
    #[arg(long, default_value_t = 4)]
    valid: usize,
    /// Repeatable; every source must share one width.
    #[arg(long = "ssl-source", value_parser = parse_source)]
    sources: Vec<SourceSpec>,
    #[arg(long, default_value_t = 160)]
    stride: usize,
    #[arg(long, default_value_t = 24)]
    content_bins: usize,
    #[arg(long, default_value_t = 0.8)]
    content_mix: f64,
    /// Trailing dims carrying frame-time sinusoids.
    #[arg(long, default_value_t = 24)]
    positional_dims: usize,
    /// Samples per unit of positional phase.
    #[arg(long, default_value_t = 320)]
    positional_unit: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Features(FeaturesCmd::Synth(a)) => features_synth(a),
        Cmd::Features(FeaturesCmd::Validate(a)) => features_validate(a),
        Cmd::Fbank(a) => fbank_cmd(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Decode(a) => decode_cmd(a),
        Cmd::Score(a) => score_cmd(a),
        Cmd::AttnDump(a) => attn_dump_cmd(a),
        Cmd::Params(a) => params_cmd(a),
        Cmd::GenCorpus(a) => gen_corpus_cmd(a),
    }
}

fn features_synth(a: SynthArgs) -> Result<()> {
    let m = read_manifest(&a.manifest)?;
    let mut out_records = Vec::with_capacity(m.records.len());
    for r in &m.records {
        let audio_abs = m.audio_path(r);
        let audio = read_wav(&audio_abs)?;
        let mut feature_paths = Vec::with_capacity(a.sources.len());
        for (k, src) in a.sources.iter().enumerate() {
            let cfg = SynthConfig {
                dim: src.dim,
                stride: a.stride,
                // one noise stream per source so caches differ
                seed: a.seed.wrapping_add(k as u64),
                content_bins: a.content_bins,
                content_mix: a.content_mix,
                positional_dims: a.positional_dims,
                positional_unit: a.positional_unit,
            };
            let mut seq = synth_features_from_audio(&r.utterance_id, &audio, &cfg)?;
            seq.source_tag = src.tag.clone();
            let rel = PathBuf::from(&src.tag).join(format!("{}.ssf1", r.utterance_id));
            let abs = a.out.join(&rel);
            if let Some(dir) = abs.parent() {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            write_features(&seq, &abs)?;
            println!(
                "{}\t{}\t{}\t{}",
                r.utterance_id,
                rel.display(),
                seq.frames.rows(),
                seq.frames.cols()
            );
            feature_paths.push(rel);
        }
        out_records.push(UtteranceRecord {
            utterance_id: r.utterance_id.clone(),
            // the new manifest lives in the output dir, so point at the
            // original audio absolutely
            audio_path: audio_abs,
            transcript: r.transcript.clone(),
            feature_paths,
        });
    }
    let out_manifest = a.out.join("manifest.tsv");
    write_manifest(&out_manifest, &out_records)?;
    eprintln!(
        "wrote {} caches for {} utterances; manifest {}",
        a.sources.len() * out_records.len(),
        out_records.len(),
        out_manifest.display()
    );
    Ok(())
}

fn features_validate(a: ValidateArgs) -> Result<()> {
    let m = read_manifest(&a.manifest)?;
    let sources: Vec<(String, Option<usize>)> =
        a.sources.iter().map(|s| (s.tag.clone(), Some(s.dim))).collect();
    let issues = validate_manifest(&m, &sources);
    for issue in &issues {
        println!("{}\t{}", issue.utterance_id, issue.message);
    }
    if issues.is_empty() {
        println!("ok\t{}", m.records.len());
        Ok(())
    } else {
        bail!("{} validation issues in {}", issues.len(), a.manifest.display());
    }
}

fn fbank_cmd(a: FbankArgs) -> Result<()> {
    let audio = read_wav(&a.wav)?;
    let cfg = FrontendConfig { n_mels: a.mels, ..FrontendConfig::default() };
    let feats = fbank(&audio, &cfg)?;
    let mut text = format!("{}\t{}\n", feats.rows(), feats.cols());
    for i in 0..feats.rows() {
        let row: Vec<String> = feats.row(i).iter().map(|v| format!("{v:.17e}")).collect();
        let _ = writeln!(text, "{}", row.join("\t"));
    }
    match &a.out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Shared config assembly: defaults, then the config file, then flags.
fn build_train_config(
    config: Option<&Path>,
    seed: Option<u64>,
    mode: Option<&str>,
    sources: &[SourceSpec],
) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = config {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                anyhow!("{}:{}: expected key=value, got {line:?}", path.display(), lineno + 1)
            })?;
            cfg.apply_kv(k.trim(), v.trim())?;
        }
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(mode) = mode {
        cfg.model.fusion.mode = FusionMode::parse(mode)?;
    }
    if !sources.is_empty() {
        cfg.source_tags = sources.iter().map(|s| s.tag.clone()).collect();
        cfg.model.fusion.ssl_dims = sources.iter().map(|s| s.dim).collect();
    }
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = build_train_config(a.config.as_deref(), a.seed, a.mode.as_deref(), &a.sources)?;
    cfg.validate()?;
    let train_manifest = read_manifest(&a.manifest)?;
    let valid_manifest = read_manifest(&a.valid_manifest)?;
    let train_set = load_dataset(&train_manifest, &cfg)?;
    let valid_set = load_dataset(&valid_manifest, &cfg)?;
    eprintln!(
        "training on {} utterances, validating on {}, mode {}",
        train_set.len(),
        valid_set.len(),
        cfg.model.fusion.mode.as_str()
    );

    let mut log_file = match &a.log {
        Some(path) => Some(
            fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
        ),
        None => None,
    };
    let outcome = train(&train_set, &valid_set, &cfg, Some(&a.out), |report| {
        println!("{}", report.tsv_line());
        if let Some(f) = log_file.as_mut() {
            use std::io::Write as _;
            let _ = writeln!(f, "{}", report.tsv_line());
        }
    })?;
    eprintln!(
        "best epoch {} (validation loss {:.6}); checkpoint {}",
        outcome.best_epoch,
        outcome.best_val_loss,
        a.out.display()
    );
    Ok(())
}

/// Loads a checkpoint plus the utterances it can decode.
fn load_model_and_set(
    checkpoint: &Path,
    manifest: &Path,
) -> Result<(sslfuse_core::model::Model, Vec<LoadedUtterance>)> {
    let ckpt = sslfuse_core::checkpoint::load_checkpoint(checkpoint)?;
    let model = model_from_checkpoint(&ckpt)?;
    // tags only label error messages here; column order is what binds
    // manifest features to fusion sources
    let cfg = TrainConfig {
        model: model.cfg.clone(),
        source_tags: (0..model.cfg.fusion.ssl_dims.len()).map(|k| format!("src{k}")).collect(),
        ..TrainConfig::default()
    };
    let m = read_manifest(manifest)?;
    let set = load_dataset(&m, &cfg)?;
    Ok((model, set))
}

fn decode_cmd(a: DecodeArgs) -> Result<()> {
    if a.head != "attention" && a.head != "ctc" {
        bail!("unknown head {:?}; use attention or ctc", a.head);
    }
    let (model, set) = load_model_and_set(&a.checkpoint, &a.manifest)?;
    let mut lines = String::new();
    for u in &set {
        let text = if a.head == "attention" {
            transcribe(&model, u)?
        } else {
            let rec = recognize(&model, &u.fbank, &u.ssl, u.fbank.rows() / 2 + 10)?;
            vocab::decode(&rec.ctc_tokens)?
        };
        let _ = writeln!(lines, "{}\t{}", u.id, text);
    }
    print!("{lines}");
    if let Some(path) = &a.out {
        fs::write(path, &lines).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn read_id_text_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        match line.split_once('\t') {
            Some((id, t)) => out.push((id.to_string(), t.to_string())),
            None => out.push((line.to_string(), String::new())),
        }
    }
    Ok(out)
}

fn score_cmd(a: ScoreArgs) -> Result<()> {
    let refs = read_id_text_file(&a.reference)?;
    let hyps = read_id_text_file(&a.hyp)?;
    let mut hyp_map: HashMap<&str, &str> = HashMap::new();
    for (id, text) in &hyps {
        if hyp_map.insert(id, text).is_some() {
            bail!("duplicate hypothesis id {id:?}");
        }
    }
    let mut seen = std::collections::HashSet::new();
    let mut corpus = WerBreakdown::default();
    for (id, reference) in &refs {
        if !seen.insert(id.as_str()) {
            bail!("duplicate reference id {id:?}");
        }
        let hyp = hyp_map.remove(id.as_str()).unwrap_or("");
        let b = wer(reference, hyp)?;
        println!(
            "{id}\t{:.6}\t{}\t{}\t{}\t{}",
            b.rate(),
            b.substitutions,
            b.deletions,
            b.insertions,
            b.reference_words
        );
        corpus.absorb(&b);
    }
    if let Some(id) = hyp_map.keys().next() {
        bail!("hypothesis id {id:?} is not in the reference file");
    }
    println!(
        "corpus\t{:.6}\t{}\t{}\t{}\t{}",
        corpus.rate(),
        corpus.substitutions,
        corpus.deletions,
        corpus.insertions,
        corpus.reference_words
    );
    Ok(())
}

fn attn_dump_cmd(a: AttnDumpArgs) -> Result<()> {
    let ckpt = sslfuse_core::checkpoint::load_checkpoint(&a.checkpoint)?;
    let model = model_from_checkpoint(&ckpt)?;
    match model.cfg.fusion.mode {
        FusionMode::Ca | FusionMode::MultiCa => {}
        other => bail!("no attention in {} mode", other.as_str()),
    }
    let m = read_manifest(&a.manifest)?;
    let record = m
        .records
        .iter()
        .find(|r| r.utterance_id == a.utterance)
        .ok_or_else(|| anyhow!("utterance {:?} is not in the manifest", a.utterance))?;
    let one = Manifest { records: vec![record.clone()], base_dir: m.base_dir.clone() };
    let cfg = TrainConfig {
        model: model.cfg.clone(),
        source_tags: (0..model.cfg.fusion.ssl_dims.len()).map(|k| format!("src{k}")).collect(),
        ..TrainConfig::default()
    };
    let set = load_dataset(&one, &cfg)?;
    let u = &set[0];
    let rec = recognize(&model, &u.fbank, &u.ssl, u.fbank.rows() / 2 + 10)?;
    if rec.attention.is_empty() {
        bail!("model produced no attention export");
    }
    for (k, export) in rec.attention.iter().enumerate() {
        let path = if rec.attention.len() == 1 {
            a.out.clone()
        } else {
            // ark.csv -> ark.src0.csv, ark.src1.csv, ...
            match a.out.extension() {
                Some(ext) => a.out.with_extension(format!("src{k}.{}", ext.to_string_lossy())),
                None => a.out.with_extension(format!("src{k}")),
            }
        };
        write_attention_csv(&path, &u.id, export)?;
        println!(
            "{}\t{}\t{}\t{}",
            export.source_tag,
            path.display(),
            export.weights.rows(),
            export.weights.cols()
        );
    }
    Ok(())
}

fn params_cmd(a: ParamsArgs) -> Result<()> {
    let mut cfg = build_train_config(a.config.as_deref(), None, a.mode.as_deref(), &a.sources)?;
    // modes that fuse need source widths; default to the common 768
    if cfg.model.fusion.ssl_dims.is_empty() {
        cfg.model.fusion.ssl_dims = match cfg.model.fusion.mode {
            FusionMode::None => vec![],
            FusionMode::Sfa | FusionMode::Ca => vec![768],
            FusionMode::MultiCa => vec![768, 768],
        };
    }
    cfg.model.validate()?;
    let report = expected_param_counts(&cfg.model);
    println!("subsample\t{}", report.subsample);
    for (k, n) in report.fusion_per_source.iter().enumerate() {
        println!("fusion.src{k}\t{n}");
    }
    println!("fusion\t{}", report.fusion);
    println!("encoder\t{}", report.encoder);
    println!("ctc\t{}", report.ctc);
    println!("decoder\t{}", report.decoder);
    println!("total\t{}", report.total);
    Ok(())
}

fn gen_corpus_cmd(a: GenCorpusArgs) -> Result<()> {
    let sources = if a.sources.is_empty() {
        vec![SourceSpec { tag: "synthetic".to_string(), dim: 64 }]
    } else {
        a.sources.clone()
    };
    let dim = sources[0].dim;
    if sources.iter().any(|s| s.dim != dim) {
        bail!("toy corpus sources must share one width");
    }
    let cfg = ToyCorpusConfig {
        seed: a.seed,
        num_utterances: a.utterances,
        num_valid: a.valid,
        source_tags: sources.iter().map(|s| s.tag.clone()).collect(),
        ssl: SynthConfig {
            dim,
            stride: a.stride,
            seed: a.seed,
            content_bins: a.content_bins,
            content_mix: a.content_mix,
            positional_dims: a.positional_dims,
            positional_unit: a.positional_unit,
        },
        ..ToyCorpusConfig::default()
    };
    let corpus = gen_toy_corpus(&a.out, &cfg)?;
    println!("train\t{}", corpus.train_manifest.display());
    println!("valid\t{}", corpus.valid_manifest.display());
    for (id, text) in &corpus.transcripts {
        println!("{id}\t{text}");
    }
    Ok(())
}
