//! Utterance manifests: tab-separated text listing audio, transcript, and one
//! cached-feature path per SSL source. Paths are stored relative to the
//! manifest's own directory so a corpus tree can be moved wholesale.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::ssl;

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub audio_path: PathBuf,
    pub transcript: String,
    pub feature_paths: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
    /// Directory all relative paths resolve against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn audio_path(&self, r: &UtteranceRecord) -> PathBuf {
        self.base_dir.join(&r.audio_path)
    }

    pub fn feature_path(&self, r: &UtteranceRecord, source: usize) -> PathBuf {
        self.base_dir.join(&r.feature_paths[source])
    }

    /// Number of SSL sources, inferred from the per-record path count.
    pub fn num_sources(&self) -> usize {
        self.records.first().map_or(0, |r| r.feature_paths.len())
    }
}

/// Parse a manifest file. Every line: id, audio_path, transcript, then one
/// feature path per source; the source count must be uniform.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base_dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut n_sources: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 {
            return Err(Error::Format(format!(
                "{}:{}: expected at least id, audio, transcript; got {} columns",
                path.display(),
                lineno + 1,
                cols.len()
            )));
        }
        let sources = cols.len() - 3;
        match n_sources {
            None => n_sources = Some(sources),
            Some(n) if n != sources => {
                return Err(Error::Format(format!(
                    "{}:{}: {} feature columns, earlier records have {}",
                    path.display(),
                    lineno + 1,
                    sources,
                    n
                )));
            }
            _ => {}
        }
        let id = cols[0].to_string();
        if id.is_empty() {
            return Err(Error::Format(format!("{}:{}: empty utterance id", path.display(), lineno + 1)));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::Format(format!(
                "{}:{}: duplicate utterance id {id}",
                path.display(),
                lineno + 1
            )));
        }
        if cols[2].trim().is_empty() {
            return Err(Error::Format(format!(
                "{}:{}: empty transcript for {id}",
                path.display(),
                lineno + 1
            )));
        }
        records.push(UtteranceRecord {
            utterance_id: id,
            audio_path: PathBuf::from(cols[1]),
            transcript: cols[2].to_string(),
            feature_paths: cols[3..].iter().map(PathBuf::from).collect(),
        });
    }
    Ok(Manifest { records, base_dir })
}

pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.utterance_id);
        out.push('\t');
        out.push_str(&r.audio_path.to_string_lossy());
        out.push('\t');
        out.push_str(&r.transcript);
        for f in &r.feature_paths {
            out.push('\t');
            out.push_str(&f.to_string_lossy());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct ValidationIssue {
    pub utterance_id: String,
    pub message: String,
}

/// Per-record integrity report: audio existence, feature readability, and
/// header dims. An empty report means valid. Each source pairs its tag with
/// an optional expected width; `None` falls back to the tag registry, and an
/// unregistered tag then goes unchecked.
pub fn validate_manifest(m: &Manifest, sources: &[(String, Option<usize>)]) -> Vec<ValidationIssue> {
    let mut issues = Vec::new();
    for r in &m.records {
        let flag = |issues: &mut Vec<ValidationIssue>, msg: String| {
            issues.push(ValidationIssue { utterance_id: r.utterance_id.clone(), message: msg });
        };
        if !m.audio_path(r).is_file() {
            flag(&mut issues, format!("audio file absent: {}", r.audio_path.display()));
        }
        if r.feature_paths.len() != sources.len() {
            flag(
                &mut issues,
                format!(
                    "{} feature paths for {} configured sources",
                    r.feature_paths.len(),
                    sources.len()
                ),
            );
            continue;
        }
        for (i, (tag, dim)) in sources.iter().enumerate() {
            let p = m.feature_path(r, i);
            if !p.is_file() {
                flag(&mut issues, format!("feature file absent: {}", r.feature_paths[i].display()));
                continue;
            }
            match ssl::read_features(&p, &r.utterance_id, tag) {
                Err(e) => flag(&mut issues, format!("unreadable feature file: {e}")),
                Ok(seq) => {
                    if let Some(want) = dim.or_else(|| ssl::expected_dim(tag)) {
                        let got = seq.frames.cols();
                        if got != want {
                            flag(
                                &mut issues,
                                format!("dimension mismatch (expected {want}, found {got}) for source {tag}"),
                            );
                        }
                    }
                }
            }
        }
    }
    issues
}
