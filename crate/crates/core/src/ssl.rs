//! Bit-exact cache of precomputed SSL speech representations, plus a
//! deterministic synthetic generator used as a stand-in extractor in tests
//! and the toy corpus.
//!
//! File format "SSF1", little-endian:
//!   bytes 0-3   magic "SSF1"
//!   bytes 4-5   version, u16 = 1
//!   bytes 6-7   reserved, zero
//!   bytes 8-11  frame count T', u32
//!   bytes 12-15 feature dim d', u32
//!   bytes 16-31 reserved, zero
//!   then T'*d' IEEE-754 binary32 values, frame-major.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frontend::Waveform;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SSF1";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 32;

#[derive(Debug, Clone)]
pub struct SslSequence {
    pub utterance_id: String,
    pub source_tag: String,
    /// [T', d'] feature matrix.
    pub frames: Tensor,
}

/// Feature dimension implied by a source tag, when the source is a published
/// model with a fixed width. Synthetic sources are free to choose.
pub fn expected_dim(source_tag: &str) -> Option<usize> {
    match source_tag {
        "w2v-base" | "hubert-base" => Some(768),
        "hubert-large" => Some(1024),
        _ => None,
    }
}

/// Serialize to SSF1. Writes a temp file in the target directory and renames,
/// so concurrent readers never observe a partial file.
pub fn write_features(seq: &SslSequence, path: &Path) -> Result<()> {
    let t = seq.frames.rows();
    let d = seq.frames.cols();
    if seq.frames.ndim() != 2 {
        return Err(Error::Shape(format!(
            "feature matrix must be 2-D, got {:?}",
            seq.frames.shape()
        )));
    }
    if t == 0 || d == 0 {
        return Err(Error::Input("refusing to write an empty feature matrix".into()));
    }
    if !seq.frames.all_finite() {
        return Err(Error::Numeric("refusing to write non-finite feature values".into()));
    }
    if t > u32::MAX as usize || d > u32::MAX as usize {
        return Err(Error::Input(format!("feature matrix {t}x{d} exceeds the format's u32 dims")));
    }

    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * t * d);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&[0u8; 2]);
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&[0u8; 16]);
    for &v in seq.frames.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }

    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parse an SSF1 file. Every header field is validated before the payload is
/// touched; corrupt input yields a format error naming the offending field.
pub fn read_features(path: &Path, utterance_id: &str, source_tag: &str) -> Result<SslSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let frames = parse_ssf1(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    Ok(SslSequence {
        utterance_id: utterance_id.to_string(),
        source_tag: source_tag.to_string(),
        frames,
    })
}

/// Header and payload validation on an in-memory SSF1 image.
pub fn parse_ssf1(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "truncated header: {} bytes, need {HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:02x?}", &bytes[0..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    if bytes[6..8].iter().any(|&b| b != 0) || bytes[16..32].iter().any(|&b| b != 0) {
        return Err(Error::Format("reserved header bytes are nonzero".into()));
    }
    let t = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if t == 0 || d == 0 {
        return Err(Error::Format(format!("degenerate dimensions {t}x{d}")));
    }
    let payload = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("dimensions {t}x{d} overflow")))?;
    if bytes.len() != HEADER_LEN + payload {
        return Err(Error::Format(format!(
            "payload length mismatch: header declares {payload} bytes, file carries {}",
            bytes.len() - HEADER_LEN
        )));
    }
    let mut data = Vec::with_capacity(t * d);
    for chunk in bytes[HEADER_LEN..].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Format(format!(
                "non-finite value at element {}",
                data.len()
            )));
        }
        data.push(v as f64);
    }
    Tensor::new(vec![t, d], data)
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub dim: usize,
    /// Samples per output frame.
    pub stride: usize,
    pub seed: u64,
    /// Leading dims that carry a content signal when audio is supplied;
    /// 0 keeps the output pure noise.
    pub content_bins: usize,
    /// Blend weight of the content signal within those dims.
    pub content_mix: f64,
    /// Trailing dims that carry sinusoids of the frame time, the way real
    /// transformer representations encode position; 0 disables the channel.
    pub positional_dims: usize,
    /// Samples per unit of positional phase. Matching the consumer's frame
    /// duration expresses key positions in the consumer's own units, which is
    /// what lets an attention layer align the two streams by position.
    pub positional_unit: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dim: 768,
            stride: 320,
            seed: 0,
            content_bins: 0,
            content_mix: 0.8,
            positional_dims: 0,
            positional_unit: 320,
        }
    }
}

fn fnv1a64(seed: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(id.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Writes the positional channel into the trailing `positional_dims` dims of
/// a [t x dim] row-major buffer, with phase measured in `positional_unit`-
/// sample steps rather than raw frame index.
pub(crate) fn fill_positional_channel(data: &mut [f64], t: usize, cfg: &SynthConfig) {
    let p = cfg.positional_dims;
    for i in 0..t {
        let pos = (i * cfg.stride) as f64 / cfg.positional_unit as f64;
        for j in 0..p {
            let pair = (j / 2) * 2;
            let angle = pos / 10000f64.powf(pair as f64 / p as f64);
            data[i * cfg.dim + (cfg.dim - p + j)] =
                if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
}

/// Deterministic pseudo-features: a pure function of
/// (utterance_id, waveform_len, cfg.dim, cfg.stride, cfg.seed).
pub fn synth_features(utterance_id: &str, waveform_len: usize, cfg: &SynthConfig) -> Result<SslSequence> {
    if cfg.stride == 0 || cfg.dim == 0 {
        return Err(Error::Config("synthetic features need positive stride and dim".into()));
    }
    let t = waveform_len / cfg.stride;
    if t == 0 {
        return Err(Error::Input(format!(
            "waveform of {waveform_len} samples is shorter than one {}-sample stride",
            cfg.stride
        )));
    }
    if cfg.positional_dims > cfg.dim {
        return Err(Error::Config(format!(
            "positional_dims {} exceeds feature dim {}",
            cfg.positional_dims, cfg.dim
        )));
    }
    if cfg.positional_unit == 0 {
        return Err(Error::Config("positional_unit must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(cfg.seed, utterance_id));
    let mut data: Vec<f64> = (0..t * cfg.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    fill_positional_channel(&mut data, t, cfg);
    Ok(SslSequence {
        utterance_id: utterance_id.to_string(),
        source_tag: "synthetic".to_string(),
        frames: Tensor::new(vec![t, cfg.dim], data)?,
    })
}

/// Synthetic features with a content channel: the first `content_bins` dims
/// blend in standardized log-mel energies of the stride-aligned window, so a
/// model can actually learn from the cache. Falls back to pure noise when
/// `content_bins` is 0.
pub fn synth_features_from_audio(utterance_id: &str, w: &Waveform, cfg: &SynthConfig) -> Result<SslSequence> {
    let mut seq = synth_features(utterance_id, w.samples.len(), cfg)?;
    if cfg.content_bins == 0 {
        return Ok(seq);
    }
    if cfg.content_bins + cfg.positional_dims > cfg.dim {
        return Err(Error::Config(format!(
            "content_bins {} plus positional_dims {} exceeds feature dim {}",
            cfg.content_bins, cfg.positional_dims, cfg.dim
        )));
    }
    let t = seq.frames.rows();
    let energies = window_log_mels(w, cfg.stride, cfg.content_bins, t)?;
    // standardize each content column over the utterance so the blend stays O(1)
    let d = cfg.dim;
    for j in 0..cfg.content_bins {
        let col: Vec<f64> = (0..t).map(|i| energies[i * cfg.content_bins + j]).collect();
        let mean = col.iter().sum::<f64>() / t as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
        let std = var.sqrt().max(1e-6);
        for i in 0..t {
            let z = (col[i] - mean) / std;
            let cell = &mut seq.frames.data_mut()[i * d + j];
            *cell = (1.0 - cfg.content_mix) * *cell + cfg.content_mix * z;
        }
    }
    Ok(seq)
}

/// Log-mel energy of each stride-aligned window, [t x bins] row-major.
pub(crate) fn window_log_mels(w: &Waveform, stride: usize, bins: usize, t: usize) -> Result<Vec<f64>> {
    use rustfft::{num_complex::Complex, FftPlanner};
    let mut n_fft = 1;
    while n_fft < stride {
        n_fft *= 2;
    }
    let n_half = n_fft / 2 + 1;
    let centers: Vec<f64> = crate::frontend::mel_center_frequencies(bins + 1, w.sample_rate);
    let hz_per_bin = w.sample_rate as f64 / n_fft as f64;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut out = vec![0.0; t * bins];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for i in 0..t {
        let start = i * stride;
        for k in 0..n_fft {
            let v = if k < stride { w.samples[start + k] } else { 0.0 };
            buf[k] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        // triangular pooling around each center frequency
        for (j, row) in out[i * bins..(i + 1) * bins].iter_mut().enumerate() {
            let lo = if j == 0 { 0.0 } else { centers[j - 1] };
            let c = centers[j];
            let hi = centers[j + 1];
            let mut e = 0.0;
            for (b, cx) in buf[..n_half].iter().enumerate() {
                let f = b as f64 * hz_per_bin;
                let wgt = if f > lo && f < c {
                    (f - lo) / (c - lo)
                } else if f >= c && f < hi {
                    (hi - f) / (hi - c)
                } else {
                    0.0
                };
                e += wgt * cx.norm();
            }
            *row = e.max(1e-10).ln();
        }
    }
    Ok(out)
}
