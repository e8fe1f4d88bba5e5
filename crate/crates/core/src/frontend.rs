//! Waveform loading, log-mel filterbank extraction, and speed perturbation.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Input("waveform sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::Input("waveform has no samples".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub pre_emphasis: f64,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate: 16_000,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 80,
            pre_emphasis: 0.97,
            log_floor: 1e-10,
        }
    }
}

impl FrontendConfig {
    pub fn window_samples(&self) -> usize {
        (self.sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }
}

/// Read a single-channel 16-bit PCM WAV file, samples scaled to [-1, 1].
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "{}: expected 16-bit signed PCM, found {:?} {}-bit",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let samples: Vec<f64> = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Waveform::new(samples, spec.sample_rate)
}

/// Write a waveform as single-channel 16-bit PCM, clamping to [-1, 1].
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Convert a mel value back to Hz (HTK convention).
fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

/// Triangular mel filterbank, `n_mels` rows over `n_bins` FFT magnitude bins.
fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let f_max = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(f_max);
    // n_mels + 2 equally spaced mel points from 0 to Nyquist
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let hz_per_bin = sample_rate as f64 / n_fft as f64;
    let mut bank = vec![vec![0.0; n_bins]; n_mels];
    for m in 0..n_mels {
        let (lo, center, hi) = (points[m], points[m + 1], points[m + 2]);
        for (b, w) in bank[m].iter_mut().enumerate() {
            let f = b as f64 * hz_per_bin;
            if f > lo && f < center {
                *w = (f - lo) / (center - lo);
            } else if f >= center && f < hi {
                *w = (hi - f) / (hi - center);
            }
        }
    }
    bank
}

/// Center frequencies (Hz) of the mel filters; exposed for tests that locate
/// the filter nearest a known tone.
pub fn mel_center_frequencies(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let mel_max = hz_to_mel(sample_rate as f64 / 2.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect()
}

fn next_pow2(n: usize) -> usize {
    let mut p = 1;
    while p < n {
        p *= 2;
    }
    p
}

/// Log-mel filterbank features.
/// Pipeline: pre-emphasis, Hann window, magnitude STFT, mel filterbank,
/// log with floor. T = 1 + floor((num_samples - window) / hop).
pub fn fbank(w: &Waveform, cfg: &FrontendConfig) -> Result<Tensor> {
    let window = cfg.window_samples();
    let hop = cfg.hop_samples();
    if w.samples.len() < window {
        return Err(Error::Input(format!(
            "waveform of {} samples is shorter than one {window}-sample analysis window",
            w.samples.len()
        )));
    }
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::Input(format!(
            "waveform sample rate {} does not match configured {}",
            w.sample_rate, cfg.sample_rate
        )));
    }

    // y[t] = x[t] - pre_emphasis * x[t-1]
    let mut emphasized = Vec::with_capacity(w.samples.len());
    emphasized.push(w.samples[0]);
    for t in 1..w.samples.len() {
        emphasized.push(w.samples[t] - cfg.pre_emphasis * w.samples[t - 1]);
    }

    let hann: Vec<f64> = (0..window)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / window as f64).cos())
        .collect();

    let n_fft = next_pow2(window);
    let n_bins = n_fft / 2 + 1;
    let bank = mel_filterbank(cfg.n_mels, n_fft, cfg.sample_rate);

    let t_frames = 1 + (w.samples.len() - window) / hop;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut frames = vec![0.0; t_frames * cfg.n_mels];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for t in 0..t_frames {
        let start = t * hop;
        for i in 0..n_fft {
            let v = if i < window { emphasized[start + i] * hann[i] } else { 0.0 };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        let mags: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm()).collect();
        for (m, filt) in bank.iter().enumerate() {
            let energy: f64 = filt.iter().zip(&mags).map(|(a, b)| a * b).sum();
            frames[t * cfg.n_mels + m] = energy.max(cfg.log_floor).ln();
        }
    }
    Tensor::new(vec![t_frames, cfg.n_mels], frames)
}

/// Linear-interpolation resampling; the output plays `factor` times faster.
/// Output length = round(len / factor); factor 1.0 returns the input.
pub fn speed_perturb(w: &Waveform, factor: f64) -> Result<Waveform> {
    if !(factor > 0.0) {
        return Err(Error::Input(format!("speed factor must be positive, got {factor}")));
    }
    if factor == 1.0 {
        return Ok(w.clone());
    }
    let n = w.samples.len();
    let out_len = (n as f64 / factor).round() as usize;
    if out_len == 0 {
        return Err(Error::Input("speed perturbation would produce an empty waveform".into()));
    }
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = i as f64 * factor;
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        let s = if lo + 1 < n {
            w.samples[lo] * (1.0 - frac) + w.samples[lo + 1] * frac
        } else {
            w.samples[n - 1]
        };
        out.push(s);
    }
    Waveform::new(out, w.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64, rate: u32, amp: f64) -> Waveform {
        let n = (secs * rate as f64).round() as usize;
        let samples = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
            .collect();
        Waveform::new(samples, rate).unwrap()
    }

    #[test]
    fn silence_hits_the_log_floor_everywhere() {
        let w = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        let cfg = FrontendConfig::default();
        let f = fbank(&w, &cfg).unwrap();
        let floor = cfg.log_floor.ln();
        assert!(f.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn one_second_at_sixteen_khz_yields_98_frames() {
        let w = tone(440.0, 1.0, 16_000, 0.5);
        let f = fbank(&w, &FrontendConfig::default()).unwrap();
        assert_eq!(f.shape(), &[98, 80]);
    }

    #[test]
    fn pure_tone_peaks_in_the_filter_nearest_its_frequency() {
        let cfg = FrontendConfig::default();
        let w = tone(440.0, 1.0, 16_000, 0.5);
        let f = fbank(&w, &cfg).unwrap();
        let centers = mel_center_frequencies(cfg.n_mels, cfg.sample_rate);
        let want = centers
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - 440.0).abs().partial_cmp(&(b.1 - 440.0).abs()).unwrap()
            })
            .unwrap()
            .0;
        for t in 0..f.rows() {
            let row = f.row(t);
            let got = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(got, want, "frame {t}: argmax bin {got}, expected {want}");
        }
    }

    #[test]
    fn fbank_is_deterministic() {
        let w = tone(440.0, 0.5, 16_000, 0.5);
        let cfg = FrontendConfig::default();
        let a = fbank(&w, &cfg).unwrap();
        let b = fbank(&w, &cfg).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn frame_count_is_monotone_in_audio_length() {
        let cfg = FrontendConfig::default();
        let mut prev = 0;
        for n in [400, 480, 560, 1000, 4000, 16_000] {
            let w = Waveform::new(vec![0.01; n], 16_000).unwrap();
            let t = fbank(&w, &cfg).unwrap().rows();
            assert!(t >= prev, "{n} samples gave {t} frames after {prev}");
            prev = t;
        }
    }

    #[test]
    fn no_output_below_log_floor() {
        let w = tone(1234.0, 0.3, 16_000, 1e-6);
        let cfg = FrontendConfig::default();
        let f = fbank(&w, &cfg).unwrap();
        assert!(f.data().iter().all(|&v| v >= cfg.log_floor.ln()));
        assert!(f.all_finite());
    }

    #[test]
    fn too_short_waveform_is_rejected() {
        let w = Waveform::new(vec![0.1; 100], 16_000).unwrap();
        assert!(matches!(fbank(&w, &FrontendConfig::default()), Err(Error::Input(_))));
    }

    #[test]
    fn speed_factor_one_is_identity() {
        let w = tone(440.0, 0.1, 16_000, 0.5);
        let p = speed_perturb(&w, 1.0).unwrap();
        assert_eq!(p.samples, w.samples);
    }

    #[test]
    fn speed_factor_point_nine_lengthens_900_to_1000() {
        let w = Waveform::new(vec![0.1; 900], 16_000).unwrap();
        let p = speed_perturb(&w, 0.9).unwrap();
        assert_eq!(p.samples.len(), 1000);
    }

    #[test]
    fn speed_perturbation_shifts_pitch_by_the_factor() {
        let w = tone(440.0, 1.0, 16_000, 0.5);
        let p = speed_perturb(&w, 1.1).unwrap();
        // locate the dominant FFT bin of the perturbed signal
        let n_fft = 16_384;
        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(n_fft);
        let mut buf: Vec<Complex<f64>> = (0..n_fft)
            .map(|i| Complex::new(if i < p.samples.len() { p.samples[i] } else { 0.0 }, 0.0))
            .collect();
        fft.process(&mut buf);
        let peak = buf[..n_fft / 2]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm().partial_cmp(&b.1.norm()).unwrap())
            .unwrap()
            .0;
        let hz_per_bin = 16_000.0 / n_fft as f64;
        let dominant = peak as f64 * hz_per_bin;
        assert!(
            (dominant - 484.0).abs() <= hz_per_bin,
            "dominant frequency {dominant} Hz, expected 484 Hz within one bin"
        );
    }

    #[test]
    fn non_positive_speed_factor_is_rejected() {
        let w = Waveform::new(vec![0.1; 100], 16_000).unwrap();
        assert!(matches!(speed_perturb(&w, 0.0), Err(Error::Input(_))));
        assert!(matches!(speed_perturb(&w, -1.0), Err(Error::Input(_))));
    }

    #[test]
    fn wav_roundtrip_preserves_quantized_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let w = tone(440.0, 0.05, 16_000, 0.5);
        write_wav(&path, &w).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.sample_rate, 16_000);
        assert_eq!(r.samples.len(), w.samples.len());
        // 16-bit quantization error bound
        for (a, b) in r.samples.iter().zip(&w.samples) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
    }

    #[test]
    fn stereo_wav_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..100 {
            writer.write_sample(0i16).unwrap();
            writer.write_sample(0i16).unwrap();
        }
        writer.finalize().unwrap();
        assert!(matches!(read_wav(&path), Err(Error::Format(_))));
    }
}
