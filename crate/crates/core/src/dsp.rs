//! Audio I/O, resampling and log-mel extraction.
//!
//! The log-mel transform exists twice: [`mel_spectrogram`] uses an FFT and is
//! what every pipeline stage calls; [`mel_spectrogram_graph`] builds the same
//! transform from DFT matrices on an autodiff [`Graph`] so the vocoder's mel
//! loss can be differentiated with respect to generated audio. Tests pin the
//! two against each other.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

/// Rate every model works at.
pub const PIPELINE_RATE: u32 = 16_000;
/// Rate of the studio recordings before resampling.
pub const RECORDING_RATE: u32 = 48_000;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: unsupported WAV format: {reason}")]
    Format { path: String, reason: String },
    #[error("empty audio")]
    EmptyAudio,
    #[error("audio has {len} samples, shorter than one analysis window of {win}")]
    TooShort { len: usize, win: usize },
    #[error("expected {expected} Hz audio, got {actual} Hz")]
    SampleRate { expected: u32, actual: u32 },
    #[error("invalid mel configuration: {0}")]
    Config(String),
    #[error("invalid mel file: {0}")]
    MelFile(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Samples as an `n × 1` column.
    pub fn to_column(&self) -> Tensor {
        Tensor::from_vec(self.samples.len(), 1, self.samples.clone())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::new(self.samples.iter().map(|x| x * c).collect(), self.sample_rate)
    }
}

/// Reads a 16-bit PCM mono WAV file.
pub fn load_waveform(path: &Path) -> Result<Waveform, DspError> {
    let file = File::open(path).map_err(|e| DspError::Io { path: path.display().to_string(), source: e })?;
    decode_wav(BufReader::new(file), &path.display().to_string())
}

/// Decodes 16-bit PCM mono WAV bytes; `origin` names the source in errors.
pub fn decode_wav<R: Read>(reader: R, origin: &str) -> Result<Waveform, DspError> {
    let format_err = |reason: String| DspError::Format { path: origin.to_string(), reason };
    let mut wav = hound::WavReader::new(reader).map_err(|e| format_err(e.to_string()))?;
    let spec = wav.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(format_err("sample format must be integer PCM".into()));
    }
    if spec.channels != 1 {
        return Err(format_err(format!("must be mono, file has {} channels", spec.channels)));
    }
    if spec.bits_per_sample != 16 {
        return Err(format_err(format!("bit depth must be 16, file has {}", spec.bits_per_sample)));
    }
    let samples = wav
        .samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| format_err(e.to_string()))?;
    if samples.is_empty() {
        return Err(DspError::EmptyAudio);
    }
    Ok(Waveform::new(samples, spec.sample_rate))
}

fn quantize(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes 16-bit PCM mono; samples outside [-1, 1] are clipped.
pub fn write_waveform(path: &Path, w: &Waveform) -> Result<(), DspError> {
    let io = |e: std::io::Error| DspError::Io { path: path.display().to_string(), source: e };
    let file = File::create(path).map_err(io)?;
    let mut out = BufWriter::new(file);
    out.write_all(&encode_wav(w)).map_err(io)?;
    out.flush().map_err(io)
}

pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = std::io::Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut buf, spec).expect("in-memory WAV header");
        for &s in &w.samples {
            writer.write_sample(quantize(s)).expect("in-memory WAV write");
        }
        writer.finalize().expect("in-memory WAV finalize");
    }
    buf.into_inner()
}

/// Zero crossings of the sinc kernel on each side.
const SINC_ZEROS: f64 = 16.0;

/// Band-limited resampling with a Hann-windowed sinc kernel.
///
/// The output has `round(len * target / source)` samples. Kernel weights are
/// renormalized per output sample, so constant signals pass unchanged.
pub fn resample(w: &Waveform, target_rate: u32) -> Waveform {
    assert!(target_rate > 0, "target rate must be positive");
    if target_rate == w.sample_rate {
        return w.clone();
    }
    let ratio = f64::from(target_rate) / f64::from(w.sample_rate);
    let n_out = (w.len() as f64 * ratio).round() as usize;
    // cutoff relative to the input Nyquist
    let cutoff = ratio.min(1.0);
    let half_width = SINC_ZEROS / cutoff;
    let mut out = Vec::with_capacity(n_out);
    for j in 0..n_out {
        let center = j as f64 / ratio;
        let lo = (center - half_width).ceil().max(0.0) as usize;
        let hi = ((center + half_width).floor() as usize).min(w.len().saturating_sub(1));
        let (mut acc, mut norm) = (0.0, 0.0);
        for i in lo..=hi {
            let x = i as f64 - center;
            let win = 0.5 + 0.5 * (PI * x / half_width).cos();
            let arg = cutoff * x;
            let sinc = if arg.abs() < 1e-12 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
            let k = sinc * win;
            acc += k * w.samples[i];
            norm += k;
        }
        out.push(if norm.abs() > 1e-12 { acc / norm } else { 0.0 });
    }
    Waveform::new(out, target_rate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub fft_size: usize,
    pub hop_size: usize,
    pub win_size: usize,
    pub mel_bins: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    pub sample_rate: u32,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            fft_size: 1024,
            hop_size: 256,
            win_size: 1024,
            mel_bins: 80,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-5,
            sample_rate: PIPELINE_RATE,
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelConfig {
    pub fn validate(&self) -> Result<(), DspError> {
        let bad = |m: &str| Err(DspError::Config(m.to_string()));
        if self.hop_size == 0 || self.hop_size > self.win_size || self.win_size > self.fft_size {
            return bad("need 0 < hop_size <= win_size <= fft_size");
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= f64::from(self.sample_rate) / 2.0) {
            return bad("need 0 <= fmin < fmax <= sample_rate/2");
        }
        if self.mel_bins == 0 {
            return bad("mel_bins must be >= 1");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        Ok(())
    }

    pub fn n_freq_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count under the no-padding convention.
    pub fn n_frames(&self, len: usize) -> Option<usize> {
        (len >= self.win_size).then(|| 1 + (len - self.win_size) / self.hop_size)
    }

    /// `mel_bins + 2` band edges evenly spaced on the mel scale.
    fn mel_points_hz(&self) -> Vec<f64> {
        let (lo, hi) = (hz_to_mel(self.fmin), hz_to_mel(self.fmax));
        let n = self.mel_bins + 2;
        (0..n).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n - 1) as f64)).collect()
    }

    /// Center frequency of each mel filter in Hz.
    pub fn center_frequencies(&self) -> Vec<f64> {
        let pts = self.mel_points_hz();
        pts[1..=self.mel_bins].to_vec()
    }

    /// Triangular filters with unit peak, `mel_bins × n_freq_bins`.
    pub fn filterbank(&self) -> Tensor {
        let pts = self.mel_points_hz();
        let nf = self.n_freq_bins();
        let mut fb = Tensor::zeros(self.mel_bins, nf);
        for m in 0..self.mel_bins {
            let (l, c, r) = (pts[m], pts[m + 1], pts[m + 2]);
            for k in 0..nf {
                let f = k as f64 * f64::from(self.sample_rate) / self.fft_size as f64;
                let v = if f > l && f <= c {
                    (f - l) / (c - l)
                } else if f > c && f < r {
                    (r - f) / (r - c)
                } else {
                    0.0
                };
                fb.set(m, k, v);
            }
        }
        fb
    }

    /// Periodic Hann window of `win_size` samples.
    pub fn window(&self) -> Vec<f64> {
        let n = self.win_size as f64;
        (0..self.win_size).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    /// `n_frames × mel_bins` natural-log mel energies.
    pub frames: Tensor,
    pub config: MelConfig,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.rows
    }

    pub fn mel_bins(&self) -> usize {
        self.frames.cols
    }

    /// Audio duration this spectrogram stands for.
    pub fn duration_secs(&self) -> f64 {
        (self.n_frames() * self.config.hop_size) as f64 / f64::from(self.config.sample_rate)
    }

    const MAGIC: &'static [u8; 4] = b"LMEL";

    /// Binary cache format: magic, u32 rows, u32 cols, hop, win, fft, bins,
    /// sample rate, then f64 config reals and row-major f64 values, all
    /// little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(48 + self.frames.len() * 8);
        out.extend_from_slice(Self::MAGIC);
        for v in [self.frames.rows, self.frames.cols, c.hop_size, c.win_size, c.fft_size, c.mel_bins] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.sample_rate.to_le_bytes());
        for v in [c.fmin, c.fmax, c.log_floor] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.frames.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DspError> {
        let err = |m: &str| DspError::MelFile(m.to_string());
        if bytes.len() < 56 || &bytes[..4] != Self::MAGIC {
            return Err(err("bad magic or truncated header"));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let f = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let (rows, cols) = (u(0), u(1));
        let config = MelConfig {
            hop_size: u(2),
            win_size: u(3),
            fft_size: u(4),
            mel_bins: u(5),
            sample_rate: u(6) as u32,
            fmin: f(32),
            fmax: f(40),
            log_floor: f(48),
        };
        let body = &bytes[56..];
        if body.len() != rows * cols * 8 {
            return Err(err("payload length does not match shape"));
        }
        let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { frames: Tensor::from_vec(rows, cols, data), config })
    }

    pub fn save(&self, path: &Path) -> Result<(), DspError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| DspError::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self, DspError> {
        let bytes = std::fs::read(path).map_err(|e| DspError::Io { path: path.display().to_string(), source: e })?;
        Self::from_bytes(&bytes)
    }
}

/// Log-mel spectrogram without padding: `1 + (len - win) / hop` frames.
pub fn mel_spectrogram(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram, DspError> {
    cfg.validate()?;
    if w.sample_rate != cfg.sample_rate {
        return Err(DspError::SampleRate { expected: cfg.sample_rate, actual: w.sample_rate });
    }
    let n_frames = cfg.n_frames(w.len()).ok_or(DspError::TooShort { len: w.len(), win: cfg.win_size })?;
    let window = cfg.window();
    let fb = cfg.filterbank();
    let nf = cfg.n_freq_bins();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut power = vec![0.0; nf];
    let floor_log = cfg.log_floor.ln();
    let mut frames = Tensor::zeros(n_frames, cfg.mel_bins);
    for t in 0..n_frames {
        let start = t * cfg.hop_size;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < cfg.win_size { Complex::new(w.samples[start + i] * window[i], 0.0) } else { Complex::new(0.0, 0.0) };
        }
        fft.process(&mut buf);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p = b.norm_sqr();
        }
        for m in 0..cfg.mel_bins {
            let e: f64 = fb.row(m).iter().zip(&power).map(|(a, b)| a * b).sum();
            frames.set(t, m, if e > cfg.log_floor { e.ln() } else { floor_log });
        }
    }
    Ok(MelSpectrogram { frames, config: cfg.clone() })
}

/// Precomputed matrices for the differentiable log-mel transform.
#[derive(Debug, Clone)]
pub struct MelBasis {
    pub config: MelConfig,
    /// `win × n_freq` windowed cosine basis.
    cos: Tensor,
    /// `win × n_freq` windowed sine basis.
    sin: Tensor,
    /// `n_freq × mel_bins` filterbank, transposed.
    fb_t: Tensor,
}

impl MelBasis {
    pub fn new(config: &MelConfig) -> Self {
        let nf = config.n_freq_bins();
        let window = config.window();
        let mut cos = Tensor::zeros(config.win_size, nf);
        let mut sin = Tensor::zeros(config.win_size, nf);
        for n in 0..config.win_size {
            for k in 0..nf {
                let ang = 2.0 * PI * ((n * k) % config.fft_size) as f64 / config.fft_size as f64;
                cos.set(n, k, window[n] * ang.cos());
                sin.set(n, k, -window[n] * ang.sin());
            }
        }
        Self { config: config.clone(), cos, sin, fb_t: config.filterbank().transpose() }
    }
}

/// The log-mel transform of an `n × 1` waveform node, differentiable.
pub fn mel_spectrogram_graph(g: &mut Graph, wave: Var, basis: &MelBasis) -> Var {
    let cfg = &basis.config;
    let frames = g.unfold(wave, cfg.win_size, cfg.hop_size, 0);
    let cos = g.constant(basis.cos.clone());
    let sin = g.constant(basis.sin.clone());
    let fb = g.constant(basis.fb_t.clone());
    let re = g.matmul(frames, cos);
    let im = g.matmul(frames, sin);
    let re2 = g.square(re);
    let im2 = g.square(im);
    let power = g.add(re2, im2);
    let mel = g.matmul(power, fb);
    let mel = g.clamp_min(mel, cfg.log_floor);
    g.log(mel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sine(freq: f64, rate: u32, n: usize, amp: f64) -> Waveform {
        Waveform::new((0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / f64::from(rate)).sin()).collect(), rate)
    }

    fn peak_bin(w: &Waveform) -> usize {
        let n = w.len();
        let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
        let mut buf: Vec<_> = w.samples.iter().map(|&x| Complex::new(x, 0.0)).collect();
        fft.process(&mut buf);
        (0..n / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap()
    }

    #[test]
    fn wav_roundtrip_and_scaling() {
        let w = Waveform::new(vec![32767.0 / 32768.0, -1.0, 0.0, 0.5], 16_000);
        let bytes = encode_wav(&w);
        let back = decode_wav(std::io::Cursor::new(bytes), "mem").unwrap();
        assert_eq!(back, w);
        assert!((back.samples[0] - 0.99997).abs() < 1e-5);
    }

    #[test]
    fn one_second_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_waveform(&p, &sine(220.0, 16_000, 16_000, 0.3)).unwrap();
        let w = load_waveform(&p).unwrap();
        assert_eq!((w.len(), w.sample_rate), (16_000, 16_000));
    }

    #[test]
    fn rejects_empty_stereo_and_24bit() {
        let mk = |channels, bits| {
            let spec = hound::WavSpec { channels, sample_rate: 16_000, bits_per_sample: bits, sample_format: hound::SampleFormat::Int };
            let mut buf = std::io::Cursor::new(Vec::new());
            let mut wr = hound::WavWriter::new(&mut buf, spec).unwrap();
            for _ in 0..(4 * channels) {
                if bits == 16 { wr.write_sample(0i16).unwrap() } else { wr.write_sample(0i32).unwrap() }
            }
            wr.finalize().unwrap();
            buf.into_inner()
        };
        let e = decode_wav(std::io::Cursor::new(mk(2, 16)), "x").unwrap_err();
        assert!(e.to_string().contains("mono"), "{e}");
        let e = decode_wav(std::io::Cursor::new(mk(1, 24)), "x").unwrap_err();
        assert!(e.to_string().contains("bit depth"), "{e}");
        let empty = encode_wav(&Waveform::new(vec![], 16_000));
        assert_eq!(decode_wav(std::io::Cursor::new(empty), "x").unwrap_err().to_string(), "empty audio");
        assert!(matches!(load_waveform(Path::new("/nonexistent.wav")), Err(DspError::Io { .. })));
    }

    #[test]
    fn resample_counts_and_identity() {
        let w = sine(440.0, 48_000, 48_000, 0.5);
        let r = resample(&w, 16_000);
        assert_eq!((r.len(), r.sample_rate), (16_000, 16_000));
        assert_eq!(resample(&r, 16_000), r);
    }

    #[test]
    fn resample_keeps_tone_frequency() {
        let w = sine(440.0, 48_000, 48_000, 0.5);
        let r = resample(&w, 16_000);
        // 1-second signals: FFT bin k is k Hz
        let (a, b) = (peak_bin(&w), peak_bin(&r));
        assert!((a as i64 - 440).abs() <= 1 && (b as i64 - 440).abs() <= 1, "{a} {b}");
    }

    #[test]
    fn resample_preserves_dc() {
        let w = Waveform::new(vec![0.25; 4800], 48_000);
        let r = resample(&w, 16_000);
        let mean = r.samples.iter().sum::<f64>() / r.len() as f64;
        assert!((mean - 0.25).abs() < 1e-3);
    }

    #[test]
    fn silence_hits_floor() {
        let cfg = MelConfig::default();
        let m = mel_spectrogram(&Waveform::new(vec![0.0; 4000], 16_000), &cfg).unwrap();
        assert!(m.frames.data.iter().all(|&x| x == cfg.log_floor.ln()));
    }

    #[test]
    fn frame_count_example() {
        let cfg = MelConfig::default();
        let m = mel_spectrogram(&sine(300.0, 16_000, 16_000, 0.1), &cfg).unwrap();
        assert_eq!(m.n_frames(), 59);
        assert!(matches!(
            mel_spectrogram(&Waveform::new(vec![0.0; 1000], 16_000), &cfg),
            Err(DspError::TooShort { .. })
        ));
        assert!(matches!(
            mel_spectrogram(&Waveform::new(vec![0.0; 2000], 48_000), &cfg),
            Err(DspError::SampleRate { .. })
        ));
    }

    #[test]
    fn tone_lands_in_nearest_filter() {
        let cfg = MelConfig::default();
        let m = mel_spectrogram(&sine(440.0, 16_000, 16_000, 0.5), &cfg).unwrap();
        // oracle: centers recomputed from the mel-scale definition
        let (lo, hi) = (2595.0 * (1.0f64).log10(), 2595.0 * (1.0 + 8000.0 / 700.0f64).log10());
        let centers: Vec<f64> = (1..=80)
            .map(|i| 700.0 * (10f64.powf((lo + (hi - lo) * i as f64 / 81.0) / 2595.0) - 1.0))
            .collect();
        let nearest = (0..80).min_by(|&a, &b| (centers[a] - 440.0).abs().total_cmp(&(centers[b] - 440.0).abs())).unwrap();
        for t in 0..m.n_frames() {
            let row = m.frames.row(t);
            let arg = (0..80).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, nearest, "frame {t}");
        }
    }

    #[test]
    fn graph_mel_matches_fft_mel() {
        let cfg = MelConfig { fft_size: 256, win_size: 200, hop_size: 64, mel_bins: 20, ..MelConfig::default() };
        let w = sine(523.0, 16_000, 1200, 0.4);
        let fast = mel_spectrogram(&w, &cfg).unwrap();
        let mut g = Graph::new();
        let x = g.constant(w.to_column());
        let y = mel_spectrogram_graph(&mut g, x, &MelBasis::new(&cfg));
        assert!(g.value(y).max_abs_diff(&fast.frames) < 1e-9);
    }

    #[test]
    fn mel_file_roundtrip() {
        let cfg = MelConfig::default();
        let m = mel_spectrogram(&sine(300.0, 16_000, 3000, 0.2), &cfg).unwrap();
        assert_eq!(MelSpectrogram::from_bytes(&m.to_bytes()).unwrap(), m);
        assert!(MelSpectrogram::from_bytes(b"nope").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn frame_count_formula(len in 256usize..4000) {
            let cfg = MelConfig { fft_size: 256, win_size: 256, hop_size: 64, mel_bins: 16, ..MelConfig::default() };
            let w = Waveform::new((0..len).map(|i| ((i * 7919) % 101) as f64 / 101.0 - 0.5).collect(), 16_000);
            let m = mel_spectrogram(&w, &cfg).unwrap();
            prop_assert_eq!(m.n_frames(), 1 + (len - 256) / 64);
        }

        #[test]
        fn scaling_never_raises_energy(c in 0.01f64..=1.0, seed in 0u64..1000) {
            let cfg = MelConfig { fft_size: 256, win_size: 256, hop_size: 128, mel_bins: 16, ..MelConfig::default() };
            let w = Waveform::new((0..1024).map(|i| (((i as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0) - 0.5).collect(), 16_000);
            let a = mel_spectrogram(&w, &cfg).unwrap();
            let b = mel_spectrogram(&w.scaled(c), &cfg).unwrap();
            for (x, y) in a.frames.data.iter().zip(&b.frames.data) {
                prop_assert!(y <= x);
            }
            let again = mel_spectrogram(&w, &cfg).unwrap();
            prop_assert_eq!(again.frames.data, a.frames.data);
        }
    }
}
