//! Mono waveforms, WAV I/O, SNR-controlled mixing and the STFT.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("waveform must contain at least one sample")]
    Empty,
    #[error("sample {0} is not finite")]
    NonFinite(usize),
    #[error("sample rate must be positive")]
    ZeroRate,
    #[error("expected a mono file, found {0} channels")]
    NonMono(u16),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("malformed wav: {0}")]
    Malformed(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("length mismatch: {0} vs {1} samples")]
    LengthMismatch(usize, usize),
    #[error("sample rate mismatch: {0} vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("{0} signal has zero energy")]
    ZeroEnergy(&'static str),
    #[error("invalid stft parameters: {0}")]
    InvalidParams(String),
    #[error("signal of {len} samples is shorter than the {window}-sample window")]
    TooShort { len: usize, window: usize },
}

impl From<hound::Error> for SignalError {
    fn from(err: hound::Error) -> Self {
        match err {
            hound::Error::IoError(e) => SignalError::Io(e),
            hound::Error::Unsupported => SignalError::UnsupportedEncoding("unsupported wav format".into()),
            other => SignalError::Malformed(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, SignalError> {
        if samples.is_empty() {
            return Err(SignalError::Empty);
        }
        if sample_rate == 0 {
            return Err(SignalError::ZeroRate);
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(SignalError::NonFinite(i));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        energy(&self.samples)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|x| x * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Truncates or zero-pads to `len` samples.
    pub fn fit_to_len(mut self, len: usize) -> Waveform {
        self.samples.resize(len.max(1), 0.0);
        self
    }

    pub fn check_aligned(&self, other: &Waveform) -> Result<(), SignalError> {
        if self.sample_rate != other.sample_rate {
            return Err(SignalError::RateMismatch(self.sample_rate, other.sample_rate));
        }
        if self.len() != other.len() {
            return Err(SignalError::LengthMismatch(self.len(), other.len()));
        }
        Ok(())
    }
}

pub(crate) fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

pub fn read_wav(path: &Path) -> Result<Waveform, SignalError> {
    let reader = hound::WavReader::open(path)?;
    read_wav_from(reader)
}

fn read_wav_from<R: std::io::Read>(mut reader: hound::WavReader<R>) -> Result<Waveform, SignalError> {
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(SignalError::NonMono(spec.channels));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()?,
        (format, bits) => {
            return Err(SignalError::UnsupportedEncoding(format!("{format:?} {bits}-bit")));
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

pub fn write_wav(path: &Path, wave: &Waveform, encoding: WavEncoding) -> Result<(), SignalError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => hound::SampleFormat::Int,
            WavEncoding::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &x in &wave.samples {
        match encoding {
            WavEncoding::Pcm16 => {
                let v = (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(v)?;
            }
            WavEncoding::Float32 => writer.write_sample(x as f32)?,
        }
    }
    writer.finalize()?;
    Ok(())
}

pub const MIX_PEAK_LIMIT: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    /// Target after any peak rescale; this is the reference for metrics.
    pub target: Waveform,
    pub interference: Waveform,
    pub mixture: Waveform,
    /// Gain applied to the interference before the peak rescale.
    pub interference_gain: f64,
    /// Common factor applied to all three signals (1 when no clipping).
    pub peak_scale: f64,
}

/// Mixes `target` and `interference` at the requested target-to-interference
/// ratio. The peak limiter rescales all outputs together, so ratios hold.
pub fn mix(target: &Waveform, interference: &Waveform, snr_db: f64) -> Result<Mixture, SignalError> {
    target.check_aligned(interference)?;
    let e_target = target.energy();
    let e_interference = interference.energy();
    if e_target == 0.0 {
        return Err(SignalError::ZeroEnergy("target"));
    }
    if e_interference == 0.0 {
        return Err(SignalError::ZeroEnergy("interference"));
    }
    let gain = (e_target / (e_interference * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled_interference: Vec<f64> = interference.samples.iter().map(|x| gain * x).collect();
    let mixture: Vec<f64> = target
        .samples
        .iter()
        .zip(&scaled_interference)
        .map(|(t, i)| t + i)
        .collect();

    let peak = mixture.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let peak_scale = if peak > MIX_PEAK_LIMIT { MIX_PEAK_LIMIT / peak } else { 1.0 };
    let rate = target.sample_rate;
    let scale = |xs: &[f64]| -> Vec<f64> { xs.iter().map(|x| x * peak_scale).collect() };
    let (target, interference) = if peak_scale == 1.0 {
        (target.samples.clone(), scaled_interference)
    } else {
        (scale(&target.samples), scale(&scaled_interference))
    };
    // summed after scaling so mixture == target + interference exactly
    let mixture = target.iter().zip(&interference).map(|(t, i)| t + i).collect();
    Ok(Mixture {
        target: Waveform { samples: target, sample_rate: rate },
        interference: Waveform { samples: interference, sample_rate: rate },
        mixture: Waveform { samples: mixture, sample_rate: rate },
        interference_gain: gain,
        peak_scale,
    })
}

/// Inclusive SNR range for randomly drawn mixtures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrRange {
    pub min_db: f64,
    pub max_db: f64,
}

impl Default for SnrRange {
    fn default() -> Self {
        SnrRange { min_db: -10.0, max_db: 10.0 }
    }
}

impl SnrRange {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.max_db <= self.min_db {
            self.min_db
        } else {
            rng.gen_range(self.min_db..=self.max_db)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// Periodic Hann, `0.5 - 0.5 cos(2 pi n / N)`.
    HannPeriodic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StftParams {
    pub window_size: usize,
    pub hop: usize,
    pub window: WindowKind,
}

impl Default for StftParams {
    fn default() -> Self {
        StftParams {
            window_size: 1024,
            hop: 256,
            window: WindowKind::HannPeriodic,
        }
    }
}

impl StftParams {
    pub fn validate(&self) -> Result<(), SignalError> {
        if !self.window_size.is_power_of_two() || self.window_size < 2 {
            return Err(SignalError::InvalidParams(format!(
                "window size {} is not a power of two",
                self.window_size
            )));
        }
        if self.hop == 0 || self.hop > self.window_size {
            return Err(SignalError::InvalidParams(format!(
                "hop {} must be in 1..={}",
                self.hop, self.window_size
            )));
        }
        Ok(())
    }

    pub fn window(&self) -> Vec<f64> {
        let n = self.window_size as f64;
        match self.window {
            WindowKind::HannPeriodic => (0..self.window_size)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos())
                .collect(),
        }
    }

    pub fn bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    fn frames_for(&self, len: usize) -> usize {
        len.div_ceil(self.hop) + 1
    }
}

/// One-sided complex spectrogram, stored frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    frames: usize,
    bins: usize,
    data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn get(&self, t: usize, k: usize) -> Complex64 {
        self.data[t * self.bins + k]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    /// Multiplies each cell by the matching real gain.
    pub fn apply_mask(&self, mask: &[f64]) -> Spectrogram {
        assert_eq!(mask.len(), self.data.len(), "mask shape");
        Spectrogram {
            frames: self.frames,
            bins: self.bins,
            data: self.data.iter().zip(mask).map(|(c, m)| c * m).collect(),
        }
    }
}

/// Centered STFT: the signal is zero-padded by half a window on the left
/// and up to a whole number of hops on the right.
pub fn stft(wave: &Waveform, params: &StftParams) -> Result<Spectrogram, SignalError> {
    params.validate()?;
    let n = params.window_size;
    if wave.len() < n {
        return Err(SignalError::TooShort { len: wave.len(), window: n });
    }
    let frames = params.frames_for(wave.len());
    let half = n / 2;
    let padded_len = (frames - 1) * params.hop + n;
    let mut padded = vec![0.0; padded_len];
    padded[half..half + wave.len()].copy_from_slice(&wave.samples);

    let window = params.window();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let bins = params.bins();
    let mut data = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..frames {
        let start = t * params.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex64::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(Spectrogram { frames, bins, data })
}

/// Weighted overlap-add inverse of [`stft`], normalized by the summed
/// squared synthesis window.
pub fn istft(spec: &Spectrogram, params: &StftParams, len: usize, sample_rate: u32) -> Result<Waveform, SignalError> {
    params.validate()?;
    let n = params.window_size;
    if spec.bins != params.bins() {
        return Err(SignalError::InvalidParams(format!(
            "spectrogram has {} bins, parameters imply {}",
            spec.bins,
            params.bins()
        )));
    }
    let half = n / 2;
    let padded_len = (spec.frames.max(1) - 1) * params.hop + n;
    if len == 0 || half + len > padded_len {
        return Err(SignalError::LengthMismatch(len, padded_len - half));
    }

    let window = params.window();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let mut out = vec![0.0; padded_len];
    let mut norm = vec![0.0; padded_len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let scale = 1.0 / n as f64;
    for t in 0..spec.frames {
        let frame = spec.frame(t);
        buf[..spec.bins].copy_from_slice(frame);
        for k in spec.bins..n {
            buf[k] = frame[n - k].conj();
        }
        ifft.process(&mut buf);
        let start = t * params.hop;
        for i in 0..n {
            out[start + i] += buf[i].re * scale * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    let samples = (half..half + len)
        .map(|i| if norm[i] > 1e-10 { out[i] / norm[i] } else { 0.0 })
        .collect();
    Waveform::new(samples, sample_rate)
}

/// Sine tone gated on and off in bursts of `burst` samples with `gap`
/// samples of silence between them.
pub fn tone_burst(freq_hz: f64, amplitude: f64, sample_rate: u32, len: usize, burst: usize, gap: usize) -> Waveform {
    assert!(len > 0 && sample_rate > 0);
    let period = (burst + gap).max(1);
    let samples = (0..len)
        .map(|i| {
            if i % period < burst {
                amplitude * (2.0 * PI * freq_hz * i as f64 / sample_rate as f64).sin()
            } else {
                0.0
            }
        })
        .collect();
    Waveform { samples, sample_rate }
}

/// Uniform white noise in [-amplitude, amplitude].
pub fn white_noise<R: Rng>(rng: &mut R, amplitude: f64, sample_rate: u32, len: usize) -> Waveform {
    assert!(len > 0 && sample_rate > 0);
    let samples = (0..len).map(|_| rng.gen_range(-amplitude..=amplitude)).collect();
    Waveform { samples, sample_rate }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn wf(xs: &[f64]) -> Waveform {
        Waveform::new(xs.to_vec(), 16_000).unwrap()
    }

    #[test]
    fn waveform_invariants() {
        assert!(matches!(Waveform::new(vec![], 16_000), Err(SignalError::Empty)));
        assert!(matches!(Waveform::new(vec![0.0], 0), Err(SignalError::ZeroRate)));
        assert!(matches!(Waveform::new(vec![0.0, f64::NAN], 8), Err(SignalError::NonFinite(1))));
        assert_eq!(wf(&[1.0, 2.0]).fit_to_len(4).samples(), &[1.0, 2.0, 0.0, 0.0]);
        assert_eq!(wf(&[1.0, 2.0, 3.0]).fit_to_len(1).samples(), &[1.0]);
    }

    #[test]
    fn wav_float_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<f64> = (0..1000).map(|_| rng.gen_range(-1.0f32..1.0) as f64).collect();
        let w = wf(&samples);
        write_wav(&path, &w, WavEncoding::Float32).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate(), 16_000);
        assert!(back
            .samples()
            .iter()
            .zip(w.samples())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn pcm16_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.wav");
        write_wav(&path, &wf(&[-1.0, 0.5, 0.0, 1.0]), WavEncoding::Pcm16).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.samples(), &[-1.0, 0.5, 0.0, 32767.0 / 32768.0]);
    }

    #[test]
    fn stereo_and_unsupported_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stereo = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        for _ in 0..8 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        assert!(matches!(read_wav(&stereo), Err(SignalError::NonMono(2))));

        let pcm24 = dir.path().join("p24.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&pcm24, spec).unwrap();
        w.write_sample(5i32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&pcm24), Err(SignalError::UnsupportedEncoding(_))));

        let junk = dir.path().join("junk.wav");
        std::fs::write(&junk, b"RIFF\x00\x00not a wave").unwrap();
        assert!(read_wav(&junk).is_err());
    }

    #[test]
    fn mix_gain_examples() {
        let t = wf(&[0.1, 0.0]);
        let i = wf(&[0.0, 0.1]);
        let m = mix(&t, &i, 0.0).unwrap();
        assert!((m.interference_gain - 1.0).abs() < 1e-15);
        assert_eq!(m.peak_scale, 1.0);

        let t = wf(&[1.0, 0.0]);
        let i = wf(&[0.0, 1.0]);
        let m = mix(&t, &i, 20.0).unwrap();
        assert!((m.interference_gain - 0.1).abs() < 1e-15);
        // peak 1.0 > 0.99 triggers a common rescale
        assert!((m.peak_scale - 0.99).abs() < 1e-15);
        assert!((m.target.samples()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn mix_errors() {
        let t = wf(&[0.1, 0.2]);
        assert!(matches!(mix(&t, &wf(&[0.0, 0.0]), 0.0), Err(SignalError::ZeroEnergy("interference"))));
        assert!(matches!(mix(&wf(&[0.0, 0.0]), &t, 0.0), Err(SignalError::ZeroEnergy("target"))));
        assert!(matches!(mix(&t, &wf(&[0.1]), 0.0), Err(SignalError::LengthMismatch(2, 1))));
        let other_rate = Waveform::new(vec![0.1, 0.2], 8000).unwrap();
        assert!(matches!(mix(&t, &other_rate, 0.0), Err(SignalError::RateMismatch(..))));
    }

    #[test]
    fn mix_preserves_snr_after_peak_rescale() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = white_noise(&mut rng, 0.9, 16_000, 4000);
        let i = white_noise(&mut rng, 0.9, 16_000, 4000);
        for snr in [-10.0, -3.5, 0.0, 7.25, 10.0] {
            let m = mix(&t, &i, snr).unwrap();
            let achieved = 10.0 * (m.target.energy() / m.interference.energy()).log10();
            assert!((achieved - snr).abs() < 1e-9, "{achieved} vs {snr}");
            assert!(m.mixture.peak() <= MIX_PEAK_LIMIT + 1e-12);
        }
    }

    #[test]
    fn snr_range_default() {
        let r = SnrRange::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let s = r.sample(&mut rng);
            assert!((-10.0..=10.0).contains(&s));
        }
    }

    #[test]
    fn stft_param_validation() {
        assert!(StftParams::default().validate().is_ok());
        let bad = StftParams { window_size: 1000, ..Default::default() };
        assert!(matches!(stft(&wf(&[0.0; 2000]), &bad), Err(SignalError::InvalidParams(_))));
        let bad = StftParams { hop: 2048, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(matches!(stft(&wf(&[0.0; 100]), &StftParams::default()), Err(SignalError::TooShort { .. })));
    }

    #[test]
    fn zero_input_gives_zero_frames() {
        let spec = stft(&wf(&vec![0.0; 4096]), &StftParams::default()).unwrap();
        assert!(spec.data().iter().all(|c| c.norm() == 0.0));
        assert_eq!(spec.frames(), 4096 / 256 + 1);
        assert_eq!(spec.bins(), 513);
    }

    #[test]
    fn tone_peaks_in_expected_bin() {
        let tone = tone_burst(1000.0, 0.5, 16_000, 16_000, 16_000, 0);
        let spec = stft(&tone, &StftParams::default()).unwrap();
        let t = spec.frames() / 2;
        let (peak_bin, _) = spec
            .frame(t)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
            .unwrap();
        assert_eq!(peak_bin, (1000.0f64 * 1024.0 / 16000.0).round() as usize);
        assert_eq!(peak_bin, 64);
    }

    #[test]
    fn reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = StftParams::default();
        for len in [1024, 1500, 8192] {
            let x = white_noise(&mut rng, 1.0, 16_000, len);
            let y = istft(&stft(&x, &params).unwrap(), &params, len, 16_000).unwrap();
            let rms = (x.samples().iter().zip(y.samples()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / len as f64).sqrt();
            assert!(rms <= 1e-6, "len {len}: rms {rms}");
        }
    }

    #[test]
    fn istft_rejects_bad_length() {
        let params = StftParams::default();
        let x = wf(&vec![0.1; 2048]);
        let spec = stft(&x, &params).unwrap();
        assert!(istft(&spec, &params, 100_000, 16_000).is_err());
        assert!(istft(&spec, &params, 0, 16_000).is_err());
    }

    #[test]
    fn per_frame_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = StftParams::default();
        let x = white_noise(&mut rng, 1.0, 16_000, 4096);
        let spec = stft(&x, &params).unwrap();
        let window = params.window();
        let n = params.window_size;
        let mut padded = vec![0.0; (spec.frames() - 1) * params.hop + n];
        padded[n / 2..n / 2 + x.len()].copy_from_slice(x.samples());
        for t in 0..spec.frames() {
            let time: f64 = (0..n).map(|i| (padded[t * params.hop + i] * window[i]).powi(2)).sum();
            let frame = spec.frame(t);
            let freq: f64 = frame
                .iter()
                .enumerate()
                .map(|(k, c)| if k == 0 || k == n / 2 { c.norm_sqr() } else { 2.0 * c.norm_sqr() })
                .sum::<f64>()
                / n as f64;
            assert!((time - freq).abs() <= 1e-6 * time.max(1e-12), "frame {t}");
        }
    }
}
