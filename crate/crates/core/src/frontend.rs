//! Log-mel frontend: Hann-windowed centered STFT followed by an
//! area-normalized triangular mel filterbank.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Floor added before the logarithm so silence maps to a finite value.
pub const LOG_EPS: f64 = 1e-10;

/// A mono clip of raw samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty waveform".into()));
        }
        if sample_rate_hz == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform".into()));
        }
        Ok(Self { samples, sample_rate_hz })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Linear-interpolation resampling.
    pub fn resample_linear(&self, target_hz: u32) -> Result<Waveform> {
        if target_hz == 0 {
            return Err(Error::InvalidArgument("target rate must be positive".into()));
        }
        if target_hz == self.sample_rate_hz {
            return Ok(self.clone());
        }
        let ratio = self.sample_rate_hz as f64 / target_hz as f64;
        let n_out = ((self.samples.len() as f64) / ratio).floor().max(1.0) as usize;
        let last = self.samples.len() - 1;
        let out = (0..n_out)
            .map(|i| {
                let pos = i as f64 * ratio;
                let lo = (pos.floor() as usize).min(last);
                let hi = (lo + 1).min(last);
                let frac = pos - lo as f64;
                self.samples[lo] * (1.0 - frac) + self.samples[hi] * frac
            })
            .collect();
        Waveform::new(out, target_hz)
    }

    /// Reads a 16-bit PCM mono WAV file.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
        let mut reader = hound::WavReader::open(path.as_ref())?;
        let spec = reader.spec();
        if spec.channels != 1
            || spec.bits_per_sample != 16
            || spec.sample_format != hound::SampleFormat::Int
        {
            return Err(Error::InvalidArgument(format!(
                "{}: expected 16-bit PCM mono, got {} channel(s) {}-bit {:?}",
                path.as_ref().display(),
                spec.channels,
                spec.bits_per_sample,
                spec.sample_format
            )));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Waveform::new(samples, spec.sample_rate)
    }

    /// Writes the clip as 16-bit PCM mono, clipping to [-1, 1].
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate_hz,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
        }
        writer.finalize()?;
        Ok(())
    }
}

/// STFT and filterbank settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub sample_rate_hz: u32,
    pub window_len: usize,
    pub hop_len: usize,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000,
            window_len: 2048,
            hop_len: 256,
            n_mels: 128,
            fmin_hz: 0.0,
            fmax_hz: 8000.0,
        }
    }
}

impl FrontendConfig {
    /// Number of STFT frames produced for `n_samples` input samples.
    pub fn frame_count(&self, n_samples: usize) -> usize {
        n_samples / self.hop_len + 1
    }

    /// Waveform to `T x n_mels` log-mel matrix. Resamples first if needed.
    pub fn extract(&self, w: &Waveform) -> Result<Matrix> {
        let resampled;
        let w = if w.sample_rate_hz() != self.sample_rate_hz {
            resampled = w.resample_linear(self.sample_rate_hz)?;
            &resampled
        } else {
            w
        };
        let power = stft_power(w, self.window_len, self.hop_len)?;
        log_mel(&power, self.n_mels, self.sample_rate_hz, self.fmin_hz, self.fmax_hz)
    }
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Power spectrogram `|DFT|^2` of Hann-windowed, centered frames.
///
/// The signal is zero-padded by `window_len / 2` on both sides, giving
/// `floor(len / hop) + 1` frames.
pub fn stft_power(w: &Waveform, window_len: usize, hop_len: usize) -> Result<Matrix> {
    if window_len == 0 || window_len % 2 != 0 {
        return Err(Error::InvalidArgument(format!("window length {window_len} must be even")));
    }
    if hop_len == 0 || hop_len > window_len {
        return Err(Error::InvalidArgument(format!(
            "hop length {hop_len} must be in 1..={window_len}"
        )));
    }
    let x = w.samples();
    if x.len() < hop_len {
        return Err(Error::ClipTooShort { samples: x.len(), hop: hop_len });
    }
    let half = window_len / 2;
    let n_frames = x.len() / hop_len + 1;
    let n_bins = half + 1;
    let window = hann_window(window_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window_len);

    let mut out = Matrix::zeros(n_frames, n_bins);
    let mut buf = vec![Complex::new(0.0, 0.0); window_len];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for t in 0..n_frames {
        // frame t covers padded[t*hop .. t*hop+window_len], i.e. x[t*hop - half ..]
        for (n, b) in buf.iter_mut().enumerate() {
            let idx = (t * hop_len + n) as isize - half as isize;
            let s = if idx >= 0 && (idx as usize) < x.len() { x[idx as usize] } else { 0.0 };
            *b = Complex::new(s * window[n], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (k, v) in out.row_mut(t).iter_mut().enumerate() {
            *v = buf[k].norm_sqr();
        }
    }
    Ok(out)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// `n_mels x n_bins` triangular filterbank; each triangle is scaled by
/// `2 / (f_hi - f_lo)` so filters have equal area in Hz.
pub fn mel_filterbank(
    n_mels: usize,
    n_bins: usize,
    sample_rate_hz: u32,
    fmin_hz: f64,
    fmax_hz: f64,
) -> Result<Matrix> {
    let nyquist = sample_rate_hz as f64 / 2.0;
    if n_mels == 0 {
        return Err(Error::InvalidArgument("n_mels must be >= 1".into()));
    }
    if !(0.0 <= fmin_hz && fmin_hz < fmax_hz && fmax_hz <= nyquist) {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= fmin ({fmin_hz}) < fmax ({fmax_hz}) <= {nyquist}"
        )));
    }
    if n_bins < 2 {
        return Err(Error::InvalidArgument("power spectrum needs at least 2 bins".into()));
    }
    let n_fft = (n_bins - 1) * 2;
    let (mlo, mhi) = (hz_to_mel(fmin_hz), hz_to_mel(fmax_hz));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Matrix::zeros(n_mels, n_bins);
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (hi - lo);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate_hz as f64 / n_fft as f64;
            let rising = (f - lo) / (center - lo);
            let falling = (hi - f) / (hi - center);
            let w = rising.min(falling).max(0.0);
            if w > 0.0 {
                fb.set(m, k, w * norm);
            }
        }
    }
    Ok(fb)
}

/// `log(filterbank . power + eps)` for every frame.
pub fn log_mel(
    power: &Matrix,
    n_mels: usize,
    sample_rate_hz: u32,
    fmin_hz: f64,
    fmax_hz: f64,
) -> Result<Matrix> {
    if !power.is_finite() {
        return Err(Error::NonFinite("power spectrogram".into()));
    }
    let fb = mel_filterbank(n_mels, power.cols(), sample_rate_hz, fmin_hz, fmax_hz)?;
    let mut out = Matrix::zeros(power.rows(), n_mels);
    for t in 0..power.rows() {
        let p = power.row(t);
        for m in 0..n_mels {
            let e: f64 = fb.row(m).iter().zip(p).map(|(w, v)| w * v).sum();
            out.set(t, m, (e + LOG_EPS).ln());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_power(frame: &[f64], k: usize) -> f64 {
        let n = frame.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &x) in frame.iter().enumerate() {
            let ang = -2.0 * std::f64::consts::PI * k as f64 * i as f64 / n;
            re += x * ang.cos();
            im += x * ang.sin();
        }
        re * re + im * im
    }

    #[test]
    fn paper_clip_gives_626_frames() {
        let w = Waveform::new(vec![0.0; 160_000], 16_000).unwrap();
        let p = stft_power(&w, 2048, 256).unwrap();
        assert_eq!(p.shape(), (626, 1025));
        assert!(p.as_slice().iter().all(|&v| v == 0.0));
        let lm = log_mel(&p, 128, 16_000, 0.0, 8000.0).unwrap();
        assert_eq!(lm.shape(), (626, 128));
        let floor = LOG_EPS.ln();
        assert!(lm.as_slice().iter().all(|&v| v == floor));
    }

    #[test]
    fn too_short_clip_is_rejected() {
        let w = Waveform::new(vec![0.1; 100], 16_000).unwrap();
        assert!(matches!(stft_power(&w, 2048, 256), Err(Error::ClipTooShort { .. })));
    }

    #[test]
    fn bin_centered_sine_matches_naive_dft() {
        let (win, hop, bin) = (64usize, 16usize, 5usize);
        let sr = 16_000u32;
        let f = bin as f64 * sr as f64 / win as f64;
        let x: Vec<f64> = (0..400)
            .map(|n| 0.5 * (2.0 * std::f64::consts::PI * f * n as f64 / sr as f64).sin())
            .collect();
        let w = Waveform::new(x.clone(), sr).unwrap();
        let p = stft_power(&w, win, hop).unwrap();
        let window = hann_window(win);
        let mut max_dev = 0.0f64;
        for t in 0..p.rows() {
            let frame: Vec<f64> = (0..win)
                .map(|n| {
                    let idx = (t * hop + n) as isize - (win / 2) as isize;
                    let s = if idx >= 0 && (idx as usize) < x.len() { x[idx as usize] } else { 0.0 };
                    s * window[n]
                })
                .collect();
            for k in 0..=win / 2 {
                max_dev = max_dev.max((p.get(t, k) - naive_power(&frame, k)).abs());
            }
        }
        assert!(max_dev <= 1e-6, "max deviation {max_dev}");
        // interior frames peak at the sine's bin
        for t in 4..p.rows() - 4 {
            let row = p.row(t);
            let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, bin);
        }
    }

    #[test]
    fn impulse_bin_hits_only_covering_bands() {
        let n_bins = 257;
        let sr = 16_000;
        let k = 40;
        let mut power = Matrix::zeros(1, n_bins);
        power.set(0, k, 1.0);
        let lm = log_mel(&power, 20, sr, 0.0, 8000.0).unwrap();
        // evaluate the filterbank row by hand from the mel edge formula
        let f = k as f64 * sr as f64 / 512.0;
        let (mlo, mhi) = (hz_to_mel(0.0), hz_to_mel(8000.0));
        for m in 0..20 {
            let e = |i: usize| mel_to_hz(mlo + (mhi - mlo) * i as f64 / 21.0);
            let (lo, c, hi) = (e(m), e(m + 1), e(m + 2));
            let tri = if f > lo && f < c {
                (f - lo) / (c - lo)
            } else if f >= c && f < hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
            let expected = (tri * 2.0 / (hi - lo) + LOG_EPS).ln();
            assert!((lm.get(0, m) - expected).abs() < 1e-12, "band {m}");
        }
        let active = (0..20).filter(|&m| lm.get(0, m) > LOG_EPS.ln()).count();
        assert!((1..=2).contains(&active));
    }

    #[test]
    fn hop_delay_shifts_rows() {
        let mut rng_state = 12345u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng_state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let x: Vec<f64> = (0..2000).map(|_| next()).collect();
        let hop = 32;
        let mut delayed = vec![0.0; hop];
        delayed.extend_from_slice(&x);
        let a = stft_power(&Waveform::new(x, 16_000).unwrap(), 128, hop).unwrap();
        let b = stft_power(&Waveform::new(delayed, 16_000).unwrap(), 128, hop).unwrap();
        for t in 2..a.rows() - 3 {
            for k in 0..a.cols() {
                assert!((a.get(t, k) - b.get(t + 1, k)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn frame_count_formula() {
        let cfg = FrontendConfig::default();
        for len in [256usize, 1000, 4096, 16_001] {
            let w = Waveform::new(vec![0.01; len], 16_000).unwrap();
            let p = stft_power(&w, cfg.window_len, cfg.hop_len).unwrap();
            assert_eq!(p.rows(), cfg.frame_count(len));
            assert_eq!(p.rows(), len / 256 + 1);
        }
    }

    #[test]
    fn log_mel_rejects_non_finite() {
        let mut p = Matrix::zeros(2, 33);
        p.set(1, 3, f64::NAN);
        assert!(log_mel(&p, 4, 16_000, 0.0, 8000.0).is_err());
    }

    #[test]
    fn wav_round_trip_and_resample() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let x: Vec<f64> = (0..800).map(|n| (n as f64 * 0.05).sin() * 0.5).collect();
        Waveform::new(x.clone(), 8000).unwrap().write_wav(&path).unwrap();
        let back = Waveform::read_wav(&path).unwrap();
        assert_eq!(back.sample_rate_hz(), 8000);
        for (a, b) in x.iter().zip(back.samples()) {
            assert!((a - b).abs() < 1e-4);
        }
        let up = back.resample_linear(16_000).unwrap();
        assert_eq!(up.samples().len(), 1600);
        assert!((up.samples()[2] - back.samples()[1]).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn log_mel_is_monotone_in_power(
            vals in proptest::collection::vec(0.0f64..10.0, 33),
            scale in 1.0f64..50.0,
        ) {
            let p = Matrix::from_vec(1, 33, vals).unwrap();
            let a = log_mel(&p, 6, 16_000, 0.0, 8000.0).unwrap();
            let b = log_mel(&p.map(|v| v * scale), 6, 16_000, 0.0, 8000.0).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                proptest::prop_assert!(y >= x);
            }
        }
    }
}
