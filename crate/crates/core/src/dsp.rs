//! MFCC frontend: waveform → framed power spectrum → log mel energies → DCT.
//!
//! Every stage is a pure function. [`MfccExtractor`] caches the FFT plan,
//! window, filterbank and DCT basis for batch featurization; the free
//! functions build a throwaway extractor per call.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, shape_err, Result};
use crate::scalar::Scalar;

pub const SAMPLE_RATE: u32 = 16_000;

/// Added to filterbank energies before the logarithm so silence stays finite.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    #[default]
    Hann,
    Rectangular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfccConfig {
    pub n_mfcc: usize,
    pub n_mels: usize,
    pub frame_length: usize,
    pub hop_length: usize,
    pub fft_size: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub target_length: usize,
    pub sample_rate: u32,
    pub window: WindowKind,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            n_mfcc: 40,
            n_mels: 40,
            frame_length: 400,
            hop_length: 160,
            fft_size: 512,
            fmin: 20.0,
            fmax: 8000.0,
            target_length: 16_000,
            sample_rate: SAMPLE_RATE,
            window: WindowKind::Hann,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return Err(input_err!("n_mfcc ({}) must be in 1..=n_mels ({})", self.n_mfcc, self.n_mels));
        }
        if self.frame_length == 0 || self.frame_length > self.fft_size {
            return Err(input_err!("frame_length ({}) must be in 1..=fft_size ({})", self.frame_length, self.fft_size));
        }
        if self.hop_length == 0 {
            return Err(input_err!("hop_length must be positive"));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            return Err(input_err!(
                "need 0 <= fmin ({}) < fmax ({}) <= sample_rate/2 ({nyquist})",
                self.fmin,
                self.fmax
            ));
        }
        if self.target_length < self.frame_length {
            return Err(input_err!("target_length shorter than one frame"));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frames produced from a clip of `target_length` samples.
    pub fn n_frames(&self) -> usize {
        (self.target_length - self.frame_length) / self.hop_length + 1
    }
}

/// Row-major `n_frames × n_coeffs` matrix (time × coefficient).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    n_frames: usize,
    n_coeffs: usize,
    values: Vec<T>,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn new(n_frames: usize, n_coeffs: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != n_frames * n_coeffs {
            return Err(shape_err!(
                "feature matrix {n_frames}x{n_coeffs} needs {} values, got {}",
                n_frames * n_coeffs,
                values.len()
            ));
        }
        Ok(Self { n_frames, n_coeffs, values })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_coeffs(&self) -> usize {
        self.n_coeffs
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[T] {
        &self.values[t * self.n_coeffs..(t + 1) * self.n_coeffs]
    }

    pub fn get(&self, t: usize, c: usize) -> T {
        self.values[t * self.n_coeffs + c]
    }
}

/// Row-major `n_frames × n_bins` squared-magnitude spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrogram<T> {
    pub n_frames: usize,
    pub n_bins: usize,
    pub values: Vec<T>,
}

/// Row-major `n_frames × n_mels` natural-log filterbank energies.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMel<T> {
    pub n_frames: usize,
    pub n_mels: usize,
    pub values: Vec<T>,
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// End-pads with zeros or truncates at the end to exactly `target_length`.
pub fn pad_or_trim(w: &Waveform, target_length: usize) -> Result<Waveform> {
    if w.is_empty() {
        return Err(input_err!("empty waveform"));
    }
    let mut samples = w.samples.clone();
    samples.resize(target_length, 0.0);
    Ok(Waveform::new(samples, w.sample_rate))
}

/// Triangular mel filters as `(first_bin, weights)` rows.
///
/// Corner frequencies are snapped to FFT bins, so each filter reaches
/// weight 1.0 exactly at its centre bin.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    filters: Vec<(usize, Vec<f64>)>,
    n_bins: usize,
}

impl MelFilterbank {
    pub fn new(cfg: &MfccConfig) -> Result<Self> {
        cfg.validate()?;
        let n_bins = cfg.n_bins();
        let lo = hz_to_mel(cfg.fmin);
        let hi = hz_to_mel(cfg.fmax);
        let step = (hi - lo) / (cfg.n_mels + 1) as f64;
        let bins: Vec<usize> = (0..cfg.n_mels + 2)
            .map(|i| {
                let hz = mel_to_hz(lo + step * i as f64);
                let b = ((cfg.fft_size + 1) as f64 * hz / cfg.sample_rate as f64).floor() as usize;
                b.min(n_bins - 1)
            })
            .collect();
        let filters = bins
            .windows(3)
            .map(|w| {
                let (l, c, r) = (w[0], w[1], w[2]);
                let weights = (l..=r).map(|b| triangle_weight(b, l, c, r)).collect();
                (l, weights)
            })
            .collect();
        Ok(Self { filters, n_bins })
    }

    pub fn n_filters(&self) -> usize {
        self.filters.len()
    }

    /// Weight of filter `m` at spectrum bin `bin` (zero outside its support).
    pub fn weight(&self, m: usize, bin: usize) -> f64 {
        let (start, w) = &self.filters[m];
        if bin < *start {
            return 0.0;
        }
        w.get(bin - start).copied().unwrap_or(0.0)
    }

    /// Bin where filter `m` attains its maximum.
    pub fn centre_bin(&self, m: usize) -> usize {
        let (start, w) = &self.filters[m];
        let offset = w.iter().position(|&x| x == 1.0).expect("unit peak");
        start + offset
    }

    fn apply<T: Scalar>(&self, power: &[T], out: &mut [T]) {
        debug_assert_eq!(power.len(), self.n_bins);
        for ((start, w), o) in self.filters.iter().zip(out.iter_mut()) {
            let energy: f64 = w.iter().zip(&power[*start..]).map(|(wi, p)| wi * p.as_f64()).sum();
            *o = T::from_f64_lossy((energy + LOG_FLOOR).ln());
        }
    }
}

fn triangle_weight(b: usize, l: usize, c: usize, r: usize) -> f64 {
    if b == c {
        1.0
    } else if b < c {
        (b - l) as f64 / (c - l) as f64
    } else {
        (r - b) as f64 / (r - c) as f64
    }
}

/// Orthonormal DCT-II basis, `n_out × n_in`, row-major.
pub fn dct_ii_basis(n_in: usize, n_out: usize) -> Vec<f64> {
    let n = n_in as f64;
    let mut basis = Vec::with_capacity(n_in * n_out);
    for k in 0..n_out {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for i in 0..n_in {
            basis.push(scale * (PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos());
        }
    }
    basis
}

/// Precomputed MFCC pipeline for one configuration.
pub struct MfccExtractor<T: Scalar> {
    cfg: MfccConfig,
    window: Vec<T>,
    fft: Arc<dyn Fft<T>>,
    filterbank: MelFilterbank,
    dct: Vec<f64>,
}

impl<T: Scalar> MfccExtractor<T> {
    pub fn new(cfg: MfccConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.frame_length;
        let window = (0..n)
            .map(|i| match cfg.window {
                // periodic Hann
                WindowKind::Hann => T::from_f64_lossy(0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()),
                WindowKind::Rectangular => T::one(),
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        let filterbank = MelFilterbank::new(&cfg)?;
        let dct = dct_ii_basis(cfg.n_mels, cfg.n_mfcc);
        Ok(Self { cfg, window, fft, filterbank, dct })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    fn check_rate(&self, w: &Waveform) -> Result<()> {
        if w.sample_rate != self.cfg.sample_rate {
            return Err(input_err!("waveform sampled at {} Hz, expected {}", w.sample_rate, self.cfg.sample_rate));
        }
        if let Some(bad) = w.samples.iter().position(|s| !s.is_finite()) {
            return Err(input_err!("non-finite sample at index {bad}"));
        }
        Ok(())
    }

    pub fn stft_power(&self, w: &Waveform) -> Result<PowerSpectrogram<T>> {
        self.check_rate(w)?;
        let cfg = &self.cfg;
        if cfg.frame_length > w.len() {
            return Err(input_err!("frame_length {} exceeds waveform length {}", cfg.frame_length, w.len()));
        }
        let n_frames = (w.len() - cfg.frame_length) / cfg.hop_length + 1;
        let n_bins = cfg.n_bins();
        let mut values = Vec::with_capacity(n_frames * n_bins);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); cfg.fft_size];
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); self.fft.get_inplace_scratch_len()];
        for f in 0..n_frames {
            let frame = &w.samples[f * cfg.hop_length..f * cfg.hop_length + cfg.frame_length];
            for (slot, (s, win)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *slot = Complex::new(T::from_f64_lossy(*s as f64) * *win, T::zero());
            }
            for slot in &mut buf[cfg.frame_length..] {
                *slot = Complex::new(T::zero(), T::zero());
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            values.extend(buf[..n_bins].iter().map(|c| c.norm_sqr()));
        }
        Ok(PowerSpectrogram { n_frames, n_bins, values })
    }

    pub fn log_mel_energies(&self, spec: &PowerSpectrogram<T>) -> Result<LogMel<T>> {
        if spec.n_bins != self.cfg.n_bins() || spec.values.len() != spec.n_frames * spec.n_bins {
            return Err(shape_err!(
                "spectrogram has {} bins, fft_size {} implies {}",
                spec.n_bins,
                self.cfg.fft_size,
                self.cfg.n_bins()
            ));
        }
        let n_mels = self.cfg.n_mels;
        let mut values = vec![T::zero(); spec.n_frames * n_mels];
        for (row, out) in spec.values.chunks_exact(spec.n_bins).zip(values.chunks_exact_mut(n_mels)) {
            self.filterbank.apply(row, out);
        }
        Ok(LogMel { n_frames: spec.n_frames, n_mels, values })
    }

    /// Orthonormal DCT-II along the mel axis, truncated to `n_mfcc`.
    pub fn cepstrum(&self, logmel: &LogMel<T>) -> Result<FeatureMatrix<T>> {
        if logmel.n_mels != self.cfg.n_mels {
            return Err(shape_err!("expected {} mel bands, got {}", self.cfg.n_mels, logmel.n_mels));
        }
        let n_out = self.cfg.n_mfcc;
        let mut values = Vec::with_capacity(logmel.n_frames * n_out);
        for row in logmel.values.chunks_exact(logmel.n_mels) {
            for basis in self.dct.chunks_exact(logmel.n_mels) {
                let acc: f64 = basis.iter().zip(row).map(|(b, x)| b * x.as_f64()).sum();
                values.push(T::from_f64_lossy(acc));
            }
        }
        FeatureMatrix::new(logmel.n_frames, n_out, values)
    }

    pub fn extract(&self, w: &Waveform) -> Result<FeatureMatrix<T>> {
        let padded = pad_or_trim(w, self.cfg.target_length)?;
        let spec = self.stft_power(&padded)?;
        let logmel = self.log_mel_energies(&spec)?;
        self.cepstrum(&logmel)
    }
}

pub fn stft_power<T: Scalar>(w: &Waveform, cfg: &MfccConfig) -> Result<PowerSpectrogram<T>> {
    MfccExtractor::new(cfg.clone())?.stft_power(w)
}

pub fn log_mel_energies<T: Scalar>(spec: &PowerSpectrogram<T>, cfg: &MfccConfig) -> Result<LogMel<T>> {
    MfccExtractor::new(cfg.clone())?.log_mel_energies(spec)
}

pub fn mfcc<T: Scalar>(w: &Waveform, cfg: &MfccConfig) -> Result<FeatureMatrix<T>> {
    MfccExtractor::new(cfg.clone())?.extract(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn wave(samples: Vec<f32>) -> Waveform {
        Waveform::new(samples, SAMPLE_RATE)
    }

    fn random_wave(seed: u64, n: usize) -> Waveform {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        wave((0..n).map(|_| rng.random_range(-0.5f32..0.5)).collect())
    }

    /// Direct O(N²) DFT power of a real frame zero-padded to `n`.
    fn dft_power(frame: &[f64], n: usize) -> Vec<f64> {
        (0..n / 2 + 1)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, x) in frame.iter().enumerate() {
                    let ang = -2.0 * PI * (k * i) as f64 / n as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn pad_or_trim_cases() {
        let same = pad_or_trim(&wave(vec![0.25; 16000]), 16000).unwrap();
        assert_eq!(same.samples, vec![0.25; 16000]);

        let short = pad_or_trim(&wave(vec![0.5; 15000]), 16000).unwrap();
        assert_eq!(short.len(), 16000);
        assert!(short.samples[..15000].iter().all(|&s| s == 0.5));
        assert!(short.samples[15000..].iter().all(|&s| s == 0.0));

        let long: Vec<f32> = (0..17000).map(|i| i as f32).collect();
        let cut = pad_or_trim(&wave(long.clone()), 16000).unwrap();
        assert_eq!(cut.samples, long[..16000]);

        assert!(pad_or_trim(&wave(vec![]), 16000).is_err());
    }

    #[test]
    fn zero_signal_gives_zero_spectrogram() {
        let s: PowerSpectrogram<f64> = stft_power(&wave(vec![0.0; 16000]), &MfccConfig::default()).unwrap();
        assert_eq!((s.n_frames, s.n_bins), (98, 257));
        assert!(s.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_with_rectangular_window_is_flat() {
        let cfg = MfccConfig { window: WindowKind::Rectangular, ..MfccConfig::default() };
        let mut samples = vec![0.0; 16000];
        samples[160] = 1.0; // start of frame 1
        let s: PowerSpectrogram<f64> = stft_power(&wave(samples.clone()), &cfg).unwrap();
        let frame1 = &s.values[s.n_bins..2 * s.n_bins];
        let oracle = dft_power(&[1.0], cfg.fft_size);
        for (a, b) in frame1.iter().zip(&oracle) {
            assert!((a - 1.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stft_matches_direct_dft() {
        let cfg = MfccConfig::default();
        let w = random_wave(3, 16000);
        let s: PowerSpectrogram<f64> = stft_power(&w, &cfg).unwrap();
        for f in [0usize, 41, 97] {
            let frame: Vec<f64> = (0..cfg.frame_length)
                .map(|i| {
                    let hann = 0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.frame_length as f64).cos();
                    w.samples[f * cfg.hop_length + i] as f64 * hann
                })
                .collect();
            let oracle = dft_power(&frame, cfg.fft_size);
            let got = &s.values[f * s.n_bins..(f + 1) * s.n_bins];
            for (a, b) in got.iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn hann_sinusoid_leaks_into_adjacent_bins_only() {
        // One frame spanning the whole transform: X[k] = N/4, X[k±1] = -N/8.
        let n = 512;
        let k = 37;
        let cfg = MfccConfig { frame_length: n, hop_length: n, fft_size: n, target_length: n, ..MfccConfig::default() };
        let samples = (0..n).map(|i| (2.0 * PI * (k * i) as f64 / n as f64).cos() as f32).collect();
        let s: PowerSpectrogram<f64> = stft_power(&wave(samples), &cfg).unwrap();
        assert_eq!(s.n_frames, 1);
        let nf = n as f64;
        for (bin, &p) in s.values.iter().enumerate() {
            let expected = match bin as isize - k as isize {
                0 => nf * nf / 16.0,
                -1 | 1 => nf * nf / 64.0,
                _ => 0.0,
            };
            assert!((p - expected).abs() < 1e-6 * nf * nf, "bin {bin}: {p} vs {expected}");
        }
    }

    #[test]
    fn silence_log_mel_is_log_floor() {
        let cfg = MfccConfig::default();
        let spec = PowerSpectrogram { n_frames: 2, n_bins: 257, values: vec![0.0f64; 514] };
        let lm = log_mel_energies(&spec, &cfg).unwrap();
        assert!(lm.values.iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn one_hot_at_filter_peak() {
        let cfg = MfccConfig::default();
        let fb = MelFilterbank::new(&cfg).unwrap();
        let m = 20;
        let c = fb.centre_bin(m);
        let value = 3.5;
        let mut values = vec![0.0f64; 257];
        values[c] = value;
        let lm = log_mel_energies(&PowerSpectrogram { n_frames: 1, n_bins: 257, values }, &cfg).unwrap();
        assert_eq!(lm.values[m], (1.0 * value + LOG_FLOOR).ln());

        // Hand-evaluate the neighbouring triangles from the corner bins.
        let hz = |i: usize| {
            let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
            mel_to_hz(lo + (hi - lo) / 41.0 * i as f64)
        };
        let bin = |i: usize| (513.0 * hz(i) / 16000.0).floor() as usize;
        for nb in [m - 1, m + 1] {
            let (l, cc, r) = (bin(nb), bin(nb + 1), bin(nb + 2));
            let w = if c == cc {
                1.0
            } else if c < l || c > r {
                0.0
            } else if c < cc {
                (c - l) as f64 / (cc - l) as f64
            } else {
                (r - c) as f64 / (r - cc) as f64
            };
            assert!((lm.values[nb] - (w * value + LOG_FLOOR).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn dct_of_constant_row_keeps_only_dc() {
        let cfg = MfccConfig::default();
        let ex = MfccExtractor::<f64>::new(cfg).unwrap();
        let lm = LogMel { n_frames: 1, n_mels: 40, values: vec![-2.5; 40] };
        let f = ex.cepstrum(&lm).unwrap();
        assert!((f.get(0, 0) - (-2.5 * 40f64.sqrt())).abs() < 1e-9);
        for c in 1..40 {
            assert!(f.get(0, c).abs() < 1e-6);
        }
    }

    #[test]
    fn silence_frames_are_identical() {
        let f: FeatureMatrix<f64> = mfcc(&wave(vec![0.0; 16000]), &MfccConfig::default()).unwrap();
        assert_eq!((f.n_frames(), f.n_coeffs()), (98, 40));
        for t in 1..98 {
            assert_eq!(f.frame(t), f.frame(0));
        }
    }

    #[test]
    fn dct_is_invertible_and_energy_preserving() {
        let cfg = MfccConfig::default();
        let ex = MfccExtractor::<f64>::new(cfg.clone()).unwrap();
        let w = random_wave(11, 16000);
        let lm = ex.log_mel_energies(&ex.stft_power(&w).unwrap()).unwrap();
        let f = ex.extract(&w).unwrap();
        assert_eq!((f.n_frames(), f.n_coeffs()), (98, 40));
        // Inverse via the direct DCT-III definition.
        let n = 40.0f64;
        for t in 0..98 {
            let row = &lm.values[t * 40..(t + 1) * 40];
            let coeffs = f.frame(t);
            let e_mel: f64 = row.iter().map(|x| x * x).sum();
            let e_dct: f64 = coeffs.iter().map(|x| x * x).sum();
            assert!((e_mel - e_dct).abs() <= 1e-9 * e_mel);
            for (i, &x) in row.iter().enumerate() {
                let rec: f64 = coeffs
                    .iter()
                    .enumerate()
                    .map(|(k, c)| {
                        let s = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                        s * c * (PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos()
                    })
                    .sum();
                assert!((rec - x).abs() <= 1e-5 * x.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn featurization_is_deterministic_and_finite() {
        let w = random_wave(5, 15321);
        let a: FeatureMatrix<f32> = mfcc(&w, &MfccConfig::default()).unwrap();
        let b: FeatureMatrix<f32> = mfcc(&w, &MfccConfig::default()).unwrap();
        assert_eq!(
            a.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(a.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_bad_configs_and_rates() {
        assert!(MfccConfig { n_mfcc: 41, ..MfccConfig::default() }.validate().is_err());
        assert!(MfccConfig { frame_length: 600, ..MfccConfig::default() }.validate().is_err());
        assert!(MfccConfig { fmax: 9000.0, ..MfccConfig::default() }.validate().is_err());
        let w = Waveform::new(vec![0.0; 16000], 8000);
        assert!(mfcc::<f64>(&w, &MfccConfig::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn every_filter_peaks_at_one(
            n_mels in 8usize..64,
            fft_pow in 9u32..11,
            fmin in 0.0f64..300.0,
            fmax_frac in 0.5f64..1.0,
        ) {
            let cfg = MfccConfig {
                n_mels,
                n_mfcc: n_mels,
                fft_size: 1 << fft_pow,
                fmin,
                fmax: 8000.0 * fmax_frac,
                ..MfccConfig::default()
            };
            let fb = MelFilterbank::new(&cfg).unwrap();
            prop_assert_eq!(fb.n_filters(), n_mels);
            for m in 0..n_mels {
                let peak = (0..cfg.n_bins()).map(|b| fb.weight(m, b)).fold(0.0, f64::max);
                prop_assert_eq!(peak, 1.0);
            }
        }

        #[test]
        fn one_second_clip_shape(len in 8000usize..24000, seed in 0u64..1000) {
            let f: FeatureMatrix<f32> = mfcc(&random_wave(seed, len), &MfccConfig::default()).unwrap();
            prop_assert_eq!((f.n_frames(), f.n_coeffs()), (98, 40));
        }
    }
}
