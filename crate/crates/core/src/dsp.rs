//! Short-time Fourier analysis, mel filterbanks and Griffin-Lim phase
//! reconstruction.
//!
//! All spectral arrays are stored row-major as `bins × frames` in `f64`.
//! Analysis pads the signal by `n_fft / 2` samples on each side with a
//! reflection of the signal, so frame `t` is centred on sample `t * hop`.
//!
//! [`istft`] is the least-squares inverse of [`stft`] *including* the
//! reflective padding: contributions that land in the padded margins are
//! folded back onto the samples they mirror. That makes Griffin-Lim's
//! projection step exact and keeps its consistency distance monotone.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::audio_io::{AudioBuffer, WORKING_RATE_HZ};

pub const DEFAULT_N_FFT: usize = 1024;
pub const DEFAULT_HOP: usize = 256;
pub const DEFAULT_N_MELS: usize = 128;
pub const DEFAULT_F_MIN_HZ: f64 = 40.0;
pub const DEFAULT_F_MAX_HZ: f64 = 8000.0;
pub const DEFAULT_GRIFFIN_LIM_ITERS: usize = 60;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("invalid STFT configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid filterbank band: {0}")]
    InvalidBand(String),
    #[error("degenerate band: filter {index} covers no FFT bin (n_mels too large for n_fft)")]
    DegenerateBand { index: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("window/hop combination leaves sample {index} with zero envelope")]
    ZeroEnvelope { index: usize },
    #[error("empty audio")]
    EmptyAudio,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub window: Vec<f64>,
    pub sample_rate_hz: u32,
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

impl Default for StftConfig {
    fn default() -> Self {
        Self::hann(DEFAULT_N_FFT, DEFAULT_HOP, WORKING_RATE_HZ).expect("default profile is valid")
    }
}

impl StftConfig {
    pub fn hann(n_fft: usize, hop: usize, sample_rate_hz: u32) -> Result<Self, DspError> {
        Self::with_window(n_fft, hop, hann_window(n_fft), sample_rate_hz)
    }

    pub fn with_window(
        n_fft: usize,
        hop: usize,
        window: Vec<f64>,
        sample_rate_hz: u32,
    ) -> Result<Self, DspError> {
        if n_fft < 2 || n_fft % 2 != 0 {
            return Err(DspError::InvalidConfig(format!("n_fft {n_fft} must be even and >= 2")));
        }
        if hop == 0 || hop > n_fft {
            return Err(DspError::InvalidConfig(format!("hop {hop} must lie in 1..={n_fft}")));
        }
        if window.len() != n_fft {
            return Err(DspError::InvalidConfig(format!(
                "window length {} != n_fft {n_fft}",
                window.len()
            )));
        }
        if window.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(DspError::InvalidConfig("window values must lie in [0, 1]".into()));
        }
        if sample_rate_hz == 0 {
            return Err(DspError::InvalidConfig("sample rate must be positive".into()));
        }
        Ok(Self {
            n_fft,
            hop,
            window,
            sample_rate_hz,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn n_frames(&self, signal_len: usize) -> usize {
        signal_len / self.hop + 1
    }

    pub fn bin_hz(&self, bin: usize) -> f64 {
        bin as f64 * f64::from(self.sample_rate_hz) / self.n_fft as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    /// `n_bins × frames`, row-major.
    pub bins: Vec<Complex64>,
    pub frames: usize,
    /// Length of the analysed signal, restored by [`istft`].
    pub signal_len: usize,
    pub config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn n_bins(&self) -> usize {
        self.config.n_bins()
    }

    pub fn at(&self, bin: usize, frame: usize) -> Complex64 {
        self.bins[bin * self.frames + frame]
    }

    pub fn magnitude(&self) -> Spectrogram {
        Spectrogram {
            magnitudes: self.bins.iter().map(|c| c.norm()).collect(),
            frames: self.frames,
            signal_len: self.signal_len,
            config: self.config.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    /// `n_bins × frames`, row-major, non-negative.
    pub magnitudes: Vec<f64>,
    pub frames: usize,
    pub signal_len: usize,
    pub config: StftConfig,
}

impl Spectrogram {
    pub fn n_bins(&self) -> usize {
        self.config.n_bins()
    }

    pub fn zeros(config: StftConfig, signal_len: usize) -> Self {
        let frames = config.n_frames(signal_len);
        Self {
            magnitudes: vec![0.0; config.n_bins() * frames],
            frames,
            signal_len,
            config,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `n_mels × n_bins`, row-major.
    pub weights: Vec<f64>,
    pub n_mels: usize,
    pub n_bins: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub sample_rate_hz: u32,
    pinv: OnceLock<Vec<f64>>,
}

impl PartialEq for MelFilterbank {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights
            && self.n_mels == other.n_mels
            && self.n_bins == other.n_bins
            && self.f_min_hz == other.f_min_hz
            && self.f_max_hz == other.f_max_hz
            && self.sample_rate_hz == other.sample_rate_hz
    }
}

impl MelFilterbank {
    pub fn default_profile() -> Self {
        build_mel_filterbank(
            DEFAULT_N_MELS,
            DEFAULT_F_MIN_HZ,
            DEFAULT_F_MAX_HZ,
            WORKING_RATE_HZ,
            DEFAULT_N_FFT,
        )
        .expect("default filterbank is valid")
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// Moore-Penrose pseudo-inverse (`n_bins × n_mels`), computed once.
    pub fn pseudo_inverse(&self) -> &[f64] {
        self.pinv.get_or_init(|| {
            let w = DMatrix::from_row_slice(self.n_mels, self.n_bins, &self.weights);
            let p = w
                .pseudo_inverse(1e-12)
                .expect("SVD of a finite filterbank converges");
            let mut out = vec![0.0; self.n_bins * self.n_mels];
            for r in 0..self.n_bins {
                for c in 0..self.n_mels {
                    out[r * self.n_mels + c] = p[(r, c)];
                }
            }
            out
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    /// `n_mels × frames`, row-major.
    pub magnitudes: Vec<f64>,
    pub n_mels: usize,
    pub frames: usize,
    pub signal_len: usize,
}

impl MelSpectrogram {
    pub fn at(&self, mel: usize, frame: usize) -> f64 {
        self.magnitudes[mel * self.frames + frame]
    }

    /// Frames `[start, start + len)` as a new spectrogram.
    pub fn crop(&self, start: usize, len: usize) -> MelSpectrogram {
        assert!(start + len <= self.frames, "crop out of range");
        let mut magnitudes = Vec::with_capacity(self.n_mels * len);
        for m in 0..self.n_mels {
            let row = &self.magnitudes[m * self.frames..(m + 1) * self.frames];
            magnitudes.extend_from_slice(&row[start..start + len]);
        }
        MelSpectrogram {
            magnitudes,
            n_mels: self.n_mels,
            frames: len,
            signal_len: len.saturating_sub(1) * DEFAULT_HOP,
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

pub fn build_mel_filterbank(
    n_mels: usize,
    f_min: f64,
    f_max: f64,
    sample_rate_hz: u32,
    n_fft: usize,
) -> Result<MelFilterbank, DspError> {
    let nyquist = f64::from(sample_rate_hz) / 2.0;
    if n_mels == 0 {
        return Err(DspError::InvalidBand("n_mels must be >= 1".into()));
    }
    if !(0.0 <= f_min && f_min < f_max && f_max <= nyquist) {
        return Err(DspError::InvalidBand(format!(
            "need 0 <= f_min < f_max <= {nyquist}, got [{f_min}, {f_max}]"
        )));
    }
    if n_fft < 2 {
        return Err(DspError::InvalidBand("n_fft must be >= 2".into()));
    }
    let n_bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();

    let mut weights = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * f64::from(sample_rate_hz) / n_fft as f64;
            let rising = (f - left) / (centre - left);
            let falling = (right - f) / (right - centre);
            *w = rising.min(falling).max(0.0);
        }
        if !row.iter().any(|&w| w > 0.0) {
            return Err(DspError::DegenerateBand { index: m });
        }
    }
    Ok(MelFilterbank {
        weights,
        n_mels,
        n_bins,
        f_min_hz: f_min,
        f_max_hz: f_max,
        sample_rate_hz,
        pinv: OnceLock::new(),
    })
}

/// Index into a signal of length `len` for padded position `i`, reflecting
/// about the end samples without repeating them (`[.., 2, 1 | 0, 1, 2, ..]`).
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let r = i.rem_euclid(period);
    if r < len as isize {
        r as usize
    } else {
        (period - r) as usize
    }
}

struct FftPair {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl FftPair {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }
}

pub fn stft(audio: &AudioBuffer, config: &StftConfig) -> Result<ComplexSpectrogram, DspError> {
    let signal: Vec<f64> = audio.samples.iter().map(|&s| f64::from(s)).collect();
    stft_f64(&signal, config)
}

pub fn stft_f64(signal: &[f64], config: &StftConfig) -> Result<ComplexSpectrogram, DspError> {
    if signal.is_empty() {
        return Err(DspError::EmptyAudio);
    }
    let n = config.n_fft;
    let half = (n / 2) as isize;
    let n_bins = config.n_bins();
    let frames = config.n_frames(signal.len());
    let fft = FftPair::new(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut bins = vec![Complex64::new(0.0, 0.0); n_bins * frames];
    for t in 0..frames {
        let start = (t * config.hop) as isize - half;
        for (j, b) in buf.iter_mut().enumerate() {
            let s = signal[reflect_index(start + j as isize, signal.len())];
            *b = Complex64::new(s * config.window[j], 0.0);
        }
        fft.forward.process(&mut buf);
        for k in 0..n_bins {
            bins[k * frames + t] = buf[k];
        }
    }
    Ok(ComplexSpectrogram {
        bins,
        frames,
        signal_len: signal.len(),
        config: config.clone(),
    })
}

pub fn istft(spec: &ComplexSpectrogram) -> Result<AudioBuffer, DspError> {
    let samples = istft_f64(spec)?;
    Ok(AudioBuffer {
        samples: samples.into_iter().map(|s| s as f32).collect(),
        sample_rate_hz: spec.config.sample_rate_hz,
    })
}

pub fn istft_f64(spec: &ComplexSpectrogram) -> Result<Vec<f64>, DspError> {
    let config = &spec.config;
    let n = config.n_fft;
    let n_bins = config.n_bins();
    if spec.bins.len() != n_bins * spec.frames {
        return Err(DspError::ShapeMismatch {
            expected: format!("{n_bins} x {} bins", spec.frames),
            got: format!("{} values", spec.bins.len()),
        });
    }
    let len = spec.signal_len;
    if len == 0 {
        return Err(DspError::EmptyAudio);
    }
    let half = (n / 2) as isize;
    let fft = FftPair::new(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut acc = vec![0.0; len];
    let mut envelope = vec![0.0; len];
    let scale = 1.0 / n as f64;
    for t in 0..spec.frames {
        for k in 0..n_bins {
            buf[k] = spec.bins[k * spec.frames + t];
        }
        for k in n_bins..n {
            buf[k] = buf[n - k].conj();
        }
        fft.inverse.process(&mut buf);
        let start = (t * config.hop) as isize - half;
        for (j, b) in buf.iter().enumerate() {
            let w = config.window[j];
            let i = reflect_index(start + j as isize, len);
            acc[i] += w * b.re * scale;
            envelope[i] += w * w;
        }
    }
    for (i, (a, e)) in acc.iter_mut().zip(&envelope).enumerate() {
        if *e < 1e-10 {
            return Err(DspError::ZeroEnvelope { index: i });
        }
        *a /= e;
    }
    Ok(acc)
}

fn check_mel_shapes(n_rows: usize, fb_rows: usize, what: &str) -> Result<(), DspError> {
    if n_rows != fb_rows {
        return Err(DspError::ShapeMismatch {
            expected: format!("{fb_rows} {what}"),
            got: format!("{n_rows} {what}"),
        });
    }
    Ok(())
}

/// Row-major `(a_rows × inner) · (inner × cols)`.
fn matmul(a: &[f64], b: &[f64], a_rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a_rows * cols];
    if a_rows == 0 || inner == 0 || cols == 0 {
        return out;
    }
    // SAFETY: slice lengths match the dimensions and strides passed.
    unsafe {
        matrixmultiply::dgemm(
            a_rows,
            inner,
            cols,
            1.0,
            a.as_ptr(),
            inner as isize,
            1,
            b.as_ptr(),
            cols as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            cols as isize,
            1,
        );
    }
    out
}

pub fn apply_mel(spec: &Spectrogram, fb: &MelFilterbank) -> Result<MelSpectrogram, DspError> {
    check_mel_shapes(spec.n_bins(), fb.n_bins, "frequency bins")?;
    if spec.magnitudes.len() != spec.n_bins() * spec.frames {
        return Err(DspError::ShapeMismatch {
            expected: format!("{} x {}", spec.n_bins(), spec.frames),
            got: format!("{} values", spec.magnitudes.len()),
        });
    }
    let magnitudes = matmul(&fb.weights, &spec.magnitudes, fb.n_mels, fb.n_bins, spec.frames);
    Ok(MelSpectrogram {
        magnitudes,
        n_mels: fb.n_mels,
        frames: spec.frames,
        signal_len: spec.signal_len,
    })
}

pub fn mel_to_linear(
    mel: &MelSpectrogram,
    fb: &MelFilterbank,
    config: &StftConfig,
) -> Result<Spectrogram, DspError> {
    check_mel_shapes(mel.n_mels, fb.n_mels, "mel bands")?;
    check_mel_shapes(config.n_bins(), fb.n_bins, "frequency bins")?;
    let mut magnitudes = matmul(fb.pseudo_inverse(), &mel.magnitudes, fb.n_bins, fb.n_mels, mel.frames);
    for m in &mut magnitudes {
        if !(*m > 0.0) {
            *m = 0.0;
        }
    }
    Ok(Spectrogram {
        magnitudes,
        frames: mel.frames,
        signal_len: mel.signal_len.max(1),
        config: config.clone(),
    })
}

/// `‖|stft(x)| − target‖_F`.
pub fn consistency_distance(estimate: &ComplexSpectrogram, target: &Spectrogram) -> f64 {
    estimate
        .bins
        .iter()
        .zip(&target.magnitudes)
        .map(|(c, &m)| (c.norm() - m).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn with_phase_of(target: &Spectrogram, phases: impl Iterator<Item = Complex64>) -> ComplexSpectrogram {
    let bins = target
        .magnitudes
        .iter()
        .zip(phases)
        .map(|(&m, unit)| unit * m)
        .collect();
    ComplexSpectrogram {
        bins,
        frames: target.frames,
        signal_len: target.signal_len,
        config: target.config.clone(),
    }
}

fn unit_phase(c: &Complex64) -> Complex64 {
    let r = c.norm();
    if r > 0.0 {
        c / r
    } else {
        Complex64::new(1.0, 0.0)
    }
}

/// Result of a Griffin-Lim run with its per-iteration consistency distances.
#[derive(Debug, Clone)]
pub struct GriffinLimTrace {
    pub signal: Vec<f64>,
    pub distances: Vec<f64>,
}

pub fn griffin_lim_trace(
    spec: &Spectrogram,
    iterations: usize,
    rng_seed: u64,
) -> Result<GriffinLimTrace, DspError> {
    if iterations == 0 {
        return Err(DspError::InvalidConfig("griffin-lim needs at least one iteration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let init = (0..spec.magnitudes.len()).map(|_| {
        let phi = rng.gen::<f64>() * 2.0 * PI;
        Complex64::new(phi.cos(), phi.sin())
    });
    let mut signal = istft_f64(&with_phase_of(spec, init))?;
    let mut distances = Vec::with_capacity(iterations);
    for k in 0..iterations {
        let estimate = stft_f64(&signal, &spec.config)?;
        distances.push(consistency_distance(&estimate, spec));
        if k + 1 < iterations {
            signal = istft_f64(&with_phase_of(spec, estimate.bins.iter().map(unit_phase)))?;
        }
    }
    Ok(GriffinLimTrace { signal, distances })
}

pub fn griffin_lim(spec: &Spectrogram, iterations: usize, rng_seed: u64) -> Result<AudioBuffer, DspError> {
    let trace = griffin_lim_trace(spec, iterations, rng_seed)?;
    Ok(AudioBuffer {
        samples: trace.signal.iter().map(|&s| s as f32).collect(),
        sample_rate_hz: spec.config.sample_rate_hz,
    })
}

/// The fixed analysis/synthesis chain between audio and model features.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub stft: StftConfig,
    pub filterbank: MelFilterbank,
    /// Multiplies linear magnitudes before the mel projection.
    pub magnitude_scale: f64,
    /// Apply `ln(1 + x)` to mel magnitudes.
    pub log_mel: bool,
    pub griffin_lim_iters: usize,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        FeatureSettings::default()
            .extractor()
            .expect("default feature settings are valid")
    }
}

/// Inverse of the Hann window's spectral peak (`Σw / 2`) for the default
/// profile, so a unit-amplitude sinusoid maps to a unit magnitude peak.
pub const UNIT_PEAK_MAGNITUDE_SCALE: f64 = 1.0 / 256.0;

/// Feature scale used by default. Sixteen times [`UNIT_PEAK_MAGNITUDE_SCALE`]
/// so that speech-level mel bins average around 0.1 rather than 0.01,
/// which keeps the L1 reconstruction loss well above the all-zeros baseline.
pub const DEFAULT_MAGNITUDE_SCALE: f64 = 1.0 / 16.0;

/// Serializable description of a [`FeatureExtractor`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureSettings {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub sample_rate_hz: u32,
    pub magnitude_scale: f64,
    pub log_mel: bool,
    pub griffin_lim_iters: usize,
}

impl Default for FeatureSettings {
    fn default() -> Self {
        Self {
            n_fft: DEFAULT_N_FFT,
            hop: DEFAULT_HOP,
            n_mels: DEFAULT_N_MELS,
            f_min_hz: DEFAULT_F_MIN_HZ,
            f_max_hz: DEFAULT_F_MAX_HZ,
            sample_rate_hz: WORKING_RATE_HZ,
            magnitude_scale: DEFAULT_MAGNITUDE_SCALE,
            log_mel: false,
            griffin_lim_iters: DEFAULT_GRIFFIN_LIM_ITERS,
        }
    }
}

impl FeatureSettings {
    pub fn extractor(&self) -> Result<FeatureExtractor, DspError> {
        if !(self.magnitude_scale > 0.0 && self.magnitude_scale.is_finite()) {
            return Err(DspError::InvalidConfig("magnitude_scale must be positive".into()));
        }
        if self.griffin_lim_iters == 0 {
            return Err(DspError::InvalidConfig("griffin_lim_iters must be >= 1".into()));
        }
        Ok(FeatureExtractor {
            stft: StftConfig::hann(self.n_fft, self.hop, self.sample_rate_hz)?,
            filterbank: build_mel_filterbank(
                self.n_mels,
                self.f_min_hz,
                self.f_max_hz,
                self.sample_rate_hz,
                self.n_fft,
            )?,
            magnitude_scale: self.magnitude_scale,
            log_mel: self.log_mel,
            griffin_lim_iters: self.griffin_lim_iters,
        })
    }
}

impl FeatureExtractor {
    pub fn analyze(&self, audio: &AudioBuffer) -> Result<MelSpectrogram, DspError> {
        let mut spec = stft(audio, &self.stft)?.magnitude();
        for m in &mut spec.magnitudes {
            *m *= self.magnitude_scale;
        }
        let mut mel = apply_mel(&spec, &self.filterbank)?;
        if self.log_mel {
            for m in &mut mel.magnitudes {
                *m = m.ln_1p();
            }
        }
        Ok(mel)
    }

    /// Clamp to non-negative, undo compression and scaling, invert the mel
    /// projection and run Griffin-Lim.
    pub fn synthesize(&self, mel: &MelSpectrogram, seed: u64) -> Result<AudioBuffer, DspError> {
        let mut mel = mel.clone();
        for m in &mut mel.magnitudes {
            let v = if *m > 0.0 { *m } else { 0.0 };
            *m = if self.log_mel { v.exp_m1() } else { v } / self.magnitude_scale;
        }
        let linear = mel_to_linear(&mel, &self.filterbank, &self.stft)?;
        let mut audio = griffin_lim(&linear, self.griffin_lim_iters, seed)?;
        for s in &mut audio.samples {
            *s = s.clamp(-1.0, 1.0);
        }
        Ok(audio)
    }
}
