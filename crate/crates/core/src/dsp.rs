//! Spectral frontend and the two input perturbations used during encoder
//! pre-training: random frame slicing and formant shifting.
//!
//! Frames are centered: the signal is reflect-padded by `n_fft / 2` on both
//! sides, so a signal of `len` samples yields `1 + len / hop` frames.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::{Cursor, Read};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt};
use ndarray::Array2;
use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{AudioError, Waveform};
use crate::fsutil::write_atomic;

/// Floor applied to mel magnitudes before taking `log10`.
pub const MEL_FLOOR: f64 = 1e-5;
/// Largest formant warp factor; shifts are drawn from `[1/MAX, MAX]`.
pub const MAX_SHIFT_FACTOR: f64 = 1.4;
/// Cepstral lifter order used for envelope extraction.
pub const DEFAULT_LIFTER_ORDER: usize = 30;
const ENVELOPE_FLOOR: f64 = 1e-10;

const FEATURE_MAGIC: &[u8; 4] = b"STYF";
const FEATURE_VERSION: u16 = 1;

#[derive(Error, Debug)]
pub enum DspError {
    #[error("invalid STFT configuration: {0}")]
    InvalidConfig(String),
    #[error("empty waveform")]
    EmptyWaveform,
    #[error("spectrogram has no frames")]
    NoFrames,
    #[error("invalid mel filterbank parameters: {0}")]
    InvalidFilterbank(String),
    #[error("shift factor {0} outside [1/{MAX_SHIFT_FACTOR}, {MAX_SHIFT_FACTOR}]")]
    ShiftOutOfRange(f64),
    #[error("feature cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
    static PLANS: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> = RefCell::new(HashMap::new());
}

/// Returns a cached FFT plan for the current thread.
pub(crate) fn fft_plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|plans| {
        plans
            .borrow_mut()
            .entry((len, inverse))
            .or_insert_with(|| {
                PLANNER.with(|p| {
                    let mut p = p.borrow_mut();
                    if inverse {
                        p.plan_fft_inverse(len)
                    } else {
                        p.plan_fft_forward(len)
                    }
                })
            })
            .clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub win_length: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            hop: 256,
            win_length: 1024,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<(), DspError> {
        if !self.n_fft.is_power_of_two() || self.n_fft < 2 {
            return Err(DspError::InvalidConfig(format!(
                "n_fft {} is not a power of two",
                self.n_fft
            )));
        }
        if self.hop == 0 || self.hop > self.win_length || self.win_length > self.n_fft {
            return Err(DspError::InvalidConfig(format!(
                "need 0 < hop ({}) <= win_length ({}) <= n_fft ({})",
                self.hop, self.win_length, self.n_fft
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Number of centered frames for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    /// Periodic Hann window of `win_length`, zero-padded (centered) to `n_fft`.
    pub fn window(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.n_fft];
        let offset = (self.n_fft - self.win_length) / 2;
        for i in 0..self.win_length {
            w[offset + i] = 0.5 - 0.5 * (2.0 * PI * i as f64 / self.win_length as f64).cos();
        }
        w
    }
}

/// Index into a signal of length `len` under symmetric (edge-excluded)
/// reflection, valid for any integer position.
pub(crate) fn reflect_index(pos: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = pos.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Copies the `frame_len` samples of a centered analysis frame starting at
/// `start` (in padded coordinates, pad = `frame_len / 2`).
pub(crate) fn centered_frame(samples: &[f64], start: usize, frame_len: usize, out: &mut [f64]) {
    let pad = (frame_len / 2) as isize;
    for (i, o) in out.iter_mut().enumerate().take(frame_len) {
        *o = samples[reflect_index(start as isize + i as isize - pad, samples.len())];
    }
}

#[derive(Clone, Debug)]
pub struct ComplexSpectrogram {
    /// `frames[t][k]`, `k` in `0..=n_fft/2`.
    pub frames: Vec<Vec<Complex64>>,
    pub config: StftConfig,
    pub sample_rate: u32,
    /// Length of the analysed signal, needed to trim the inverse transform.
    pub signal_len: usize,
}

impl ComplexSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn magnitudes(&self) -> Array2<f64> {
        let bins = self.config.n_bins();
        let mut out = Array2::zeros((self.frames.len(), bins));
        for (t, frame) in self.frames.iter().enumerate() {
            for (k, c) in frame.iter().enumerate() {
                out[[t, k]] = c.norm();
            }
        }
        out
    }
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram, DspError> {
    cfg.validate()?;
    if w.is_empty() {
        return Err(DspError::EmptyWaveform);
    }
    let n = cfg.n_fft;
    let window = cfg.window();
    let fft = fft_plan(n, false);
    let n_frames = cfg.n_frames(w.len());
    let mut segment = vec![0.0; n];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut frames = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        centered_frame(&w.samples, t * cfg.hop, n, &mut segment);
        for i in 0..n {
            buf[i] = Complex64::new(segment[i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        frames.push(buf[..cfg.n_bins()].to_vec());
    }
    Ok(ComplexSpectrogram {
        frames,
        config: *cfg,
        sample_rate: w.sample_rate,
        signal_len: w.len(),
    })
}

/// Overlap-add inverse with window-square normalisation.
pub fn istft(s: &ComplexSpectrogram) -> Result<Waveform, DspError> {
    let cfg = s.config;
    cfg.validate()?;
    if s.frames.is_empty() {
        return Err(DspError::NoFrames);
    }
    let n = cfg.n_fft;
    let bins = cfg.n_bins();
    let window = cfg.window();
    let ifft = fft_plan(n, true);
    let total = (s.frames.len() - 1) * cfg.hop + n;
    let mut acc = vec![0.0; total];
    let mut wsum = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (t, frame) in s.frames.iter().enumerate() {
        if frame.len() != bins {
            return Err(DspError::InvalidConfig(format!(
                "frame {t} has {} bins, expected {bins}",
                frame.len()
            )));
        }
        buf[..bins].copy_from_slice(frame);
        for k in 1..n / 2 {
            buf[n - k] = frame[k].conj();
        }
        // DC and Nyquist of a real signal are real
        buf[0].im = 0.0;
        buf[n / 2].im = 0.0;
        ifft.process(&mut buf);
        let start = t * cfg.hop;
        for i in 0..n {
            acc[start + i] += buf[i].re / n as f64 * window[i];
            wsum[start + i] += window[i] * window[i];
        }
    }
    let pad = n / 2;
    let samples = (0..s.signal_len)
        .map(|i| {
            let j = i + pad;
            if j < total && wsum[j] > 1e-11 {
                acc[j] / wsum[j]
            } else {
                0.0
            }
        })
        .collect();
    Ok(Waveform::new(samples, s.sample_rate)?)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `n_mels x n_bins`
    pub weights: Array2<f64>,
    /// `n_mels + 2` edge frequencies in Hz; filter `m` spans
    /// `edges[m]..edges[m + 2]` and peaks at `edges[m + 1]`.
    pub edges_hz: Vec<f64>,
    pub fmin: f64,
    pub fmax: f64,
}

impl MelFilterbank {
    pub fn n_mels(&self) -> usize {
        self.weights.nrows()
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.edges_hz[1..self.edges_hz.len() - 1]
    }

    /// Lower-to-upper edge width of the filter whose center is closest to `freq`.
    pub fn bandwidth_near(&self, freq: f64) -> f64 {
        let m = self
            .centers_hz()
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - freq).abs().total_cmp(&(b.1 - freq).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        self.edges_hz[m + 2] - self.edges_hz[m]
    }
}

/// Triangular, peak-normalised filters centered uniformly on the mel scale.
pub fn mel_filterbank(
    n_mels: usize,
    n_fft: usize,
    sample_rate: u32,
    fmin: f64,
    fmax: f64,
) -> Result<MelFilterbank, DspError> {
    let nyquist = sample_rate as f64 / 2.0;
    if n_mels == 0 {
        return Err(DspError::InvalidFilterbank("n_mels must be positive".into()));
    }
    if !(0.0 <= fmin && fmin < fmax && fmax <= nyquist) {
        return Err(DspError::InvalidFilterbank(format!(
            "need 0 <= fmin ({fmin}) < fmax ({fmax}) <= nyquist ({nyquist})"
        )));
    }
    if n_fft < 2 {
        return Err(DspError::InvalidFilterbank("n_fft too small".into()));
    }
    let bins = n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let (mlo, mhi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges_hz: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut weights = Array2::zeros((n_mels, bins));
    for m in 0..n_mels {
        let (lo, c, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let v = if f > lo && f <= c {
                (f - lo) / (c - lo)
            } else if f > c && f < hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
            weights[[m, k]] = v;
        }
        let peak = weights.row(m).fold(0.0f64, |a, &b| a.max(b));
        if peak > 0.0 {
            weights.row_mut(m).mapv_inplace(|v| v / peak);
        } else {
            // filter narrower than a bin: fall back to the nearest bin
            let k = ((c / bin_hz).round() as usize).min(bins - 1);
            weights[[m, k]] = 1.0;
        }
    }
    Ok(MelFilterbank {
        weights,
        edges_hz,
        fmin,
        fmax,
    })
}

/// Log-mel features, `frames x n_mels`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub data: Array2<f64>,
    /// Seconds between consecutive frames.
    pub frame_period: f64,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.data.ncols()
    }

    /// Number of frames covering `duration_s` seconds.
    pub fn frames_for(&self, duration_s: f64) -> usize {
        frames_for_duration(duration_s, self.frame_period)
    }

    /// Contiguous window of `len` frames starting at `start`, wrapping
    /// around when the source is shorter than `len`.
    pub fn looped_window(&self, start: usize, len: usize) -> MelSpectrogram {
        let n = self.n_frames();
        let mut data = Array2::zeros((len, self.n_mels()));
        for i in 0..len {
            data.row_mut(i).assign(&self.data.row((start + i) % n));
        }
        MelSpectrogram {
            data,
            frame_period: self.frame_period,
        }
    }

    /// Deterministic window of `len` frames centered in the utterance.
    pub fn center_slice(&self, len: usize) -> MelSpectrogram {
        let n = self.n_frames();
        let start = if n >= len { (n - len) / 2 } else { 0 };
        self.looped_window(start, len)
    }
}

pub fn frames_for_duration(duration_s: f64, frame_period: f64) -> usize {
    // tolerance keeps exact multiples from rounding down
    ((duration_s / frame_period) + 1e-9).floor() as usize
}

pub fn mel_from_spectrogram(spec: &ComplexSpectrogram, fb: &MelFilterbank) -> MelSpectrogram {
    let mags = spec.magnitudes();
    let mel = mags.dot(&fb.weights.t());
    MelSpectrogram {
        data: mel.mapv(|v| v.max(MEL_FLOOR).log10()),
        frame_period: spec.config.hop as f64 / spec.sample_rate as f64,
    }
}

pub fn mel_spectrogram(
    w: &Waveform,
    cfg: &StftConfig,
    fb: &MelFilterbank,
) -> Result<MelSpectrogram, DspError> {
    if fb.weights.ncols() != cfg.n_bins() {
        return Err(DspError::InvalidConfig(format!(
            "filterbank has {} bins, STFT produces {}",
            fb.weights.ncols(),
            cfg.n_bins()
        )));
    }
    Ok(mel_from_spectrogram(&stft(w, cfg)?, fb))
}

/// Draws `floor(duration_s / frame_period)` contiguous frames at a uniform
/// random start. Shorter inputs are loop-padded from frame 0.
pub fn random_slice<R: Rng + ?Sized>(
    m: &MelSpectrogram,
    duration_s: f64,
    rng: &mut R,
) -> MelSpectrogram {
    let len = m.frames_for(duration_s).max(1);
    let n = m.n_frames();
    let start = if n > len { rng.random_range(0..=n - len) } else { 0 };
    m.looped_window(start, len)
}

/// Cepstrally smoothed magnitude envelope of one one-sided spectrum row.
pub fn spectral_envelope(frame: &[Complex64], lifter_order: usize) -> Vec<f64> {
    let bins = frame.len();
    if bins < 2 {
        return frame.iter().map(|c| c.norm().max(ENVELOPE_FLOOR)).collect();
    }
    let n = 2 * (bins - 1);
    let mut buf: Vec<Complex64> = vec![Complex64::new(0.0, 0.0); n];
    for k in 0..bins {
        buf[k] = Complex64::new(frame[k].norm().max(ENVELOPE_FLOOR).ln(), 0.0);
    }
    for k in 1..bins - 1 {
        buf[n - k] = buf[k];
    }
    fft_plan(n, true).process(&mut buf);
    let q = lifter_order.min(n / 2 - 1);
    for (i, c) in buf.iter_mut().enumerate() {
        let keep = i <= q || i >= n - q;
        *c = if keep {
            Complex64::new(c.re / n as f64, 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        };
    }
    fft_plan(n, false).process(&mut buf);
    buf[..bins].iter().map(|c| c.re.exp()).collect()
}

/// Formant warp factor, constrained to `[1/MAX_SHIFT_FACTOR, MAX_SHIFT_FACTOR]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftFactor(f64);

impl ShiftFactor {
    pub const IDENTITY: ShiftFactor = ShiftFactor(1.0);

    pub fn new(rho: f64) -> Result<Self, DspError> {
        let tol = 1e-12;
        if rho.is_finite() && rho >= 1.0 / MAX_SHIFT_FACTOR - tol && rho <= MAX_SHIFT_FACTOR + tol
        {
            Ok(Self(rho))
        } else {
            Err(DspError::ShiftOutOfRange(rho))
        }
    }

    /// Maps `u` in `[-1, 1]` log-uniformly onto the admissible range.
    pub fn from_unit(u: f64) -> Self {
        Self(MAX_SHIFT_FACTOR.powf(u.clamp(-1.0, 1.0)))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn sample_shift_factor<R: Rng + ?Sized>(rng: &mut R) -> ShiftFactor {
    ShiftFactor::from_unit(rng.random_range(-1.0..=1.0))
}

/// `E'(k) = E(k / rho)` with linear interpolation, edge-clamped.
fn warp_envelope(env: &[f64], rho: f64) -> Vec<f64> {
    let last = env.len() - 1;
    (0..env.len())
        .map(|k| {
            let src = k as f64 / rho;
            if src >= last as f64 {
                env[last]
            } else {
                let i = src.floor() as usize;
                let frac = src - i as f64;
                env[i] * (1.0 - frac) + env[i + 1] * frac
            }
        })
        .collect()
}

/// Scales formant positions by `rho` while keeping the harmonic fine
/// structure (and hence F0) and the original phase.
pub fn formant_shift(
    w: &Waveform,
    rho: ShiftFactor,
    cfg: &StftConfig,
) -> Result<Waveform, DspError> {
    let mut spec = stft(w, cfg)?;
    for frame in spec.frames.iter_mut() {
        let env = spectral_envelope(frame, DEFAULT_LIFTER_ORDER);
        let warped = warp_envelope(&env, rho.value());
        for (k, c) in frame.iter_mut().enumerate() {
            let mag = c.norm();
            let residual = mag / env[k];
            let new_mag = warped[k] * residual;
            *c = if mag > 0.0 {
                *c * (new_mag / mag)
            } else {
                Complex64::new(0.0, 0.0)
            };
        }
    }
    istft(&spec)
}

/// Serialises a mel spectrogram in the `STYF` feature-cache layout.
pub fn encode_features(m: &MelSpectrogram) -> Result<Vec<u8>, DspError> {
    let n_mels = u16::try_from(m.n_mels())
        .map_err(|_| DspError::Cache(format!("too many mel bands: {}", m.n_mels())))?;
    let n_frames = u32::try_from(m.n_frames())
        .map_err(|_| DspError::Cache(format!("too many frames: {}", m.n_frames())))?;
    let mut out = Vec::with_capacity(20 + 4 * m.data.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&n_mels.to_le_bytes());
    out.extend_from_slice(&n_frames.to_le_bytes());
    out.extend_from_slice(&m.frame_period.to_le_bytes());
    for v in m.data.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<MelSpectrogram, DspError> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    let trunc = |_| DspError::Cache("truncated feature file".into());
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != FEATURE_MAGIC {
        return Err(DspError::Cache(format!("bad magic {magic:?}")));
    }
    let version = r.read_u16::<LittleEndian>().map_err(trunc)?;
    if version != FEATURE_VERSION {
        return Err(DspError::Cache(format!("unsupported version {version}")));
    }
    let n_mels = r.read_u16::<LittleEndian>().map_err(trunc)? as usize;
    let n_frames = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    let frame_period = r.read_f64::<LittleEndian>().map_err(trunc)?;
    let mut values = vec![0f32; n_mels * n_frames];
    r.read_f32_into::<LittleEndian>(&mut values).map_err(trunc)?;
    let data = Array2::from_shape_vec((n_frames, n_mels), values.into_iter().map(f64::from).collect())
        .map_err(|e| DspError::Cache(e.to_string()))?;
    Ok(MelSpectrogram { data, frame_period })
}

pub fn write_features(m: &MelSpectrogram, path: &Path) -> Result<(), DspError> {
    write_atomic(path, &encode_features(m)?)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<MelSpectrogram, DspError> {
    decode_features(&std::fs::read(path)?)
}
