//! F0 tracking, frame energy and per-speaker pitch/energy statistics.
//!
//! Frames follow the same centered layout as [`crate::dsp::stft`], so contour
//! index `t` lines up with mel frame `t`.

use std::collections::BTreeMap;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::Waveform;
use crate::dsp::{centered_frame, fft_plan};

/// Frames with RMS energy at or below this value count as silent.
pub const SILENCE_THRESHOLD: f64 = 1e-4;
pub const MAX_SEMITONES: i32 = 36;
pub const F0_CLAMP_LO: f64 = 10.0;
pub const F0_CLAMP_HI: f64 = 2000.0;

#[derive(Error, Debug, PartialEq)]
pub enum PitchError {
    #[error("speaker {0} has no voiced frames")]
    NoVoicedFrames(String),
    #[error("F0 median must be positive, got {0}")]
    NonPositiveMedian(f64),
    #[error("semitone shift {0} exceeds +/-{MAX_SEMITONES}")]
    ShiftTooLarge(i64),
    #[error("invalid pitch configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PitchConfig {
    pub fmin: f64,
    pub fmax: f64,
    pub threshold: f64,
    pub frame_length: usize,
    pub hop: usize,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            fmin: 50.0,
            fmax: 600.0,
            threshold: 0.1,
            frame_length: 1024,
            hop: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F0Contour {
    /// Hz per frame, 0 for unvoiced.
    pub values: Vec<f64>,
    pub frame_period: f64,
}

impl F0Contour {
    pub fn voiced(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().copied().filter(|&v| v > 0.0)
    }

    pub fn voiced_fraction(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.voiced().count() as f64 / self.values.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyContour {
    pub values: Vec<f64>,
    pub frame_period: f64,
}

/// YIN F0 tracker: cumulative-mean-normalised difference function, absolute
/// threshold, parabolic refinement of the chosen lag.
pub fn estimate_f0(w: &Waveform, cfg: &PitchConfig) -> Result<F0Contour, PitchError> {
    let sr = w.sample_rate as f64;
    if !(cfg.fmin > 0.0 && cfg.fmin < cfg.fmax && cfg.hop > 0) {
        return Err(PitchError::InvalidConfig(format!("{cfg:?}")));
    }
    let n = cfg.frame_length;
    let tau_max = ((sr / cfg.fmin).ceil() as usize).min(n / 2);
    let tau_min = ((sr / cfg.fmax).floor() as usize).max(2);
    if tau_min + 2 >= tau_max {
        return Err(PitchError::InvalidConfig(format!(
            "lag range [{tau_min}, {tau_max}] too small for frame {n}"
        )));
    }
    let frame_period = cfg.hop as f64 / sr;
    if w.is_empty() {
        return Ok(F0Contour {
            values: vec![],
            frame_period,
        });
    }
    let n_frames = 1 + w.len() / cfg.hop;
    let mut yin = Yin::new(n, tau_max);
    let mut frame = vec![0.0; n];
    let values = (0..n_frames)
        .map(|t| {
            centered_frame(&w.samples, t * cfg.hop, n, &mut frame);
            yin.period(&frame, tau_min, cfg.threshold)
                .map(|p| sr / p)
                .filter(|f| *f >= cfg.fmin && *f <= cfg.fmax)
                .unwrap_or(0.0)
        })
        .collect();
    Ok(F0Contour {
        values,
        frame_period,
    })
}

struct Yin {
    frame_len: usize,
    window: usize,
    tau_max: usize,
    fft_len: usize,
    a: Vec<Complex64>,
    b: Vec<Complex64>,
    diff: Vec<f64>,
}

impl Yin {
    fn new(frame_len: usize, tau_max: usize) -> Self {
        let window = frame_len - tau_max;
        let fft_len = (frame_len + window).next_power_of_two();
        Self {
            frame_len,
            window,
            tau_max,
            fft_len,
            a: vec![Complex64::new(0.0, 0.0); fft_len],
            b: vec![Complex64::new(0.0, 0.0); fft_len],
            diff: vec![0.0; tau_max + 1],
        }
    }

    /// Difference function `d(tau) = sum_j (x_j - x_{j+tau})^2`, `j < window`,
    /// with the cross term computed by FFT correlation.
    fn difference(&mut self, x: &[f64]) {
        let (w, len) = (self.window, self.fft_len);
        for i in 0..len {
            self.a[i] = Complex64::new(if i < w { x[i] } else { 0.0 }, 0.0);
            self.b[i] = Complex64::new(if i < self.frame_len { x[i] } else { 0.0 }, 0.0);
        }
        fft_plan(len, false).process(&mut self.a);
        fft_plan(len, false).process(&mut self.b);
        for i in 0..len {
            self.a[i] = self.a[i].conj() * self.b[i];
        }
        fft_plan(len, true).process(&mut self.a);
        let mut prefix = vec![0.0; self.frame_len + 1];
        for i in 0..self.frame_len {
            prefix[i + 1] = prefix[i] + x[i] * x[i];
        }
        let head = prefix[w];
        for tau in 0..=self.tau_max {
            let tail = prefix[tau + w] - prefix[tau];
            let cross = self.a[tau].re / len as f64;
            self.diff[tau] = (head + tail - 2.0 * cross).max(0.0);
        }
    }

    /// Period in samples, or `None` when no lag dips below the threshold.
    fn period(&mut self, x: &[f64], tau_min: usize, threshold: f64) -> Option<f64> {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
        if var < 1e-12 {
            return None;
        }
        self.difference(x);
        // cumulative mean normalisation, in place
        let mut running = 0.0;
        self.diff[0] = 1.0;
        for tau in 1..=self.tau_max {
            running += self.diff[tau];
            self.diff[tau] = if running > 0.0 {
                self.diff[tau] * tau as f64 / running
            } else {
                1.0
            };
        }
        let d = &self.diff;
        let mut tau = tau_min;
        while tau < self.tau_max {
            if d[tau] < threshold {
                while tau + 1 < self.tau_max && d[tau + 1] < d[tau] {
                    tau += 1;
                }
                return Some(parabolic_peak(d, tau));
            }
            tau += 1;
        }
        None
    }
}

fn parabolic_peak(d: &[f64], tau: usize) -> f64 {
    if tau == 0 || tau + 1 >= d.len() {
        return tau as f64;
    }
    let (a, b, c) = (d[tau - 1], d[tau], d[tau + 1]);
    let denom = a - 2.0 * b + c;
    if denom.abs() < 1e-15 {
        tau as f64
    } else {
        tau as f64 + 0.5 * (a - c) / denom
    }
}

/// Per-frame RMS over the centered analysis window.
pub fn frame_energy(w: &Waveform, frame_length: usize, hop: usize) -> EnergyContour {
    let frame_period = hop as f64 / w.sample_rate as f64;
    if w.is_empty() {
        return EnergyContour {
            values: vec![],
            frame_period,
        };
    }
    let mut frame = vec![0.0; frame_length];
    let values = (0..1 + w.len() / hop)
        .map(|t| {
            centered_frame(&w.samples, t * hop, frame_length, &mut frame);
            (frame.iter().map(|v| v * v).sum::<f64>() / frame_length as f64).sqrt()
        })
        .collect();
    EnergyContour {
        values,
        frame_period,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerStats {
    pub speaker_id: String,
    pub f0_median: f64,
    pub f0_mean: f64,
    pub f0_std: f64,
    pub energy_mean: f64,
    pub energy_std: f64,
    pub n_voiced_frames: usize,
    /// Utterances that contributed contours.
    pub n_utterances: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

/// Population statistics over voiced F0 frames and non-silent energy frames
/// of one speaker.
pub fn compute_speaker_stats(
    contours: &[F0Contour],
    energies: &[EnergyContour],
    speaker_id: &str,
) -> Result<SpeakerStats, PitchError> {
    let voiced: Vec<f64> = contours.iter().flat_map(|c| c.voiced()).collect();
    let f0_median =
        median(&voiced).ok_or_else(|| PitchError::NoVoicedFrames(speaker_id.to_string()))?;
    let (f0_mean, f0_std) = mean_std(&voiced);
    let loud: Vec<f64> = energies
        .iter()
        .flat_map(|e| e.values.iter().copied())
        .filter(|&e| e > SILENCE_THRESHOLD)
        .collect();
    let (energy_mean, energy_std) = mean_std(&loud);
    Ok(SpeakerStats {
        speaker_id: speaker_id.to_string(),
        f0_median,
        f0_mean,
        f0_std,
        energy_mean,
        energy_std,
        n_voiced_frames: voiced.len(),
        n_utterances: contours.len(),
    })
}

/// Computes stats for every speaker in `items`, never mixing speakers.
pub fn stats_by_speaker<'a, I>(items: I) -> Result<BTreeMap<String, SpeakerStats>, PitchError>
where
    I: IntoIterator<Item = (&'a str, &'a F0Contour, &'a EnergyContour)>,
{
    let mut grouped: BTreeMap<String, (Vec<F0Contour>, Vec<EnergyContour>)> = BTreeMap::new();
    for (spk, f0, en) in items {
        let g = grouped.entry(spk.to_string()).or_default();
        g.0.push(f0.clone());
        g.1.push(en.clone());
    }
    grouped
        .into_iter()
        .map(|(spk, (f0s, ens))| {
            let stats = compute_speaker_stats(&f0s, &ens, &spk)?;
            Ok((spk, stats))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemitoneShift(i32);

impl SemitoneShift {
    pub fn new(s: i32) -> Result<Self, PitchError> {
        if s.abs() > MAX_SEMITONES {
            return Err(PitchError::ShiftTooLarge(s as i64));
        }
        Ok(Self(s))
    }

    pub fn semitones(self) -> i32 {
        self.0
    }

    pub fn ratio(self) -> f64 {
        2f64.powf(self.0 as f64 / 12.0)
    }

    pub fn inverse(self) -> Self {
        Self(-self.0)
    }
}

/// Whole-semitone transposition that brings the source median to the target
/// median, rounded half away from zero.
pub fn semitone_shift(
    source: &SpeakerStats,
    target: &SpeakerStats,
) -> Result<SemitoneShift, PitchError> {
    for m in [source.f0_median, target.f0_median] {
        if !(m > 0.0) {
            return Err(PitchError::NonPositiveMedian(m));
        }
    }
    let s = (12.0 * (target.f0_median / source.f0_median).log2()).round();
    SemitoneShift::new(s as i32).map_err(|_| PitchError::ShiftTooLarge(s as i64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftedContour {
    pub contour: F0Contour,
    /// Voiced frames that had to be clamped into `[F0_CLAMP_LO, F0_CLAMP_HI]`.
    pub clamped: usize,
}

pub fn apply_semitone_shift(f0: &F0Contour, s: SemitoneShift) -> ShiftedContour {
    let ratio = s.ratio();
    let mut clamped = 0;
    let values = f0
        .values
        .iter()
        .map(|&v| {
            if v <= 0.0 {
                return 0.0;
            }
            let x = v * ratio;
            if !(F0_CLAMP_LO..=F0_CLAMP_HI).contains(&x) {
                clamped += 1;
            }
            x.clamp(F0_CLAMP_LO, F0_CLAMP_HI)
        })
        .collect();
    if clamped > 0 {
        log::warn!("semitone shift {} clamped {clamped} frames", s.semitones());
    }
    ShiftedContour {
        contour: F0Contour {
            values,
            frame_period: f0.frame_period,
        },
        clamped,
    }
}

/// Z-scored contour plus the mask of frames that carry a value.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedContour {
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

fn zscore(values: &[f64], mask: Vec<bool>, mean: f64, std: f64) -> NormalizedContour {
    if !(std > 0.0) {
        log::warn!("zero standard deviation; emitting all-zero normalised contour");
        return NormalizedContour {
            values: vec![0.0; values.len()],
            mask,
        };
    }
    let values = values
        .iter()
        .zip(&mask)
        .map(|(&x, &m)| if m { (x - mean) / std } else { 0.0 })
        .collect();
    NormalizedContour { values, mask }
}

/// F0 z-scores over voiced frames; unvoiced frames map to 0 with mask `false`.
pub fn normalize_f0(f0: &F0Contour, stats: &SpeakerStats) -> NormalizedContour {
    let mask = f0.values.iter().map(|&v| v > 0.0).collect();
    zscore(&f0.values, mask, stats.f0_mean, stats.f0_std)
}

/// Energy z-scores over non-silent frames.
pub fn normalize_energy(e: &EnergyContour, stats: &SpeakerStats) -> NormalizedContour {
    let mask = e.values.iter().map(|&v| v > SILENCE_THRESHOLD).collect();
    zscore(&e.values, mask, stats.energy_mean, stats.energy_std)
}
