//! Deterministic source-filter voice generator.
//!
//! A toy speaker is three formant resonators plus a base F0; a toy style is an
//! F0 contour shape, an energy envelope and a jitter amount. Utterances are an
//! impulse train at the time-varying F0 passed through the speaker's cascaded
//! resonators. This gives a labelled corpus where speaker identity (formants,
//! pitch level) and style (contour, dynamics) are known by construction.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{encode_wav, AudioError, Waveform, CANONICAL_SAMPLE_RATE};
use crate::fsutil::write_atomic;
use crate::pipeline::{write_manifest, ManifestEntry, MANIFEST_FILE};

pub const PEAK_LEVEL: f64 = 0.8;
/// Noise floor relative to the signal peak, in dB.
pub const NOISE_FLOOR_DB: f64 = -40.0;
pub const DEFAULT_BANDWIDTHS: [f64; 3] = [80.0, 120.0, 160.0];
/// One-pole lowpass applied to the impulse train (about -6 dB/octave above
/// a few hundred Hz).
const GLOTTAL_POLE: f64 = 0.9;
/// Per-utterance random pitch offset, in semitones either way.
const UTTERANCE_PITCH_SPREAD: f64 = 0.2;

#[derive(Error, Debug)]
pub enum ToyError {
    #[error("invalid toy spec: {0}")]
    InvalidSpec(String),
    #[error("unknown speaker {0}")]
    UnknownSpeaker(String),
    #[error("unknown style {0}")]
    UnknownStyle(String),
    #[error("speaker {speaker} has no recordings in style {style}")]
    MissingStyle { speaker: String, style: String },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpeaker {
    pub speaker_id: String,
    /// F1..F3 in Hz.
    pub formants: [f64; 3],
    pub bandwidths: [f64; 3],
    pub base_f0: f64,
    /// Styles this speaker records natively.
    pub styles: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContourShape {
    Flat,
    Rising,
    Falling,
    Oscillating,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyShape {
    Steady,
    Crescendo,
    Decrescendo,
    /// Syllable-like bursts.
    Pulsed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyStyle {
    pub label: String,
    pub contour: ContourShape,
    /// Peak-to-peak F0 excursion in semitones.
    pub depth_semitones: f64,
    /// Cycles per utterance for oscillating contours.
    pub oscillation_cycles: f64,
    pub energy: EnergyShape,
    /// Relative per-period F0 perturbation, in [0, 0.05].
    pub jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySpec {
    pub speakers: Vec<ToySpeaker>,
    pub styles: Vec<ToyStyle>,
    /// Utterances per native (speaker, style) pair.
    pub utterances: usize,
    pub duration: f64,
    pub sample_rate: u32,
    pub seed: u64,
    /// When set, every style a speaker lacks is rendered from each speaker
    /// that has it, at this conversion quality.
    pub conversion_quality: Option<f64>,
}

impl Default for ToySpec {
    fn default() -> Self {
        let all: Vec<String> = ["neutral", "lively", "welcoming", "harsh"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let neutral = vec!["neutral".to_string()];
        let speaker = |id: &str, formants: [f64; 3], f0: f64, styles: &Vec<String>| ToySpeaker {
            speaker_id: id.to_string(),
            formants,
            bandwidths: DEFAULT_BANDWIDTHS,
            base_f0: f0,
            styles: styles.clone(),
        };
        let style = |label: &str, contour, depth, cycles, energy, jitter| ToyStyle {
            label: label.to_string(),
            contour,
            depth_semitones: depth,
            oscillation_cycles: cycles,
            energy,
            jitter,
        };
        Self {
            speakers: vec![
                speaker("spk1", [500.0, 1500.0, 2500.0], 150.0, &all),
                speaker("spk2", [650.0, 1750.0, 2800.0], 210.0, &neutral),
                speaker("spk3", [420.0, 1250.0, 2300.0], 110.0, &neutral),
            ],
            styles: vec![
                style("neutral", ContourShape::Flat, 0.0, 0.0, EnergyShape::Steady, 0.005),
                style("lively", ContourShape::Oscillating, 6.0, 3.0, EnergyShape::Pulsed, 0.01),
                style("welcoming", ContourShape::Rising, 4.0, 0.0, EnergyShape::Crescendo, 0.005),
                style("harsh", ContourShape::Falling, 5.0, 0.0, EnergyShape::Decrescendo, 0.04),
            ],
            utterances: 50,
            duration: 2.0,
            sample_rate: CANONICAL_SAMPLE_RATE,
            seed: 0,
            conversion_quality: Some(1.0),
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<(), ToyError> {
        let bad = |m: String| Err(ToyError::InvalidSpec(m));
        if self.speakers.is_empty() || self.styles.is_empty() {
            return bad("speakers and styles must be nonempty".into());
        }
        if self.utterances == 0 {
            return bad("utterances must be >= 1".into());
        }
        if !(self.duration > 0.0) || self.sample_rate == 0 {
            return bad("duration and sample rate must be positive".into());
        }
        if let Some(q) = self.conversion_quality {
            if !(0.0..=1.0).contains(&q) {
                return bad(format!("conversion quality {q} outside [0, 1]"));
            }
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        for s in &self.speakers {
            let [f1, f2, f3] = s.formants;
            if !(0.0 < f1 && f1 < f2 && f2 < f3 && f3 < nyquist) {
                return bad(format!("{}: formants must satisfy 0 < F1 < F2 < F3 < Nyquist", s.speaker_id));
            }
            if !(80.0..=400.0).contains(&s.base_f0) {
                return bad(format!("{}: base F0 {} outside [80, 400]", s.speaker_id, s.base_f0));
            }
            if s.bandwidths.iter().any(|b| !(*b > 0.0)) {
                return bad(format!("{}: bandwidths must be positive", s.speaker_id));
            }
            for st in &s.styles {
                if !self.styles.iter().any(|x| &x.label == st) {
                    return Err(ToyError::UnknownStyle(st.clone()));
                }
            }
        }
        for st in &self.styles {
            if !(st.depth_semitones >= 0.0) {
                return bad(format!("{}: modulation depth must be >= 0", st.label));
            }
            if !(0.0..=0.05).contains(&st.jitter) {
                return bad(format!("{}: jitter must lie in [0, 0.05]", st.label));
            }
        }
        let mut ids: Vec<&str> = self.speakers.iter().map(|s| s.speaker_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.speakers.len() {
            return bad("duplicate speaker id".into());
        }
        if self.duration < 1.6 {
            log::warn!("toy duration {} s is shorter than the training slice", self.duration);
        }
        Ok(())
    }

    pub fn speaker(&self, id: &str) -> Result<&ToySpeaker, ToyError> {
        self.speakers
            .iter()
            .find(|s| s.speaker_id == id)
            .ok_or_else(|| ToyError::UnknownSpeaker(id.to_string()))
    }

    pub fn style(&self, label: &str) -> Result<&ToyStyle, ToyError> {
        self.styles
            .iter()
            .find(|s| s.label == label)
            .ok_or_else(|| ToyError::UnknownStyle(label.to_string()))
    }

    fn stream_id(&self, speaker: &str, style: &str, index: usize) -> u64 {
        let si = self.speakers.iter().position(|s| s.speaker_id == speaker).unwrap_or(0);
        let ti = self.styles.iter().position(|s| s.label == style).unwrap_or(0);
        ((si * self.styles.len() + ti) * self.utterances + index) as u64
    }

    /// RNG for utterance `index` of a native (speaker, style) pair. Simulated
    /// conversions reuse the source utterance's stream.
    pub fn utterance_rng(&self, speaker: &str, style: &str, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id(speaker, style, index));
        rng
    }
}

/// Pitch offset in semitones at relative time `tau` in [0, 1].
pub fn contour_semitones(style: &ToyStyle, tau: f64, phase: f64) -> f64 {
    let d = style.depth_semitones;
    match style.contour {
        ContourShape::Flat => 0.0,
        ContourShape::Rising => d * (tau - 0.5),
        ContourShape::Falling => -d * (tau - 0.5),
        ContourShape::Oscillating => {
            0.5 * d * (2.0 * std::f64::consts::PI * style.oscillation_cycles * tau + phase).sin()
        }
    }
}

/// Amplitude envelope at relative time `tau`, with `t` in seconds.
pub fn energy_envelope(shape: EnergyShape, tau: f64, t: f64) -> f64 {
    // short fades keep onsets click-free
    let fade = (tau / 0.02).min((1.0 - tau) / 0.02).clamp(0.0, 1.0);
    let body = match shape {
        EnergyShape::Steady => 1.0,
        EnergyShape::Crescendo => 0.25 + 0.75 * tau,
        EnergyShape::Decrescendo => 1.0 - 0.75 * tau,
        EnergyShape::Pulsed => 0.35 + 0.65 * (std::f64::consts::PI * 4.0 * t).sin().abs(),
    };
    fade * body
}

/// Digital resonator `y[n] = A x[n] + B y[n-1] + C y[n-2]` with unit DC gain.
fn resonate(x: &mut [f64], freq: f64, bandwidth: f64, sr: f64) {
    let c = -(-2.0 * std::f64::consts::PI * bandwidth / sr).exp();
    let b = 2.0 * (-std::f64::consts::PI * bandwidth / sr).exp() * (2.0 * std::f64::consts::PI * freq / sr).cos();
    let a = 1.0 - b - c;
    let (mut y1, mut y2) = (0.0, 0.0);
    for v in x.iter_mut() {
        let y = a * *v + b * y1 + c * y2;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

/// Renders one utterance. `formants`/`bandwidths`/`base_f0` are passed
/// separately so conversions can mix speakers.
fn render<R: Rng + ?Sized>(
    formants: [f64; 3],
    bandwidths: [f64; 3],
    base_f0: f64,
    style: &ToyStyle,
    duration: f64,
    sample_rate: u32,
    rng: &mut R,
) -> Result<Waveform, ToyError> {
    let sr = sample_rate as f64;
    let n = (duration * sr).round() as usize;
    let offset = rng.random_range(-UTTERANCE_PITCH_SPREAD..=UTTERANCE_PITCH_SPREAD);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut x = vec![0.0; n];
    let mut acc = 1.0; // start with an impulse
    let mut jitter = 1.0;
    for (i, v) in x.iter_mut().enumerate() {
        let tau = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        if acc >= 1.0 {
            acc -= 1.0;
            *v = 1.0;
            jitter = 1.0 + style.jitter * rng.random_range(-1.0..=1.0);
        }
        let f0 = base_f0 * 2f64.powf((contour_semitones(style, tau, phase) + offset) / 12.0) * jitter;
        acc += f0 / sr;
    }
    // glottal-like spectral tilt so F1 dominates the envelope
    let mut prev = 0.0;
    for v in x.iter_mut() {
        prev = *v + GLOTTAL_POLE * prev;
        *v = prev;
    }
    for k in 0..3 {
        resonate(&mut x, formants[k], bandwidths[k], sr);
    }
    for (i, v) in x.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let tau = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        *v *= energy_envelope(style.energy, tau, t);
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let sigma = peak.max(1e-12) * 10f64.powf(NOISE_FLOOR_DB / 20.0);
    let noise = Normal::new(0.0, sigma).map_err(|e| ToyError::InvalidSpec(e.to_string()))?;
    for v in x.iter_mut() {
        *v += noise.sample(rng);
    }
    let mut w = Waveform::new(x, sample_rate)?;
    w.normalize_peak(PEAK_LEVEL);
    Ok(w)
}

/// One utterance of `spk` speaking in `sty`.
pub fn synth_utterance<R: Rng + ?Sized>(
    spk: &ToySpeaker,
    sty: &ToyStyle,
    duration: f64,
    sample_rate: u32,
    rng: &mut R,
) -> Result<Waveform, ToyError> {
    render(spk.formants, spk.bandwidths, spk.base_f0, sty, duration, sample_rate, rng)
}

/// An idealised voice conversion of utterance `index` of `source` in `style`
/// into `target`'s voice: the style's contour on the target's base F0, with
/// formants interpolated from source (`quality = 0`) to target (`quality = 1`).
pub fn simulate_conversion(
    spec: &ToySpec,
    source: &str,
    target: &str,
    style: &str,
    index: usize,
    quality: f64,
) -> Result<Waveform, ToyError> {
    let src = spec.speaker(source)?;
    let tgt = spec.speaker(target)?;
    let sty = spec.style(style)?;
    if !src.styles.iter().any(|s| s == style) {
        return Err(ToyError::MissingStyle {
            speaker: source.to_string(),
            style: style.to_string(),
        });
    }
    if !(0.0..=1.0).contains(&quality) {
        return Err(ToyError::InvalidSpec(format!("quality {quality} outside [0, 1]")));
    }
    let lerp = |a: [f64; 3], b: [f64; 3]| std::array::from_fn(|k| a[k] + quality * (b[k] - a[k]));
    let mut rng = spec.utterance_rng(source, style, index);
    render(
        lerp(src.formants, tgt.formants),
        lerp(src.bandwidths, tgt.bandwidths),
        tgt.base_f0,
        sty,
        spec.duration,
        spec.sample_rate,
        &mut rng,
    )
}

/// A planned corpus file.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyJob {
    pub file_name: String,
    pub speaker: String,
    pub style: String,
    pub index: usize,
    /// `Some(source)` for simulated conversions.
    pub converted_from: Option<String>,
}

/// Every file the spec produces, in manifest order: native recordings first,
/// then conversions.
pub fn plan(spec: &ToySpec) -> Vec<ToyJob> {
    let mut jobs = Vec::new();
    for spk in &spec.speakers {
        for sty in &spec.styles {
            if !spk.styles.contains(&sty.label) {
                continue;
            }
            for i in 0..spec.utterances {
                jobs.push(ToyJob {
                    file_name: format!("{}_{}_{:03}.wav", spk.speaker_id, sty.label, i),
                    speaker: spk.speaker_id.clone(),
                    style: sty.label.clone(),
                    index: i,
                    converted_from: None,
                });
            }
        }
    }
    if spec.conversion_quality.is_some() {
        for tgt in &spec.speakers {
            for sty in &spec.styles {
                if tgt.styles.contains(&sty.label) {
                    continue;
                }
                for src in spec.speakers.iter().filter(|s| s.styles.contains(&sty.label)) {
                    for i in 0..spec.utterances {
                        jobs.push(ToyJob {
                            file_name: format!(
                                "{}_{}_{:03}_from-{}.wav",
                                tgt.speaker_id, sty.label, i, src.speaker_id
                            ),
                            speaker: tgt.speaker_id.clone(),
                            style: sty.label.clone(),
                            index: i,
                            converted_from: Some(src.speaker_id.clone()),
                        });
                    }
                }
            }
        }
    }
    jobs
}

pub fn render_job(spec: &ToySpec, job: &ToyJob) -> Result<Waveform, ToyError> {
    match &job.converted_from {
        None => {
            let mut rng = spec.utterance_rng(&job.speaker, &job.style, job.index);
            synth_utterance(
                spec.speaker(&job.speaker)?,
                spec.style(&job.style)?,
                spec.duration,
                spec.sample_rate,
                &mut rng,
            )
        }
        Some(src) => simulate_conversion(
            spec,
            src,
            &job.speaker,
            &job.style,
            job.index,
            spec.conversion_quality.unwrap_or(1.0),
        ),
    }
}

/// Writes the corpus WAVs and `manifest.jsonl` into `out_dir` and returns the
/// manifest path. Output is bitwise-identical for a given spec.
pub fn generate_dataset(spec: &ToySpec, out_dir: &Path) -> Result<PathBuf, ToyError> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let jobs = plan(spec);
    jobs.par_iter().try_for_each(|job| -> Result<(), ToyError> {
        let w = render_job(spec, job)?;
        write_atomic(&out_dir.join(&job.file_name), &encode_wav(&w)?)?;
        Ok(())
    })?;
    let entries: Vec<ManifestEntry> = jobs
        .iter()
        .map(|j| ManifestEntry {
            audio_path: j.file_name.clone(),
            speaker_id: j.speaker.clone(),
            style: j.style.clone(),
            synthetic: j.converted_from.is_some(),
        })
        .collect();
    let path = out_dir.join(MANIFEST_FILE);
    write_manifest(&entries, &path)?;
    Ok(path)
}

/// File counts per (speaker, style), split into native and synthetic.
pub fn summarize(entries: &[ManifestEntry]) -> BTreeMap<(String, String), (usize, usize)> {
    let mut out: BTreeMap<(String, String), (usize, usize)> = BTreeMap::new();
    for e in entries {
        let c = out.entry((e.speaker_id.clone(), e.style.clone())).or_default();
        if e.synthetic {
            c.1 += 1;
        } else {
            c.0 += 1;
        }
    }
    out
}
