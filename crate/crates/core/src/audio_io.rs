//! Mono waveform ingestion and export.
//!
//! Everything downstream works on [`Waveform`], a mono `f64` buffer tagged
//! with its sample rate. Multi-channel files are averaged to mono on read and
//! files are always written as 16-bit PCM.

use std::f64::consts::PI;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::fsutil::write_atomic;

/// Sample rate every corpus file is brought to on ingestion.
pub const CANONICAL_SAMPLE_RATE: u32 = 22050;

const RESAMPLE_TAPS: usize = 64;
const KAISER_BETA: f64 = 8.0;

#[derive(Error, Debug)]
pub enum AudioError {
    #[error("audio file not found: {0}")]
    NotFound(PathBuf),
    #[error("malformed RIFF/WAVE data in {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("unsupported WAV encoding in {path}: {reason}")]
    Unsupported { path: PathBuf, reason: String },
    #[error("waveform contains a non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("invalid sample rate {0}")]
    InvalidSampleRate(u32),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Mono audio buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidSampleRate(sample_rate));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Scales the buffer so that its absolute peak equals `target`.
    /// Silent buffers are left untouched.
    pub fn normalize_peak(&mut self, target: f64) {
        let peak = self.peak();
        if peak > 0.0 {
            let g = target / peak;
            self.samples.iter_mut().for_each(|s| *s *= g);
        }
    }

    /// Clamps every sample into [-1, 1].
    pub fn clip(&mut self) {
        self.samples.iter_mut().for_each(|s| *s = s.clamp(-1.0, 1.0));
    }
}

fn classify_hound(path: &Path, err: hound::Error) -> AudioError {
    match err {
        // the file is already open, so read failures mean the data ran out
        hound::Error::IoError(e) => AudioError::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        },
        hound::Error::FormatError(reason) => AudioError::Malformed {
            path: path.to_path_buf(),
            reason: reason.into(),
        },
        hound::Error::Unsupported => AudioError::Unsupported {
            path: path.to_path_buf(),
            reason: "codec not supported".into(),
        },
        other => AudioError::Unsupported {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

/// Reads a 16/24-bit integer or 32-bit float WAV file and downmixes it to mono.
pub fn read_wav(path: &Path) -> Result<Waveform, AudioError> {
    if !path.exists() {
        return Err(AudioError::NotFound(path.to_path_buf()));
    }
    let file = std::fs::File::open(path).map_err(|source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = hound::WavReader::new(std::io::BufReader::new(file))
        .map_err(|e| classify_hound(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(AudioError::Malformed {
            path: path.to_path_buf(),
            reason: "zero channels".into(),
        });
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, bits @ (16 | 24)) => {
            let scale = (1u32 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()
                .map_err(|e| classify_hound(path, e))?
        }
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(|e| classify_hound(path, e))?,
        (fmt, bits) => {
            return Err(AudioError::Unsupported {
                path: path.to_path_buf(),
                reason: format!("{fmt:?} with {bits} bits per sample"),
            })
        }
    };
    let samples = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

/// Encodes a waveform as 16-bit PCM mono WAV bytes.
pub fn encode_wav(w: &Waveform) -> Result<Vec<u8>, AudioError> {
    if let Some(i) = w.samples.iter().position(|s| !s.is_finite()) {
        return Err(AudioError::NonFinite(i));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = Cursor::new(Vec::new());
    {
        let to_io = |e: hound::Error| AudioError::Io {
            path: PathBuf::from("<memory>"),
            source: std::io::Error::other(e.to_string()),
        };
        let mut writer = hound::WavWriter::new(&mut cursor, spec).map_err(to_io)?;
        for &s in &w.samples {
            let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(q).map_err(to_io)?;
        }
        writer.finalize().map_err(to_io)?;
    }
    Ok(cursor.into_inner())
}

/// Writes a 16-bit PCM mono WAV file. Non-finite samples are rejected before
/// anything touches the filesystem.
pub fn write_wav(w: &Waveform, path: &Path) -> Result<(), AudioError> {
    let bytes = encode_wav(w)?;
    write_atomic(path, &bytes).map_err(|source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64).powi(2);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn kaiser(x: f64, beta: f64) -> f64 {
    if x.abs() > 1.0 {
        return 0.0;
    }
    bessel_i0(beta * (1.0 - x * x).sqrt()) / bessel_i0(beta)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Kaiser-windowed sinc resampler.
///
/// The kernel spans [`RESAMPLE_TAPS`] samples measured at the lower of the two
/// rates, with its cutoff at the lower Nyquist frequency.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform, AudioError> {
    if target_rate == 0 {
        return Err(AudioError::InvalidSampleRate(target_rate));
    }
    if target_rate == w.sample_rate {
        return Ok(w.clone());
    }
    let ratio = target_rate as f64 / w.sample_rate as f64;
    let out_len = (w.len() as f64 * ratio).round() as usize;
    let cutoff = ratio.min(1.0);
    let half_width = (RESAMPLE_TAPS / 2) as f64 / cutoff;
    let n = w.len() as isize;
    let samples = (0..out_len)
        .map(|j| {
            let t = j as f64 / ratio;
            let lo = (t - half_width).ceil() as isize;
            let hi = (t + half_width).floor() as isize;
            let mut acc = 0.0;
            for k in lo.max(0)..=hi.min(n - 1) {
                let x = t - k as f64;
                acc += w.samples[k as usize]
                    * cutoff
                    * sinc(cutoff * x)
                    * kaiser(x / half_width, KAISER_BETA);
            }
            acc
        })
        .collect();
    Waveform::new(samples, target_rate)
}
