//! The subcommands behind the `stylekit` binary: corpus generation, feature
//! extraction, training, embedding, evaluation and projection export. Also
//! owns the manifest and configuration formats.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio_io::{read_wav, resample, AudioError, CANONICAL_SAMPLE_RATE};
use crate::dsp::{
    formant_shift, mel_filterbank, mel_spectrogram, read_features, sample_shift_factor,
    write_features, DspError, MelConfig, MelFilterbank, MelSpectrogram, StftConfig,
};
use crate::encoder::{forward, load_params, EncoderConfig, EncoderError};
use crate::fsutil::write_atomic;
use crate::metric::{
    history_csv, load_checkpoint, TrainConfig, TrainError, Trainer, Utterance, StyleDataset,
};
use crate::pitch::{
    estimate_f0, frame_energy, stats_by_speaker, EnergyContour, F0Contour, PitchConfig,
    PitchError, SpeakerStats,
};
use crate::styles::{
    centroid_accuracy, compute_centroids, leakage_probe, pca_project, projection_csv,
    read_embeddings, secs, stratified_split, write_embeddings, CentroidSet, Confusion,
    EmbeddingSet, LabeledEmbedding, LeakageReport, RecordInfo, StylesError,
};
use crate::toygen::{generate_dataset, summarize, ToyError, ToySpec};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CACHE_INDEX_FILE: &str = "index.json";
pub const SPEAKER_STATS_FILE: &str = "speaker_stats.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CENTROIDS_FILE: &str = "centroids.json";
/// Bumped whenever extraction output changes meaning.
const EXTRACT_VERSION: u32 = 1;

#[derive(Error, Debug)]
pub enum PipelineError {
    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{} of {total} files failed to extract:\n{}", .failures.len(), .failures.join("\n"))]
    Extraction { failures: Vec<String>, total: usize },
    #[error("feature cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Pitch(#[from] PitchError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Styles(#[from] StylesError),
    #[error(transparent)]
    Toy(#[from] ToyError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// One line of the JSONL manifest. Relative paths resolve against the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub audio_path: String,
    pub speaker_id: String,
    pub style: String,
    pub synthetic: bool,
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> std::io::Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).map_err(std::io::Error::other)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, PipelineError> {
    let bad = |reason: String| PipelineError::Manifest {
        path: path.to_path_buf(),
        reason,
    };
    let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry =
            serde_json::from_str(line).map_err(|e| bad(format!("line {}: {e}", i + 1)))?;
        if e.audio_path.is_empty() || e.speaker_id.is_empty() || e.style.is_empty() {
            return Err(bad(format!("line {}: empty field", i + 1)));
        }
        out.push(e);
    }
    Ok(out)
}

pub fn resolve_audio(manifest: &Path, entry: &ManifestEntry) -> PathBuf {
    let p = Path::new(&entry.audio_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Arm {
    /// Ground-truth recordings only.
    SynthNone,
    /// Ground truth plus simulated conversions.
    SynthBoth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub sample_rate: u32,
    pub stft: StftConfig,
    pub mel: MelConfig,
    pub pitch: PitchConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub toygen: ToySpec,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub arm: Arm,
    /// Held-out fraction used by the leakage probe.
    pub probe_fraction: f64,
    /// Include synthetic items when fitting evaluation centroids.
    pub centroids_include_synthetic: bool,
    pub neutral_style: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sample_rate: CANONICAL_SAMPLE_RATE,
            stft: StftConfig::default(),
            mel: MelConfig::default(),
            pitch: PitchConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            toygen: ToySpec::default(),
            train_fraction: 0.9,
            validation_fraction: 0.1,
            arm: Arm::SynthBoth,
            probe_fraction: 0.5,
            centroids_include_synthetic: false,
            neutral_style: "neutral".to_string(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let cfg: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Propagates the global seed into every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.toygen.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let (t, v) = (self.train_fraction, self.validation_fraction);
        if !(t >= 0.0 && v >= 0.0 && t + v <= 1.0 + 1e-12) {
            return Err(PipelineError::Config(format!(
                "split fractions {t} + {v} must be non-negative and sum to <= 1"
            )));
        }
        if !(self.probe_fraction > 0.0 && self.probe_fraction < 1.0) {
            return Err(PipelineError::Config("probe_fraction must lie in (0, 1)".into()));
        }
        if self.encoder.n_mels != self.mel.n_mels {
            return Err(PipelineError::Config(format!(
                "encoder expects {} mel bands, frontend produces {}",
                self.encoder.n_mels, self.mel.n_mels
            )));
        }
        self.stft.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        Ok(())
    }

    fn filterbank(&self) -> Result<MelFilterbank, PipelineError> {
        Ok(mel_filterbank(
            self.mel.n_mels,
            self.stft.n_fft,
            self.sample_rate,
            self.mel.fmin,
            self.mel.fmax,
        )?)
    }
}

/// Validation flags for every manifest entry: stratified by
/// (speaker, style, synthetic) and seeded, so train/embed/evaluate agree.
pub fn validation_flags(entries: &[ManifestEntry], cfg: &PipelineConfig) -> Vec<bool> {
    let keys: Vec<(&str, &str, bool)> = entries
        .iter()
        .map(|e| (e.speaker_id.as_str(), e.style.as_str(), e.synthetic))
        .collect();
    stratified_split(&keys, cfg.validation_fraction, cfg.seed)
}

/// Training flags: everything outside the validation split, thinned to
/// `train_fraction` of the corpus when the two fractions sum to less than 1.
pub fn training_flags(entries: &[ManifestEntry], cfg: &PipelineConfig) -> Vec<bool> {
    let val = validation_flags(entries, cfg);
    let rest = 1.0 - cfg.validation_fraction;
    let unused = rest - cfg.train_fraction;
    if unused <= 1e-12 || rest <= 0.0 {
        return val.iter().map(|v| !v).collect();
    }
    let idx: Vec<usize> = (0..entries.len()).filter(|&i| !val[i]).collect();
    let keys: Vec<(&str, &str, bool)> = idx
        .iter()
        .map(|&i| (entries[i].speaker_id.as_str(), entries[i].style.as_str(), entries[i].synthetic))
        .collect();
    let dropped = stratified_split(&keys, unused / rest, cfg.seed.wrapping_add(1));
    let mut train = vec![false; entries.len()];
    for (k, &i) in idx.iter().enumerate() {
        train[i] = !dropped[k];
    }
    train
}

pub fn arm_admits(arm: Arm, entry: &ManifestEntry) -> bool {
    match arm {
        Arm::SynthNone => !entry.synthetic,
        Arm::SynthBoth => true,
    }
}

// ---------------------------------------------------------------- gen-toy

/// Table of file counts per speaker and style, native (+synthetic).
pub fn corpus_summary(entries: &[ManifestEntry]) -> String {
    let counts = summarize(entries);
    let styles: BTreeSet<&str> = counts.keys().map(|(_, s)| s.as_str()).collect();
    let speakers: BTreeSet<&str> = counts.keys().map(|(p, _)| p.as_str()).collect();
    let mut out = format!("{:<10}", "speaker");
    for s in &styles {
        let _ = write!(out, " {:>12}", s);
    }
    out.push_str(&format!(" {:>8}\n", "styles"));
    for p in &speakers {
        let _ = write!(out, "{:<10}", p);
        let mut native_styles = 0;
        for s in &styles {
            let (n, syn) = counts
                .get(&(p.to_string(), s.to_string()))
                .copied()
                .unwrap_or((0, 0));
            if n > 0 {
                native_styles += 1;
            }
            let cell = if syn > 0 {
                format!("{n}+{syn}s")
            } else {
                n.to_string()
            };
            let _ = write!(out, " {:>12}", cell);
        }
        let _ = writeln!(out, " {:>8}", native_styles);
    }
    out
}

pub fn cmd_gen_toy(cfg: &PipelineConfig, out_dir: &Path) -> Result<(PathBuf, String), PipelineError> {
    let manifest = generate_dataset(&cfg.toygen, out_dir)?;
    let summary = corpus_summary(&read_manifest(&manifest)?);
    Ok((manifest, summary))
}

// ---------------------------------------------------------------- extract

/// Cached outputs for one manifest entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub entry: ManifestEntry,
    /// SHA-256 of the audio bytes and the extraction settings.
    pub content_hash: String,
    /// Mel files, unperturbed first, relative to the cache directory.
    pub features: Vec<String>,
    pub shift_factors: Vec<f64>,
    pub contours: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheIndex {
    pub records: Vec<CacheRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Contours {
    f0: F0Contour,
    energy: EnergyContour,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractSummary {
    pub computed: usize,
    pub skipped: usize,
    pub stats: BTreeMap<String, SpeakerStats>,
}

fn extraction_fingerprint(cfg: &PipelineConfig) -> Result<Vec<u8>, PipelineError> {
    Ok(serde_json::to_vec(&(
        EXTRACT_VERSION,
        cfg.sample_rate,
        &cfg.stft,
        &cfg.mel,
        &cfg.pitch,
        cfg.train.shift_variants,
    ))?)
}

fn extract_one(
    audio: &Path,
    hash: &str,
    cfg: &PipelineConfig,
    fb: &MelFilterbank,
    cache_dir: &Path,
) -> Result<(Vec<String>, Vec<f64>, String, Contours), PipelineError> {
    let mut w = read_wav(audio)?;
    if w.sample_rate != cfg.sample_rate {
        w = resample(&w, cfg.sample_rate)?;
    }
    let stem = &hash[..16];
    let mut rng = ChaCha8Rng::seed_from_u64(
        u64::from_str_radix(stem, 16).map_err(|e| PipelineError::Cache(e.to_string()))?,
    );
    let mut factors = vec![1.0];
    let mut names = Vec::new();
    let base = mel_spectrogram(&w, &cfg.stft, fb)?;
    let name = format!("{stem}.styf");
    write_features(&base, &cache_dir.join(&name))?;
    names.push(name);
    for k in 1..=cfg.train.shift_variants {
        let rho = sample_shift_factor(&mut rng);
        let shifted = formant_shift(&w, rho, &cfg.stft)?;
        let mel = mel_spectrogram(&shifted, &cfg.stft, fb)?;
        let name = format!("{stem}.v{k}.styf");
        write_features(&mel, &cache_dir.join(&name))?;
        names.push(name);
        factors.push(rho.value());
    }
    let contours = Contours {
        f0: estimate_f0(&w, &cfg.pitch)?,
        energy: frame_energy(&w, cfg.pitch.frame_length, cfg.pitch.hop),
    };
    let cname = format!("{stem}.contours.json");
    write_atomic(&cache_dir.join(&cname), &serde_json::to_vec(&contours)?)?;
    Ok((names, factors, cname, contours))
}

fn read_index(cache_dir: &Path) -> Result<CacheIndex, PipelineError> {
    let path = cache_dir.join(CACHE_INDEX_FILE);
    if !path.exists() {
        return Ok(CacheIndex::default());
    }
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Extracts mel features (plus formant-shifted variants), F0 and energy
/// contours for every manifest entry, then per-speaker statistics. Entries
/// whose audio and settings hash to an existing record are skipped.
pub fn cmd_extract(
    manifest: &Path,
    cfg: &PipelineConfig,
    cache_dir: &Path,
) -> Result<ExtractSummary, PipelineError> {
    cfg.validate()?;
    let entries = read_manifest(manifest)?;
    std::fs::create_dir_all(cache_dir)?;
    let fb = cfg.filterbank()?;
    let fingerprint = extraction_fingerprint(cfg)?;
    let previous: BTreeMap<String, CacheRecord> = read_index(cache_dir)?
        .records
        .into_iter()
        .map(|r| (r.content_hash.clone(), r))
        .collect();

    let results: Vec<Result<(CacheRecord, Contours, bool), String>> = entries
        .par_iter()
        .map(|entry| {
            let audio = resolve_audio(manifest, entry);
            let fail = |e: &dyn std::fmt::Display| format!("{}: {e}", audio.display());
            let bytes = std::fs::read(&audio).map_err(|e| fail(&e))?;
            let mut h = Sha256::new();
            h.update(&bytes);
            h.update(&fingerprint);
            let hash = hex::encode(h.finalize());
            if let Some(prev) = previous.get(&hash) {
                let complete = prev.features.iter().all(|f| cache_dir.join(f).exists())
                    && cache_dir.join(&prev.contours).exists();
                if complete {
                    let contours: Result<Contours, String> = std::fs::read(cache_dir.join(&prev.contours))
                        .map_err(|e| fail(&e))
                        .and_then(|b| serde_json::from_slice(&b).map_err(|e| fail(&e)));
                    if let Ok(c) = contours {
                        let rec = CacheRecord {
                            entry: entry.clone(),
                            ..prev.clone()
                        };
                        return Ok((rec, c, false));
                    }
                }
            }
            let (features, shift_factors, cname, contours) =
                extract_one(&audio, &hash, cfg, &fb, cache_dir).map_err(|e| fail(&e))?;
            Ok((
                CacheRecord {
                    entry: entry.clone(),
                    content_hash: hash,
                    features,
                    shift_factors,
                    contours: cname,
                },
                contours,
                true,
            ))
        })
        .collect();

    let failures: Vec<String> = results.iter().filter_map(|r| r.as_ref().err().cloned()).collect();
    if !failures.is_empty() {
        return Err(PipelineError::Extraction {
            failures,
            total: entries.len(),
        });
    }
    let ok: Vec<(CacheRecord, Contours, bool)> = results.into_iter().map(|r| r.expect("checked")).collect();
    let computed = ok.iter().filter(|r| r.2).count();
    let stats = stats_by_speaker(
        ok.iter()
            .map(|(r, c, _)| (r.entry.speaker_id.as_str(), &c.f0, &c.energy)),
    )?;
    let index = CacheIndex {
        records: ok.iter().map(|(r, _, _)| r.clone()).collect(),
    };
    write_atomic(&cache_dir.join(CACHE_INDEX_FILE), &serde_json::to_vec_pretty(&index)?)?;
    write_atomic(&cache_dir.join(SPEAKER_STATS_FILE), &serde_json::to_vec_pretty(&stats)?)?;
    Ok(ExtractSummary {
        computed,
        skipped: ok.len() - computed,
        stats,
    })
}

/// Cache records in manifest order; fails if any entry was never extracted.
pub fn load_cache_records(
    entries: &[ManifestEntry],
    cache_dir: &Path,
) -> Result<Vec<CacheRecord>, PipelineError> {
    let index = read_index(cache_dir)?;
    let by_entry: BTreeMap<(&str, &str, &str, bool), &CacheRecord> = index
        .records
        .iter()
        .map(|r| {
            (
                (
                    r.entry.audio_path.as_str(),
                    r.entry.speaker_id.as_str(),
                    r.entry.style.as_str(),
                    r.entry.synthetic,
                ),
                r,
            )
        })
        .collect();
    entries
        .iter()
        .map(|e| {
            by_entry
                .get(&(e.audio_path.as_str(), e.speaker_id.as_str(), e.style.as_str(), e.synthetic))
                .map(|r| (*r).clone())
                .ok_or_else(|| PipelineError::Cache(format!("{} has not been extracted", e.audio_path)))
        })
        .collect()
}

// ---------------------------------------------------------------- train

pub struct TrainOutcome {
    pub n_train: usize,
    pub n_synthetic: usize,
    pub final_step: u64,
}

/// Training utterances for the configured arm, excluding validation items.
pub fn build_dataset(
    entries: &[ManifestEntry],
    cfg: &PipelineConfig,
    cache_dir: &Path,
) -> Result<StyleDataset, PipelineError> {
    let records = load_cache_records(entries, cache_dir)?;
    let train = training_flags(entries, cfg);
    let mut ds = StyleDataset::new();
    let loaded: Vec<Option<(String, Utterance)>> = records
        .par_iter()
        .zip(&train)
        .map(|(r, &is_train)| {
            if !is_train || !arm_admits(cfg.arm, &r.entry) {
                return Ok(None);
            }
            let variants = r
                .features
                .iter()
                .map(|f| read_features(&cache_dir.join(f)))
                .collect::<Result<Vec<MelSpectrogram>, _>>()?;
            Ok(Some((
                r.entry.style.clone(),
                Utterance {
                    variants,
                    speaker_id: r.entry.speaker_id.clone(),
                    synthetic: r.entry.synthetic,
                },
            )))
        })
        .collect::<Result<_, PipelineError>>()?;
    for (style, utt) in loaded.into_iter().flatten() {
        ds.push(&style, utt);
    }
    Ok(ds)
}

/// Trains an encoder on the arm's training split, writing the checkpoint and
/// `loss.csv` into `out_dir`. With `resume`, continues from the checkpoint in
/// `out_dir` up to the configured step count.
pub fn cmd_train(
    manifest: &Path,
    cfg: &PipelineConfig,
    cache_dir: &Path,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainOutcome, PipelineError> {
    cfg.validate()?;
    let entries = read_manifest(manifest)?;
    let ds = build_dataset(&entries, cfg, cache_dir)?;
    let n_train = ds.len();
    let n_synthetic = ds
        .styles()
        .flat_map(|s| ds.utterances(s))
        .filter(|u| u.synthetic)
        .count();
    log::info!("training on {n_train} utterances ({n_synthetic} synthetic), arm {:?}", cfg.arm);
    let mut trainer = if resume {
        let (state, _) = load_checkpoint(out_dir)?;
        Trainer::resume(&ds, &cfg.train, state)?
    } else {
        Trainer::new(&ds, &cfg.encoder, &cfg.train)?
    };
    trainer.run(Some(out_dir))?;
    let state = trainer.into_state();
    write_atomic(&out_dir.join(LOSS_FILE), history_csv(&state.history).as_bytes())?;
    Ok(TrainOutcome {
        n_train,
        n_synthetic,
        final_step: state.step,
    })
}

// ---------------------------------------------------------------- embed

/// Embeds the centre slice of every manifest entry with the checkpoint in
/// `checkpoint_dir` and writes a `STYB` file (plus sidecar) to `out`.
pub fn cmd_embed(
    manifest: &Path,
    cfg: &PipelineConfig,
    cache_dir: &Path,
    checkpoint_dir: &Path,
    out: &Path,
) -> Result<EmbeddingSet, PipelineError> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(PipelineError::Manifest {
            path: manifest.to_path_buf(),
            reason: "no entries".into(),
        });
    }
    let params = load_params(&checkpoint_dir.join("encoder.stye"), Some(&cfg.encoder))?;
    let records = load_cache_records(&entries, cache_dir)?;
    let val = validation_flags(&entries, cfg);
    let items: Vec<LabeledEmbedding> = records
        .par_iter()
        .map(|r| {
            let mel = read_features(&cache_dir.join(&r.features[0]))?;
            let slice = mel.center_slice(mel.frames_for(cfg.train.slice_duration).max(1));
            let (e, _) = forward(&params, &slice)?;
            Ok(LabeledEmbedding {
                embedding: e,
                style: r.entry.style.clone(),
                speaker: r.entry.speaker_id.clone(),
                synthetic: r.entry.synthetic,
            })
        })
        .collect::<Result<_, PipelineError>>()?;
    let info = entries
        .iter()
        .zip(&val)
        .map(|(e, &v)| RecordInfo {
            audio_path: e.audio_path.clone(),
            validation: v,
        })
        .collect();
    let set = EmbeddingSet { items, info };
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    write_embeddings(&set, out)?;
    // re-read so callers see exactly what was stored (f32 precision)
    Ok(read_embeddings(out)?)
}

// ---------------------------------------------------------------- evaluate

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecsMatrix {
    pub speakers: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

/// Where simulated expressive conversions land relative to the centroids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAlignment {
    pub n: usize,
    /// Mean cosine to the item's own style centroid.
    pub own_style: f64,
    /// Mean cosine to the neutral centroid.
    pub neutral: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_embeddings: usize,
    pub n_validation: usize,
    /// Nearest-centroid style accuracy over all validation items.
    pub style_accuracy: f64,
    /// Same, restricted to ground-truth validation items.
    pub style_accuracy_ground_truth: f64,
    pub style_confusion: Confusion,
    pub centroids_include_synthetic: bool,
    pub leakage: LeakageReport,
    pub secs: SecsMatrix,
    pub synthetic_alignment: Option<SyntheticAlignment>,
}

pub fn evaluate(set: &EmbeddingSet, cfg: &PipelineConfig) -> Result<(EvaluationReport, CentroidSet), PipelineError> {
    let items = &set.items;
    let is_val: Vec<bool> = set.info.iter().map(|i| i.validation).collect();
    let centroids = compute_centroids(
        items
            .iter()
            .zip(&is_val)
            .filter(|(e, &v)| !v && (cfg.centroids_include_synthetic || !e.synthetic))
            .map(|(e, _)| (e.style.as_str(), &e.embedding)),
    )?;
    let val_items: Vec<&LabeledEmbedding> = items
        .iter()
        .zip(&is_val)
        .filter(|(_, &v)| v)
        .map(|(e, _)| e)
        .collect();
    let style_confusion = centroid_accuracy(
        val_items.iter().map(|e| (e.style.as_str(), &e.embedding)),
        &centroids,
    );
    let gt_confusion = centroid_accuracy(
        val_items
            .iter()
            .filter(|e| !e.synthetic)
            .map(|e| (e.style.as_str(), &e.embedding)),
        &centroids,
    );
    let leakage = leakage_probe(items, cfg.probe_fraction, cfg.seed)?;

    let mut by_speaker: BTreeMap<&str, (Array1<f64>, usize)> = BTreeMap::new();
    for e in items {
        let g = by_speaker
            .entry(e.speaker.as_str())
            .or_insert_with(|| (Array1::zeros(e.embedding.len()), 0));
        g.0 += &e.embedding;
        g.1 += 1;
    }
    let means: Vec<(&str, Array1<f64>)> = by_speaker
        .into_iter()
        .map(|(s, (sum, n))| (s, sum / n as f64))
        .collect();
    let mut values = vec![vec![0.0; means.len()]; means.len()];
    for (i, (_, a)) in means.iter().enumerate() {
        for (j, (_, b)) in means.iter().enumerate() {
            values[i][j] = secs(a, b)?;
        }
    }
    let secs_matrix = SecsMatrix {
        speakers: means.iter().map(|(s, _)| s.to_string()).collect(),
        values,
    };

    let synthetic_alignment = match centroids.get(&cfg.neutral_style) {
        Some(neutral) => {
            let expressive: Vec<&LabeledEmbedding> = items
                .iter()
                .filter(|e| e.synthetic && e.style != cfg.neutral_style)
                .filter(|e| centroids.centroids.contains_key(&e.style))
                .collect();
            if expressive.is_empty() {
                None
            } else {
                let mut own = 0.0;
                let mut neu = 0.0;
                for e in &expressive {
                    own += secs(&e.embedding, &centroids.get(&e.style).expect("present"))?;
                    neu += secs(&e.embedding, &neutral)?;
                }
                let n = expressive.len();
                Some(SyntheticAlignment {
                    n,
                    own_style: own / n as f64,
                    neutral: neu / n as f64,
                })
            }
        }
        None => None,
    };

    Ok((
        EvaluationReport {
            n_embeddings: items.len(),
            n_validation: val_items.len(),
            style_accuracy: style_confusion.accuracy(),
            style_accuracy_ground_truth: gt_confusion.accuracy(),
            style_confusion,
            centroids_include_synthetic: cfg.centroids_include_synthetic,
            leakage,
            secs: secs_matrix,
            synthetic_alignment,
        },
        centroids,
    ))
}

/// Writes `report.json` and `centroids.json` into `out_dir`.
pub fn cmd_evaluate(
    embeddings: &Path,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<EvaluationReport, PipelineError> {
    let set = read_embeddings(embeddings)?;
    let (report, centroids) = evaluate(&set, cfg)?;
    std::fs::create_dir_all(out_dir)?;
    write_atomic(&out_dir.join(REPORT_FILE), &serde_json::to_vec_pretty(&report)?)?;
    write_atomic(&out_dir.join(CENTROIDS_FILE), &serde_json::to_vec_pretty(&centroids)?)?;
    Ok(report)
}

// ---------------------------------------------------------------- project

/// Writes the PCA projection CSV and returns the explained variance
/// fractions of both components.
pub fn cmd_project(embeddings: &Path, out_csv: &Path) -> Result<[f64; 2], PipelineError> {
    let set = read_embeddings(embeddings)?;
    let p = pca_project(&set.items)?;
    write_atomic(out_csv, projection_csv(&p).as_bytes())?;
    Ok(p.explained_variance)
}

// ---------------------------------------------------------------- everything

/// Paths produced by [`run_all`].
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub manifest: PathBuf,
    pub cache: PathBuf,
    pub run: PathBuf,
    pub embeddings: PathBuf,
    pub evaluation: PathBuf,
    pub projection: PathBuf,
}

impl RunPaths {
    pub fn under(root: &Path) -> Self {
        Self {
            manifest: root.join("corpus").join(MANIFEST_FILE),
            cache: root.join("cache"),
            run: root.join("run"),
            embeddings: root.join("embeddings.styb"),
            evaluation: root.join("eval"),
            projection: root.join("projection.csv"),
        }
    }
}

/// gen-toy, extract, train, embed, evaluate and project in one go.
/// An existing corpus and feature cache under `root` are reused.
pub fn run_all(cfg: &PipelineConfig, root: &Path) -> Result<(RunPaths, EvaluationReport), PipelineError> {
    let paths = RunPaths::under(root);
    if !paths.manifest.exists() {
        cmd_gen_toy(cfg, paths.manifest.parent().expect("corpus dir"))?;
    }
    cmd_extract(&paths.manifest, cfg, &paths.cache)?;
    cmd_train(&paths.manifest, cfg, &paths.cache, &paths.run, false)?;
    cmd_embed(&paths.manifest, cfg, &paths.cache, &paths.run, &paths.embeddings)?;
    let report = cmd_evaluate(&paths.embeddings, cfg, &paths.evaluation)?;
    cmd_project(&paths.embeddings, &paths.projection)?;
    Ok((paths, report))
}
