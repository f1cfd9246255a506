//! Style centroids, nearest-centroid classification, SECS, the speaker
//! leakage probe and 2-D PCA projections, plus the `STYB` embeddings file.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::Hash;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;

const EMBEDDINGS_MAGIC: &[u8; 4] = b"STYB";
const EMBEDDINGS_VERSION: u16 = 1;

#[derive(Error, Debug)]
pub enum StylesError {
    #[error("no embeddings for label {0}")]
    EmptyLabel(String),
    #[error("empty input")]
    Empty,
    #[error("zero-norm vector; cosine undefined")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("leakage probe precondition: {0}")]
    Probe(String),
    #[error("projection needs at least 3 embeddings of dimension >= 2")]
    TooFewPoints,
    #[error("all embeddings identical; no variance to project")]
    RankZero,
    #[error("malformed embeddings file: {0}")]
    Malformed(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// An embedding with its provenance labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEmbedding {
    pub embedding: Array1<f64>,
    pub style: String,
    pub speaker: String,
    pub synthetic: bool,
}

fn l2(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Cosine similarity.
pub fn secs(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64, StylesError> {
    if a.len() != b.len() {
        return Err(StylesError::DimensionMismatch(a.len(), b.len()));
    }
    let (na, nb) = (l2(a), l2(b));
    if na == 0.0 || nb == 0.0 {
        return Err(StylesError::ZeroVector);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Unit-norm mean embedding per label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidSet {
    pub centroids: BTreeMap<String, Vec<f64>>,
    pub counts: BTreeMap<String, usize>,
}

impl CentroidSet {
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.centroids.keys().map(String::as_str)
    }

    pub fn get(&self, label: &str) -> Option<Array1<f64>> {
        self.centroids.get(label).map(|v| Array1::from(v.clone()))
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }
}

/// Arithmetic mean per label followed by L2 normalisation.
pub fn compute_centroids<'a, I>(items: I) -> Result<CentroidSet, StylesError>
where
    I: IntoIterator<Item = (&'a str, &'a Array1<f64>)>,
{
    let mut sums: BTreeMap<String, (Array1<f64>, usize)> = BTreeMap::new();
    let mut dim = None;
    for (label, e) in items {
        match dim {
            None => dim = Some(e.len()),
            Some(d) if d != e.len() => return Err(StylesError::DimensionMismatch(d, e.len())),
            _ => {}
        }
        let entry = sums
            .entry(label.to_string())
            .or_insert_with(|| (Array1::zeros(e.len()), 0));
        entry.0 += e;
        entry.1 += 1;
    }
    if sums.is_empty() {
        return Err(StylesError::Empty);
    }
    let mut centroids = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for (label, (sum, n)) in sums {
        let mean = sum / n as f64;
        let norm = l2(&mean);
        if norm == 0.0 || !norm.is_finite() {
            return Err(StylesError::ZeroVector);
        }
        centroids.insert(label.clone(), (mean / norm).to_vec());
        counts.insert(label, n);
    }
    Ok(CentroidSet { centroids, counts })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub label: String,
    pub scores: BTreeMap<String, f64>,
}

/// Argmax of cosine similarity; ties go to the lexicographically first label.
/// A zero query scores 0 against every centroid.
pub fn classify_nearest_centroid(e: &Array1<f64>, c: &CentroidSet) -> Classification {
    let ne = l2(e);
    let mut best: Option<(&String, f64)> = None;
    let mut scores = BTreeMap::new();
    for (label, centroid) in &c.centroids {
        let dot: f64 = centroid.iter().zip(e.iter()).map(|(a, b)| a * b).sum();
        let nc = centroid.iter().map(|v| v * v).sum::<f64>().sqrt();
        let s = if ne == 0.0 || nc == 0.0 {
            0.0
        } else {
            dot / (ne * nc)
        };
        scores.insert(label.clone(), s);
        // BTreeMap iterates in label order, so strict `>` keeps the first on ties
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((label, s));
        }
    }
    Classification {
        label: best.map(|(l, _)| l.clone()).unwrap_or_default(),
        scores,
    }
}

/// Rows are true labels, columns predictions, both in `labels` order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    fn new(labels: Vec<String>) -> Self {
        let n = labels.len();
        Self {
            labels,
            counts: vec![vec![0; n]; n],
        }
    }

    fn record(&mut self, truth: &str, predicted: &str) {
        let i = self.labels.iter().position(|l| l == truth);
        let j = self.labels.iter().position(|l| l == predicted);
        if let (Some(i), Some(j)) = (i, j) {
            self.counts[i][j] += 1;
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let diag: usize = (0..self.labels.len()).map(|i| self.counts[i][i]).sum();
        diag as f64 / total as f64
    }
}

/// Nearest-centroid accuracy of `queries` against `centroids`.
pub fn centroid_accuracy<'a, I>(queries: I, centroids: &CentroidSet) -> Confusion
where
    I: IntoIterator<Item = (&'a str, &'a Array1<f64>)>,
{
    let mut conf = Confusion::new(centroids.labels().map(str::to_string).collect());
    for (truth, e) in queries {
        let pred = classify_nearest_centroid(e, centroids).label;
        conf.record(truth, &pred);
    }
    conf
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub style_accuracy: f64,
    pub speaker_accuracy: f64,
    pub style_confusion: Confusion,
    pub speaker_confusion: Confusion,
    pub n_train: usize,
    pub n_test: usize,
}

/// Seeded split stratified by key: each group is shuffled and
/// `round(fraction * n)` of it is held out, keeping at least one item on each
/// side whenever the group has two or more. Returns a held-out flag per item.
pub fn stratified_split<K: Ord + Clone + Hash>(keys: &[K], fraction: f64, seed: u64) -> Vec<bool> {
    let mut groups: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        groups.entry(k.clone()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held = vec![false; keys.len()];
    for idx in groups.values_mut() {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let mut k = (fraction * n as f64).round() as usize;
        if n >= 2 && fraction > 0.0 {
            k = k.clamp(1, n - 1);
        } else {
            k = k.min(n.saturating_sub(1));
        }
        for &i in &idx[..k] {
            held[i] = true;
        }
    }
    held
}

/// Fits style and speaker centroids on a training split and reports
/// nearest-centroid accuracy on the held-out part for both labelings.
/// High speaker accuracy means the embeddings carry speaker identity.
pub fn leakage_probe(
    items: &[LabeledEmbedding],
    holdout_fraction: f64,
    seed: u64,
) -> Result<LeakageReport, StylesError> {
    let speakers: BTreeSet<&str> = items.iter().map(|i| i.speaker.as_str()).collect();
    let styles: BTreeSet<&str> = items.iter().map(|i| i.style.as_str()).collect();
    if speakers.len() < 2 {
        return Err(StylesError::Probe("need at least 2 speakers".into()));
    }
    if styles.len() < 2 {
        return Err(StylesError::Probe("need at least 2 styles".into()));
    }
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(StylesError::Probe("holdout fraction must lie in (0, 1)".into()));
    }
    let keys: Vec<(&str, &str)> = items
        .iter()
        .map(|i| (i.speaker.as_str(), i.style.as_str()))
        .collect();
    let held = stratified_split(&keys, holdout_fraction, seed);
    let (train, test): (Vec<_>, Vec<_>) = items.iter().zip(&held).partition(|(_, h)| !**h);
    let train: Vec<&LabeledEmbedding> = train.into_iter().map(|(e, _)| e).collect();
    let test: Vec<&LabeledEmbedding> = test.into_iter().map(|(e, _)| e).collect();
    for label in &speakers {
        if !train.iter().any(|e| e.speaker == *label) || !test.iter().any(|e| e.speaker == *label) {
            return Err(StylesError::Probe(format!("speaker {label} missing from one side of the split")));
        }
    }
    for label in &styles {
        if !train.iter().any(|e| e.style == *label) || !test.iter().any(|e| e.style == *label) {
            return Err(StylesError::Probe(format!("style {label} missing from one side of the split")));
        }
    }
    let style_c = compute_centroids(train.iter().map(|e| (e.style.as_str(), &e.embedding)))?;
    let speaker_c = compute_centroids(train.iter().map(|e| (e.speaker.as_str(), &e.embedding)))?;
    let style_confusion = centroid_accuracy(test.iter().map(|e| (e.style.as_str(), &e.embedding)), &style_c);
    let speaker_confusion =
        centroid_accuracy(test.iter().map(|e| (e.speaker.as_str(), &e.embedding)), &speaker_c);
    Ok(LeakageReport {
        style_accuracy: style_confusion.accuracy(),
        speaker_accuracy: speaker_confusion.accuracy(),
        style_confusion,
        speaker_confusion,
        n_train: train.len(),
        n_test: test.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub style: String,
    pub speaker: String,
    pub synthetic: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection2D {
    pub points: Vec<ProjectedPoint>,
    /// Fraction of total variance captured by each component, descending.
    pub explained_variance: [f64; 2],
    /// Unit principal axes.
    pub components: [Array1<f64>; 2],
    pub mean: Array1<f64>,
}

/// Principal-component projection onto the top two eigenvectors of the
/// sample covariance. Each axis is signed so its largest-magnitude entry is
/// positive, which makes the output reproducible.
pub fn pca_project(items: &[LabeledEmbedding]) -> Result<Projection2D, StylesError> {
    let n = items.len();
    let dim = items.first().map_or(0, |i| i.embedding.len());
    if n < 3 || dim < 2 {
        return Err(StylesError::TooFewPoints);
    }
    if let Some(bad) = items.iter().find(|i| i.embedding.len() != dim) {
        return Err(StylesError::DimensionMismatch(dim, bad.embedding.len()));
    }
    let mut mean = Array1::<f64>::zeros(dim);
    for i in items {
        mean += &i.embedding;
    }
    mean /= n as f64;
    let centered = DMatrix::from_fn(n, dim, |r, c| items[r].embedding[c] - mean[c]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let total: f64 = cov.trace();
    if !(total > 1e-24) {
        return Err(StylesError::RankZero);
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |k: usize| -> Array1<f64> {
        let col = eig.eigenvectors.column(order[k]);
        let mut v = Array1::from_iter(col.iter().cloned());
        let pivot = v
            .iter()
            .cloned()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(0.0);
        if pivot < 0.0 {
            v.mapv_inplace(|x| -x);
        }
        v
    };
    let components = [axis(0), axis(1)];
    let frac = |k: usize| (eig.eigenvalues[order[k]].max(0.0) / total).clamp(0.0, 1.0);
    let explained_variance = [frac(0), frac(1)];
    let points = items
        .iter()
        .map(|i| {
            let c = &i.embedding - &mean;
            ProjectedPoint {
                x: c.dot(&components[0]),
                y: c.dot(&components[1]),
                style: i.style.clone(),
                speaker: i.speaker.clone(),
                synthetic: i.synthetic,
            }
        })
        .collect();
    Ok(Projection2D {
        points,
        explained_variance,
        components,
        mean,
    })
}

/// `x,y,style,speaker,synthetic` rows.
pub fn projection_csv(p: &Projection2D) -> String {
    let mut out = String::from("x,y,style,speaker,synthetic\n");
    for pt in &p.points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            pt.x, pt.y, pt.style, pt.speaker, pt.synthetic
        ));
    }
    out
}

/// Per-record metadata that does not fit the fixed binary record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordInfo {
    pub audio_path: String,
    /// Whether the utterance belongs to the validation split.
    pub validation: bool,
}

/// Sidecar JSON for an embeddings file: id tables plus per-record info.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingsSidecar {
    pub version: u32,
    pub styles: Vec<String>,
    pub speakers: Vec<String>,
    pub records: Vec<RecordInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub items: Vec<LabeledEmbedding>,
    pub info: Vec<RecordInfo>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Encodes the binary `STYB` payload and its sidecar. Label ids index the
/// sorted unique labels. Embeddings are stored as f32.
pub fn encode_embeddings(set: &EmbeddingSet) -> Result<(Vec<u8>, EmbeddingsSidecar), StylesError> {
    if set.items.is_empty() {
        return Err(StylesError::Empty);
    }
    if set.info.len() != set.items.len() {
        return Err(StylesError::DimensionMismatch(set.items.len(), set.info.len()));
    }
    let dim = set.items[0].embedding.len();
    let styles: Vec<String> = set
        .items
        .iter()
        .map(|i| i.style.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let speakers: Vec<String> = set
        .items
        .iter()
        .map(|i| i.speaker.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let too_big = |what: &str| StylesError::Malformed(format!("{what} does not fit the format"));
    let mut out = Vec::with_capacity(12 + set.items.len() * (4 * dim + 5));
    out.extend_from_slice(EMBEDDINGS_MAGIC);
    out.write_u16::<LittleEndian>(EMBEDDINGS_VERSION)?;
    out.write_u16::<LittleEndian>(u16::try_from(dim).map_err(|_| too_big("dimension"))?)?;
    out.write_u32::<LittleEndian>(u32::try_from(set.items.len()).map_err(|_| too_big("count"))?)?;
    for item in &set.items {
        if item.embedding.len() != dim {
            return Err(StylesError::DimensionMismatch(dim, item.embedding.len()));
        }
        for &v in item.embedding.iter() {
            out.write_f32::<LittleEndian>(v as f32)?;
        }
        let sid = styles.binary_search(&item.style).expect("style registered");
        let pid = speakers.binary_search(&item.speaker).expect("speaker registered");
        out.write_u16::<LittleEndian>(u16::try_from(sid).map_err(|_| too_big("style id"))?)?;
        out.write_u16::<LittleEndian>(u16::try_from(pid).map_err(|_| too_big("speaker id"))?)?;
        out.write_u8(item.synthetic as u8)?;
    }
    let sidecar = EmbeddingsSidecar {
        version: 1,
        styles,
        speakers,
        records: set.info.clone(),
    };
    Ok((out, sidecar))
}

pub fn decode_embeddings(bytes: &[u8], sidecar: &EmbeddingsSidecar) -> Result<EmbeddingSet, StylesError> {
    let bad = |m: &str| StylesError::Malformed(m.to_string());
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != EMBEDDINGS_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.read_u16::<LittleEndian>().map_err(|_| bad("truncated header"))?;
    if version != EMBEDDINGS_VERSION {
        return Err(StylesError::Malformed(format!("unsupported version {version}")));
    }
    let dim = r.read_u16::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    let count = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    let expected = 12 + count * (4 * dim + 5);
    if bytes.len() != expected {
        return Err(StylesError::Malformed(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    if sidecar.records.len() != count {
        return Err(bad("sidecar record count differs from file"));
    }
    let mut items = Vec::with_capacity(count);
    for _ in 0..count {
        let mut e = Array1::zeros(dim);
        for v in e.iter_mut() {
            *v = r.read_f32::<LittleEndian>()? as f64;
        }
        let sid = r.read_u16::<LittleEndian>()? as usize;
        let pid = r.read_u16::<LittleEndian>()? as usize;
        let flag = r.read_u8()?;
        let style = sidecar.styles.get(sid).ok_or_else(|| bad("style id out of range"))?;
        let speaker = sidecar
            .speakers
            .get(pid)
            .ok_or_else(|| bad("speaker id out of range"))?;
        if flag > 1 {
            return Err(bad("synthetic flag not 0/1"));
        }
        items.push(LabeledEmbedding {
            embedding: e,
            style: style.clone(),
            speaker: speaker.clone(),
            synthetic: flag == 1,
        });
    }
    Ok(EmbeddingSet {
        items,
        info: sidecar.records.clone(),
    })
}

/// Path of the sidecar belonging to an embeddings file.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<(), StylesError> {
    let (bytes, sidecar) = encode_embeddings(set)?;
    write_atomic(&sidecar_path(path), &serde_json::to_vec_pretty(&sidecar)?)?;
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet, StylesError> {
    let bytes = std::fs::read(path)?;
    let sidecar: EmbeddingsSidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
    decode_embeddings(&bytes, &sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn item(e: Array1<f64>, style: &str, speaker: &str) -> LabeledEmbedding {
        LabeledEmbedding {
            embedding: e,
            style: style.into(),
            speaker: speaker.into(),
            synthetic: false,
        }
    }

    #[test]
    fn centroid_examples() {
        let a = array![1.0, 0.0];
        let b = array![0.0, 1.0];
        let c = compute_centroids([("x", &a), ("x", &b)]).unwrap();
        let x = c.get("x").unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((x[0] - h).abs() < 1e-12 && (x[1] - h).abs() < 1e-12);
        assert_eq!(c.counts["x"], 2);

        let single = compute_centroids([("y", &array![3.0, 4.0])]).unwrap();
        assert_eq!(single.get("y").unwrap(), array![0.6, 0.8]);
        assert!(matches!(
            compute_centroids(std::iter::empty::<(&str, &Array1<f64>)>()),
            Err(StylesError::Empty)
        ));
    }

    #[test]
    fn classification_examples() {
        let a = array![1.0, 0.0, 0.0];
        let b = array![0.0, 1.0, 0.0];
        let c = compute_centroids([("b", &b), ("a", &a)]).unwrap();
        let r = classify_nearest_centroid(&b, &c);
        assert_eq!(r.label, "b");
        assert!((r.scores["b"] - 1.0).abs() < 1e-12);
        let orth = classify_nearest_centroid(&array![0.0, 0.0, 2.0], &c);
        assert_eq!(orth.label, "a");
        assert!(orth.scores.values().all(|&s| s == 0.0));
        let q = array![0.3, 0.7, 0.1];
        let s1 = classify_nearest_centroid(&q, &c).scores;
        let s3 = classify_nearest_centroid(&(&q * 3.0), &c).scores;
        for (k, v) in &s1 {
            assert!((v - s3[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn secs_examples() {
        let e = array![0.2, -0.5, 0.9];
        assert!((secs(&e, &e).unwrap() - 1.0).abs() < 1e-12);
        assert!((secs(&e, &(-&e)).unwrap() + 1.0).abs() < 1e-12);
        let v = secs(&array![1.0, 0.0], &array![1.0, 1.0]).unwrap();
        assert!((v - 0.5f64.sqrt()).abs() < 1e-9);
        assert!(matches!(secs(&array![0.0, 0.0], &e.slice(ndarray::s![..2]).to_owned()), Err(StylesError::ZeroVector)));
    }

    #[test]
    fn probe_on_one_hot_styles() {
        let mut items = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand::Rng;
        for s in 0..3 {
            for _ in 0..40 {
                let mut e = Array1::zeros(3);
                e[s] = 1.0;
                let spk = format!("p{}", rng.random_range(0..2));
                items.push(item(e, &format!("s{s}"), &spk));
            }
        }
        // make sure each (speaker, style) pair exists at least twice
        for s in 0..3 {
            for p in 0..2 {
                for _ in 0..2 {
                    let mut e = Array1::zeros(3);
                    e[s] = 1.0;
                    items.push(item(e, &format!("s{s}"), &format!("p{p}")));
                }
            }
        }
        let r = leakage_probe(&items, 0.3, 1).unwrap();
        assert_eq!(r.style_accuracy, 1.0);
        assert!((0.0..=1.0).contains(&r.speaker_accuracy));
        assert!(r.speaker_accuracy < 0.8);
        assert_eq!(r.style_confusion.total(), r.n_test);
        assert_eq!(r.speaker_confusion.total(), r.n_test);
    }

    #[test]
    fn probe_needs_two_speakers() {
        let items: Vec<_> = (0..10)
            .map(|i| item(array![1.0, i as f64], if i % 2 == 0 { "a" } else { "b" }, "solo"))
            .collect();
        assert!(matches!(leakage_probe(&items, 0.5, 0), Err(StylesError::Probe(_))));
    }

    #[test]
    fn split_is_stratified_and_seeded() {
        let keys: Vec<u8> = (0..100).map(|i| (i % 4) as u8).collect();
        let a = stratified_split(&keys, 0.2, 5);
        assert_eq!(a, stratified_split(&keys, 0.2, 5));
        for k in 0..4u8 {
            let held = keys.iter().zip(&a).filter(|(kk, h)| **kk == k && **h).count();
            assert_eq!(held, 5);
        }
        // singleton groups stay in training
        assert_eq!(stratified_split(&[1, 2, 3], 0.5, 0), vec![false; 3]);
    }

    #[test]
    fn pca_examples() {
        let dir = array![1.0, 2.0, -1.0, 0.5, 3.0];
        let items: Vec<_> = (0..6)
            .map(|i| item(&dir * (i as f64 - 2.0) + 1.0, "a", "p"))
            .collect();
        let p = pca_project(&items).unwrap();
        assert!((p.explained_variance[0] - 1.0).abs() < 1e-9);
        let mx: f64 = p.points.iter().map(|q| q.x).sum::<f64>() / 6.0;
        let my: f64 = p.points.iter().map(|q| q.y).sum::<f64>() / 6.0;
        assert!(mx.abs() < 1e-9 && my.abs() < 1e-9);

        let same: Vec<_> = (0..4).map(|_| item(array![1.0, 2.0], "a", "p")).collect();
        assert!(matches!(pca_project(&same), Err(StylesError::RankZero)));
        assert!(matches!(pca_project(&same[..2]), Err(StylesError::TooFewPoints)));
    }

    #[test]
    fn projection_csv_header_and_rows() {
        let items: Vec<_> = (0..4)
            .map(|i| item(array![i as f64, (i * i) as f64, 1.0], "s", "p"))
            .collect();
        let csv = projection_csv(&pca_project(&items).unwrap());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "x,y,style,speaker,synthetic");
        assert_eq!(lines.len(), 5);
    }

    #[test]
    fn embeddings_round_trip_and_errors() {
        let items = vec![
            item(array![0.25, -0.5], "lively", "spk2"),
            LabeledEmbedding {
                synthetic: true,
                ..item(array![1.0, 0.0], "neutral", "spk1")
            },
        ];
        let info = vec![
            RecordInfo {
                audio_path: "a.wav".into(),
                validation: false,
            },
            RecordInfo {
                audio_path: "b.wav".into(),
                validation: true,
            },
        ];
        let set = EmbeddingSet { items, info };
        let (bytes, side) = encode_embeddings(&set).unwrap();
        assert_eq!(&bytes[..4], b"STYB");
        assert_eq!(bytes.len(), 12 + 2 * (8 + 5));
        assert_eq!(decode_embeddings(&bytes, &side).unwrap(), set);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_embeddings(&bad, &side).is_err());
        assert!(decode_embeddings(&bytes[..bytes.len() - 1], &side).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.styb");
        write_embeddings(&set, &path).unwrap();
        assert_eq!(read_embeddings(&path).unwrap(), set);
    }
}
