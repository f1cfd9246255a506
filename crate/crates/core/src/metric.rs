//! Metric learning for style embeddings: prototypical angular loss, the RAdam
//! optimiser, class-balanced batch sampling with perturbations, and the
//! training loop with resumable checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use base64::Engine;
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{random_slice, MelSpectrogram, MAX_SHIFT_FACTOR};
use crate::encoder::{
    backward_into, encode_params, forward, init_params, load_params, ActivationCache, EncoderConfig,
    EncoderError, EncoderParams,
};
use crate::fsutil::write_atomic;

/// Lower bound enforced on the loss scale after every step.
pub const MIN_LOSS_SCALE: f64 = 1e-6;
/// Items per backward work unit; fixed so the gradient sum order never
/// depends on the thread count.
const GRAD_CHUNK: usize = 8;
const ENCODER_FILE: &str = "encoder.stye";
const STATE_FILE: &str = "train_state.json";

#[derive(Error, Debug)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("style {0} has no utterances")]
    EmptyStyle(String),
    #[error("dataset has {have} styles but a batch needs {need}")]
    InsufficientStyles { have: usize, need: usize },
    #[error("embedding {0} has zero norm; cosine similarity undefined")]
    DegenerateEmbedding(usize),
    #[error("non-finite gradient in tensor {0}; step rejected")]
    NonFiniteGradient(usize),
    #[error("gradient/parameter shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub styles_per_batch: usize,
    pub utterances_per_style: usize,
    /// Seconds per random slice.
    pub slice_duration: f64,
    pub max_shift_factor: f64,
    /// Number of precomputed formant-shifted variants per utterance.
    pub shift_variants: usize,
    /// Probability that a batch item uses a shifted variant.
    pub perturb_prob: f64,
    pub steps: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub init_scale: f64,
    pub init_bias: f64,
    /// History rows are emitted every `log_every` steps.
    pub log_every: u64,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            styles_per_batch: 4,
            utterances_per_style: 10,
            slice_duration: 1.6,
            max_shift_factor: MAX_SHIFT_FACTOR,
            shift_variants: 4,
            perturb_prob: 0.5,
            steps: 2000,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            init_scale: 10.0,
            init_bias: -5.0,
            log_every: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.styles_per_batch < 2 {
            return bad("styles_per_batch must be >= 2");
        }
        if self.utterances_per_style < 2 {
            return bad("utterances_per_style must be >= 2 for leave-one-out prototypes");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.slice_duration > 0.0) {
            return bad("slice_duration must be positive");
        }
        if !(0.0..=1.0).contains(&self.perturb_prob) {
            return bad("perturb_prob must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        Ok(())
    }

    pub fn radam(&self) -> RAdamConfig {
        RAdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Learnable scale `w` and bias `b` of the scaled-cosine logits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub w: f64,
    pub b: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self { w: 10.0, b: -5.0 }
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    /// Same shape as the embedding matrix.
    pub grad_embeddings: Array2<f64>,
    pub grad_w: f64,
    pub grad_b: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Prototypical angular loss over `classes x per_class` embeddings stored
/// class-major in the rows of `emb`.
///
/// Every row is a query. Its own-class prototype is the mean of the other
/// `per_class - 1` rows of its class; other prototypes average the whole
/// class. Logits are `w * cos + b` and the loss is the mean cross-entropy of
/// picking the query's own class.
pub fn angular_proto_loss(
    emb: &Array2<f64>,
    classes: usize,
    per_class: usize,
    lp: &LossParams,
) -> Result<LossOutput, TrainError> {
    if per_class < 2 || classes < 1 || emb.nrows() != classes * per_class {
        return Err(TrainError::ShapeMismatch(format!(
            "{} rows for {classes} classes x {per_class}",
            emb.nrows()
        )));
    }
    if emb.iter().any(|v| !v.is_finite()) {
        return Err(TrainError::InvalidConfig("non-finite embedding".into()));
    }
    let dim = emb.ncols();
    let n = classes * per_class;
    for (i, row) in emb.rows().into_iter().enumerate() {
        if norm(row.as_slice().unwrap_or(&row.to_vec())) == 0.0 {
            return Err(TrainError::DegenerateEmbedding(i));
        }
    }
    let sums: Vec<Array1<f64>> = (0..classes)
        .map(|k| {
            emb.slice(ndarray::s![k * per_class..(k + 1) * per_class, ..])
                .sum_axis(Axis(0))
        })
        .collect();
    let protos: Vec<Array1<f64>> = sums.iter().map(|s| s / per_class as f64).collect();
    let proto_norms: Vec<f64> = protos.iter().map(|p| p.dot(p).sqrt()).collect();

    let mut grad = Array2::<f64>::zeros((n, dim));
    // gradient w.r.t. each full-class prototype, spread over members at the end
    let mut grad_protos: Vec<Array1<f64>> = vec![Array1::zeros(dim); classes];
    let (mut loss, mut grad_w, mut grad_b) = (0.0, 0.0, 0.0);
    let mut logits = vec![0.0; classes];
    let mut cosines = vec![0.0; classes];

    for j in 0..classes {
        for i in 0..per_class {
            let qi = j * per_class + i;
            let q = emb.row(qi).to_owned();
            let qn = q.dot(&q).sqrt();
            let own = (&sums[j] - &q) / (per_class - 1) as f64;
            let own_n = own.dot(&own).sqrt();
            if own_n == 0.0 {
                return Err(TrainError::DegenerateEmbedding(qi));
            }
            for k in 0..classes {
                let (c, cn) = if k == j {
                    (&own, own_n)
                } else {
                    if proto_norms[k] == 0.0 {
                        return Err(TrainError::DegenerateEmbedding(k * per_class));
                    }
                    (&protos[k], proto_norms[k])
                };
                cosines[k] = q.dot(c) / (qn * cn);
                logits[k] = lp.w * cosines[k] + lp.b;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|s| (s - max).exp()).sum();
            let lse = max + denom.ln();
            loss += lse - logits[j];
            for k in 0..classes {
                let p = (logits[k] - lse).exp();
                let ds = (p - if k == j { 1.0 } else { 0.0 }) / n as f64;
                grad_w += ds * cosines[k];
                grad_b += ds;
                let dcos = ds * lp.w;
                let (c, cn) = if k == j {
                    (&own, own_n)
                } else {
                    (&protos[k], proto_norms[k])
                };
                let cos = cosines[k];
                // d cos / dq and d cos / dc
                let dq = (c / (qn * cn) - &q * (cos / (qn * qn))) * dcos;
                let dc = (&q / (qn * cn) - c * (cos / (cn * cn))) * dcos;
                {
                    let mut row = grad.row_mut(qi);
                    row += &dq;
                }
                if k == j {
                    let share = &dc / (per_class - 1) as f64;
                    for i2 in 0..per_class {
                        if i2 != i {
                            let mut row = grad.row_mut(j * per_class + i2);
                            row += &share;
                        }
                    }
                } else {
                    grad_protos[k] += &dc;
                }
            }
        }
    }
    for (k, gp) in grad_protos.iter().enumerate() {
        let share = gp / per_class as f64;
        for i in 0..per_class {
            let mut row = grad.row_mut(k * per_class + i);
            row += &share;
        }
    }
    Ok(LossOutput {
        loss: loss / n as f64,
        grad_embeddings: grad,
        grad_w,
        grad_b,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RAdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Length of the approximated simple moving average at step `t`.
pub fn rho_t(beta2: f64, t: u64) -> f64 {
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let b2t = beta2.powi(t as i32);
    rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t)
}

/// Variance rectification factor, defined for `rho_t > 4`.
pub fn rectification(beta2: f64, t: u64) -> f64 {
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let rho = rho_t(beta2, t);
    (((rho - 4.0) * (rho - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    /// Early steps: plain bias-corrected momentum, no division by `v`.
    Unadapted,
    Rectified,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One RAdam update over a list of tensors. Gradients are validated before
/// anything is modified.
pub fn radam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut OptimizerState,
    cfg: &RAdamConfig,
) -> Result<StepKind, TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} parameter tensors, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(TrainError::ShapeMismatch(format!("tensor {i}")));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient(i));
        }
    }
    state.t += 1;
    let t = state.t;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let rho = rho_t(cfg.beta2, t);
    let kind = if rho > 4.0 {
        StepKind::Rectified
    } else {
        StepKind::Unadapted
    };
    let r = if kind == StepKind::Rectified {
        rectification(cfg.beta2, t)
    } else {
        0.0
    };
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for k in 0..p.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            p[k] -= match kind {
                StepKind::Unadapted => cfg.lr * m_hat,
                StepKind::Rectified => {
                    let v_hat = v[k] / bc2;
                    cfg.lr * r * m_hat / (v_hat.sqrt() + cfg.eps)
                }
            };
        }
    }
    Ok(kind)
}

/// One utterance of the training pool; `variants[0]` is unperturbed, the
/// rest are formant-shifted renderings of the same audio.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub variants: Vec<MelSpectrogram>,
    pub speaker_id: String,
    pub synthetic: bool,
}

#[derive(Clone, Debug, Default)]
pub struct StyleDataset {
    styles: BTreeMap<String, Vec<Utterance>>,
}

impl StyleDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, style: &str, utterance: Utterance) {
        self.styles.entry(style.to_string()).or_default().push(utterance);
    }

    /// Registers a style label even if it ends up without utterances.
    pub fn declare_style(&mut self, style: &str) {
        self.styles.entry(style.to_string()).or_default();
    }

    pub fn styles(&self) -> impl Iterator<Item = &str> {
        self.styles.keys().map(String::as_str)
    }

    pub fn n_styles(&self) -> usize {
        self.styles.len()
    }

    pub fn utterances(&self, style: &str) -> &[Utterance] {
        self.styles.get(style).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.styles.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct BatchItem {
    pub mel: MelSpectrogram,
    pub style: String,
    pub speaker_id: String,
    pub synthetic: bool,
    /// Index into the utterance's variant list (0 = unperturbed).
    pub variant: usize,
}

/// `styles.len() x per_style` items, class-major.
#[derive(Clone, Debug)]
pub struct StyleBatch {
    pub styles: Vec<String>,
    pub per_style: usize,
    pub items: Vec<BatchItem>,
}

/// Draws `utterances_per_style` slices for each of `styles_per_batch` styles,
/// uniformly with replacement; each slice uses a formant-shifted variant with
/// probability `perturb_prob`.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &StyleDataset,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StyleBatch, TrainError> {
    for (style, utts) in &dataset.styles {
        if utts.is_empty() {
            return Err(TrainError::EmptyStyle(style.clone()));
        }
    }
    let all: Vec<&String> = dataset.styles.keys().collect();
    let need = cfg.styles_per_batch;
    if all.len() < need {
        return Err(TrainError::InsufficientStyles {
            have: all.len(),
            need,
        });
    }
    let chosen: Vec<&String> = if all.len() == need {
        all
    } else {
        let mut idx = rand::seq::index::sample(rng, all.len(), need).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| all[i]).collect()
    };
    let mut items = Vec::with_capacity(need * cfg.utterances_per_style);
    for style in &chosen {
        let utts = &dataset.styles[*style];
        for _ in 0..cfg.utterances_per_style {
            let u = &utts[rng.random_range(0..utts.len())];
            let variant = if u.variants.len() > 1 && rng.random::<f64>() < cfg.perturb_prob {
                rng.random_range(1..u.variants.len())
            } else {
                0
            };
            items.push(BatchItem {
                mel: random_slice(&u.variants[variant], cfg.slice_duration, rng),
                style: (*style).clone(),
                speaker_id: u.speaker_id.clone(),
                synthetic: u.synthetic,
                variant,
            });
        }
    }
    Ok(StyleBatch {
        styles: chosen.into_iter().cloned().collect(),
        per_style: cfg.utterances_per_style,
        items,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    /// Mean loss over the steps since the previous record.
    pub loss: f64,
    pub w: f64,
    pub b: f64,
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: EncoderParams,
    pub loss_params: LossParams,
    pub optimizer: OptimizerState,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub history: Vec<LossRecord>,
    pub pending_losses: Vec<f64>,
}

impl TrainState {
    pub fn fresh(encoder: &EncoderConfig, cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let params = init_params(encoder, cfg.seed)?;
        let mut sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        sizes.push(2);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            params,
            loss_params: LossParams {
                w: cfg.init_scale,
                b: cfg.init_bias,
            },
            optimizer: OptimizerState::new(&sizes),
            rng,
            step: 0,
            history: Vec::new(),
            pending_losses: Vec::new(),
        })
    }
}

/// Forward over a list of slices, preserving order.
pub fn embed_batch(
    params: &EncoderParams,
    mels: &[&MelSpectrogram],
) -> Result<Vec<(Array1<f64>, ActivationCache)>, EncoderError> {
    mels.par_iter().map(|m| forward(params, m)).collect()
}

/// Sums per-item parameter gradients in a thread-count independent order.
fn accumulate_gradients(
    params: &EncoderParams,
    caches: &[ActivationCache],
    grads: &Array2<f64>,
) -> Result<EncoderParams, EncoderError> {
    let idx: Vec<usize> = (0..caches.len()).collect();
    let partials: Vec<EncoderParams> = idx
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut acc = params.zeros_like();
            for &i in chunk {
                backward_into(params, &caches[i], &grads.row(i).to_owned(), &mut acc)?;
            }
            Ok(acc)
        })
        .collect::<Result<_, EncoderError>>()?;
    let mut total = params.zeros_like();
    for p in &partials {
        total.add_assign(p);
    }
    Ok(total)
}

pub struct Trainer<'a> {
    dataset: &'a StyleDataset,
    cfg: TrainConfig,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(
        dataset: &'a StyleDataset,
        encoder: &EncoderConfig,
        cfg: &TrainConfig,
    ) -> Result<Self, TrainError> {
        Ok(Self {
            dataset,
            cfg: cfg.clone(),
            state: TrainState::fresh(encoder, cfg)?,
        })
    }

    /// Continues from a saved state; `cfg.steps` is the total step target.
    pub fn resume(dataset: &'a StyleDataset, cfg: &TrainConfig, state: TrainState) -> Result<Self, TrainError> {
        cfg.validate()?;
        Ok(Self {
            dataset,
            cfg: cfg.clone(),
            state,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    /// Runs a single optimisation step and returns its loss.
    pub fn step(&mut self) -> Result<f64, TrainError> {
        let cfg = &self.cfg;
        let st = &mut self.state;
        let batch = sample_batch(self.dataset, cfg, &mut st.rng)?;
        let mels: Vec<&MelSpectrogram> = batch.items.iter().map(|it| &it.mel).collect();
        let outputs = embed_batch(&st.params, &mels)?;
        let dim = st.params.config.embedding_dim;
        let mut emb = Array2::zeros((outputs.len(), dim));
        for (i, (e, _)) in outputs.iter().enumerate() {
            emb.row_mut(i).assign(e);
        }
        let caches: Vec<ActivationCache> = outputs.into_iter().map(|(_, c)| c).collect();
        let out = angular_proto_loss(&emb, batch.styles.len(), batch.per_style, &st.loss_params)?;
        let grads = accumulate_gradients(&st.params, &caches, &out.grad_embeddings)?;

        let loss_grad = [out.grad_w, out.grad_b];
        let mut loss_vals = [st.loss_params.w, st.loss_params.b];
        {
            let mut ps = st.params.tensors_mut();
            ps.push(&mut loss_vals);
            let mut gs = grads.tensors();
            gs.push(&loss_grad);
            radam_step(&mut ps, &gs, &mut st.optimizer, &cfg.radam())?;
        }
        st.params.round_to_f32();
        st.loss_params = LossParams {
            w: loss_vals[0].max(MIN_LOSS_SCALE),
            b: loss_vals[1],
        };
        st.step += 1;
        st.pending_losses.push(out.loss);
        if st.step % cfg.log_every == 0 {
            let mean = st.pending_losses.iter().sum::<f64>() / st.pending_losses.len() as f64;
            st.history.push(LossRecord {
                step: st.step,
                loss: mean,
                w: st.loss_params.w,
                b: st.loss_params.b,
            });
            st.pending_losses.clear();
            log::info!(
                "step {} loss {:.4} w {:.3} b {:.3}",
                st.step,
                mean,
                st.loss_params.w,
                st.loss_params.b
            );
        }
        Ok(out.loss)
    }

    /// Trains until `cfg.steps`, checkpointing into `checkpoint_dir` every
    /// `checkpoint_every` steps and at the end.
    pub fn run(&mut self, checkpoint_dir: Option<&Path>) -> Result<(), TrainError> {
        while self.state.step < self.cfg.steps {
            self.step()?;
            if let Some(dir) = checkpoint_dir {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.state.step % every == 0 && self.state.step < self.cfg.steps {
                    save_checkpoint(dir, &self.state, &self.cfg)?;
                }
            }
        }
        if let Some(dir) = checkpoint_dir {
            save_checkpoint(dir, &self.state, &self.cfg)?;
        }
        Ok(())
    }
}

/// Trains from scratch without checkpointing.
pub fn train(
    dataset: &StyleDataset,
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<TrainState, TrainError> {
    let mut t = Trainer::new(dataset, encoder, cfg)?;
    t.run(None)?;
    Ok(t.into_state())
}

fn encode_f64s(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn decode_f64s(s: &str) -> Result<Vec<f64>, TrainError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    if bytes.len() % 8 != 0 {
        return Err(TrainError::Checkpoint("moment buffer length".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Sidecar stored next to `encoder.stye`. Moment buffers are base64 of
/// little-endian f64 so the state restores exactly.
#[derive(Serialize, Deserialize)]
struct StateFile {
    version: u32,
    step: u64,
    loss_params: LossParams,
    optimizer_t: u64,
    optimizer_m: Vec<String>,
    optimizer_v: Vec<String>,
    rng: ChaCha8Rng,
    pending_losses: Vec<f64>,
    history: Vec<LossRecord>,
    config: TrainConfig,
}

pub fn save_checkpoint(dir: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join(ENCODER_FILE), &encode_params(&state.params)?)?;
    let file = StateFile {
        version: 1,
        step: state.step,
        loss_params: state.loss_params,
        optimizer_t: state.optimizer.t,
        optimizer_m: state.optimizer.m.iter().map(|m| encode_f64s(m)).collect(),
        optimizer_v: state.optimizer.v.iter().map(|v| encode_f64s(v)).collect(),
        rng: state.rng.clone(),
        pending_losses: state.pending_losses.clone(),
        history: state.history.clone(),
        config: cfg.clone(),
    };
    write_atomic(&dir.join(STATE_FILE), &serde_json::to_vec_pretty(&file)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, TrainConfig), TrainError> {
    let params = load_params(&dir.join(ENCODER_FILE), None)?;
    let file: StateFile = serde_json::from_slice(&std::fs::read(dir.join(STATE_FILE))?)?;
    if file.version != 1 {
        return Err(TrainError::Checkpoint(format!("unsupported version {}", file.version)));
    }
    let m = file.optimizer_m.iter().map(|s| decode_f64s(s)).collect::<Result<Vec<_>, _>>()?;
    let v = file.optimizer_v.iter().map(|s| decode_f64s(s)).collect::<Result<Vec<_>, _>>()?;
    let expected: Vec<usize> = params
        .tensors()
        .iter()
        .map(|t| t.len())
        .chain(std::iter::once(2))
        .collect();
    let sizes: Vec<usize> = m.iter().map(Vec::len).collect();
    if sizes != expected || v.iter().map(Vec::len).collect::<Vec<_>>() != expected {
        return Err(TrainError::Checkpoint("optimizer state does not match parameters".into()));
    }
    Ok((
        TrainState {
            params,
            loss_params: file.loss_params,
            optimizer: OptimizerState {
                t: file.optimizer_t,
                m,
                v,
            },
            rng: file.rng,
            step: file.step,
            history: file.history,
            pending_losses: file.pending_losses,
        },
        file.config,
    ))
}

/// `step,loss,w,b` rows.
pub fn history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("step,loss,w,b\n");
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.w, r.b));
    }
    out
}
