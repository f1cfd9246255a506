//! Convolutional-recurrent reference encoder with exact backpropagation.
//!
//! Architecture: a stack of 3x3 / stride-2 convolutions with ReLU over the
//! (time x mel) plane, frequency and channels flattened per time step, a
//! single-layer GRU read out at its final state, a linear projection, `tanh`
//! and L2 normalisation.
//!
//! Activations are stored channels-last (`[time][mel][channel]`) so that each
//! convolution is one im2col GEMM.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt};
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::MelSpectrogram;
use crate::fsutil::write_atomic;

pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;
const CHECKPOINT_MAGIC: &[u8; 4] = b"STYE";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Error, Debug)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("input contains non-finite values")]
    NonFiniteInput,
    #[error("input has {got} mel bands, encoder expects {expected}")]
    InputShape { expected: usize, got: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("embedding collapsed to the zero vector")]
    DegenerateEmbedding,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("not an encoder checkpoint (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u16),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("checkpoint config {found:?} does not match expected {expected:?}")]
    ConfigMismatch {
        expected: Box<EncoderConfig>,
        found: Box<EncoderConfig>,
    },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub n_mels: usize,
    pub channels: Vec<usize>,
    pub hidden: usize,
    pub embedding_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            channels: vec![32, 32, 64, 64, 128, 128],
            hidden: 128,
            embedding_dim: 128,
        }
    }
}

fn downsample(d: usize) -> usize {
    d.div_ceil(STRIDE)
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.channels.is_empty() {
            return Err(EncoderError::InvalidConfig("empty channel list".into()));
        }
        if self.n_mels == 0
            || self.hidden == 0
            || self.embedding_dim == 0
            || self.channels.iter().any(|&c| c == 0)
        {
            return Err(EncoderError::InvalidConfig(format!(
                "all dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Mel-axis width after the convolution stack.
    pub fn conv_out_width(&self) -> usize {
        self.channels.iter().fold(self.n_mels, |w, _| downsample(w))
    }

    /// Per-time-step GRU input size.
    pub fn gru_input(&self) -> usize {
        self.conv_out_width() * self.channels.last().copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[9 * c_in, c_out]`, rows ordered `(kh, kw, c_in)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// GRU weights, gate blocks ordered reset | update | candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    /// `[input, 3 * hidden]`
    pub w_input: Array2<f64>,
    /// `[hidden, 3 * hidden]`
    pub w_hidden: Array2<f64>,
    pub b_input: Array1<f64>,
    pub b_hidden: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub conv: Vec<ConvLayer>,
    pub gru: GruParams,
    /// `[hidden, embedding_dim]`
    pub proj_weight: Array2<f64>,
    pub proj_bias: Array1<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound))
}

impl EncoderParams {
    pub fn zeros(config: &EncoderConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut conv = Vec::with_capacity(config.channels.len());
        let mut c_in = 1;
        for &c_out in &config.channels {
            conv.push(ConvLayer {
                weight: Array2::zeros((KERNEL * KERNEL * c_in, c_out)),
                bias: Array1::zeros(c_out),
            });
            c_in = c_out;
        }
        let h = config.hidden;
        Ok(Self {
            config: config.clone(),
            conv,
            gru: GruParams {
                w_input: Array2::zeros((config.gru_input(), 3 * h)),
                w_hidden: Array2::zeros((h, 3 * h)),
                b_input: Array1::zeros(3 * h),
                b_hidden: Array1::zeros(3 * h),
            },
            proj_weight: Array2::zeros((h, config.embedding_dim)),
            proj_bias: Array1::zeros(config.embedding_dim),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config already validated")
    }

    /// Flat views of every tensor in checkpoint order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.conv {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out.push(self.gru.w_input.as_slice().expect("standard layout"));
        out.push(self.gru.w_hidden.as_slice().expect("standard layout"));
        out.push(self.gru.b_input.as_slice().expect("standard layout"));
        out.push(self.gru.b_hidden.as_slice().expect("standard layout"));
        out.push(self.proj_weight.as_slice().expect("standard layout"));
        out.push(self.proj_bias.as_slice().expect("standard layout"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.conv {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.gru.w_input.as_slice_mut().expect("standard layout"));
        out.push(self.gru.w_hidden.as_slice_mut().expect("standard layout"));
        out.push(self.gru.b_input.as_slice_mut().expect("standard layout"));
        out.push(self.gru.b_hidden.as_slice_mut().expect("standard layout"));
        out.push(self.proj_weight.as_slice_mut().expect("standard layout"));
        out.push(self.proj_bias.as_slice_mut().expect("standard layout"));
        out
    }

    /// Names matching [`Self::tensors`], for diagnostics.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.conv.len() {
            out.push(format!("conv{i}.weight"));
            out.push(format!("conv{i}.bias"));
        }
        for n in ["gru.w_input", "gru.w_hidden", "gru.b_input", "gru.b_hidden"] {
            out.push(n.to_string());
        }
        out.push("proj.weight".into());
        out.push("proj.bias".into());
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Accumulates `other` into `self` element-wise.
    pub fn add_assign(&mut self, other: &EncoderParams) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }

    /// Rounds every value to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// He-uniform convolution and projection weights, `U(+-1/sqrt(fan_in))`
/// recurrent weights, zero biases. Values are f32-representable.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams, EncoderError> {
    let mut p = EncoderParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut p.conv {
        let fan_in = layer.weight.nrows() as f64;
        layer.weight = uniform(&mut rng, layer.weight.dim(), (6.0 / fan_in).sqrt());
    }
    let h = config.hidden as f64;
    p.gru.w_input = uniform(
        &mut rng,
        p.gru.w_input.dim(),
        1.0 / (config.gru_input() as f64).sqrt(),
    );
    p.gru.w_hidden = uniform(&mut rng, p.gru.w_hidden.dim(), 1.0 / h.sqrt());
    p.proj_weight = uniform(&mut rng, p.proj_weight.dim(), (6.0 / h).sqrt());
    p.round_to_f32();
    Ok(p)
}

/// Channels-last feature map.
#[derive(Clone, Debug)]
struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    /// `[height * width, channels]`
    data: Array2<f64>,
}

fn im2col(x: &FeatureMap) -> (Array2<f64>, usize, usize) {
    let (ho, wo, c) = (downsample(x.height), downsample(x.width), x.channels);
    let mut cols = Array2::zeros((ho * wo, KERNEL * KERNEL * c));
    let src = x.data.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("standard layout");
    let row_len = KERNEL * KERNEL * c;
    for oh in 0..ho {
        for ow in 0..wo {
            let row = (oh * wo + ow) * row_len;
            for kh in 0..KERNEL {
                let ih = (STRIDE * oh + kh) as isize - 1;
                if ih < 0 || ih >= x.height as isize {
                    continue;
                }
                for kw in 0..KERNEL {
                    let iw = (STRIDE * ow + kw) as isize - 1;
                    if iw < 0 || iw >= x.width as isize {
                        continue;
                    }
                    let s = (ih as usize * x.width + iw as usize) * c;
                    let d = row + (kh * KERNEL + kw) * c;
                    dst[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Scatter-adds column gradients back onto the input map.
fn col2im(dcols: &Array2<f64>, height: usize, width: usize, channels: usize) -> Array2<f64> {
    let (ho, wo) = (downsample(height), downsample(width));
    let mut dx = Array2::zeros((height * width, channels));
    let dst = dx.as_slice_mut().expect("standard layout");
    let src = dcols.as_slice().expect("standard layout");
    let row_len = KERNEL * KERNEL * channels;
    for oh in 0..ho {
        for ow in 0..wo {
            let row = (oh * wo + ow) * row_len;
            for kh in 0..KERNEL {
                let ih = (STRIDE * oh + kh) as isize - 1;
                if ih < 0 || ih >= height as isize {
                    continue;
                }
                for kw in 0..KERNEL {
                    let iw = (STRIDE * ow + kw) as isize - 1;
                    if iw < 0 || iw >= width as isize {
                        continue;
                    }
                    let d = (ih as usize * width + iw as usize) * channels;
                    let s = row + (kh * KERNEL + kw) * channels;
                    for ch in 0..channels {
                        dst[d + ch] += src[s + ch];
                    }
                }
            }
        }
    }
    dx
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct GruStep {
    h_prev: Array1<f64>,
    r: Array1<f64>,
    z: Array1<f64>,
    n: Array1<f64>,
    /// Recurrent candidate pre-activation `W_hn h + b_hn`, before the reset gate.
    gh_n: Array1<f64>,
}

/// Intermediates retained by [`forward`] for [`backward`].
pub struct ActivationCache {
    /// Input of each conv layer.
    conv_inputs: Vec<FeatureMap>,
    /// Post-ReLU output of each conv layer.
    conv_outputs: Vec<FeatureMap>,
    /// `[time, gru_input]`
    sequence: Array2<f64>,
    steps: Vec<GruStep>,
    h_final: Array1<f64>,
    /// `tanh` output before normalisation.
    activated: Array1<f64>,
    norm: f64,
    embedding: Array1<f64>,
}

impl ActivationCache {
    pub fn embedding(&self) -> &Array1<f64> {
        &self.embedding
    }

    pub fn time_steps(&self) -> usize {
        self.steps.len()
    }
}

pub fn forward(
    p: &EncoderParams,
    mel: &MelSpectrogram,
) -> Result<(Array1<f64>, ActivationCache), EncoderError> {
    forward_array(p, mel.data.view())
}

/// Forward pass on a raw `frames x n_mels` array.
pub fn forward_array(
    p: &EncoderParams,
    mel: ArrayView2<f64>,
) -> Result<(Array1<f64>, ActivationCache), EncoderError> {
    let cfg = &p.config;
    let (frames, mels) = mel.dim();
    if mels != cfg.n_mels {
        return Err(EncoderError::InputShape {
            expected: cfg.n_mels,
            got: mels,
        });
    }
    if frames == 0 {
        return Err(EncoderError::EmptyInput);
    }
    if mel.iter().any(|v| !v.is_finite()) {
        return Err(EncoderError::NonFiniteInput);
    }
    let mut x = FeatureMap {
        height: frames,
        width: mels,
        channels: 1,
        data: mel
            .to_owned()
            .into_shape_with_order((frames * mels, 1))
            .map_err(|e| EncoderError::ShapeMismatch(e.to_string()))?,
    };
    let mut conv_inputs = Vec::with_capacity(p.conv.len());
    let mut conv_outputs = Vec::with_capacity(p.conv.len());
    for layer in &p.conv {
        let (cols, ho, wo) = im2col(&x);
        let mut out = cols.dot(&layer.weight);
        out += &layer.bias;
        out.mapv_inplace(|v| v.max(0.0));
        let y = FeatureMap {
            height: ho,
            width: wo,
            channels: layer.bias.len(),
            data: out,
        };
        conv_inputs.push(std::mem::replace(&mut x, y.clone()));
        conv_outputs.push(y);
    }
    let steps_n = x.height;
    let sequence = x
        .data
        .into_shape_with_order((steps_n, x.width * x.channels))
        .map_err(|e| EncoderError::ShapeMismatch(e.to_string()))?;

    let h = cfg.hidden;
    let mut gi = sequence.dot(&p.gru.w_input);
    gi += &p.gru.b_input;
    let mut h_prev = Array1::<f64>::zeros(h);
    let mut steps = Vec::with_capacity(steps_n);
    for t in 0..steps_n {
        let mut gh = h_prev.dot(&p.gru.w_hidden);
        gh += &p.gru.b_hidden;
        let gi_t = gi.row(t);
        let r = Array1::from_shape_fn(h, |k| sigmoid(gi_t[k] + gh[k]));
        let z = Array1::from_shape_fn(h, |k| sigmoid(gi_t[h + k] + gh[h + k]));
        let gh_n = gh.slice(s![2 * h..]).to_owned();
        let n = Array1::from_shape_fn(h, |k| (gi_t[2 * h + k] + r[k] * gh_n[k]).tanh());
        let h_next = Array1::from_shape_fn(h, |k| (1.0 - z[k]) * n[k] + z[k] * h_prev[k]);
        steps.push(GruStep {
            h_prev: std::mem::replace(&mut h_prev, h_next),
            r,
            z,
            n,
            gh_n,
        });
    }
    let h_final = h_prev;
    let activated = (h_final.dot(&p.proj_weight) + &p.proj_bias).mapv(f64::tanh);
    let norm = activated.dot(&activated).sqrt();
    if !(norm > 1e-12) || !norm.is_finite() {
        return Err(EncoderError::DegenerateEmbedding);
    }
    let embedding = &activated / norm;
    let cache = ActivationCache {
        conv_inputs,
        conv_outputs,
        sequence,
        steps,
        h_final,
        activated,
        norm,
        embedding: embedding.clone(),
    };
    Ok((embedding, cache))
}

/// Exact gradients of `grad_embedding . embedding` with respect to every
/// parameter.
pub fn backward(
    p: &EncoderParams,
    cache: &ActivationCache,
    grad_embedding: &Array1<f64>,
) -> Result<EncoderParams, EncoderError> {
    let mut g = p.zeros_like();
    backward_into(p, cache, grad_embedding, &mut g)?;
    Ok(g)
}

/// Like [`backward`] but adds the gradients into `g`, which avoids a
/// parameter-sized allocation per item when summing over a batch.
pub fn backward_into(
    p: &EncoderParams,
    cache: &ActivationCache,
    grad_embedding: &Array1<f64>,
    g: &mut EncoderParams,
) -> Result<(), EncoderError> {
    let cfg = &p.config;
    if grad_embedding.len() != cfg.embedding_dim {
        return Err(EncoderError::ShapeMismatch(format!(
            "gradient has {} entries, embedding has {}",
            grad_embedding.len(),
            cfg.embedding_dim
        )));
    }
    if cache.conv_inputs.len() != p.conv.len() || cache.h_final.len() != cfg.hidden {
        return Err(EncoderError::ShapeMismatch(
            "activation cache does not match parameters".into(),
        ));
    }
    if g.config != p.config {
        return Err(EncoderError::ShapeMismatch("gradient accumulator config".into()));
    }
    let h = cfg.hidden;

    // L2 normalisation then tanh
    let y = &cache.embedding;
    let d_act = (grad_embedding - &(y * y.dot(grad_embedding))) / cache.norm;
    let d_pre = &d_act * &cache.activated.mapv(|a| 1.0 - a * a);

    // projection
    add_outer(&mut g.proj_weight, &cache.h_final, &d_pre);
    g.proj_bias += &d_pre;
    let mut dh = p.proj_weight.dot(&d_pre);

    // GRU, backwards through time
    let steps_n = cache.steps.len();
    let mut d_gi = Array2::<f64>::zeros((steps_n, 3 * h));
    for t in (0..steps_n).rev() {
        let st = &cache.steps[t];
        let mut d_gh = Array1::<f64>::zeros(3 * h);
        let mut dh_prev = Array1::<f64>::zeros(h);
        {
            let mut d_gi_t = d_gi.row_mut(t);
            for k in 0..h {
                let (r, z, n) = (st.r[k], st.z[k], st.n[k]);
                let dn = dh[k] * (1.0 - z);
                let dz = dh[k] * (st.h_prev[k] - n);
                dh_prev[k] = dh[k] * z;
                let dn_pre = dn * (1.0 - n * n);
                let dr_pre = dn_pre * st.gh_n[k] * r * (1.0 - r);
                let dz_pre = dz * z * (1.0 - z);
                d_gi_t[k] = dr_pre;
                d_gi_t[h + k] = dz_pre;
                d_gi_t[2 * h + k] = dn_pre;
                d_gh[k] = dr_pre;
                d_gh[h + k] = dz_pre;
                d_gh[2 * h + k] = dn_pre * r;
            }
        }
        add_outer(&mut g.gru.w_hidden, &st.h_prev, &d_gh);
        g.gru.b_hidden += &d_gh;
        dh_prev += &p.gru.w_hidden.dot(&d_gh);
        dh = dh_prev;
    }
    general_mat_mul(1.0, &cache.sequence.t(), &d_gi, 1.0, &mut g.gru.w_input);
    g.gru.b_input += &d_gi.sum_axis(Axis(0));
    let d_seq = row_major(d_gi.dot(&p.gru.w_input.t()));

    // conv stack, last layer first
    let last = cache.conv_outputs.last().expect("non-empty conv stack");
    let mut d_out = d_seq
        .into_shape_with_order((last.height * last.width, last.channels))
        .map_err(|e| EncoderError::ShapeMismatch(e.to_string()))?;
    for l in (0..p.conv.len()).rev() {
        let out = &cache.conv_outputs[l];
        let input = &cache.conv_inputs[l];
        // ReLU mask
        d_out.zip_mut_with(&out.data, |d, &o| {
            if o <= 0.0 {
                *d = 0.0
            }
        });
        let (cols, _, _) = im2col(input);
        general_mat_mul(1.0, &cols.t(), &d_out, 1.0, &mut g.conv[l].weight);
        g.conv[l].bias += &d_out.sum_axis(Axis(0));
        if l > 0 {
            let d_cols = row_major(d_out.dot(&p.conv[l].weight.t()));
            d_out = col2im(&d_cols, input.height, input.width, input.channels);
        }
    }
    Ok(())
}

/// `m += a b^T`
fn add_outer(m: &mut Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) {
    for (mut row, &ai) in m.rows_mut().into_iter().zip(a.iter()) {
        row.scaled_add(ai, b);
    }
}

/// GEMM results involving transposed operands may come back column-major;
/// parameter tensors and reshapes need row-major storage.
fn row_major(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn write_u32(out: &mut Vec<u8>, v: usize) -> Result<(), EncoderError> {
    let v = u32::try_from(v)
        .map_err(|_| EncoderError::InvalidConfig(format!("dimension {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// `STYE` layout: magic, version u16, config (u32 n_mels, u32 layer count,
/// u32 per layer channels, u32 hidden, u32 embedding dim), then every tensor
/// of [`EncoderParams::tensors`] as little-endian f32.
pub fn encode_params(p: &EncoderParams) -> Result<Vec<u8>, EncoderError> {
    let mut out = Vec::with_capacity(64 + 4 * p.num_parameters());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let c = &p.config;
    write_u32(&mut out, c.n_mels)?;
    write_u32(&mut out, c.channels.len())?;
    for &ch in &c.channels {
        write_u32(&mut out, ch)?;
    }
    write_u32(&mut out, c.hidden)?;
    write_u32(&mut out, c.embedding_dim)?;
    for t in p.tensors() {
        for &v in t {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_params(bytes: &[u8]) -> Result<EncoderParams, EncoderError> {
    let mut r = Cursor::new(bytes);
    let trunc = |_| EncoderError::Truncated;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(EncoderError::BadMagic(magic));
    }
    let version = r.read_u16::<LittleEndian>().map_err(trunc)?;
    if version != CHECKPOINT_VERSION {
        return Err(EncoderError::BadVersion(version));
    }
    let mut read = || r.read_u32::<LittleEndian>().map(|v| v as usize).map_err(trunc);
    let n_mels = read()?;
    let layers = read()?;
    if layers > 64 {
        return Err(EncoderError::InvalidConfig(format!("{layers} conv layers")));
    }
    let channels = (0..layers).map(|_| read()).collect::<Result<Vec<_>, _>>()?;
    let hidden = read()?;
    let embedding_dim = read()?;
    let config = EncoderConfig {
        n_mels,
        channels,
        hidden,
        embedding_dim,
    };
    let mut p = EncoderParams::zeros(&config)?;
    let mut buf = Vec::new();
    for t in p.tensors_mut() {
        buf.resize(t.len(), 0f32);
        r.read_f32_into::<LittleEndian>(&mut buf).map_err(trunc)?;
        t.iter_mut().zip(&buf).for_each(|(d, &s)| *d = s as f64);
    }
    if (r.position() as usize) != bytes.len() {
        return Err(EncoderError::ShapeMismatch("trailing bytes in checkpoint".into()));
    }
    Ok(p)
}

pub fn save_params(p: &EncoderParams, path: &Path) -> Result<(), EncoderError> {
    write_atomic(path, &encode_params(p)?)?;
    Ok(())
}

/// Loads a checkpoint; when `expected` is given the stored config must match.
pub fn load_params(
    path: &Path,
    expected: Option<&EncoderConfig>,
) -> Result<EncoderParams, EncoderError> {
    let p = decode_params(&std::fs::read(path)?)?;
    if let Some(exp) = expected {
        if *exp != p.config {
            return Err(EncoderError::ConfigMismatch {
                expected: Box::new(exp.clone()),
                found: Box::new(p.config),
            });
        }
    }
    Ok(p)
}
