//! Post-normalization transformer encoder (BERT layout) with per-layer CLS
//! taps and hand-derived reverse-mode gradients.
//!
//! Each layer computes, for incoming state `x`:
//!
//! ```text
//! a = LayerNorm(x + SelfAttention(x, mask))
//! y = LayerNorm(a + W2 · gelu(W1 · a + b1) + b2)
//! ```
//!
//! All buffers are flat row-major `Vec<T>`; linear weights use the
//! `[out, in]` layout of the checkpoints they are loaded from.

use std::collections::BTreeSet;
use std::fmt::Debug;
use std::path::Path;

use num_traits::{Float, FromPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensorstore::{Checkpoint, DType, StoreError};
use crate::topology::{infer_topology, NamingScheme, TopologyError};

/// Bias added to attention logits of masked key positions.
const MASK_BIAS: f64 = -1e9;

pub trait Scalar: Float + FromPrimitive + Debug + Default + Send + Sync + std::iter::Sum + 'static {
    const DTYPE: DType;

    fn erf(self) -> Self;

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn insert(
        c: &mut Checkpoint,
        name: String,
        shape: Vec<usize>,
        values: &[Self],
    ) -> std::result::Result<(), StoreError>;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn insert(
        c: &mut Checkpoint,
        name: String,
        shape: Vec<usize>,
        values: &[Self],
    ) -> std::result::Result<(), StoreError> {
        c.insert_f32(name, shape, values)
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn insert(
        c: &mut Checkpoint,
        name: String,
        shape: Vec<usize>,
        values: &[Self],
    ) -> std::result::Result<(), StoreError> {
        c.insert_f64(name, shape, values)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("shape mismatch for {name:?}: expected {expected:?}, found {actual:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("config expects {config} layers but the checkpoint has {checkpoint}")]
    LayerCountMismatch { config: usize, checkpoint: usize },
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

fn default_eps() -> f64 {
    1e-12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(default = "default_eps")]
    pub ln_epsilon: f64,
    /// Position of the sentence token whose state is tapped and classified.
    #[serde(default)]
    pub cls_index: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EncoderError::InvalidConfig(m.to_string()));
        if [
            self.num_layers,
            self.d_model,
            self.n_heads,
            self.d_ff,
            self.vocab_size,
            self.max_positions,
        ]
        .contains(&0)
        {
            return bad("all extents must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if !(self.ln_epsilon > 0.0) {
            return bad("ln_epsilon must be positive");
        }
        if self.cls_index >= self.max_positions {
            return bad("cls_index must be below max_positions");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn with_layers(&self, num_layers: usize) -> Self {
        Self {
            num_layers,
            ..self.clone()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| EncoderError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| EncoderError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text)
    }
}

/// Tensor name suffixes of the BERT layout.
pub mod names {
    pub const WORD_EMBEDDINGS: &str = "word_embeddings.weight";
    pub const POSITION_EMBEDDINGS: &str = "position_embeddings.weight";
    pub const TOKEN_TYPE_EMBEDDINGS: &str = "token_type_embeddings.weight";
    pub const EMB_LN_WEIGHT: &str = "LayerNorm.weight";
    pub const EMB_LN_BIAS: &str = "LayerNorm.bias";

    pub const LAYER_SUFFIXES: [&str; 16] = [
        "attention.self.query.weight",
        "attention.self.query.bias",
        "attention.self.key.weight",
        "attention.self.key.bias",
        "attention.self.value.weight",
        "attention.self.value.bias",
        "attention.output.dense.weight",
        "attention.output.dense.bias",
        "attention.output.LayerNorm.weight",
        "attention.output.LayerNorm.bias",
        "intermediate.dense.weight",
        "intermediate.dense.bias",
        "output.dense.weight",
        "output.dense.bias",
        "output.LayerNorm.weight",
        "output.LayerNorm.bias",
    ];

    /// (suffix, shape) for every tensor of one layer, in canonical order.
    pub fn layer_shapes(d: usize, f: usize) -> Vec<(&'static str, Vec<usize>)> {
        let shapes = [
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![f, d],
            vec![f],
            vec![d, f],
            vec![d],
            vec![d],
            vec![d],
        ];
        LAYER_SUFFIXES.into_iter().zip(shapes).collect()
    }
}

/// Parameters of one encoder layer, field order matching `names::LAYER_SUFFIXES`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub q_w: Vec<T>,
    pub q_b: Vec<T>,
    pub k_w: Vec<T>,
    pub k_b: Vec<T>,
    pub v_w: Vec<T>,
    pub v_b: Vec<T>,
    pub ao_w: Vec<T>,
    pub ao_b: Vec<T>,
    pub ln1_g: Vec<T>,
    pub ln1_b: Vec<T>,
    pub i_w: Vec<T>,
    pub i_b: Vec<T>,
    pub o_w: Vec<T>,
    pub o_b: Vec<T>,
    pub ln2_g: Vec<T>,
    pub ln2_b: Vec<T>,
}

impl<T: Scalar> LayerWeights<T> {
    fn from_fn(mut f: impl FnMut(&'static str) -> Result<Vec<T>>) -> Result<Self> {
        let mut it = names::LAYER_SUFFIXES.into_iter();
        let mut next = || f(it.next().unwrap());
        Ok(Self {
            q_w: next()?,
            q_b: next()?,
            k_w: next()?,
            k_b: next()?,
            v_w: next()?,
            v_b: next()?,
            ao_w: next()?,
            ao_b: next()?,
            ln1_g: next()?,
            ln1_b: next()?,
            i_w: next()?,
            i_b: next()?,
            o_w: next()?,
            o_b: next()?,
            ln2_g: next()?,
            ln2_b: next()?,
        })
    }

    fn fields(&self) -> [&Vec<T>; 16] {
        [
            &self.q_w,
            &self.q_b,
            &self.k_w,
            &self.k_b,
            &self.v_w,
            &self.v_b,
            &self.ao_w,
            &self.ao_b,
            &self.ln1_g,
            &self.ln1_b,
            &self.i_w,
            &self.i_b,
            &self.o_w,
            &self.o_b,
            &self.ln2_g,
            &self.ln2_b,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Vec<T>; 16] {
        [
            &mut self.q_w,
            &mut self.q_b,
            &mut self.k_w,
            &mut self.k_b,
            &mut self.v_w,
            &mut self.v_b,
            &mut self.ao_w,
            &mut self.ao_b,
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.i_w,
            &mut self.i_b,
            &mut self.o_w,
            &mut self.o_b,
            &mut self.ln2_g,
            &mut self.ln2_b,
        ]
    }

    fn zeros_like(&self) -> Self {
        Self::from_fn_infallible(self, |v| vec![T::zero(); v.len()])
    }

    fn from_fn_infallible(src: &Self, f: impl Fn(&Vec<T>) -> Vec<T>) -> Self {
        let fields = src.fields();
        let mut i = 0;
        Self::from_fn(|_| {
            i += 1;
            Ok(f(fields[i - 1]))
        })
        .expect("infallible")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingWeights<T> {
    pub word: Vec<T>,
    pub position: Vec<T>,
    /// Segment table; only row 0 is used since batches carry no segment ids.
    pub token_type: Option<Vec<T>>,
    pub ln_g: Vec<T>,
    pub ln_b: Vec<T>,
    token_types: usize,
}

impl<T: Scalar> EmbeddingWeights<T> {
    fn zeros_like(&self) -> Self {
        Self {
            word: vec![T::zero(); self.word.len()],
            position: vec![T::zero(); self.position.len()],
            token_type: self.token_type.as_ref().map(|t| vec![T::zero(); t.len()]),
            ln_g: vec![T::zero(); self.ln_g.len()],
            ln_b: vec![T::zero(); self.ln_b.len()],
            token_types: self.token_types,
        }
    }
}

/// Every trainable encoder tensor. Also used as the gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights<T> {
    pub embeddings: EmbeddingWeights<T>,
    pub layers: Vec<LayerWeights<T>>,
}

impl<T: Scalar> EncoderWeights<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            embeddings: self.embeddings.zeros_like(),
            layers: self.layers.iter().map(LayerWeights::zeros_like).collect(),
        }
    }

    /// (checkpoint name, shape, values) in a fixed order.
    pub fn named(&self, cfg: &EncoderConfig, scheme: &NamingScheme) -> Vec<(String, Vec<usize>, &[T])> {
        let d = cfg.d_model;
        let emb = embedding_prefix(scheme);
        let e = &self.embeddings;
        let mut out: Vec<(String, Vec<usize>, &[T])> = vec![
            (
                format!("{emb}{}", names::WORD_EMBEDDINGS),
                vec![cfg.vocab_size, d],
                &e.word,
            ),
            (
                format!("{emb}{}", names::POSITION_EMBEDDINGS),
                vec![cfg.max_positions, d],
                &e.position,
            ),
        ];
        if let Some(tt) = &e.token_type {
            out.push((
                format!("{emb}{}", names::TOKEN_TYPE_EMBEDDINGS),
                vec![e.token_types, d],
                tt,
            ));
        }
        out.push((format!("{emb}{}", names::EMB_LN_WEIGHT), vec![d], &e.ln_g));
        out.push((format!("{emb}{}", names::EMB_LN_BIAS), vec![d], &e.ln_b));
        for (i, layer) in self.layers.iter().enumerate() {
            for ((suffix, shape), values) in names::layer_shapes(d, cfg.d_ff).into_iter().zip(layer.fields())
            {
                out.push((scheme.layer_name(i, suffix), shape, values));
            }
        }
        out
    }

    /// Flat views of every parameter, same order as [`named`](Self::named).
    pub fn slices(&self) -> Vec<&[T]> {
        let e = &self.embeddings;
        let mut out: Vec<&[T]> = vec![&e.word, &e.position];
        if let Some(tt) = &e.token_type {
            out.push(tt);
        }
        out.push(&e.ln_g);
        out.push(&e.ln_b);
        for layer in &self.layers {
            out.extend(layer.fields().into_iter().map(Vec::as_slice));
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let e = &mut self.embeddings;
        let mut out: Vec<&mut [T]> = vec![&mut e.word, &mut e.position];
        if let Some(tt) = &mut e.token_type {
            out.push(tt);
        }
        out.push(&mut e.ln_g);
        out.push(&mut e.ln_b);
        for layer in &mut self.layers {
            out.extend(layer.fields_mut().into_iter().map(Vec::as_mut_slice));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }
}

fn embedding_prefix(scheme: &NamingScheme) -> &str {
    scheme
        .embedding_prefixes
        .first()
        .map(String::as_str)
        .unwrap_or("embeddings.")
}

/// B×T token grid with a validity mask (true = real token).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBatch {
    pub token_ids: Vec<Vec<u32>>,
    pub mask: Vec<Vec<bool>>,
    #[serde(default)]
    pub labels: Option<Vec<usize>>,
}

impl TokenBatch {
    pub fn new(token_ids: Vec<Vec<u32>>, mask: Vec<Vec<bool>>) -> Result<Self> {
        let b = Self {
            token_ids,
            mask,
            labels: None,
        };
        b.check_shape()?;
        Ok(b)
    }

    /// Right-pad variable-length sequences with token 0 and a false mask.
    pub fn from_sequences(seqs: &[Vec<u32>]) -> Result<Self> {
        let t = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let token_ids = seqs
            .iter()
            .map(|s| {
                let mut row = s.clone();
                row.resize(t, 0);
                row
            })
            .collect();
        let mask = seqs
            .iter()
            .map(|s| (0..t).map(|i| i < s.len()).collect())
            .collect();
        Self::new(token_ids, mask)
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(EncoderError::InvalidBatch(format!(
                "{} labels for {} examples",
                labels.len(),
                self.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.token_ids.first().map_or(0, Vec::len)
    }

    fn check_shape(&self) -> Result<()> {
        let t = self.seq_len();
        if self.mask.len() != self.token_ids.len() {
            return Err(EncoderError::InvalidBatch(
                "mask and token rows differ in count".into(),
            ));
        }
        for (row, m) in self.token_ids.iter().zip(&self.mask) {
            if row.len() != t || m.len() != t {
                return Err(EncoderError::InvalidBatch("rows must have equal length".into()));
            }
            if !m.iter().any(|&x| x) {
                return Err(EncoderError::InvalidBatch("row with no unmasked position".into()));
            }
        }
        Ok(())
    }

    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        self.check_shape()?;
        let t = self.seq_len();
        if t > cfg.max_positions {
            return Err(EncoderError::InvalidBatch(format!(
                "sequence length {t} exceeds max_positions {}",
                cfg.max_positions
            )));
        }
        for (b, (row, m)) in self.token_ids.iter().zip(&self.mask).enumerate() {
            if let Some(&tok) = row.iter().find(|&&x| x as usize >= cfg.vocab_size) {
                return Err(EncoderError::InvalidBatch(format!(
                    "example {b}: token {tok} outside vocabulary of {}",
                    cfg.vocab_size
                )));
            }
            if !m.get(cfg.cls_index).copied().unwrap_or(false) {
                return Err(EncoderError::InvalidBatch(format!(
                    "example {b}: sentence token position {} is masked or absent",
                    cfg.cls_index
                )));
            }
        }
        Ok(())
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            token_ids: rows.iter().map(|&r| self.token_ids[r].clone()).collect(),
            mask: rows.iter().map(|&r| self.mask[r].clone()).collect(),
            labels: self.labels.as_ref().map(|l| rows.iter().map(|&r| l[r]).collect()),
        }
    }
}

/// One line of a batch file: `{"tokens": [..], "label": optional}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

pub fn parse_examples(text: &str) -> Result<Vec<Example>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| EncoderError::InvalidBatch(format!("line {}: {e}", n + 1)))
        })
        .collect()
}

/// Group examples into padded batches. Labels are attached only when every
/// example in a batch has one.
pub fn batch_examples(examples: &[Example], batch_size: usize) -> Result<Vec<TokenBatch>> {
    examples
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let seqs: Vec<Vec<u32>> = chunk.iter().map(|e| e.tokens.clone()).collect();
            let batch = TokenBatch::from_sequences(&seqs)?;
            match chunk.iter().map(|e| e.label).collect::<Option<Vec<_>>>() {
                Some(labels) => batch.with_labels(labels),
                None => Ok(batch),
            }
        })
        .collect()
}

/// CLS rows at each layer boundary, indexed `[example][boundary]`; boundary 0
/// is the embedding output and boundary i the output of the i-th layer run.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTaps<T> {
    pub cls_states: Vec<Vec<Vec<T>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    /// Final hidden states per example, `seq_len × d_model`; masked rows are zero.
    pub hidden: Vec<Vec<T>>,
    pub taps: LayerTaps<T>,
}

pub fn layer_norm<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], eps: f64) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    ln_row(x, gamma, beta, T::of(eps), &mut out, &mut xhat);
    out
}

/// Exact GELU, x·Φ(x).
pub fn gelu<T: Scalar>(x: T) -> T {
    T::of(0.5) * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

pub fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

// Returns 1/sqrt(var + eps) and fills `out` and the normalized `xhat`.
fn ln_row<T: Scalar>(x: &[T], g: &[T], b: &[T], eps: T, out: &mut [T], xhat: &mut [T]) -> T {
    let n = T::from_usize(x.len()).unwrap();
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv = T::one() / (var + eps).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * inv;
        out[i] = xhat[i] * g[i] + b[i];
    }
    inv
}

#[derive(Debug, Clone)]
struct LnCache<T> {
    xhat: Vec<T>,
    inv: Vec<T>,
}

fn ln_rows<T: Scalar>(x: &[T], rows: usize, g: &[T], b: &[T], eps: f64) -> (Vec<T>, LnCache<T>) {
    let d = g.len();
    let mut out = vec![T::zero(); rows * d];
    let mut xhat = vec![T::zero(); rows * d];
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let s = r * d..(r + 1) * d;
        inv.push(ln_row(
            &x[s.clone()],
            g,
            b,
            T::of(eps),
            &mut out[s.clone()],
            &mut xhat[s],
        ));
    }
    (out, LnCache { xhat, inv })
}

fn ln_rows_backward<T: Scalar>(dy: &[T], cache: &LnCache<T>, g: &[T], dg: &mut [T], db: &mut [T]) -> Vec<T> {
    let d = g.len();
    let n = T::from_usize(d).unwrap();
    let mut dx = vec![T::zero(); dy.len()];
    for (r, &inv) in cache.inv.iter().enumerate() {
        let base = r * d;
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for i in 0..d {
            let xh = cache.xhat[base + i];
            let dxhat = dy[base + i] * g[i];
            dg[i] = dg[i] + dy[base + i] * xh;
            db[i] = db[i] + dy[base + i];
            sum_dxhat = sum_dxhat + dxhat;
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xh;
        }
        for i in 0..d {
            let xh = cache.xhat[base + i];
            let dxhat = dy[base + i] * g[i];
            dx[base + i] = inv / n * (n * dxhat - sum_dxhat - xh * sum_dxhat_xhat);
        }
    }
    dx
}

/// `x · Wᵀ + b` for `x: rows×inp`, `W: out×inp`.
fn affine<T: Scalar>(x: &[T], rows: usize, inp: usize, w: &[T], b: &[T], out: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * out];
    for r in 0..rows {
        let xr = &x[r * inp..(r + 1) * inp];
        for o in 0..out {
            let wr = &w[o * inp..(o + 1) * inp];
            let mut acc = b[o];
            for i in 0..inp {
                acc = acc + xr[i] * wr[i];
            }
            y[r * out + o] = acc;
        }
    }
    y
}

/// Backward pass of [`affine`]: accumulates parameter gradients and returns dx.
#[allow(clippy::too_many_arguments)]
fn affine_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    w: &[T],
    rows: usize,
    inp: usize,
    out: usize,
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * inp];
    for r in 0..rows {
        let xr = &x[r * inp..(r + 1) * inp];
        for o in 0..out {
            let g = dy[r * out + o];
            if g == T::zero() {
                continue;
            }
            db[o] = db[o] + g;
            let wr = &w[o * inp..(o + 1) * inp];
            let dwr = &mut dw[o * inp..(o + 1) * inp];
            for i in 0..inp {
                dwr[i] = dwr[i] + g * xr[i];
                dx[r * inp + i] = dx[r * inp + i] + g * wr[i];
            }
        }
    }
    dx
}

#[derive(Debug, Clone)]
struct EmbeddingCache<T> {
    tokens: Vec<u32>,
    ln: LnCache<T>,
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    x: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// heads × seq × seq attention probabilities.
    probs: Vec<T>,
    ctx: Vec<T>,
    ln1: LnCache<T>,
    a: Vec<T>,
    h_pre: Vec<T>,
    h_act: Vec<T>,
    ln2: LnCache<T>,
}

/// Activations of one example, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    seq: usize,
    embedding: EmbeddingCache<T>,
    /// (layer index, cache) for every layer actually run.
    layers: Vec<(usize, Option<LayerCache<T>>)>,
    pub output: Vec<T>,
}

impl<T: Scalar> Trace<T> {
    /// Row-major `seq × d_model` state at each layer boundary.
    pub fn cls_row(&self, d: usize, cls: usize) -> &[T] {
        &self.output[cls * d..(cls + 1) * d]
    }

    /// Attention probabilities of each layer run, `heads × seq × seq`.
    pub fn attention_probs(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .filter_map(|(_, c)| c.as_ref().map(|c| c.probs.as_slice()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<T> {
    pub config: EncoderConfig,
    pub weights: EncoderWeights<T>,
    bypassed: Vec<bool>,
}

impl<T: Scalar> EncoderModel<T> {
    /// Bind checkpoint tensors to an encoder of the given shape.
    pub fn load(c: &Checkpoint, cfg: &EncoderConfig, scheme: &NamingScheme) -> Result<Self> {
        cfg.validate()?;
        let topo = infer_topology(c, scheme)?;
        if topo.num_layers != cfg.num_layers {
            return Err(EncoderError::LayerCountMismatch {
                config: cfg.num_layers,
                checkpoint: topo.num_layers,
            });
        }
        let fetch = |name: &str, expected: &[usize]| -> Result<Vec<T>> {
            let entry = c
                .entry(name)
                .ok_or_else(|| EncoderError::MissingTensor(name.to_string()))?;
            if entry.shape() != expected {
                return Err(EncoderError::ShapeMismatch {
                    name: name.to_string(),
                    expected: expected.to_vec(),
                    actual: entry.shape().to_vec(),
                });
            }
            Ok(c.get_tensor(name)?.to_f64().into_iter().map(T::of).collect())
        };
        let d = cfg.d_model;
        let emb = embedding_prefix(scheme);
        let tt_name = format!("{emb}{}", names::TOKEN_TYPE_EMBEDDINGS);
        let (token_type, token_types) = match c.entry(&tt_name) {
            Some(e) => {
                let rows = e.shape().first().copied().unwrap_or(0);
                if e.shape().len() != 2 || rows == 0 || e.shape()[1] != d {
                    return Err(EncoderError::ShapeMismatch {
                        name: tt_name,
                        expected: vec![2, d],
                        actual: e.shape().to_vec(),
                    });
                }
                (Some(fetch(&tt_name, &[rows, d])?), rows)
            }
            None => (None, 0),
        };
        let embeddings = EmbeddingWeights {
            word: fetch(&format!("{emb}{}", names::WORD_EMBEDDINGS), &[cfg.vocab_size, d])?,
            position: fetch(
                &format!("{emb}{}", names::POSITION_EMBEDDINGS),
                &[cfg.max_positions, d],
            )?,
            token_type,
            ln_g: fetch(&format!("{emb}{}", names::EMB_LN_WEIGHT), &[d])?,
            ln_b: fetch(&format!("{emb}{}", names::EMB_LN_BIAS), &[d])?,
            token_types,
        };
        let shapes = names::layer_shapes(d, cfg.d_ff);
        let layers = (0..cfg.num_layers)
            .map(|i| {
                let mut idx = 0;
                LayerWeights::from_fn(|suffix| {
                    let shape = &shapes[idx].1;
                    idx += 1;
                    fetch(&scheme.layer_name(i, suffix), shape)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: cfg.clone(),
            weights: EncoderWeights { embeddings, layers },
            bypassed: vec![false; cfg.num_layers],
        })
    }

    /// Randomly initialized encoder: N(0, 1) embeddings, N(0, 1/fan_in)
    /// linear weights, zero biases, identity LayerNorms.
    pub fn random(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize, std: f64| -> Vec<T> {
            let dist = Normal::new(0.0, std).unwrap();
            (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
        };
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let embeddings = EmbeddingWeights {
            word: normal(cfg.vocab_size * d, 1.0),
            position: normal(cfg.max_positions * d, 1.0),
            token_type: None,
            ln_g: vec![T::one(); d],
            ln_b: vec![T::zero(); d],
            token_types: 0,
        };
        let dd = 1.0 / (d as f64).sqrt();
        let ff = 1.0 / (f as f64).sqrt();
        let layers = (0..cfg.num_layers)
            .map(|_| LayerWeights {
                q_w: normal(d * d, dd),
                q_b: vec![T::zero(); d],
                k_w: normal(d * d, dd),
                k_b: vec![T::zero(); d],
                v_w: normal(d * d, dd),
                v_b: vec![T::zero(); d],
                ao_w: normal(d * d, dd),
                ao_b: vec![T::zero(); d],
                ln1_g: vec![T::one(); d],
                ln1_b: vec![T::zero(); d],
                i_w: normal(f * d, dd),
                i_b: vec![T::zero(); f],
                o_w: normal(d * f, ff),
                o_b: vec![T::zero(); d],
                ln2_g: vec![T::one(); d],
                ln2_b: vec![T::zero(); d],
            })
            .collect();
        Ok(Self {
            config: cfg.clone(),
            weights: EncoderWeights { embeddings, layers },
            bypassed: vec![false; cfg.num_layers],
        })
    }

    pub fn to_checkpoint(&self, scheme: &NamingScheme) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (name, shape, values) in self.weights.named(&self.config, scheme) {
            T::insert(&mut c, name, shape, values).expect("encoder tensor names are unique");
        }
        c
    }

    pub fn num_layers(&self) -> usize {
        self.weights.layers.len()
    }

    /// Turn layer `index` (0-based) into the identity map. Diagnostic only.
    pub fn bypass_layer(&mut self, index: usize) {
        self.bypassed[index] = true;
    }

    pub fn bypassed_layers(&self) -> Vec<bool> {
        self.bypassed.clone()
    }

    pub fn forward(&self, batch: &TokenBatch) -> Result<ForwardOutput<T>> {
        self.forward_skipping(batch, &BTreeSet::new())
    }

    /// Forward pass that never runs the layers in `skip` (0-based), as if they
    /// had been removed. Taps then have `L - |skip| + 1` entries.
    pub fn forward_skipping(&self, batch: &TokenBatch, skip: &BTreeSet<usize>) -> Result<ForwardOutput<T>> {
        batch.validate(&self.config)?;
        let d = self.config.d_model;
        let cls = self.config.cls_index;
        let mut hidden = Vec::with_capacity(batch.len());
        let mut cls_states = Vec::with_capacity(batch.len());
        for (tokens, mask) in batch.token_ids.iter().zip(&batch.mask) {
            let mut taps = Vec::new();
            let trace = self.trace_example(tokens, mask, skip, Some(&mut taps));
            let mut out = trace.output;
            for (t, &m) in mask.iter().enumerate() {
                if !m {
                    out[t * d..(t + 1) * d].fill(T::zero());
                }
            }
            debug_assert_eq!(out[cls * d..(cls + 1) * d], *taps.last().unwrap());
            hidden.push(out);
            cls_states.push(taps);
        }
        Ok(ForwardOutput {
            hidden,
            taps: LayerTaps { cls_states },
        })
    }

    /// Full forward pass of one example, keeping activations for backprop.
    /// The batch must already be validated.
    pub fn trace_example(
        &self,
        tokens: &[u32],
        mask: &[bool],
        skip: &BTreeSet<usize>,
        mut taps: Option<&mut Vec<Vec<T>>>,
    ) -> Trace<T> {
        let d = self.config.d_model;
        let cls = self.config.cls_index;
        let seq = tokens.len();
        let (mut x, embedding) = self.embed(tokens);
        if let Some(t) = taps.as_deref_mut() {
            t.push(x[cls * d..(cls + 1) * d].to_vec());
        }
        let mut layers = Vec::new();
        for (i, w) in self.weights.layers.iter().enumerate() {
            if skip.contains(&i) {
                continue;
            }
            if self.bypassed[i] {
                layers.push((i, None));
            } else {
                let (y, cache) = self.layer_forward(w, x, seq, mask);
                layers.push((i, Some(cache)));
                x = y;
            }
            if let Some(t) = taps.as_deref_mut() {
                t.push(x[cls * d..(cls + 1) * d].to_vec());
            }
        }
        Trace {
            seq,
            embedding,
            layers,
            output: x,
        }
    }

    fn embed(&self, tokens: &[u32]) -> (Vec<T>, EmbeddingCache<T>) {
        let d = self.config.d_model;
        let e = &self.weights.embeddings;
        let mut z = vec![T::zero(); tokens.len() * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let tok = tok as usize;
            for c in 0..d {
                let mut v = e.word[tok * d + c] + e.position[t * d + c];
                if let Some(tt) = &e.token_type {
                    v = v + tt[c];
                }
                z[t * d + c] = v;
            }
        }
        let (out, ln) = ln_rows(&z, tokens.len(), &e.ln_g, &e.ln_b, self.config.ln_epsilon);
        (
            out,
            EmbeddingCache {
                tokens: tokens.to_vec(),
                ln,
            },
        )
    }

    fn layer_forward(
        &self,
        w: &LayerWeights<T>,
        x: Vec<T>,
        seq: usize,
        mask: &[bool],
    ) -> (Vec<T>, LayerCache<T>) {
        let cfg = &self.config;
        let (d, f, heads, dh) = (cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.head_dim());
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let neg = T::of(MASK_BIAS);

        let q = affine(&x, seq, d, &w.q_w, &w.q_b, d);
        let k = affine(&x, seq, d, &w.k_w, &w.k_b, d);
        let v = affine(&x, seq, d, &w.v_w, &w.v_b, d);
        let mut probs = vec![T::zero(); heads * seq * seq];
        let mut ctx = vec![T::zero(); seq * d];
        let mut scores = vec![T::zero(); seq];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..seq {
                for j in 0..seq {
                    let mut s = T::zero();
                    for c in 0..dh {
                        s = s + q[i * d + off + c] * k[j * d + off + c];
                    }
                    scores[j] = s * scale + if mask[j] { T::zero() } else { neg };
                }
                let p = softmax(&scores);
                for c in 0..dh {
                    let mut acc = T::zero();
                    for j in 0..seq {
                        acc = acc + p[j] * v[j * d + off + c];
                    }
                    ctx[i * d + off + c] = acc;
                }
                probs[(h * seq + i) * seq..(h * seq + i + 1) * seq].copy_from_slice(&p);
            }
        }
        let attn = affine(&ctx, seq, d, &w.ao_w, &w.ao_b, d);
        let z1: Vec<T> = x.iter().zip(&attn).map(|(&a, &b)| a + b).collect();
        let (a, ln1) = ln_rows(&z1, seq, &w.ln1_g, &w.ln1_b, cfg.ln_epsilon);
        let h_pre = affine(&a, seq, d, &w.i_w, &w.i_b, f);
        let h_act: Vec<T> = h_pre.iter().map(|&z| gelu(z)).collect();
        let ffn = affine(&h_act, seq, f, &w.o_w, &w.o_b, d);
        let z2: Vec<T> = a.iter().zip(&ffn).map(|(&p, &q)| p + q).collect();
        let (y, ln2) = ln_rows(&z2, seq, &w.ln2_g, &w.ln2_b, cfg.ln_epsilon);
        (
            y,
            LayerCache {
                x,
                q,
                k,
                v,
                probs,
                ctx,
                ln1,
                a,
                h_pre,
                h_act,
                ln2,
            },
        )
    }

    fn layer_backward(
        &self,
        w: &LayerWeights<T>,
        cache: &LayerCache<T>,
        dy: &[T],
        seq: usize,
        g: &mut LayerWeights<T>,
    ) -> Vec<T> {
        let cfg = &self.config;
        let (d, f, heads, dh) = (cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.head_dim());
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

        let dz2 = ln_rows_backward(dy, &cache.ln2, &w.ln2_g, &mut g.ln2_g, &mut g.ln2_b);
        let dact = affine_backward(&cache.h_act, &dz2, &w.o_w, seq, f, d, &mut g.o_w, &mut g.o_b);
        let dpre: Vec<T> = dact
            .iter()
            .zip(&cache.h_pre)
            .map(|(&gr, &z)| gr * gelu_grad(z))
            .collect();
        let mut da = affine_backward(&cache.a, &dpre, &w.i_w, seq, d, f, &mut g.i_w, &mut g.i_b);
        for (x, &r) in da.iter_mut().zip(&dz2) {
            *x = *x + r;
        }
        let dz1 = ln_rows_backward(&da, &cache.ln1, &w.ln1_g, &mut g.ln1_g, &mut g.ln1_b);
        let dctx = affine_backward(&cache.ctx, &dz1, &w.ao_w, seq, d, d, &mut g.ao_w, &mut g.ao_b);

        let (q, k, v) = (&cache.q, &cache.k, &cache.v);
        let mut dq = vec![T::zero(); seq * d];
        let mut dk = vec![T::zero(); seq * d];
        let mut dv = vec![T::zero(); seq * d];
        let mut dp = vec![T::zero(); seq];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..seq {
                let p = &cache.probs[(h * seq + i) * seq..(h * seq + i + 1) * seq];
                let mut dot = T::zero();
                for j in 0..seq {
                    let mut s = T::zero();
                    for c in 0..dh {
                        let go = dctx[i * d + off + c];
                        s = s + go * v[j * d + off + c];
                        dv[j * d + off + c] = dv[j * d + off + c] + p[j] * go;
                    }
                    dp[j] = s;
                    dot = dot + p[j] * s;
                }
                for j in 0..seq {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for c in 0..dh {
                        dq[i * d + off + c] = dq[i * d + off + c] + ds * k[j * d + off + c];
                        dk[j * d + off + c] = dk[j * d + off + c] + ds * q[i * d + off + c];
                    }
                }
            }
        }
        let mut dx = dz1;
        for (dproj, wt, (gw, gb)) in [
            (&dq, &w.q_w, (&mut g.q_w, &mut g.q_b)),
            (&dk, &w.k_w, (&mut g.k_w, &mut g.k_b)),
            (&dv, &w.v_w, (&mut g.v_w, &mut g.v_b)),
        ] {
            let part = affine_backward(&cache.x, dproj, wt, seq, d, d, gw, gb);
            for (x, p) in dx.iter_mut().zip(part) {
                *x = *x + p;
            }
        }
        dx
    }

    /// Accumulate into `grads` the gradient of a loss whose derivative with
    /// respect to the traced example's final hidden state is `d_output`
    /// (`seq × d_model`).
    pub fn backward(&self, trace: &Trace<T>, d_output: &[T], grads: &mut EncoderWeights<T>) {
        let d = self.config.d_model;
        let seq = trace.seq;
        let mut dy = d_output.to_vec();
        for (i, cache) in trace.layers.iter().rev() {
            if let Some(cache) = cache {
                dy = self.layer_backward(&self.weights.layers[*i], cache, &dy, seq, &mut grads.layers[*i]);
            }
        }
        let e = &self.weights.embeddings;
        let ge = &mut grads.embeddings;
        let dz = ln_rows_backward(&dy, &trace.embedding.ln, &e.ln_g, &mut ge.ln_g, &mut ge.ln_b);
        for (t, &tok) in trace.embedding.tokens.iter().enumerate() {
            let tok = tok as usize;
            for c in 0..d {
                let g = dz[t * d + c];
                ge.word[tok * d + c] = ge.word[tok * d + c] + g;
                ge.position[t * d + c] = ge.position[t * d + c] + g;
                if let Some(tt) = &mut ge.token_type {
                    tt[c] = tt[c] + g;
                }
            }
        }
    }
}
