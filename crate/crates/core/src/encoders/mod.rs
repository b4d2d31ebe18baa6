//! Sentence encoders, the image projection and cosine similarity, each with
//! its gradient.
//!
//! Every encoder follows the same two-phase protocol: [`encode_traced`]
//! runs the forward pass and keeps whatever intermediate values the backward
//! pass needs, and [`backward_traced`] accumulates
//! `∂(upstream · output)/∂θ` into a gradient buffer of the same shape as the
//! parameters. Gradients for the embedding matrix are dense with exact zeros
//! in the rows of tokens that did not occur.

mod bow;
mod cnn;
mod rnn;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Result, VeteError};
use crate::tensor::{dot, norm, Tensor};

pub use cnn::{CnnParams, Conv, DEFAULT_FILTER_WIDTHS};
pub use rnn::{RnnLayer, RnnParams};

/// Norm below which a vector has no usable direction.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BowMode {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cell {
    Gru,
    Lstm,
}

impl Cell {
    fn gates(self) -> usize {
        match self {
            Cell::Gru => 3,
            Cell::Lstm => 4,
        }
    }
}

/// Flat encoder name as used on the command line and in search ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    BowSum,
    BowMean,
    RnnGru,
    RnnLstm,
    Cnn,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 5] = [
        EncoderKind::BowSum,
        EncoderKind::BowMean,
        EncoderKind::RnnGru,
        EncoderKind::RnnLstm,
        EncoderKind::Cnn,
    ];

    pub fn is_bow(self) -> bool {
        matches!(self, EncoderKind::BowSum | EncoderKind::BowMean)
    }

    pub fn is_rnn(self) -> bool {
        matches!(self, EncoderKind::RnnGru | EncoderKind::RnnLstm)
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::BowSum => "BOW_SUM",
            EncoderKind::BowMean => "BOW_MEAN",
            EncoderKind::RnnGru => "RNN_GRU",
            EncoderKind::RnnLstm => "RNN_LSTM",
            EncoderKind::Cnn => "CNN",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = VeteError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "BOW_SUM" => Ok(EncoderKind::BowSum),
            "BOW_MEAN" => Ok(EncoderKind::BowMean),
            "RNN_GRU" | "GRU" => Ok(EncoderKind::RnnGru),
            "RNN_LSTM" | "LSTM" => Ok(EncoderKind::RnnLstm),
            "CNN" => Ok(EncoderKind::Cnn),
            _ => Err(VeteError::Config(format!("unknown encoder `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    Bow(BowMode),
    Rnn {
        cell: Cell,
        layers: usize,
        hidden: usize,
    },
    Cnn {
        hidden: usize,
        filter_widths: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderSpec {
    pub arch: Architecture,
    pub normalize_output: bool,
}

impl EncoderSpec {
    pub fn bow(mode: BowMode) -> Self {
        Self {
            arch: Architecture::Bow(mode),
            normalize_output: false,
        }
    }

    pub fn rnn(cell: Cell, layers: usize, hidden: usize) -> Self {
        Self {
            arch: Architecture::Rnn {
                cell,
                layers,
                hidden,
            },
            normalize_output: false,
        }
    }

    pub fn cnn(hidden: usize, filter_widths: Vec<usize>) -> Self {
        Self {
            arch: Architecture::Cnn {
                hidden,
                filter_widths,
            },
            normalize_output: false,
        }
    }

    /// Default-shaped spec for a flat kind; `hidden` applies to RNN and CNN.
    pub fn from_kind(kind: EncoderKind, layers: usize, hidden: usize) -> Self {
        match kind {
            EncoderKind::BowSum => Self::bow(BowMode::Sum),
            EncoderKind::BowMean => Self::bow(BowMode::Mean),
            EncoderKind::RnnGru => Self::rnn(Cell::Gru, layers, hidden),
            EncoderKind::RnnLstm => Self::rnn(Cell::Lstm, layers, hidden),
            EncoderKind::Cnn => Self::cnn(hidden, DEFAULT_FILTER_WIDTHS.to_vec()),
        }
    }

    pub fn kind(&self) -> EncoderKind {
        match &self.arch {
            Architecture::Bow(BowMode::Sum) => EncoderKind::BowSum,
            Architecture::Bow(BowMode::Mean) => EncoderKind::BowMean,
            Architecture::Rnn {
                cell: Cell::Gru, ..
            } => EncoderKind::RnnGru,
            Architecture::Rnn {
                cell: Cell::Lstm, ..
            } => EncoderKind::RnnLstm,
            Architecture::Cnn { .. } => EncoderKind::Cnn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.arch {
            Architecture::Bow(_) => Ok(()),
            Architecture::Rnn { layers, hidden, .. } => {
                if *layers == 0 || *hidden == 0 {
                    Err(VeteError::Config(
                        "RNN encoder needs layers ≥ 1 and hidden ≥ 1".into(),
                    ))
                } else {
                    Ok(())
                }
            }
            Architecture::Cnn {
                hidden,
                filter_widths,
            } => {
                if *hidden == 0 || filter_widths.is_empty() || filter_widths.contains(&0) {
                    Err(VeteError::Config(
                        "CNN encoder needs hidden ≥ 1 and non-empty positive filter widths".into(),
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn uniform<R: Rng + ?Sized>(
        prefix: &str,
        out_dim: usize,
        in_dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: Tensor::uniform(format!("{prefix}.weight"), out_dim, in_dim, scale, rng),
            bias: Tensor::zeros(format!("{prefix}.bias"), out_dim, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.data.clone();
        self.weight.matvec_acc(x, &mut out);
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, x: &[f64], upstream: &[f64], grads: &mut Linear) -> Vec<f64> {
        grads.weight.add_outer(upstream, x);
        for (g, u) in grads.bias.data.iter_mut().zip(upstream) {
            *g += u;
        }
        self.weight.matvec_t(upstream)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderBody {
    Bow,
    Rnn(RnnParams),
    Cnn(CnnParams),
}

/// Word embeddings plus whatever weights the encoder family needs.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub spec: EncoderSpec,
    pub embedding: Tensor,
    pub body: EncoderBody,
}

impl EncoderParams {
    /// Uniform(−scale, scale) initialization. LSTM forget-gate biases start at 1.
    pub fn init<R: Rng + ?Sized>(
        spec: &EncoderSpec,
        vocab_size: usize,
        dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        if dim == 0 || vocab_size == 0 {
            return Err(VeteError::Config(
                "embedding dimension and vocabulary size must be positive".into(),
            ));
        }
        let embedding = Tensor::uniform("embedding", vocab_size, dim, scale, rng);
        let body = match &spec.arch {
            Architecture::Bow(_) => EncoderBody::Bow,
            Architecture::Rnn {
                cell,
                layers,
                hidden,
            } => EncoderBody::Rnn(RnnParams::init(*cell, *layers, dim, *hidden, scale, rng)),
            Architecture::Cnn {
                hidden,
                filter_widths,
            } => EncoderBody::Cnn(CnnParams::init(filter_widths, dim, *hidden, scale, rng)),
        };
        Ok(Self {
            spec: spec.clone(),
            embedding,
            body,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows
    }

    pub fn dim(&self) -> usize {
        self.embedding.cols
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            embedding: self.embedding.zeros_like(),
            body: match &self.body {
                EncoderBody::Bow => EncoderBody::Bow,
                EncoderBody::Rnn(p) => EncoderBody::Rnn(p.zeros_like()),
                EncoderBody::Cnn(p) => EncoderBody::Cnn(p.zeros_like()),
            },
        }
    }

    /// All tensors in a fixed order; the order defines the flat parameter vector.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embedding];
        match &self.body {
            EncoderBody::Bow => {}
            EncoderBody::Rnn(p) => p.collect(&mut out),
            EncoderBody::Cnn(p) => p.collect(&mut out),
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        match &mut self.body {
            EncoderBody::Bow => {}
            EncoderBody::Rnn(p) => p.collect_mut(&mut out),
            EncoderBody::Cnn(p) => p.collect_mut(&mut out),
        }
        out
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(VeteError::EmptyInput);
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.vocab_size()) {
            return Err(VeteError::Data(format!(
                "token id {bad} outside vocabulary of size {}",
                self.vocab_size()
            )));
        }
        Ok(())
    }
}

/// Forward-pass state retained for the backward pass.
#[derive(Debug, Clone)]
pub struct EncodeTrace {
    ids: Vec<usize>,
    body: BodyTrace,
    /// Encoder output before optional L2 normalization.
    raw: Vec<f64>,
    output: Vec<f64>,
}

impl EncodeTrace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn into_output(self) -> Vec<f64> {
        self.output
    }
}

#[derive(Debug, Clone)]
enum BodyTrace {
    Bow,
    Rnn(rnn::RnnTrace),
    Cnn(cnn::CnnTrace),
}

pub fn encode_traced(params: &EncoderParams, ids: &[usize]) -> Result<EncodeTrace> {
    params.check_ids(ids)?;
    let (raw, body) = match (&params.spec.arch, &params.body) {
        (Architecture::Bow(mode), EncoderBody::Bow) => {
            (bow::forward(&params.embedding, ids, *mode), BodyTrace::Bow)
        }
        (Architecture::Rnn { .. }, EncoderBody::Rnn(p)) => {
            let (out, trace) = p.forward(&params.embedding, ids);
            (out, BodyTrace::Rnn(trace))
        }
        (Architecture::Cnn { .. }, EncoderBody::Cnn(p)) => {
            let (out, trace) = p.forward(&params.embedding, ids);
            (out, BodyTrace::Cnn(trace))
        }
        _ => {
            return Err(VeteError::Config(
                "encoder parameters do not match their spec".into(),
            ))
        }
    };
    let output = if params.spec.normalize_output {
        l2_normalize(&raw)?
    } else {
        raw.clone()
    };
    Ok(EncodeTrace {
        ids: ids.to_vec(),
        body,
        raw,
        output,
    })
}

pub fn backward_traced(
    params: &EncoderParams,
    trace: &EncodeTrace,
    upstream: &[f64],
    grads: &mut EncoderParams,
) {
    let g_raw = if params.spec.normalize_output {
        l2_normalize_backward(&trace.raw, &trace.output, upstream)
    } else {
        upstream.to_vec()
    };
    match (&params.body, &trace.body, &mut grads.body) {
        (EncoderBody::Bow, BodyTrace::Bow, EncoderBody::Bow) => {
            let mode = match params.spec.arch {
                Architecture::Bow(m) => m,
                _ => unreachable!("trace built from a BOW spec"),
            };
            bow::backward(&trace.ids, mode, &g_raw, &mut grads.embedding);
        }
        (EncoderBody::Rnn(p), BodyTrace::Rnn(t), EncoderBody::Rnn(g)) => {
            p.backward(t, &trace.ids, &g_raw, g, &mut grads.embedding);
        }
        (EncoderBody::Cnn(p), BodyTrace::Cnn(t), EncoderBody::Cnn(g)) => {
            p.backward(t, &trace.ids, &g_raw, g, &mut grads.embedding);
        }
        _ => panic!("gradient buffer does not match encoder parameters"),
    }
}

/// Sentence embedding under whichever encoder `params` holds.
pub fn encode(params: &EncoderParams, ids: &[usize]) -> Result<Vec<f64>> {
    encode_traced(params, ids).map(EncodeTrace::into_output)
}

/// Sum or mean of embedding rows, optionally scaled to unit length.
pub fn bow_encode(
    params: &EncoderParams,
    ids: &[usize],
    mode: BowMode,
    normalize: bool,
) -> Result<Vec<f64>> {
    params.check_ids(ids)?;
    let v = bow::forward(&params.embedding, ids, mode);
    if normalize {
        l2_normalize(&v)
    } else {
        Ok(v)
    }
}

/// Stacked GRU/LSTM encoding; `params` must hold an RNN body.
pub fn rnn_encode(params: &EncoderParams, ids: &[usize]) -> Result<Vec<f64>> {
    match params.body {
        EncoderBody::Rnn(_) => encode(params, ids),
        _ => Err(VeteError::UnsupportedConfiguration(
            "rnn_encode on non-RNN parameters".into(),
        )),
    }
}

/// Convolution, max-over-time pooling and a fully connected layer.
pub fn cnn_encode(params: &EncoderParams, ids: &[usize]) -> Result<Vec<f64>> {
    match params.body {
        EncoderBody::Cnn(_) => encode(params, ids),
        _ => Err(VeteError::UnsupportedConfiguration(
            "cnn_encode on non-CNN parameters".into(),
        )),
    }
}

/// Gradient of `upstream · encode(params, ids)` with respect to every tensor.
pub fn encoder_backward(
    params: &EncoderParams,
    ids: &[usize],
    upstream: &[f64],
) -> Result<EncoderParams> {
    let trace = encode_traced(params, ids)?;
    if upstream.len() != trace.output.len() {
        return Err(VeteError::Shape {
            expected: trace.output.len(),
            actual: upstream.len(),
        });
    }
    let mut grads = params.zeros_like();
    backward_traced(params, &trace, upstream, &mut grads);
    Ok(grads)
}

fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n < MIN_NORM {
        return Err(VeteError::DegenerateEmbedding);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// `(g − y(y·g)) / ‖x‖` for `y = x/‖x‖`.
fn l2_normalize_backward(x: &[f64], y: &[f64], g: &[f64]) -> Vec<f64> {
    let n = norm(x);
    let yg = dot(y, g);
    g.iter().zip(y).map(|(gi, yi)| (gi - yi * yg) / n).collect()
}

/// Affine map from image-feature space into the sentence-embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageProjection {
    /// `in_dim × N`, applied transposed.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ImageProjection {
    pub fn init<R: Rng + ?Sized>(in_dim: usize, dim: usize, scale: f64, rng: &mut R) -> Self {
        Self {
            weight: Tensor::uniform("projection.weight", in_dim, dim, scale, rng),
            bias: Tensor::zeros("projection.bias", dim, 1),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    /// Accumulates `∂(upstream · project(feature))/∂θ` into `grads`.
    pub fn backward(&self, feature: &[f64], upstream: &[f64], grads: &mut ImageProjection) {
        grads.weight.add_outer(feature, upstream);
        for (g, u) in grads.bias.data.iter_mut().zip(upstream) {
            *g += u;
        }
    }
}

/// `weightᵀ · feature + bias`.
pub fn project_image(proj: &ImageProjection, feature: &[f64]) -> Result<Vec<f64>> {
    if feature.len() != proj.in_dim() {
        return Err(VeteError::Shape {
            expected: proj.in_dim(),
            actual: feature.len(),
        });
    }
    let mut out = proj.bias.data.clone();
    proj.weight.matvec_t_acc(feature, &mut out);
    Ok(out)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(VeteError::Shape {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na < MIN_NORM || nb < MIN_NORM {
        return Err(VeteError::DegenerateVector { context: None });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine together with its gradients with respect to both arguments.
pub fn cosine_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (na, nb) = (norm(a), norm(b));
    if na < MIN_NORM || nb < MIN_NORM {
        return Err(VeteError::DegenerateVector { context: None });
    }
    let c = dot(a, b) / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| bi / (na * nb) - c * ai / (na * na))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| ai / (na * nb) - c * bi / (nb * nb))
        .collect();
    Ok((c, ga, gb))
}
