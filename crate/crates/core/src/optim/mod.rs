//! End-to-end training: the joint model, batch forward/backward passes, Adam,
//! the epoch loop and the finite-difference gradient checker.

mod adam;
mod checkpoint;
mod gradcheck;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::contrastive::{loss_and_gradient, LossSpec, PairBatch};
use crate::corpus::{encode_caption, tokenize, Vocabulary};
use crate::encoders::{
    backward_traced, cosine_with_grad, encode, encode_traced, project_image, EncoderKind,
    EncoderParams, EncoderSpec, ImageProjection, MIN_NORM,
};
use crate::error::{Result, VeteError};
use crate::tensor::{norm, Tensor};

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use gradcheck::{
    finite_difference_check, gradient_check_grid, grid_losses, model_gradient_check, toy_instance,
    GridCheck,
};
pub use train::{
    expand_word_level, train, train_word_level, EncodedPair, EpochRecord, TrainHistory, TrainingSet,
};

pub const DEFAULT_EMBEDDING_DIM: usize = 128;
pub const DEFAULT_CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingLevel {
    Sentence,
    Word,
}

impl FromStr for TrainingLevel {
    type Err = VeteError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sentence" => Ok(TrainingLevel::Sentence),
            "word" => Ok(TrainingLevel::Word),
            _ => Err(VeteError::Config(format!("unknown training level `{s}`"))),
        }
    }
}

impl fmt::Display for TrainingLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainingLevel::Sentence => "sentence",
            TrainingLevel::Word => "word",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientClip {
    /// Global-norm clipping at [`DEFAULT_CLIP_NORM`] for RNN encoders only.
    Auto,
    Off,
    Norm(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub embedding_dim: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate factor applied once per epoch.
    pub lr_decay: f64,
    pub init_scale: f64,
    pub epochs: usize,
    pub encoder: EncoderSpec,
    pub loss: LossSpec,
    pub seed: u64,
    pub training_level: TrainingLevel,
    pub clip: GradientClip,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            batch_size: 32,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            init_scale: 0.1,
            epochs: 10,
            encoder: EncoderSpec::from_kind(EncoderKind::BowMean, 1, DEFAULT_EMBEDDING_DIM),
            loss: LossSpec::pearson(),
            seed: 0,
            training_level: TrainingLevel::Sentence,
            clip: GradientClip::Auto,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(VeteError::Config(m));
        if self.embedding_dim < 1 {
            return fail("embedding_dim must be ≥ 1".into());
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be ≥ 2, got {}", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return fail(format!("lr_decay must be > 0, got {}", self.lr_decay));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return fail(format!("init_scale must be ≥ 0, got {}", self.init_scale));
        }
        if self.epochs < 1 {
            return fail("epochs must be ≥ 1".into());
        }
        if let GradientClip::Norm(c) = self.clip {
            if c.is_nan() || c <= 0.0 {
                return fail(format!("clip norm must be > 0, got {c}"));
            }
        }
        self.encoder.validate()?;
        self.loss.validate()
    }

    pub fn clip_norm(&self) -> Option<f64> {
        match self.clip {
            GradientClip::Auto => self.encoder.kind().is_rnn().then_some(DEFAULT_CLIP_NORM),
            GradientClip::Off => None,
            GradientClip::Norm(c) => Some(c),
        }
    }
}

/// Vocabulary, sentence encoder and image projection trained jointly.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub vocab: Vocabulary,
    pub encoder: EncoderParams,
    pub projection: ImageProjection,
    /// Optimizer steps taken so far; zero for a freshly initialized model.
    pub steps: u64,
}

/// Gradient buffers mirroring a [`Model`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: EncoderParams,
    pub projection: ImageProjection,
}

impl ModelGrads {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.encoder.tensors();
        t.extend(self.projection.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.projection.tensors_mut());
        t
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| t.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales to at most `max_norm`; returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.global_norm();
        if n > max_norm {
            let s = max_norm / n;
            for t in self.tensors_mut() {
                t.data.iter_mut().for_each(|x| *x *= s);
            }
        }
        n
    }
}

impl Model {
    pub fn init<R: Rng + ?Sized>(
        spec: &EncoderSpec,
        vocab: Vocabulary,
        embedding_dim: usize,
        image_dim: usize,
        init_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if image_dim == 0 {
            return Err(VeteError::Config(
                "image feature dimension must be positive".into(),
            ));
        }
        let encoder = EncoderParams::init(spec, vocab.len(), embedding_dim, init_scale, rng)?;
        let projection = ImageProjection::init(image_dim, embedding_dim, init_scale, rng);
        Ok(Self {
            vocab,
            encoder,
            projection,
            steps: 0,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.encoder.spec
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn image_dim(&self) -> usize {
        self.projection.in_dim()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.encoder.tensors();
        t.extend(self.projection.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.projection.tensors_mut());
        t
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            encoder: self.encoder.zeros_like(),
            projection: self.projection.zeros_like(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length");
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<usize>> {
        Ok(encode_caption(&self.vocab, &tokenize(text)?))
    }

    /// Sentence embedding of raw text under this model's tokenizer and vocabulary.
    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        encode(&self.encoder, &self.encode_text(text)?)
    }
}

fn degenerate_pair(k: usize, image: usize, sentence: usize) -> VeteError {
    VeteError::DegenerateVector {
        context: Some(format!("pair {k}: image {image}, sentence {sentence}")),
    }
}

/// Cosine similarities of all `2B` pairs in the batch, correct pairs first.
pub fn forward_batch(model: &Model, batch: &PairBatch) -> Result<Vec<f64>> {
    let texts = batch
        .sentences
        .iter()
        .map(|s| encode(&model.encoder, s))
        .collect::<Result<Vec<_>>>()?;
    let images = batch
        .image_features
        .iter()
        .map(|f| project_image(&model.projection, f))
        .collect::<Result<Vec<_>>>()?;
    batch
        .pairs()
        .enumerate()
        .map(|(k, (i, j))| {
            let (a, b) = (&images[i], &texts[j]);
            if norm(a) < MIN_NORM || norm(b) < MIN_NORM {
                return Err(degenerate_pair(k, i, j));
            }
            crate::encoders::cosine_similarity(a, b)
        })
        .collect()
}

/// Loss (as minimized) and its gradient with respect to every model parameter.
pub fn backward_batch(
    model: &Model,
    batch: &PairBatch,
    loss: &LossSpec,
) -> Result<(f64, ModelGrads)> {
    let traces = batch
        .sentences
        .iter()
        .map(|s| encode_traced(&model.encoder, s))
        .collect::<Result<Vec<_>>>()?;
    let images = batch
        .image_features
        .iter()
        .map(|f| project_image(&model.projection, f))
        .collect::<Result<Vec<_>>>()?;

    let dim = model.embedding_dim();
    let mut sims = Vec::with_capacity(2 * batch.size());
    let mut pair_grads = Vec::with_capacity(2 * batch.size());
    for (k, (i, j)) in batch.pairs().enumerate() {
        let (c, ga, gb) = cosine_with_grad(&images[i], traces[j].output())
            .map_err(|_| degenerate_pair(k, i, j))?;
        sims.push(c);
        pair_grads.push((i, j, ga, gb));
    }
    let (value, d_sims) = loss_and_gradient(loss, &sims, &batch.labels)?;

    let mut d_images = vec![vec![0.0; dim]; batch.size()];
    let mut d_texts = vec![vec![0.0; dim]; batch.size()];
    for ((i, j, ga, gb), &ds) in pair_grads.iter().zip(&d_sims) {
        if ds == 0.0 {
            continue;
        }
        crate::tensor::axpy(ds, ga, &mut d_images[*i]);
        crate::tensor::axpy(ds, gb, &mut d_texts[*j]);
    }

    let mut grads = model.zero_grads();
    for (feature, g) in batch.image_features.iter().zip(&d_images) {
        if g.iter().any(|&x| x != 0.0) {
            model.projection.backward(feature, g, &mut grads.projection);
        }
    }
    for (trace, g) in traces.iter().zip(&d_texts) {
        if g.iter().any(|&x| x != 0.0) {
            backward_traced(&model.encoder, trace, g, &mut grads.encoder);
        }
    }
    Ok((value, grads))
}
