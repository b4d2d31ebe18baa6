use std::time::{Duration, Instant};

use rand::seq::SliceRandom;

use super::{adam_step, backward_batch, AdamState, HyperParams, Model, TrainingLevel};
use crate::contrastive::make_contrastive_batch;
use crate::corpus::{
    encode_caption, tokenize, CaptionRecord, FeatureTable, Vocabulary, BOS_ID, EOS_ID,
};
use crate::error::{Result, VeteError};
use crate::eval::{validation_score, EvalDataset};
use crate::seed::rng_from_seed;

/// A caption already mapped to vocabulary ids, with the image it describes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub image_id: String,
    pub token_ids: Vec<usize>,
}

impl EncodedPair {
    pub fn from_records(records: &[CaptionRecord], vocab: &Vocabulary) -> Result<Vec<Self>> {
        records
            .iter()
            .map(|r| {
                Ok(EncodedPair {
                    image_id: r.image_id.clone(),
                    token_ids: encode_caption(vocab, &tokenize(&r.caption)?),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainingSet<'a> {
    pub vocab: &'a Vocabulary,
    pub features: &'a FeatureTable,
    pub pairs: &'a [EncodedPair],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_metric: Option<f64>,
    pub skipped_batches: usize,
    pub seconds: f64,
}

impl EpochRecord {
    /// `epoch<TAB>mean_loss<TAB>val_metric<TAB>skipped_batches<TAB>seconds`
    pub fn log_line(&self) -> String {
        let val = self
            .val_metric
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "nan".into());
        format!(
            "{}\t{:.6}\t{}\t{}\t{:.3}",
            self.epoch, self.mean_loss, val, self.skipped_batches, self.seconds
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub skipped_batches: usize,
    pub wall_time: Duration,
}

impl TrainHistory {
    /// Copy with all timing fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut h = self.clone();
        h.wall_time = Duration::ZERO;
        h.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
        h
    }

    pub fn final_val_metric(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_metric)
    }
}

/// Trains a model from scratch. Dispatches to [`train_word_level`] when the
/// hyperparameters ask for word-level training.
pub fn train(
    hyper: &HyperParams,
    data: TrainingSet<'_>,
    validation: &[EvalDataset],
) -> Result<(Model, TrainHistory)> {
    match hyper.training_level {
        TrainingLevel::Sentence => run(hyper, data, data.pairs, validation),
        TrainingLevel::Word => train_word_level(hyper, data, validation),
    }
}

/// Each caption becomes one single-token pair per content word (sentence
/// markers dropped), all sharing the caption's image.
pub fn expand_word_level(pairs: &[EncodedPair]) -> Vec<EncodedPair> {
    pairs
        .iter()
        .flat_map(|p| {
            p.token_ids
                .iter()
                .filter(|&&id| id != BOS_ID && id != EOS_ID)
                .map(|&id| EncodedPair {
                    image_id: p.image_id.clone(),
                    token_ids: vec![id],
                })
        })
        .collect()
}

/// Word-image training for bag-of-words encoders; sentences are still
/// combined with the BOW rule at inference.
pub fn train_word_level(
    hyper: &HyperParams,
    data: TrainingSet<'_>,
    validation: &[EvalDataset],
) -> Result<(Model, TrainHistory)> {
    if !hyper.encoder.kind().is_bow() {
        return Err(VeteError::UnsupportedConfiguration(format!(
            "word-level training needs a BOW encoder, got {}",
            hyper.encoder.kind()
        )));
    }
    let expanded = expand_word_level(data.pairs);
    run(hyper, data, &expanded, validation)
}

fn run(
    hyper: &HyperParams,
    data: TrainingSet<'_>,
    pairs: &[EncodedPair],
    validation: &[EvalDataset],
) -> Result<(Model, TrainHistory)> {
    hyper.validate()?;
    if pairs.is_empty() {
        return Err(VeteError::Data("training data is empty".into()));
    }
    let features = data.features;
    if let Some(p) = pairs.iter().find(|p| features.get(&p.image_id).is_none()) {
        return Err(VeteError::Data(format!(
            "no image features for `{}`",
            p.image_id
        )));
    }

    let started = Instant::now();
    let mut rng = rng_from_seed(hyper.seed);
    let mut model = Model::init(
        &hyper.encoder,
        data.vocab.clone(),
        hyper.embedding_dim,
        features.dim(),
        hyper.init_scale,
        &mut rng,
    )?;
    let mut adam = AdamState::new(&model.tensors());
    let clip = hyper.clip_norm();
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..pairs.len()).collect();

    for epoch in 0..hyper.epochs {
        let epoch_start = Instant::now();
        let lr = hyper.learning_rate * hyper.lr_decay.powi(epoch as i32);
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        let mut skipped = 0;

        for chunk in order.chunks(hyper.batch_size).filter(|c| c.len() >= 2) {
            let images = chunk
                .iter()
                .map(|&i| {
                    features
                        .get(&pairs[i].image_id)
                        .expect("checked above")
                        .iter()
                        .map(|&x| f64::from(x))
                        .collect()
                })
                .collect();
            let sentences = chunk.iter().map(|&i| pairs[i].token_ids.clone()).collect();
            let batch = make_contrastive_batch(images, sentences, &mut rng)?;

            let (loss, mut grads) = match backward_batch(&model, &batch, &hyper.loss) {
                Ok(r) => r,
                Err(e) if e.is_numerical() => {
                    log::debug!("epoch {epoch}: skipping batch: {e}");
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if let Some(c) = clip {
                grads.clip_global_norm(c);
            }
            match adam_step(&mut adam, &mut model.tensors_mut(), &grads.tensors(), lr) {
                Ok(()) => {
                    model.steps += 1;
                    losses.push(loss);
                    history.step_losses.push(loss);
                }
                Err(e @ VeteError::NonFiniteGradient(_)) => {
                    log::warn!("epoch {epoch}: step aborted: {e}");
                    skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }

        let val_metric = if validation.is_empty() {
            None
        } else {
            match validation_score(&model, validation) {
                Ok(v) => Some(v),
                Err(e) => {
                    log::warn!("epoch {epoch}: validation failed: {e}");
                    None
                }
            }
        };
        let mean_loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        let record = EpochRecord {
            epoch,
            mean_loss,
            val_metric,
            skipped_batches: skipped,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        log::info!("{}", record.log_line());
        history.skipped_batches += skipped;
        history.epochs.push(record);
    }
    history.wall_time = started.elapsed();

    if model.steps == 0 {
        return Err(VeteError::NoUsableBatches {
            skipped: history.skipped_batches,
        });
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocabulary;
    use crate::encoders::EncoderKind;
    use crate::encoders::EncoderSpec;

    #[test]
    fn word_level_expansion_counts_content_tokens() {
        let vocab = build_vocabulary(&[tokenize("a b c d e").unwrap()], 1);
        let pairs =
            EncodedPair::from_records(&[CaptionRecord::new("img", "a b c d e").unwrap()], &vocab)
                .unwrap();
        let words = expand_word_level(&pairs);
        assert_eq!(words.len(), 5);
        assert!(words
            .iter()
            .all(|w| w.token_ids.len() == 1 && w.image_id == "img"));
    }

    #[test]
    fn word_level_rejects_recurrent_encoders() {
        let vocab = build_vocabulary(&[], 1);
        let features = FeatureTable::new(2).unwrap();
        let hp = HyperParams {
            encoder: EncoderSpec::from_kind(EncoderKind::RnnGru, 1, 4),
            training_level: TrainingLevel::Word,
            ..HyperParams::default()
        };
        let data = TrainingSet {
            vocab: &vocab,
            features: &features,
            pairs: &[],
        };
        assert!(matches!(
            train_word_level(&hp, data, &[]),
            Err(VeteError::UnsupportedConfiguration(_))
        ));
        assert!(matches!(
            train(&hp, data, &[]),
            Err(VeteError::UnsupportedConfiguration(_))
        ));
    }

    #[test]
    fn missing_features_are_reported_by_id() {
        let vocab = build_vocabulary(&[tokenize("x").unwrap()], 1);
        let mut features = FeatureTable::new(2).unwrap();
        features.insert("present", vec![1.0, 0.0]).unwrap();
        let pairs = vec![
            EncodedPair {
                image_id: "present".into(),
                token_ids: vec![1, 3, 2],
            },
            EncodedPair {
                image_id: "absent".into(),
                token_ids: vec![1, 3, 2],
            },
        ];
        let data = TrainingSet {
            vocab: &vocab,
            features: &features,
            pairs: &pairs,
        };
        let err = train(&HyperParams::default(), data, &[]).unwrap_err();
        assert!(err.to_string().contains("absent"), "{err}");
    }
}
