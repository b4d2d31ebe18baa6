//! Contrastive batches and the correlation-style objectives used to train
//! image/sentence alignment.
//!
//! A batch of `B` true (image, sentence) pairs is extended with `B` wrong
//! pairs `(image_i, sentence_σ(i))` where `σ` is a derangement, giving a
//! similarity vector of length `2B` whose target labels are `B` times `+1`
//! followed by `B` times `−1`. All objectives use population moments.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Result, VeteError};

pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_SKT_ALPHA: f64 = 1.0;
pub const DEFAULT_RANK_MARGIN: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub image_features: Vec<Vec<f64>>,
    pub sentences: Vec<Vec<usize>>,
    pub sigma: Vec<usize>,
    pub labels: Vec<f64>,
}

impl PairBatch {
    pub fn size(&self) -> usize {
        self.sentences.len()
    }

    /// `(image index, sentence index)` for all `2B` pairs, correct ones first.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let b = self.size();
        (0..b)
            .map(|i| (i, i))
            .chain(self.sigma.iter().enumerate().map(|(i, &s)| (i, s)))
            .take(2 * b)
    }
}

/// `[+1; B] ++ [−1; B]`
pub fn contrastive_labels(batch_size: usize) -> Vec<f64> {
    let mut labels = vec![1.0; batch_size];
    labels.resize(2 * batch_size, -1.0);
    labels
}

/// Uniform derangement by rejection sampling of uniform permutations.
pub fn random_derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(VeteError::BatchTooSmall(n));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

pub fn make_contrastive_batch<R: Rng + ?Sized>(
    image_features: Vec<Vec<f64>>,
    sentences: Vec<Vec<usize>>,
    rng: &mut R,
) -> Result<PairBatch> {
    if image_features.len() != sentences.len() {
        return Err(VeteError::Shape {
            expected: image_features.len(),
            actual: sentences.len(),
        });
    }
    let b = sentences.len();
    let sigma = random_derangement(b, rng)?;
    Ok(PairBatch {
        image_features,
        sentences,
        sigma,
        labels: contrastive_labels(b),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Pearson,
    Covariance,
    /// Smoothed Kendall τ with sharpness `alpha`.
    Skt {
        alpha: f64,
    },
    /// Hinge on correct-minus-wrong similarity with margin `margin`.
    Rank {
        margin: f64,
    },
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Pearson => "pearson",
            LossKind::Covariance => "covariance",
            LossKind::Skt { .. } => "skt",
            LossKind::Rank { .. } => "rank",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Skt { alpha } => write!(f, "skt_{alpha}"),
            LossKind::Rank { margin } => write!(f, "rank_{margin}"),
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Guard on the similarity standard deviation for the Pearson objective.
    pub epsilon: f64,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn pearson() -> Self {
        Self::new(LossKind::Pearson)
    }

    /// Parses `pearson|covariance|skt|rank` with the given kind parameters.
    pub fn from_name(name: &str, skt_alpha: f64, rank_margin: f64) -> Result<Self> {
        let kind = match name.to_ascii_lowercase().as_str() {
            "pearson" => LossKind::Pearson,
            "covariance" | "cov" => LossKind::Covariance,
            "skt" => LossKind::Skt { alpha: skt_alpha },
            "rank" => LossKind::Rank {
                margin: rank_margin,
            },
            _ => return Err(VeteError::Config(format!("unknown loss `{name}`"))),
        };
        let spec = Self::new(kind);
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(VeteError::Config(format!(
                "loss epsilon must be in (0, 1e-3], got {}",
                self.epsilon
            )));
        }
        match self.kind {
            LossKind::Skt { alpha } if !(alpha > 0.0 && alpha.is_finite()) => Err(
                VeteError::Config(format!("skt_alpha must be positive, got {alpha}")),
            ),
            LossKind::Rank { margin } if !(margin > 0.0 && margin.is_finite()) => Err(
                VeteError::Config(format!("rank_margin must be positive, got {margin}")),
            ),
            _ => Ok(()),
        }
    }
}

impl FromStr for LossSpec {
    type Err = VeteError;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_name(s, DEFAULT_SKT_ALPHA, DEFAULT_RANK_MARGIN)
    }
}

fn check_pair_lengths(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(VeteError::Shape {
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(VeteError::Shape {
            expected: 2,
            actual: x.len(),
        });
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

struct Moments {
    mean_x: f64,
    mean_y: f64,
    cov: f64,
    std_x: f64,
    std_y: f64,
}

fn moments(x: &[f64], y: &[f64]) -> Moments {
    let n = x.len() as f64;
    let (mean_x, mean_y) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mean_x, b - mean_y);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    Moments {
        mean_x,
        mean_y,
        cov: sxy / n,
        std_x: (sxx / n).sqrt(),
        std_y: (syy / n).sqrt(),
    }
}

/// Pearson correlation of `sims` against `labels`; the training loss is its
/// negation.
pub fn pearson_objective(sims: &[f64], labels: &[f64], epsilon: f64) -> Result<f64> {
    check_pair_lengths(sims, labels)?;
    let m = moments(sims, labels);
    guard_std(&m, epsilon)?;
    Ok(m.cov / (m.std_x * m.std_y))
}

fn guard_std(m: &Moments, epsilon: f64) -> Result<()> {
    for std in [m.std_x, m.std_y] {
        if std < epsilon {
            return Err(VeteError::DegenerateSimilarities { std, epsilon });
        }
    }
    Ok(())
}

pub fn covariance_objective(sims: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair_lengths(sims, labels)?;
    Ok(moments(sims, labels).cov)
}

/// `Σ_{i<j} tanh(α (x_i − x_j)(y_i − y_j)) / (n(n−1)/2)`
pub fn skt_objective(x: &[f64], y: &[f64], alpha: f64) -> Result<f64> {
    check_pair_lengths(x, y)?;
    let n = x.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += (alpha * (x[i] - x[j]) * (y[i] - y[j])).tanh();
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Mean over `i` of `max(0, γ − pos_i + neg_i)`; minimized directly.
pub fn rank_objective(sim_pos: &[f64], sim_neg: &[f64], margin: f64) -> Result<f64> {
    if sim_pos.len() != sim_neg.len() || sim_pos.is_empty() {
        return Err(VeteError::Shape {
            expected: sim_pos.len().max(1),
            actual: sim_neg.len(),
        });
    }
    let total: f64 = sim_pos
        .iter()
        .zip(sim_neg)
        .map(|(p, n)| (margin - p + n).max(0.0))
        .sum();
    Ok(total / sim_pos.len() as f64)
}

/// The value the optimizer minimizes: the negated objective for the
/// correlation-style losses, the hinge itself for the rank loss.
pub fn loss_value(spec: &LossSpec, sims: &[f64], labels: &[f64]) -> Result<f64> {
    loss_and_gradient(spec, sims, labels).map(|(v, _)| v)
}

pub fn loss_gradient(spec: &LossSpec, sims: &[f64], labels: &[f64]) -> Result<Vec<f64>> {
    loss_and_gradient(spec, sims, labels).map(|(_, g)| g)
}

/// Minimized loss and its exact gradient with respect to `sims`.
///
/// For [`LossKind::Rank`] the first half of `sims` holds the correct-pair
/// similarities and the second half the wrong pairs, as produced by
/// [`PairBatch::pairs`]; `labels` only fixes the length.
pub fn loss_and_gradient(spec: &LossSpec, sims: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_pair_lengths(sims, labels)?;
    let n = sims.len() as f64;
    match spec.kind {
        LossKind::Pearson => {
            let m = moments(sims, labels);
            guard_std(&m, spec.epsilon)?;
            let rho = m.cov / (m.std_x * m.std_y);
            // ∂ρ/∂x_i = [(y_i − ȳ)/(σx σy) − ρ (x_i − x̄)/σx²] / n
            let grad = sims
                .iter()
                .zip(labels)
                .map(|(x, y)| {
                    let d = (y - m.mean_y) / (m.std_x * m.std_y)
                        - rho * (x - m.mean_x) / (m.std_x * m.std_x);
                    -d / n
                })
                .collect();
            Ok((-rho, grad))
        }
        LossKind::Covariance => {
            let m = moments(sims, labels);
            let grad = labels.iter().map(|y| -(y - m.mean_y) / n).collect();
            Ok((-m.cov, grad))
        }
        LossKind::Skt { alpha } => {
            let len = sims.len();
            let norm = (len * (len - 1) / 2) as f64;
            let mut total = 0.0;
            let mut grad = vec![0.0; len];
            for i in 0..len {
                for j in i + 1..len {
                    let dy = labels[i] - labels[j];
                    let t = (alpha * (sims[i] - sims[j]) * dy).tanh();
                    total += t;
                    let d = (1.0 - t * t) * alpha * dy / norm;
                    grad[i] -= d;
                    grad[j] += d;
                }
            }
            Ok((-total / norm, grad))
        }
        LossKind::Rank { margin } => {
            if !sims.len().is_multiple_of(2) {
                return Err(VeteError::Shape {
                    expected: sims.len() + 1,
                    actual: sims.len(),
                });
            }
            let b = sims.len() / 2;
            let (pos, neg) = sims.split_at(b);
            let mut grad = vec![0.0; sims.len()];
            let mut total = 0.0;
            for i in 0..b {
                let h = margin - pos[i] + neg[i];
                if h > 0.0 {
                    total += h;
                    grad[i] = -1.0 / b as f64;
                    grad[b + i] = 1.0 / b as f64;
                }
            }
            Ok((total / b as f64, grad))
        }
    }
}
