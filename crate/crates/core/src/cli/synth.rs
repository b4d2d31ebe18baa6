//! Synthetic caption/image corpora with known ground truth.
//!
//! Words belong to one of `k` concepts (several synonyms each) or are filler.
//! A concept word's ground-truth vector is the one-hot `e_c`; filler words map
//! to zero. A caption's ground truth is the mean over its words, and its image
//! feature is `A · mean + noise` for one fixed Gaussian matrix `A`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{write_captions, write_image_features, CaptionRecord, FeatureTable};
use crate::error::{Result, VeteError};
use crate::eval::{
    write_binary_pairs, write_sts, BinaryItem, BinaryPairSet, StsDataset, StsItem,
    DEFAULT_STS_RANGE,
};
use crate::seed::{rng_from_seed, VeteRng};

/// At most this many concepts appear in one caption.
const MAX_CONCEPTS_PER_CAPTION: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub concepts: usize,
    pub caption_length: (usize, usize),
    pub n_examples: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Pairs in each of the held-out STS files.
    pub n_sts: usize,
    /// Related and unrelated pairs each in the binary file.
    pub n_binary: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 50,
            concepts: 8,
            caption_length: (4, 8),
            n_examples: 2000,
            feature_dim: 16,
            noise_sigma: 0.05,
            n_sts: 400,
            n_binary: 300,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Words that carry no concept.
    pub fn filler_count(&self) -> usize {
        (self.vocab_size / 5).min(self.vocab_size - self.concepts)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(VeteError::Config(m));
        if self.concepts < 1 || self.vocab_size < self.concepts {
            return fail(format!(
                "need vocab_size ≥ concepts ≥ 1, got {} and {}",
                self.vocab_size, self.concepts
            ));
        }
        if self.feature_dim < self.concepts {
            return fail(format!(
                "feature_dim {} smaller than concepts {}",
                self.feature_dim, self.concepts
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be ≥ 0, got {}", self.noise_sigma));
        }
        let (lo, hi) = self.caption_length;
        if lo < 1 || lo > hi {
            return fail(format!("bad caption length range {lo}..={hi}"));
        }
        if self.n_examples < 3 {
            return fail("need at least 3 examples".into());
        }
        if self.n_sts < 2 || self.n_binary < 1 {
            return fail("need at least 2 STS pairs and 1 binary pair per class".into());
        }
        if self.concepts < 2 {
            return fail("unrelated binary pairs need at least 2 concepts".into());
        }
        Ok(())
    }
}

/// Hidden generator state: which concept each word expresses.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub words: Vec<String>,
    /// `Some(c)` for concept words, `None` for fillers.
    pub concept_of: Vec<Option<usize>>,
    synonyms: Vec<Vec<usize>>,
    fillers: Vec<usize>,
    /// `feature_dim × k`, row-major.
    mixing: Vec<f64>,
    spec: SyntheticSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCaption {
    pub text: String,
    pub concepts: Vec<usize>,
    pub ground_truth: Vec<f64>,
}

impl SyntheticWorld {
    pub fn new(spec: &SyntheticSpec, rng: &mut VeteRng) -> Result<Self> {
        spec.validate()?;
        let k = spec.concepts;
        let n_fill = spec.filler_count();
        let mut ids: Vec<usize> = (0..spec.vocab_size).collect();
        ids.shuffle(rng);
        let mut concept_of = vec![None; spec.vocab_size];
        let mut synonyms = vec![Vec::new(); k];
        for (j, &w) in ids[n_fill..].iter().enumerate() {
            concept_of[w] = Some(j % k);
            synonyms[j % k].push(w);
        }
        let mut fillers = ids[..n_fill].to_vec();
        fillers.sort_unstable();
        synonyms.iter_mut().for_each(|s| s.sort_unstable());

        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mixing = (0..spec.feature_dim * k)
            .map(|_| normal.sample(rng))
            .collect();
        Ok(Self {
            words: (0..spec.vocab_size).map(|i| format!("w{i}")).collect(),
            concept_of,
            synonyms,
            fillers,
            mixing,
            spec: spec.clone(),
        })
    }

    pub fn concept_count(&self) -> usize {
        self.spec.concepts
    }

    fn random_concepts(&self, max: usize, rng: &mut VeteRng) -> Vec<usize> {
        let m = rng.random_range(1..=max.min(MAX_CONCEPTS_PER_CAPTION).min(self.spec.concepts));
        let all: Vec<usize> = (0..self.spec.concepts).collect();
        let mut set: Vec<usize> = all.choose_multiple(rng, m).copied().collect();
        set.sort_unstable();
        set
    }

    /// A fresh caption expressing exactly `concepts`.
    pub fn caption_for(&self, concepts: &[usize], rng: &mut VeteRng) -> SyntheticCaption {
        let (lo, hi) = self.spec.caption_length;
        let len = rng.random_range(lo.max(concepts.len())..=hi.max(concepts.len()));
        let mut words: Vec<usize> = concepts
            .iter()
            .map(|&c| {
                *self.synonyms[c]
                    .choose(rng)
                    .expect("every concept has a word")
            })
            .collect();
        while words.len() < len {
            let w = match self.fillers.choose(rng) {
                Some(&f) => f,
                None => *self.synonyms[concepts[0]].choose(rng).expect("non-empty"),
            };
            words.push(w);
        }
        words.shuffle(rng);
        let mut ground_truth = vec![0.0; self.spec.concepts];
        for &w in &words {
            if let Some(c) = self.concept_of[w] {
                ground_truth[c] += 1.0;
            }
        }
        ground_truth
            .iter_mut()
            .for_each(|g| *g /= words.len() as f64);
        SyntheticCaption {
            text: words
                .iter()
                .map(|&w| self.words[w].as_str())
                .collect::<Vec<_>>()
                .join(" "),
            concepts: concepts.to_vec(),
            ground_truth,
        }
    }

    pub fn random_caption(&self, rng: &mut VeteRng) -> SyntheticCaption {
        let concepts = self.random_concepts(self.spec.caption_length.1, rng);
        self.caption_for(&concepts, rng)
    }

    /// `A · ground_truth + N(0, σ²)` per component.
    pub fn image_feature(&self, ground_truth: &[f64], rng: &mut VeteRng) -> Vec<f32> {
        let k = self.spec.concepts;
        let noise = Normal::new(0.0, self.spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("σ ≥ 0");
        (0..self.spec.feature_dim)
            .map(|r| {
                let clean: f64 = (0..k)
                    .map(|c| self.mixing[r * k + c] * ground_truth[c])
                    .sum();
                let eps = if self.spec.noise_sigma > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
                (clean + eps) as f32
            })
            .collect()
    }

    /// A second caption whose concept set keeps each of `base`'s concepts
    /// with probability ½ and is topped up with random others.
    fn overlapping_caption(&self, base: &[usize], rng: &mut VeteRng) -> SyntheticCaption {
        let mut set: Vec<usize> = base
            .iter()
            .copied()
            .filter(|_| rng.random_bool(0.5))
            .collect();
        let target = rng.random_range(1..=MAX_CONCEPTS_PER_CAPTION.min(self.spec.concepts));
        let mut others: Vec<usize> = (0..self.spec.concepts)
            .filter(|c| !set.contains(c))
            .collect();
        others.shuffle(rng);
        while set.len() < target {
            set.push(others.pop().expect("enough concepts"));
        }
        set.sort_unstable();
        self.caption_for(&set, rng)
    }
}

pub fn ground_truth_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub world: SyntheticWorld,
    pub records: Vec<CaptionRecord>,
    pub features: FeatureTable,
    /// Held-out graded pairs, gold = ground-truth cosine.
    pub sts: StsDataset,
    /// A second, independent held-out STS set for model selection.
    pub sts_validation: StsDataset,
    pub binary: BinaryPairSet,
}

fn sts_set(world: &SyntheticWorld, name: &str, n: usize, rng: &mut VeteRng) -> Result<StsDataset> {
    let items = (0..n)
        .map(|_| {
            let a = world.random_caption(rng);
            let b = world.overlapping_caption(&a.concepts, rng);
            StsItem {
                gold: ground_truth_cosine(&a.ground_truth, &b.ground_truth),
                sentence_a: a.text,
                sentence_b: b.text,
            }
        })
        .collect();
    StsDataset::new(name, items, DEFAULT_STS_RANGE)
}

/// Related pairs express the same concept set in fresh words; unrelated pairs
/// have different concept sets.
fn binary_set(world: &SyntheticWorld, n: usize, rng: &mut VeteRng) -> Result<BinaryPairSet> {
    let mut items = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let a = world.random_caption(rng);
        let b = world.caption_for(&a.concepts, rng);
        items.push(BinaryItem {
            sentence_a: a.text,
            sentence_b: b.text,
            label: true,
            images: None,
        });
        let a = world.random_caption(rng);
        let mut b = world.random_caption(rng);
        while b.concepts == a.concepts {
            b = world.random_caption(rng);
        }
        items.push(BinaryItem {
            sentence_a: a.text,
            sentence_b: b.text,
            label: false,
            images: None,
        });
    }
    BinaryPairSet::new("binary", items)
}

pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let world = SyntheticWorld::new(spec, &mut rng)?;
    let mut records = Vec::with_capacity(spec.n_examples);
    let mut features = FeatureTable::new(spec.feature_dim)?;
    for i in 0..spec.n_examples {
        let id = format!("img{:05}", i + 1);
        let cap = world.random_caption(&mut rng);
        features.insert(id.clone(), world.image_feature(&cap.ground_truth, &mut rng))?;
        records.push(CaptionRecord::new(id, cap.text)?);
    }
    let sts = sts_set(&world, "sts", spec.n_sts, &mut rng)?;
    let sts_validation = sts_set(&world, "sts_val", spec.n_sts, &mut rng)?;
    let binary = binary_set(&world, spec.n_binary, &mut rng)?;
    Ok(SyntheticData {
        world,
        records,
        features,
        sts,
        sts_validation,
        binary,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticPaths {
    pub captions: PathBuf,
    pub features: PathBuf,
    pub sts: PathBuf,
    pub sts_validation: PathBuf,
    pub binary: PathBuf,
}

impl SyntheticPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            captions: dir.join("captions.tsv"),
            features: dir.join("features.vetf"),
            sts: dir.join("sts.tsv"),
            sts_validation: dir.join("sts_val.tsv"),
            binary: dir.join("binary.tsv"),
        }
    }
}

pub fn write_synthetic_dataset(
    data: &SyntheticData,
    dir: impl AsRef<Path>,
) -> Result<SyntheticPaths> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| VeteError::io(dir, e))?;
    let paths = SyntheticPaths::in_dir(dir);
    write_captions(&paths.captions, &data.records)?;
    write_image_features(&paths.features, &data.features)?;
    write_sts(&paths.sts, &data.sts)?;
    write_sts(&paths.sts_validation, &data.sts_validation)?;
    write_binary_pairs(&paths.binary, &data.binary)?;
    Ok(paths)
}
