//! Scoring sentence embeddings against graded (STS) and binary similarity
//! datasets.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::corpus::CaptionRecord;
use crate::encoders::cosine_similarity;
use crate::error::{Result, VeteError};
use crate::optim::Model;
use crate::seed::rng_from_seed;

pub const DEFAULT_STS_RANGE: (f64, f64) = (0.0, 5.0);

#[derive(Debug, Clone, PartialEq)]
pub struct StsItem {
    pub sentence_a: String,
    pub sentence_b: String,
    pub gold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StsDataset {
    pub name: String,
    pub items: Vec<StsItem>,
    pub score_range: (f64, f64),
}

impl StsDataset {
    pub fn new(
        name: impl Into<String>,
        items: Vec<StsItem>,
        score_range: (f64, f64),
    ) -> Result<Self> {
        let (lo, hi) = score_range;
        if items.is_empty() {
            return Err(VeteError::Data("STS dataset has no items".into()));
        }
        if let Some(bad) = items.iter().find(|i| !(i.gold >= lo && i.gold <= hi)) {
            return Err(VeteError::Data(format!(
                "gold score {} outside range [{lo}, {hi}]",
                bad.gold
            )));
        }
        Ok(Self {
            name: name.into(),
            items,
            score_range,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryItem {
    pub sentence_a: String,
    pub sentence_b: String,
    pub label: bool,
    /// Source images of the two captions, when known.
    pub images: Option<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryPairSet {
    pub name: String,
    pub items: Vec<BinaryItem>,
}

impl BinaryPairSet {
    pub fn new(name: impl Into<String>, items: Vec<BinaryItem>) -> Result<Self> {
        let pos = items.iter().filter(|i| i.label).count();
        if pos == 0 || pos == items.len() {
            return Err(VeteError::Data(
                "binary pair set needs both related and unrelated pairs".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            items,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalDataset {
    Sts(StsDataset),
    Binary(BinaryPairSet),
}

impl EvalDataset {
    pub fn name(&self) -> &str {
        match self {
            EvalDataset::Sts(d) => &d.name,
            EvalDataset::Binary(d) => &d.name,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetScore {
    pub dataset: String,
    pub pearson: f64,
    pub auc: Option<f64>,
    pub items: usize,
    pub failed_items: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub scores: Vec<DatasetScore>,
    pub average: f64,
}

impl EvalReport {
    /// `dataset<TAB>metric<TAB>value` rows with a trailing average row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("dataset\tmetric\tvalue\n");
        for s in &self.scores {
            out.push_str(&format!("{}\tpearson\t{}\n", s.dataset, s.pearson));
            if let Some(auc) = s.auc {
                out.push_str(&format!("{}\tauc\t{}\n", s.dataset, auc));
            }
            out.push_str(&format!(
                "{}\tfailed_items\t{}\n",
                s.dataset, s.failed_items
            ));
        }
        out.push_str(&format!("average\tpearson\t{}\n", self.average));
        out
    }
}

/// Population-moment Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(VeteError::Shape {
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(VeteError::DegenerateInput);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(VeteError::DegenerateInput);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Area under the ROC curve from the Mann–Whitney rank statistic, ties
/// sharing their average rank.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(VeteError::Shape {
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(VeteError::DegenerateInput);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

pub fn sentence_similarity(model: &Model, a: &str, b: &str) -> Result<f64> {
    cosine_similarity(&model.embed_text(a)?, &model.embed_text(b)?)
}

/// Similarities for every pair; pairs that cannot be encoded score 0.
fn similarities<'a, I>(model: &Model, pairs: I) -> (Vec<f64>, usize)
where
    I: IndexedParallelIterator<Item = (&'a str, &'a str)>,
{
    let sims: Vec<Option<f64>> = pairs
        .map(|(a, b)| sentence_similarity(model, a, b).ok())
        .collect();
    let failed = sims.iter().filter(|s| s.is_none()).count();
    (sims.into_iter().map(|s| s.unwrap_or(0.0)).collect(), failed)
}

pub fn eval_sts(model: &Model, ds: &StsDataset) -> Result<DatasetScore> {
    let (sims, failed) = similarities(
        model,
        ds.items
            .par_iter()
            .map(|i| (i.sentence_a.as_str(), i.sentence_b.as_str())),
    );
    if failed == ds.items.len() {
        return Err(VeteError::EvaluationImpossible);
    }
    if failed > 0 {
        log::warn!("{}: {failed} items could not be encoded", ds.name);
    }
    let gold: Vec<f64> = ds.items.iter().map(|i| i.gold).collect();
    Ok(DatasetScore {
        dataset: ds.name.clone(),
        pearson: pearson(&sims, &gold)?,
        auc: None,
        items: ds.items.len(),
        failed_items: failed,
    })
}

/// Pearson against labels mapped to ±1, plus AUC.
pub fn eval_binary_pairs(model: &Model, ds: &BinaryPairSet) -> Result<DatasetScore> {
    let (sims, failed) = similarities(
        model,
        ds.items
            .par_iter()
            .map(|i| (i.sentence_a.as_str(), i.sentence_b.as_str())),
    );
    if failed == ds.items.len() {
        return Err(VeteError::EvaluationImpossible);
    }
    let labels: Vec<bool> = ds.items.iter().map(|i| i.label).collect();
    let signed: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    Ok(DatasetScore {
        dataset: ds.name.clone(),
        pearson: pearson(&sims, &signed)?,
        auc: Some(auc(&sims, &labels)?),
        items: ds.items.len(),
        failed_items: failed,
    })
}

pub fn eval_dataset(model: &Model, ds: &EvalDataset) -> Result<DatasetScore> {
    match ds {
        EvalDataset::Sts(d) => eval_sts(model, d),
        EvalDataset::Binary(d) => eval_binary_pairs(model, d),
    }
}

pub fn average_scores(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(VeteError::EmptyReport);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub fn evaluate(model: &Model, datasets: &[EvalDataset]) -> Result<EvalReport> {
    let scores = datasets
        .iter()
        .map(|d| eval_dataset(model, d))
        .collect::<Result<Vec<_>>>()?;
    let average = average_scores(&scores.iter().map(|s| s.pearson).collect::<Vec<_>>())?;
    Ok(EvalReport { scores, average })
}

/// Mean per-dataset Pearson score; the model-selection metric.
pub fn validation_score(model: &Model, datasets: &[EvalDataset]) -> Result<f64> {
    evaluate(model, datasets).map(|r| r.average)
}

/// Samples `n_pos` caption pairs that describe the same image and `n_neg`
/// pairs from different images, without duplicates.
pub fn build_binary_pair_set(
    name: &str,
    records: &[CaptionRecord],
    n_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Result<BinaryPairSet> {
    let mut rng = rng_from_seed(seed);
    let mut by_image: IndexMap<&str, Vec<usize>> = IndexMap::new();
    for (i, r) in records.iter().enumerate() {
        by_image.entry(r.image_id.as_str()).or_default().push(i);
    }

    let mut related: Vec<(usize, usize)> = Vec::new();
    for idx in by_image.values() {
        for (k, &a) in idx.iter().enumerate() {
            for &b in &idx[k + 1..] {
                related.push((a, b));
            }
        }
    }
    if n_pos > related.len() {
        return Err(VeteError::TooFewPairs {
            requested: n_pos,
            available: related.len(),
        });
    }
    related.shuffle(&mut rng);
    related.truncate(n_pos);

    let c = records.len();
    let unrelated_total = c * c.saturating_sub(1) / 2 - count_related(&by_image);
    if n_neg > unrelated_total {
        return Err(VeteError::TooFewPairs {
            requested: n_neg,
            available: unrelated_total,
        });
    }
    let differ = |a: usize, b: usize| records[a].image_id != records[b].image_id;
    let unrelated: Vec<(usize, usize)> = if n_neg * 2 > unrelated_total {
        let mut all: Vec<(usize, usize)> = (0..c)
            .flat_map(|a| (a + 1..c).map(move |b| (a, b)))
            .filter(|&(a, b)| differ(a, b))
            .collect();
        all.shuffle(&mut rng);
        all.truncate(n_neg);
        all
    } else {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(n_neg);
        while out.len() < n_neg {
            let a = rng.random_range(0..c);
            let b = rng.random_range(0..c);
            if a == b || !differ(a, b) {
                continue;
            }
            let key = (a.min(b), a.max(b));
            if seen.insert(key) {
                out.push(key);
            }
        }
        out
    };

    let item = |(a, b): (usize, usize), label: bool| BinaryItem {
        sentence_a: records[a].caption.clone(),
        sentence_b: records[b].caption.clone(),
        label,
        images: Some((records[a].image_id.clone(), records[b].image_id.clone())),
    };
    let mut items: Vec<BinaryItem> = related
        .into_iter()
        .map(|p| item(p, true))
        .chain(unrelated.into_iter().map(|p| item(p, false)))
        .collect();
    items.shuffle(&mut rng);
    BinaryPairSet::new(name, items)
}

fn count_related(by_image: &IndexMap<&str, Vec<usize>>) -> usize {
    by_image.values().map(|v| v.len() * (v.len() - 1) / 2).sum()
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = File::open(path).map_err(|e| VeteError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| VeteError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn three_fields<'a>(
    path: &Path,
    line_no: usize,
    line: &'a str,
) -> Result<(&'a str, &'a str, &'a str)> {
    let mut parts = line.splitn(3, '\t');
    match (parts.next(), parts.next(), parts.next()) {
        (Some(a), Some(b), Some(c)) => Ok((a, b, c)),
        _ => Err(VeteError::Parse {
            path: path.display().to_string(),
            line: line_no,
            message: "expected three tab-separated fields".into(),
        }),
    }
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Reads `gold<TAB>sentence_a<TAB>sentence_b` lines.
pub fn load_sts(path: impl AsRef<Path>, score_range: (f64, f64)) -> Result<StsDataset> {
    let path = path.as_ref();
    let mut items = Vec::new();
    for (n, line) in read_lines(path)? {
        let (gold, a, b) = three_fields(path, n, &line)?;
        let gold: f64 = gold.trim().parse().map_err(|_| VeteError::Parse {
            path: path.display().to_string(),
            line: n,
            message: format!("bad gold score `{gold}`"),
        })?;
        items.push(StsItem {
            sentence_a: a.to_string(),
            sentence_b: b.to_string(),
            gold,
        });
    }
    StsDataset::new(dataset_name(path), items, score_range)
}

/// Reads `label<TAB>sentence_a<TAB>sentence_b` lines with labels 0 or 1.
pub fn load_binary_pairs(path: impl AsRef<Path>) -> Result<BinaryPairSet> {
    let path = path.as_ref();
    let mut items = Vec::new();
    for (n, line) in read_lines(path)? {
        let (label, a, b) = three_fields(path, n, &line)?;
        let label = match label.trim() {
            "1" => true,
            "0" => false,
            other => {
                return Err(VeteError::Parse {
                    path: path.display().to_string(),
                    line: n,
                    message: format!("label must be 0 or 1, got `{other}`"),
                })
            }
        };
        items.push(BinaryItem {
            sentence_a: a.to_string(),
            sentence_b: b.to_string(),
            label,
            images: None,
        });
    }
    BinaryPairSet::new(dataset_name(path), items)
}

pub fn write_sts(path: impl AsRef<Path>, ds: &StsDataset) -> Result<()> {
    let path = path.as_ref();
    let io_err = |e| VeteError::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for i in &ds.items {
        writeln!(w, "{}\t{}\t{}", i.gold, i.sentence_a, i.sentence_b).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn write_binary_pairs(path: impl AsRef<Path>, ds: &BinaryPairSet) -> Result<()> {
    let path = path.as_ref();
    let io_err = |e| VeteError::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for i in &ds.items {
        writeln!(
            w,
            "{}\t{}\t{}",
            u8::from(i.label),
            i.sentence_a,
            i.sentence_b
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}
