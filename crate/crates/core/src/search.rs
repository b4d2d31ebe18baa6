//! Random hyperparameter search and single-parameter ablations over shared
//! sampled configurations.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::contrastive::{LossKind, LossSpec, DEFAULT_RANK_MARGIN, DEFAULT_SKT_ALPHA};
use crate::encoders::{Architecture, EncoderKind, EncoderSpec};
use crate::error::{Result, VeteError};
use crate::eval::{evaluate, DatasetScore, EvalDataset, EvalReport};
use crate::optim::{train, HyperParams, Model, TrainingSet};
use crate::seed::{derive_seed, rng_from_seed};

/// Names a ranges file may assign.
pub const KNOWN_PARAMS: &[&str] = &[
    "learning_rate",
    "lr_decay",
    "init_scale",
    "batch_size",
    "embedding_dim",
    "epochs",
    "encoder",
    "rnn_layers",
    "hidden",
    "loss",
    "skt_alpha",
    "rank_margin",
    "training_level",
    "normalize_output",
];

/// Parameters every search space must sample.
pub const REQUIRED_PARAMS: &[&str] = &["learning_rate", "init_scale"];

#[derive(Debug, Clone, PartialEq)]
pub enum ParamKind {
    LogUniform { lo: f64, hi: f64 },
    Uniform { lo: f64, hi: f64 },
    Choice(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRange {
    pub name: String,
    pub kind: ParamKind,
}

impl ParamRange {
    pub fn new(name: &str, kind: ParamKind) -> Result<Self> {
        let name = canonical_name(name);
        if !KNOWN_PARAMS.contains(&name) {
            return Err(VeteError::Config(format!(
                "unknown hyperparameter `{name}`"
            )));
        }
        match &kind {
            ParamKind::LogUniform { lo, hi } if !(*lo > 0.0 && lo < hi && hi.is_finite()) => {
                return Err(VeteError::Config(format!(
                    "{name}: log_uniform needs 0 < lo < hi, got {lo} {hi}"
                )))
            }
            ParamKind::Uniform { lo, hi } if !(lo < hi && lo.is_finite() && hi.is_finite()) => {
                return Err(VeteError::Config(format!(
                    "{name}: uniform needs lo < hi, got {lo} {hi}"
                )))
            }
            ParamKind::Choice(v) if v.is_empty() => {
                return Err(VeteError::Config(format!("{name}: empty choice list")))
            }
            _ => {}
        }
        Ok(Self {
            name: name.to_string(),
            kind,
        })
    }

    pub fn log_uniform(name: &str, lo: f64, hi: f64) -> Result<Self> {
        Self::new(name, ParamKind::LogUniform { lo, hi })
    }

    pub fn uniform(name: &str, lo: f64, hi: f64) -> Result<Self> {
        Self::new(name, ParamKind::Uniform { lo, hi })
    }

    pub fn choice<S: ToString>(name: &str, values: &[S]) -> Result<Self> {
        Self::new(
            name,
            ParamKind::Choice(values.iter().map(|v| v.to_string()).collect()),
        )
    }

    /// Draws one value, rendered as the string stored in trial assignments.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        match &self.kind {
            ParamKind::LogUniform { lo, hi } => {
                let u: f64 = rng.random_range(lo.ln()..hi.ln());
                u.exp().to_string()
            }
            ParamKind::Uniform { lo, hi } => rng.random_range(*lo..*hi).to_string(),
            ParamKind::Choice(v) => v[rng.random_range(0..v.len())].clone(),
        }
    }

    /// Parses `name kind args`, e.g. `learning_rate log_uniform 1e-4 1e-1`.
    pub fn parse_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || VeteError::Config(format!("bad range line `{line}`"));
        let [name, kind, args @ ..] = fields.as_slice() else {
            return Err(bad());
        };
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        match (*kind, args) {
            ("log_uniform", [lo, hi]) => Self::log_uniform(name, num(lo)?, num(hi)?),
            ("uniform", [lo, hi]) => Self::uniform(name, num(lo)?, num(hi)?),
            ("choice", values) if !values.is_empty() => Self::choice(name, values),
            _ => Err(bad()),
        }
    }
}

fn canonical_name(name: &str) -> &str {
    match name {
        "layers" => "rnn_layers",
        "lr" => "learning_rate",
        other => other,
    }
}

/// Ranges file: one range per line; blank lines and `#` comments ignored.
pub fn parse_ranges(text: &str) -> Result<Vec<ParamRange>> {
    let ranges = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(ParamRange::parse_line)
        .collect::<Result<Vec<_>>>()?;
    for (i, r) in ranges.iter().enumerate() {
        if ranges[..i].iter().any(|o| o.name == r.name) {
            return Err(VeteError::Config(format!("`{}` given twice", r.name)));
        }
    }
    Ok(ranges)
}

pub fn load_ranges(path: impl AsRef<Path>) -> Result<Vec<ParamRange>> {
    let path = path.as_ref();
    parse_ranges(&fs::read_to_string(path).map_err(|e| VeteError::io(path, e))?)
}

/// Sampled values by parameter name.
pub type Assignments = BTreeMap<String, String>;

/// Draws every range in order from `rng`.
pub fn sample_assignments<R: Rng + ?Sized>(
    ranges: &[ParamRange],
    rng: &mut R,
) -> Result<Assignments> {
    for req in REQUIRED_PARAMS {
        if !ranges.iter().any(|r| r.name == *req) {
            return Err(VeteError::Config(format!(
                "search ranges must include `{req}`"
            )));
        }
    }
    Ok(ranges
        .iter()
        .map(|r| (r.name.clone(), r.sample(rng)))
        .collect())
}

fn parse_value<T: std::str::FromStr>(name: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| VeteError::Config(format!("{name}: cannot use value `{v}`")))
}

/// Integers may come from a real-valued range; they are rounded.
fn parse_count(name: &str, v: &str) -> Result<usize> {
    let x: f64 = parse_value(name, v)?;
    if !(x >= 0.5 && x.is_finite()) {
        return Err(VeteError::Config(format!(
            "{name}: needs a positive integer, got `{v}`"
        )));
    }
    Ok(x.round() as usize)
}

/// `base` with the assigned fields overridden.
pub fn apply_assignments(base: &HyperParams, a: &Assignments) -> Result<HyperParams> {
    let mut hp = base.clone();
    for (name, v) in a {
        match name.as_str() {
            "learning_rate" => hp.learning_rate = parse_value(name, v)?,
            "lr_decay" => hp.lr_decay = parse_value(name, v)?,
            "init_scale" => hp.init_scale = parse_value(name, v)?,
            "batch_size" => hp.batch_size = parse_count(name, v)?,
            "embedding_dim" => hp.embedding_dim = parse_count(name, v)?,
            "epochs" => hp.epochs = parse_count(name, v)?,
            "training_level" => hp.training_level = v.parse()?,
            "normalize_output" => hp.encoder.normalize_output = parse_value(name, v)?,
            _ => {}
        }
    }

    let (mut layers, mut hidden) = match &base.encoder.arch {
        Architecture::Bow(_) => (1, hp.embedding_dim),
        Architecture::Rnn { layers, hidden, .. } => (*layers, *hidden),
        Architecture::Cnn { hidden, .. } => (1, *hidden),
    };
    if let Some(v) = a.get("rnn_layers") {
        layers = parse_count("rnn_layers", v)?;
    }
    if let Some(v) = a.get("hidden") {
        hidden = parse_count("hidden", v)?;
    }
    let kind: EncoderKind = match a.get("encoder") {
        Some(v) => v.parse()?,
        None => base.encoder.kind(),
    };
    if a.contains_key("encoder") || a.contains_key("rnn_layers") || a.contains_key("hidden") {
        let normalize = hp.encoder.normalize_output;
        hp.encoder = match (&base.encoder.arch, kind) {
            (Architecture::Cnn { filter_widths, .. }, EncoderKind::Cnn) => {
                EncoderSpec::cnn(hidden, filter_widths.clone())
            }
            _ => EncoderSpec::from_kind(kind, layers, hidden),
        };
        hp.encoder.normalize_output = normalize;
    }

    let (mut alpha, mut margin) = match base.loss.kind {
        LossKind::Skt { alpha } => (alpha, DEFAULT_RANK_MARGIN),
        LossKind::Rank { margin } => (DEFAULT_SKT_ALPHA, margin),
        _ => (DEFAULT_SKT_ALPHA, DEFAULT_RANK_MARGIN),
    };
    if let Some(v) = a.get("skt_alpha") {
        alpha = parse_value("skt_alpha", v)?;
    }
    if let Some(v) = a.get("rank_margin") {
        margin = parse_value("rank_margin", v)?;
    }
    let loss_name = a
        .get("loss")
        .map(String::as_str)
        .unwrap_or(base.loss.kind.name());
    let epsilon = hp.loss.epsilon;
    hp.loss = LossSpec::from_name(loss_name, alpha, margin)?;
    hp.loss.epsilon = epsilon;

    hp.validate()?;
    Ok(hp)
}

/// Samples a configuration; fields without a range keep their `base` value.
pub fn sample_hyperparameters<R: Rng + ?Sized>(
    ranges: &[ParamRange],
    base: &HyperParams,
    rng: &mut R,
) -> Result<(HyperParams, Assignments)> {
    let a = sample_assignments(ranges, rng)?;
    Ok((apply_assignments(base, &a)?, a))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOptions {
    pub n_trials: usize,
    pub master_seed: u64,
    /// Values for every field the ranges do not cover.
    pub base: HyperParams,
}

impl SearchOptions {
    pub fn new(n_trials: usize, master_seed: u64) -> Self {
        Self {
            n_trials,
            master_seed,
            base: HyperParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub index: usize,
    pub seed: u64,
    pub assignments: Assignments,
    pub hyper: HyperParams,
    pub validation_score: f64,
    pub dataset_scores: Vec<DatasetScore>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailedTrial {
    pub index: usize,
    pub seed: u64,
    pub assignments: Assignments,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchReport {
    /// Completed trials in index order.
    pub trials: Vec<Trial>,
    pub failures: Vec<FailedTrial>,
    /// Position in `trials` of the highest validation score.
    pub best: usize,
    /// The selected model re-evaluated on the test benchmarks.
    pub test_report: Option<EvalReport>,
}

impl SearchReport {
    pub fn best_trial(&self) -> &Trial {
        &self.trials[self.best]
    }

    pub fn best_score(&self) -> f64 {
        self.best_trial().validation_score
    }

    /// `trial seed status validation assignments` rows, tab-separated.
    pub fn to_tsv(&self) -> String {
        let fmt_assign = |a: &Assignments| {
            a.iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut rows: Vec<(usize, String)> = self
            .trials
            .iter()
            .map(|t| {
                (
                    t.index,
                    format!(
                        "{}\t{}\tok\t{}\t{}",
                        t.index,
                        t.seed,
                        t.validation_score,
                        fmt_assign(&t.assignments)
                    ),
                )
            })
            .chain(self.failures.iter().map(|f| {
                (
                    f.index,
                    format!(
                        "{}\t{}\tfailed: {}\tnan\t{}",
                        f.index,
                        f.seed,
                        f.reason,
                        fmt_assign(&f.assignments)
                    ),
                )
            }))
            .collect();
        rows.sort_by_key(|(i, _)| *i);
        let mut out = String::from("trial\tseed\tstatus\tvalidation\tassignments\n");
        for (_, r) in rows {
            out.push_str(&r);
            out.push('\n');
        }
        let best = self.best_trial();
        out.push_str(&format!(
            "best\t{}\t\t{}\t\n",
            best.index, best.validation_score
        ));
        if let Some(test) = &self.test_report {
            for s in &test.scores {
                out.push_str(&format!("test\t{}\tpearson\t{}\t\n", s.dataset, s.pearson));
            }
        }
        out
    }
}

fn run_trial(
    index: usize,
    seed: u64,
    assignments: &Assignments,
    base: &HyperParams,
    data: TrainingSet<'_>,
    validation: &[EvalDataset],
) -> Result<(Trial, Model)> {
    let mut hyper = apply_assignments(base, assignments)?;
    hyper.seed = derive_seed(seed, 0);
    let (model, _) = train(&hyper, data, validation)?;
    let report = evaluate(&model, validation)?;
    Ok((
        Trial {
            index,
            seed,
            assignments: assignments.clone(),
            hyper,
            validation_score: report.average,
            dataset_scores: report.scores,
        },
        model,
    ))
}

/// Trains every configuration in parallel and reduces in index order.
fn run_trials(
    configs: &[(u64, Assignments)],
    base: &HyperParams,
    data: TrainingSet<'_>,
    validation: &[EvalDataset],
    test: &[EvalDataset],
) -> Result<SearchReport> {
    if validation.is_empty() {
        return Err(VeteError::Config(
            "search needs at least one validation dataset".into(),
        ));
    }
    let outcomes: Vec<Result<(Trial, Model)>> = configs
        .par_iter()
        .enumerate()
        .map(|(i, (seed, a))| run_trial(i, *seed, a, base, data, validation))
        .collect();

    let mut trials: Vec<Trial> = Vec::new();
    let mut failures = Vec::new();
    let mut best: Option<(usize, Model)> = None;
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok((trial, model)) => {
                let better = best
                    .as_ref()
                    .is_none_or(|(b, _)| trial.validation_score > trials[*b].validation_score);
                if better {
                    best = Some((trials.len(), model));
                }
                trials.push(trial);
            }
            Err(e) => {
                log::warn!("trial {i} failed: {e}");
                failures.push(FailedTrial {
                    index: i,
                    seed: configs[i].0,
                    assignments: configs[i].1.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    let Some((best, model)) = best else {
        return Err(VeteError::SearchFailed(configs.len()));
    };
    let test_report = if test.is_empty() {
        None
    } else {
        Some(evaluate(&model, test)?)
    };
    Ok(SearchReport {
        trials,
        failures,
        best,
        test_report,
    })
}

fn sample_configs(ranges: &[ParamRange], opts: &SearchOptions) -> Result<Vec<(u64, Assignments)>> {
    if opts.n_trials == 0 {
        return Err(VeteError::Config("n_trials must be ≥ 1".into()));
    }
    (0..opts.n_trials)
        .map(|i| {
            let seed = derive_seed(opts.master_seed, i as u64);
            let a = sample_assignments(ranges, &mut rng_from_seed(seed))?;
            apply_assignments(&opts.base, &a)?;
            Ok((seed, a))
        })
        .collect()
}

/// Samples `n_trials` configurations, trains each, selects the best by mean
/// validation Pearson and re-evaluates it on `test`.
pub fn random_search(
    ranges: &[ParamRange],
    opts: &SearchOptions,
    data: TrainingSet<'_>,
    validation: &[EvalDataset],
    test: &[EvalDataset],
) -> Result<SearchReport> {
    let configs = sample_configs(ranges, opts)?;
    run_trials(&configs, &opts.base, data, validation, test)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub value: String,
    pub report: SearchReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub param: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn best_score(&self, value: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.value == value)
            .map(|r| r.report.best_score())
    }

    /// `param value best_validation completed failed` rows.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("param\tvalue\tbest_validation\tcompleted\tfailed\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                self.param,
                r.value,
                r.report.best_score(),
                r.report.trials.len(),
                r.report.failures.len()
            ));
        }
        out
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_tsv())
    }
}

/// Samples `n_trials` base configurations once, then reruns all of them with
/// `param` forced to each value in turn.
pub fn ablation_study(
    ranges: &[ParamRange],
    param: &str,
    values: &[String],
    opts: &SearchOptions,
    data: TrainingSet<'_>,
    validation: &[EvalDataset],
) -> Result<AblationTable> {
    let param = canonical_name(param);
    if !ranges.iter().any(|r| r.name == param) {
        return Err(VeteError::Config(format!(
            "`{param}` has no range to ablate"
        )));
    }
    if values.is_empty() {
        return Err(VeteError::Config(
            "ablation needs at least one value".into(),
        ));
    }
    let base_configs = sample_configs(ranges, opts)?;
    let rows = values
        .iter()
        .map(|v| {
            let configs: Vec<(u64, Assignments)> = base_configs
                .iter()
                .map(|(seed, a)| {
                    let mut a = a.clone();
                    a.insert(param.to_string(), v.clone());
                    (*seed, a)
                })
                .collect();
            Ok(AblationRow {
                value: v.clone(),
                report: run_trials(&configs, &opts.base, data, validation, &[])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        param: param.to_string(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranges() -> Vec<ParamRange> {
        parse_ranges(
            "# comment\nlearning_rate log_uniform 1e-4 1e-1\ninit_scale uniform 0.01 0.2\n\
             encoder choice BOW_SUM\nloss choice pearson covariance\n",
        )
        .unwrap()
    }

    #[test]
    fn singleton_choice_always_wins() {
        let mut rng = rng_from_seed(3);
        for _ in 0..20 {
            let (hp, _) =
                sample_hyperparameters(&ranges(), &HyperParams::default(), &mut rng).unwrap();
            assert_eq!(hp.encoder.kind(), EncoderKind::BowSum);
        }
    }

    #[test]
    fn log_uniform_median_is_geometric_mean() {
        let r = ParamRange::log_uniform("learning_rate", 1e-4, 1e-1).unwrap();
        let mut rng = rng_from_seed(9);
        let mut draws: Vec<f64> = (0..10_000)
            .map(|_| r.sample(&mut rng).parse().unwrap())
            .collect();
        draws.sort_by(f64::total_cmp);
        let median = draws[5_000];
        assert!((2e-3..=6e-3).contains(&median), "{median}");
    }

    #[test]
    fn same_seed_same_samples() {
        let draw = |seed| {
            let mut rng = rng_from_seed(seed);
            (0..5)
                .map(|_| sample_assignments(&ranges(), &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
        assert_ne!(draw(4), draw(5));
    }

    #[test]
    fn missing_required_field_is_a_config_error() {
        let r = parse_ranges("learning_rate log_uniform 1e-4 1e-1").unwrap();
        assert!(matches!(
            sample_assignments(&r, &mut rng_from_seed(0)),
            Err(VeteError::Config(_))
        ));
    }

    #[test]
    fn malformed_ranges_are_rejected() {
        for bad in [
            "learning_rate log_uniform 1e-1 1e-4",
            "learning_rate log_uniform 0 1",
            "init_scale uniform 1",
            "encoder choice",
            "colour choice red",
            "learning_rate gaussian 0 1",
        ] {
            assert!(parse_ranges(bad).is_err(), "{bad}");
        }
        assert!(parse_ranges("epochs choice 1\nepochs choice 2").is_err());
    }

    #[test]
    fn assignments_override_only_their_fields() {
        let base = HyperParams {
            embedding_dim: 8,
            ..HyperParams::default()
        };
        let a: Assignments = [
            ("encoder", "RNN_GRU"),
            ("hidden", "6"),
            ("loss", "skt"),
            ("skt_alpha", "3"),
            ("batch_size", "15.6"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        let hp = apply_assignments(&base, &a).unwrap();
        assert_eq!(
            hp.encoder,
            EncoderSpec::from_kind(EncoderKind::RnnGru, 1, 6)
        );
        assert_eq!(hp.loss.kind, LossKind::Skt { alpha: 3.0 });
        assert_eq!(hp.batch_size, 16);
        assert_eq!(hp.learning_rate, base.learning_rate);
    }
}
