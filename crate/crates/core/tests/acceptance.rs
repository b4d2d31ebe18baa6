//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use vete::cli::synth::{
    generate_synthetic_dataset, write_synthetic_dataset, SyntheticData, SyntheticSpec,
};
use vete::cli::{export_embeddings, load_word_vectors, ExportFormat};
use vete::contrastive::{
    covariance_objective, pearson_objective, random_derangement, rank_objective, skt_objective,
    DEFAULT_EPSILON,
};
use vete::corpus::{build_vocabulary, load_image_features, read_captions, tokenize, FeatureTable};
use vete::encoders::{bow_encode, BowMode, EncoderKind, EncoderSpec};
use vete::eval::{
    evaluate, load_binary_pairs, load_sts, validation_score, EvalDataset, DEFAULT_STS_RANGE,
};
use vete::optim::{
    gradient_check_grid, load_checkpoint, read_checkpoint, save_checkpoint, train,
    write_checkpoint, EncodedPair, HyperParams, Model, TrainingLevel, TrainingSet,
};
use vete::search::{ablation_study, parse_ranges, random_search, SearchOptions};
use vete::seed::rng_from_seed;

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(limit: Duration, started: Instant) -> std::result::Result<(), String> {
    let t = started.elapsed();
    ensure(
        t < limit,
        format!("took {:.1}s, limit {}s", t.as_secs_f64(), limit.as_secs()),
    )
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// The synthetic benchmark: vocab 50, 2000 examples, feature dim 16, noise 0.05.
fn synth_spec() -> SyntheticSpec {
    SyntheticSpec {
        vocab_size: 50,
        n_examples: 2000,
        feature_dim: 16,
        noise_sigma: 0.05,
        seed: 1,
        ..SyntheticSpec::default()
    }
}

/// VETE-BOW with N=16, B=32, 10 epochs, Pearson loss.
fn bow_hyper(seed: u64) -> HyperParams {
    HyperParams {
        embedding_dim: 16,
        batch_size: 32,
        epochs: 10,
        learning_rate: 1e-2,
        init_scale: 0.1,
        encoder: EncoderSpec::bow(BowMode::Mean),
        seed,
        ..HyperParams::default()
    }
}

struct Corpus {
    vocab: vete::corpus::Vocabulary,
    features: FeatureTable,
    pairs: Vec<EncodedPair>,
}

impl Corpus {
    fn from_data(data: &SyntheticData) -> Self {
        let seqs: Vec<_> = data
            .records
            .iter()
            .map(|r| tokenize(&r.caption).unwrap())
            .collect();
        let vocab = build_vocabulary(&seqs, 1);
        let pairs = EncodedPair::from_records(&data.records, &vocab).unwrap();
        Self {
            vocab,
            features: data.features.clone(),
            pairs,
        }
    }

    fn set(&self) -> TrainingSet<'_> {
        TrainingSet {
            vocab: &self.vocab,
            features: &self.features,
            pairs: &self.pairs,
        }
    }
}

fn criterion_1() -> Check {
    let started = Instant::now();
    let grid = gradient_check_grid(5, 1e-5, 2024).map_err(err)?;
    ensure(grid.len() == 20, "grid must cover 5 encoders × 4 losses")?;
    let worst = grid
        .iter()
        .max_by(|a, b| a.max_error.total_cmp(&b.max_error))
        .unwrap();
    for g in &grid {
        ensure(
            g.max_error < 1e-4,
            format!("{} × {}: error {:.3e}", g.encoder, g.loss.kind, g.max_error),
        )?;
    }
    within(Duration::from_secs(30), started)?;
    Ok(format!(
        "20 combinations × 5 instances, worst {:.2e} ({} × {})",
        worst.max_error, worst.encoder, worst.loss.kind
    ))
}

fn kendall_tau(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += ((x[i] - x[j]) * (y[i] - y[j])).signum();
        }
    }
    s / (n * (n - 1) / 2) as f64
}

fn criterion_2() -> Check {
    let mut rng = rng_from_seed(77);
    let eps = DEFAULT_EPSILON;
    for _ in 0..100 {
        let x: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let self_rho = pearson_objective(&x, &x, eps).map_err(err)?;
        let anti_rho = pearson_objective(&x, &neg, eps).map_err(err)?;
        ensure(
            (self_rho - 1.0).abs() < 1e-12,
            format!("ρ(x,x) = {self_rho}"),
        )?;
        ensure(
            (anti_rho + 1.0).abs() < 1e-12,
            format!("ρ(x,−x) = {anti_rho}"),
        )?;

        let a = rng.random_range(0.01..100.0);
        let b = rng.random_range(-10.0..10.0);
        let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let d = (pearson_objective(&ax, &y, eps).map_err(err)?
            - pearson_objective(&x, &y, eps).map_err(err)?)
        .abs();
        ensure(d < 1e-10, format!("affine change moved ρ by {d:e}"))?;

        let alpha = rng.random_range(0.1..5.0);
        let ny: Vec<f64> = y.iter().map(|v| -v).collect();
        let s = skt_objective(&x, &y, alpha).map_err(err)?;
        ensure(
            skt_objective(&x, &ny, alpha).map_err(err)? == -s,
            "SKT not exactly antisymmetric in y",
        )?;
    }

    // Distinct entries: shuffled 0..20 with jitter, so gaps stay above 1/2.
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut distinct = || {
            let mut v: Vec<f64> = (0..20)
                .map(|i| f64::from(i) + rng.random_range(-0.25..0.25))
                .collect();
            v.shuffle(&mut rng);
            v
        };
        let (x, y) = (distinct(), distinct());
        let d = (skt_objective(&x, &y, 1000.0).map_err(err)? - kendall_tau(&x, &y)).abs();
        worst = worst.max(d);
    }
    ensure(
        worst < 1e-4,
        format!("SKT_1000 vs Kendall τ differ by {worst:e}"),
    )?;

    ensure(
        covariance_objective(&[1.0, -1.0], &[1.0, -1.0]).map_err(err)? == 1.0,
        "Cov([1,−1],[1,−1]) ≠ 1",
    )?;
    let hinge = |p: f64, n: f64| rank_objective(&[p], &[n], 0.2).unwrap();
    ensure(hinge(0.9, 0.1) == 0.0, "satisfied hinge must be 0")?;
    ensure(
        (hinge(0.1, 0.9) - 1.0).abs() < 1e-12,
        "violated hinge must be 1.0",
    )?;
    ensure(
        (hinge(0.4, 0.4) - 0.2).abs() < 1e-12,
        "tied hinge must equal γ",
    )?;
    Ok(format!(
        "identities hold; SKT_1000 vs Kendall τ max gap {worst:.1e} over 100 vector pairs"
    ))
}

fn criterion_3() -> Check {
    let mut rng = rng_from_seed(3);
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for b in [2, 3, 8] {
        for _ in 0..10_000 {
            let sigma = random_derangement(b, &mut rng).map_err(err)?;
            ensure(
                sigma.iter().enumerate().all(|(i, &s)| i != s),
                format!("fixed point at B={b}"),
            )?;
            if b == 3 {
                *counts.entry(sigma).or_default() += 1;
            }
        }
    }
    ensure(
        counts.len() == 2,
        format!("B=3 produced {} distinct derangements", counts.len()),
    )?;
    let freqs: Vec<f64> = counts.values().map(|&c| c as f64 / 10_000.0).collect();
    for f in &freqs {
        ensure((f - 0.5).abs() <= 0.05, format!("B=3 frequency {f}"))?;
    }
    Ok(format!(
        "30,000 batches fixed-point free; B=3 frequencies {:.4} / {:.4}",
        freqs[0], freqs[1]
    ))
}

/// synth → files → train → checkpoint → eval report, as the CLI does it.
struct EndToEnd {
    checkpoint: Vec<u8>,
    report: String,
    auc: f64,
    sts: f64,
}

fn end_to_end(dir: &Path) -> std::result::Result<EndToEnd, String> {
    let data = generate_synthetic_dataset(&synth_spec()).map_err(err)?;
    let paths = write_synthetic_dataset(&data, dir).map_err(err)?;

    let records = read_captions(&paths.captions).map_err(err)?;
    let seqs = records
        .iter()
        .map(|r| tokenize(&r.caption))
        .collect::<vete::Result<Vec<_>>>()
        .map_err(err)?;
    let vocab = build_vocabulary(&seqs, 1);
    let features = load_image_features(&paths.features).map_err(err)?;
    let pairs = EncodedPair::from_records(&records, &vocab).map_err(err)?;
    let set = TrainingSet {
        vocab: &vocab,
        features: &features,
        pairs: &pairs,
    };
    let (model, _) = train(&bow_hyper(1), set, &[]).map_err(err)?;
    let ckpt = dir.join("model.vetm");
    save_checkpoint(&model, &ckpt).map_err(err)?;

    let model = load_checkpoint(&ckpt).map_err(err)?;
    let datasets = vec![
        EvalDataset::Sts(load_sts(&paths.sts, DEFAULT_STS_RANGE).map_err(err)?),
        EvalDataset::Binary(load_binary_pairs(&paths.binary).map_err(err)?),
    ];
    let report = evaluate(&model, &datasets).map_err(err)?;
    Ok(EndToEnd {
        checkpoint: fs::read(&ckpt).map_err(err)?,
        report: report.to_tsv(),
        sts: report.scores[0].pearson,
        auc: report.scores[1].auc.unwrap_or(0.0),
    })
}

fn criterion_4() -> Check {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    let run = end_to_end(dir.path())?;
    ensure(
        run.auc >= 0.95,
        format!("binary-pair AUC {:.4} < 0.95", run.auc),
    )?;
    ensure(run.sts >= 0.8, format!("STS Pearson {:.4} < 0.8", run.sts))?;
    within(Duration::from_secs(60), started)?;
    Ok(format!(
        "AUC {:.4}, STS Pearson {:.4} in {:.1}s",
        run.auc,
        run.sts,
        started.elapsed().as_secs_f64()
    ))
}

fn search_ranges() -> Vec<vete::search::ParamRange> {
    parse_ranges(
        "learning_rate log_uniform 1e-3 1e-1\n\
         init_scale uniform 0.01 0.3\n\
         loss choice pearson covariance\n",
    )
    .unwrap()
}

fn criterion_5() -> Check {
    let started = Instant::now();
    let data = generate_synthetic_dataset(&synth_spec()).map_err(err)?;
    let corpus = Corpus::from_data(&data);
    let validation = [EvalDataset::Sts(data.sts_validation.clone())];
    let opts = SearchOptions {
        n_trials: 8,
        master_seed: 5,
        base: bow_hyper(0),
    };
    let values = vec!["pearson".to_string(), "covariance".to_string()];
    let table = ablation_study(
        &search_ranges(),
        "loss",
        &values,
        &opts,
        corpus.set(),
        &validation,
    )
    .map_err(err)?;
    let p = table.best_score("pearson").ok_or("no pearson row")?;
    let c = table.best_score("covariance").ok_or("no covariance row")?;
    ensure(p >= c, format!("Pearson {p:.4} < Covariance {c:.4}"))?;
    within(Duration::from_secs(600), started)?;
    Ok(format!(
        "best validation Pearson-loss {p:.4} ≥ Covariance-loss {c:.4}"
    ))
}

fn criterion_6() -> Check {
    let started = Instant::now();
    let data = generate_synthetic_dataset(&synth_spec()).map_err(err)?;
    let corpus = Corpus::from_data(&data);
    let validation = [EvalDataset::Sts(data.sts_validation.clone())];
    let score = |level| -> std::result::Result<f64, String> {
        let hp = HyperParams {
            training_level: level,
            ..bow_hyper(6)
        };
        let (m, _) = train(&hp, corpus.set(), &[]).map_err(err)?;
        validation_score(&m, &validation).map_err(err)
    };
    let sentence = score(TrainingLevel::Sentence)?;
    let word = score(TrainingLevel::Word)?;
    ensure(
        sentence - word >= 0.05,
        format!("sentence {sentence:.4} vs word {word:.4}"),
    )?;
    within(Duration::from_secs(300), started)?;
    Ok(format!(
        "sentence-level {sentence:.4} vs word-level {word:.4}"
    ))
}

fn criterion_7() -> Check {
    let (a, b) = (
        tempfile::tempdir().map_err(err)?,
        tempfile::tempdir().map_err(err)?,
    );
    let first = end_to_end(a.path())?;
    let second = end_to_end(b.path())?;
    ensure(first.checkpoint == second.checkpoint, "checkpoints differ")?;
    ensure(first.report == second.report, "evaluation reports differ")?;
    Ok(format!(
        "checkpoints ({} bytes) and reports identical across runs",
        first.checkpoint.len()
    ))
}

fn criterion_8() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let data = generate_synthetic_dataset(&synth_spec()).map_err(err)?;

    let mut f1 = Vec::new();
    data.features.write_to(&mut f1).map_err(err)?;
    let back = FeatureTable::read_from(f1.as_slice()).map_err(err)?;
    let mut f2 = Vec::new();
    back.write_to(&mut f2).map_err(err)?;
    ensure(f1 == f2, "feature file changed on round trip")?;

    let corpus = Corpus::from_data(&data);
    let mut checked = 0;
    for kind in EncoderKind::ALL {
        let hp = HyperParams {
            encoder: EncoderSpec::from_kind(kind, 1, 8),
            epochs: 1,
            ..bow_hyper(8)
        };
        let (model, _) = train(&hp, corpus.set(), &[]).map_err(err)?;
        let mut c1 = Vec::new();
        write_checkpoint(&model, &mut c1).map_err(err)?;
        let loaded: Model = read_checkpoint(c1.as_slice()).map_err(err)?;
        let mut c2 = Vec::new();
        write_checkpoint(&loaded, &mut c2).map_err(err)?;
        ensure(c1 == c2, format!("{kind} checkpoint changed on round trip"))?;

        if kind.is_bow() {
            let path = dir.path().join(format!("{kind}.txt"));
            export_embeddings(&loaded, ExportFormat::WordVectorsText, &path, &[]).map_err(err)?;
            let wv = load_word_vectors(&path).map_err(err)?;
            let mode = if kind == EncoderKind::BowSum {
                BowMode::Sum
            } else {
                BowMode::Mean
            };
            for item in data.sts.items.iter().take(100) {
                let ids = loaded.encode_text(&item.sentence_a).map_err(err)?;
                let expected = bow_encode(&loaded.encoder, &ids, mode, false).map_err(err)?;
                let mut got = vec![0.0f64; expected.len()];
                for &id in &ids {
                    let v = wv
                        .get(loaded.vocab.token(id).unwrap())
                        .ok_or("token missing")?;
                    got.iter_mut().zip(v).for_each(|(g, x)| *g += f64::from(*x));
                }
                if mode == BowMode::Mean {
                    got.iter_mut().for_each(|g| *g /= ids.len() as f64);
                }
                let scale = expected.iter().fold(1.0f64, |m, x| m.max(x.abs()));
                for (e, g) in expected.iter().zip(&got) {
                    ensure(
                        (e - g).abs() <= 1e-6 * scale,
                        format!("{kind}: exported vectors give {g}, model {e}"),
                    )?;
                }
                checked += 1;
            }
        }
    }
    Ok(format!(
        "features and 5 checkpoint kinds byte-identical; {checked} BOW encodings reproduced from exported vectors"
    ))
}

fn criterion_9() -> Check {
    let data = generate_synthetic_dataset(&synth_spec()).map_err(err)?;
    let corpus = Corpus::from_data(&data);
    let validation = [EvalDataset::Sts(data.sts_validation.clone())];
    let test = [EvalDataset::Sts(data.sts.clone())];
    let opts = SearchOptions {
        n_trials: 8,
        master_seed: 9,
        base: bow_hyper(0),
    };
    let report =
        random_search(&search_ranges(), &opts, corpus.set(), &validation, &test).map_err(err)?;
    ensure(
        report.trials.len() + report.failures.len() == 8,
        "every trial must be reported",
    )?;
    let max = report
        .trials
        .iter()
        .map(|t| t.validation_score)
        .fold(f64::NEG_INFINITY, f64::max);
    ensure(report.best_score() == max, "best score is not the maximum")?;
    ensure(
        report.test_report.is_some(),
        "selected model not re-evaluated on test",
    )?;

    let values = vec!["pearson".to_string(), "covariance".to_string()];
    let table = ablation_study(
        &search_ranges(),
        "loss",
        &values,
        &opts,
        corpus.set(),
        &validation,
    )
    .map_err(err)?;
    let (r1, r2) = (&table.rows[0].report, &table.rows[1].report);
    let mut compared = 0;
    for t1 in &r1.trials {
        let Some(t2) = r2.trials.iter().find(|t| t.index == t1.index) else {
            continue;
        };
        let strip = |a: &BTreeMap<String, String>| {
            let mut a = a.clone();
            a.remove("loss");
            a
        };
        ensure(
            t1.seed == t2.seed,
            format!("trial {} seeds differ", t1.index),
        )?;
        ensure(
            strip(&t1.assignments) == strip(&t2.assignments),
            format!("trial {} differs beyond the ablated parameter", t1.index),
        )?;
        let mut h2 = t2.hyper.clone();
        h2.loss = t1.hyper.loss;
        ensure(
            h2 == t1.hyper,
            format!("trial {} hyperparameters differ", t1.index),
        )?;
        ensure(
            t1.assignments["loss"] == "pearson" && t2.assignments["loss"] == "covariance",
            "ablated value not forced",
        )?;
        compared += 1;
    }
    ensure(compared > 0, "no paired trials to compare")?;
    Ok(format!(
        "search best {:.4} = max of {} trials; {compared} ablation pairs share configurations",
        max,
        report.trials.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("gradient correctness", criterion_1),
        ("loss identities", criterion_2),
        ("derangement", criterion_3),
        ("end-to-end synthetic learning", criterion_4),
        ("Pearson vs Covariance ablation", criterion_5),
        ("sentence vs word level", criterion_6),
        ("determinism", criterion_7),
        ("format round trips", criterion_8),
        ("protocol fidelity", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = check();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail} [{secs:.1}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {why} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
