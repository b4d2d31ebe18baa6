//! The `vete` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
//! failure.

pub mod export;
pub mod synth;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use indexmap::IndexSet;

use crate::contrastive::{LossSpec, DEFAULT_EPSILON, DEFAULT_RANK_MARGIN, DEFAULT_SKT_ALPHA};
use crate::corpus::{
    build_vocabulary, filter_one_caption_per_image, load_image_features, read_captions,
    split_dataset, tokenize, write_captions, CaptionRecord, SplitSpec,
};
use crate::encoders::{EncoderKind, EncoderSpec};
use crate::error::{ErrorCategory, Result, VeteError};
use crate::eval::{
    build_binary_pair_set, evaluate, load_binary_pairs, load_sts, write_binary_pairs, EvalDataset,
    DEFAULT_STS_RANGE,
};
use crate::optim::{
    gradient_check_grid, load_checkpoint, save_checkpoint, train, EncodedPair, GradientClip,
    HyperParams, TrainingLevel, TrainingSet,
};
use crate::search::{ablation_study, load_ranges, random_search, SearchOptions};

pub use export::{export_embeddings, load_word_vectors, ExportFormat, WordVectors};
pub use synth::{
    generate_synthetic_dataset, write_synthetic_dataset, SyntheticData, SyntheticPaths,
    SyntheticSpec,
};

#[derive(Debug, Parser)]
#[command(
    name = "vete",
    version,
    about = "Sentence embeddings trained against image features",
    arg_required_else_help = true
)]
struct Cli {
    /// Master seed; every random choice derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split a caption file into train/validation/test sets.
    Prep(PrepArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on STS and binary-pair files.
    Eval(EvalArgs),
    /// Random hyperparameter search.
    Search(SearchArgs),
    /// Vary one hyperparameter over shared sampled configurations.
    Ablate(AblateArgs),
    /// Write word or sentence vectors from a checkpoint.
    Export(ExportArgs),
    /// Generate a synthetic corpus with known ground truth.
    Synth(SynthArgs),
    /// Compare analytic and numerical gradients for every encoder and loss.
    CheckGrads(CheckGradsArgs),
}

#[derive(Debug, Args)]
struct PrepArgs {
    #[arg(long)]
    captions: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    split: Vec<f64>,
    /// Keep every caption of a training image instead of only the first.
    #[arg(long)]
    all_captions: bool,
    /// Also sample this many related and unrelated test caption pairs.
    #[arg(long, default_value_t = 0)]
    binary_pairs: usize,
}

#[derive(Debug, Args)]
struct HyperArgs {
    #[arg(long, default_value = "BOW_MEAN")]
    encoder: EncoderKind,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    /// RNN/CNN hidden width; defaults to the embedding dimension.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long, default_value_t = crate::optim::DEFAULT_EMBEDDING_DIM)]
    dim: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    lr_decay: f64,
    #[arg(long, default_value_t = 0.1)]
    init_scale: f64,
    /// pearson, covariance, skt or rank.
    #[arg(long, default_value = "pearson")]
    loss: String,
    #[arg(long, default_value_t = DEFAULT_SKT_ALPHA)]
    skt_alpha: f64,
    #[arg(long, default_value_t = DEFAULT_RANK_MARGIN)]
    rank_margin: f64,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    /// sentence or word.
    #[arg(long, default_value = "sentence")]
    level: TrainingLevel,
    /// auto, off, or a maximum global gradient norm.
    #[arg(long, default_value = "auto")]
    clip: String,
    /// L2-normalize sentence embeddings.
    #[arg(long)]
    normalize: bool,
}

impl HyperArgs {
    fn to_hyper(&self, seed: u64) -> Result<HyperParams> {
        let clip = match self.clip.as_str() {
            "auto" => GradientClip::Auto,
            "off" => GradientClip::Off,
            v => GradientClip::Norm(
                v.parse()
                    .map_err(|_| VeteError::Config(format!("bad --clip value `{v}`")))?,
            ),
        };
        let mut encoder =
            EncoderSpec::from_kind(self.encoder, self.layers, self.hidden.unwrap_or(self.dim));
        encoder.normalize_output = self.normalize;
        let mut loss = LossSpec::from_name(&self.loss, self.skt_alpha, self.rank_margin)?;
        loss.epsilon = self.epsilon;
        let hp = HyperParams {
            embedding_dim: self.dim,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            lr_decay: self.lr_decay,
            init_scale: self.init_scale,
            epochs: self.epochs,
            encoder,
            loss,
            seed,
            training_level: self.level,
            clip,
        };
        hp.validate()?;
        Ok(hp)
    }
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Training captions, `image_id<TAB>caption` per line.
    #[arg(long)]
    captions: PathBuf,
    /// Image features in the binary feature format.
    #[arg(long)]
    features: PathBuf,
    /// Drop tokens seen fewer times than this from the vocabulary.
    #[arg(long, default_value_t = 1)]
    min_count: usize,
}

#[derive(Debug, Args)]
struct ValArgs {
    /// Validation STS files.
    #[arg(long, value_delimiter = ',')]
    val_sts: Vec<PathBuf>,
    /// Validation binary-pair files.
    #[arg(long, value_delimiter = ',')]
    val_binary: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    val: ValArgs,
    /// Checkpoint to write.
    #[arg(long, visible_alias = "checkpoint-out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, visible_alias = "checkpoint-in")]
    model: PathBuf,
    #[arg(long, value_delimiter = ',')]
    sts: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    binary: Vec<PathBuf>,
    /// Write the report here instead of standard output.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    val: ValArgs,
    #[arg(long)]
    ranges: PathBuf,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Test STS files scored with the selected model.
    #[arg(long, value_delimiter = ',')]
    test_sts: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    test_binary: Vec<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    val: ValArgs,
    #[arg(long)]
    ranges: PathBuf,
    #[arg(long)]
    param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[arg(long, default_value_t = 100)]
    sets: usize,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long, visible_alias = "checkpoint-in")]
    model: PathBuf,
    /// word-vectors or sentence-vectors.
    #[arg(long, default_value = "word-vectors")]
    format: ExportFormat,
    #[arg(long)]
    out: PathBuf,
    /// Sentences to embed, one per line.
    #[arg(long)]
    sentences: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    vocab: usize,
    #[arg(long, default_value_t = 8)]
    concepts: usize,
    #[arg(long, default_value_t = 4)]
    min_len: usize,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    #[arg(long, default_value_t = 2000)]
    examples: usize,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 400)]
    sts_pairs: usize,
    #[arg(long, default_value_t = 300)]
    binary_pairs: usize,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct CheckGradsArgs {
    #[arg(long, default_value_t = 5)]
    instances: usize,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

/// Process exit code for an error.
pub fn exit_code(e: &VeteError) -> i32 {
    match e.category() {
        ErrorCategory::Usage => 1,
        ErrorCategory::Data => 2,
        ErrorCategory::Numerical => 3,
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: Cli) -> Result<i32> {
    let seed = cli.seed;
    let done = |r: Result<()>| r.map(|()| 0);
    match cli.command {
        Command::Prep(a) => done(prep(a, seed)),
        Command::Train(a) => done(train_cmd(a, seed)),
        Command::Eval(a) => done(eval_cmd(a)),
        Command::Search(a) => done(search_cmd(a, seed)),
        Command::Ablate(a) => done(ablate_cmd(a, seed)),
        Command::Export(a) => done(export_cmd(a)),
        Command::Synth(a) => done(synth_cmd(a, seed)),
        Command::CheckGrads(a) => check_grads(a, seed),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| VeteError::io(path, e))
}

fn emit(report: Option<&Path>, contents: &str) -> Result<()> {
    match report {
        Some(p) => write_file(p, contents),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn load_datasets(sts: &[PathBuf], binary: &[PathBuf]) -> Result<Vec<EvalDataset>> {
    let mut out = Vec::new();
    for p in sts {
        out.push(EvalDataset::Sts(load_sts(p, DEFAULT_STS_RANGE)?));
    }
    for p in binary {
        out.push(EvalDataset::Binary(load_binary_pairs(p)?));
    }
    Ok(out)
}

fn prep(a: PrepArgs, seed: u64) -> Result<()> {
    let [train_f, val_f, test_f] = a.split[..] else {
        return Err(VeteError::Config("--split needs three fractions".into()));
    };
    let spec = SplitSpec::new(train_f, val_f, test_f, seed)?;
    let records = read_captions(&a.captions)?;
    let images: Vec<&str> = records
        .iter()
        .map(|r| r.image_id.as_str())
        .collect::<IndexSet<_>>()
        .into_iter()
        .collect();
    // Split by image so no image contributes to two partitions.
    let (train_ids, val_ids, test_ids) = split_dataset(&images, &spec)?;
    let select = |ids: &[&str]| -> Vec<CaptionRecord> {
        let ids: IndexSet<&str> = ids.iter().copied().collect();
        records
            .iter()
            .filter(|r| ids.contains(r.image_id.as_str()))
            .cloned()
            .collect()
    };
    let mut train_set = select(&train_ids);
    if !a.all_captions {
        train_set = filter_one_caption_per_image(&train_set);
    }
    let test_set = select(&test_ids);
    fs::create_dir_all(&a.out_dir).map_err(|e| VeteError::io(&a.out_dir, e))?;
    write_captions(a.out_dir.join("train.tsv"), &train_set)?;
    write_captions(a.out_dir.join("val.tsv"), &select(&val_ids))?;
    write_captions(a.out_dir.join("test.tsv"), &test_set)?;
    if a.binary_pairs > 0 {
        let set = build_binary_pair_set(
            "test_binary",
            &test_set,
            a.binary_pairs,
            a.binary_pairs,
            seed,
        )?;
        write_binary_pairs(a.out_dir.join("test_binary.tsv"), &set)?;
    }
    println!(
        "train\t{}\nval\t{}\ntest\t{}",
        train_set.len(),
        val_ids.len(),
        test_set.len()
    );
    Ok(())
}

struct Loaded {
    vocab: crate::corpus::Vocabulary,
    features: crate::corpus::FeatureTable,
    pairs: Vec<EncodedPair>,
}

fn load_training(d: &DataArgs) -> Result<Loaded> {
    if d.min_count < 1 {
        return Err(VeteError::Config("--min-count must be ≥ 1".into()));
    }
    let records = read_captions(&d.captions)?;
    let seqs = records
        .iter()
        .map(|r| tokenize(&r.caption))
        .collect::<Result<Vec<_>>>()?;
    let vocab = build_vocabulary(&seqs, d.min_count);
    let features = load_image_features(&d.features)?;
    let pairs = EncodedPair::from_records(&records, &vocab)?;
    Ok(Loaded {
        vocab,
        features,
        pairs,
    })
}

impl Loaded {
    fn set(&self) -> TrainingSet<'_> {
        TrainingSet {
            vocab: &self.vocab,
            features: &self.features,
            pairs: &self.pairs,
        }
    }
}

fn train_cmd(a: TrainArgs, seed: u64) -> Result<()> {
    let hyper = a.hyper.to_hyper(seed)?;
    let data = load_training(&a.data)?;
    let validation = load_datasets(&a.val.val_sts, &a.val.val_binary)?;
    let (model, history) = train(&hyper, data.set(), &validation)?;
    println!("epoch\tmean_loss\tval_metric\tskipped_batches\tseconds");
    for e in &history.epochs {
        println!("{}", e.log_line());
    }
    save_checkpoint(&model, &a.out)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&a.model)?;
    let datasets = load_datasets(&a.sts, &a.binary)?;
    let report = evaluate(&model, &datasets)?;
    emit(a.report.as_deref(), &report.to_tsv())
}

fn search_cmd(a: SearchArgs, seed: u64) -> Result<()> {
    let ranges = load_ranges(&a.ranges)?;
    let opts = SearchOptions {
        n_trials: a.trials,
        master_seed: seed,
        base: a.hyper.to_hyper(seed)?,
    };
    let data = load_training(&a.data)?;
    let validation = load_datasets(&a.val.val_sts, &a.val.val_binary)?;
    let test = load_datasets(&a.test_sts, &a.test_binary)?;
    let report = random_search(&ranges, &opts, data.set(), &validation, &test)?;
    emit(a.report.as_deref(), &report.to_tsv())
}

fn ablate_cmd(a: AblateArgs, seed: u64) -> Result<()> {
    let ranges = load_ranges(&a.ranges)?;
    let opts = SearchOptions {
        n_trials: a.sets,
        master_seed: seed,
        base: a.hyper.to_hyper(seed)?,
    };
    let data = load_training(&a.data)?;
    let validation = load_datasets(&a.val.val_sts, &a.val.val_binary)?;
    let table = ablation_study(&ranges, &a.param, &a.values, &opts, data.set(), &validation)?;
    emit(a.report.as_deref(), &table.to_tsv())
}

fn export_cmd(a: ExportArgs) -> Result<()> {
    let model = load_checkpoint(&a.model)?;
    let sentences = match (&a.sentences, a.format) {
        (Some(p), _) => fs::read_to_string(p)
            .map_err(|e| VeteError::io(p, e))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(String::from)
            .collect(),
        (None, ExportFormat::SentenceVectorsTsv) => {
            return Err(VeteError::Config(
                "sentence export needs --sentences".into(),
            ))
        }
        (None, _) => Vec::new(),
    };
    export_embeddings(&model, a.format, &a.out, &sentences)
}

fn synth_cmd(a: SynthArgs, seed: u64) -> Result<()> {
    let spec = SyntheticSpec {
        vocab_size: a.vocab,
        concepts: a.concepts,
        caption_length: (a.min_len, a.max_len),
        n_examples: a.examples,
        feature_dim: a.feature_dim,
        noise_sigma: a.noise,
        n_sts: a.sts_pairs,
        n_binary: a.binary_pairs,
        seed,
    };
    let data = generate_synthetic_dataset(&spec)?;
    let paths = write_synthetic_dataset(&data, &a.out_dir)?;
    for p in [
        &paths.captions,
        &paths.features,
        &paths.sts,
        &paths.sts_validation,
        &paths.binary,
    ] {
        println!("{}", p.display());
    }
    Ok(())
}

/// Exit status 3 when any combination exceeds the tolerance.
fn check_grads(a: CheckGradsArgs, seed: u64) -> Result<i32> {
    let results = gradient_check_grid(a.instances, a.h, seed)?;
    let mut ok = true;
    println!("encoder\tloss\tmax_rel_error\tstatus");
    for r in &results {
        let pass = r.max_error < a.tolerance;
        ok &= pass;
        println!(
            "{}\t{}\t{:.3e}\t{}",
            r.encoder,
            r.loss.kind,
            r.max_error,
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(if ok { 0 } else { 3 })
}
