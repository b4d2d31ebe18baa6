use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn vete(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vete"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, seed: &str) -> Output {
    vete(&[
        "--seed",
        seed,
        "synth",
        "--vocab",
        "50",
        "--examples",
        "2000",
        "--out-dir",
        p(dir),
    ])
}

#[test]
fn no_arguments_prints_usage_and_exits_1() {
    let out = vete(&[]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_subcommand_exits_1() {
    let out = vete(&["frobnicate"]);
    assert_eq!(code(&out), 1);
    assert!(!out.stderr.is_empty());
}

#[test]
fn help_exits_0() {
    assert_eq!(code(&vete(&["--help"])), 0);
    assert_eq!(code(&vete(&["train", "--help"])), 0);
}

#[test]
fn synth_train_eval_export_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let started = Instant::now();
    assert_eq!(code(&synth(d, "1")), 0);

    let model = d.join("model.vetm");
    let out = vete(&[
        "--seed",
        "1",
        "train",
        "--captions",
        p(&d.join("captions.tsv")),
        "--features",
        p(&d.join("features.vetf")),
        "--dim",
        "16",
        "--batch-size",
        "32",
        "--epochs",
        "10",
        "--lr",
        "0.01",
        "--val-sts",
        p(&d.join("sts_val.tsv")),
        "--out",
        p(&model),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = String::from_utf8(out.stdout).unwrap();
    assert_eq!(log.lines().count(), 11, "{log}");

    let report = d.join("report.tsv");
    let out = vete(&[
        "eval",
        "--model",
        p(&model),
        "--sts",
        p(&d.join("sts.tsv")),
        "--binary",
        p(&d.join("binary.tsv")),
        "--report",
        p(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(started.elapsed().as_secs() < 60);
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("dataset\tmetric\tvalue\n"));
    assert!(text.contains("binary\tauc\t"));

    let vectors = d.join("words.txt");
    assert_eq!(
        code(&vete(&[
            "export",
            "--model",
            p(&model),
            "--out",
            p(&vectors)
        ])),
        0
    );
    let first = fs::read_to_string(&vectors).unwrap();
    assert!(first.lines().next().unwrap().ends_with(" 16"));

    let sentences = d.join("sentences.txt");
    fs::write(&sentences, "w1 w2 w3\nw4 w5\n").unwrap();
    let tsv = d.join("sentences.tsv");
    let out = vete(&[
        "export",
        "--model",
        p(&model),
        "--format",
        "sentence-vectors",
        "--sentences",
        p(&sentences),
        "--out",
        p(&tsv),
    ]);
    assert_eq!(code(&out), 0);
    let rows = fs::read_to_string(&tsv).unwrap();
    assert_eq!(rows.lines().count(), 2);
    assert_eq!(
        rows.lines()
            .next()
            .unwrap()
            .split('\t')
            .nth(1)
            .unwrap()
            .split(',')
            .count(),
        16
    );
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    for d in [a.path(), b.path()] {
        assert_eq!(code(&synth(d, "4")), 0);
    }
    assert_eq!(code(&synth(c.path(), "5")), 0);
    for f in [
        "captions.tsv",
        "features.vetf",
        "sts.tsv",
        "sts_val.tsv",
        "binary.tsv",
    ] {
        let x = fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, fs::read(b.path().join(f)).unwrap(), "{f}");
        assert_ne!(x, fs::read(c.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn check_grads_passes() {
    let out = vete(&["check-grads", "--instances", "2"]);
    assert_eq!(code(&out), 0);
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().filter(|l| l.ends_with("\tok")).count(), 20);
}

#[test]
fn check_grads_reports_failure_with_exit_3() {
    let out = vete(&["check-grads", "--instances", "1", "--tolerance", "1e-30"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn corrupt_features_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&synth(d, "2")), 0);
    let features = d.join("features.vetf");
    let bytes = fs::read(&features).unwrap();
    fs::write(&features, &bytes[..bytes.len() - 3]).unwrap();
    let out = vete(&[
        "train",
        "--captions",
        p(&d.join("captions.tsv")),
        "--features",
        p(&features),
        "--out",
        p(&d.join("m.vetm")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte"));
}

#[test]
fn word_level_rnn_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&synth(d, "3")), 0);
    let out = vete(&[
        "train",
        "--captions",
        p(&d.join("captions.tsv")),
        "--features",
        p(&d.join("features.vetf")),
        "--encoder",
        "RNN_GRU",
        "--level",
        "word",
        "--out",
        p(&d.join("m.vetm")),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn search_and_ablate_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        code(&vete(&[
            "--seed",
            "6",
            "synth",
            "--examples",
            "300",
            "--sts-pairs",
            "60",
            "--binary-pairs",
            "30",
            "--out-dir",
            p(d),
        ])),
        0
    );
    let ranges = d.join("ranges.txt");
    fs::write(
        &ranges,
        "learning_rate log_uniform 1e-3 1e-1\ninit_scale uniform 0.05 0.2\nloss choice pearson covariance\n",
    )
    .unwrap();
    let (captions, features, val) = (
        d.join("captions.tsv"),
        d.join("features.vetf"),
        d.join("sts_val.tsv"),
    );
    let common = [
        "--captions",
        p(&captions),
        "--features",
        p(&features),
        "--val-sts",
        p(&val),
        "--dim",
        "8",
        "--epochs",
        "2",
        "--ranges",
        p(&ranges),
    ];

    let report = d.join("search.tsv");
    let mut args = vec![
        "--seed",
        "6",
        "search",
        "--trials",
        "3",
        "--report",
        p(&report),
    ];
    args.extend(common);
    assert_eq!(code(&vete(&args)), 0);
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(
        text.lines().filter(|l| l.contains("\tok\t")).count(),
        3,
        "{text}"
    );

    let table = d.join("ablate.tsv");
    let mut args = vec![
        "--seed",
        "6",
        "ablate",
        "--param",
        "loss",
        "--values",
        "pearson,covariance",
        "--sets",
        "2",
        "--report",
        p(&table),
    ];
    args.extend(common);
    assert_eq!(code(&vete(&args)), 0);
    let text = fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().count(), 3, "{text}");
}

#[test]
fn prep_splits_by_image() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let captions = d.join("all.tsv");
    let text: String = (0..50)
        .flat_map(|i| (0..3).map(move |k| format!("img{i}\tcaption {k} of image {i}\n")))
        .collect();
    fs::write(&captions, text).unwrap();
    let out_dir = d.join("split");
    let out = vete(&[
        "--seed",
        "3",
        "prep",
        "--captions",
        p(&captions),
        "--out-dir",
        p(&out_dir),
        "--binary-pairs",
        "5",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let images = |f: &str| -> Vec<String> {
        fs::read_to_string(out_dir.join(f))
            .unwrap()
            .lines()
            .map(|l| l.split('\t').next().unwrap().to_string())
            .collect()
    };
    let (train, val, test) = (images("train.tsv"), images("val.tsv"), images("test.tsv"));
    assert_eq!(train.len(), 40);
    assert_eq!(val.len(), 15);
    assert_eq!(test.len(), 15);
    assert!(train.iter().all(|i| !val.contains(i) && !test.contains(i)));
    assert!(val.iter().all(|i| !test.contains(i)));
    assert!(out_dir.join("test_binary.tsv").exists());
}
