mod common;

use std::fs;
use std::path::Path;

use prbench_core::data::{load_mnist_dir, load_mnist_idx, Split};
use prbench_core::harness::{
    eval_checkpoint, read_report, run_experiment, CHECKPOINT_FILE, LOG_FILE, REPORT_FILE, TIMING_FILE,
};
use prbench_core::leaderboard::{build_leaderboard, collect_reports, export_leaderboard, Weights, CSV_HEADER};
use prbench_core::trainers::EpochRecord;
use prbench_core::{Error, ExperimentConfig};

const BASE: &str = r#"
seed = 5
data.kind = "linear"
data.train_size = 300
data.test_size = 200
model.layers = [16]
train.epochs = 20
train.lr = 0.5
train.batch_size = 25
eval.attacks = ["pgd10"]
eval.samples = 50
eval.train_subset = 100
eval.nu_points = 5
eval.nu_samples = 20
"#;

fn key(line: &str) -> &str {
    line.split('=').next().unwrap_or("").trim()
}

/// [`BASE`] with `extra` lines replacing same-keyed ones.
fn config(method: &str, extra: &str) -> ExperimentConfig {
    let kept: Vec<&str> = BASE
        .lines()
        .filter(|l| !extra.lines().any(|e| key(e) == key(l)))
        .collect();
    let text = format!("{}\ntrain.method = \"{method}\"\n{extra}", kept.join("\n"));
    ExperimentConfig::parse(&text, None).unwrap()
}

#[test]
fn erm_run_writes_all_artifacts() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config("erm", "");
    let run = run_experiment(&cfg, out.path()).unwrap();
    assert_eq!(run.dir, out.path().join(cfg.hash()));
    assert!(run.report.clean_accuracy >= 0.99, "{}", run.report.clean_accuracy);
    for f in [CHECKPOINT_FILE, LOG_FILE, REPORT_FILE, TIMING_FILE] {
        assert!(run.dir.join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(run.dir.join(LOG_FILE)).unwrap();
    let records: Vec<EpochRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 20);
    assert!(records.iter().enumerate().all(|(i, r)| r.epoch == i));

    let report = read_report(&run.dir.join(REPORT_FILE)).unwrap();
    assert_eq!(report.method, "erm");
    assert_eq!(report.config_hash, cfg.hash());
    assert_eq!(report.seconds_per_epoch, Some(run.timing.seconds_per_epoch));
    assert_eq!(report.adversarial.len(), 1);
    assert!(report.adversarial[0].accuracy <= report.clean_accuracy);
    assert!(report.ge.iter().any(|g| g.metric == "clean"));
}

#[test]
fn reruns_give_byte_identical_reports() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config("corruption", "train.epochs = 3\n");
    let a = run_experiment(&cfg, out.path()).unwrap();
    let first = fs::read(a.dir.join(REPORT_FILE)).unwrap();
    let ckpt = fs::read(a.dir.join(CHECKPOINT_FILE)).unwrap();
    let b = run_experiment(&cfg, out.path()).unwrap();
    assert_eq!(first, fs::read(b.dir.join(REPORT_FILE)).unwrap());
    assert_eq!(ckpt, fs::read(b.dir.join(CHECKPOINT_FILE)).unwrap());
}

#[test]
fn seed_override_changes_the_run_directory() {
    let text = format!("{BASE}train.method = \"erm\"\n");
    let a = ExperimentConfig::parse(&text, None).unwrap();
    let b = ExperimentConfig::parse(&text, Some(6)).unwrap();
    assert_eq!(b.seed, 6);
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn failed_runs_leave_no_directory() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config("erm", "train.lr = 1e300\ntrain.momentum = 0.0\ntrain.epochs = 2\n");
    let err = run_experiment(&cfg, out.path()).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert_eq!(err.exit_code(), 4);
    assert!(!out.path().join(cfg.hash()).exists());
}

#[test]
fn config_errors_name_the_field() {
    let err = ExperimentConfig::parse("data.kind = \"linear\"\n", None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("method"), "{err}");
    let err = ExperimentConfig::parse(&format!("{BASE}train.method = \"sgd-magic\"\n"), None).unwrap_err();
    assert!(err.to_string().contains("train.method"), "{err}");
}

#[test]
fn checkpoint_evaluation_matches_the_training_report() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config("erm", "train.epochs = 4\n");
    let run = run_experiment(&cfg, out.path()).unwrap();
    let eval_dir = out.path().join("eval");
    let report = eval_checkpoint(&run.dir.join(CHECKPOINT_FILE), &cfg, &eval_dir).unwrap();
    let mut trained = run.report.clone();
    trained.seconds_per_epoch = None;
    assert_eq!(report, trained);
    assert!(eval_dir.join(REPORT_FILE).is_file());

    let other = ExperimentConfig::parse(
        "data.kind = \"mnist\"\ndata.path = \"/nonexistent\"\ntrain.method = \"erm\"\n",
        None,
    )
    .unwrap();
    assert!(eval_checkpoint(&run.dir.join(CHECKPOINT_FILE), &other, &eval_dir).is_err());
}

#[test]
fn two_runs_make_a_two_row_leaderboard() {
    let out = tempfile::tempdir().unwrap();
    let erm = run_experiment(&config("erm", "train.epochs = 3\n"), out.path()).unwrap();
    let noisy = run_experiment(&config("corruption", "train.epochs = 3\n"), out.path()).unwrap();
    let board = export_leaderboard(out.path(), &Weights::default(), &out.path().join("board")).unwrap();
    assert_eq!(board.rows().count(), 2);
    let csv = fs::read_to_string(out.path().join("board.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], CSV_HEADER.join(","));
    for hash in [&erm.report.config_hash, &noisy.report.config_hash] {
        assert!(csv.contains(hash.as_str()));
    }
    assert!(out.path().join("board.json").is_file());
    let html = fs::read_to_string(out.path().join("board.html")).unwrap();
    assert!(html.contains("<table") && html.contains("corruption"));
}

#[test]
fn single_report_groups_are_skipped() {
    let out = tempfile::tempdir().unwrap();
    run_experiment(&config("erm", "train.epochs = 1\n"), out.path()).unwrap();
    let reports = collect_reports(out.path()).unwrap();
    assert_eq!(reports.len(), 1);
    let board = build_leaderboard(&reports, &Weights::default()).unwrap();
    assert_eq!(board.rows().count(), 0);
    assert_eq!(board.skipped.len(), 1);
    let empty = tempfile::tempdir().unwrap();
    assert!(collect_reports(empty.path()).is_err());
}

fn write_idx(dir: &Path, name: &str, header: &[u32], payload: usize) {
    let mut bytes: Vec<u8> = header.iter().flat_map(|v| v.to_be_bytes()).collect();
    bytes.extend(std::iter::repeat_n(7u8, payload));
    fs::write(dir.join(name), bytes).unwrap();
}

#[test]
fn idx_loader_checks_headers() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    write_idx(p, "img", &[2051, 3, 2, 2], 12);
    write_idx(p, "lbl", &[2049, 3], 3);
    let ds = load_mnist_idx(&p.join("img"), &p.join("lbl"), Split::Test).unwrap();
    assert_eq!(ds.x.shape(), &[3, 1, 2, 2]);
    assert_eq!(ds.x.data()[0], 7.0 / 255.0);

    write_idx(p, "bad", &[2052, 3, 2, 2], 12);
    let e = load_mnist_idx(&p.join("bad"), &p.join("lbl"), Split::Test).unwrap_err();
    assert!(matches!(e, Error::BadMagic { .. }) && e.exit_code() == 3, "{e}");

    write_idx(p, "short", &[2051, 3, 2, 2], 11);
    let e = load_mnist_idx(&p.join("short"), &p.join("lbl"), Split::Test).unwrap_err();
    assert!(matches!(e, Error::Truncated { .. }), "{e}");

    write_idx(p, "long", &[2051, 3, 2, 2], 13);
    let e = load_mnist_idx(&p.join("long"), &p.join("lbl"), Split::Test).unwrap_err();
    assert!(matches!(e, Error::DimMismatch { .. }), "{e}");

    write_idx(p, "lbl2", &[2049, 2], 2);
    let e = load_mnist_idx(&p.join("img"), &p.join("lbl2"), Split::Test).unwrap_err();
    assert!(matches!(e, Error::DimMismatch { .. }), "{e}");
}

#[test]
fn official_mnist_files_have_the_published_shapes() {
    let Ok(dir) = std::env::var("PRBENCH_DATA") else {
        eprintln!("PRBENCH_DATA not set; skipping");
        return;
    };
    let train = load_mnist_dir(Path::new(&dir), Split::Train).unwrap();
    let test = load_mnist_dir(Path::new(&dir), Split::Test).unwrap();
    assert_eq!(train.x.shape(), &[60_000, 1, 28, 28]);
    assert_eq!(test.x.shape(), &[10_000, 1, 28, 28]);
    assert!(train.y.iter().chain(&test.y).all(|&c| c < 10));
    assert!(prbench_core::perturbation::Bounds::UNIT.contains(&test.x));
}

#[test]
fn leaderboard_weights_parse_both_forms() {
    let a = Weights::parse("1,2,3,4,5,6").unwrap();
    let b = Weights::parse("accuracy=1,ar=2,pr=3,prob_acc=4,ge=5,time=6").unwrap();
    assert_eq!(a, b);
    assert!(Weights::parse("1,2,3").is_err());
    assert!(Weights::parse("speed=2").is_err());
    assert!(Weights::parse("0,0,0,0,0,0").is_err());
}

#[test]
fn fixture_leaderboard_reproduces_frozen_scores() {
    let board = build_leaderboard(&common::table3_reports(), &Weights::default()).unwrap();
    let rows: Vec<_> = board.rows().collect();
    assert_eq!(rows.len(), common::TABLE3_SCORES.len());
    for (row, (method, score)) in rows.iter().zip(common::TABLE3_SCORES) {
        assert_eq!(row.method, method);
        assert!((row.score - score).abs() < 1e-9, "{method}: {} vs {score}", row.score);
    }
}
