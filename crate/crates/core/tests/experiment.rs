mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use common::*;
use kflaplace::curvature::CurvatureMethod;
use kflaplace::dataset::{encode_idx, make_permuted_tasks, Splits, TaskStream};
use kflaplace::experiment::{
    collect_metrics, emit_plot_data, parse_plot_data, run_on_stream, runs_from_plot_rows, sweep_on_stream,
    ExperimentConfig, Method, RunMetrics,
};
use kflaplace::Error;

fn small_config(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        num_tasks: 2,
        hidden: vec![12],
        epochs: Some(3),
        batch_size: Some(20),
        learning_rate: Some(0.01),
        train_size: None,
        out_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn small_stream(tasks: usize) -> TaskStream {
    let base = synthetic_splits(200, 60, 80, 16, 3);
    make_permuted_tasks(&base, tasks, 7, false).unwrap()
}

#[test]
fn run_writes_expected_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = run_on_stream(&cfg, &small_stream(2)).unwrap();
    for f in ["metrics.csv", "metrics.json", "config.json", "timings.json"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let ck = dir.path().join("checkpoints");
    assert!(ck.join("params-task1.kflc").is_file());
    assert!(ck.join("params-task2.kflc").is_file());
    assert!(ck.join("posterior-final.kflc").is_file());
    let reloaded = kflaplace::checkpoint::load_params(&ck.join("params-task2.kflc")).unwrap();
    assert_eq!(reloaded, out.params);

    let recs = &out.metrics.records;
    assert_eq!(recs.len(), 2);
    for (t, r) in recs.iter().enumerate() {
        assert_eq!(r.after_task, t + 1);
        assert_eq!(r.test_accuracy.len(), t + 1);
        assert!(r.test_accuracy.iter().all(|a| (0.0..=1.0).contains(a)));
        assert_eq!(r.config_hash, cfg.hash());
    }
    let cfg_back: ExperimentConfig = serde_json::from_str(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg_back, cfg);
}

#[test]
fn single_task_metrics_agree_across_methods() {
    let stream = small_stream(1);
    let mut reference: Option<RunMetrics> = None;
    for method in [Method::Online, Method::PerTask, Method::Approximate, Method::JointBaseline, Method::NoneBaseline] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            num_tasks: 1,
            method,
            ..small_config(dir.path())
        };
        let m = run_on_stream(&cfg, &stream).unwrap().metrics;
        if let Some(r) = &reference {
            assert_eq!(r.records[0].test_accuracy, m.records[0].test_accuracy, "{method:?}");
            assert_eq!(r.records[0].val_accuracy, m.records[0].val_accuracy, "{method:?}");
        } else {
            reference = Some(m);
        }
    }
}

#[test]
fn reruns_are_byte_identical() {
    let stream = small_stream(2);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for method in [Method::Online, Method::Approximate] {
        let ca = ExperimentConfig { method, ..small_config(a.path()) };
        let cb = ExperimentConfig { method, ..small_config(b.path()) };
        run_on_stream(&ca, &stream).unwrap();
        run_on_stream(&cb, &stream).unwrap();
        for f in ["metrics.csv", "metrics.json"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }
}

#[test]
fn plot_data_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_on_stream(&small_config(dir.path()), &small_stream(2)).unwrap().metrics;
    let text = emit_plot_data(std::slice::from_ref(&m)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("method,curvature,lambda,after_task,eval_task,accuracy"));
    assert_eq!(lines.count(), 3);

    let rows = parse_plot_data(&text).unwrap();
    assert!(rows.iter().all(|r| r.eval_task <= r.after_task));
    let runs = runs_from_plot_rows(&rows).unwrap();
    assert_eq!(runs.len(), 1);
    for (got, want) in runs[0].records.iter().zip(&m.records) {
        assert_eq!(got.test_accuracy, want.test_accuracy);
        assert_eq!((got.mean, got.min, got.max, got.first, got.last), (want.mean, want.min, want.max, want.first, want.last));
        let recomputed: f64 = rows
            .iter()
            .filter(|r| r.after_task == want.after_task)
            .map(|r| r.accuracy)
            .sum::<f64>()
            / want.after_task as f64;
        assert!((recomputed - want.mean).abs() < 1e-12);
    }
    assert_eq!(fs::read_to_string(dir.path().join("metrics.csv")).unwrap(), text);
}

#[test]
fn triangular_row_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { num_tasks: 4, epochs: Some(1), ..small_config(dir.path()) };
    let m = run_on_stream(&cfg, &small_stream(4)).unwrap().metrics;
    assert_eq!(parse_plot_data(&emit_plot_data(&[m]).unwrap()).unwrap().len(), 1 + 2 + 3 + 4);
}

#[test]
fn config_is_written_before_training_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        learning_rate: Some(1e300),
        ..small_config(dir.path())
    };
    let err = run_on_stream(&cfg, &small_stream(2)).err().expect("huge learning rate must diverge");
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
    assert!(dir.path().join("config.json").is_file());
    assert!(!dir.path().join("metrics.json").exists());
}

#[test]
fn sweep_selects_best_validation_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let stream = small_stream(2);
    let s = sweep_on_stream(&cfg, &[1.0, 1e4], &stream).unwrap();
    assert_eq!(s.entries.len(), 2);
    let best = s
        .entries
        .iter()
        .max_by(|a, b| a.final_val_mean.partial_cmp(&b.final_val_mean).unwrap())
        .unwrap();
    assert_eq!(s.best().final_val_mean, best.final_val_mean);
    assert!(dir.path().join("sweep.json").is_file());
    assert_eq!(collect_metrics(dir.path()).unwrap().len(), 2);

    let single_dir = tempfile::tempdir().unwrap();
    let single = sweep_on_stream(&small_config(single_dir.path()), &[3.0], &stream).unwrap();
    let direct = tempfile::tempdir().unwrap();
    let run = run_on_stream(&ExperimentConfig { lambda: 3.0, ..small_config(direct.path()) }, &stream).unwrap();
    assert_eq!(single.best_lambda, 3.0);
    assert_eq!(single.entries[0].curve, run.metrics.records.iter().map(|r| r.mean).collect::<Vec<_>>());
}

#[test]
fn sweep_gives_up_only_when_every_point_diverges() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        learning_rate: Some(1e300),
        divergence_retries: 1,
        ..small_config(dir.path())
    };
    let err = sweep_on_stream(&cfg, &[1.0, 10.0], &small_stream(2)).expect_err("every point diverges");
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
    assert!(!dir.path().join("sweep.json").exists());
}

#[test]
fn strong_penalty_retains_first_task_better() {
    let stream = small_stream(2);
    let mut first = Vec::new();
    for lambda in [1e-3, 1e4] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { lambda, epochs: Some(5), ..small_config(dir.path()) };
        first.push(run_on_stream(&cfg, &stream).unwrap().metrics.last().first);
    }
    assert!(first[1] >= first[0], "{first:?}");
}

fn write_idx_dir(dir: &Path, splits: &Splits, side: usize) {
    let (ti, tl) = encode_idx(&splits.train.images(), (side, side), splits.train.labels());
    let (si, sl) = encode_idx(&splits.test.images(), (side, side), splits.test.labels());
    fs::write(dir.join("train-images-idx3-ubyte"), ti).unwrap();
    fs::write(dir.join("train-labels-idx1-ubyte"), tl).unwrap();
    fs::write(dir.join("t10k-images-idx3-ubyte"), si).unwrap();
    fs::write(dir.join("t10k-labels-idx1-ubyte"), sl).unwrap();
}

#[test]
fn command_line_run_sweep_and_plot_data() {
    let data = tempfile::tempdir().unwrap();
    let base = synthetic_splits(260, 0, 60, 16, 9);
    write_idx_dir(data.path(), &base, 4);
    let work = tempfile::tempdir().unwrap();
    let cfg_path = work.path().join("exp.toml");
    fs::write(
        &cfg_path,
        "num_tasks = 3\nhidden = [10]\nepochs = 2\nbatch_size = 20\nvalidation_size = 60\ntrain_size = 200\ncurvature = \"diag\"\n",
    )
    .unwrap();
    let exe = env!("CARGO_BIN_EXE_kflaplace");

    let run_dir = work.path().join("run");
    let status = Command::new(exe)
        .args(["run", "--config"])
        .arg(&cfg_path)
        .args(["--method", "per-task", "--curvature", "kf", "--lambda", "3", "--tasks", "2", "--seed", "4", "--out"])
        .arg(&run_dir)
        .env("KFLAPLACE_DATA_DIR", data.path())
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    assert!(status.success());
    let m: RunMetrics = serde_json::from_str(&fs::read_to_string(run_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!((m.method, m.curvature, m.lambda, m.records.len()), (Method::PerTask, CurvatureMethod::KfFisher, 3.0, 2));
    let cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(run_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!((cfg.seed, cfg.num_tasks, cfg.epochs), (4, 2, Some(2)));

    let sweep_dir = work.path().join("sweep");
    let status = Command::new(exe)
        .args(["sweep", "--config"])
        .arg(&cfg_path)
        .args(["--lambdas", "1,30", "--tasks", "2", "--data"])
        .arg(data.path())
        .arg("--out")
        .arg(&sweep_dir)
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    assert!(status.success());
    assert!(sweep_dir.join("lambda-1/metrics.json").is_file());
    assert!(sweep_dir.join("lambda-30/metrics.json").is_file());

    let csv = work.path().join("plot.csv");
    let status = Command::new(exe)
        .args(["plot-data", "--in"])
        .arg(&sweep_dir)
        .arg("--out")
        .arg(&csv)
        .status()
        .unwrap();
    assert!(status.success());
    let rows = parse_plot_data(&fs::read_to_string(&csv).unwrap()).unwrap();
    assert_eq!(rows.len(), 6);

    let missing = Command::new(exe)
        .args(["run", "--out"])
        .arg(work.path().join("nowhere"))
        .env("KFLAPLACE_DATA_DIR", work.path().join("no-such-dir"))
        .env("RUST_LOG", "off")
        .output()
        .unwrap();
    assert!(!missing.status.success());
    assert!(!missing.stderr.is_empty());
}
