use std::path::Path;
use std::process::Command;

use ddetect::models::{encode_checkpoint, ClassifierModel};
use ddetect::synthesis::SynthesisConfig;
use ddetect_cli::bench::{cli_bench, run_bench};
use ddetect_cli::config::ExperimentConfig;
use ddetect_cli::report::{mean_std, rows_from_csv, REPORT_CSV_HEADER};
use ddetect_cli::sweep::{cli_sweep_lambda, SWEEP_CSV_HEADER};
use ddetect_cli::HarnessError;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ddetect"))
}

/// A shrunken benchmark that still exercises every moving part.
fn small_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.dataset.train_per_class = 40;
    c.dataset.test_per_class = 20;
    c.training.epochs = 6;
    c.distillation.train.epochs = 6;
    c.synthesis = SynthesisConfig {
        epochs: 60,
        ..SynthesisConfig::default()
    };
    c.seeds = vec![0, 1];
    c.n_values = vec![1, 10];
    c.methods
        .retain(|m| ["Ours (KL)", "Ours (ACS)", "OOD Filter + KL", "Oracle"].contains(&m.name.as_str()));
    c
}

fn write_config(dir: &Path, config: &ExperimentConfig) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, config.to_json()).unwrap();
    path
}

#[test]
fn report_rows_are_seed_means() {
    let config = small_config();
    let outcome = run_bench(&config).unwrap();
    assert!(outcome.failures.is_empty());
    // set-level methods are skipped at N = 1
    assert!(!outcome
        .rows
        .iter()
        .any(|r| r.method == "Ours (ACS)" && r.input_size == 1));
    assert!(outcome
        .rows
        .iter()
        .any(|r| r.method == "Ours (KL)" && r.input_size == 1));
    for row in &outcome.rows {
        let runs: Vec<_> = outcome
            .runs
            .iter()
            .filter(|r| r.method == row.method && r.input_size == row.input_size)
            .collect();
        assert_eq!(runs.len(), config.seeds.len());
        assert_eq!(runs[0].score_matrix.values.shape(), (9, 3));
        let accs: Vec<f64> = runs.iter().map(|r| r.accuracy.unwrap()).collect();
        let aucs: Vec<f64> = runs.iter().map(|r| r.auc.unwrap()).collect();
        let plain_mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((row.accuracy_mean - plain_mean(&accs)).abs() <= 1e-12);
        assert!((row.auc_mean - plain_mean(&aucs)).abs() <= 1e-12);
        assert_eq!(row.accuracy_std, mean_std(&accs).1);
        assert!(row.accuracy_std >= 0.0 && (0.0..=1.0).contains(&row.accuracy_mean));
    }
}

#[test]
fn bench_writes_parseable_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config();
    let outcome = cli_bench(&config, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(rows_from_csv(&text).unwrap(), outcome.rows);
    for run in &outcome.runs {
        let stem = ddetect_cli::bench::run_file_stem(run);
        let csv = std::fs::read_to_string(dir.path().join("runs").join(format!("{stem}.csv"))).unwrap();
        assert_eq!(ddetect::scores::ScoreMatrix::from_csv(&csv).unwrap(), run.score_matrix);
        let json: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("runs").join(format!("{stem}.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(json["accuracy"].as_f64(), run.accuracy);
    }
    let echoed = ExperimentConfig::load(&dir.path().join("config.json")).unwrap();
    assert_eq!(echoed, config);
}

#[test]
fn no_methods_gives_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config();
    config.methods.clear();
    cli_bench(&config, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(text, format!("{REPORT_CSV_HEADER}\n"));
}

#[test]
fn failed_runs_leave_partial_outputs_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config();
    config.seeds = vec![0];
    // an unclipped, huge step makes generator training blow up
    config.synthesis.learning_rate = 1e6;
    config.synthesis.max_grad_norm = None;
    match cli_bench(&config, dir.path()) {
        Err(HarnessError::Partial { failed, manifest }) => {
            assert!(failed > 0);
            let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(manifest).unwrap()).unwrap();
            assert!(m
                .as_array()
                .unwrap()
                .iter()
                .all(|f| f["method"].as_str().unwrap().starts_with("Ours")));
        }
        other => panic!("expected a partial failure, got {other:?}"),
    }
    let rows = rows_from_csv(&std::fs::read_to_string(dir.path().join("report.csv")).unwrap()).unwrap();
    assert!(rows.iter().any(|r| r.method == "Oracle"));
    assert!(!rows.iter().any(|r| r.method.starts_with("Ours")));
}

#[test]
fn sweep_outputs_follow_the_format() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config();
    config.seeds = vec![0];
    config.lambda_sweep.lambdas = vec![0.1, 0.9];
    let rows = cli_sweep_lambda(&config, dir.path()).unwrap();
    assert_eq!(rows.len(), 2);
    let csv = std::fs::read_to_string(dir.path().join("lambda_sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(SWEEP_CSV_HEADER));
    assert_eq!(lines.filter(|l| l.split(',').count() == 5).count(), 2);
    let svg = std::fs::read_to_string(dir.path().join("lambda_sweep.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 4);
    assert!(dir.path().join("lambda_sweep_wins.csv").exists());
}

#[test]
fn bad_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"format_version": 1, "teachers": ["missing"]}"#).unwrap();
    let out = bin()
        .args(["--config", path.to_str().unwrap(), "bench"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("teachers[0]"));
    let out = bin().args(["bench", "--nonsense"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_distill_detect_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config());
    let cfg = config.to_str().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    for (arch, out) in [("relu_64", "a.ddck"), ("tanh_32_32", "b.ddck")] {
        let status = bin()
            .args([
                "--config",
                cfg,
                "--seed",
                "1",
                "train",
                "--arch",
                arch,
                "--out",
                &p(out),
            ])
            .status()
            .unwrap();
        assert!(status.success());
    }
    let status = bin()
        .args([
            "--config",
            cfg,
            "--seed",
            "1",
            "distill",
            "--teacher",
            &p("b.ddck"),
            "--arch",
            "relu_64",
            "--out",
            &p("s.ddck"),
        ])
        .status()
        .unwrap();
    assert!(status.success());

    // the student file itself among the candidates wins
    let out = bin()
        .args([
            "--config",
            cfg,
            "detect",
            "--student",
            &p("a.ddck"),
            "--candidates",
            &p("b.ddck"),
            &p("a.ddck"),
        ])
        .args(["--n", "20", "--pairwise"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["prediction"], 1);
    assert_eq!(v["score_kind"], "point_kl");
    assert_eq!(v["pairwise"]["tests"].as_array().unwrap().len(), 2);

    let out = bin()
        .args([
            "--config",
            cfg,
            "synth",
            "--student",
            &p("s.ddck"),
            "--n",
            "12",
            "--out",
            &p("probe.csv"),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let set = ddetect::synthesis::load_input_set(Path::new(&p("probe.csv"))).unwrap();
    assert_eq!(set.inputs.shape(), (12, 8));

    // corrupt checkpoints are runtime errors naming a byte offset
    let mut bytes = std::fs::read(p("a.ddck")).unwrap();
    bytes.truncate(bytes.len() - 5);
    std::fs::write(p("broken.ddck"), bytes).unwrap();
    let out = bin()
        .args(["detect", "--student", &p("broken.ddck"), "--candidates", &p("a.ddck")])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte"));
}

#[test]
fn checkpoint_bytes_are_stable() {
    let world = ddetect_cli::world::World::build(&small_config(), 0).unwrap();
    let student: &ClassifierModel = &world.students[0].model;
    let again = ddetect::models::decode_checkpoint(&encode_checkpoint(student)).unwrap();
    assert_eq!(&again, student);
}
