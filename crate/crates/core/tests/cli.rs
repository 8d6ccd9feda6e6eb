use std::path::Path;
use std::process::{Command, Output};

use volseg::complexity::ComplexityReport;
use volseg::train::read_metric_log;

fn volseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volseg"))
        .args(args)
        .env("VOLSEG_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn unknown_flags_and_values_are_rejected() {
    for args in [
        &["complexity", "--frobnicate"][..],
        &["--precision", "f16", "complexity"],
        &["--format", "xml", "ablation-table"],
        &["--convention", "flops3", "complexity"],
        &["gradcheck", "--scope", "everything"],
    ] {
        let o = volseg(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(o.stdout.is_empty(), "{args:?}");
        assert!(!stderr(&o).is_empty());
    }
}

#[test]
fn help_lists_every_subcommand() {
    let o = volseg(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for cmd in [
        "complexity",
        "gradcheck",
        "train",
        "eval",
        "init-config",
        "ablation-table",
    ] {
        assert!(text.contains(cmd), "{cmd}");
    }
}

#[test]
fn bad_thread_count_is_an_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_volseg"))
        .args(["init-config"])
        .env("VOLSEG_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("VOLSEG_THREADS"));
}

#[test]
fn complexity_writes_a_report_and_prints_reductions() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("v2.json");
    let o = volseg(&[
        "complexity",
        "--compare",
        "transbts-v1",
        "--output",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("params -53.6"), "{text}");
    assert!(text.contains("flops -27.7"), "{text}");
    let parsed = ComplexityReport::from_json(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed.model, "transbtsv2");
    assert_eq!(parsed.per_slice * 128.0, parsed.totals.flops as f64);
}

#[test]
fn complexity_csv_reparses_to_the_json_report() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("r.json");
    let o = volseg(&[
        "--format",
        "csv",
        "--convention",
        "flops2",
        "complexity",
        "--output",
        json.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let from_csv = ComplexityReport::from_csv(&stdout(&o)).unwrap();
    let from_json = ComplexityReport::from_json(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(from_csv.totals, from_json.totals);
    assert_eq!(from_csv.rows.len(), from_json.rows.len());
}

#[test]
fn complexity_accepts_a_config_file_and_a_custom_shape() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("micro.toml");
    assert!(volseg(&[
        "init-config",
        "--preset",
        "micro",
        "--output",
        cfg.to_str().unwrap()
    ])
    .status
    .success());
    let o = volseg(&[
        "--config",
        cfg.to_str().unwrap(),
        "--format",
        "json-like",
        "complexity",
        "--input-shape",
        "4,8,8,8",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = ComplexityReport::from_json(stdout(&o).trim()).unwrap();
    assert_eq!(report.input_shape, [4, 8, 8, 8]);

    let wrong_grid = volseg(&[
        "--config",
        cfg.to_str().unwrap(),
        "complexity",
        "--input-shape",
        "4,16,16,16",
    ]);
    assert_eq!(wrong_grid.status.code(), Some(1));
    assert!(stderr(&wrong_grid).contains("token grid"));
    let short = volseg(&["complexity", "--input-shape", "4,128"]);
    assert_eq!(short.status.code(), Some(1));
    assert!(stderr(&short).contains("C,H,W,D"));
}

#[test]
fn ablation_table_has_five_rows_with_deltas() {
    let o = volseg(&["--format", "csv", "ablation-table"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "variant,params,flops,delta_params,delta_flops");
    assert_eq!(lines.len(), 6);
    let params: Vec<i64> = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    for (i, l) in lines[1..].iter().enumerate() {
        let delta: i64 = l.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(delta, if i == 0 { 0 } else { params[i] - params[i - 1] });
    }
}

#[test]
fn init_config_output_is_a_valid_config() {
    let o = volseg(&["init-config", "--preset", "overfit"]);
    assert!(o.status.success());
    volseg::config::RunConfig::from_toml(&stdout(&o)).unwrap();
}

#[test]
fn config_with_unknown_key_fails_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let text = volseg::config::RunConfig::preset(volseg::config::Preset::Micro).to_toml()
        + "\n[extra]\nx = 1\n";
    std::fs::write(&path, text).unwrap();
    let o = volseg(&[
        "--config",
        path.to_str().unwrap(),
        "train",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(
        err.contains("bad.toml") && err.contains("unknown field"),
        "{err}"
    );
}

#[test]
fn gradcheck_passes_and_a_fault_is_caught() {
    let ok = volseg(&["gradcheck", "--scope", "primitives"]);
    assert!(ok.status.success(), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("deform_conv3d"));

    let bad = volseg(&[
        "--format",
        "csv",
        "gradcheck",
        "--scope",
        "primitives",
        "--fault",
        "conv3d",
    ]);
    assert_eq!(bad.status.code(), Some(volseg::cli::EXIT_CHECK_FAILED));
    let text = stdout(&bad);
    let conv = text
        .lines()
        .find(|l| l.starts_with("primitives,conv3d,"))
        .unwrap();
    assert!(conv.ends_with(",false"), "{conv}");
    assert!(stderr(&bad).contains("conv3d"));
}

fn train_micro(out: &Path, seed: &str) -> Output {
    volseg(&[
        "--seed",
        seed,
        "train",
        "--preset",
        "micro",
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn same_seed_gives_identical_checkpoints_and_eval_runs_untrained() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    for (d, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        let o = train_micro(d, seed);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let bytes = |d: &Path| std::fs::read(d.join("checkpoint.bin")).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_ne!(bytes(&a), bytes(&c));
    assert_eq!(
        std::fs::read(a.join("metrics.jsonl")).unwrap(),
        std::fs::read(b.join("metrics.jsonl")).unwrap()
    );
    assert_eq!(read_metric_log(&a.join("metrics.jsonl")).unwrap().len(), 4);

    let resolved = volseg::config::RunConfig::load(&a.join("config.toml")).unwrap();
    assert_eq!(resolved.train.seed, 5);

    let o = volseg(&[
        "--config",
        a.join("config.toml").to_str().unwrap(),
        "--format",
        "json-like",
        "eval",
        "--checkpoint",
        a.join("checkpoint").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let record: volseg::train::MetricsRecord = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(record.dice.iter().all(|d| (0.0..=1.0).contains(d)));
}

#[test]
fn eval_rejects_a_checkpoint_for_another_model() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_micro(&dir.path().join("m"), "1").status.success());
    let o = volseg(&[
        "eval",
        "--preset",
        "overfit",
        "--checkpoint",
        dir.path().join("m/checkpoint").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error:"));
}
