use std::path::Path;
use std::process::{Command, Output};

use prnet_core::estimators::EstimatorConfig;
use prnet_core::eval::{evaluate, write_track_csv, EvalReport};
use prnet_core::ingest::DEFAULT_ALIGN_TOLERANCE_MS;
use prnet_core::pipeline::{read_epochs, read_truth, solve_track, Engine};
use prnet_core::prnet::TrainConfig;
use prnet_core::simulator::ScenarioConfig;

fn prnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    serde_json::from_str(text.trim()).expect("stderr is JSON")
}

fn simulate(dir: &Path, cfg: &ScenarioConfig) {
    let c = dir.join("scenario.json");
    std::fs::write(&c, serde_json::to_string(cfg).unwrap()).unwrap();
    let out = prnet(&["simulate", "--config", p(&c), "--out", p(&dir.join("sim"))]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn invalid_engine_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &ScenarioConfig::stationary(5, 1.0, 1));
    let out = prnet(&[
        "solve",
        "--engine",
        "kalman",
        "--epochs",
        p(&dir.path().join("sim/epochs.csv")),
        "--out",
        p(&dir.path().join("t.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "usage");
}

#[test]
fn usage_and_missing_files() {
    assert_eq!(prnet(&["--help"]).status.code(), Some(0));
    assert_eq!(prnet(&["solve", "--bogus"]).status.code(), Some(2));
    let out = prnet(&[
        "features",
        "--epochs",
        "/nonexistent/e.csv",
        "--out",
        "/tmp/f.csv",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_json(&out);
    assert_eq!(err["error"]["command"], "features");
    assert_eq!(err["error"]["kind"], "io");
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("bad.json");
    std::fs::write(
        &c,
        r#"{"duration_epochs": 10, "noise_sigma_m": 1, "n_sats": 2}"#,
    )
    .unwrap();
    let out = prnet(&[
        "simulate",
        "--config",
        p(&c),
        "--out",
        p(&dir.path().join("sim")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "simulation");
}

#[test]
fn solve_and_evaluate_match_library() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, &ScenarioConfig::stationary(40, 3.0, 2));
    let epochs = d.join("sim/epochs.csv");
    let truth = d.join("sim/truth.csv");
    let track = d.join("wls.csv");
    let report = d.join("report.json");
    assert!(prnet(&[
        "solve",
        "--engine",
        "wls",
        "--epochs",
        p(&epochs),
        "--out",
        p(&track)
    ])
    .status
    .success());
    let out = prnet(&[
        "evaluate",
        "--track",
        p(&track),
        "--truth",
        p(&truth),
        "--out",
        p(&report),
    ]);
    assert!(out.status.success());

    let lib_track = solve_track(
        &read_epochs(&epochs).unwrap(),
        Engine::Wls,
        &EstimatorConfig::default(),
    )
    .unwrap();
    let mut buf = Vec::new();
    write_track_csv(&mut buf, &lib_track).unwrap();
    assert_eq!(std::fs::read(&track).unwrap(), buf);
    let lib_report = evaluate(
        &lib_track,
        &read_truth(&truth).unwrap(),
        DEFAULT_ALIGN_TOLERANCE_MS,
    )
    .unwrap();
    let cli_report: EvalReport = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(cli_report, lib_report);
    let stdout: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stdout["score_m"].as_f64().unwrap(), lib_report.score_m);
}

#[test]
fn full_pipeline_emits_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, &ScenarioConfig::urban_loop(200, 1.0, 10.0, 0.0, 4));
    let epochs = d.join("sim/epochs.csv");
    let truth = d.join("sim/truth.csv");
    let train_cfg = TrainConfig {
        max_iters: 20,
        batch_size: 16,
        hidden_width: 16,
        hidden_layers: 4,
        ..TrainConfig::default()
    };
    std::fs::write(
        d.join("train.json"),
        serde_json::to_string(&train_cfg).unwrap(),
    )
    .unwrap();
    let steps: Vec<Vec<String>> = vec![
        vec![
            "label",
            "--epochs",
            p(&epochs),
            "--truth",
            p(&truth),
            "--out",
            p(&d.join("labels")),
        ],
        vec![
            "features",
            "--epochs",
            p(&epochs),
            "--out",
            p(&d.join("feats.csv")),
        ],
        vec![
            "train",
            "--features",
            p(&d.join("feats.csv")),
            "--labels",
            p(&d.join("labels")),
            "--config",
            p(&d.join("train.json")),
            "--seed",
            "9",
            "--out",
            p(&d.join("model.json")),
        ],
        vec![
            "correct",
            "--epochs",
            p(&epochs),
            "--model",
            p(&d.join("model.json")),
            "--out",
            p(&d.join("corrected.csv")),
        ],
        vec![
            "solve",
            "--engine",
            "rts",
            "--epochs",
            p(&d.join("corrected.csv")),
            "--out",
            p(&d.join("track.csv")),
        ],
        vec![
            "evaluate",
            "--track",
            p(&d.join("track.csv")),
            "--truth",
            p(&truth),
            "--out",
            p(&d.join("report.json")),
        ],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(String::from).collect())
    .collect();
    for args in &steps {
        let a: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = prnet(&a);
        assert!(
            out.status.success(),
            "{:?}: {}",
            a[0],
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let report: EvalReport =
        serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.epochs, 200);
    assert!(d.join("model.loss.csv").exists());
    assert!(d.join("report.ecdf.csv").exists());
    assert!(d.join("labels/labels.csv").exists() && d.join("labels/h_rows.csv").exists());
}
