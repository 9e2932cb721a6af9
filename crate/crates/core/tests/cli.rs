use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lora_override::adapter::{layer_scores, select_top_layers, Adapter, LayerFactors};
use lora_override::adapter_io::{load_adapter, save_adapter, MANIFEST_FILE};
use lora_override::matrix::Matrix;
use serde_json::Value;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lora-override"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn error_kind(out: &Output) -> String {
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["message"].is_string());
    err["error"].as_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn build_desk(dir: &Path, extra: &[&str]) {
    let mut args = vec!["--out", s(dir), "desk", "build"];
    args.extend_from_slice(extra);
    ok(&args);
}

fn fixture_adapter() -> Adapter {
    let layers = (0..8)
        .map(|id| {
            let w = (id + 1) as f64;
            let a = Matrix::from_rows(&[&[w, 0.5, -0.25], &[0.0, w * 0.5, 1.0]]);
            let b = Matrix::from_rows(&[&[1.0, 0.0], &[0.5, -w], &[0.25, 0.75]]);
            LayerFactors::new(id, a, b).unwrap()
        })
        .collect();
    Adapter::new(layers, 2, 16.0).unwrap()
}

#[test]
fn boost_scales_only_selected_a_factors() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    let dst = dir.path().join("dst");
    let adapter = fixture_adapter();
    save_adapter(&adapter, &src).unwrap();
    ok(&[
        "--out",
        s(&dst),
        "boost",
        "--adapter",
        s(&src),
        "--k",
        "25",
        "--beta",
        "1.75",
    ]);
    assert_eq!(
        fs::read(src.join(MANIFEST_FILE)).unwrap(),
        fs::read(dst.join(MANIFEST_FILE)).unwrap()
    );
    let boosted = load_adapter(&dst).unwrap();
    let top = select_top_layers(&layer_scores(&adapter), 25.0).unwrap();
    assert_eq!(top, BTreeSet::from([6, 7]));
    for (before, after) in adapter.layers().iter().zip(boosted.layers()) {
        assert_eq!(before.b_matrix, after.b_matrix);
        let factor = if top.contains(&before.layer_id) {
            1.75
        } else {
            1.0
        };
        for (x, y) in before
            .a_matrix
            .as_slice()
            .iter()
            .zip(after.a_matrix.as_slice())
        {
            assert_eq!((x * factor) as f32, *y as f32);
        }
    }
    let snapshot: Value =
        serde_json::from_str(&fs::read_to_string(dst.join("config.json")).unwrap()).unwrap();
    assert_eq!(snapshot["invocation"]["command"], "boost");
    assert_eq!(snapshot["invocation"]["beta"], 1.75);
}

#[test]
fn zero_and_score_layers() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    save_adapter(&fixture_adapter(), &src).unwrap();
    let zeroed = dir.path().join("zeroed");
    ok(&[
        "--out",
        s(&zeroed),
        "boost",
        "--adapter",
        s(&src),
        "--mode",
        "zero",
        "--layers",
        "1,3",
    ]);
    let z = load_adapter(&zeroed).unwrap();
    assert!(z
        .layer(1)
        .unwrap()
        .a_matrix
        .as_slice()
        .iter()
        .all(|&v| v == 0.0));
    assert!(z
        .layer(2)
        .unwrap()
        .a_matrix
        .as_slice()
        .iter()
        .any(|&v| v != 0.0));

    let scores = dir.path().join("scores");
    ok(&["--out", s(&scores), "score-layers", "--adapter", s(&src)]);
    let mut reader = csv::Reader::from_path(scores.join("layer_scores.csv")).unwrap();
    assert_eq!(
        reader.headers().unwrap(),
        vec!["layer_id", "a_norm", "b_norm", "score", "selected"]
    );
    let selected: Vec<String> = reader
        .records()
        .map(|r| r.unwrap())
        .filter(|r| &r[4] == "true")
        .map(|r| r[0].to_string())
        .collect();
    assert_eq!(selected, ["6", "7"]);

    let out = cli(&[
        "--out",
        s(&scores),
        "boost",
        "--adapter",
        s(&src),
        "--mode",
        "interpolate",
    ]);
    assert_eq!(error_kind(&out), "invalid_parameter");
}

#[test]
fn empty_question_file_fails_without_report() {
    let dir = tempfile::tempdir().unwrap();
    build_desk(dir.path(), &["--conflicts", "4", "--novel", "0"]);
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out_dir = dir.path().join("run");
    let out = cli(&[
        "--out",
        s(&out_dir),
        "eval",
        "--desk",
        s(&dir.path().join("desk.json")),
        "--questions",
        s(&empty),
    ]);
    assert_eq!(error_kind(&out), "empty_input");
    assert!(!out_dir.join("report.json").exists());
}

#[test]
fn usage_errors_are_json() {
    let out = cli(&["eval", "--method", "nonsense"]);
    assert_eq!(error_kind(&out), "usage");
    assert!(cli(&["--help"]).status.success());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(&config, r#"{"seed": 1, "beta_typo": 2.0}"#).unwrap();
    let out = cli(&[
        "--config",
        s(&config),
        "--out",
        s(dir.path()),
        "desk",
        "build",
    ]);
    assert_eq!(error_kind(&out), "format");
}

#[test]
fn config_file_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(&config, r#"{"seed": 9}"#).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&[
        "--config",
        s(&config),
        "--seed",
        "3",
        "--out",
        s(&a),
        "desk",
        "build",
        "--conflicts",
        "4",
    ]);
    ok(&[
        "--seed",
        "9",
        "--out",
        s(&b),
        "desk",
        "build",
        "--conflicts",
        "4",
    ]);
    assert_eq!(
        fs::read(a.join("desk.json")).unwrap(),
        fs::read(b.join("desk.json")).unwrap()
    );
}

#[test]
fn desk_subcommands_produce_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    build_desk(
        dir.path(),
        &["--conflicts", "12", "--novel", "4", "--retention", "4"],
    );
    let desk = dir.path().join("desk.json");
    let questions = dir.path().join("questions.jsonl");
    let run = |name: &str, args: &[&str]| {
        let out = dir.path().join(name);
        let mut full = vec!["--out", s(&out)];
        full.extend_from_slice(args);
        full.extend_from_slice(&["--desk", s(&desk), "--questions", s(&questions)]);
        (ok(&full), out)
    };

    let (_, sweep) = run(
        "sweep",
        &["sweep", "--grid", "1.0:2.5:0.5", "--max-tokens", "1"],
    );
    let mut reader = csv::Reader::from_path(sweep.join("sweep.csv")).unwrap();
    assert_eq!(
        reader.headers().unwrap(),
        vec!["beta", "conflict_accuracy", "novel_accuracy"]
    );
    assert_eq!(reader.records().count(), 4);
    let fit: Value =
        serde_json::from_str(&fs::read_to_string(sweep.join("logistic.json")).unwrap()).unwrap();
    assert!(fit["logistic"]["rss"].is_number());
    assert!(fit["linear_rss"].is_number());

    let (_, min_beta) = run("min_beta", &["min-beta", "--max-tokens", "1"]);
    let rows = csv::Reader::from_path(min_beta.join("min_beta.csv"))
        .unwrap()
        .records()
        .count();
    assert_eq!(rows, 12);

    let (confusion, margins) = run("margins", &["margins"]);
    assert_eq!(
        (confusion["fp"].as_u64(), confusion["fn"].as_u64()),
        (Some(0), Some(0))
    );
    let rows = csv::Reader::from_path(margins.join("margins.csv"))
        .unwrap()
        .records()
        .count();
    assert_eq!(rows, 12);

    let (metrics, probe) = run(
        "probe",
        &["probe", "--probe-mode", "max-prob", "--threshold", "0.1"],
    );
    assert_eq!(metrics["recall"], 1.0);
    assert!(probe.join("probe.csv").exists());

    let (report, eval) = run(
        "eval",
        &[
            "eval",
            "--method",
            "rg-ca",
            "--policy",
            "oracle",
            "--probe-mode",
            "max-prob",
            "--threshold",
            "0.1",
            "--max-tokens",
            "1",
        ],
    );
    assert!(report["accuracy"].is_number());
    let report: Value =
        serde_json::from_str(&fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["header"]["method"]["method"], "rg_ca");
    assert_eq!(report["header"]["n_questions"], 20);
    assert!(eval.join("results.csv").exists());

    let out = dir.path().join("gate");
    let summary = ok(&[
        "--out",
        s(&out),
        "gate",
        "--queries",
        s(&questions),
        "--policy",
        "oracle",
    ]);
    assert_eq!(summary["passed"], 16);
    assert_eq!(summary["total"], 20);
    assert!(out.join("gate.csv").exists());

    let first: Value = serde_json::from_str(
        fs::read_to_string(&questions)
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    let prompt = first["prompt"].as_str().unwrap();
    let document = first["document"].as_str().unwrap();
    let out = dir.path().join("gen");
    let generation = ok(&[
        "--out",
        s(&out),
        "desk",
        "run",
        "--desk",
        s(&desk),
        "--prompt",
        prompt,
    ]);
    assert!(generation["text"].is_string());
    let boosted = ok(&[
        "--out",
        s(&out),
        "desk",
        "run",
        "--desk",
        s(&desk),
        "--prompt",
        prompt,
        "--document",
        document,
        "--beta",
        "4",
    ]);
    assert_eq!(
        boosted["text"].as_str().unwrap().trim(),
        first["expected_answer"].as_str().unwrap()
    );
    assert!(out.join("generation.json").exists());
    let failed = cli(&[
        "--out",
        s(&out),
        "desk",
        "run",
        "--desk",
        s(&desk),
        "--prompt",
        "zzqx",
    ]);
    assert_eq!(error_kind(&failed), "provider");
}
