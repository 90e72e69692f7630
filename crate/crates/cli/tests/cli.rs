use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn learnkt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_learnkt"))
        .args(args)
        .env_remove("LEARNKT_LOG")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Simulates a small BKT lesson into `dir` and returns its CSV path.
fn small_lesson(dir: &Path, shape: &str, holdout: &str) -> PathBuf {
    let o = learnkt(&[
        "simulate",
        "--generator",
        "bkt-process",
        "--shape",
        shape,
        "--holdout",
        holdout,
        "--lesson-name",
        "small",
        "--seed",
        "3",
        "--outdir",
        s(dir),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir.join("small.csv")
}

#[test]
fn simulate_lesson_one_shape() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("sim");
    let o = learnkt(&["simulate", "--generator", "bkt-process", "--shape", "66x8x9", "--outdir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("simulated.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 66 * 8 * 9);
    assert!(csv.starts_with("learner_id,question_id,attempt,obs"));
    let truth = read_json(&out.join("simulated.truth.json"));
    assert_eq!(truth["truth"]["kind"], "bkt");
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["n_records"], 4752);
    assert!(out.join("report.txt").exists());
}

#[test]
fn cv_writes_five_folds_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let data = small_lesson(tmp.path(), "20x4x3", "0");
    let run = |dir: &str| {
        let out = tmp.path().join(dir);
        let o = learnkt(&["cv", "--model", "bkt", "--data", s(&data), "--k", "5", "--seed", "7", "--outdir", s(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read_to_string(out.join("report.json")).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    let v: Value = serde_json::from_str(&a).unwrap();
    let folds = v["results"]["BKT"]["small"]["fold_rmse"].as_array().unwrap();
    assert_eq!(folds.len(), 5);
    let txt = std::fs::read_to_string(tmp.path().join("a/report.txt")).unwrap();
    assert!(txt.contains("BKT"), "{txt}");
    assert!(regex_like_cell(&txt));
}

fn regex_like_cell(txt: &str) -> bool {
    txt.split_whitespace().any(|w| {
        let w = w.trim_end_matches('*');
        w.len() == 13 && w.as_bytes()[1] == b'.' && w[5..].starts_with("_{") && w.ends_with('}')
    })
}

#[test]
fn several_models_share_folds() {
    let tmp = TempDir::new().unwrap();
    let data = small_lesson(tmp.path(), "15x4x3", "0");
    let out = tmp.path().join("o");
    let o = learnkt(&[
        "cv",
        "--model",
        "bkt,pfa,gbt",
        "--set",
        "gbt:n_trees=20",
        "--data",
        s(&data),
        "--k",
        "3",
        "--outdir",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = read_json(&out.join("report.json"));
    for m in ["BKT", "PFA", "GBT"] {
        assert_eq!(v["results"][m]["small"]["fold_rmse"].as_array().unwrap().len(), 3, "{m}");
    }
}

#[test]
fn unknown_model_is_usage_error_listing_registry() {
    let tmp = TempDir::new().unwrap();
    let data = small_lesson(tmp.path(), "5x2x2", "0");
    let o = learnkt(&["cv", "--model", "dkt", "--data", s(&data), "--outdir", s(tmp.path())]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bkt, pfa, sparfa, tensor, gbt, llm, llm-gbt"), "{}", stderr(&o));
}

#[test]
fn llm_without_endpoint_or_mock_is_config_error() {
    let tmp = TempDir::new().unwrap();
    let data = small_lesson(tmp.path(), "5x2x2", "0");
    let o = learnkt(&["llm-run", "--data", s(&data), "--outdir", s(tmp.path())]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("configuration error"), "{}", stderr(&o));
}

#[test]
fn bad_flags_exit_one_and_help_exits_zero() {
    assert_eq!(code(&learnkt(&["cv", "--no-such-flag"])), 1);
    assert_eq!(code(&learnkt(&["frobnicate"])), 1);
    assert_eq!(code(&learnkt(&["--help"])), 0);
}

#[test]
fn data_errors_exit_two() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.csv");
    std::fs::write(&bad, "learner_id,question_id,attempt,obs\nL1,Q1,0,1\n").unwrap();
    let o = learnkt(&["cv", "--model", "bkt", "--data", s(&bad), "--outdir", s(tmp.path())]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = learnkt(&["summarize", "--data", "/nonexistent/file.csv", "--outdir", s(tmp.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn model_errors_exit_three() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("one.csv");
    std::fs::write(&data, "learner_id,question_id,attempt,obs\nL1,Q1,1,1\n").unwrap();
    let o = learnkt(&["fit", "--model", "gbt", "--data", s(&data), "--outdir", s(tmp.path())]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let data = small_lesson(tmp.path(), "4x2x2", "0");
    let o = learnkt(&["fit", "--model", "tensor", "--set", "rank=50", "--data", s(&data), "--outdir", s(tmp.path())]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn client_errors_exit_four_and_token_stays_private() {
    let tmp = TempDir::new().unwrap();
    let data = small_lesson(tmp.path(), "6x2x2", "0");
    let secret = "sk-test-should-never-appear-4242";
    let o = Command::new(env!("CARGO_BIN_EXE_learnkt"))
        .args([
            "-vv",
            "llm-run",
            "--data",
            s(&data),
            "--endpoint",
            "http://127.0.0.1:9/v1/chat/completions",
            "--retries",
            "0",
            "--timeout",
            "2",
            "--token-env",
            "LEARNKT_TEST_TOKEN",
            "--outdir",
            s(tmp.path()),
        ])
        .env("LEARNKT_TEST_TOKEN", secret)
        .output()
        .unwrap();
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let all = format!("{}{}", stderr(&o), String::from_utf8_lossy(&o.stdout));
    assert!(!all.contains(secret));
    for f in ["report.json", "report.txt"] {
        if let Ok(t) = std::fs::read_to_string(tmp.path().join(f)) {
            assert!(!t.contains(secret));
        }
    }
}

#[test]
fn mock_llm_run_with_repeats_has_zero_se() {
    let tmp = TempDir::new().unwrap();
    let data = small_lesson(tmp.path(), "12x4x3", "0");
    let out = tmp.path().join("llm");
    let o = learnkt(&["llm-run", "--mock", "--repeats", "7", "--data", s(&data), "--outdir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = read_json(&out.join("report.json"));
    let entry = &v["results"]["LLM (mock)"]["small"];
    assert_eq!(entry["se"], 0.0);
    assert_eq!(entry["se_basis"], "runs");
    for fold in v["llm_runs"]["LLM (mock)/small"].as_array().unwrap() {
        assert_eq!(fold["imputed"], 0);
        assert_eq!(fold["coverage"], 1.0);
    }
    let txt = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(txt.contains("_{0.000}"), "{txt}");
}

#[test]
fn mock_llm_gbt_runs_offline() {
    let tmp = TempDir::new().unwrap();
    let data = small_lesson(tmp.path(), "10x3x3", "0");
    let out = tmp.path().join("o");
    let o = learnkt(&[
        "cv",
        "--model",
        "llm-gbt",
        "--mock",
        "--set",
        "tuning_budget=2",
        "--data",
        s(&data),
        "--k",
        "2",
        "--outdir",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = read_json(&out.join("report.json"));
    assert!(v["results"]["LLM-GBT (mock)"]["small"]["mean"].as_f64().unwrap() > 0.0);
}

#[test]
fn config_file_mirrors_flags_and_flags_win() {
    let tmp = TempDir::new().unwrap();
    let data = small_lesson(tmp.path(), "20x3x2", "0");
    let out = tmp.path().join("o");
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!("# cv settings\nmodel = pfa\nk = 3\nseed = 11\ndata = {}\noutdir = {}\n", data.display(), out.display()),
    )
    .unwrap();
    let o = learnkt(&["cv", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = read_json(&out.join("report.json"));
    assert_eq!(v["k"], 3);
    assert_eq!(v["seed"], 11);
    assert_eq!(v["results"]["PFA"]["small"]["fold_rmse"].as_array().unwrap().len(), 3);

    let o = learnkt(&["cv", "--config", s(&cfg), "--k", "4", "--model", "bkt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = read_json(&out.join("report.json"));
    assert_eq!(v["k"], 4);
    assert!(v["results"].get("PFA").is_none());

    std::fs::write(&cfg, "folds = 3\n").unwrap();
    assert_eq!(code(&learnkt(&["cv", "--config", s(&cfg)])), 1);
}

#[test]
fn fit_and_predict_write_artifacts() {
    let tmp = TempDir::new().unwrap();
    let data = small_lesson(tmp.path(), "15x3x3", "0.2");
    let out = tmp.path().join("fit");
    let o = learnkt(&["fit", "--model", "gbt", "--set", "n_trees=10", "--data", s(&data), "--outdir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = read_json(&out.join("model-gbt.json"));
    assert!(m.is_object());
    assert!(read_json(&out.join("report.json"))["train_rmse"].as_f64().is_some());

    let out = tmp.path().join("pred");
    let o = learnkt(&["predict", "--model", "bkt", "--data", s(&data), "--outdir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let preds = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    let n_hidden = std::fs::read_to_string(&data).unwrap().lines().filter(|l| l.ends_with(',')).count();
    assert_eq!(preds.lines().count(), 1 + n_hidden);
    for line in preds.lines().skip(1) {
        let p: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
    assert!(out.join("model-bkt.json").exists());
}

#[test]
fn tune_small_grid_and_merge_reports() {
    let tmp = TempDir::new().unwrap();
    let data = small_lesson(tmp.path(), "12x3x3", "0");
    let tune_out = tmp.path().join("tune");
    let o = learnkt(&[
        "tune",
        "--model",
        "gbt",
        "--grid",
        "default",
        "--grid-set",
        "n_trees=10,20",
        "--grid-set",
        "learning_rate=0.1",
        "--grid-set",
        "max_depth=2",
        "--grid-set",
        "subsample=1.0",
        "--grid-set",
        "colsample_bytree=1.0",
        "--grid-set",
        "gamma=0",
        "--grid-set",
        "min_child_weight=1,3",
        "--data",
        s(&data),
        "--k",
        "3",
        "--outdir",
        s(&tune_out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = read_json(&tune_out.join("report.json"));
    assert_eq!(v["tune"][0]["results"].as_array().unwrap().len(), 4);
    let txt = std::fs::read_to_string(tune_out.join("report.txt")).unwrap();
    let header: Vec<&str> = txt.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["Method", "Dataset", "Mean", "Median", "Std.", "Min.", "Max."]);

    let cv_out = tmp.path().join("cv");
    let o = learnkt(&["cv", "--model", "bkt", "--data", s(&data), "--k", "3", "--outdir", s(&cv_out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let merged = tmp.path().join("merged");
    let o = learnkt(&[
        "report",
        "--inputs",
        s(&cv_out.join("report.json")),
        "--inputs",
        s(&tune_out.join("report.json")),
        "--outdir",
        s(&merged),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let txt = std::fs::read_to_string(merged.join("report.txt")).unwrap();
    assert!(txt.contains("BKT") && txt.contains("Grid search"), "{txt}");
}

#[test]
fn ingest_summarize_and_workers() {
    let tmp = TempDir::new().unwrap();
    let data = small_lesson(tmp.path(), "8x3x2", "0.25");
    let out = tmp.path().join("ing");
    let o = learnkt(&["--workers", "2", "ingest", "--data", s(&data), "--outdir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        std::fs::read_to_string(out.join("dataset.csv")).unwrap(),
        std::fs::read_to_string(&data).unwrap()
    );
    let o = learnkt(&["summarize", "--data", s(&data), "--outdir", s(&out)]);
    assert_eq!(code(&o), 0);
    let v = read_json(&out.join("report.json"));
    assert_eq!(v["summaries"][0]["n_records"], 48);
    assert_eq!(code(&learnkt(&["--workers", "0", "summarize", "--data", s(&data)])), 1);
}
