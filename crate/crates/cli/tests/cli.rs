use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_adequacy-lab"));
    c.env_remove("ADEQUACY_LAB_THREADS");
    c
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is json")
}

fn error_of(out: &Output) -> (i32, Value) {
    let code = out.status.code().expect("exit code");
    let err: Value = serde_json::from_slice(&out.stderr).expect("stderr is json");
    assert_eq!(err["exit_code"], code);
    (code, err)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn lscd_matches_the_brute_force_oracle() {
    let (train, eval) = (fixture("lscd_train.csv"), fixture("lscd_eval.csv"));
    let got = ok_json(&["lscd", "--train", s(&train), "--eval", s(&eval), "--format", "csv", "--class-count", "3"]);
    let want: Value = serde_json::from_str(&std::fs::read_to_string(fixture("lscd_expected.json")).unwrap()).unwrap();
    let close = |a: &Value, b: &Value| (a.as_f64().unwrap() - b.as_f64().unwrap()).abs() < 1e-12;
    assert!(close(&got["aggregate"], &want["aggregate"]), "{got}");
    for c in ["0", "1", "2"] {
        assert!(close(&got["per_class"][c], &want["per_class"][c]), "class {c}: {got}");
    }
    assert_eq!(got["evaluated_samples"], 10);
}

/// Trains the smoke config once per test that needs model artefacts.
fn trained(dir: &Path) -> PathBuf {
    let cfg = repo().join("configs/smoke.json");
    let out = dir.join("t");
    ok_json(&["train", "--config", s(&cfg), "--out-dir", s(&out)]);
    out
}

#[test]
fn dsc_is_identical_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let t = trained(tmp.path());
    let (train, test) = (t.join("train.lstr"), t.join("test.lstr"));
    let one = ok_json(&["dsc", "--train", s(&train), "--eval", s(&test), "--workers", "1"]);
    let four = ok_json(&["dsc", "--train", s(&train), "--eval", s(&test), "--workers", "4"]);
    assert_eq!(one, four);
    let env = bin()
        .env("ADEQUACY_LAB_THREADS", "3")
        .args(["dsc", "--train", s(&train), "--eval", s(&test)])
        .output()
        .unwrap();
    assert_eq!(serde_json::from_slice::<Value>(&env.stdout).unwrap(), one);
}

#[test]
fn traces_subcommand_reproduces_training_export() {
    let tmp = tempfile::tempdir().unwrap();
    let t = trained(tmp.path());
    let again = tmp.path().join("test2.lstr");
    let info = ok_json(&[
        "traces",
        "--model",
        s(&t.join("model.lmdl")),
        "--data",
        s(&t.join("test.csv")),
        "--split",
        "test",
        "--out",
        s(&again),
    ]);
    assert_eq!(info["records"], 80);
    assert_eq!(std::fs::read(&again).unwrap(), std::fs::read(t.join("test.lstr")).unwrap());
}

#[test]
fn fuzz_then_validate_the_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let t = trained(tmp.path());
    let f = tmp.path().join("f");
    let fz = ok_json(&[
        "fuzz",
        "--model",
        s(&t.join("model.lmdl")),
        "--train",
        s(&t.join("train.csv")),
        "--eval",
        s(&t.join("test.csv")),
        "--criterion",
        "kmnc",
        "--iterations",
        "300",
        "--out-dir",
        s(&f),
    ]);
    let n = fz["corner_cases"].as_u64().unwrap();
    assert!(n > 0, "{fz}");
    assert_eq!(fz["corpus_accuracy"], 0.0);
    let v = ok_json(&[
        "validate",
        "--train",
        s(&t.join("train.csv")),
        "--eval",
        s(&f.join("corner_case_kmnc.lcrp")),
        "--epochs",
        "20",
    ]);
    assert_eq!(v["total"].as_u64().unwrap(), n);
    assert_eq!(v["valid"].as_u64().unwrap() + v["invalid"].as_u64().unwrap(), n);
}

#[test]
fn pipeline_reports_are_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = repo().join("configs/smoke.json");
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for d in &dirs {
        let out = run(&["pipeline", "--config", s(&cfg), "--out-dir", s(d), "--skip-bench"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["report.txt", "report.json", "study.csv", "study.json", "model.lmdl", "train.lstr"] {
        let a = std::fs::read(dirs[0].join(f)).unwrap();
        let b = std::fs::read(dirs[1].join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
    assert!(!dirs[0].join("timing.json").exists());

    let report: Value = serde_json::from_slice(&std::fs::read(dirs[0].join("report.json")).unwrap()).unwrap();
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(repo().join("schemas/report.schema.json")).unwrap())
        .unwrap();
    let compiled = jsonschema::JSONSchema::compile(&schema).expect("schema compiles");
    if let Err(errors) = compiled.validate(&report) {
        let msgs: Vec<String> = errors.map(|e| format!("{} at {}", e, e.instance_path)).collect();
        panic!("report.json violates the schema: {msgs:#?}");
    }

    // the study table round-trips through `correlate`
    let table = ok_json(&["correlate", "--study", s(&dirs[0].join("study.json"))]);
    assert_eq!(table, report["correlations"]);
}

#[test]
fn pipeline_writes_timing_separately() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = repo().join("configs/smoke.json");
    let d = tmp.path().join("p");
    let out = run(&["pipeline", "--config", s(&cfg), "--out-dir", s(&d), "--bench-workers", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let timing: Value = serde_json::from_slice(&std::fs::read(d.join("timing.json")).unwrap()).unwrap();
    let rows = timing.as_array().unwrap();
    // LSCD is single-thread only; DSC runs at 1 and 2 workers
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r["wall_time_ms"].as_f64().unwrap() >= 0.0 && r["repeats"] == 3));
}

#[test]
fn errors_carry_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let eval = fixture("lscd_eval.csv");

    let (code, err) = error_of(&run(&["lscd", "--no-such-flag"]));
    assert_eq!((code, err["error"]["kind"].as_str().unwrap()), (2, "usage"));

    let bad_cfg = tmp.path().join("bad.json");
    std::fs::write(&bad_cfg, r#"{"dataset": {"kind": "blobs"}}"#).unwrap();
    let (code, _) = error_of(&run(&["pipeline", "--config", s(&bad_cfg), "--out-dir", s(tmp.path())]));
    assert_eq!(code, 3);

    let missing = tmp.path().join("absent.lstr");
    let (code, err) = error_of(&run(&["lscd", "--train", s(&missing), "--eval", s(&eval)]));
    assert_eq!(code, 4);
    assert!(err["error"]["message"].as_str().unwrap().contains("absent.lstr"));

    // a csv file handed over as binary traces
    let (code, err) = error_of(&run(&["lscd", "--train", s(&eval), "--eval", s(&eval)]));
    assert_eq!(code, 5, "{err}");

    let truncated = tmp.path().join("short.lstr");
    std::fs::write(&truncated, b"LSTR\x01\x00").unwrap();
    let (code, _) = error_of(&run(&["dsc", "--train", s(&truncated), "--eval", s(&truncated)]));
    assert_eq!(code, 5);
}

#[test]
fn help_lists_defaults() {
    let out = run(&["dsc", "--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for needle in ["[default: 1000]", "[default: auto]", "ADEQUACY_LAB_THREADS"] {
        assert!(text.contains(needle), "missing {needle} in\n{text}");
    }
}
