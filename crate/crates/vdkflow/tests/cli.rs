use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn data(name: &str) -> String {
    vdkflow::data_dir().join(name).display().to_string()
}

fn vdkflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vdkflow"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = vdkflow(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json_file(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn error_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has a line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

#[test]
fn grid_dump_and_base_solve() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["grid", "dump", "--case", &data("case9.m")]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["buses"].as_array().unwrap().len(), 9);
    assert_eq!(v["slack"], 1);
    assert_eq!(v["load_buses"], serde_json::json!([5, 7, 9]));

    let sol = dir.path().join("sol.json");
    ok(dir.path(), &["acpf", "solve", "--case", &data("case9.m"), "--out", sol.to_str().unwrap()]);
    let v = json_file(&sol);
    assert_eq!(v["v_mag"].as_array().unwrap().len(), 9);
    assert!(v["max_mismatch"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn sample_solve_fit_predict_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| -> PathBuf { dir.path().join(n) };
    let case = data("case9.m");
    let samples = p("samples.json");
    ok(
        dir.path(),
        &["acpf", "sample", "--case", &case, "--n", "6", "--dist", "beta", "--seed", "3", "--out", samples.to_str().unwrap()],
    );
    let s = json_file(&samples);
    assert_eq!(s.as_array().unwrap().len(), 6);
    assert!(s[0]["p"].is_array() && s[0]["q"].is_array() && s[0]["meta"].is_object());

    let solved = p("solved.json");
    ok(
        dir.path(),
        &["acpf", "solve", "--case", &case, "--samples", samples.to_str().unwrap(), "--out", solved.to_str().unwrap()],
    );
    let recs = json_file(&solved);
    assert!(recs.as_array().unwrap().iter().all(|r| r["converged"] == true));

    let model = p("model.json");
    ok(
        dir.path(),
        &[
            "gp", "fit", "--case", &case, "--target", "5", "--n-train", "12", "--iters", "10", "--out",
            model.to_str().unwrap(),
        ],
    );
    let m = json_file(&model);
    assert_eq!(m["format"], "vdkflow-gp");
    assert_eq!(m["version"], 1);
    assert_eq!(m["target"], 5);
    assert_eq!(m["design"].as_array().unwrap().len(), 12);

    let preds = p("preds.json");
    ok(
        dir.path(),
        &[
            "gp", "predict", "--model", model.to_str().unwrap(), "--case", &case, "--samples",
            samples.to_str().unwrap(), "--out", preds.to_str().unwrap(),
        ],
    );
    let pr = json_file(&preds);
    assert_eq!(pr.as_array().unwrap().len(), 6);
    for (r, sol) in pr.as_array().unwrap().iter().zip(recs.as_array().unwrap()) {
        let truth = sol["v_mag"][4].as_f64().unwrap();
        assert!((r["mean"].as_f64().unwrap() - truth).abs() < 5e-3);
        assert!(r["variance"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn kernel_build_writes_vdk_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["kernel", "build", "--case", &data("case118.m"), "--reduced"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["n_active"], 97);
    assert_eq!(v["nnks"].as_array().unwrap().len(), 118);
    let first = &v["nnks"][0];
    assert_eq!(first["owner"], 1);
    assert!(first["support"].is_array() && first["coords"].is_array() && first["redundant"].is_boolean());

    let out = ok(dir.path(), &["kernel", "build", "--case", &data("case118.m"), "--target", "2", "--depth", "1"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["n_active"].as_u64().unwrap() < 118);
}

#[test]
fn al_run_writes_history_and_model() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run.json");
    ok(
        dir.path(),
        &[
            "al", "run", "--case", &data("case14.m"), "--target", "9", "--budget", "5", "--batch", "10", "--probe", "20",
            "--out", run.to_str().unwrap(),
        ],
    );
    let v = json_file(&run);
    assert_eq!(v["target_bus"], 9);
    assert_eq!(v["history"]["acpf_solves"], 5);
    let records = v["history"]["records"].as_array().unwrap();
    assert_eq!(records.len(), 4);
    assert!(records[0]["probe"]["mae"].is_number());
    let model = json_file(Path::new(v["model"].as_str().unwrap()));
    assert_eq!(model["design"].as_array().unwrap().len(), 5);
}

#[test]
fn bench_commands_emit_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let case = data("case14.m");
    let small = ["--case", case.as_str(), "--target", "14", "--trials", "1", "--n-train", "8", "--n-test", "10"];
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"fit": {"iters": 5}, "kde_grid": 64}"#).unwrap();
    let with = |cmd: &[&str]| -> Vec<String> {
        let mut a: Vec<String> = vec!["--config".into(), cfg.display().to_string()];
        a.extend(cmd.iter().map(|s| s.to_string()));
        a.extend(small.iter().map(|s| s.to_string()));
        a
    };
    let run = |args: Vec<String>| {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(dir.path(), &refs)
    };

    let out = run(with(&["bench", "trials", "--methods", "full_gp,vdk_gp"]));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), vdkflow::bench::TRIAL_COLUMNS.join(","));
    assert_eq!(lines.count(), 2);

    let out = run(with(&["bench", "depth", "--counts-only"]));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("target,depth,n_nnk"));

    let out = run(with(&["bench", "extrapolate", "--test-fractions", "0.1,0.2"]));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 3);

    let out = run(with(&["bench", "uq"]));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
    assert!(v[0]["density"]["kl"].is_number());
}

#[test]
fn failures_report_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();

    let out = vdkflow(dir.path(), &["acpf", "solve", "--case", "missing.m"]);
    assert_eq!(out.status.code(), Some(1));
    let e = error_json(&out);
    assert_eq!(e["error"]["kind"], "case");
    assert!(e["error"]["message"].as_str().unwrap().contains("missing.m"));

    let out = vdkflow(dir.path(), &["gp", "fit", "--case", &data("case9.m"), "--target", "999"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"]["kind"], "unknown_bus");

    let out = vdkflow(dir.path(), &["gp", "fit", "--case", &data("case9.m"), "--target", "1", "--n-train", "4"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"]["kind"], "acpf");

    let out = vdkflow(dir.path(), &["acpf", "frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "usage");

    let out = vdkflow(dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"n_trials": 0, "no_such_field": 1}"#).unwrap();
    let out = vdkflow(dir.path(), &["--config", cfg.to_str().unwrap(), "bench", "trials"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"]["kind"], "io");

    let out = ok(dir.path(), &["--help"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("bench"));
}
