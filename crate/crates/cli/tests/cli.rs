use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn heatstop(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_heatstop"))
        .current_dir(dir)
        .env_remove("HEATSTOP_OUTPUT_DIR")
        .env_remove("HEATSTOP_PARALLELISM")
        .env_remove("RUST_LOG")
        .args(args)
        .output()
        .expect("binary runs")
}

fn data_rows(text: &str) -> Vec<&str> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .collect()
}

fn error_record(out: &Output) -> serde_json::Value {
    let line = String::from_utf8_lossy(&out.stderr);
    let last = line.lines().last().expect("stderr line");
    serde_json::from_str(last).expect("json error record")
}

#[test]
fn validate_bundled_scenario_is_clean() {
    let dir = tempfile::tempdir().unwrap();
    let out = heatstop(dir.path(), &["validate"]);
    assert!(out.status.success());
    assert!(
        out.stderr.is_empty(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("scenario bundled ok"));
}

#[test]
fn missing_scenario_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = heatstop(dir.path(), &["validate", "--scenario", "missing.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out);
    assert_eq!(rec["error"], "validation");
    assert_eq!(rec["exit_code"], 2);
}

#[test]
fn bad_policy_parameter_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = heatstop(dir.path(), &["simulate", "--beta", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["error"], "validation");
}

#[test]
fn trace_estimate_converges_to_drawn_requirement() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "trace",
        "--expected",
        "308.84",
        "--cv",
        "0.30",
        "--beta",
        "0.95",
        "--alpha0",
        "0.2",
        "--alpha-floor",
        "0.02",
        "--seed",
        "3",
    ];
    let out = heatstop(dir.path(), &args);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("# heatstop "));
    let phi: f64 = text
        .lines()
        .find_map(|l| l.split(" phi=").nth(1))
        .unwrap()
        .parse()
        .unwrap();
    let est: Vec<f64> = data_rows(&text)
        .iter()
        .map(|l| l.split(',').nth(5).unwrap().parse().unwrap())
        .collect();
    assert!(est.len() > 10);
    let early = (est[1] - phi).abs();
    let late = (est[est.len() - 1] - phi).abs();
    assert!(late < early.max(10.0), "{early} -> {late}");
    assert!(data_rows(&text).last().unwrap().ends_with(",terminate"));

    // same arguments, same bytes
    let again = heatstop(dir.path(), &args);
    assert_eq!(text.as_bytes(), &again.stdout[..]);
}

#[test]
fn simulate_writes_records_with_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let out = heatstop(
        dir.path(),
        &[
            "simulate",
            "--policy",
            "opt",
            "--factor",
            "1.0",
            "--horizon-years",
            "1.5",
            "--warmup-years",
            "0.5",
            "--out",
            "records.csv",
        ],
    );
    assert!(out.status.success());
    let text = fs::read_to_string(dir.path().join("records.csv")).unwrap();
    assert!(text.starts_with("# heatstop ") && text.lines().next().unwrap().contains("seed=0:0"));
    assert!(data_rows(&text).len() > 20);
}

#[test]
fn calibrate_reports_every_program() {
    let dir = tempfile::tempdir().unwrap();
    let out = heatstop(dir.path(), &["calibrate"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(data_rows(&text).len(), 4);
    assert!(text.contains("# weighted cv="));
    assert!(data_rows(&text)[0].starts_with("Negative,"));
}

#[test]
fn sweep_analyze_pareto_on_desk_grid() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = heatstop(
        dir.path(),
        &["sweep", "--output-dir", "a", "--parallelism", "2"],
    );
    assert!(
        sweep.status.success(),
        "{}",
        String::from_utf8_lossy(&sweep.stderr)
    );
    let a = dir.path().join("a");
    // 1 CV x (3 factors x 3 rework + 2 alpha0 x 3 beta x 3 rework + 3 baseline + 1 ideal)
    let points = 9 + 18 + 3 + 1;
    let results = fs::read_to_string(a.join("results.csv")).unwrap();
    assert_eq!(data_rows(&results).len(), 2 * points);

    let analyze = Command::new(env!("CARGO_BIN_EXE_heatstop"))
        .current_dir(dir.path())
        .env("HEATSTOP_OUTPUT_DIR", "a")
        .arg("analyze")
        .output()
        .unwrap();
    assert!(
        analyze.status.success(),
        "{}",
        String::from_utf8_lossy(&analyze.stderr)
    );
    let kpis = fs::read_to_string(a.join("kpis.csv")).unwrap();
    assert_eq!(data_rows(&kpis).len(), points);
    let cmp = fs::read_to_string(a.join("comparison.csv")).unwrap();
    assert_eq!(data_rows(&cmp).len(), 4);
    let first = results.lines().next().unwrap();
    assert!(first.starts_with("# heatstop ") && first.contains("grid="));
    assert_eq!(kpis.lines().next().unwrap(), first);

    let pareto = heatstop(dir.path(), &["pareto", "--output-dir", "a"]);
    assert!(pareto.status.success());
    let table = fs::read_to_string(a.join("pareto.csv")).unwrap();
    let rows = data_rows(&table);
    assert_eq!(rows.len(), points);
    let on_front = rows
        .iter()
        .filter(|r| r.split(',').nth(10) == Some("true"))
        .count();
    assert!(on_front >= 1);
    for r in rows {
        let cols: Vec<&str> = r.split(',').collect();
        assert_eq!(cols[10] == "true", cols[11].is_empty(), "{r}");
    }

    // a second store from scratch is byte-identical; rerunning in place executes nothing
    let again = heatstop(
        dir.path(),
        &["sweep", "--output-dir", "b", "--parallelism", "1"],
    );
    assert!(again.status.success());
    assert_eq!(
        results,
        fs::read_to_string(dir.path().join("b/results.csv")).unwrap()
    );
    let resumed = heatstop(dir.path(), &["sweep", "--output-dir", "a"]);
    assert!(String::from_utf8_lossy(&resumed.stdout).contains("0 executed"));
}

#[test]
fn sweep_with_failed_runs_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    // the post-warm-up window is too short for any batch, so every run fails
    fs::write(
        dir.path().join("grid.toml"),
        "cv_levels = [0.3]\nalpha0_levels = [0.2]\nmain_factor_levels = [1.0]\n\
         rework_factor_levels = [0.1]\nbeta_levels = [0.6]\nreplications = 1\n\
         horizon_years = 0.02\nwarmup_years = 0.01\n",
    )
    .unwrap();
    let out = heatstop(
        dir.path(),
        &["sweep", "--grid", "grid.toml", "--output-dir", "s"],
    );
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_record(&out)["error"], "partial_sweep");
    assert!(dir.path().join("s/failed.csv").exists());
}
