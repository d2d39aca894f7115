use heatstop::plantsim::Scenario;
use heatstop::stoppol::PolicySpec;
use heatstop::sweep::{
    enumerate, evaluate, read_results, run_sweep, DesignGrid, Levels, SweepError, SweepOptions,
};
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

const TINY: &str = r#"
cv_levels = [0.30]
alpha0_levels = [0.20]
main_factor_levels = [1.0]
rework_factor_levels = [0.10]
beta_levels = [0.60]
replications = 1
horizon_years = 1.5
warmup_years = 0.5
"#;

fn options(dir: &Path, parallelism: usize) -> SweepOptions {
    SweepOptions {
        output_dir: dir.to_path_buf(),
        parallelism,
        batch_detail: false,
    }
}

#[test]
fn two_points_one_replication_gives_two_rows() {
    let grid = DesignGrid::from_toml(TINY).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = run_sweep(&grid, &Scenario::bundled(), &options(dir.path(), 1)).unwrap();
    assert_eq!(
        (report.total_runs, report.executed, report.skipped),
        (2, 2, 0)
    );
    assert!(report.failed.is_empty());
    let rows = read_results(&report.results_path).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].policy, "opt");
    assert_eq!(rows[1].policy, "sba");
    let text = fs::read_to_string(&report.results_path).unwrap();
    assert!(text.starts_with("# heatstop "));
    assert!(!dir.path().join("failed.csv").exists());
    assert!(dir.path().join("manifest.toml").exists());
}

#[test]
fn desk_grid_row_count_matches_product() {
    let grid = DesignGrid::desk();
    let n = |l: &Levels| l.values().unwrap().len();
    let (cv, a0, mf, rf, b) = (
        n(&grid.cv_levels),
        n(&grid.alpha0_levels),
        n(&grid.main_factor_levels),
        n(&grid.rework_factor_levels),
        n(&grid.beta_levels),
    );
    let expected = cv * mf * rf + cv * a0 * b * rf + cv * rf + cv;
    let points = enumerate(&grid).unwrap();
    assert_eq!(points.len(), expected);
    let ids: BTreeSet<u64> = points.iter().map(|p| p.point_id).collect();
    assert_eq!(ids.len(), points.len());
    assert!(points
        .iter()
        .enumerate()
        .all(|(i, p)| p.point_id == i as u64));
    assert_eq!(
        points
            .iter()
            .filter(|p| matches!(p.policy, PolicySpec::Ideal))
            .count(),
        cv
    );
}

#[test]
fn interrupted_sweep_resumes_to_identical_store() {
    let grid = DesignGrid::desk();
    let scenario = Scenario::bundled();
    let full = tempfile::tempdir().unwrap();
    let a = run_sweep(&grid, &scenario, &options(full.path(), 2)).unwrap();
    assert_eq!(a.executed, a.total_runs);

    // a second store loses some run files and its results table mid-way
    let part = tempfile::tempdir().unwrap();
    run_sweep(&grid, &scenario, &options(part.path(), 1)).unwrap();
    let runs = part.path().join("runs");
    let mut files: Vec<_> = fs::read_dir(&runs)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    let removed: Vec<_> = files.iter().step_by(3).cloned().collect();
    for f in &removed {
        fs::remove_file(f).unwrap();
    }
    fs::remove_file(part.path().join("results.csv")).unwrap();

    let b = run_sweep(&grid, &scenario, &options(part.path(), 1)).unwrap();
    // every missing run executes exactly once and nothing else does
    assert_eq!(b.executed, removed.len());
    assert_eq!(b.skipped, b.total_runs - removed.len());
    assert_eq!(
        fs::read(&a.results_path).unwrap(),
        fs::read(&b.results_path).unwrap()
    );
    let rows = read_results(&b.results_path).unwrap();
    let pairs: BTreeSet<(u64, u32)> = rows.iter().map(|r| (r.point_id, r.replication)).collect();
    assert_eq!(pairs.len(), rows.len());
    assert_eq!(rows.len(), b.total_runs);

    // a third call has nothing left to do
    let c = run_sweep(&grid, &scenario, &options(part.path(), 1)).unwrap();
    assert_eq!(c.executed, 0);
}

#[test]
fn store_matches_in_memory_evaluation() {
    let grid = DesignGrid::from_toml(TINY).unwrap();
    let scenario = Scenario::bundled();
    let dir = tempfile::tempdir().unwrap();
    let report = run_sweep(&grid, &scenario, &options(dir.path(), 1)).unwrap();
    let stored = read_results(&report.results_path).unwrap();
    let (rows, failed) = evaluate(&grid, &scenario, &enumerate(&grid).unwrap(), 2).unwrap();
    assert!(failed.is_empty());
    assert_eq!(stored, rows);
}

#[test]
fn changed_grid_is_refused() {
    let grid = DesignGrid::from_toml(TINY).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run_sweep(&grid, &Scenario::bundled(), &options(dir.path(), 1)).unwrap();
    let mut other = grid.clone();
    other.replications = 2;
    assert!(matches!(
        run_sweep(&other, &Scenario::bundled(), &options(dir.path(), 1)),
        Err(SweepError::Mismatch(_))
    ));
    let scenario = Scenario::bundled().with_cv(0.45).unwrap();
    assert!(matches!(
        run_sweep(&grid, &scenario, &options(dir.path(), 1)),
        Err(SweepError::Mismatch(_))
    ));
}

#[test]
fn invalid_grids_are_rejected() {
    assert!(DesignGrid::from_toml("replications = 0").is_err());
    assert!(DesignGrid::from_toml("beta_levels = [1.5]").is_err());
    assert!(DesignGrid::from_toml("unknown_key = 1").is_err());
    assert!(DesignGrid::from_toml("cv_levels = { min = 0.1, max = 0.3, step = 0.1 }").is_ok());
}

#[test]
fn grid_round_trips_through_toml() {
    let grid = DesignGrid::desk();
    let again = DesignGrid::from_toml(&grid.to_toml()).unwrap();
    assert_eq!(grid, again);
    assert_eq!(grid.digest(), again.digest());
}
