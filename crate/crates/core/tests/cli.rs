use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use brokenstick::io::read_draws;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brokenstick"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_toy_csv(path: &Path) {
    let mut text = String::from("child_id,age_years,haz\n");
    for c in 0..5 {
        for j in 0..6 {
            let t = 0.05 + 0.15 * j as f64;
            let z = -0.5 + c as f64 * 0.3 - (c % 2) as f64 * 1.5 * t + 0.01 * j as f64;
            text.push_str(&format!("kid{c},{t},{z}\n"));
        }
    }
    fs::write(path, text).unwrap();
}

#[test]
fn simulate_writes_requested_children() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["simulate", "--n", "10", "--seed", "4", "--out", "sim"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["d_fixed.csv", "d_random.csv", "truth.csv", "manifest.json"] {
        assert!(dir.path().join("sim").join(name).exists(), "{name}");
    }
    let data = fs::read_to_string(dir.path().join("sim/d_fixed.csv")).unwrap();
    let ids: std::collections::BTreeSet<&str> = data.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids.len(), 10);
}

#[test]
fn toy_fit_retains_schedule_draw_count() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_csv(&dir.path().join("toy.csv"));
    let o = run(
        dir.path(),
        &["fit", "toy.csv", "--iters", "200", "--burnin", "100", "--thin", "5", "--k", "2", "--out", "fit"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let draws = read_draws(&dir.path().join("fit/draws.bin")).unwrap();
    assert_eq!(draws.draws.len(), (200 - 100) / 5);
    let trace = fs::read_to_string(dir.path().join("fit/g_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 201);
    assert!(dir.path().join("fit/acceptance.csv").exists());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_csv(&dir.path().join("toy.csv"));
    fs::write(dir.path().join("run.toml"), "iterations = 50\nburnin = 10\nthin = 1\nk = 2\n").unwrap();
    let o = run(dir.path(), &["fit", "toy.csv", "--config", "run.toml", "--thin", "4", "--out", "fit"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let draws = read_draws(&dir.path().join("fit/draws.bin")).unwrap();
    assert_eq!(draws.draws.len(), 10);
    let manifest = fs::read_to_string(dir.path().join("fit/manifest.json")).unwrap();
    assert!(manifest.contains("\"thin\": 4"), "{manifest}");
}

#[test]
fn malformed_rows_report_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.csv"), "child_id,age_years,haz\na,0.1,0.0\na,1.5,0.2\n").unwrap();
    let o = run(dir.path(), &["fit", "bad.csv", "--iters", "10", "--burnin", "0", "--out", "fit"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("bad.csv:3"), "{err}");
    assert!(err.contains("age 1.5"), "{err}");

    fs::write(dir.path().join("text.csv"), "child_id,age_years,haz\na,0.1,0.0\na,0.2,0.1\na,0.3,low\n").unwrap();
    let o = run(dir.path(), &["fit", "text.csv", "--out", "fit"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("text.csv:4"), "{}", stderr(&o));
}

#[test]
fn outliers_are_rejected_unless_allowed() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("child_id,age_years,haz\n");
    for j in 0..5 {
        text.push_str(&format!("a,{},{}\nb,{},0.5\n", 0.1 + 0.2 * j as f64, -6.5 + 0.1 * j as f64, 0.1 * j as f64));
    }
    fs::write(dir.path().join("low.csv"), text).unwrap();
    let o = run(dir.path(), &["fit", "low.csv", "--k", "2", "--iters", "20", "--burnin", "10", "--out", "fit"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("low.csv:2"), "{}", stderr(&o));
    let o = run(
        dir.path(),
        &["fit", "low.csv", "--k", "2", "--iters", "20", "--burnin", "10", "--allow-outliers", "--out", "fit"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn invalid_settings_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_csv(&dir.path().join("toy.csv"));
    let o = run(dir.path(), &["fit", "toy.csv", "--knots", "wobbly", "--out", "fit"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = run(dir.path(), &["fit", "toy.csv", "--iters", "10", "--burnin", "20", "--out", "fit"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = run(dir.path(), &["classify", "missing.bin", "--out", "c"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn classify_and_summarize_a_fit_with_truth() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["simulate", "--n", "30", "--seed", "2", "--out", "sim"]).status.success());
    let o = run(
        dir.path(),
        &[
            "fit", "sim/d_fixed.csv", "--k", "2", "--knots", "fixed", "--allow-outliers", "--iters", "400", "--burnin",
            "200", "--thin", "2", "--seed", "8", "--out", "fit",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(dir.path(), &["classify", "fit/draws.bin", "--truth", "sim/truth.csv", "--out", "cls"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["assignments.csv", "psm.csv", "pear.txt", "group_trajectories.csv", "ari.txt", "contingency.csv"] {
        assert!(dir.path().join("cls").join(name).exists(), "{name}");
    }
    let assignments = fs::read_to_string(dir.path().join("cls/assignments.csv")).unwrap();
    assert_eq!(assignments.lines().count(), 31);
    let trajectories = fs::read_to_string(dir.path().join("cls/group_trajectories.csv")).unwrap();
    assert_eq!((trajectories.lines().count() - 1) % 101, 0);

    let psm = fs::read_to_string(dir.path().join("cls/psm.csv")).unwrap();
    let rows: Vec<Vec<f64>> = psm
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    for i in 0..rows.len() {
        assert_eq!(rows[i][i], 1.0);
        for j in 0..rows.len() {
            assert_eq!(rows[i][j], rows[j][i]);
        }
    }

    let o = run(dir.path(), &["summarize", "fit/draws.bin", "--truth", "sim/truth.csv", "--out", "sum"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(dir.path().join("sum/summary.csv")).unwrap();
    assert!(summary.starts_with("knot_mode,g_min,g_max,g_mode,g_hat,pear,ari_truth\nfixed,"), "{summary}");
}
