use conelab::verify::{criterion_1, VerifyConfig};
use std::fs;
use std::path::Path;
use std::process::Command;

fn conelab(dir: &Path, args: &[&str], threads: Option<usize>) -> i32 {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_conelab"));
    cmd.current_dir(dir).args(args);
    if let Some(t) = threads {
        cmd.env("RAYON_NUM_THREADS", t.to_string());
    }
    let out = cmd.output().expect("binary runs");
    out.status.code().expect("exit code")
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn spectrum_half_sphere_row() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "n = 3\n[grid]\ninterior = 2000\n[spectrum]\nell_max = 0\nk_max = 2\n").unwrap();
    assert_eq!(conelab(dir.path(), &["spectrum", "--config", "c.toml", "--out", "o"], None), 0);
    let mut rdr = csv::Reader::from_path(dir.path().join("o/spectrum.csv")).unwrap();
    let header = rdr.headers().unwrap().clone();
    let lam = header.iter().position(|h| h == "lambda").unwrap();
    let gam = header.iter().position(|h| h == "gamma").unwrap();
    let first = rdr.records().next().unwrap().unwrap();
    let lambda: f64 = first[lam].parse().unwrap();
    let gamma: f64 = first[gam].parse().unwrap();
    assert!((lambda / 8.75 - 1.0).abs() < 5e-3, "{lambda}");
    assert!((gamma / 3.0 - 1.0).abs() < 3e-3, "{gamma}");
    let report = fs::read_to_string(dir.path().join("o/report.txt")).unwrap();
    assert!(report.contains("config sha256: ") && report.contains("N=2000"));
}

#[test]
fn rho_sweep_respects_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "kind = \"sweep\"\nn = 3\n[grid]\ninterior = 200\n\
               [[sweep]]\ntheta0_over_pi = 0.25\n[[sweep]]\ntheta0_over_pi = 0.6666666666666666\n";
    fs::write(dir.path().join("c.toml"), cfg).unwrap();
    assert_eq!(conelab(dir.path(), &["rho", "--config", "c.toml", "--out", "o"], None), 0);
    let mut rdr = csv::Reader::from_path(dir.path().join("o/rho.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert!(r[5].parse::<f64>().unwrap() <= 4.2);
        assert!(r[6].parse::<f64>().unwrap() <= 2.8);
    }
}

#[test]
fn empty_sweep_succeeds_with_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "kind = \"sweep\"\nsweep = []\n").unwrap();
    assert_eq!(conelab(dir.path(), &["rho", "--config", "c.toml", "--out", "o"], None), 0);
    let report = fs::read_to_string(dir.path().join("o/report.txt")).unwrap();
    assert!(report.contains("cases: 0") && report.contains("0 of 0 checks passed"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "n = 3\n[grid]\nnodes = 8\n").unwrap();
    assert_eq!(conelab(dir.path(), &["rho", "--config", "bad.toml", "--out", "o"], None), 2);
    assert_eq!(conelab(dir.path(), &["rho", "--config", "missing.toml"], None), 2);
    assert_eq!(conelab(dir.path(), &["verify-all", "--refine", "2"], None), 2);
    fs::write(dir.path().join("kind.toml"), "kind = \"spectrum\"\n").unwrap();
    assert_eq!(conelab(dir.path(), &["rho", "--config", "kind.toml"], None), 2);
}

#[test]
fn failed_check_exits_1() {
    // a t-step of 0.5 cannot meet a 1e-6 rate tolerance
    let dir = tempfile::tempdir().unwrap();
    let cfg = "n = 3\n[grid]\ninterior = 16\n[cylinder]\nht = 0.5\nt_max = 14.0\nrel_tol = 1e-6\n";
    fs::write(dir.path().join("c.toml"), cfg).unwrap();
    assert_eq!(conelab(dir.path(), &["solve", "--config", "c.toml", "--out", "o"], None), 1);
    let report = fs::read_to_string(dir.path().join("o/report.txt")).unwrap();
    assert!(report.contains("FAIL [n3_t0.500000_N16] slice-norm rate rel err"), "{report}");
}

#[test]
fn coarsened_grid_fails_convergence_criterion() {
    let cfg: VerifyConfig = toml::from_str("rho_levels = [16, 17]\n").unwrap();
    let rep = criterion_1(&cfg);
    assert!(!rep.pass());
    let failing: Vec<_> = rep.metrics.iter().filter(|m| !m.pass).collect();
    assert!(failing.iter().all(|m| m.name.contains("convergence ratio")), "{failing:?}");
    assert!(rep.summary().contains("FAIL") && rep.summary().contains("convergence ratio"));
}

#[test]
fn outputs_are_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "n = 3\n[grid]\ninterior = 60\n[cylinder]\nt_max = 8.0\nht = 0.1\n\
               [[sweep]]\ntheta0_over_pi = 0.5\n[[sweep]]\ntheta0_over_pi = 0.3333333333333333\n[[sweep]]\nn = 4\n";
    fs::write(dir.path().join("c.toml"), cfg).unwrap();
    let mut runs = Vec::new();
    for (out, threads) in [("a", Some(1)), ("b", None), ("c", Some(3))] {
        for verb in ["spectrum", "solve"] {
            let o = format!("{out}_{verb}");
            conelab(dir.path(), &[verb, "--config", "c.toml", "--out", &o, "--refine", "2"], threads);
        }
        runs.push((
            read_dir_sorted(&dir.path().join(format!("{out}_spectrum"))),
            read_dir_sorted(&dir.path().join(format!("{out}_solve"))),
        ));
    }
    assert!(!runs[0].0.is_empty() && !runs[0].1.is_empty());
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0], runs[2]);
}
