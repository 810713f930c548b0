//! Black-box runs of the `psmatch` binary.

use std::path::Path;
use std::process::{Command, Output};

fn psmatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psmatch")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn value<'a>(report: &'a str, key: &str) -> &'a str {
    report
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(" = ")))
        .unwrap_or_else(|| panic!("no `{key}` in report:\n{report}"))
}

/// Four units whose single covariate equals the intended score ordering.
fn write_four_units(dir: &Path) -> String {
    let path = dir.join("four.csv");
    std::fs::write(&path, "y,w,x1\n5,1,0.62\n1,0,0.50\n3,1,0.40\n2,0,0.71\n").unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn bound_reports_design_one() {
    let out = psmatch(&["bound", "--design", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("2.4731"), "{text}");
    assert_eq!(value(&text, "sigma_eff"), "2.473102");
}

#[test]
fn simulate_is_reproducible() {
    let args = ["simulate", "--design", "1", "--n", "512", "--reps", "50", "--seed", "7"];
    let a = psmatch(&args);
    let b = psmatch(&args);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    assert_eq!(text.lines().filter(|l| l.starts_with("512,")).count(), 5);
}

#[test]
fn simulate_thread_count_does_not_change_output() {
    let one = psmatch(&["simulate", "--n", "128", "--reps", "20", "--threads", "1"]);
    let three = psmatch(&["simulate", "--n", "128", "--reps", "20", "--threads", "3"]);
    assert_eq!(one.stdout, three.stdout);
}

#[test]
fn estimate_small_file() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_four_units(dir.path());
    let out = psmatch(&["estimate", "--input", &input, "--m", "1", "--q", "2", "--l", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let tau: f64 = value(&text, "tau_hat").parse().unwrap();
    assert!((tau - 2.5).abs() < 1e-12);
    assert_eq!(value(&text, "n"), "4");
    assert_eq!(value(&text, "m"), "1");
}

#[test]
fn estimate_writes_report_file() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_four_units(dir.path());
    let report = dir.path().join("report.txt");
    let out = psmatch(&["estimate", "--input", &input, "--m", "1", "--q", "2", "--l", "2", "--output", report.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(report).unwrap();
    assert!(text.contains("tau_hat = 2.5"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_four_units(dir.path());

    let missing = psmatch(&["estimate", "--input", "/no/such/file.csv"]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));

    assert_eq!(psmatch(&["estimate", "--bogus"]).status.code(), Some(2));
    assert_eq!(psmatch(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(psmatch(&["estimate", "--input", &input, "--m", "3"]).status.code(), Some(6));
    assert_eq!(psmatch(&["bound", "--design", "9"]).status.code(), Some(5));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "y,w,x1\n1,1,0.2\n2,0,abc\n").unwrap();
    assert_eq!(psmatch(&["estimate", "--input", bad.to_str().unwrap()]).status.code(), Some(4));

    let one_arm = dir.path().join("one_arm.csv");
    std::fs::write(&one_arm, "y,w,x1\n1,1,0.2\n2,1,0.3\n").unwrap();
    assert_eq!(psmatch(&["estimate", "--input", one_arm.to_str().unwrap()]).status.code(), Some(7));
}

#[test]
fn help_lists_defaults() {
    for sub in ["simulate", "estimate", "bound"] {
        let out = psmatch(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0));
        let text = stdout(&out);
        assert!(text.contains("[default:"), "{sub} help:\n{text}");
    }
    let text = stdout(&psmatch(&["simulate", "--help"]));
    for needle in ["[default: 2000]", "[default: 4]", "[default: csv]"] {
        assert!(text.contains(needle), "missing {needle}");
    }
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_four_units(dir.path());
    let config = dir.path().join("run.toml");
    std::fs::write(&config, format!("input = {input:?}\nm = 1\nq = 2\nl = 2\nalpha = 0.10\n")).unwrap();
    let cfg = config.to_str().unwrap();

    let text = stdout(&psmatch(&["estimate", "--config", cfg]));
    assert_eq!(value(&text, "alpha"), "0.1");
    assert_eq!(value(&text, "q"), "2");

    let text = stdout(&psmatch(&["estimate", "--config", cfg, "--alpha", "0.2"]));
    assert_eq!(value(&text, "alpha"), "0.2");

    let sim = dir.path().join("sim.toml");
    std::fs::write(&sim, "n = [64]\nreps = 5\nm = [1, 2]\n").unwrap();
    let text = stdout(&psmatch(&["simulate", "--config", sim.to_str().unwrap()]));
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("64,1,") && rows[1].starts_with("64,2,"));
}
