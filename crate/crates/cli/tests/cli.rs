use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_diqc"));
    c.env_remove("DIQC_SOLVER_TOL");
    c
}

fn model(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("models").join(name)
}

/// Copies a bundled model into a fresh directory so outputs land there.
fn staged(name: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let dst = dir.path().join(name);
    std::fs::copy(model(name), &dst).unwrap();
    (dir, dst)
}

fn run(cmd: &mut Command) -> (i32, String, String) {
    let Output { status, stdout, stderr } = cmd.output().unwrap();
    (status.code().unwrap(), String::from_utf8(stdout).unwrap(), String::from_utf8(stderr).unwrap())
}

fn alpha_line(stdout: &str) -> f64 {
    stdout.lines().find_map(|l| l.strip_prefix("alpha = ")).unwrap().trim().parse().unwrap()
}

fn cert_path(model: &Path) -> PathBuf {
    model.with_extension("cert.json")
}

#[test]
fn certify_first_order_lag() {
    let (_d, m) = staged("lti_first_order.model");
    let (code, out, err) = run(bin().arg("certify").arg(&m));
    assert_eq!(code, 0, "{out}{err}");
    assert!((alpha_line(&out) - 1.0).abs() < 1e-3);
    let cert: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(cert_path(&m)).unwrap()).unwrap();
    assert_eq!(cert["multiplier_id"], "none");
    assert_eq!(cert["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn certify_jet_without_delay() {
    let (_d, m) = staged("jet.model");
    let (code, out, err) = run(bin().arg("certify").arg(&m).args(["--theta", "0"]));
    assert_eq!(code, 0, "{out}{err}");
    assert!(alpha_line(&out) <= 1.0);
}

#[test]
fn infeasible_delay_exits_two_without_certificate() {
    let (_d, m) = staged("jet.model");
    let (code, out, _) = run(bin().arg("certify").arg(&m).args(["--theta", "0.16"]));
    assert_eq!(code, 2, "{out}");
    assert!(out.contains("not certified"));
    assert!(!cert_path(&m).exists());
}

#[test]
fn malformed_polynomial_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("bad.model");
    let src = std::fs::read_to_string(model("lti_first_order.model")).unwrap().replace("\"-x + d\"", "\"-x + * d\"");
    std::fs::write(&m, src).unwrap();
    let (code, _, err) = run(bin().arg("certify").arg(&m));
    assert_eq!(code, 1);
    assert!(err.contains("bad.model:6:"), "{err}");
    assert!(err.contains("column"), "{err}");
}

#[test]
fn missing_model_is_an_error() {
    let (code, _, err) = run(bin().args(["certify", "/nonexistent/x.model"]));
    assert_eq!(code, 1);
    assert!(err.starts_with("error:"));
}

#[test]
fn single_theta_sweep_matches_certify() {
    let (_d, m) = staged("jet.model");
    let (code, csv, _) = run(bin().arg("sweep").arg(&m).args(["--theta", "0.04"]));
    assert_eq!(code, 0);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "theta,alpha,solve_time,status");
    assert_eq!(lines.len(), 2);
    let cols: Vec<&str> = lines[1].split(',').collect();
    let a_sweep: f64 = cols[1].parse().unwrap();
    let (_, out, _) = run(bin().arg("certify").arg(&m).args(["--theta", "0.04"]));
    let cert: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(cert_path(&m)).unwrap()).unwrap();
    assert_eq!(a_sweep, cert["alpha"].as_f64().unwrap());
    assert!((alpha_line(&out) - a_sweep).abs() < 1e-6);
}

#[test]
fn full_sweep_table_and_exit_code() {
    let (_d, m) = staged("jet.model");
    let out_csv = m.with_extension("csv");
    let (code, csv, err) = run(bin().arg("sweep").arg(&m).args(["--jobs", "2", "--out"]).arg(&out_csv));
    // the two largest delays are not certified
    assert_eq!(code, 2, "{csv}{err}");
    assert_eq!(csv.lines().count(), 6);
    assert!(err.contains("nondecreasing in theta: yes"));
    let written = std::fs::read_to_string(&out_csv).unwrap();
    assert_eq!(written, csv);
}

#[test]
fn empty_theta_list_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("nosweep.model");
    let src = std::fs::read_to_string(model("jet.model")).unwrap().replace("thetas = [0.0, 0.04, 0.08, 0.12, 0.16]", "thetas = []");
    std::fs::write(&m, src).unwrap();
    let (code, _, err) = run(bin().arg("sweep").arg(&m));
    assert_eq!(code, 1);
    assert!(err.contains("empty theta list"), "{err}");
}

#[test]
fn validate_fresh_and_tampered_certificates() {
    let (_d, m) = staged("lti_first_order.model");
    assert_eq!(run(bin().arg("certify").arg(&m)).0, 0);
    let cp = cert_path(&m);
    let (code, out, err) = run(bin().arg("validate").arg(&m).arg(&cp));
    assert_eq!(code, 0, "{out}{err}");
    assert!(out.lines().all(|l| l.starts_with("PASS")), "{out}");

    let mut cert: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cp).unwrap()).unwrap();
    let g = cert["gamma"].as_f64().unwrap();
    cert["gamma"] = serde_json::json!(g / 2.0);
    cert["alpha"] = serde_json::json!((g / 2.0).sqrt());
    let tampered = m.with_extension("tampered.json");
    std::fs::write(&tampered, serde_json::to_string(&cert).unwrap()).unwrap();
    let (code, out, _) = run(bin().arg("validate").arg(&m).arg(&tampered));
    assert_eq!(code, 2);
    assert!(out.lines().any(|l| l.starts_with("FAIL lmi samples")), "{out}");
}

#[test]
fn validate_rejects_foreign_or_missing_certificate() {
    let (_d, m) = staged("lti_first_order.model");
    let (_d2, jet) = staged("jet.model");
    assert_eq!(run(bin().arg("certify").arg(&jet)).0, 0);
    let (code, _, err) = run(bin().arg("validate").arg(&m).arg(cert_path(&jet)));
    assert_eq!(code, 1);
    assert!(err.contains("different model"), "{err}");
    let (code, _, _) = run(bin().arg("validate").arg(&m).arg(m.with_extension("missing.json")));
    assert_eq!(code, 1);
}

#[test]
fn certificates_are_deterministic() {
    let (_d, m) = staged("jet.model");
    let a = m.with_extension("a.json");
    let b = m.with_extension("b.json");
    assert_eq!(run(bin().arg("certify").arg(&m).args(["--theta", "0.04", "--out"]).arg(&a)).0, 0);
    assert_eq!(run(bin().arg("certify").arg(&m).args(["--theta", "0.04", "--out"]).arg(&b)).0, 0);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn selftest_passes_and_is_repeatable() {
    let (code, first, _) = run(bin().arg("selftest"));
    assert_eq!(code, 0, "{first}");
    let (_, second, _) = run(bin().arg("selftest"));
    assert_eq!(first, second);
}

#[test]
fn loose_solver_tolerance_breaks_gain_equivalence() {
    let (code, out, _) = run(bin().arg("selftest").env("DIQC_SOLVER_TOL", "1e-2"));
    assert_eq!(code, 2);
    assert!(out.lines().any(|l| l.starts_with("FAIL lti gain equivalence")), "{out}");
}

#[test]
fn overrides_change_the_problem() {
    let (_d, m) = staged("jet.model");
    let (code, out, err) = run(bin().arg("certify").arg(&m).args(["--p-degree", "2", "--mult-degree", "2", "--seed", "3", "--tol", "1e-8"]));
    assert_eq!(code, 0, "{out}{err}");
    // a richer storage function cannot do worse
    assert!(alpha_line(&out) <= 0.7934 + 1e-3);
    let (code, _, _) = run(bin().arg("certify").arg(&m).args(["--tol", "-1"]));
    assert_eq!(code, 1);
    let (code, _, _) = run(bin().args(["certify", "--bogus"]));
    assert_eq!(code, 1);
}
