use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hemibubble"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn model(dir: &TempDir, name: &str, dk: f64, diag: [f64; 4]) -> PathBuf {
    let mut h = vec![0.0; 16];
    for i in 0..4 {
        h[i * 5] = diag[i];
    }
    let doc = serde_json::json!({"n": 5, "K_z": 1.0, "dK_dnu": dk, "hessK1": h});
    let p = dir.path().join(name);
    std::fs::write(&p, doc.to_string()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn constants_n5() {
    let out = run(&["constants", "--n", "5"]);
    assert!(out.status.success());
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["cbar"].as_f64().unwrap(), 0.1875);
    assert!(v["max_rel_diff"].as_f64().unwrap() <= 1e-8);
    assert!(v["quadrature"]["S_n"].is_number() && v["closed_form"]["c5"].is_number());
}

#[test]
fn constants_rejects_n4() {
    let out = run(&["constants", "--n", "4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n >= 5"));
}

#[test]
fn seventeen_digit_floats() {
    let out = stdout(&run(&["constants", "--n", "6"]));
    assert!(out.contains("\"cbar\": 1.6666666666666666e-1") || out.contains("e-1"));
    for line in out.lines().filter(|l| l.contains("\"c2\"")) {
        let num = line.split(':').nth(1).unwrap().trim().trim_end_matches(',');
        let mantissa = num.split('e').next().unwrap().trim_start_matches('-');
        assert_eq!(mantissa.replace('.', "").len(), 17, "{num}");
    }
}

#[test]
fn critical_points_closed_form_and_determinism() {
    let dir = TempDir::new().unwrap();
    let m = model(&dir, "m.json", 1.0, [2.0, 1.0, 1.0, 1.0]);
    let args = ["critical-points", "--model", s(&m), "--m", "2", "--seeds", "16", "--seed", "3"];
    let a = run(&args);
    assert!(a.status.success());
    let v: Value = serde_json::from_str(&stdout(&a)).unwrap();
    let first = &v["critical_points"][0];
    assert_eq!(first["method"], "closed_form");
    let x0 = first["cfg"]["points"][0][0].as_f64().unwrap().abs();
    assert!((x0 - (0.1875f64 / 2.0).powf(0.2)).abs() < 1e-14);
    let b = run(&args);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn negative_definite_gives_empty_list_with_note() {
    let dir = TempDir::new().unwrap();
    let m = model(&dir, "neg.json", 1.0, [-1.0; 4]);
    let out = run(&["critical-points", "--model", s(&m), "--m", "2", "--seeds", "32"]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["critical_points"].as_array().unwrap().len(), 0);
    assert!(v["note"].as_str().unwrap().contains("local maximum"));
}

#[test]
fn unreadable_model_is_a_usage_error() {
    let out = run(&["critical-points", "--model", "/nonexistent/model.json", "--m", "2"]);
    assert_eq!(out.status.code(), Some(2));
    let dir = TempDir::new().unwrap();
    let m = model(&dir, "deg.json", 1.0, [1.0, 0.0, 1.0, 1.0]);
    assert_eq!(run(&["critical-points", "--model", s(&m), "--m", "2"]).status.code(), Some(2));
}

#[test]
fn configure_emits_balanced_ensemble() {
    let dir = TempDir::new().unwrap();
    let m = model(&dir, "m.json", 1.0, [2.0, 1.0, 1.0, 1.0]);
    let out = run(&["configure", "--model", s(&m), "--m", "2", "--eps", "1e-3", "--crit-index", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["check_M_eps"], true);
    assert!(v["gamma"].as_f64().unwrap() > 0.0);
    let c = serde_json::from_str::<Value>(&stdout(&run(&["constants", "--n", "5"]))).unwrap();
    let ratio = c["closed_form"]["c4"].as_f64().unwrap() / c["closed_form"]["c3"].as_f64().unwrap();
    for r in v["inv_lambda_over_eps"].as_array().unwrap() {
        assert!((r.as_f64().unwrap() / ratio - 1.0).abs() < 1e-12);
    }
}

#[test]
fn configure_regime_errors() {
    let dir = TempDir::new().unwrap();
    let m = model(&dir, "m.json", -0.5, [2.0, 1.0, 1.0, 1.0]);
    let out = run(&["configure", "--model", s(&m), "--m", "2", "--eps", "1e-3"]);
    assert_eq!(out.status.code(), Some(3));
    let m = model(&dir, "ok.json", 1.0, [2.0, 1.0, 1.0, 1.0]);
    // C = 1.5 puts 1/lambda = 1.77 eps outside the band
    let out = run(&["configure", "--model", s(&m), "--m", "2", "--eps", "1e-3", "--c", "1.5"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("margin"));
}

#[test]
fn verify_expansion_csv_shape_and_determinism() {
    let dir = TempDir::new().unwrap();
    let m = model(&dir, "m.json", 1.0, [2.0, 1.0, 1.0, 1.0]);
    let args = [
        "verify-expansion", "--model", s(&m), "--m", "2", "--eps", "1e-2,3e-3,1e-3,3e-4", "--samples", "100000",
        "--seed", "5",
    ];
    let a = run(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let text = stdout(&a);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "eps,kind,analytic,numeric,stderr,residual,fitted_order,ci_low,ci_high,expected_order,se_target_met"
    );
    assert_eq!(lines.len(), 1 + 12 + 3);
    assert!(lines[13].starts_with(",fit:alpha,"));
    let lambda_fit: Vec<&str> = lines[14].split(',').collect();
    let slope: f64 = lambda_fit[6].parse().unwrap();
    assert!((slope - 1.2).abs() < 0.15, "lambda exponent {slope}");
    assert_eq!(a.stdout, run(&args).stdout);
}

#[test]
fn verify_expansion_rejects_empty_eps() {
    let dir = TempDir::new().unwrap();
    let m = model(&dir, "m.json", 1.0, [2.0, 1.0, 1.0, 1.0]);
    assert_eq!(run(&["verify-expansion", "--model", s(&m), "--m", "2", "--eps"]).status.code(), Some(2));
    assert_eq!(run(&["verify-expansion", "--model", s(&m), "--m", "2"]).status.code(), Some(2));
}

fn parse_grid(text: &str) -> Vec<(f64, f64, Option<f64>)> {
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let val = if f[3] == "1" { None } else { Some(f[2].parse().unwrap()) };
            (f[0].parse().unwrap(), f[1].parse().unwrap(), val)
        })
        .collect()
}

#[test]
fn landscape_single_cell_matches_critical_value() {
    let dir = TempDir::new().unwrap();
    let m = model(&dir, "m.json", 1.0, [2.0, 1.0, 1.0, 1.0]);
    let out = run(&["landscape", "--model", s(&m), "--m", "2", "--through-critical", "0", "--grid", "1x1"]);
    assert!(out.status.success());
    let rows = parse_grid(&stdout(&out));
    assert_eq!(rows.len(), 1);
    let cp: Value = serde_json::from_str(&stdout(&run(&["critical-points", "--model", s(&m), "--m", "2"]))).unwrap();
    // the report sums F over its own point order; allow rounding only
    let want = cp["critical_points"][0]["value"].as_f64().unwrap();
    assert!((rows[0].2.unwrap() - want).abs() <= 4.0 * f64::EPSILON * want);
}

#[test]
fn landscape_shows_saddle_signature() {
    let dir = TempDir::new().unwrap();
    let m = model(&dir, "m.json", 1.0, [4.0, 3.0, 2.0, 1.0]);
    // closed form at eigenvalue 2: Hessian spectrum starts -1, 1, ...
    let out = run(&[
        "landscape", "--model", s(&m), "--m", "2", "--through-critical", "1", "--grid", "3", "--extent", "0.05",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = parse_grid(&stdout(&out));
    let at = |a: usize, b: usize| rows[a * 3 + b].2.unwrap();
    let centre = at(1, 1);
    assert!(at(0, 1) < centre && at(2, 1) < centre, "F should fall along the negative direction");
    assert!(at(1, 0) > centre && at(1, 2) > centre, "F should rise along the positive direction");
}

#[test]
fn landscape_marks_singular_cells() {
    let dir = TempDir::new().unwrap();
    let m = model(&dir, "m.json", 1.0, [2.0, 1.0, 1.0, 1.0]);
    let plane = dir.path().join("plane.json");
    let doc = serde_json::json!({
        "origin": [[0.1, 0.0, 0.0, 0.0], [-0.1, 0.0, 0.0, 0.0]],
        "u": [[1.0, 0.0, 0.0, 0.0], [-1.0, 0.0, 0.0, 0.0]],
        "v": [[0.0, 1.0, 0.0, 0.0], [0.0, -1.0, 0.0, 0.0]],
        "s_range": [-0.1, 0.1],
        "t_range": [0.0, 0.0]
    });
    std::fs::write(&plane, doc.to_string()).unwrap();
    let out = run(&["landscape", "--model", s(&m), "--m", "2", "--plane", s(&plane), "--grid", "3x1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let rows = parse_grid(&text);
    assert_eq!(rows.len(), 3);
    assert!(rows[0].2.is_none());
    assert!(text.lines().nth(1).unwrap().ends_with(",,1"));
    assert!(rows[1].2.is_some() && rows[2].2.is_some());
    let out = run(&["landscape", "--model", s(&m), "--m", "2", "--plane", s(&plane), "--grid", "1x1"]);
    assert!(out.status.success());
    // a slice where every cell is singular
    let zero = [0.0; 4];
    let e1 = [1.0, 0.0, 0.0, 0.0];
    let doc = serde_json::json!({ "origin": [zero, zero], "u": [e1, e1], "v": [zero, zero] });
    std::fs::write(&plane, doc.to_string()).unwrap();
    let out = run(&["landscape", "--model", s(&m), "--m", "2", "--plane", s(&plane), "--grid", "2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn manifest_records_parameters() {
    let dir = TempDir::new().unwrap();
    let mpath = dir.path().join("run.json");
    let outp = dir.path().join("c.json");
    let out = run(&["--manifest", s(&mpath), "constants", "--n", "7", "--output", s(&outp)]);
    assert!(out.status.success());
    let man: Value = serde_json::from_str(&std::fs::read_to_string(&mpath).unwrap()).unwrap();
    assert_eq!(man["command"], "constants");
    assert_eq!(man["parameters"]["n"], 7);
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&outp).unwrap()).unwrap();
    assert_eq!(doc["n"], 7);
}
