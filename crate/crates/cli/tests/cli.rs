use std::process::{Command, Output};

use serde_json::Value;

fn heatlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_heatlab")).args(args).output().expect("spawn heatlab")
}

fn report(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("report is JSON")
}

fn number(v: &Value) -> f64 {
    v.as_f64().expect("number")
}

#[test]
fn round_sphere_is_consistent() {
    let out = heatlab(&["run", "ihki-sphere", "--space", "sphere(2,1.0)"]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&out);
    assert_eq!(r["verdict"], "IHKI-consistent");
    assert!(r["witness"].is_null());
}

#[test]
fn unequal_product_fails_with_witness() {
    let out = heatlab(&["run", "ihki-product", "--space", "product(sphere(2,1.0),circle(0.5))"]);
    assert_eq!(out.status.code(), Some(1));
    let r = report(&out);
    assert_eq!(r["verdict"], "fails");
    assert!(number(&r["witness"]["observed"]) > number(&r["witness"]["bound"]));
    assert!(String::from_utf8_lossy(&out.stderr).contains("invariant failed"));
}

#[test]
fn unknown_scenario_is_a_usage_error() {
    let out = heatlab(&["run", "no-such-thing"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ihki-sphere"));
}

#[test]
fn reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let files: Vec<_> = (0..2)
        .map(|i| {
            let json = dir.path().join(format!("r{i}.json"));
            let csv = dir.path().join(format!("r{i}.csv"));
            let out = heatlab(&[
                "run",
                "example-4-5",
                "--out",
                json.to_str().unwrap(),
                "--csv",
                csv.to_str().unwrap(),
            ]);
            assert!(out.stdout.is_empty());
            (std::fs::read(json).unwrap(), std::fs::read(csv).unwrap())
        })
        .collect();
    assert_eq!(files[0], files[1]);
    assert!(!files[0].1.is_empty());
}

#[test]
fn eval_prints_certified_value() {
    let out = heatlab(&["eval", "--space", "circle(1.0)", "--x", "0", "--y", "0", "--t", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let v = report(&out);
    // θ₃(0, e^{−1}) / 2π by direct summation.
    let direct: f64 = (-40i32..=40).map(|k| (-(k * k) as f64).exp()).sum::<f64>() / (2.0 * std::f64::consts::PI);
    assert!((number(&v["value"]) - direct).abs() <= 1e-8);
}

#[test]
fn spectrum_of_the_two_sphere() {
    let out = heatlab(&["spectrum", "--space", "sphere(2,1.0)", "--levels", "4"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 5);
    for (l, row) in rows.iter().enumerate() {
        assert_eq!(row[1].parse::<f64>().unwrap(), (l * (l + 1)) as f64);
        assert_eq!(row[2].parse::<usize>().unwrap(), 2 * l + 1);
    }
}

#[test]
fn level_budget_is_enforced() {
    let out = Command::new(env!("CARGO_BIN_EXE_heatlab"))
        .args(["eval", "--space", "sphere(2,1.0)", "--x", "0,0,1", "--y", "0,0,1", "--t", "0.01", "--tol", "1e-12"])
        .env("HEATLAB_MAX_LEVELS", "2")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
}

#[test]
fn cone_over_unit_circle_is_flat() {
    let out = heatlab(&["run", "cone-flatness"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(number(&report(&out)["values"]["max_abs_diff"]) <= 1e-8);
}

#[test]
fn small_time_slope() {
    let out = heatlab(&["run", "asymptotics", "--space", "sphere(3,1.0)"]);
    assert_eq!(out.status.code(), Some(0));
    let v = &report(&out)["values"];
    let (slope, expected) = (number(&v["slope"]), number(&v["expected_slope"]));
    assert!((slope - expected).abs() <= 0.05 * expected.abs());
}
