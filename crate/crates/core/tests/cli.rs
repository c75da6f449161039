// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

use steerkit::io;
use steerkit::transforms::{self, LinearLayer};
use steerkit::Matrix;

fn steerkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_steerkit"))
        .args(args)
        .current_dir(dir)
        .env_remove(steerkit::cli::RANK_TOL_ENV)
        .output()
        .expect("spawn steerkit")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = steerkit(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn prepare(dir: &Path, concepts: &str, layout: &str) {
    ok(dir, &["synth", "--dim", "6", "--concepts", concepts, "--layout", layout, "--n", "800", "--seed", "3", "--activations", "x.actv", "--labels", "z.lblv"]);
    ok(dir, &["estimate", "--activations", "x.actv", "--labels", "z.lblv", "--out", "m.json"]);
}

#[test]
fn seeded_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        prepare(dir, "2", "independent");
        ok(dir, &["fit", "--moments", "m.json", "--mode", "midsteer", "--deterministic", "--out", "t.json"]);
    }
    for name in ["x.actv", "z.lblv", "m.json", "t.json"] {
        let left = std::fs::read(a.path().join(name)).unwrap();
        let right = std::fs::read(b.path().join(name)).unwrap();
        assert!(left == right, "{name} differs between runs");
    }
}

#[test]
fn timestamp_only_without_deterministic_flag() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), "1", "independent");
    ok(dir.path(), &["fit", "--moments", "m.json", "--mode", "erase", "--out", "t.json"]);
    let t = io::read_transform(&dir.path().join("t.json")).unwrap();
    assert!(t.provenance.contains_key("created_unix"));
    ok(dir.path(), &["fit", "--moments", "m.json", "--mode", "erase", "--deterministic", "--out", "t.json"]);
    let t = io::read_transform(&dir.path().join("t.json")).unwrap();
    assert!(!t.provenance.contains_key("created_unix"));
}

#[test]
fn erase_and_switch_verify_with_default_targets() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), "1", "independent");
    ok(dir.path(), &["fit", "--moments", "m.json", "--mode", "erase", "--out", "erase.json"]);
    let report = ok(dir.path(), &["verify", "--transform", "erase.json", "--activations", "x.actv", "--labels", "z.lblv"]);
    assert!(report.contains("target: zero"));
    assert!(report.contains("check guardedness: PASS"));

    ok(dir.path(), &["fit", "--moments", "m.json", "--mode", "switch", "--out", "switch.json"]);
    let report = ok(dir.path(), &["verify", "--transform", "switch.json", "--activations", "x.actv", "--labels", "z.lblv", "--csv"]);
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some(steerkit::verify::VerificationReport::CSV_HEADER));
    let row = lines.next().unwrap();
    assert!(row.starts_with("leace-switch,2,negated,"));
    assert!(row.ends_with(",true"));
}

#[test]
fn overridden_target_fails_with_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), "1", "independent");
    ok(dir.path(), &["fit", "--moments", "m.json", "--mode", "switch", "--out", "switch.json"]);
    let out = steerkit(dir.path(), &["verify", "--transform", "switch.json", "--activations", "x.actv", "--labels", "z.lblv", "--target", "zero"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("result: FAIL"));
}

#[test]
fn beta_flag_overrides_default() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), "1", "exclusive");
    ok(dir.path(), &["fit", "--moments", "m.json", "--mode", "switch", "--beta", "0.5", "--out", "t.json"]);
    let t = io::read_transform(&dir.path().join("t.json")).unwrap();
    assert_eq!(t.beta, 0.5);
}

#[test]
fn fold_matches_post_hoc_application() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), "1", "independent");
    ok(dir.path(), &["fit", "--moments", "m.json", "--mode", "erase", "--out", "t.json"]);
    let weight = Matrix::from_fn(6, 3, |i, j| (i as f64 - j as f64) * 0.3 + 0.1);
    let bias = steerkit::Vector::from_fn(6, |i, _| i as f64 * 0.5);
    let layer = LinearLayer::new(weight, bias).unwrap();
    io::write_layer(&layer, &dir.path().join("l.layr")).unwrap();
    ok(dir.path(), &["fold", "--transform", "t.json", "--layer", "l.layr", "--out", "folded.layr"]);

    let t = io::read_transform(&dir.path().join("t.json")).unwrap();
    let folded = io::read_layer(&dir.path().join("folded.layr")).unwrap();
    assert_eq!(folded, transforms::fold_into_layer(&t, &layer).unwrap());
    let h = steerkit::Vector::from_row_slice(&[0.3, -1.0, 2.0]);
    let post_hoc = t.apply_vector(&layer.forward(&h).unwrap()).unwrap();
    assert!((post_hoc - folded.forward(&h).unwrap()).amax() <= 1e-9);
}

#[test]
fn separate_background_and_target_label_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--dim", "5", "--concepts", "1", "--n", "600", "--seed", "1", "--activations", "x.actv", "--labels", "z1.lblv"]);
    ok(d, &["synth", "--dim", "5", "--concepts", "1", "--n", "600", "--seed", "2", "--activations", "bg.actv", "--labels", "z2.lblv"]);
    let out = ok(d, &["estimate", "--activations", "x.actv", "--labels", "z1.lblv", "--target-labels", "z2.lblv", "--background", "bg.actv", "--cross-samples", "500", "--cov-samples", "400", "--out", "m.json"]);
    assert!(out.contains("400 covariance rows, 500 labeled rows"));
    let m = io::read_moments(&d.join("m.json")).unwrap();
    assert_eq!((m.label_dim(), m.samples, m.cross_samples), (2, 400, 500));
}

#[test]
fn csv_activations_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--dim", "2", "--n", "30", "--activations", "x.actv", "--labels", "z.lblv"]);
    let x = io::read_activations(&d.join("x.actv")).unwrap();
    let mut csv = String::from("x0,x1\n");
    for row in x.row_iter() {
        csv.push_str(&format!("{:e},{:e}\n", row[0], row[1]));
    }
    std::fs::write(d.join("x.csv"), csv).unwrap();
    ok(d, &["estimate", "--activations", "x.csv", "--labels", "z.lblv", "--out", "m.json"]);
}

#[test]
fn mismatched_rows_and_range_violations_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--dim", "3", "--n", "50", "--activations", "x.actv", "--labels", "z.lblv"]);
    ok(d, &["synth", "--dim", "3", "--n", "40", "--activations", "y.actv", "--labels", "w.lblv"]);
    let out = steerkit(d, &["estimate", "--activations", "x.actv", "--labels", "w.lblv", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("DimensionMismatch"));

    let m = steerkit::moments::MomentEstimate {
        mean: steerkit::Vector::zeros(2),
        cov_xx: Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
        cov_xz: Matrix::from_row_slice(2, 1, &[0.2, 0.3]),
        samples: 10,
        cross_samples: 10,
    };
    io::write_moments(&m, &d.join("bad.json")).unwrap();
    let out = steerkit(d, &["fit", "--moments", "bad.json", "--mode", "erase", "--out", "t.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("RangeViolation"));
    ok(d, &["fit", "--moments", "bad.json", "--mode", "erase", "--project", "--out", "t.json"]);
}
