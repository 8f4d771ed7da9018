use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stablab"))
        .args(args)
        .env("STABLAB_MAX_THREADS", "2")
        .output()
        .expect("spawn stablab")
}

fn cfg(name: &str) -> String {
    configs().join(name).to_str().unwrap().to_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.json");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn exact_map_exits_zero() {
    let o = run(&["lemma-check", "--config", &cfg("lemma_transpose.json")]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["verdict"], "satisfied");
    assert_eq!(report["command"], "lemma-check");
}

#[test]
fn shift_exits_one_with_witness() {
    let o = run(&["lemma-check", "--config", &cfg("lemma_shift.json")]);
    assert_eq!(o.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["first_failure"], "f(0)=0");
    let step = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "f(0)=0")
        .unwrap();
    assert_eq!(step["worst_witness"]["lhs"], 1.0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("first failure: f(0)=0"));
}

#[test]
fn small_perturbation_passes_loose_tolerance() {
    let o = run(&["lemma-check", "--config", &cfg("lemma_perturbed.json")]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn forward_constant_exits_two_with_trace() {
    let o = run(&["stability", "--config", &cfg("stability_constant_forward.json")]);
    assert_eq!(o.status.code(), Some(2));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["verdict"], "diverged");
    assert_eq!(report["divergence"]["direction"], "forward");
    assert!(report["divergence"]["residuals"].as_array().unwrap().len() >= 6);
}

#[test]
fn config_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["lemma-check", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));

    let p = write_config(dir.path(), "{ not json");
    assert_eq!(run(&["lemma-check", "--config", &p]).status.code(), Some(3));

    let p = write_config(
        dir.path(),
        r#"{"schema": 1, "algebra": {"dim": 2}, "map": {"base": {"kind": "identity"}},
            "sampling": {"seed": 1, "samples": 5, "norm_cap": 1.0, "seeed": 2}}"#,
    );
    let o = run(&["lemma-check", "--config", &p]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("sampling.seeed"), "{err}");

    // Stability without a bound.
    let p = write_config(
        dir.path(),
        r#"{"schema": 1, "algebra": {"dim": 2}, "map": {"base": {"kind": "identity"}},
            "sampling": {"seed": 1, "samples": 5, "norm_cap": 1.0}}"#,
    );
    let o = run(&["stability", "--config", &p]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bound"));

    assert_eq!(run(&["stability"]).status.code(), Some(3));
    assert_eq!(run(&["frobnicate", "--config", &p]).status.code(), Some(3));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn csv_output_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let c = dir.path().join("c.csv");
    for (out, seed) in [(&a, "1"), (&b, "2"), (&c, "1")] {
        let o = run(&[
            "superstability",
            "--config",
            &cfg("superstability_p09.json"),
            "--format",
            "csv",
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0));
    }
    let ta = std::fs::read_to_string(&a).unwrap();
    assert!(ta.starts_with("dim,sample,norm_a,d_first,d_last,slope,expected_slope\n"));
    assert_eq!(ta.lines().count(), 51);
    assert_ne!(ta, std::fs::read_to_string(&b).unwrap());
    assert_eq!(ta, std::fs::read_to_string(&c).unwrap());
    let mut rdr = csv::Reader::from_path(&a).unwrap();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let slope: f64 = rec[5].parse().unwrap();
        assert!((slope + 0.2).abs() < 1e-9);
    }
}

#[test]
fn bounds_table_csv_to_stdout() {
    let o = run(&["bounds-table", "--config", &cfg("bounds_table.json")]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("kind,direction,theta,p,norm_a,closed_form,series,relative_gap,agree,asserted\n"));
    let row = text
        .lines()
        .find(|l| l.starts_with("power,forward,1.0000000000000000e0,2.0000000000000000e0,1.0000000000000000e0,"))
        .unwrap();
    let cols: Vec<&str> = row.split(',').collect();
    let closed: f64 = cols[5].parse().unwrap();
    let series: f64 = cols[6].parse().unwrap();
    assert!((closed - 7.5).abs() <= 1e-12 && (series - 7.5).abs() <= 7.5e-9);
    assert_eq!(cols[8], "true");
}
