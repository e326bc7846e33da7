use std::fs;
use std::path::{Path, PathBuf};

use nnbarrier::cli::{run_from_args, RunReport, SimulateReport, EXIT_BELOW_THRESHOLD, EXIT_CERTIFIED, EXIT_ERROR};
use nnbarrier::model::{load_problem, ControlStructure};
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn problem(name: &str) -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "..", "..", "problems", name].iter().collect()
}

fn run(args: &[&str]) -> i32 {
    let mut v = vec!["nnbarrier"];
    v.extend_from_slice(args);
    run_from_args(v)
}

fn report(dir: &Path) -> RunReport {
    RunReport::from_json(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn certify_contraction_linear_and_interval() {
    let tmp = TempDir::new().unwrap();
    let spec = problem("contraction2d.json");
    let lin = tmp.path().join("lin");
    let int = tmp.path().join("int");
    assert_eq!(run(&["certify", s(&spec), "--out", s(&lin), "--seed", "3"]), EXIT_CERTIFIED);
    let code = run(&["certify", s(&spec), "--bounds", "interval", "--out", s(&int)]);
    let rl = report(&lin);
    let ri = report(&int);
    assert!(rl.p_s >= 0.9);
    assert_eq!(code, if ri.p_s >= 0.9 { EXIT_CERTIFIED } else { EXIT_BELOW_THRESHOLD });
    assert!(ri.p_s <= rl.p_s + 1e-6, "interval {} > linear {}", ri.p_s, rl.p_s);
    assert_eq!(rl.regions, 16);
    assert_eq!(rl.per_region.len(), 16);
    assert_eq!(rl.seed, 3);
    assert_eq!(rl.command, "certify");
    let hash: String = Sha256::digest(fs::read(&spec).unwrap()).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(rl.spec_sha256, hash);
    let max_q = rl.per_region.iter().map(|r| r.beta).fold(0.0_f64, f64::max);
    assert!((max_q - rl.beta).abs() <= 1e-9);
    assert!((rl.p_s - (1.0 - rl.eta - rl.beta * rl.horizon as f64)).abs() < 1e-12);
}

#[test]
fn report_round_trips() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(
        run(&["certify", s(&problem("minimal1d.json")), "--out", s(tmp.path()), "--mc-samples", "500", "--audit-samples", "2000"]),
        EXIT_CERTIFIED
    );
    let r = report(tmp.path());
    let back = RunReport::from_json(&r.to_json()).unwrap();
    assert_eq!(back, r);
    assert!(r.audit.as_ref().unwrap().passed());
    assert!(r.soundness.as_ref().unwrap().pass);
    assert!(r.timings.contains_key("bounds") && r.timings.contains_key("sos") && r.timings.contains_key("mc"));
}

#[test]
fn errors_exit_one() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    let out = tmp.path().join("o");
    assert_eq!(run(&["certify", s(&bad), "--out", s(&out)]), EXIT_ERROR);
    assert_eq!(run(&["certify", s(&tmp.path().join("missing.json"))]), EXIT_ERROR);
    assert_eq!(run(&["synthesize", s(&problem("contraction2d.json")), "--out", s(&out)]), EXIT_ERROR);
    assert_eq!(
        run(&["certify", s(&problem("minimal1d.json")), "--tolerance", "bogus=1", "--out", s(&out)]),
        EXIT_ERROR
    );
    assert_eq!(run(&["certify", s(&problem("minimal1d.json")), "--degree", "3", "--out", s(&out)]), EXIT_ERROR);
}

#[test]
fn below_threshold_exits_two() {
    let tmp = TempDir::new().unwrap();
    let mut spec = load_problem(problem("minimal1d.json")).unwrap();
    spec.threshold = 0.999_999_9;
    let path = tmp.path().join("strict.json");
    fs::write(&path, spec.to_json()).unwrap();
    assert_eq!(run(&["certify", s(&path), "--out", s(&tmp.path().join("o"))]), EXIT_BELOW_THRESHOLD);
}

#[test]
fn synthesize_drift_and_betamaps() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("drift");
    assert_eq!(run(&["synthesize", s(&problem("drift1d.json")), "--out", s(&out)]), EXIT_CERTIFIED);
    let r = report(&out);
    assert!(r.p_s >= 0.95);
    let fraction = r.controlled_fraction.unwrap();
    assert!(fraction > 0.0 && fraction < 1.0);
    let policy = fs::read_to_string(out.join("policy.csv")).unwrap();
    assert!(policy.starts_with("region_id,u_1\n"));
    assert_eq!(policy.lines().count(), 1 + r.regions);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("policy_summary.json")).unwrap()).unwrap();
    for key in ["P_s_before", "P_s_after", "controlled_fraction", "iterations"] {
        assert!(summary.get(key).is_some(), "{key}");
    }
    for row in r.per_region.iter().filter(|row| row.control.is_some()) {
        assert!(row.beta <= row.beta_uncontrolled.unwrap() + 1e-8);
    }

    // 1-D: CSV only.
    let maps = tmp.path().join("maps");
    assert_eq!(run(&["betamap", s(&out.join("report.json")), "--out", s(&maps)]), EXIT_CERTIFIED);
    assert!(maps.join("betamap.csv").exists());
    assert!(!maps.join("betamap.svg").exists());
}

#[test]
fn betamap_two_dimensional() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("c");
    assert_eq!(run(&["certify", s(&problem("contraction2d.json")), "--out", s(&out)]), EXIT_CERTIFIED);
    assert_eq!(run(&["betamap", s(&out.join("report.json")), "--out", s(&out)]), EXIT_CERTIFIED);
    let svg = fs::read_to_string(out.join("betamap.svg")).unwrap();
    assert_eq!(svg.matches("<rect ").count(), 16);
    let csv = fs::read_to_string(out.join("betamap.csv")).unwrap();
    assert_eq!(csv.lines().count(), 17);
}

#[test]
fn controlled_2d_betamap_after_not_above_before() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("p");
    let code = run(&["synthesize", s(&problem("damped_pendulum.json")), "--out", s(&out)]);
    assert!(code == EXIT_CERTIFIED || code == EXIT_BELOW_THRESHOLD, "exit {code}");
    let r = report(&out);
    let before = r.per_region.iter().map(|x| x.beta_uncontrolled.unwrap()).fold(0.0_f64, f64::max);
    let after = r.per_region.iter().map(|x| x.beta).fold(0.0_f64, f64::max);
    assert!(after <= before + 1e-8, "{after} > {before}");
    assert_eq!(run(&["betamap", s(&out.join("report.json")), "--out", s(&out)]), EXIT_CERTIFIED);
    assert!(out.join("betamap.svg").exists());
    assert!(out.join("betamap_uncontrolled.svg").exists());
}

#[test]
fn already_safe_spec_gets_empty_policy() {
    let tmp = TempDir::new().unwrap();
    let mut spec = load_problem(problem("contraction2d.json")).unwrap();
    spec.control = Some(ControlStructure { g: vec![vec![1.0], vec![0.0]], u_lower: vec![-0.5], u_upper: vec![0.5] });
    let path = tmp.path().join("safe.json");
    fs::write(&path, spec.to_json()).unwrap();
    let out = tmp.path().join("o");
    assert_eq!(run(&["synthesize", s(&path), "--out", s(&out)]), EXIT_CERTIFIED);
    let r = report(&out);
    assert_eq!(r.controlled_fraction, Some(0.0));
    assert_eq!(r.iterations, Some(0));
    let policy = fs::read_to_string(out.join("policy.csv")).unwrap();
    assert!(policy.lines().skip(1).all(|l| l.ends_with(",0.0")), "{policy}");
}

fn simulation(dir: &Path) -> SimulateReport {
    serde_json::from_str(&fs::read_to_string(dir.join("simulation.json")).unwrap()).unwrap()
}

#[test]
fn simulate_is_reproducible_and_policy_helps() {
    let tmp = TempDir::new().unwrap();
    let drift = problem("drift1d.json");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        assert_eq!(run(&["simulate", s(&drift), "--samples", "3000", "--seed", "9", "--out", s(dir)]), EXIT_CERTIFIED);
    }
    assert_eq!(simulation(&a).estimate, simulation(&b).estimate);

    let syn = tmp.path().join("syn");
    assert_eq!(run(&["synthesize", s(&drift), "--out", s(&syn)]), EXIT_CERTIFIED);
    let c = tmp.path().join("c");
    let policy = syn.join("policy.csv");
    assert_eq!(
        run(&["simulate", s(&drift), "--policy", s(&policy), "--samples", "3000", "--seed", "9", "--trajectory", "--out", s(&c)]),
        EXIT_CERTIFIED
    );
    let without = simulation(&a).estimate;
    let with = simulation(&c).estimate;
    assert!(with.p_hat > without.p_hat, "{} vs {}", with.p_hat, without.p_hat);
    let p_s = report(&syn).p_s;
    assert!(p_s <= with.per_init_min + 3.0 * with.per_init_ci);
    let traj = fs::read_to_string(c.join("trajectory.csv")).unwrap();
    assert!(traj.starts_with("k,x_1,u_1,safe_flag\n"));
    assert_eq!(traj.lines().count(), 1 + 11);
}

#[test]
fn bounds_csv_has_one_row_per_region() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(run(&["bounds", s(&problem("contraction2d.json")), "--out", s(tmp.path())]), EXIT_CERTIFIED);
    let csv = fs::read_to_string(tmp.path().join("bounds.csv")).unwrap();
    assert_eq!(csv.lines().count(), 17);
}
