use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_bnls");

fn bnls(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("BNLS_OUT_DIR").env_remove("RUST_LOG").output().expect("spawn bnls")
}

fn out_dir() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))).unwrap()
}

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas")
}

fn assert_valid(doc: &Value, schema: &str) {
    let s = read_json(&schema_dir().join(format!("{schema}.schema.json")));
    let v = jsonschema::validator_for(&s).expect("schema compiles");
    let errs: Vec<String> = v.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errs.is_empty(), "{schema}: {errs:#?}");
}

fn dir_arg(d: &tempfile::TempDir) -> String {
    d.path().to_str().unwrap().to_owned()
}

#[test]
fn thresholds_subcritical_reports_c_star_and_radius() {
    let d = out_dir();
    let o = bnls(&["thresholds", "--N", "5", "--p", "2.5", "--mu", "1", "--out", &dir_arg(&d)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let j = read_json(&d.path().join("thresholds.json"));
    assert_valid(&j, "thresholds");
    let t = &j["thresholds"];
    for k in ["c_star", "r_star", "S", "C_Np"] {
        assert!(t[k].as_f64().is_some_and(f64::is_finite), "{k}");
    }
    assert!(t["r_star"].as_f64().unwrap() < t["r_tilde"].as_f64().unwrap());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("c_star"));
}

#[test]
fn thresholds_supercritical_includes_k() {
    let d = out_dir();
    let o = bnls(&["thresholds", "--N", "5", "--p", "5", "--mu", "10", "--c", "1", "--out", &dir_arg(&d)]);
    assert_eq!(code(&o), 0);
    let j = read_json(&d.path().join("thresholds.json"));
    assert_valid(&j, "thresholds");
    assert!(j["thresholds"]["K"].as_f64().unwrap() > 0.0);
    assert!(j["thresholds"]["c_star"].is_null());
}

#[test]
fn thresholds_csv_format() {
    let d = out_dir();
    let o = bnls(&["thresholds", "--format", "csv", "--out", &dir_arg(&d)]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(d.path().join("thresholds.csv")).unwrap();
    assert!(text.starts_with("key,value\n"));
    assert!(text.contains("\nc_star,"));
    assert!(!d.path().join("thresholds.json").exists());
}

#[test]
fn dimension_below_five_is_a_config_error() {
    let o = bnls(&["thresholds", "--N", "4", "--p", "2.5", "--mu", "1"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("N >= 5"));
}

#[test]
fn unknown_flag_is_a_config_error() {
    assert_eq!(code(&bnls(&["thresholds", "--bogus"])), 2);
}

#[test]
fn help_documents_exit_codes() {
    let o = bnls(&["--help"]);
    assert_eq!(code(&o), 0);
    let s = String::from_utf8_lossy(&o.stdout);
    for line in ["0  success", "2  configuration error", "3  non-convergence", "4  invariant violation"] {
        assert!(s.contains(line), "{line}");
    }
}

#[test]
fn solve_then_energy_round_trip() {
    let d = out_dir();
    let o = bnls(&["solve", "--regime", "subcritical", "--out", &dir_arg(&d)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&d.path().join("report.json"));
    assert_valid(&report, "solver-report");
    assert_valid(&read_json(&d.path().join("solution.json")), "solution");
    assert_eq!(report["status"], "converged");
    let i = report["I"].as_f64().unwrap();

    let e = out_dir();
    let sol = d.path().join("solution.json");
    let o = bnls(&["energy", "--load", sol.to_str().unwrap(), "--out", &dir_arg(&e)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let en = read_json(&e.path().join("energy.json"));
    assert_valid(&en, "energy");
    let i2 = en["I"].as_f64().unwrap();
    assert!((i - i2).abs() <= 1e-10 * i.abs().max(1.0), "{i} vs {i2}");

    // the full report is also accepted
    let rep = d.path().join("report.json");
    let o = bnls(&["energy", "--load", rep.to_str().unwrap(), "--out", &dir_arg(&e)]);
    assert_eq!(code(&o), 0);
    assert_eq!(read_json(&e.path().join("energy.json"))["I"].as_f64().unwrap(), i2);

    let trace = fs::read_to_string(d.path().join("trace.csv")).unwrap();
    assert!(trace.starts_with("iter,energy_before,energy_after,recentred,residual,step\n"));
    assert_eq!(trace.lines().count(), report["trace"].as_array().unwrap().len() + 1);
    let fiber = fs::read_to_string(d.path().join("fiber.csv")).unwrap();
    assert_eq!(fiber.lines().count(), 602);
}

#[test]
fn binary_field_needs_explicit_parameters() {
    let d = out_dir();
    assert_eq!(code(&bnls(&["solve", "--M", "400", "--out", &dir_arg(&d)])), 0);
    let sol: bnls::cli::SolutionFile = serde_json::from_slice(&fs::read(d.path().join("solution.json")).unwrap()).unwrap();
    let bin = d.path().join("u.bin");
    fs::write(&bin, sol.field.to_bytes()).unwrap();
    let b = bin.to_str().unwrap();
    assert_eq!(code(&bnls(&["energy", "--load", b, "--out", &dir_arg(&d)])), 2);
    let o = bnls(&["energy", "--load", b, "--p", "2.5", "--mu", "1", "--out", &dir_arg(&d)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&d.path().join("report.json"));
    let en = read_json(&d.path().join("energy.json"));
    assert_eq!(en["I"], report["I"]);
}

#[test]
fn identical_runs_are_byte_identical() {
    let (a, b) = (out_dir(), out_dir());
    for d in [&a, &b] {
        assert_eq!(code(&bnls(&["solve", "--seed", "3", "--no-timing", "--out", &dir_arg(d)])), 0);
    }
    for f in ["report.json", "solution.json", "trace.csv", "fiber.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn regime_mismatch_exits_with_config_code() {
    assert_eq!(code(&bnls(&["solve", "--regime", "subcritical", "--p", "5", "--c", "1"])), 2);
    assert_eq!(code(&bnls(&["solve", "--regime", "supercritical", "--p", "2.5"])), 2);
    assert_eq!(code(&bnls(&["solve", "--p", "3", "--c", "1"])), 2);
    assert_eq!(code(&bnls(&["solve", "--mu", "auto"])), 2);
}

#[test]
fn concentrating_solve_exits_with_non_convergence() {
    let d = out_dir();
    let o = bnls(&["solve", "--p", "5", "--mu", "50", "--c", "1", "--out", &dir_arg(&d)]);
    assert_eq!(code(&o), 3);
    let report = read_json(&d.path().join("report.json"));
    assert_valid(&report, "solver-report");
    assert_ne!(report["status"], "converged");
}

#[test]
fn supercritical_solve_and_warm_start() {
    let d = out_dir();
    let o = bnls(&["solve", "--p", "5", "--mu", "500", "--c", "1", "--M", "800", "--out", &dir_arg(&d)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let r1 = read_json(&d.path().join("report.json"));
    assert_eq!(r1["regime"], "pohozaev-mountain-pass");
    let start = d.path().join("solution.json");
    let e = out_dir();
    let o = bnls(&["solve", "--p", "5", "--mu", "400", "--c", "1", "--M", "800", "--start", start.to_str().unwrap(), "--out", &dir_arg(&e)]);
    assert_eq!(code(&o), 0);
    let r2 = read_json(&e.path().join("report.json"));
    assert!(r2["I"].as_f64().unwrap() > r1["I"].as_f64().unwrap());
    // a different grid is refused
    let o = bnls(&["solve", "--p", "5", "--mu", "400", "--c", "1", "--M", "900", "--start", start.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bubbles_emit_fits_with_expected_orders() {
    let d = out_dir();
    let o = bnls(&["bubbles", "--N", "5", "--p", "3", "--eps", "0.2:0.025:geometric", "--out", &dir_arg(&d)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let j = read_json(&d.path().join("bubbles.json"));
    assert_valid(&j, "bubbles");
    let fits = j["fits"].as_array().unwrap();
    let expected = |q: &str| fits.iter().find(|f| f["quantity"] == q).unwrap()["expected_order"].as_f64().unwrap();
    assert_eq!(expected("lap_excess"), 1.0);
    assert_eq!(expected("crit_excess"), 5.0);
    assert_eq!(expected("p_norm"), 1.5);
    assert_eq!(j["epsilons"].as_array().unwrap().len(), 4);
    let csv = fs::read_to_string(d.path().join("bubble_fits.csv")).unwrap();
    assert!(csv.starts_with("quantity,epsilon,value,excess\n"));
    assert_eq!(csv.lines().count(), 1 + 4 * 4);
}

#[test]
fn multiplicity_auto_reports_thresholds() {
    let d = out_dir();
    let o = bnls(&["multiplicity", "--m", "3", "--mu", "auto", "--out", &dir_arg(&d)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let j = read_json(&d.path().join("multiplicity.json"));
    assert_valid(&j, "multiplicity");
    let fam = &j["family"];
    assert!(fam["mu_m"].as_f64().unwrap().is_finite());
    assert!(fam["sup_i_on_tm"].as_f64().unwrap() < 0.0);
    assert_eq!(fam["levels"].as_array().unwrap().len(), 3);
    assert_eq!(j["checks"]["invariants_hold"], true);
}

#[test]
fn infeasible_family_is_a_config_error() {
    let o = bnls(&["multiplicity", "--m", "5", "--R", "10", "--samples", "50"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("increase R"));
}

#[test]
fn sweep_writes_csv_and_per_run_reports() {
    let d = out_dir();
    let o = bnls(&["sweep", "--Ns", "5", "--ps", "2.5,5", "--mus", "500", "--cs", "1", "--M", "600", "--no-timing", "--out", &dir_arg(&d)]);
    // the subcritical point has c > c*, so one row records an error
    assert_eq!(code(&o), 3);
    let csv = fs::read_to_string(d.path().join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "N,p,mu,c,regime,status,I,P,lambda,residual,converged,below_level_threshold,wall_time_s,error");
    assert_eq!(lines.count(), 2);
    let j = read_json(&d.path().join("sweep.json"));
    assert_valid(&j, "sweep");
    assert!(j["rows"][0]["error"].as_str().unwrap().contains("c*"));
    assert_valid(&read_json(&d.path().join("runs/run-0001.json")), "solver-report");
    assert!(!d.path().join("runs/run-0000.json").exists());

    let e = out_dir();
    bnls(&["sweep", "--Ns", "5", "--ps", "2.5,5", "--mus", "500", "--cs", "1", "--M", "600", "--no-timing", "--out", &dir_arg(&e)]);
    assert_eq!(csv, fs::read_to_string(e.path().join("sweep.csv")).unwrap());
}

#[test]
fn empty_sweep_is_a_config_error() {
    assert_eq!(code(&bnls(&["sweep"])), 2);
}

#[test]
fn config_file_and_flag_precedence() {
    let d = out_dir();
    let cfg = d.path().join("run.toml");
    fs::write(&cfg, "[problem]\nN = 6\np = 2.4\nmu = 2.0\n\n[grid]\nM = 800\n").unwrap();
    let c = cfg.to_str().unwrap();
    let o = bnls(&["thresholds", "--config", c, "--mu", "3", "--print-config"]);
    assert_eq!(code(&o), 0);
    let printed = String::from_utf8(o.stdout).unwrap();
    let resolved = bnls::cli::RunConfig::from_toml(&printed).unwrap();
    assert_eq!(resolved.problem.n, 6);
    assert_eq!(resolved.problem.mu, 3.0);
    assert_eq!(resolved.grid.m, 800);
    assert_eq!(resolved.grid.r_max, 40.0);
    // the dump is itself a valid config that reproduces the run
    fs::write(&cfg, &printed).unwrap();
    let o = bnls(&["thresholds", "--config", c, "--print-config"]);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), printed);

    fs::write(&cfg, "[problem]\nbogus = 1\n").unwrap();
    assert_eq!(code(&bnls(&["thresholds", "--config", c])), 2);
    assert_eq!(code(&bnls(&["thresholds", "--config", "/nonexistent/run.toml"])), 1);
}

#[test]
fn output_directory_from_environment() {
    let d = out_dir();
    let target = d.path().join("env-out");
    let o = Command::new(BIN).args(["thresholds"]).env("BNLS_OUT_DIR", &target).output().unwrap();
    assert_eq!(code(&o), 0);
    assert!(target.join("thresholds.json").exists());
    // an explicit flag wins
    let flag = d.path().join("flag-out");
    Command::new(BIN).args(["thresholds", "--out", flag.to_str().unwrap()]).env("BNLS_OUT_DIR", &target).output().unwrap();
    assert!(flag.join("thresholds.json").exists());
}

#[test]
fn no_gradient_term_is_recorded() {
    let d = out_dir();
    let o = bnls(&["solve", "--no-grad-term", "--M", "600", "--out", &dir_arg(&d)]);
    assert!([0, 3, 4].contains(&code(&o)));
    let r = read_json(&d.path().join("report.json"));
    assert_eq!(r["params"]["include_gradient_term"], false);
    assert_eq!(r["energy"]["grad_term"].as_f64().unwrap(), 0.0);
}
