use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_miselbo"))
        .current_dir(dir)
        .args(args)
        .env("RUST_BACKTRACE", "0")
        .output()
        .expect("binary runs");
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn sweep_outputs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for tag in ["a", "b"] {
        ok(d, &[
            "sweep-shift", "--seed", "5", "--grid", "0,3,15", "--L", "1,5", "--replicates", "3",
            "--samples", "100", "--out", &format!("{tag}.csv"), "--plot", &format!("{tag}.svg"),
        ]);
        ok(d, &["plot", "--input", &format!("{tag}.csv"), "--kind", "curve", "--estimator", "miselbo", "--out", &format!("{tag}-m.svg")]);
    }
    for f in ["{}.csv", "{}.svg", "{}-m.svg"] {
        let a = fs::read(d.join(f.replace("{}", "a"))).unwrap();
        let b = fs::read(d.join(f.replace("{}", "b"))).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let csv = fs::read_to_string(d.join("a.csv")).unwrap();
    assert!(csv.starts_with("setting,swept_value,S,L,estimator,mean,std\n"));
    let prov: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("a.provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["provenance"]["seed"], 5);
    assert!(prov["provenance"]["version"].as_str().unwrap().starts_with('v'));
}

#[test]
fn seed_flag_changes_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for s in ["1", "2"] {
        ok(d, &["sweep-hier", "--seed", s, "--grid", "1,4", "--L", "1", "--replicates", "2", "--samples", "50", "--out", &format!("h{s}.csv")]);
    }
    assert_ne!(fs::read(d.join("h1.csv")).unwrap(), fs::read(d.join("h2.csv")).unwrap());
}

#[test]
fn fit_then_estimate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("run.toml"),
        r#"
seed = 3
[target]
setting = "ii"
[[members]]
label = "left"
mean = 1.0
sigma = 1.0
[[members]]
label = "right"
mean = 18.0
sigma = 1.0
[fit]
iterations = 200
samples_per_iter = 20
lr = 0.05
[estimate]
L = 40
replicates = 4
"#,
    )
    .unwrap();
    ok(d, &["--config", "run.toml", "fit", "--out", "fit.json"]);
    let trace = fs::read_to_string(d.join("fit.json.trace.csv")).unwrap();
    assert!(trace.starts_with("label,iteration,elbo\n"));
    assert_eq!(trace.lines().count(), 1 + 2 * 200);
    let params = fs::read_to_string(d.join("fit.json.params.csv")).unwrap();
    assert!(params.contains("left,mean,0,"));

    ok(d, &["--config", "run.toml", "estimate", "--ensemble", "fit.json", "--out", "est.csv"]);
    ok(d, &["--config", "run.toml", "estimate", "--ensemble", "fit.json", "--out", "est2.csv"]);
    let est = fs::read_to_string(d.join("est.csv")).unwrap();
    assert_eq!(est, fs::read_to_string(d.join("est2.csv")).unwrap());
    let mut lines = est.lines();
    assert_eq!(lines.next(), Some("estimator,S,L,replicate,value"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let mis: Vec<&Vec<&str>> = rows.iter().filter(|r| r[0] == "miselbo").collect();
    assert_eq!(mis.len(), 4 + 2);
    assert_eq!(mis[4][3], "mean");
    assert_eq!(mis[5][3], "std");
    assert!(rows.iter().any(|r| r[0] == "elbo:left"));
    assert!(mis.iter().all(|r| r[1] == "2" && r[2] == "40"));

    // Explicit flags override the config file.
    ok(d, &["--config", "run.toml", "estimate", "--target", "iii", "--ensemble", "fit.json", "--L", "10",
            "--replicates", "2", "--estimator", "jsd", "--out", "est3.csv"]);
    let est3 = fs::read_to_string(d.join("est3.csv")).unwrap();
    assert_eq!(est3.lines().count(), 1 + 2 + 2);
    assert!(est3.lines().skip(1).all(|l| l.starts_with("jsd,2,10,")));
}

#[test]
fn reproduce_smoke_run_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for tag in ["a", "b"] {
        ok(d, &["reproduce-511", "--variant", "p2", "--iters", "50", "--mc", "20", "--out", &format!("{tag}.csv"),
                "--ensemble-out", &format!("{tag}.json"), "--trace", &format!("{tag}-trace.csv")]);
    }
    for f in ["{}.csv", "{}.json", "{}-trace.csv"] {
        assert_eq!(
            fs::read(d.join(f.replace("{}", "a"))).unwrap(),
            fs::read(d.join(f.replace("{}", "b"))).unwrap()
        );
    }
    let csv = fs::read_to_string(d.join("a.csv")).unwrap();
    for name in ["kl_mis", "kl_bar", "jsd"] {
        assert!(csv.contains(&format!(",{name},")), "{csv}");
    }
}

#[test]
fn verify_subcommand_reports_verdicts_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let stdout = ok(d, &["verify", "--n-configs", "5", "--replicates", "20", "--out", "v.csv"]);
    assert!(stdout.contains("exact checks:"));
    let csv = fs::read_to_string(d.join("v.csv")).unwrap();
    assert!(csv.starts_with("check,config,kind,measured,reference,slack,verdict\n"));
    assert!(!csv.contains(",FAIL"));
}

#[test]
fn usage_errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["sweep-shift", "--grid", "0,1", "--L", "1", "--replicates", "2", "--samples", "10", "--out", "s.csv"]);
    let out = run(d, &["plot", "--input", "s.csv", "--estimator", "nope", "--out", "x.svg"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("available series") && err.contains("delta"), "{err}");

    let out = run(d, &["sweep-shift", "--setting", "hierarchical", "--out", "y.csv"]);
    assert!(!out.status.success());

    fs::write(d.join("bad.toml"), "sede = 1\n").unwrap();
    let out = run(d, &["--config", "bad.toml", "verify"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sede"));

    let out = run(d, &["estimate", "--target", "i", "--out", "e.csv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no ensemble"));
}
