use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use decaylab::cli::Manifest;

fn decaylab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_decaylab"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DECAYLAB_WORKERS")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

const STADIUM_CORR: &str = r#"
name = "stadium_corr"
seed = 5
[system]
kind = "stadium"
ell = 2.0
[params]
n_max = 60
samples = 3000
batches = 8
[observables]
v = { kind = "indicator_X_mollified", width = 0.1 }
w = { kind = "indicator_X_mollified", width = 0.1 }
"#;

const STADIUM_TAILS: &str = r#"
name = "stadium_tails"
seed = 5
[system]
kind = "stadium"
ell = 2.0
[params]
n_max = 120
samples = 20000
"#;

#[test]
fn selftest_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = decaylab(&["selftest", "--out", "runs"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let dir = tmp.path().join("runs/selftest");
    let csv = fs::read_to_string(dir.join("selftest.csv")).unwrap();
    assert!(csv.lines().count() > 20 && !csv.contains(",false,"));
    assert_eq!(manifest(&dir).operation.name(), "selftest");
}

#[test]
fn config_errors_exit_two_with_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "typo.toml", "name = \"x\"\n[system]\nkind = \"lsv\"\ngamma = 0.5\n[params]\nn_max = 10\nsample = 100\n");
    let out = decaylab(&["tails", "typo.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let rec: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(rec["field"], "params.sample");
    assert!(rec["message"].as_str().unwrap().contains("sample"));

    write(tmp.path(), "range.toml", "name = \"x\"\n[system]\nkind = \"lsv\"\ngamma = 2.5\n[params]\nn_max = 10\nsamples = 100\n");
    let out = decaylab(&["tails", "range.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let rec: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(rec["field"], "system.gamma");
    assert!(!tmp.path().join("runs/x").exists());
}

#[test]
fn runtime_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    write(
        tmp.path(),
        "fit.toml",
        "name = \"f\"\n[fit]\ninput = \"missing.csv\"\ncolumn = \"rho\"\nwindow = [10, 50]\nmodel = { kind = \"pure_power\" }\n",
    );
    let out = decaylab(&["fit", "fit.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let rec: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(rec["kind"], "io");
}

#[test]
fn reruns_are_byte_identical_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "c.toml", STADIUM_CORR);
    for (out, workers) in [("a", "1"), ("b", "1"), ("c", "3")] {
        let o = decaylab(&["correlate", "c.toml", "--out", out, "--workers", workers], tmp.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |d: &str| fs::read(tmp.path().join(d).join("stadium_corr/correlation.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_eq!(read("a"), read("c"));
    let (ma, mc) = (manifest(&tmp.path().join("a/stadium_corr")), manifest(&tmp.path().join("c/stadium_corr")));
    assert_eq!(ma.content_hash, mc.content_hash);
    assert_eq!((ma.workers, mc.workers), (1, 3));
}

#[test]
fn experiments_keep_to_their_directories() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "t.toml", STADIUM_TAILS);
    write(tmp.path(), "c.toml", STADIUM_CORR);
    assert!(decaylab(&["tails", "t.toml", "--workers", "1"], tmp.path()).status.success());
    let before = fs::read(tmp.path().join("runs/stadium_tails/manifest.json")).unwrap();
    assert!(decaylab(&["correlate", "c.toml", "--workers", "1"], tmp.path()).status.success());
    assert_eq!(fs::read(tmp.path().join("runs/stadium_tails/manifest.json")).unwrap(), before);
    let names: Vec<_> = fs::read_dir(tmp.path().join("runs/stadium_tails")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 3, "{names:?}");
}

#[test]
fn report_over_the_stadium_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "t.toml", STADIUM_TAILS);
    write(tmp.path(), "c.toml", &STADIUM_CORR.replace("n_max = 60", "n_max = 80"));
    write(
        tmp.path(),
        "r.toml",
        "name = \"report\"\n[report]\ninputs = [\"runs/stadium_tails\", \"runs/stadium_corr\"]\ntail_window = [10, 100]\ncorrelation_window = [20, 80]\n",
    );
    for args in [["tails", "t.toml"], ["correlate", "c.toml"], ["report", "r.toml"]] {
        let o = decaylab(&args, tmp.path());
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let mut rd = csv::Reader::from_path(tmp.path().join("runs/report/report.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    let quantities: Vec<&str> = rows.iter().map(|r| r.get(1).unwrap()).collect();
    assert_eq!(quantities, ["tail_exponent", "correlation_exponent", "plateau_constant"]);
    // predicted constant: stadium_constant(2) times the measured means
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("runs/stadium_corr/summary.json")).unwrap()).unwrap();
    let mv = summary["mean_v"].as_f64().unwrap();
    let predicted: f64 = rows[2].get(4).unwrap().parse().unwrap();
    let c = decaylab::billiards::stadium_constant(2.0).unwrap();
    assert!((predicted - c * mv * mv).abs() < 1e-12 * predicted);
    assert_eq!(rows[0].get(4).unwrap().parse::<f64>().unwrap(), 2.0);
    assert_eq!(rows[1].get(4).unwrap().parse::<f64>().unwrap(), 1.0);
}

#[test]
fn fit_writes_json_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let mut csv = String::from("n,rho,stderr\n");
    for n in 0..=100 {
        let x = n.max(1) as f64;
        csv.push_str(&format!("{n},{},{}\n", 3.0 * x.powf(-1.5), 0.01 * x.powf(-1.5)));
    }
    write(tmp.path(), "rho.csv", &csv);
    write(
        tmp.path(),
        "fit.toml",
        "name = \"f\"\n[fit]\ninput = \"rho.csv\"\ncolumn = \"rho\"\nstderr_column = \"stderr\"\nwindow = [10, 100]\nmodel = { kind = \"pure_power\" }\n",
    );
    let o = decaylab(&["fit", "fit.toml"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = fs::read_to_string(tmp.path().join("runs/f/fits.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert!((rec["p"].as_f64().unwrap() - 1.5).abs() < 1e-9);
    assert!((rec["c"].as_f64().unwrap() - 3.0).abs() < 1e-8);
}
