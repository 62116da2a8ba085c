use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
[data]
n_visible = 40
n_samples = 300
beta = 1.6

[model]
n_hidden = 12

[train]
learning_rate = 0.05
minibatch_size = 100
epochs = 15
checkpoint_count = 12

[scan]
n_chains = 64
n_mesfr = 10

[hysteresis]
n_chains = 60
n_groups = 6
k = 3
n_loop = 10

[relax]
n_chains = 16
burn_in = 20
max_sweeps = 60

[theory]
t_max = 4.0
"#;

fn rbmc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rbmc")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = rbmc(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn setup(extra: &str) -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), format!("{SMALL}{extra}")).unwrap();
    tmp
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn schema() -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schema/csv_columns.json");
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_header(path: &Path, key: &str) {
    let text = fs::read_to_string(path).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let schema = schema();
    let documented: Vec<&String> = schema["files"][key]["columns"].as_object().unwrap().keys().collect();
    let mut a: Vec<&str> = header.clone();
    a.sort();
    let mut b: Vec<&str> = documented.iter().map(|s| s.as_str()).collect();
    b.sort();
    assert_eq!(a, b, "{} does not match the schema entry {key}", path.display());
    assert!(text.lines().count() > 1, "{} has no rows", path.display());
}

#[test]
fn invalid_configuration_exits_with_two_and_names_the_key() {
    let tmp = setup("");
    fs::write(tmp.path().join("bad.toml"), "[data]\nsource = \"pair\"\nkappa = 1.5\n").unwrap();
    let out = rbmc(tmp.path(), &["--config", "bad.toml", "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kappa"));
}

#[test]
fn missing_run_directory_is_an_io_error() {
    let tmp = setup("");
    let out = rbmc(tmp.path(), &["analyze", "svd-track", "--run", "nowhere"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn print_config_round_trips() {
    let tmp = setup("");
    let out = ok(tmp.path(), &["--config", "c.toml", "--seed", "9", "print-config"]);
    let text = String::from_utf8(out.stdout).unwrap();
    fs::write(tmp.path().join("echo.toml"), &text).unwrap();
    let again = ok(tmp.path(), &["--config", "echo.toml", "print-config"]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
    assert!(text.contains("seed = 9"));
}

#[test]
fn gen_data_writes_dataset_and_manifest() {
    let tmp = setup("");
    ok(tmp.path(), &["--config", "c.toml", "--out", "d", "gen-data"]);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("d/data.json")).unwrap()).unwrap();
    assert_eq!(manifest["dataset"]["n_samples"], 300);
    assert_eq!(manifest["dataset"]["n_visible"], 40);
    assert_eq!(manifest["teacher"]["kind"], "mattis");
    assert!(tmp.path().join("d/data.dset").is_file());
}

#[test]
fn interrupted_training_resumes_bit_exactly() {
    let tmp = setup("");
    ok(tmp.path(), &["--config", "c.toml", "--out", "full", "train"]);
    ok(tmp.path(), &["--config", "c.toml", "--out", "part", "train", "--stop-after", "23"]);
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("part/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["complete"], false);
    ok(tmp.path(), &["--config", "c.toml", "--out", "part", "train", "--resume"]);
    assert_eq!(snapshot(&tmp.path().join("full")), snapshot(&tmp.path().join("part")));
}

#[test]
fn analyses_follow_the_schema_and_are_reproducible() {
    let tmp = setup("");
    let d = tmp.path();
    ok(d, &["--config", "c.toml", "--out", "run", "train"]);
    let analyses: [&[&str]; 4] = [
        &["svd-track", "--run", "run"],
        &["anneal-scan", "--run", "run", "--samples"],
        &["hysteresis", "--run", "run"],
        &["relax-time", "--run", "run", "--every", "4"],
    ];
    for a in analyses {
        let mut args = vec!["--config", "c.toml", "--workers", "1", "analyze"];
        args.extend_from_slice(a);
        ok(d, &args);
    }
    let a = d.join("run/analysis");
    assert_header(&a.join("svd_track.csv"), "svd_track.csv");
    assert_header(&a.join("anneal_scan.csv"), "anneal_scan.csv");
    assert_header(&a.join("anneal_samples.csv"), "anneal_samples.csv");
    assert_header(&a.join("hysteresis.csv"), "hysteresis.csv");
    assert_header(&a.join("relax_time.csv"), "relax_time.csv");
    assert_header(&d.join("run/diagnostics.csv"), "diagnostics.csv");
    let summary: Value = serde_json::from_str(&fs::read_to_string(a.join("hysteresis.json")).unwrap()).unwrap();
    for key in ["loop_area", "loop_area_stderr", "ks_p", "max_slope", "h_max"] {
        assert!(summary[key].is_number(), "hysteresis.json lacks {key}");
    }

    let first = snapshot(&a);
    for a in analyses {
        let mut args = vec!["--config", "c.toml", "--workers", "3", "analyze"];
        args.extend_from_slice(a);
        ok(d, &args);
    }
    assert_eq!(snapshot(&d.join("run/analysis")), first, "outputs depend on the run or the thread count");
}

#[test]
fn fss_over_three_runs_reports_a_collapse() {
    let tmp = setup("");
    let d = tmp.path();
    let mut args: Vec<String> = vec!["analyze".into(), "fss".into()];
    for (i, n) in [30, 40, 60].iter().enumerate() {
        let cfg = format!("c{n}.toml");
        fs::write(d.join(&cfg), SMALL.replace("n_visible = 40", &format!("n_visible = {n}"))).unwrap();
        let run = format!("r{i}");
        ok(d, &["--config", &cfg, "--out", &run, "train"]);
        ok(d, &["--config", &cfg, "analyze", "anneal-scan", "--run", &run]);
        args.extend(["--run".into(), run]);
    }
    args.extend(["--out".into(), "fss".into()]);
    // These short runs never leave the weak-coupling region, so the default floor rejects them.
    let strict = rbmc(d, &args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(strict.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&strict.stderr).contains("chi-min"));
    args.push("--whole-curve".into());
    ok(d, &args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_header(&d.join("fss/fss.csv"), "fss.csv");
    let j: Value = serde_json::from_str(&fs::read_to_string(d.join("fss/fss.json")).unwrap()).unwrap();
    let w_c = j["w_c"].as_f64().unwrap();
    assert!((3.5..=6.0).contains(&w_c));
    assert!((j["beta_c"].as_f64().unwrap() - w_c * w_c / 16.0).abs() < 1e-12);
    assert!(j["spread"].as_f64().unwrap() >= 0.0);
    assert_eq!(j["scan"].as_array().unwrap().len(), 51);
    assert!(j["chi_min"].is_null());

    let out = rbmc(d, &["analyze", "fss", "--run", "r0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fss_names_a_missing_column() {
    let tmp = setup("");
    let d = tmp.path();
    ok(d, &["--config", "c.toml", "--out", "r", "train"]);
    fs::create_dir_all(d.join("r/analysis")).unwrap();
    fs::write(d.join("r/analysis/anneal_scan.csv"), "checkpoint,alpha,w_alpha\n0,1,0.5\n").unwrap();
    let out = rbmc(d, &["analyze", "fss", "--run", "r", "--run", "r"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("chi_m_alpha"));
}

#[test]
fn theory_growth_rate_matches_the_linear_prediction() {
    let tmp = setup("");
    let d = tmp.path();
    ok(d, &["--config", "c.toml", "--out", "bg", "analyze", "theory", "bg"]);
    assert_header(&d.join("bg/theory.csv"), "theory.csv (bg)");
    let j: Value = serde_json::from_str(&fs::read_to_string(d.join("bg/theory.json")).unwrap()).unwrap();
    let m = j["m"].as_f64().unwrap();
    let rate = j["rate_per_time"].as_f64().unwrap();
    assert!((rate - m * m).abs() < 1e-6 * m * m, "rate {rate} vs m^2 {}", m * m);
    assert!((j["rate_per_update"].as_f64().unwrap() - rate * 0.01).abs() < 1e-12);

    ok(d, &["--config", "c.toml", "--out", "bb", "analyze", "theory", "bb"]);
    assert_header(&d.join("bb/theory.csv"), "theory.csv (bb)");

    ok(d, &["--config", "c.toml", "--out", "pair", "analyze", "theory", "pair", "--beta", "4"]);
    assert_header(&d.join("pair/theory.csv"), "theory.csv (pair)");
    let j: Value = serde_json::from_str(&fs::read_to_string(d.join("pair/theory.json")).unwrap()).unwrap();
    assert!(j["t_I"].as_f64().unwrap() < j["t_II"].as_f64().unwrap());
}
