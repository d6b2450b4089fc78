use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hetdecomp"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn decompose_fixture(out: &Path, extra: &[&str]) -> Output {
    let input = fixture("group_targeting.csv");
    let config = fixture("group_targeting.toml");
    let mut args = vec![
        "decompose",
        "--input",
        input.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

fn group_delta(report: &Value, component: &str) -> (f64, f64, f64) {
    let rows = report["report"]["parameters"].as_array().unwrap();
    let row = rows.iter().find(|r| r["label"].as_str().unwrap().starts_with(&format!("Delta{component}("))).unwrap();
    (row["estimate"].as_f64().unwrap(), row["se"].as_f64().unwrap(), row["p_value"].as_f64().unwrap())
}

#[test]
fn decompose_recovers_group_targeting() {
    let dir = tempfile::tempdir().unwrap();
    let out = decompose_fixture(dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("report.json"));
    let (est, se, _) = group_delta(&report, "2");
    assert!((est + 1.0 / 3.0).abs() <= 1.96 * se, "Delta2 {est} se {se}");
    for c in ["3", "4", "4'", "5"] {
        let (e, s, _) = group_delta(&report, c);
        assert!(e.abs() <= 4.0 * s.max(1e-12), "Delta{c} {e} se {s}");
    }
    let plot = std::fs::read_to_string(dir.path().join("plot.csv")).unwrap();
    assert!(plot.starts_with("component,group,value,p_value"));
    assert!(plot.contains("Delta2,g1-g0"));
    let manifest = read_json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["config"]["seed"], 7);
    assert_eq!(manifest["input"]["rows"], 100_000);
    assert_eq!(manifest["input"]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn same_group_gives_exact_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let out = decompose_fixture(dir.path(), &["--reference", "g1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("report.json"));
    for c in ["1", "2", "3", "4", "4'", "5"] {
        let (e, _, p) = group_delta(&report, c);
        assert_eq!(e, 0.0);
        assert_eq!(p, 1.0);
    }
}

#[test]
fn decompose_is_reproducible_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(decompose_fixture(a.path(), &["--threads", "1"]).status.success());
    assert!(decompose_fixture(b.path(), &["--threads", "4"]).status.success());
    let ra = std::fs::read(a.path().join("report.json")).unwrap();
    let rb = std::fs::read(b.path().join("report.json")).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn unknown_column_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixture("group_targeting.toml")).unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, text.replace("outcome = \"y\"", "outcome = \"earnings\"")).unwrap();
    let input = fixture("group_targeting.csv");
    let out = run(&["decompose", "--input", input.to_str().unwrap(), "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].as_str().unwrap().contains("earnings"));
    assert_eq!(err["kind"], "input");
}

fn small_csv(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("data.csv");
    std::fs::write(&path, body).unwrap();
    path
}

const SMALL_CONFIG: &str = r#"
[columns]
outcome = "y"
treatment = "t"
covariates = ["x"]

[[arms]]
name = "treated"
labels = ["1", "2"]

[[arms]]
name = "control"
labels = ["0"]

[groups]
rule = "threshold"
covariate = "x"
threshold = 0.5
lower = "g0"
upper = "g1"
"#;

fn small_rows() -> String {
    let mut s = String::from("y,t,x\n");
    for i in 0..400 {
        let t = i % 3;
        let x = (i / 3) % 2;
        s.push_str(&format!("{},{t},{x}\n", (i % 7) as f64 * 0.1 + t as f64));
    }
    s
}

#[test]
fn missing_seed_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = small_csv(dir.path(), &small_rows());
    let config = dir.path().join("c.toml");
    std::fs::write(&config, SMALL_CONFIG).unwrap();
    let out = run(&["decompose", "--input", input.to_str().unwrap(), "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn missing_value_names_the_column() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = small_rows();
    rows.push_str("1.0,1,\n");
    let input = small_csv(dir.path(), &rows);
    let config = dir.path().join("c.toml");
    std::fs::write(&config, SMALL_CONFIG).unwrap();
    let out = run(&[
        "decompose",
        "--input",
        input.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "3",
        "--out-dir",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].as_str().unwrap().contains("`x`"), "{err}");
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let input = small_csv(dir.path(), &small_rows());
    let config = dir.path().join("c.toml");
    std::fs::write(&config, format!("seed = 1\nfolds = 5\n{SMALL_CONFIG}")).unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "decompose",
        "--input",
        input.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "99",
        "--folds",
        "4",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = read_json(&out_dir.join("manifest.json"));
    assert_eq!(manifest["config"]["seed"], 99);
    assert_eq!(manifest["config"]["folds"], 4);
    let report = read_json(&out_dir.join("report.json"));
    assert_eq!(report["report"]["nuisance"]["folds"], 4);
}

#[test]
fn test_command_reports_three_methods() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture("group_targeting.csv");
    let config = fixture("group_targeting.toml");
    let out = run(&[
        "test",
        "--input",
        input.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc = read_json(&dir.path().join("tests.json"));
    let methods: Vec<&str> = doc["results"].as_array().unwrap().iter().map(|r| r["method"].as_str().unwrap()).collect();
    assert_eq!(methods, ["wald", "supremum", "delta1"]);
    assert_eq!(doc["contrasts"].as_array().unwrap().len(), 2);
}

#[test]
fn analytic_power_prints_three_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "power",
        "--analytic",
        "--J",
        "50",
        "--xi-dense",
        "0.4",
        "--alpha",
        "0.05",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let doc = read_json(&dir.path().join("analytic_power.json"));
    for m in ["wald", "supremum", "delta1"] {
        let v = doc[m].as_f64().unwrap();
        assert!(v > 0.05 && v < 1.0, "{m} {v}");
    }
    let null = run(&["power", "--analytic", "--J", "8", "--xi-dense", "0", "--out-dir", dir.path().to_str().unwrap()]);
    assert!(null.status.success());
    let doc = read_json(&dir.path().join("analytic_power.json"));
    for m in ["wald", "supremum", "delta1"] {
        assert!((doc[m].as_f64().unwrap() - 0.05).abs() < 1e-9);
    }
}

fn power_table(threads: &str) -> String {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "power",
        "--preset",
        "figure2-sparse",
        "--reps",
        "40",
        "--grid",
        "2,4",
        "--threads",
        threads,
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = read_json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["config"]["preset"], "figure2-sparse");
    std::fs::read_to_string(dir.path().join("power.csv")).unwrap()
}

#[test]
fn power_table_schema_and_determinism() {
    let a = power_table("1");
    assert!(a.starts_with("design,J,method,power,mc_se,analytic_power\n"));
    assert_eq!(a.lines().count(), 1 + 2 * 2 * 3);
    assert_eq!(a, power_table("3"));
}

#[test]
fn invalid_preset_is_an_input_error() {
    let out = run(&["power", "--preset", "figure9"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["partition", "--preset", "figure2-dense"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn partition_and_coverage_presets_run_small() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "partition",
        "--reps",
        "2",
        "--n",
        "20000",
        "--grid",
        "2,4,8",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("partition.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    let summary = read_json(&dir.path().join("partition_summary.json"));
    assert!(summary["slope"].as_f64().unwrap() < 0.0);

    let out = run(&["simulate", "--reps", "10", "--out-dir", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("coverage.csv")).unwrap();
    assert!(table.starts_with("parameter,truth,coverage,mc_se"));
}

#[test]
fn dose_input_is_discretized() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = String::from("y,dose,x\n");
    for i in 0..600 {
        let x = i % 2;
        let dose = if i % 5 == 0 { 0.0 } else { ((i * 37) % 101) as f64 / 100.0 };
        s.push_str(&format!("{},{dose},{x}\n", dose * 2.0 + x as f64 + (i % 3) as f64 * 0.1));
    }
    let input = small_csv(dir.path(), &s);
    let config = dir.path().join("c.toml");
    std::fs::write(
        &config,
        r#"
seed = 5
[columns]
outcome = "y"
treatment = "dose"
covariates = ["x"]

[partition]
bins = 3
atoms = [0.0]

[[arms]]
name = "dosed"
labels = ["bin:1", "bin:2", "bin:3"]

[[arms]]
name = "untreated"
labels = ["atom:0"]

[groups]
rule = "threshold"
covariate = "x"
threshold = 0.5
lower = "g0"
upper = "g1"
"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "decompose",
        "--input",
        input.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&out_dir.join("report.json"));
    assert_eq!(report["partition"]["labels"].as_array().unwrap().len(), 4);
    assert_eq!(report["report"]["query"]["arm"], "dosed");
}
