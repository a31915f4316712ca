use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn kom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kom"))
        .args(args)
        .env_remove("KOM_JOBS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", stderr(o));
    serde_json::from_str(&stdout(o)).expect("valid json")
}

/// Deterministic two-covariate data with a constant effect of 4.
fn fixture(dir: &Path, n: usize) -> PathBuf {
    let mut text = String::from("id,t,s,y,x1,x2\n");
    for i in 0..n {
        let f = i as f64;
        let x1 = (1.3 * f).sin();
        let x2 = (0.7 * f + 0.2).cos();
        let t = u8::from(x1 + x2 + 0.8 * (5.1 * f).sin() > 0.0);
        let y = 3.0 * (x1 + x2) + 4.0 * f64::from(t) + 0.5 * (11.0 * f).sin();
        text.push_str(&format!("u{i},{t},1,{y},{x1},{x2}\n"));
    }
    let p = dir.join("data.csv");
    fs::write(&p, text).unwrap();
    p
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn read_weights(p: &Path) -> Vec<(String, f64, f64)> {
    let mut rdr = csv::Reader::from_path(p).unwrap();
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), ["id", "w", "v"]);
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].parse().unwrap(), r[2].parse().unwrap())
        })
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn tune_writes_four_positive_numbers_per_arm() {
    let dir = TempDir::new().unwrap();
    let data = fixture(dir.path(), 40);
    let v = json(&kom(&["tune", "-i", s(&data)]));
    assert_eq!(v["schema_version"], 1);
    for arm in ["treated", "control"] {
        for key in ["gamma", "theta", "sigma2", "lambda"] {
            let x = v[arm][key].as_f64().unwrap();
            assert!(x > 0.0 && x.is_finite(), "{arm}.{key} = {x}");
        }
        assert!(v[arm]["lml"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn missing_outcome_column_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let data = write(dir.path(), "bad.csv", "id,t,s,x1\na,1,1,0.5\nb,0,1,0.1\n");
    let o = kom(&["tune", "-i", s(&data)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`y`"), "{}", stderr(&o));
}

#[test]
fn sate_weights_on_the_toy_sum_to_n_per_arm() {
    let dir = TempDir::new().unwrap();
    let data = write(dir.path(), "toy.csv", "id,t,s,y,x1\na,1,1,4,0\nb,0,1,1,1\nc,1,1,6,2\nd,0,1,3,3\n");
    let out = dir.path().join("w.csv");
    let o = kom(&["weights", "-i", s(&data), "--lambda", "1", "--estimand", "sate", "-o", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let w = read_weights(&out);
    let treated: f64 = [0, 2].iter().map(|&i| w[i].1).sum();
    let control: f64 = [1, 3].iter().map(|&i| w[i].1).sum();
    assert!((treated - 4.0).abs() < 1e-6 && (control - 4.0).abs() < 1e-6, "{treated} {control}");
    let diag: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(diag["config"]["command"], "weights");
    assert!(diag["jitter_used"].as_f64().unwrap() > 0.0);
}

#[test]
fn kowate_targets_lie_on_the_simplex() {
    let dir = TempDir::new().unwrap();
    let data = fixture(dir.path(), 30);
    let out = dir.path().join("w.csv");
    let o = kom(&["weights", "-i", s(&data), "--lambda", "0.5", "--estimand", "kowate", "-o", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let total: f64 = read_weights(&out).iter().map(|r| r.2).sum();
    assert!((total - 1.0).abs() < 1e-6, "{total}");
}

#[test]
fn kosate_selects_exactly_the_requested_units() {
    let dir = TempDir::new().unwrap();
    let data = write(
        dir.path(),
        "six.csv",
        "id,t,s,y,x1\na,1,1,1,0.1\nb,0,1,2,0.4\nc,1,1,3,0.9\nd,0,1,1,1.3\ne,1,1,2,1.6\nf,0,1,0,2.2\n",
    );
    let out = dir.path().join("w.csv");
    let o = kom(&["weights", "-i", s(&data), "--lambda", "1", "--estimand", "kosate", "--subset-size", "3", "-o", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Vec<f64> = read_weights(&out).iter().map(|r| r.2).filter(|&v| v != 0.0).collect();
    assert_eq!(v.len(), 3);
    assert!(v.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12), "{v:?}");
}

#[test]
fn zero_lambda_reports_no_variance_penalty() {
    let dir = TempDir::new().unwrap();
    let data = fixture(dir.path(), 30);
    let v = json(&kom(&["estimate", "-i", s(&data), "--lambda", "zero"]));
    assert_eq!(v["diagnostics"]["variance_penalty"].as_f64(), Some(0.0));
    assert_eq!(v["config"]["lambda"], "zero");
}

#[test]
fn hand_weights_give_the_arithmetic_estimate() {
    let dir = TempDir::new().unwrap();
    let data = write(dir.path(), "toy.csv", "id,t,s,y,x1\na,1,1,4,0\nb,0,1,1,1\nc,1,1,6,2\nd,0,1,3,3\n");
    let w = write(dir.path(), "w.csv", "id,w,v\nd,2,0.25\nc,2,0.25\nb,2,0.25\na,2,0.25\n");
    let v = json(&kom(&["estimate", "-i", s(&data), "--weights", s(&w)]));
    assert_eq!(v["report"]["tau_hat"].as_f64(), Some(3.0));
}

#[test]
fn residual_free_data_have_zero_standard_errors() {
    let dir = TempDir::new().unwrap();
    let data = write(dir.path(), "flat.csv", "id,t,s,y,x1\na,1,1,5,0\nb,0,1,3,1\nc,1,1,5,2\nd,0,1,3,3\n");
    let w = write(dir.path(), "w.csv", "id,w,v\na,2,0.25\nb,2,0.25\nc,2,0.25\nd,2,0.25\n");
    let v = json(&kom(&["estimate", "-i", s(&data), "--weights", s(&w)]));
    for key in ["se_conditional", "se_naive", "se_sandwich"] {
        assert_eq!(v["report"][key].as_f64(), Some(0.0), "{key}");
    }
}

#[test]
fn missing_weight_rows_are_named() {
    let dir = TempDir::new().unwrap();
    let data = write(dir.path(), "toy.csv", "id,t,s,y,x1\na,1,1,4,0\nb,0,1,1,1\nc,1,1,6,2\nd,0,1,3,3\n");
    let w = write(dir.path(), "w.csv", "id,w,v\na,2,0.25\nb,2,0.25\nc,2,0.25\n");
    let o = kom(&["estimate", "-i", s(&data), "--weights", s(&w)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`d`"), "{}", stderr(&o));
}

#[test]
fn compare_all_adds_one_block_per_method() {
    let dir = TempDir::new().unwrap();
    let data = fixture(dir.path(), 60);
    let v = json(&kom(&["estimate", "-i", s(&data), "--lambda", "1", "--compare", "all"]));
    let blocks = v["comparison"].as_array().unwrap();
    let methods: Vec<&str> = blocks.iter().map(|b| b["method"].as_str().unwrap()).collect();
    assert_eq!(methods, ["ipw", "overlap", "truncated", "outcome-regression"]);
    assert_eq!(blocks[0]["estimand"], v["report"]["estimand"]);
    assert_eq!(blocks[3]["estimand"], v["report"]["estimand"]);
    assert!(blocks.iter().all(|b| b["tau_hat"].as_f64().is_some_and(f64::is_finite)));
}

#[test]
fn written_weights_reproduce_the_end_to_end_estimate() {
    let dir = TempDir::new().unwrap();
    let data = fixture(dir.path(), 40);
    let out = dir.path().join("w.csv");
    let o = kom(&["weights", "-i", s(&data), "--lambda", "0.3", "-o", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let direct = json(&kom(&["estimate", "-i", s(&data), "--lambda", "0.3"]));
    let reread = json(&kom(&["estimate", "-i", s(&data), "--weights", s(&out)]));
    assert_eq!(direct["report"]["tau_hat"], reread["report"]["tau_hat"]);
}

#[test]
fn unsolvable_programs_exit_with_the_solver_code() {
    let dir = TempDir::new().unwrap();
    let data = fixture(dir.path(), 30);
    let o = kom(&["weights", "-i", s(&data), "--lambda", "1", "--max-iter", "1"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("ladder"), "{}", stderr(&o));
}

#[test]
fn flags_override_the_config_file() {
    let dir = TempDir::new().unwrap();
    let data = fixture(dir.path(), 30);
    let cfg = write(dir.path(), "kom.toml", "estimand = \"kowate\"\nlambda = \"2\"\ntruncation = 0.05\n");
    let v = json(&kom(&["--config", s(&cfg), "estimate", "-i", s(&data), "--estimand", "sate"]));
    assert_eq!(v["config"]["estimand"], "sate");
    assert_eq!(v["config"]["truncation"].as_f64(), Some(0.05));
    assert_eq!(v["config"]["lambda"]["fixed"].as_f64(), Some(2.0));
    let bad = write(dir.path(), "bad.toml", "estimand = \"sate\"\nwat = 1\n");
    assert_eq!(kom(&["--config", s(&bad), "estimate", "-i", s(&data)]).status.code(), Some(2));
}

#[test]
fn help_documents_exit_codes() {
    let o = kom(&["--help"]);
    assert!(stdout(&o).contains("Exit codes"));
    assert!(stdout(&kom(&["simulate", "--help"])).contains("5  every replicate"));
}

#[test]
fn small_sweep_is_one_row_and_repeatable() {
    let args = ["simulate", "--reps", "2", "--alpha-grid", "0.1", "--gamma-levels", "1", "--methods", "ipw", "--n", "60"];
    let first = kom(&args);
    assert!(first.status.success(), "{}", stderr(&first));
    let text = stdout(&first);
    assert_eq!(text.lines().count(), 2, "{text}");
    assert!(text.lines().nth(1).unwrap().contains("ipw-sate"));
    assert_eq!(stdout(&kom(&args)), text);
    let parallel = kom(&[&args[..], &["--jobs", "3"]].concat());
    assert_eq!(stdout(&parallel), text);
}

#[test]
fn sweep_directory_has_plot_ready_tables() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("sweep");
    let o = kom(&[
        "simulate", "--reps", "3", "--alpha-grid", "0.2,0.8", "--gamma-levels", "1,0", "--methods", "ipw,or,truncated",
        "--n", "60", "-o", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 * 2 * 3);
    assert!(!summary.contains("NaN"));
    let long = fs::read_to_string(out.join("long.csv")).unwrap();
    assert!(long.starts_with("scenario,method,metric,value\n"));
    assert!(!long.contains("NaN"));
    let results: Value = serde_json::from_str(&fs::read_to_string(out.join("results.json")).unwrap()).unwrap();
    assert_eq!(results["schema_version"], 1);
    assert_eq!(results["result"]["scenarios"].as_array().unwrap().len(), 4);
}

#[test]
fn sweep_where_every_replicate_fails_exits_five() {
    let o = kom(&[
        "simulate", "--reps", "2", "--alpha-grid", "0.1", "--gamma-levels", "1", "--methods", "kom", "--n", "40",
        "--lambda", "1", "--max-iter", "1",
    ]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
}

#[test]
fn invalid_grid_values_are_usage_errors() {
    let o = kom(&["simulate", "--reps", "1", "--alpha-grid", "1.5", "--methods", "ipw"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn consistency_check_prints_slope_and_verdict() {
    let o = kom(&[
        "simulate", "--check", "consistency", "--methods", "ipw", "--alpha-grid", "0.5", "--gamma-levels", "1", "--reps",
        "20", "--n-grid", "50,100,200",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("slope"), "{text}");
    assert!(text.contains("PASS") || text.contains("FAIL"));
}
