use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
name = "small"
master_seed = 11
trials = 2

[dgp]
kind = "normal_regression"
n = 150

[mcmc]
draws = 600
burn_in = 100

[[models]]
name = "short"
family = "linear"
columns = { response = "y", regressors = ["z"] }

[[models]]
name = "long"
family = "linear"
columns = { response = "y", regressors = ["z"] }
moments = [{ kind = "residual" }, { kind = "residual_times", column = "z" }, { kind = "residual_power", power = 3 }]
active_mask = [true, true, false]
"#;

const LOCATION: &str = r#"
master_seed = 3

[dgp]
kind = "location_only"
n = 100

[mcmc]
draws = 300
burn_in = 50

[[models]]
name = "var"
family = "location"
columns = { response = "y" }
moments = [{ kind = "residual" }, { kind = "residual_power", power = 2, offset = 1.0 }]

[pseudo_true]
population = 20000
search = { method = "grid", lower = -0.2, upper = 0.2, step = 0.05 }
"#;

fn betel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_betel")).args(args).env_remove("BETEL_THREADS").output().expect("binary runs")
}

fn write_config(dir: &TempDir, name: &str, text: &str) -> String {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn out_dir(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

fn read(dir: &str, file: &str) -> Vec<u8> {
    fs::read(Path::new(dir).join(file)).unwrap_or_else(|e| panic!("{dir}/{file}: {e}"))
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&betel(&["--help"])), 0);
    assert_eq!(code(&betel(&["--version"])), 0);
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&betel(&["fit", "--bogus"])), 1);
    assert_eq!(code(&betel(&["fit", "--config", "/nonexistent/config.toml"])), 1);
    let bad = write_config(&dir, "bad.toml", "models = 3\n");
    assert_eq!(code(&betel(&["compare", "--config", &bad, "--out", &out_dir(&dir, "o")])), 1);
    let unknown = write_config(&dir, "family.toml", &SMALL.replace("\"linear\"", "\"probit\""));
    assert_eq!(code(&betel(&["compare", "--config", &unknown, "--out", &out_dir(&dir, "o")])), 1);
    let cfg = write_config(&dir, "small.toml", SMALL);
    assert_eq!(code(&betel(&["fit", "--config", &cfg, "--threads", "0", "--out", &out_dir(&dir, "o")])), 1);
    let pt = betel(&["pseudo-true", "--config", &cfg, "--out", &out_dir(&dir, "o")]);
    assert_eq!(code(&pt), 1, "{}", String::from_utf8_lossy(&pt.stderr));
}

#[test]
fn fit_outputs_are_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "small.toml", SMALL);
    let (a, b) = (out_dir(&dir, "a"), out_dir(&dir, "b"));
    for out in [&a, &b] {
        let o = betel(&["fit", "--config", &cfg, "--out", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for file in ["summary_short.csv", "chain_short.csv", "chain_short.json", "summary_long.csv", "chain_long.csv"] {
        assert_eq!(read(&a, file), read(&b, file), "{file} differs between runs");
    }
    let chain = String::from_utf8(read(&a, "chain_short.csv")).unwrap();
    assert_eq!(chain.lines().count(), 601);
    assert!(chain.lines().next().unwrap().ends_with("accepted"));
    let meta: serde_json::Value = serde_json::from_slice(&read(&a, "chain_short.json")).unwrap();
    assert_eq!(meta["draws"], 600);
    assert_eq!(meta["config_hash"].as_str().unwrap().len(), 16);

    // a different seed changes the chain
    let c = out_dir(&dir, "c");
    assert_eq!(code(&betel(&["fit", "--config", &cfg, "--seed", "12", "--out", &c])), 0);
    assert_ne!(read(&a, "chain_short.csv"), read(&c, "chain_short.csv"));
}

#[test]
fn compare_writes_a_ranking() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "small.toml", SMALL);
    let (a, b) = (out_dir(&dir, "a"), out_dir(&dir, "b"));
    for out in [&a, &b] {
        assert_eq!(code(&betel(&["compare", "--config", &cfg, "--out", out])), 0);
    }
    assert_eq!(read(&a, "ranking.json"), read(&b, "ranking.json"));
    assert_eq!(read(&a, "ranking.csv"), read(&b, "ranking.csv"));
    let json: serde_json::Value = serde_json::from_slice(&read(&a, "ranking.json")).unwrap();
    assert_eq!(json["models"].as_array().unwrap().len(), 2);
    let csv = String::from_utf8(read(&a, "ranking.csv")).unwrap();
    assert!(csv.starts_with("model,rank,log_ml,"));
    assert!(!csv.contains('\r'));
}

#[test]
fn compare_reads_csv_data() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "small.toml", SMALL);
    let mut rows = String::from("y,z\n");
    for i in 0..120 {
        let z = (i as f64 * 0.37).sin();
        let e = (i as f64 * 1.91).cos() * 0.8;
        rows.push_str(&format!("{},{}\n", 1.0 + z + e, z));
    }
    let data = dir.path().join("data.csv");
    fs::write(&data, rows).unwrap();
    let out = out_dir(&dir, "o");
    let o = betel(&["compare", "--config", &cfg, "--data", data.to_str().unwrap(), "--out", &out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let missing = dir.path().join("missing.csv");
    fs::write(&missing, "y,w\n1,2\n2,3\n").unwrap();
    assert_eq!(code(&betel(&["compare", "--config", &cfg, "--data", missing.to_str().unwrap(), "--out", &out])), 1);
}

#[test]
fn replicate_tabulates_trials() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "small.toml", SMALL);
    let out = out_dir(&dir, "o");
    let o = betel(&["replicate", "--config", &cfg, "--trials", "3", "--threads", "1", "--out", &out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(read(&out, "selection.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("model,n,trials,failed_trials,selected,percent"));
    let selected: usize = lines.map(|l| l.split(',').nth(4).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(selected, 3);
    assert_eq!(String::from_utf8(read(&out, "trials.csv")).unwrap().lines().count(), 4);
}

#[test]
fn numerical_failure_exits_with_two() {
    // every observation sits within 0.01 of the others, so e² − 1 < 0 for all
    // rows at every location and the tilting problem has no solution
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "loc.toml", LOCATION);
    let mut rows = String::from("y\n");
    for i in 0..50 {
        rows.push_str(&format!("{}\n", 0.001 * (i % 10) as f64));
    }
    let data = dir.path().join("tight.csv");
    fs::write(&data, rows).unwrap();
    let out = out_dir(&dir, "o");
    let o = betel(&["fit", "--config", &cfg, "--data", data.to_str().unwrap(), "--out", &out]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let o = betel(&["compare", "--config", &cfg, "--data", data.to_str().unwrap(), "--out", &out]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pseudo_true_writes_estimates_and_curve() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "loc.toml", LOCATION);
    let (a, b) = (out_dir(&dir, "a"), out_dir(&dir, "b"));
    for out in [&a, &b] {
        let o = betel(&["pseudo-true", "--config", &cfg, "--out", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(read(&a, "pseudo_true.json"), read(&b, "pseudo_true.json"));
    let json: serde_json::Value = serde_json::from_slice(&read(&a, "pseudo_true.json")).unwrap();
    assert_eq!(json[0]["mc_sample_size"], 20000);
    let curve = String::from_utf8(read(&a, "curve_var.csv")).unwrap();
    assert!(curve.starts_with("psi,objective,mc_se\n"));
    assert!(curve.lines().count() >= 10);
}
