use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seeds = [0, 1]

[problem]
generator = "hetero_quadratic"
d = 6
n = 5
delta = 0.3
psd_floor = 0.05
seed = 7

[run]
algorithm = "fedavg"
gamma = 0.01
I = 3
R = 30
sigma = 0.1
"#;

fn fedhet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedhet"))
        .current_dir(dir)
        .env_remove("FEDHET_OUT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

fn config(dir: &Path, name: &str, body: &str) {
    fs::write(dir.join(name), body).unwrap();
}

#[test]
fn table2_writes_nine_rows_for_five_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fedhet(tmp.path(), &["table2", "--seeds", "5", "--out", "results"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let written = files(&tmp.path().join("results"));
    assert_eq!(written.len(), 1);
    let csv = fs::read_to_string(tmp.path().join("results").join(&written[0])).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let seed_cols = header.iter().filter(|h| h.starts_with("rounds_seed_")).count();
    assert_eq!(seed_cols, 5);
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 9);
    let hash = written[0].trim_start_matches("table2_").trim_end_matches(".csv");
    assert!(rows.iter().all(|r| r.starts_with(hash)));
}

#[test]
fn missing_gamma_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let body: String = CONFIG.lines().filter(|l| !l.starts_with("gamma")).map(|l| format!("{l}\n")).collect();
    config(tmp.path(), "c.toml", &body);
    let out = fedhet(tmp.path(), &["run", "c.toml", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamma"));
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn invalid_values_name_their_key() {
    let tmp = tempfile::tempdir().unwrap();
    config(tmp.path(), "c.toml", &CONFIG.replace("I = 3", "I = 3\nM = 9"));
    let out = fedhet(tmp.path(), &["run", "c.toml", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`M`"));

    let out = fedhet(tmp.path(), &["run", "absent.toml", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn repeated_runs_write_identical_traces() {
    let tmp = tempfile::tempdir().unwrap();
    config(tmp.path(), "c.toml", CONFIG);
    for (dir, threads) in [("a", "1"), ("b", "8"), ("c", "8")] {
        let out = fedhet(tmp.path(), &["run", "c.toml", "--out", dir, "--threads", threads]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let names = files(&tmp.path().join("a"));
    assert_eq!(names.iter().filter(|n| n.contains("trace_seed")).count(), 2);
    for dir in ["b", "c"] {
        assert_eq!(files(&tmp.path().join(dir)), names);
        for n in &names {
            let a = fs::read(tmp.path().join("a").join(n)).unwrap();
            let b = fs::read(tmp.path().join(dir).join(n)).unwrap();
            assert_eq!(a, b, "{dir}/{n}");
        }
    }
}

#[test]
fn seed_override_runs_one_seed() {
    let tmp = tempfile::tempdir().unwrap();
    config(tmp.path(), "c.toml", CONFIG);
    let out = fedhet(tmp.path(), &["run", "c.toml", "--out", "o", "--seed", "42"]);
    assert!(out.status.success());
    let names = files(&tmp.path().join("o"));
    assert_eq!(names.len(), 2);
    assert!(names.iter().all(|n| n.contains("seed42")));
    let manifest = names.iter().find(|n| n.contains("manifest")).unwrap();
    let m: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("o").join(manifest)).unwrap()).unwrap();
    assert_eq!(m["seed"], 42);
    assert!(manifest.contains(m["spec_hash"].as_str().unwrap()));
}

#[test]
fn divergence_exits_3_and_keeps_partial_traces() {
    let tmp = tempfile::tempdir().unwrap();
    config(tmp.path(), "c.toml", &CONFIG.replace("gamma = 0.01", "gamma = 50.0"));
    let out = fedhet(tmp.path(), &["run", "c.toml", "--out", "o"]);
    assert_eq!(out.status.code(), Some(3));
    let names = files(&tmp.path().join("o"));
    let manifest = names.iter().find(|n| n.contains("manifest_seed0")).unwrap();
    let m: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("o").join(manifest)).unwrap()).unwrap();
    assert!(m["diverged_at"].as_u64().is_some());
    assert!(names.iter().any(|n| n.contains("trace_seed0")));
}

#[test]
fn output_directory_defaults_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    config(tmp.path(), "c.toml", CONFIG);
    let out = Command::new(env!("CARGO_BIN_EXE_fedhet"))
        .current_dir(tmp.path())
        .env("FEDHET_OUT", "from_env")
        .args(["gen", "c.toml"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(files(&tmp.path().join("from_env")).len(), 1);
    assert_eq!(files(tmp.path()), ["c.toml", "from_env"]);
}

#[test]
fn labels_cannot_escape_the_output_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!(
        "{}\n[[variants]]\nlabel = \"../../escape\"\n[variants.config]\nalgorithm = \"fedavg\"\ngamma = 0.01\nI = 1\nR = 2\n",
        CONFIG
    );
    config(tmp.path(), "c.toml", &body);
    let out = fedhet(tmp.path(), &["run", "c.toml", "--out", "o", "--seed", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(files(tmp.path()), ["c.toml", "o"]);
    assert_eq!(files(&tmp.path().join("o")).len(), 4);
}

#[test]
fn bounds_with_explicit_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!(
        "{CONFIG}\n[bounds]\ntheorem = \"main\"\n[bounds.inputs]\nf_gap = 1.0\nl_g = 1.0\nl_h = 0.0\nl_tilde = 1.0\n\
         sigma = 0.0\nzeta = 0.0\nn = 10\nm = 10\nlocal_iters = 1\nrounds = 100\ngamma = 0.01\neta = 1.0\n"
    );
    config(tmp.path(), "c.toml", &body);
    let out = fedhet(tmp.path(), &["bounds", "c.toml", "--out", "o"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("bound: main"));
    assert!(stdout.contains("4.000000e0"), "{stdout}");
}

#[test]
fn help_lists_subcommands_and_config_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fedhet(tmp.path(), &["--help"]);
    let help = String::from_utf8_lossy(&out.stdout);
    for sub in ["gen", "run", "estimate", "bounds", "table2", "audit", "lemmas", "demo-prop54"] {
        assert!(help.contains(sub), "{sub}");
    }
    for key in [
        "gamma", "eta", " I ", " R ", " M ", "beta ", "beta1", "beta2", "tau", " s ", "sigma", "full_gradient", "seeds",
        "generator", "psd_floor", "theorem", "g_bound",
    ] {
        assert!(help.contains(key), "{key:?}");
    }
}
