use std::path::Path;
use std::process::Command;

fn prefalign(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_prefalign"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

const CONFIG: &str = r#"
replications = 2
seed = 3
methods = ["dpo_naive", "ddpo"]
[world]
prompt_count = 3
responses_per_prompt = 4
[train]
steps = 40
[dipo_train]
steps = 20
[protocol]
N = 300
"#;

#[test]
fn subcommands_write_into_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.toml"), CONFIG).unwrap();
    let runs: [&[&str]; 9] = [
        &["simulate"],
        &["train-ddpo"],
        &["train-dipo"],
        &["estimate", "--method", "dipo"],
        &["estimate", "--method", "dipo+"],
        &["compare-efficiency", "--n", "50", "--N", "300", "--reps", "10"],
        &["oracle"],
        &["sweep", "--axis", "N", "--values", "200,300"],
        &["report"],
    ];
    for args in runs {
        let mut all = vec!["--config", "c.toml", "--out", "o", "--jobs", "1"];
        all.extend_from_slice(args);
        let out = prefalign(d, &all);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let mut entries: Vec<_> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name()).collect();
    entries.sort();
    assert_eq!(entries, ["c.toml", "o"]);
    for f in ["dataset.csv", "trace.csv", "policy.csv", "estimate.json", "efficiency.json", "oracle.json", "sweep.csv", "records.csv", "summary.csv", "summary.json"] {
        assert!(d.join("o").join(f).exists(), "{f}");
    }
    let sweep = std::fs::read_to_string(d.join("o/sweep.csv")).unwrap();
    assert!(sweep.starts_with("axis,value,method,mean,se,reps"));

    let out = prefalign(d, &["--config", "c.toml", "--out", "o", "oracle"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let (opt, hat, regret) = (v["value_opt"].as_f64().unwrap(), v["value_hat"].as_f64().unwrap(), v["regret"].as_f64().unwrap());
    assert!((opt - hat - regret).abs() < 1e-12);

    let out = prefalign(d, &["--out", "p", "report", "--records", "o/records.csv"]);
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(d.join("o/summary.json")).unwrap(),
        std::fs::read(d.join("p/summary.json")).unwrap()
    );
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = prefalign(d, &["--config", "missing.toml", "simulate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.toml"));
    std::fs::write(d.join("bad.toml"), "[protocol]\nn = 7\n").unwrap();
    let out = prefalign(d, &["--config", "bad.toml", "simulate"]);
    assert!(!out.status.success());
    let out = prefalign(d, &["--out", "o", "sweep", "--axis", "gamma", "--values", "1"]);
    assert!(!out.status.success());
}
