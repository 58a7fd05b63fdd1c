use std::path::Path;
use std::process::Command;

const TINY: &str = r#"
[surrogate]
terminal_rows = 40
eval_points = 50

[surrogate.gen]
lr = 0.001
max_steps = 30
width = 16

[surrogate.des]
lr = 0.001
max_steps = 30
width = 16

[surrogate.pb]
lr = 0.0001
max_steps = 30
width = 16
grad_clip = 0.1

[datasets]
rows = 300

[baselines]
epochs = 1

[ppo]
n_envs = 2
buffer_size = 8
horizon = 16
eval_horizon = 16
max_updates = 2
epochs = 1

[sweep]
n_envs = [1, 2]
buffer_sizes = [4]

[episodic]
len = 10

[bench]
n = 20
"#;

fn gridtwin(dir: &Path, args: &[&str]) -> std::process::Output {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    Command::new(env!("CARGO_BIN_EXE_gridtwin"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("run"))
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = gridtwin(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join("run").join(name)).unwrap()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();

    let missing = gridtwin(d, &["bench"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("train-surrogate"));

    ok(d, &["train-surrogate"]);
    ok(d, &["gen-datasets"]);
    ok(d, &["fit-baselines"]);
    ok(d, &["train-policy", "--env", "oracle"]);
    ok(d, &["train-policy", "--env", "pinn"]);
    ok(d, &["train-policy", "--env", "linear-agent"]);
    ok(d, &["episodic-mae"]);
    ok(d, &["bench"]);
    ok(d, &["sweep"]);

    for f in [
        "surrogate.ckpt",
        "fidelity.csv",
        "datasets/agent.csv",
        "datasets/generative.csv",
        "baselines/mlp-generative.ckpt",
        "baselines/one-step.csv",
        "policy-oracle.ckpt",
        "training-pinn.csv",
        "timing-bench-summary.csv",
        "manifest-bench.json",
    ] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let sweep = read(d, "sweep-oracle.csv");
    assert_eq!(sweep.lines().count(), 1 + 2);
    let ep = read(d, "episodic-summary.csv");
    for model in ["pinn", "linear-agent", "linear-generative", "mlp-agent", "mlp-generative"] {
        for policy in ["random", "expert"] {
            assert!(ep.contains(&format!("{model},{policy},")), "{model} {policy}");
        }
    }
    let manifest: serde_json::Value = serde_json::from_str(&read(d, "manifest-train-surrogate.json")).unwrap();
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    let timing = read(d, "timing-bench.csv");
    assert_eq!(timing.lines().count(), 21);
}

#[test]
fn reruns_reproduce_metric_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        ok(d, &["train-surrogate"]);
        ok(d, &["gen-datasets", "--dataset-kind", "agent"]);
        ok(d, &["train-policy"]);
    }
    for f in [
        "fidelity.csv",
        "loss-pb.csv",
        "datasets/agent.csv",
        "training-oracle.csv",
        "manifest-train-surrogate.json",
    ] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
    assert_eq!(
        std::fs::read(a.path().join("run/surrogate.ckpt")).unwrap(),
        std::fs::read(b.path().join("run/surrogate.ckpt")).unwrap()
    );
}
