use std::path::Path;
use std::process::{Command, Output};

fn snrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snrl"))
        .args(args)
        .env_remove("SNRL_OUT")
        .output()
        .expect("spawn snrl")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    std::fs::write(
        &path,
        r#"{
  "mode": "sn",
  "norm": {"layers": [-2]},
  "train": {"total_steps": 1200, "warmup": 200, "target_update": 20,
            "eval_every": 400, "eval_steps": 100, "probe_states": 8},
  "seeds": [3]
}"#,
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let o = snrl(&["train", "--config", "no/such/config.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no/such/config.json"), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_and_flag_are_usage_errors() {
    assert_eq!(snrl(&["fly"]).status.code(), Some(1));
    assert_eq!(snrl(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(snrl(&["train", "--preset", "pong-x"]).status.code(), Some(1));
    assert_eq!(snrl(&["--help"]).status.code(), Some(0));
}

#[test]
fn minatar_preset_echo() {
    let o = snrl(&["train", "--preset", "minatar-b1", "--dry-run"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["train"]["gamma"], 0.99);
    assert_eq!(v["optim"]["eta"], 0.00025);
    assert_eq!(v["optim"]["eps"], 0.0003125);
    assert_eq!(v["train"]["target_update"], 4000);
    assert_eq!(v["train"]["replay_capacity"], 100000);
}

#[test]
fn atari_preset_cannot_train_with_frame_history() {
    let o = snrl(&["train", "--preset", "atari-c1", "--out", "/nonexistent/never"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("history"), "{}", stderr(&o));
}

#[test]
fn train_twice_gives_identical_csv_then_eval_probe_plot() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny_config(d.path());
    let a = d.path().join("a");
    let b = d.path().join("b");
    for out in [&a, &b] {
        let o = snrl(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let csv_a = std::fs::read(a.join("run_seed3.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read(b.join("run_seed3.csv")).unwrap());
    assert_eq!(
        std::fs::read(a.join("ckpt_seed3.snrl")).unwrap(),
        std::fs::read(b.join("ckpt_seed3.snrl")).unwrap()
    );
    let text = String::from_utf8(csv_a).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "step,return_mean,norm_score,rho_1,rho_2,rho_3,jac_norm,eff_rank"
    );
    assert_eq!(text.lines().count(), 4);

    let ck = a.join("ckpt_seed3.snrl");
    let o = snrl(&["eval", "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["env"], "dodger");

    let o = snrl(&["probe", "--checkpoint", ck.to_str().unwrap(), "--states", "20"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let jac = v["jacobian_max_norm"].as_f64().unwrap();
    assert!(jac <= v["lipschitz_upper_bound"].as_f64().unwrap() + 1e-6);

    let plots = d.path().join("plots");
    let csv = a.join("run_seed3.csv");
    let o = snrl(&[
        "plot",
        csv.to_str().unwrap(),
        "--column",
        "return_mean",
        "--out",
        plots.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let svg = std::fs::read_to_string(plots.join("plot.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
}

#[test]
fn snrl_out_overrides_out_flag() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny_config(d.path());
    let env_out = d.path().join("from_env");
    let flag_out = d.path().join("from_flag");
    let o = Command::new(env!("CARGO_BIN_EXE_snrl"))
        .args(["train", "--config", &cfg, "--out", flag_out.to_str().unwrap()])
        .env("SNRL_OUT", &env_out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(env_out.join("run_seed3.csv").is_file());
    assert!(!flag_out.exists());
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("bad.snrl");
    std::fs::write(&p, b"NOTSNRL\n").unwrap();
    let o = snrl(&["eval", "--checkpoint", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}

#[test]
fn sweep_counts_and_writes_table() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("sweep.json");
    std::fs::write(
        &cfg,
        r#"{
  "base": {"train": {"total_steps": 300, "warmup": 100, "target_update": 10,
                     "eval_every": 300, "eval_steps": 50, "probe_states": 0},
           "seeds": [0, 1]},
  "eta": {"min": 0.0001, "max": 0.001, "points": 2},
  "eps": {"min": 0.00001, "max": 0.01, "points": 2}
}"#,
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let o = snrl(&["sweep", "--config", cfg, "--dry-run"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "8 runs in 4 cells");

    let mut tables = Vec::new();
    for workers in ["1", "3"] {
        let out = d.path().join(format!("w{workers}"));
        let o = snrl(&["sweep", "--config", cfg, "--workers", workers, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        tables.push(std::fs::read_to_string(out.join("sweep.csv")).unwrap());
    }
    assert_eq!(tables[0], tables[1]);
    assert_eq!(tables[0].lines().count(), 5);
}
