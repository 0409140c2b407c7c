use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cmta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmta"))
        .args(args)
        .env_remove("CMTA_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
suite = "MT3-Fixed"
seed = 4
steps = 600
checkpoint_every = 300

[model]
n_experts = 3
expert_layers = [8, 8]
task_embedding_dim = 4
task_layers = [8]
lstm_hidden = 4
actor_hidden = [16]
critic_hidden = [16]

[train]
batch_per_task = 8
warmup_steps = 200
eval_every = 300
eval_episodes = 2
horizon = 30
"#;

fn tiny_run(dir: &Path) -> std::path::PathBuf {
    let config = dir.join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let out = dir.join("run");
    let o = cmta(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn unknown_suite_is_a_config_error() {
    let o = cmta(&["train", "--suite", "MT7-Mixed", "--dry-run"]);
    assert_eq!(o.status.code(), Some(2));
    let o = cmta(&["suite", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_checkpoint_exits_with_checkpoint_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bogus.json");
    fs::write(&path, r#"{"format":"cmta-checkpoint","version":999}"#).unwrap();
    let o = cmta(&["eval", "--checkpoint", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let missing = dir.path().join("missing.json");
    let o = cmta(&["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn contrastive_off_zeroes_beta() {
    let o = cmta(&["train", "--contrastive", "off", "--dry-run"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let v: toml::Value = toml::from_str(&text).unwrap();
    assert_eq!(v["train"]["beta"].as_float(), Some(0.0));
    assert_eq!(v["train"]["contrastive"].as_bool(), Some(false));
}

#[test]
fn expert_counts_are_accepted() {
    for k in ["2", "6"] {
        let o = cmta(&["train", "--experts", k, "--dry-run"]);
        assert!(o.status.success(), "K = {k}");
        let v: toml::Value = toml::from_str(&stdout(&o)).unwrap();
        assert_eq!(v["model"]["n_experts"].as_integer(), Some(k.parse().unwrap()));
    }
    let o = cmta(&["train", "--experts", "1", "--dry-run"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn shared_encoder_reference_configuration() {
    let o = cmta(&[
        "train",
        "--architecture",
        "shared-encoder",
        "--experts",
        "1",
        "--temporal",
        "off",
        "--contrastive",
        "off",
        "--dry-run",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: toml::Value = toml::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["model"]["architecture"].as_str(), Some("shared-encoder"));
}

#[test]
fn train_eval_and_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = tiny_run(dir.path());
    for file in ["metrics.csv", "summary.toml", "config.resolved.toml", "checkpoint_final.json"] {
        assert!(out.join(file).exists(), "{file} missing");
    }
    let ck = out.join("checkpoint_final.json");
    let ck = ck.to_str().unwrap();

    let first = cmta(&["eval", "--checkpoint", ck]);
    assert!(first.status.success());
    let csv_first = fs::read_to_string(out.join("eval.csv")).unwrap();
    let second = cmta(&["eval", "--checkpoint", ck]);
    assert_eq!(stdout(&first), stdout(&second));
    assert_eq!(csv_first, fs::read_to_string(out.join("eval.csv")).unwrap());
    assert_eq!(csv_first.lines().next(), Some("task_id,task,success_rate"));
    assert_eq!(csv_first.lines().count(), 5);
    assert!(csv_first.lines().last().unwrap().starts_with("mean,all,"));

    let emb = out.join("emb.csv");
    let o = cmta(&["export-embeddings", "--checkpoint", ck, "--episodes", "2", "--out", emb.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&emb).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("task_id,episode,step,expert_index,dim_0,dim_1,dim_2,dim_3,dim_4,dim_5,dim_6,dim_7,alpha")
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(stdout(&o).contains(&format!("wrote {} rows", rows.len())));
    assert!(rows.iter().all(|r| r.len() == 13));
    // three experts per step, every (task, episode) pair present
    assert_eq!(rows.len() % 3, 0);
    let episodes: BTreeSet<(&str, &str)> = rows.iter().map(|r| (r[0], r[1])).collect();
    assert_eq!(episodes.len(), 3 * 2);
    assert!(rows.iter().all(|r| r[2].parse::<usize>().unwrap() < 30));
    for step in rows.chunks(3) {
        let sum: f64 = step.iter().map(|r| r[12].parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn occupied_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("busy");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".lock"), "").unwrap();
    let o = cmta(&["train", "--suite", "Reach-Fixed", "--steps", "10", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
