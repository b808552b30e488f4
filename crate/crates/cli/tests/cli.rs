use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
n_train = 8
n_eval = 4

[policy]
window = 12
embed_dim = 8
hidden = 16

[backbone]
steps = 20
batch = 8

[rlvr]
n_rollout = 4
train_batch = 4
mini_batch = 2
max_len = 12

[decomposer]
steps = 2

[reasoner]
steps = 2

[eval]
n_samples = 4
k_list = [1, 4]
max_len = 12
"#;

fn a2d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_a2d")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn pipeline_then_resume_then_refuse() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("run");
    let out = out.to_str().unwrap();

    let o = a2d(&["pipeline", "--config", &cfg, "--seed", "3", "--out", out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("held_out vanilla n=4 pass@1="), "{stdout}");

    let o = a2d(&["pipeline", "--config", &cfg, "--seed", "3", "--out", out]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).starts_with("config error:"));

    let o = a2d(&["pipeline", "--config", &cfg, "--seed", "3", "--out", out, "--resume"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stderr(&o).matches("skipped").count(), 6);

    let o = a2d(&["pipeline", "--config", &cfg, "--seed", "4", "--out", out, "--resume"]);
    assert_eq!(code(&o), 1);

    let o = a2d(&["report", out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("run,mode,seed,config_hash,pass@1,pass@4"));
}

#[test]
fn phases_run_one_at_a_time() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("run");
    let out = out.to_str().unwrap();
    for cmd in ["gen-data", "backbone", "train-reasoner", "eval"] {
        let o = a2d(&[cmd, "--config", &cfg, "--mode", "grpo", "--out", out]);
        assert_eq!(code(&o), 0, "{cmd}: {}", stderr(&o));
    }
    // a finished phase is neither silently redone nor silently skipped
    let o = a2d(&["train-reasoner", "--out", out]);
    assert_eq!(code(&o), 1);
    let o = a2d(&["train-reasoner", "--out", out, "--resume"]);
    assert_eq!(code(&o), 0);
    let o = a2d(&["train-reasoner", "--out", out, "--force"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let report = tmp.path().join("ckpt_eval.json");
    let ckpt = tmp.path().join("run/backbone.ckpt");
    let o = a2d(&["eval", "--out", out, "--checkpoint", ckpt.to_str().unwrap(), "--report", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(report.exists());
}

#[test]
fn phase_failures_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("run");
    let out = out.to_str().unwrap();
    assert_eq!(code(&a2d(&["gen-data", "--config", &cfg, "--out", out])), 0);
    // annotating needs a trained decomposer
    let o = a2d(&["annotate", "--out", out]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).starts_with("error: phase annotate failed"), "{}", stderr(&o));
}

#[test]
fn config_problems_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let out = out.to_str().unwrap();
    assert_eq!(code(&a2d(&["pipeline", "--mode", "bogus", "--out", out])), 1);
    assert_eq!(code(&a2d(&["pipeline", "--config", "/nonexistent.toml", "--out", out])), 1);

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[rlvr]\nn_rollout = 1\n").unwrap();
    let o = a2d(&["gen-data", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("n_rollout"));

    let unknown = tmp.path().join("unknown.toml");
    std::fs::write(&unknown, "[rlvr]\nlearning_rate = 1\n").unwrap();
    assert_eq!(code(&a2d(&["gen-data", "--config", unknown.to_str().unwrap(), "--out", out])), 1);

    assert_eq!(code(&a2d(&["pipeline"])), 1);
    assert_eq!(code(&a2d(&["pipeline", "--out", out, "--force", "--resume"])), 1);
    assert_eq!(code(&a2d(&["--help"])), 0);
}
