use std::collections::HashSet;
use std::fs;
use std::path::Path;

use a2d_core::config::{Mode, RunConfig};
use a2d_core::io::read_provenance;
use a2d_core::par::Exec;
use a2d_core::policy::PolicyParams;
use a2d_core::report::{compare_runs, write_csv};
use a2d_core::run::{EvalArtifact, Outcome, Phase, Run, RunOptions, EVAL_ID_BASE};
use a2d_core::Error;

const TINY: &str = r#"
[run]
seed = 5

[data]
n_train = 12
n_eval = 6

[policy]
window = 12
embed_dim = 8
hidden = 16

[backbone]
steps = 30
batch = 8

[rlvr]
n_rollout = 4
train_batch = 4
mini_batch = 2
max_len = 12

[decomposer]
steps = 2

[reasoner]
steps = 3

[eval]
n_samples = 4
k_list = [1, 4]
max_len = 12
with_oracle_hints = true
"#;

fn tiny() -> RunConfig {
    RunConfig::from_toml(TINY).unwrap()
}

fn straight_through(cfg: RunConfig, dir: &Path) -> Run {
    let run = Run::create(cfg, dir, RunOptions::default()).unwrap();
    run.pipeline(false, |_| {}).unwrap();
    run
}

fn bytes(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn suites_are_disjoint_and_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        Run::create(tiny(), d, RunOptions::default()).unwrap().run_phase(Phase::Data).unwrap();
    }
    let run = Run::open(&a).unwrap();
    assert_eq!(bytes(&run.layout.train_tasks()), bytes(&Run::open(&b).unwrap().layout.train_tasks()));
    let train = run.train_tasks().unwrap();
    let held = run.eval_tasks().unwrap();
    assert_eq!((train.len(), held.len()), (12, 6));
    let train_ids: HashSet<u64> = train.iter().map(|t| t.task_id).collect();
    assert!(held.iter().all(|t| !train_ids.contains(&t.task_id) && t.task_id >= EVAL_ID_BASE));
    let train_chains: HashSet<_> = train.iter().map(|t| t.chain.clone()).collect();
    assert!(held.iter().all(|t| t.chain.len() == 3 && !train_chains.contains(&t.chain)));
    let cfg = tiny();
    assert!(train
        .iter()
        .all(|t| (cfg.env.chain_len_min..=cfg.env.chain_len_max).contains(&t.chain.len())));
}

#[test]
fn resuming_at_any_boundary_matches_a_straight_run() {
    let tmp = tempfile::tempdir().unwrap();
    let full = straight_through(tiny(), &tmp.path().join("full"));
    let phases = full.phases();
    assert_eq!(phases.len(), 6);
    for cut in 1..phases.len() {
        let dir = tmp.path().join(format!("cut{cut}"));
        let first = Run::create(tiny(), &dir, RunOptions::default()).unwrap();
        for &p in &phases[..cut] {
            first.run_phase(p).unwrap();
        }
        let resumed = Run::create(
            tiny(),
            &dir,
            RunOptions {
                resume: true,
                ..Default::default()
            },
        )
        .unwrap();
        let mut skipped = 0;
        resumed
            .pipeline(true, |log| skipped += (log.outcome == Outcome::Skipped) as usize)
            .unwrap();
        assert_eq!(skipped, cut);
        assert_eq!(bytes(&resumed.layout.reasoner()), bytes(&full.layout.reasoner()), "cut after {cut} phases");
        let eval = |r: &Run| a2d_core::io::read_json::<EvalArtifact>(&r.layout.eval_report()).unwrap().reports;
        assert_eq!(eval(&resumed), eval(&full));
    }
}

#[test]
fn runs_are_reproducible_and_thread_independent() {
    let tmp = tempfile::tempdir().unwrap();
    let a = straight_through(tiny(), &tmp.path().join("a"));
    let mut seq = tiny();
    seq.run.exec = Exec::Sequential;
    let b = straight_through(seq, &tmp.path().join("b"));
    let mut other = tiny();
    other.run.seed = 6;
    let c = straight_through(other, &tmp.path().join("c"));
    let hash = |r: &Run| PolicyParams::load(&r.layout.reasoner()).unwrap().0.hash();
    assert_eq!(a.config_hash(), b.config_hash());
    assert_eq!(hash(&a), hash(&b));
    assert_ne!(hash(&a), hash(&c));
}

#[test]
fn every_artifact_records_its_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let run = straight_through(tiny(), &tmp.path().join("r"));
    let l = &run.layout;
    for p in [l.train_tasks(), l.eval_tasks(), l.annotations(), l.backbone_metrics(), l.decomposer_metrics(), l.reasoner_metrics()] {
        let prov = read_provenance(&p).unwrap().unwrap_or_else(|| panic!("{} has no provenance", p.display()));
        assert_eq!(prov.config_hash, run.config_hash());
        assert_eq!(prov.master_seed, 5);
        assert!(!prov.code_version.is_empty());
    }
    for p in [l.backbone(), l.decomposer(), l.reasoner()] {
        let (_, prov) = PolicyParams::load(&p).unwrap();
        assert_eq!(prov.unwrap().config_hash, run.config_hash());
    }
    let eval: EvalArtifact = a2d_core::io::read_json(&l.eval_report()).unwrap();
    assert_eq!(eval.provenance.config_hash, run.config_hash());
    assert_eq!(eval.reports.len(), 2);
    assert!(eval.reports.iter().all(|r| r.config_hash == run.config_hash()));
    let recorded = fs::read_to_string(l.config()).unwrap();
    assert!(recorded.starts_with(&format!("# config_hash = \"{}\"", run.config_hash())));
    assert_eq!(RunConfig::from_toml(&recorded).unwrap(), tiny());
}

#[test]
fn baselines_skip_the_decomposer() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.run.mode = Mode::Grpo;
    let run = straight_through(cfg, &tmp.path().join("g"));
    assert!(!run.layout.decomposer().exists());
    assert!(!run.layout.annotations().exists());
    assert!(run.layout.eval_report().exists());
}

#[test]
fn occupied_directories_need_force_or_a_matching_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("r");
    Run::create(tiny(), &dir, RunOptions::default()).unwrap().run_phase(Phase::Data).unwrap();
    assert!(matches!(Run::create(tiny(), &dir, RunOptions::default()), Err(Error::RunDirExists(_))));
    let mut changed = tiny();
    changed.rlvr.n_rollout = 6;
    let resume = RunOptions {
        resume: true,
        ..Default::default()
    };
    assert!(Run::create(changed.clone(), &dir, resume).unwrap_err().is_config());
    let forced = Run::create(
        changed,
        &dir,
        RunOptions {
            force: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(!forced.is_done(Phase::Data).unwrap());
}

#[test]
fn reports_compare_only_matching_environments() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    straight_through(tiny(), &a);
    let mut grpo = tiny();
    grpo.run.mode = Mode::Grpo;
    straight_through(grpo, &b);
    let mut other_env = tiny();
    other_env.env.modulus = 7;
    straight_through(other_env, &c);

    let summaries = compare_runs(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(summaries.len(), 2);
    assert_eq!(summaries[0].steps, 3);
    let mut csv = Vec::new();
    write_csv(&mut csv, &summaries).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.lines().next().unwrap().contains("pass@1,pass@4"));
    assert_eq!(text.lines().count(), 3);

    assert!(matches!(compare_runs(&[a, c]), Err(Error::Mismatch(_))));
}
