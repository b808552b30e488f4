//! Run directories and the phase runner.
//!
//! Every phase reads its inputs from the artifacts earlier phases wrote, so a
//! run resumed at a phase boundary sees exactly the bytes a straight-through
//! run would have.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::a2d::{annotate_dataset, join_annotations, train_reasoner, AnnotatedInstance, AnnotationRecord, AnnotationReport};
use crate::backbone::warmup;
use crate::config::{Mode, RunConfig};
use crate::decomposer::{train_decomposer, PolicyProxy};
use crate::env::{generate_task, oracle_decompose, write_tasks, read_tasks, PromptStyle, SubQuestionList, TaskInstance};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, EvalSpec};
use crate::io::{read_json, read_provenance, write_json, write_provenance, JsonlWriter, Provenance};
use crate::par::{init_workers, Exec};
use crate::policy::{init_params, PolicyParams, Sampling};
use crate::rng::Streams;
use crate::vocab::Op;

/// Held-out task ids start here so they never collide with training ids.
pub const EVAL_ID_BASE: u64 = 1 << 32;

/// Draws tried per held-out task before accepting one that overlaps training.
const HELD_OUT_REDRAWS: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Data,
    Backbone,
    Decomposer,
    Annotate,
    Reasoner,
    Eval,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Data => "data",
            Phase::Backbone => "backbone",
            Phase::Decomposer => "decomposer",
            Phase::Annotate => "annotate",
            Phase::Reasoner => "reasoner",
            Phase::Eval => "eval",
        }
    }
}

/// File names inside a run directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn config(&self) -> PathBuf {
        self.file("config.toml")
    }
    pub fn train_tasks(&self) -> PathBuf {
        self.file("train_tasks.jsonl")
    }
    pub fn eval_tasks(&self) -> PathBuf {
        self.file("eval_tasks.jsonl")
    }
    pub fn backbone(&self) -> PathBuf {
        self.file("backbone.ckpt")
    }
    pub fn backbone_metrics(&self) -> PathBuf {
        self.file("backbone_metrics.jsonl")
    }
    pub fn decomposer(&self) -> PathBuf {
        self.file("decomposer.ckpt")
    }
    pub fn decomposer_metrics(&self) -> PathBuf {
        self.file("decomposer_metrics.jsonl")
    }
    pub fn annotations(&self) -> PathBuf {
        self.file("annotations.jsonl")
    }
    pub fn annotation_report(&self) -> PathBuf {
        self.file("annotation_report.json")
    }
    pub fn reasoner(&self) -> PathBuf {
        self.file("reasoner.ckpt")
    }
    pub fn reasoner_metrics(&self) -> PathBuf {
        self.file("reasoner_metrics.jsonl")
    }
    pub fn eval_report(&self) -> PathBuf {
        self.file("eval.json")
    }

    /// The artifact whose presence marks `phase` as complete.
    pub fn output_of(&self, phase: Phase) -> PathBuf {
        match phase {
            Phase::Data => self.eval_tasks(),
            Phase::Backbone => self.backbone(),
            Phase::Decomposer => self.decomposer(),
            Phase::Annotate => self.annotations(),
            Phase::Reasoner => self.reasoner(),
            Phase::Eval => self.eval_report(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnnotationArtifact {
    pub provenance: Provenance,
    pub report: AnnotationReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub provenance: Provenance,
    pub mode: Mode,
    pub checkpoint: String,
    pub reports: Vec<EvalReport>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Wipe an existing run directory first.
    pub force: bool,
    /// Keep completed phases of an existing run with the same config.
    pub resume: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

#[derive(Clone, Debug)]
pub struct PhaseLog {
    pub phase: Phase,
    pub outcome: Outcome,
    pub elapsed: Duration,
}

/// A validated config bound to a run directory.
#[derive(Clone, Debug)]
pub struct Run {
    pub config: RunConfig,
    pub layout: Layout,
    hash: String,
}

impl Run {
    /// Prepares `dir` for `config`. An existing directory is wiped with
    /// `force`, reused with `resume` when its recorded config matches, and
    /// refused otherwise.
    pub fn create(config: RunConfig, dir: &Path, opts: RunOptions) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(dir);
        let occupied = dir.exists() && fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if occupied {
            if opts.force {
                fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            } else if opts.resume {
                let recorded = RunConfig::load(&layout.config())?;
                if recorded.config_hash() != config.config_hash() {
                    return Err(Error::Config(format!(
                        "config differs from the one recorded in {}",
                        dir.display()
                    )));
                }
            } else {
                return Err(Error::RunDirExists(dir.to_path_buf()));
            }
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let run = Self {
            hash: config.config_hash(),
            config,
            layout,
        };
        run.write_config()?;
        init_workers(run.config.run.workers);
        Ok(run)
    }

    /// Opens an existing run directory with its recorded config.
    pub fn open(dir: &Path) -> Result<Self> {
        let layout = Layout::new(dir);
        let config = RunConfig::load(&layout.config())?;
        config.validate()?;
        init_workers(config.run.workers);
        Ok(Self {
            hash: config.config_hash(),
            config,
            layout,
        })
    }

    fn write_config(&self) -> Result<()> {
        let p = self.provenance();
        let path = self.layout.config();
        let text = format!(
            "# config_hash = \"{}\"\n# master_seed = {}\n# code_version = \"{}\"\n{}",
            p.config_hash,
            p.master_seed,
            p.code_version,
            self.config.to_toml()
        );
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::new(self.hash.clone(), self.config.run.seed)
    }

    pub fn streams(&self, phase: Phase) -> Streams {
        Streams::new(self.config.run.seed).child(phase.name())
    }

    fn exec(&self) -> Exec {
        self.config.run.exec
    }

    /// Phases this run's mode executes, in order.
    pub fn phases(&self) -> Vec<Phase> {
        let mut v = vec![Phase::Data, Phase::Backbone];
        if self.config.run.mode.uses_subquestions() {
            v.extend([Phase::Decomposer, Phase::Annotate]);
        }
        v.extend([Phase::Reasoner, Phase::Eval]);
        v
    }

    /// True when the phase's output exists and was produced under this config.
    pub fn is_done(&self, phase: Phase) -> Result<bool> {
        let path = self.layout.output_of(phase);
        if !path.exists() {
            return Ok(false);
        }
        let prov = match phase {
            Phase::Data | Phase::Annotate => read_provenance(&path)?,
            Phase::Backbone | Phase::Decomposer | Phase::Reasoner => PolicyParams::load(&path)?.1,
            Phase::Eval => Some(read_json::<EvalArtifact>(&path)?.provenance),
        };
        Ok(prov.is_some_and(|p| p.config_hash == self.hash))
    }

    /// Runs every phase of the mode. With `resume`, completed phases are skipped.
    pub fn pipeline(&self, resume: bool, mut on_phase: impl FnMut(&PhaseLog)) -> Result<EvalArtifact> {
        for phase in self.phases() {
            let t = Instant::now();
            let outcome = if resume && self.is_done(phase).map_err(|e| e.in_phase(phase.name()))? {
                Outcome::Skipped
            } else {
                self.run_phase(phase)?;
                Outcome::Ran
            };
            on_phase(&PhaseLog {
                phase,
                outcome,
                elapsed: t.elapsed(),
            });
        }
        read_json(&self.layout.eval_report())
    }

    /// Runs one phase, reading its inputs from the run directory.
    pub fn run_phase(&self, phase: Phase) -> Result<()> {
        let res = match phase {
            Phase::Data => self.gen_data(),
            Phase::Backbone => self.backbone(),
            Phase::Decomposer => self.train_decomposer(),
            Phase::Annotate => self.annotate(),
            Phase::Reasoner => self.train_reasoner(),
            Phase::Eval => self
                .evaluate_checkpoint(&self.layout.reasoner())
                .and_then(|a| write_json(&self.layout.eval_report(), &a)),
        };
        res.map_err(|e| e.in_phase(phase.name()))
    }

    pub fn gen_data(&self) -> Result<()> {
        let (train, held) = make_suites(&self.config, &self.streams(Phase::Data));
        self.write_task_file(&self.layout.train_tasks(), &train)?;
        self.write_task_file(&self.layout.eval_tasks(), &held)
    }

    fn write_task_file(&self, path: &Path, tasks: &[TaskInstance]) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
        write_provenance(&mut f, &self.provenance()).map_err(|e| Error::io(path, e))?;
        write_tasks(&mut f, tasks).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn train_tasks(&self) -> Result<Vec<TaskInstance>> {
        read_tasks(&self.layout.train_tasks())
    }

    pub fn eval_tasks(&self) -> Result<Vec<TaskInstance>> {
        read_tasks(&self.layout.eval_tasks())
    }

    fn load_policy(&self, path: &Path) -> Result<PolicyParams> {
        let (p, _) = PolicyParams::load(path)?;
        if p.shape != self.config.policy {
            return Err(Error::Mismatch(format!(
                "{} has shape {:?}, config wants {:?}",
                path.display(),
                p.shape,
                self.config.policy
            )));
        }
        Ok(p)
    }

    pub fn backbone(&self) -> Result<()> {
        let params = match &self.config.run.backbone {
            Some(src) => self.load_policy(src)?,
            None => {
                let init = init_params(self.config.run.seed, self.config.policy)?;
                let mut metrics = JsonlWriter::create(&self.layout.backbone_metrics(), &self.provenance())?;
                warmup(
                    init,
                    &self.config.env,
                    &self.config.backbone,
                    &self.streams(Phase::Backbone),
                    self.exec(),
                    |r| metrics.append(r),
                )?
            }
        };
        params.save(&self.layout.backbone(), Some(&self.provenance()))
    }

    pub fn train_decomposer(&self) -> Result<()> {
        let backbone = self.load_policy(&self.layout.backbone())?;
        let train = self.train_tasks()?;
        let dcfg = self.config.effective_decomposer();
        let rlvr = self.config.effective_rlvr();
        let proxy = PolicyProxy {
            params: &backbone,
            env: self.config.env.clone(),
            sampling: Sampling {
                temperature: dcfg.proxy_temperature,
                top_p: 1.0,
                greedy: false,
            },
            max_len: rlvr.max_len,
        };
        let mut metrics = JsonlWriter::create(&self.layout.decomposer_metrics(), &self.provenance())?;
        let params = train_decomposer(
            backbone.clone(),
            &proxy,
            &train,
            &rlvr,
            &dcfg,
            &self.streams(Phase::Decomposer),
            self.exec(),
            |r| metrics.append(r),
        )?;
        params
            .with_lineage(format!("decomposer:{}", dcfg.steps))
            .save(&self.layout.decomposer(), Some(&self.provenance()))
    }

    pub fn annotate(&self) -> Result<()> {
        let decomposer = self.load_policy(&self.layout.decomposer())?;
        let train = self.train_tasks()?;
        let rlvr = self.config.effective_rlvr();
        let dcfg = self.config.effective_decomposer();
        let (_, records, report) = annotate_dataset(
            &decomposer,
            &train,
            &rlvr.sampling(),
            rlvr.max_len,
            dcfg.min_content_chars,
            dcfg.max_retries,
            &self.streams(Phase::Annotate),
            self.exec(),
        )?;
        let mut w = JsonlWriter::create(&self.layout.annotations(), &self.provenance())?;
        for r in &records {
            w.append(r)?;
        }
        write_json(
            &self.layout.annotation_report(),
            &AnnotationArtifact {
                provenance: self.provenance(),
                report,
            },
        )
    }

    /// Training set for the reasoner: annotated for modes that use
    /// sub-questions, bare otherwise.
    pub fn reasoner_data(&self) -> Result<Vec<AnnotatedInstance>> {
        let train = self.train_tasks()?;
        if self.config.run.mode.uses_subquestions() {
            let records: Vec<AnnotationRecord> = crate::io::read_jsonl(&self.layout.annotations())?;
            join_annotations(&train, &records)
        } else {
            Ok(train
                .into_iter()
                .map(|task| AnnotatedInstance {
                    task,
                    subq: SubQuestionList::empty(),
                    response: Vec::new(),
                    flagged: false,
                })
                .collect())
        }
    }

    pub fn train_reasoner(&self) -> Result<()> {
        let backbone = self.load_policy(&self.layout.backbone())?;
        let data = self.reasoner_data()?;
        let a2d = self.config.effective_a2d();
        let mut metrics = JsonlWriter::create(&self.layout.reasoner_metrics(), &self.provenance())?;
        let params = train_reasoner(
            backbone,
            &data,
            &self.config.effective_rlvr(),
            &self.config.env,
            a2d.as_ref(),
            self.config.train_prompt(),
            self.config.reasoner.steps,
            &self.streams(Phase::Reasoner),
            self.exec(),
            |r, _| metrics.append(r),
        )?;
        params
            .with_lineage(format!("reasoner:{}:{}", self.config.run.mode, self.config.reasoner.steps))
            .save(&self.layout.reasoner(), Some(&self.provenance()))
    }

    /// Evaluates `checkpoint` on the held-out suite.
    pub fn evaluate_checkpoint(&self, checkpoint: &Path) -> Result<EvalArtifact> {
        let params = self.load_policy(checkpoint)?;
        let held = self.eval_tasks()?;
        let e = &self.config.eval;
        let streams = self.streams(Phase::Eval);
        let mut styles = vec![(PromptStyle::Vanilla, None)];
        let hints: Vec<SubQuestionList> = held.iter().map(oracle_decompose).collect();
        if e.with_oracle_hints {
            styles.push((PromptStyle::WithSubQuestions, Some(hints.as_slice())));
        }
        let mut reports = Vec::new();
        for (style, subq) in styles {
            let spec = EvalSpec {
                suite: "held_out",
                style,
                subq,
                n_samples: e.n_samples,
                k_list: &e.k_list,
                sampling: e.sampling(),
                max_len: e.max_len,
                config_hash: &self.hash,
            };
            reports.push(evaluate(&params, &held, &self.config.env, &spec, &streams, self.exec())?);
        }
        Ok(EvalArtifact {
            provenance: self.provenance(),
            mode: self.config.run.mode,
            checkpoint: checkpoint.display().to_string(),
            reports,
        })
    }
}

/// The training and held-out suites of a config. Training lengths are drawn
/// uniformly from the env bounds; held-out tasks all have `eval_chain_len`
/// and are redrawn (a bounded number of times) when their chain also occurs
/// in the training suite.
pub fn make_suites(config: &RunConfig, streams: &Streams) -> (Vec<TaskInstance>, Vec<TaskInstance>) {
    let env = &config.env;
    let span = (env.chain_len_max - env.chain_len_min + 1) as u64;
    let train: Vec<TaskInstance> = (0..config.data.n_train as u64)
        .map(|i| {
            let len = env.chain_len_min + (streams.seed("len", &[i]) % span) as usize;
            generate_task(i, streams.seed("task", &[i]), len, env.modulus)
        })
        .collect();
    let seen: HashSet<&[(Op, u32)]> = train.iter().map(|t| t.chain.as_slice()).collect();
    let held = (0..config.data.n_eval as u64)
        .map(|i| {
            let id = EVAL_ID_BASE + i;
            let draw = |attempt: u64| {
                let seed = if attempt == 0 {
                    streams.seed("task", &[id])
                } else {
                    streams.seed("task_redraw", &[id, attempt])
                };
                generate_task(id, seed, config.data.eval_chain_len, env.modulus)
            };
            (0..HELD_OUT_REDRAWS)
                .map(draw)
                .find(|t| !seen.contains(t.chain.as_slice()))
                .unwrap_or_else(|| draw(0))
        })
        .collect();
    (train, held)
}
