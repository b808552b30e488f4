//! Comparison tables and reward curves across run directories.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::a2d::ReasonerRecord;
use crate::error::{Error, Result};
use crate::io::{read_json, read_jsonl};
use crate::run::{EvalArtifact, Run};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub run: String,
    pub mode: String,
    pub seed: u64,
    pub config_hash: String,
    pub env_hash: String,
    /// Vanilla-prompt pass@k on the held-out suite.
    pub pass_at: Vec<(usize, f64)>,
    pub steps: usize,
    /// Mean training reward over the last quarter of steps.
    pub final_reward: Option<f64>,
    pub gate_first_quarter: Option<f64>,
    pub gate_last_quarter: Option<f64>,
    /// `(step, mean_reward)` per reasoner step.
    #[serde(skip)]
    pub curve: Vec<(u64, f64)>,
}

fn quarter_means(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    let q = xs.len() / 4;
    if q == 0 {
        return (None, None);
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (Some(mean(&xs[..q])), Some(mean(&xs[xs.len() - q..])))
}

pub fn summarize_run(dir: &Path) -> Result<RunSummary> {
    let run = Run::open(dir)?;
    let eval: EvalArtifact = read_json(&run.layout.eval_report())?;
    let vanilla = eval
        .reports
        .iter()
        .find(|r| r.style == "vanilla")
        .ok_or_else(|| Error::Mismatch(format!("{} has no vanilla evaluation", dir.display())))?;
    let metrics_path = run.layout.reasoner_metrics();
    let records: Vec<ReasonerRecord> = if metrics_path.exists() {
        read_jsonl(&metrics_path)?
    } else {
        Vec::new()
    };
    let rewards: Vec<f64> = records.iter().map(|r| r.mean_reward).collect();
    let gates: Vec<f64> = records.iter().map(|r| r.gate_rate).collect();
    let (_, final_reward) = quarter_means(&rewards);
    let (gate_first_quarter, gate_last_quarter) = quarter_means(&gates);
    Ok(RunSummary {
        run: dir.display().to_string(),
        mode: run.config.run.mode.to_string(),
        seed: run.config.run.seed,
        config_hash: run.config_hash().to_string(),
        env_hash: run.config.env_hash(),
        pass_at: vanilla.pass_at_k.clone(),
        steps: records.len(),
        final_reward,
        gate_first_quarter,
        gate_last_quarter,
        curve: records.iter().map(|r| (r.step, r.mean_reward)).collect(),
    })
}

/// Summaries of `dirs`, refusing runs whose env configs differ.
pub fn compare_runs(dirs: &[PathBuf]) -> Result<Vec<RunSummary>> {
    if dirs.is_empty() {
        return Err(Error::InvalidArgument("no runs to compare".into()));
    }
    let summaries = dirs.iter().map(|d| summarize_run(d)).collect::<Result<Vec<_>>>()?;
    let first = &summaries[0];
    if let Some(other) = summaries.iter().find(|s| s.env_hash != first.env_hash) {
        return Err(Error::Mismatch(format!(
            "env config of {} differs from {}",
            other.run, first.run
        )));
    }
    Ok(summaries)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// One CSV row per run; pass@k columns for every k any run reports.
pub fn write_csv<W: Write>(w: W, summaries: &[RunSummary]) -> Result<()> {
    let ks: BTreeSet<usize> = summaries.iter().flat_map(|s| s.pass_at.iter().map(|(k, _)| *k)).collect();
    let to_err = |e: csv::Error| Error::Io {
        path: PathBuf::from("<csv>"),
        source: e.into(),
    };
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = ["run", "mode", "seed", "config_hash"].iter().map(|s| s.to_string()).collect();
    header.extend(ks.iter().map(|k| format!("pass@{k}")));
    header.extend(["steps", "final_reward", "gate_first_quarter", "gate_last_quarter"].map(String::from));
    out.write_record(&header).map_err(to_err)?;
    for s in summaries {
        let mut row = vec![s.run.clone(), s.mode.clone(), s.seed.to_string(), s.config_hash.clone()];
        row.extend(ks.iter().map(|k| fmt_opt(s.pass_at.iter().find(|(kk, _)| kk == k).map(|(_, v)| *v))));
        row.push(s.steps.to_string());
        row.extend([s.final_reward, s.gate_first_quarter, s.gate_last_quarter].map(fmt_opt));
        out.write_record(&row).map_err(to_err)?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

/// Training-reward curves of every run as one SVG.
pub fn plot_rewards(path: &Path, summaries: &[RunSummary]) -> Result<()> {
    use plotters::prelude::*;

    let draw_err = |e: &dyn std::fmt::Display| Error::io(path, std::io::Error::other(e.to_string()));
    let max_step = summaries
        .iter()
        .flat_map(|s| s.curve.last().map(|c| c.0))
        .max()
        .unwrap_or(1)
        .max(1);
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(0u64..max_step, 0f64..1f64)
        .map_err(|e| draw_err(&e))?;
    chart.configure_mesh().draw().map_err(|e| draw_err(&e))?;
    for (i, s) in summaries.iter().enumerate() {
        let color = Palette99::pick(i);
        chart
            .draw_series(LineSeries::new(s.curve.iter().cloned(), &color))
            .map_err(|e| draw_err(&e))?;
    }
    root.present().map_err(|e| draw_err(&e))
}
