//! Run summaries built from the training logs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::train::{StepKind, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub g_steps: usize,
    pub d_steps: usize,
    pub l_g: Option<f64>,
    pub l_adv: Option<f64>,
    pub l_d: Option<f64>,
    pub d_real: Option<f64>,
    pub d_fake: Option<f64>,
    pub val_pck: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub total_steps: usize,
    /// Step kinds of the first 16 steps, e.g. `GGGDGGGD…`.
    pub step_pattern: String,
    pub all_finite: bool,
    pub best_val_pck: Option<(usize, f64)>,
    pub final_val_pck: Option<f64>,
    pub epochs: Vec<EpochSummary>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn summarize(log: &TrainLog) -> RunSummary {
    let epochs: Vec<EpochSummary> = log
        .epochs
        .iter()
        .map(|e| {
            let steps: Vec<_> = log.steps.iter().filter(|r| r.epoch == e.epoch).collect();
            let avg = |f: fn(&crate::train::StepRecord) -> Option<f64>| mean(steps.iter().filter_map(|r| f(r)));
            EpochSummary {
                epoch: e.epoch,
                lr: e.lr,
                g_steps: steps.iter().filter(|r| r.kind == StepKind::Generator).count(),
                d_steps: steps.iter().filter(|r| r.kind == StepKind::Discriminator).count(),
                l_g: avg(|r| r.l_g),
                l_adv: avg(|r| r.l_adv),
                l_d: avg(|r| r.l_d),
                d_real: avg(|r| r.d_real),
                d_fake: avg(|r| r.d_fake),
                val_pck: e.val_pck,
            }
        })
        .collect();
    let all_finite = log.steps.iter().all(|r| {
        [r.l_g, r.l_adv, r.l_d, r.d_real, r.d_fake]
            .iter()
            .flatten()
            .all(|v| v.is_finite())
    });
    let best_val_pck = log
        .epochs
        .iter()
        .filter_map(|e| e.val_pck.map(|v| (e.epoch, v)))
        .fold(None, |best: Option<(usize, f64)>, (e, v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((e, v)),
        });
    RunSummary {
        total_steps: log.steps.len(),
        step_pattern: log.steps.iter().take(16).map(|r| r.kind.letter()).collect(),
        all_finite,
        best_val_pck,
        final_val_pck: log.epochs.last().and_then(|e| e.val_pck),
        epochs,
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

/// Markdown report: configuration, per-epoch table and any evaluation
/// tables (`*.csv` other than the logs) found in `dir`.
pub fn render(dir: &Path, s: &RunSummary) -> Result<String> {
    let mut out = format!("# Run {}\n\n", dir.display());
    if let Ok(cfg) = fs::read_to_string(dir.join("config.txt")) {
        let _ = writeln!(out, "## Configuration\n\n```text\n{}```\n", cfg);
    }
    let _ = writeln!(out, "## Training\n");
    let _ = writeln!(out, "- steps: {}", s.total_steps);
    let _ = writeln!(out, "- step pattern: `{}`", s.step_pattern);
    let _ = writeln!(out, "- all logged values finite: {}", s.all_finite);
    if let Some((e, v)) = s.best_val_pck {
        let _ = writeln!(out, "- best validation PCK: {v:.4} (epoch {})", e + 1);
    }
    let _ = writeln!(out, "- final validation PCK: {}\n", cell(s.final_val_pck));
    let _ = writeln!(out, "| epoch | lr | G steps | D steps | L_G | L_adv | L_D | D(real) | D(fake) | val PCK |");
    let _ = writeln!(out, "|---|---|---|---|---|---|---|---|---|---|");
    for e in &s.epochs {
        let _ = writeln!(
            out,
            "| {} | {:.1e} | {} | {} | {} | {} | {} | {} | {} | {} |",
            e.epoch + 1,
            e.lr,
            e.g_steps,
            e.d_steps,
            cell(e.l_g),
            cell(e.l_adv),
            cell(e.l_d),
            cell(e.d_real),
            cell(e.d_fake),
            cell(e.val_pck)
        );
    }
    let mut tables: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .filter(|p| !matches!(p.file_name().and_then(|n| n.to_str()), Some("train_log.csv" | "val_log.csv")))
        .collect();
    tables.sort();
    for p in tables {
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let _ = writeln!(out, "\n## {name}\n\n```text\n{text}```");
    }
    Ok(out)
}
