//! Run reports and the decisions derived from a finished run.

use std::path::PathBuf;

use gwa_core::controller::{
    labelwave, select_finetune, select_scratch, select_val_accuracy, FinetuneConfig, StopDecision,
};
use gwa_core::moments::{EpochFlag, EpochSummary, GwaSeries};
use gwa_core::trace::AlignmentRow;
use serde::{Deserialize, Serialize};

use crate::analysis::{rank_samples, rows_for_epoch};
use crate::config::TrainerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u32,
    pub train_loss: f64,
    /// Accuracy against the (possibly corrupted) training labels.
    pub train_accuracy: f64,
    pub clean_train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub gwa: Option<f64>,
    pub m1: f64,
    pub excess_kurtosis: Option<f64>,
    pub labelwave_change: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<EpochFlag>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Decisions {
    pub gwa_scratch: Option<StopDecision>,
    pub gwa_finetune: Option<StopDecision>,
    pub labelwave: Option<StopDecision>,
    /// Oracle, for grading only.
    pub val_accuracy: Option<StopDecision>,
    /// Oracle, for grading only: earliest epoch with the best test accuracy.
    pub best_test_epoch: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MislabelReport {
    pub epoch: u32,
    pub flipped: usize,
    pub precision_at_k: Option<f64>,
    pub chance_rate: Option<f64>,
    pub mean_gamma_flipped: Option<f64>,
    pub mean_gamma_clean: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArtifactPaths {
    pub trace: Option<PathBuf>,
    pub epochs: Option<PathBuf>,
    pub alignment: Option<PathBuf>,
    pub decision: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub flipped: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub plots: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainerConfig>,
    pub epochs: Vec<EpochReport>,
    pub decisions: Decisions,
    pub mislabel: Option<MislabelReport>,
    #[serde(default)]
    pub artifacts: ArtifactPaths,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl RunReport {
    pub fn epoch(&self, e: u32) -> Option<&EpochReport> {
        self.epochs.iter().find(|r| r.epoch == e)
    }

    pub fn test_accuracy_at(&self, e: u32) -> Option<f64> {
        self.epoch(e).and_then(|r| r.test_accuracy)
    }

    pub fn gwa(&self) -> Vec<Option<f64>> {
        self.epochs.iter().map(|e| e.gwa).collect()
    }
}

/// Inputs to [`assemble`], everything a run records per epoch.
pub struct RunRecord<'a> {
    pub config: Option<&'a TrainerConfig>,
    pub series: &'a GwaSeries,
    pub train_loss: &'a [f64],
    pub train_accuracy: &'a [f64],
    pub clean_train_accuracy: &'a [f64],
    pub val_accuracy: &'a [Option<f64>],
    pub test_accuracy: &'a [Option<f64>],
    pub change_fraction: &'a [Option<f64>],
    pub predictions: &'a [Vec<u32>],
    pub rows: &'a [AlignmentRow],
    pub flipped: Option<&'a [bool]>,
    pub warmup_fraction: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn earliest_max(xs: &[Option<f64>]) -> Option<u32> {
    let mut best: Option<(usize, f64)> = None;
    for (i, x) in xs.iter().enumerate() {
        if let Some(v) = *x {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i as u32)
}

fn summary_row(s: &EpochSummary) -> (Option<f64>, f64, Option<f64>, Vec<EpochFlag>) {
    (s.gwa, s.m1, s.excess_kurtosis, s.flags.clone())
}

pub fn assemble(rec: RunRecord<'_>) -> RunReport {
    let mut notes = vec![
        "validation and test accuracies grade the validation-free criteria and never feed gwa".to_string(),
        "correlation thresholds are desk-scale and looser than those observed on large vision models".to_string(),
    ];
    if let Some(p) = rec.config.map(|c| c.projection).filter(|p| p.enabled) {
        notes.push(format!(
            "latents and head weights share one Gaussian projection to {} dimensions (seed {})",
            p.dim, p.seed
        ));
    }
    let epochs: Vec<EpochReport> = rec
        .series
        .epochs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (gwa, m1, excess_kurtosis, flags) = summary_row(s);
            EpochReport {
                epoch: s.epoch,
                train_loss: rec.train_loss.get(i).copied().unwrap_or(f64::NAN),
                train_accuracy: rec.train_accuracy.get(i).copied().unwrap_or(0.0),
                clean_train_accuracy: rec.clean_train_accuracy.get(i).copied().unwrap_or(0.0),
                val_accuracy: rec.val_accuracy.get(i).copied().flatten(),
                test_accuracy: rec.test_accuracy.get(i).copied().flatten(),
                gwa,
                m1,
                excess_kurtosis,
                labelwave_change: rec.change_fraction.get(i).copied().flatten(),
                flags,
            }
        })
        .collect();

    let mut note_err = |what: &str, e: &dyn std::fmt::Display| notes.push(format!("{what}: {e}"));
    let gwa_scratch = select_scratch(rec.series, rec.warmup_fraction)
        .map_err(|e| note_err("gwa_scratch", &e))
        .ok();
    let gwa_finetune = select_finetune(rec.series, FinetuneConfig::default())
        .map_err(|e| note_err("gwa_finetune", &e))
        .ok();
    let labelwave = labelwave(rec.predictions, rec.warmup_fraction)
        .map(|(_, d)| d)
        .map_err(|e| note_err("labelwave", &e))
        .ok();
    let val: Vec<f64> = rec.val_accuracy.iter().map_while(|v| *v).collect();
    let val_accuracy = (val.len() == rec.val_accuracy.len())
        .then(|| select_val_accuracy(&val).ok())
        .flatten();
    let decisions = Decisions {
        best_test_epoch: earliest_max(rec.test_accuracy),
        gwa_scratch,
        gwa_finetune,
        labelwave,
        val_accuracy,
    };

    let mislabel = match (&decisions.gwa_scratch, rec.flipped) {
        (Some(d), Some(mask)) if !rec.rows.is_empty() => {
            let e = d.selected_epoch;
            rank_samples(rec.rows, e, Some(mask)).ok().map(|r| {
                let is_f = |id: u64| mask.get(id as usize).copied().unwrap_or(false);
                let defined = || rows_for_epoch(rec.rows, e).filter_map(|r| r.gamma().map(|g| (r.sample_id, g as f64)));
                MislabelReport {
                    epoch: e,
                    flipped: r.flipped.unwrap_or(0),
                    precision_at_k: r.precision_at_k,
                    chance_rate: r.chance_rate,
                    mean_gamma_flipped: mean(defined().filter(|(id, _)| is_f(*id)).map(|(_, g)| g)),
                    mean_gamma_clean: mean(defined().filter(|(id, _)| !is_f(*id)).map(|(_, g)| g)),
                }
            })
        }
        _ => None,
    };

    RunReport {
        config: rec.config.cloned(),
        epochs,
        decisions,
        mislabel,
        artifacts: ArtifactPaths::default(),
        notes,
    }
}
