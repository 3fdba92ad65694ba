//! Checkpoint selection from a completed [`GwaSeries`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::moments::GwaSeries;

pub const DEFAULT_WARMUP_FRACTION: f64 = 0.10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("series is empty")]
    EmptySeries,
    #[error("warmup fraction {0} outside [0, 1)")]
    InvalidWarmup(f64),
    #[error("no eligible epoch after warmup of {warmup_epochs} epochs")]
    AllEpochsExcluded { warmup_epochs: u32 },
    #[error("prediction vector of epoch {epoch} has length {found}, expected {expected}")]
    LengthMismatch {
        epoch: usize,
        expected: usize,
        found: usize,
    },
    #[error("need at least two epochs of predictions, got {0}")]
    TooFewEpochs(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    GwaScratch,
    GwaFinetune,
    LabelWave,
    ValAccuracy,
}

/// Intermediate quantities of a stopping rule.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Rationale {
    /// Value of the tracked signal at the selected epoch.
    pub selected_value: Option<f64>,
    /// Number of epochs the rule could choose from.
    pub eligible_epochs: usize,
    /// Fine-tune mode: epoch of the detected initial minimum.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub minimum_epoch: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopDecision {
    pub selected_epoch: u32,
    pub criterion: Criterion,
    pub warmup_epochs: u32,
    pub rationale: Rationale,
}

/// Whole epochs masked by a warmup expressed as a fraction of training.
pub fn warmup_epochs(warmup_fraction: f64, planned_epochs: usize) -> u32 {
    // Guard against 0.1 * 30 = 3.0000000000000004 rounding up to 4.
    let raw = warmup_fraction * planned_epochs as f64;
    (raw - 1e-9).ceil().max(0.0) as u32
}

fn check_warmup(f: f64) -> Result<(), ControllerError> {
    if (0.0..1.0).contains(&f) {
        Ok(())
    } else {
        Err(ControllerError::InvalidWarmup(f))
    }
}

/// Earliest position of the maximum among `(position, value)` pairs.
fn argmax_earliest(values: impl Iterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
    values.fold(None, |best, (i, v)| match best {
        Some((_, bv)) if v <= bv => best,
        _ => Some((i, v)),
    })
}

/// Retrospective scratch-training rule: the epoch with maximal gwa after
/// warmup. Unstable, degenerate and under-sampled epochs are skipped.
pub fn select_scratch(
    series: &GwaSeries,
    warmup_fraction: f64,
) -> Result<StopDecision, ControllerError> {
    check_warmup(warmup_fraction)?;
    if series.is_empty() {
        return Err(ControllerError::EmptySeries);
    }
    let warmup = warmup_epochs(warmup_fraction, series.planned_epochs());
    let eligible: Vec<(usize, f64)> = series
        .epochs
        .iter()
        .enumerate()
        .filter(|(_, e)| e.epoch >= warmup)
        .filter_map(|(i, e)| e.eligible_gwa().map(|g| (i, g)))
        .collect();
    let (pos, value) = argmax_earliest(eligible.iter().copied()).ok_or(
        ControllerError::AllEpochsExcluded {
            warmup_epochs: warmup,
        },
    )?;
    Ok(StopDecision {
        selected_epoch: series.epochs[pos].epoch,
        criterion: Criterion::GwaScratch,
        warmup_epochs: warmup,
        rationale: Rationale {
            selected_value: Some(value),
            eligible_epochs: eligible.len(),
            ..Rationale::default()
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub min_window: usize,
    pub min_rise: f64,
    /// Used only when falling back to the scratch rule.
    pub fallback_warmup_fraction: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            min_window: 3,
            min_rise: 0.0,
            fallback_warmup_fraction: DEFAULT_WARMUP_FRACTION,
        }
    }
}

/// Fine-tuning rule: locate the first local minimum of gwa, then take the
/// gwa maximum strictly after it. Falls back to [`select_scratch`] when the
/// series has no such dip.
pub fn select_finetune(
    series: &GwaSeries,
    cfg: FinetuneConfig,
) -> Result<StopDecision, ControllerError> {
    if series.is_empty() {
        return Err(ControllerError::EmptySeries);
    }
    let gwa: Vec<Option<f64>> = series.epochs.iter().map(|e| e.eligible_gwa()).collect();
    let n = gwa.len();
    let w = cfg.min_window.max(1);

    let fallback = |reason: String| -> Result<StopDecision, ControllerError> {
        let mut d = select_scratch(series, cfg.fallback_warmup_fraction)?;
        d.criterion = Criterion::GwaFinetune;
        d.rationale.fallback = Some(reason);
        Ok(d)
    };

    if n < 2 * w + 1 {
        return fallback(format!("series of {n} epochs too short for window {w}"));
    }

    let minimum = (w..n - w).find(|&i| {
        let Some(center) = gwa[i] else { return false };
        let window_ok = (i - w..=i + w).all(|j| gwa[j].is_some_and(|g| center <= g));
        let rises = gwa[i + 1].is_some_and(|next| next - center > cfg.min_rise);
        window_ok && rises
    });
    let Some(min_pos) = minimum else {
        return fallback("no initial minimum".to_string());
    };

    let after = gwa
        .iter()
        .enumerate()
        .skip(min_pos + 1)
        .filter_map(|(i, g)| g.map(|g| (i, g)));
    let eligible = n - min_pos - 1;
    match argmax_earliest(after) {
        Some((pos, value)) => Ok(StopDecision {
            selected_epoch: series.epochs[pos].epoch,
            criterion: Criterion::GwaFinetune,
            warmup_epochs: 0,
            rationale: Rationale {
                selected_value: Some(value),
                eligible_epochs: eligible,
                minimum_epoch: Some(series.epochs[min_pos].epoch),
                ..Rationale::default()
            },
        }),
        None => fallback("no eligible epoch after the minimum".to_string()),
    }
}

/// Per-epoch fraction of samples whose argmax prediction changed since the
/// previous epoch. The first entry is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionChangeSeries {
    pub change_fraction: Vec<Option<f64>>,
}

pub fn prediction_changes(
    predictions_by_epoch: &[Vec<u32>],
) -> Result<PredictionChangeSeries, ControllerError> {
    let Some(first) = predictions_by_epoch.first() else {
        return Ok(PredictionChangeSeries {
            change_fraction: vec![],
        });
    };
    let len = first.len();
    for (epoch, p) in predictions_by_epoch.iter().enumerate() {
        if p.len() != len {
            return Err(ControllerError::LengthMismatch {
                epoch,
                expected: len,
                found: p.len(),
            });
        }
    }
    let mut change_fraction = vec![None];
    for pair in predictions_by_epoch.windows(2) {
        let changed = pair[0].iter().zip(&pair[1]).filter(|(a, b)| a != b).count();
        change_fraction.push(Some(if len == 0 {
            0.0
        } else {
            changed as f64 / len as f64
        }));
    }
    Ok(PredictionChangeSeries { change_fraction })
}

/// Prediction-change baseline: the post-warmup epoch whose argmax
/// predictions changed least, earliest on ties.
///
/// This is an approximation of LabelWave built only from the prediction
/// change signal; its own stopping rule is not reproduced.
pub fn labelwave(
    predictions_by_epoch: &[Vec<u32>],
    warmup_fraction: f64,
) -> Result<(PredictionChangeSeries, StopDecision), ControllerError> {
    check_warmup(warmup_fraction)?;
    if predictions_by_epoch.len() < 2 {
        return Err(ControllerError::TooFewEpochs(predictions_by_epoch.len()));
    }
    let changes = prediction_changes(predictions_by_epoch)?;
    let warmup = warmup_epochs(warmup_fraction, predictions_by_epoch.len());
    let start = (warmup as usize).max(1);
    let eligible: Vec<(usize, f64)> = changes
        .change_fraction
        .iter()
        .enumerate()
        .skip(start)
        .filter_map(|(i, c)| c.map(|c| (i, -c)))
        .collect();
    let (pos, neg) = argmax_earliest(eligible.iter().copied()).ok_or(
        ControllerError::AllEpochsExcluded {
            warmup_epochs: warmup,
        },
    )?;
    let decision = StopDecision {
        selected_epoch: pos as u32,
        criterion: Criterion::LabelWave,
        warmup_epochs: warmup,
        rationale: Rationale {
            selected_value: Some(-neg),
            eligible_epochs: eligible.len(),
            note: Some("approximation: minimal prediction-change epoch".to_string()),
            ..Rationale::default()
        },
    };
    Ok((changes, decision))
}

/// Oracle rule used only to grade the validation-free criteria.
pub fn select_val_accuracy(val_accuracy: &[f64]) -> Result<StopDecision, ControllerError> {
    let (pos, value) = argmax_earliest(val_accuracy.iter().copied().enumerate())
        .ok_or(ControllerError::EmptySeries)?;
    Ok(StopDecision {
        selected_epoch: pos as u32,
        criterion: Criterion::ValAccuracy,
        warmup_epochs: 0,
        rationale: Rationale {
            selected_value: Some(value),
            eligible_epochs: val_accuracy.len(),
            ..Rationale::default()
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LiveSignal {
    Continue,
    Stop { best_epoch: u32 },
}

/// Live early stopping: stop once gwa has not improved for `patience`
/// epochs after warmup. Retrospective selection remains the reference.
#[derive(Debug, Clone)]
pub struct LiveStopper {
    patience: u32,
    warmup_epochs: u32,
    best: Option<(u32, f64)>,
    since_best: u32,
}

impl LiveStopper {
    pub fn new(patience: u32, warmup_epochs: u32) -> Self {
        Self {
            patience,
            warmup_epochs,
            best: None,
            since_best: 0,
        }
    }

    pub fn best(&self) -> Option<(u32, f64)> {
        self.best
    }

    pub fn observe(&mut self, epoch: u32, gwa: Option<f64>) -> LiveSignal {
        if epoch < self.warmup_epochs {
            return LiveSignal::Continue;
        }
        match (gwa, self.best) {
            (Some(g), None) => self.best = Some((epoch, g)),
            (Some(g), Some((_, b))) if g > b => {
                self.best = Some((epoch, g));
                self.since_best = 0;
            }
            _ => self.since_best += 1,
        }
        match self.best {
            Some((best_epoch, _)) if self.since_best >= self.patience => {
                LiveSignal::Stop { best_epoch }
            }
            _ => LiveSignal::Continue,
        }
    }
}
