//! Per-sample analyses over alignment rows.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use gwa_core::trace::AlignmentRow;
use serde::{Deserialize, Serialize};

use crate::error::HarnessError;

/// Threshold above which gamma and grad_norm would be considered redundant.
pub const REDUNDANT_CORRELATION: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedSample {
    pub sample_id: u64,
    pub gamma: f32,
    pub grad_norm: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub epoch: u32,
    /// Ascending gamma; undefined scores are left out.
    pub samples: Vec<RankedSample>,
    pub undefined: usize,
    /// Number of truly flipped samples, when the flip mask is known.
    pub flipped: Option<usize>,
    /// Share of flipped samples among the `flipped` lowest-gamma ones.
    /// `None` (N/A) without a mask, without flips, or when all scores tie.
    pub precision_at_k: Option<f64>,
    pub chance_rate: Option<f64>,
}

impl Ranking {
    pub fn mean_gamma(&self) -> Option<f64> {
        mean(self.samples.iter().map(|s| s.gamma as f64))
    }

    pub fn bottom_mean_gamma(&self, k: usize) -> Option<f64> {
        mean(self.samples.iter().take(k).map(|s| s.gamma as f64))
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn rows_for_epoch(rows: &[AlignmentRow], epoch: u32) -> impl Iterator<Item = &AlignmentRow> {
    rows.iter().filter(move |r| r.epoch == epoch)
}

/// Ranks the samples of `epoch` by ascending gamma (ties by sample id).
pub fn rank_samples(rows: &[AlignmentRow], epoch: u32, flipped: Option<&[bool]>) -> Result<Ranking, HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::TraceMissing("no per-sample rows".into()));
    }
    let mut samples = Vec::new();
    let mut undefined = 0;
    let mut seen = false;
    for r in rows_for_epoch(rows, epoch) {
        seen = true;
        match r.gamma() {
            Some(gamma) => samples.push(RankedSample {
                sample_id: r.sample_id,
                gamma,
                grad_norm: r.grad_norm,
            }),
            None => undefined += 1,
        }
    }
    if !seen {
        return Err(HarnessError::EpochMissing(epoch));
    }
    samples.sort_by(|a, b| a.gamma.total_cmp(&b.gamma).then(a.sample_id.cmp(&b.sample_id)));

    let is_flipped = |id: u64| flipped.and_then(|m| m.get(id as usize)).copied().unwrap_or(false);
    let n_flipped = flipped.map(|_| samples.iter().filter(|s| is_flipped(s.sample_id)).count());
    let all_tied = samples.windows(2).all(|w| w[0].gamma == w[1].gamma);
    let precision_at_k = match n_flipped {
        Some(k) if k > 0 && !all_tied => {
            let hits = samples[..k].iter().filter(|s| is_flipped(s.sample_id)).count();
            Some(hits as f64 / k as f64)
        }
        _ => None,
    };
    let chance_rate = n_flipped
        .filter(|_| !samples.is_empty())
        .map(|k| k as f64 / samples.len() as f64);
    Ok(Ranking {
        epoch,
        samples,
        undefined,
        flipped: n_flipped,
        precision_at_k,
        chance_rate,
    })
}

/// Average ranks, 1-based, ties sharing their mean rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap_or(Ordering::Equal));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation; `None` when either side is constant or too short.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks(x), &ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochCorrelation {
    pub epoch: u32,
    /// Samples with a defined gamma (zero-gradient samples are dropped
    /// from both series).
    pub samples: usize,
    pub spearman: Option<f64>,
    pub mean_gamma: Option<f64>,
    pub mean_grad_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormComparison {
    pub epochs: Vec<EpochCorrelation>,
    /// Share of epochs with a defined ρ whose |ρ| stays below
    /// [`REDUNDANT_CORRELATION`].
    pub weak_fraction: Option<f64>,
    /// Observed, not asserted: grad_norm fell and mean gamma rose between
    /// the first and the last epoch.
    pub norm_down_alignment_up: Option<bool>,
}

/// Per-epoch Spearman correlation between gamma and grad_norm.
pub fn compare_gradient_norm(rows: &[AlignmentRow]) -> Result<NormComparison, HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::TraceMissing("no per-sample rows".into()));
    }
    let mut by_epoch: BTreeMap<u32, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let entry = by_epoch.entry(r.epoch).or_default();
        if let Some(g) = r.gamma() {
            entry.0.push(g as f64);
            entry.1.push(r.grad_norm as f64);
        }
    }
    let epochs: Vec<EpochCorrelation> = by_epoch
        .into_iter()
        .map(|(epoch, (g, n))| EpochCorrelation {
            epoch,
            samples: g.len(),
            spearman: spearman(&g, &n),
            mean_gamma: mean(g.iter().copied()),
            mean_grad_norm: mean(n.iter().copied()),
        })
        .collect();
    let defined: Vec<f64> = epochs.iter().filter_map(|e| e.spearman).collect();
    let weak_fraction = (!defined.is_empty()).then(|| {
        defined.iter().filter(|r| r.abs() < REDUNDANT_CORRELATION).count() as f64 / defined.len() as f64
    });
    let norm_down_alignment_up = match (epochs.first(), epochs.last()) {
        (Some(a), Some(b)) if epochs.len() > 1 => match (a.mean_grad_norm, b.mean_grad_norm, a.mean_gamma, b.mean_gamma) {
            (Some(n0), Some(n1), Some(g0), Some(g1)) => Some(n1 < n0 && g1 > g0),
            _ => None,
        },
        _ => None,
    };
    Ok(NormComparison {
        epochs,
        weak_fraction,
        norm_down_alignment_up,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: u64, epoch: u32, gamma: f32, norm: f32) -> AlignmentRow {
        AlignmentRow {
            sample_id: id,
            epoch,
            step: 0,
            gamma,
            grad_norm: norm,
        }
    }

    #[test]
    fn identical_clean_samples_have_no_precision() {
        let rows: Vec<_> = (0..5).map(|i| row(i, 0, 0.3, 1.0)).collect();
        let r = rank_samples(&rows, 0, Some(&[false; 5])).unwrap();
        assert_eq!(r.precision_at_k, None);
        assert_eq!(r.samples.len(), 5);
        let cmp = compare_gradient_norm(&rows).unwrap();
        assert_eq!(cmp.epochs[0].spearman, None);
        assert_eq!(cmp.weak_fraction, None);
    }

    #[test]
    fn ranks_ascending_and_scores_precision() {
        let rows = vec![
            row(0, 1, 0.5, 1.0),
            row(1, 1, -0.4, 2.0),
            row(2, 1, f32::NAN, 0.0),
            row(3, 1, 0.1, 3.0),
            row(4, 1, -0.2, 1.5),
            row(0, 2, 0.0, 1.0),
        ];
        let mask = [false, true, false, false, false];
        let r = rank_samples(&rows, 1, Some(&mask)).unwrap();
        let ids: Vec<u64> = r.samples.iter().map(|s| s.sample_id).collect();
        assert_eq!(ids, vec![1, 4, 3, 0]);
        assert_eq!(r.undefined, 1);
        assert_eq!(r.precision_at_k, Some(1.0));
        assert_eq!(r.chance_rate, Some(0.25));
        assert!(r.bottom_mean_gamma(1).unwrap() < r.mean_gamma().unwrap());
        assert!(matches!(rank_samples(&rows, 9, None), Err(HarnessError::EpochMissing(9))));
        assert!(matches!(rank_samples(&[], 0, None), Err(HarnessError::TraceMissing(_))));
    }

    #[test]
    fn undefined_gammas_drop_from_both_series() {
        let rows = vec![row(0, 0, 0.1, 1.0), row(1, 0, f32::NAN, 0.0), row(2, 0, 0.3, 2.0), row(3, 0, 0.2, 5.0)];
        let cmp = compare_gradient_norm(&rows).unwrap();
        assert_eq!(cmp.epochs[0].samples, 3);
        assert!((cmp.epochs[0].spearman.unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn spearman_handles_ties() {
        let x = [1.0, 2.0, 2.0, 3.0];
        assert_eq!(ranks(&x), vec![1.0, 2.5, 2.5, 4.0]);
        assert!((spearman(&x, &[10.0, 20.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(spearman(&x, &[1.0; 4]), None);
    }
}
