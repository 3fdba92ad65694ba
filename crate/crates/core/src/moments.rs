//! Epoch-level alignment distribution: streaming central moments up to
//! order four and the kurtosis-corrected GWA value.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::AlignmentScore;
use crate::scalar::Scalar;

pub const DEFAULT_BETA: f64 = 1.2;
pub const DEFAULT_MIN_SAMPLES: u64 = 30;
/// Below this variance the kurtosis is treated as undefined.
pub const VARIANCE_THRESHOLD: f64 = 1e-12;
/// Smallest admissible `excess_kurtosis + beta`.
pub const DENOMINATOR_THRESHOLD: f64 = 1e-6;
/// Bimodality warning: kurtosis this close to the uniform value ...
pub const BIMODAL_KURTOSIS_BAND: f64 = 0.1;
/// ... while the variance is at least this large.
pub const BIMODAL_MIN_VARIANCE: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MomentsError {
    #[error("score for epoch {found} fed to accumulator of epoch {expected}")]
    EpochMismatch { expected: u32, found: u32 },
    #[error("cannot merge distributions with different beta ({0} vs {1})")]
    BetaMismatch(f64, f64),
    #[error("only {count} defined scores, need at least {min}")]
    TooFewSamples { count: u64, min: u64 },
    #[error("kurtosis denominator {denominator:e} is not positive")]
    Unstable { denominator: f64 },
}

/// One-pass, mergeable accumulator of central moments up to order four.
///
/// Stores the count, the mean and the sums of powered deviations
/// `S_k = Σ (x − mean)^k` for k = 2, 3, 4.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentralMoments<T> {
    n: u64,
    mean: T,
    s2: T,
    s3: T,
    s4: T,
}

impl<T: Scalar> Default for CentralMoments<T> {
    fn default() -> Self {
        Self {
            n: 0,
            mean: T::zero(),
            s2: T::zero(),
            s3: T::zero(),
            s4: T::zero(),
        }
    }
}

impl<T: Scalar> CentralMoments<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_slice(xs: &[T]) -> Self {
        let mut m = Self::new();
        for &x in xs {
            m.push(x);
        }
        m
    }

    pub fn push(&mut self, x: T) {
        let n1 = T::of(self.n as f64);
        self.n += 1;
        let n = T::of(self.n as f64);
        let delta = x - self.mean;
        let delta_n = delta / n;
        let delta_n2 = delta_n * delta_n;
        let term1 = delta * delta_n * n1;
        let three = T::of(3.0);
        self.s4 = self.s4 + term1 * delta_n2 * (n * n - three * n + three)
            + T::of(6.0) * delta_n2 * self.s2
            - T::of(4.0) * delta_n * self.s3;
        self.s3 = self.s3 + term1 * delta_n * (n - T::of(2.0)) - three * delta_n * self.s2;
        self.s2 = self.s2 + term1;
        self.mean = self.mean + delta_n;
    }

    /// Combines two accumulators as if all values had been pushed into one.
    pub fn merge(&self, other: &Self) -> Self {
        if other.n == 0 {
            return *self;
        }
        if self.n == 0 {
            return *other;
        }
        let na = T::of(self.n as f64);
        let nb = T::of(other.n as f64);
        let n = na + nb;
        let delta = other.mean - self.mean;
        let d2 = delta * delta;
        let d3 = d2 * delta;
        let d4 = d2 * d2;
        let three = T::of(3.0);

        let mean = self.mean + delta * nb / n;
        let s2 = self.s2 + other.s2 + d2 * na * nb / n;
        let s3 = self.s3
            + other.s3
            + d3 * na * nb * (na - nb) / (n * n)
            + three * delta * (na * other.s2 - nb * self.s2) / n;
        let s4 = self.s4
            + other.s4
            + d4 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + T::of(6.0) * d2 * (na * na * other.s2 + nb * nb * self.s2) / (n * n)
            + T::of(4.0) * delta * (na * other.s3 - nb * self.s3) / n;
        Self {
            n: self.n + other.n,
            mean,
            s2,
            s3,
            s4,
        }
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> T {
        self.mean
    }

    /// Population central moment of order `k` (2, 3 or 4).
    pub fn central(&self, k: u8) -> T {
        if self.n == 0 {
            return T::zero();
        }
        let n = T::of(self.n as f64);
        match k {
            1 => T::zero(),
            2 => self.s2 / n,
            3 => self.s3 / n,
            4 => self.s4 / n,
            _ => panic!("central moment of order {k} is not tracked"),
        }
    }

    /// `m4 / m2² − 3`, or `None` when the variance is below threshold.
    pub fn excess_kurtosis(&self) -> Option<T> {
        let m2 = self.central(2);
        if self.n == 0 || m2.as_f64() < VARIANCE_THRESHOLD {
            return None;
        }
        Some(self.central(4) / (m2 * m2) - T::of(3.0))
    }
}

/// Store-then-compute central moments (mean, m2, m3, m4) of a full list.
pub fn batch_moments<T: Scalar>(xs: &[T]) -> (T, T, T, T) {
    if xs.is_empty() {
        return (T::zero(), T::zero(), T::zero(), T::zero());
    }
    let n = T::of(xs.len() as f64);
    let mean = xs.iter().copied().sum::<T>() / n;
    let (mut s2, mut s3, mut s4) = (T::zero(), T::zero(), T::zero());
    for &x in xs {
        let d = x - mean;
        let d2 = d * d;
        s2 = s2 + d2;
        s3 = s3 + d2 * d;
        s4 = s4 + d2 * d2;
    }
    (mean, s2 / n, s3 / n, s4 / n)
}

/// GWA from a mean and an excess kurtosis.
pub fn gwa_value<T: Scalar>(mean: T, excess_kurtosis: T, beta: T) -> Result<T, MomentsError> {
    let denominator = excess_kurtosis + beta;
    if denominator.as_f64() <= DENOMINATOR_THRESHOLD {
        return Err(MomentsError::Unstable {
            denominator: denominator.as_f64(),
        });
    }
    Ok(mean / denominator)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochFlag {
    /// Variance below threshold; gwa fell back to `m1 / beta`.
    Degenerate,
    /// `excess_kurtosis + beta` not positive; gwa withheld.
    Unstable,
    TooFewSamples,
    /// Kurtosis near the uniform value with a wide spread.
    Bimodal,
}

/// The alignment scores of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochDistribution<T> {
    pub epoch: u32,
    pub beta: T,
    moments: CentralMoments<T>,
    excluded: u64,
    raw_scores: Option<Vec<(u64, T)>>,
}

impl<T: Scalar> EpochDistribution<T> {
    pub fn new(epoch: u32, beta: T) -> Self {
        Self {
            epoch,
            beta,
            moments: CentralMoments::new(),
            excluded: 0,
            raw_scores: None,
        }
    }

    /// Like [`EpochDistribution::new`] but keeping every `(sample_id, gamma)`.
    pub fn retaining(epoch: u32, beta: T) -> Self {
        Self {
            raw_scores: Some(Vec::new()),
            ..Self::new(epoch, beta)
        }
    }

    pub fn accumulate(&mut self, score: &AlignmentScore<T>) -> Result<(), MomentsError> {
        if score.epoch != self.epoch {
            return Err(MomentsError::EpochMismatch {
                expected: self.epoch,
                found: score.epoch,
            });
        }
        match score.gamma {
            Some(g) => self.push_value(score.sample_id, g),
            None => self.excluded += 1,
        }
        Ok(())
    }

    /// Adds one defined score without provenance checks.
    pub fn push_value(&mut self, sample_id: u64, gamma: T) {
        self.moments.push(gamma);
        if let Some(raw) = &mut self.raw_scores {
            raw.push((sample_id, gamma));
        }
    }

    pub fn push_excluded(&mut self) {
        self.excluded += 1;
    }

    pub fn merge(&self, other: &Self) -> Result<Self, MomentsError> {
        if self.epoch != other.epoch {
            return Err(MomentsError::EpochMismatch {
                expected: self.epoch,
                found: other.epoch,
            });
        }
        if self.beta != other.beta {
            return Err(MomentsError::BetaMismatch(
                self.beta.as_f64(),
                other.beta.as_f64(),
            ));
        }
        let raw_scores = match (&self.raw_scores, &other.raw_scores) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        Ok(Self {
            epoch: self.epoch,
            beta: self.beta,
            moments: self.moments.merge(&other.moments),
            excluded: self.excluded + other.excluded,
            raw_scores,
        })
    }

    pub fn moments(&self) -> &CentralMoments<T> {
        &self.moments
    }

    pub fn count(&self) -> u64 {
        self.moments.count()
    }

    pub fn excluded(&self) -> u64 {
        self.excluded
    }

    pub fn observed(&self) -> u64 {
        self.count() + self.excluded
    }

    pub fn raw_scores(&self) -> Option<&[(u64, T)]> {
        self.raw_scores.as_deref()
    }

    pub fn m1(&self) -> T {
        self.moments.mean()
    }

    pub fn m2(&self) -> T {
        self.moments.central(2)
    }

    pub fn m3(&self) -> T {
        self.moments.central(3)
    }

    pub fn m4(&self) -> T {
        self.moments.central(4)
    }

    pub fn excess_kurtosis(&self) -> Option<T> {
        self.moments.excess_kurtosis()
    }

    /// Strict GWA: requires `min_samples` defined scores and a usable
    /// denominator. A zero-variance epoch yields `m1 / beta`.
    pub fn finalize_gwa(&self, min_samples: u64) -> Result<T, MomentsError> {
        if self.count() < min_samples {
            return Err(MomentsError::TooFewSamples {
                count: self.count(),
                min: min_samples,
            });
        }
        match self.excess_kurtosis() {
            Some(k) => gwa_value(self.m1(), k, self.beta),
            None => Ok(self.m1() / self.beta),
        }
    }

    /// Recomputes the moments from the retained raw scores, if any.
    pub fn batch_moments(&self) -> Option<(T, T, T, T)> {
        self.raw_scores.as_ref().map(|raw| {
            let xs: Vec<T> = raw.iter().map(|&(_, g)| g).collect();
            batch_moments(&xs)
        })
    }

    /// Serializable summary with whatever gwa value can be reported.
    pub fn summary(&self, min_samples: u64) -> EpochSummary {
        let mut flags = Vec::new();
        let m1 = self.m1().as_f64();
        let beta = self.beta.as_f64();
        let kurt = self.excess_kurtosis().map(Scalar::as_f64);
        let gwa = if self.count() == 0 {
            None
        } else {
            match kurt {
                None => {
                    flags.push(EpochFlag::Degenerate);
                    Some(m1 / beta)
                }
                Some(k) => match gwa_value(m1, k, beta) {
                    Ok(v) => Some(v),
                    Err(_) => {
                        flags.push(EpochFlag::Unstable);
                        None
                    }
                },
            }
        };
        if self.count() < min_samples {
            flags.push(EpochFlag::TooFewSamples);
        }
        if let Some(k) = kurt {
            if (k + DEFAULT_BETA).abs() < BIMODAL_KURTOSIS_BAND
                && self.m2().as_f64() >= BIMODAL_MIN_VARIANCE
            {
                flags.push(EpochFlag::Bimodal);
            }
        }
        EpochSummary {
            epoch: self.epoch,
            count: self.count(),
            excluded: self.excluded,
            m1,
            m2: self.m2().as_f64(),
            m3: self.m3().as_f64(),
            m4: self.m4().as_f64(),
            excess_kurtosis: kurt,
            gwa,
            beta,
            flags,
        }
    }
}

/// One line of the epoch-summary JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: u32,
    pub count: u64,
    pub excluded: u64,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
    pub excess_kurtosis: Option<f64>,
    pub gwa: Option<f64>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub flags: Vec<EpochFlag>,
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

impl EpochSummary {
    pub fn has(&self, flag: EpochFlag) -> bool {
        self.flags.contains(&flag)
    }

    /// gwa if this epoch may be selected by a stopping rule.
    pub fn eligible_gwa(&self) -> Option<f64> {
        if self.has(EpochFlag::Unstable)
            || self.has(EpochFlag::Degenerate)
            || self.has(EpochFlag::TooFewSamples)
        {
            return None;
        }
        self.gwa.filter(|g| g.is_finite())
    }
}

/// Ordered per-epoch summaries of one training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GwaSeries {
    pub epochs: Vec<EpochSummary>,
    /// Planned optimization steps; 0 when unknown.
    pub total_steps: u64,
    pub steps_per_epoch: u32,
    pub batch_size: u32,
    pub dataset_size: u64,
}

impl GwaSeries {
    pub fn from_epochs(epochs: Vec<EpochSummary>) -> Self {
        Self {
            epochs,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// Planned number of epochs: derived from `total_steps` when known.
    pub fn planned_epochs(&self) -> usize {
        if self.total_steps > 0 && self.steps_per_epoch > 0 {
            self.total_steps.div_ceil(self.steps_per_epoch as u64) as usize
        } else {
            self.epochs.len()
        }
    }

    pub fn gwa(&self) -> Vec<Option<f64>> {
        self.epochs.iter().map(|e| e.gwa).collect()
    }

    /// Writes one JSON object per epoch.
    pub fn write_jsonl<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: std::io::BufRead>(input: R) -> Result<Self, serde_json::Error> {
        let mut epochs = Vec::new();
        for line in input.lines() {
            let line = line.map_err(serde_json::Error::io)?;
            if line.trim().is_empty() {
                continue;
            }
            epochs.push(serde_json::from_str(&line)?);
        }
        Ok(Self::from_epochs(epochs))
    }
}

pub fn accumulate<T: Scalar>(
    mut dist: EpochDistribution<T>,
    score: &AlignmentScore<T>,
) -> Result<EpochDistribution<T>, MomentsError> {
    dist.accumulate(score)?;
    Ok(dist)
}

pub fn merge<T: Scalar>(
    a: &EpochDistribution<T>,
    b: &EpochDistribution<T>,
) -> Result<EpochDistribution<T>, MomentsError> {
    a.merge(b)
}

pub fn finalize_gwa<T: Scalar>(dist: &EpochDistribution<T>) -> Result<T, MomentsError> {
    dist.finalize_gwa(DEFAULT_MIN_SAMPLES)
}
