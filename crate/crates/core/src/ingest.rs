//! Trace ingestion: the online (per-step weights) estimator and the offline
//! (fixed snapshot) recomputation.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::alignment::{
    alignment_with, softmax_into, AlignmentConfig, AlignmentScore, HeadSnapshot, SampleView,
    Workspace,
};
use crate::moments::{
    EpochDistribution, EpochSummary, GwaSeries, DEFAULT_BETA, DEFAULT_MIN_SAMPLES,
};
use crate::projection::{ProjectionConfig, ProjectionSpec};
use crate::trace::{
    AlignmentRow, StepRecord, TraceError, TraceHeader, TraceReader, WeightSection,
    PROBS_SUM_TOLERANCE,
};

/// Relative tolerance of the streaming vs stored moment cross-check.
pub const CROSS_CHECK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub alignment: AlignmentConfig,
    pub beta: f64,
    pub min_samples: u64,
    /// Keep every score per epoch and cross-check the streaming moments
    /// against a store-then-compute pass.
    pub retain_scores: bool,
    pub projection: ProjectionConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            alignment: AlignmentConfig::default(),
            beta: DEFAULT_BETA,
            min_samples: DEFAULT_MIN_SAMPLES,
            retain_scores: false,
            projection: ProjectionConfig::default(),
        }
    }
}

/// Scores samples against heads, projecting both when configured.
struct Scorer {
    cfg: AlignmentConfig,
    projection: Option<ProjectionSpec<f64>>,
    projected: Option<(u64, HeadSnapshot<f64>)>,
    ws: Workspace<f64>,
    latent: Vec<f64>,
}

impl Scorer {
    fn new(cfg: &EngineConfig, latent_dim: usize) -> Result<Self, TraceError> {
        let projection = if cfg.projection.enabled {
            Some(ProjectionSpec::from_config(latent_dim, &cfg.projection)?)
        } else {
            None
        };
        let k = projection.as_ref().map_or(latent_dim, |p| p.target_dim());
        Ok(Self {
            cfg: cfg.alignment,
            projection,
            projected: None,
            ws: Workspace::default(),
            latent: vec![0.0; k],
        })
    }

    fn score(
        &mut self,
        head: &HeadSnapshot<f64>,
        sample: SampleView<'_, f64>,
    ) -> Result<AlignmentScore<f64>, TraceError> {
        let Some(proj) = &self.projection else {
            return Ok(alignment_with(sample, head, self.cfg, &mut self.ws)?);
        };
        let fresh = !matches!(&self.projected, Some((h, _)) if *h == head.weight_hash());
        if fresh {
            self.projected = Some((head.weight_hash(), proj.project_head(head)?));
        }
        let Some((_, projected)) = &self.projected else {
            unreachable!("projected head cached above")
        };
        if sample.latent.len() != proj.source_dim() {
            return Err(TraceError::DimensionMismatch {
                what: "latent",
                expected: proj.source_dim(),
                found: sample.latent.len(),
            });
        }
        proj.project_into(sample.latent, &mut self.latent);
        let view = SampleView {
            latent: &self.latent,
            ..sample
        };
        let mut score = alignment_with(view, projected, self.cfg, &mut self.ws)?;
        score.epoch = head.epoch;
        score.step = head.step;
        Ok(score)
    }
}

fn close(a: f64, b: f64, scale: f64) -> bool {
    (a - b).abs() <= CROSS_CHECK_TOLERANCE * scale.max(1e-12)
}

/// Verifies streaming moments against the retained raw scores.
fn cross_check(dist: &EpochDistribution<f64>) -> Result<(), TraceError> {
    let Some((m1, m2, m3, m4)) = dist.batch_moments() else {
        return Ok(());
    };
    let sigma = m2.max(0.0).sqrt();
    let checks = [
        (1, dist.m1(), m1, m1.abs().max(sigma)),
        (2, dist.m2(), m2, m2),
        (3, dist.m3(), m3, m3.abs().max(sigma.powi(3))),
        (4, dist.m4(), m4, m4),
    ];
    for (order, streamed, stored, scale) in checks {
        if !close(streamed, stored, scale) {
            return Err(TraceError::MomentCrossCheck {
                epoch: dist.epoch,
                order,
            });
        }
    }
    Ok(())
}

/// Online estimator: every sample is scored against the head at the start
/// of its own step, and epoch distributions are closed at epoch boundaries.
pub struct OnlineEstimator {
    cfg: EngineConfig,
    scorer: Scorer,
    current: Option<EpochDistribution<f64>>,
    summaries: Vec<EpochSummary>,
}

impl OnlineEstimator {
    pub fn new(cfg: EngineConfig, latent_dim: usize) -> Result<Self, TraceError> {
        Ok(Self {
            scorer: Scorer::new(&cfg, latent_dim)?,
            cfg,
            current: None,
            summaries: Vec::new(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    /// Scores one sample and adds it to the epoch of `head`.
    pub fn observe(
        &mut self,
        head: &HeadSnapshot<f64>,
        sample: SampleView<'_, f64>,
    ) -> Result<AlignmentScore<f64>, TraceError> {
        self.enter_epoch(head.epoch)?;
        let score = self.scorer.score(head, sample)?;
        if let Some(dist) = &mut self.current {
            dist.accumulate(&score)?;
        }
        Ok(score)
    }

    fn enter_epoch(&mut self, epoch: u32) -> Result<(), TraceError> {
        if let Some(cur) = &self.current {
            if cur.epoch == epoch {
                return Ok(());
            }
            if epoch < cur.epoch {
                return Err(crate::moments::MomentsError::EpochMismatch {
                    expected: cur.epoch,
                    found: epoch,
                }
                .into());
            }
            self.close_epoch()?;
        }
        self.current = Some(if self.cfg.retain_scores {
            EpochDistribution::retaining(epoch, self.cfg.beta)
        } else {
            EpochDistribution::new(epoch, self.cfg.beta)
        });
        Ok(())
    }

    /// Finalizes the open epoch, if any, and returns its summary.
    pub fn close_epoch(&mut self) -> Result<Option<&EpochSummary>, TraceError> {
        let Some(dist) = self.current.take() else {
            return Ok(None);
        };
        cross_check(&dist)?;
        self.summaries.push(dist.summary(self.cfg.min_samples));
        Ok(self.summaries.last())
    }

    pub fn summaries(&self) -> &[EpochSummary] {
        &self.summaries
    }

    pub fn finish(mut self) -> Result<Vec<EpochSummary>, TraceError> {
        self.close_epoch()?;
        Ok(self.summaries)
    }
}

/// Widens trace probabilities, applying softmax to logits, and checks that
/// they form a distribution.
pub fn decode_probs(
    raw: &[f32],
    are_logits: bool,
    sample_id: u64,
    out: &mut [f64],
) -> Result<(), TraceError> {
    for (o, &r) in out.iter_mut().zip(raw) {
        *o = r as f64;
    }
    if are_logits {
        let logits: Vec<f64> = out.to_vec();
        softmax_into(&logits, out);
        return Ok(());
    }
    let sum: f64 = out.iter().sum();
    let in_range = out.iter().all(|p| (-PROBS_SUM_TOLERANCE..=1.0 + PROBS_SUM_TOLERANCE).contains(p));
    if !in_range || (sum - 1.0).abs() > PROBS_SUM_TOLERANCE || !sum.is_finite() {
        return Err(TraceError::InvalidProbabilities { sample_id });
    }
    Ok(())
}

fn widen(src: &[f32], dst: &mut Vec<f64>) {
    dst.clear();
    dst.extend(src.iter().map(|&x| x as f64));
}

fn snapshot_from(
    section: &WeightSection,
    header: &TraceHeader,
    previous: Option<&HeadSnapshot<f64>>,
    epoch: u32,
    step: u32,
) -> Result<HeadSnapshot<f64>, TraceError> {
    match section {
        WeightSection::Full { weights, bias, .. } => {
            let mut w = Vec::with_capacity(weights.len());
            widen(weights, &mut w);
            let b = bias.as_ref().map(|b| {
                let mut v = Vec::with_capacity(b.len());
                widen(b, &mut v);
                v
            });
            Ok(HeadSnapshot::new(
                w,
                b,
                header.classes as usize,
                header.latent_dim as usize,
                epoch,
                step,
            )?)
        }
        WeightSection::SameAsPrevious { .. } => previous
            .map(|p| p.clone().at(epoch, step))
            .ok_or(TraceError::MissingSnapshot { epoch, step }),
    }
}

/// Feeds every sample of `rec` through `f` as a widened [`SampleView`].
fn for_each_sample(
    rec: &StepRecord,
    header: &TraceHeader,
    latent: &mut Vec<f64>,
    probs: &mut Vec<f64>,
    mut f: impl FnMut(SampleView<'_, f64>) -> Result<(), TraceError>,
) -> Result<(), TraceError> {
    let (d, c) = (header.latent_dim as usize, header.classes as usize);
    probs.resize(c, 0.0);
    for (i, &id) in rec.sample_ids.iter().enumerate() {
        widen(&rec.latents[i * d..(i + 1) * d], latent);
        decode_probs(
            &rec.probs[i * c..(i + 1) * c],
            header.probs_are_logits(),
            id,
            probs,
        )?;
        f(SampleView {
            sample_id: id,
            latent,
            probs,
            label: rec.labels[i] as usize,
        })?;
    }
    Ok(())
}

fn series_from(header: &TraceHeader, epochs: Vec<EpochSummary>) -> GwaSeries {
    GwaSeries {
        total_steps: header.steps_per_epoch as u64 * epochs.len() as u64,
        steps_per_epoch: header.steps_per_epoch,
        batch_size: header.batch_size,
        dataset_size: header.dataset_size,
        epochs,
    }
}

#[derive(Debug, Clone)]
pub struct IngestOutput {
    pub header: TraceHeader,
    pub series: GwaSeries,
    pub steps: u64,
    pub samples: u64,
}

/// Runs the online estimator over a byte stream. Per-sample alignment rows
/// are written to `rows` when given.
pub fn ingest_stream<R: Read>(
    source: R,
    cfg: &EngineConfig,
    mut rows: Option<&mut dyn Write>,
) -> Result<IngestOutput, TraceError> {
    let mut reader = TraceReader::new(source)?;
    let header = *reader.header();
    let mut estimator = OnlineEstimator::new(*cfg, header.latent_dim as usize)?;
    let mut rec = StepRecord {
        epoch: 0,
        step: 0,
        weights: WeightSection::SameAsPrevious { hash: 0 },
        sample_ids: vec![],
        latents: vec![],
        probs: vec![],
        labels: vec![],
    };
    let mut head: Option<HeadSnapshot<f64>> = None;
    let (mut latent, mut probs) = (Vec::new(), Vec::new());
    let (mut steps, mut samples) = (0u64, 0u64);

    while reader.read_step_into(&mut rec)? {
        let snap = snapshot_from(&rec.weights, &header, head.as_ref(), rec.epoch, rec.step)?;
        for_each_sample(&rec, &header, &mut latent, &mut probs, |sample| {
            let score = estimator.observe(&snap, sample)?;
            if let Some(out) = rows.as_deref_mut() {
                AlignmentRow {
                    sample_id: score.sample_id,
                    epoch: score.epoch,
                    step: score.step,
                    gamma: score.gamma.map_or(f32::NAN, |g| g as f32),
                    grad_norm: score.grad_norm as f32,
                }
                .write_to(out)?;
            }
            Ok(())
        })?;
        samples += rec.len() as u64;
        steps += 1;
        head = Some(snap);
    }
    if let Some(out) = rows {
        out.flush()?;
    }
    Ok(IngestOutput {
        header,
        series: series_from(&header, estimator.finish()?),
        steps,
        samples,
    })
}

/// A fully loaded trace with resolved head snapshots.
#[derive(Debug, Clone)]
pub struct Trace {
    pub header: TraceHeader,
    pub steps: Vec<StepRecord>,
    snapshots: Vec<HeadSnapshot<f64>>,
    step_snapshot: Vec<usize>,
}

/// Which head of an epoch the offline estimator holds fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferencePoint {
    /// Weights at the start of the epoch's first step.
    Start,
    /// Weights at the start of the epoch's middle step.
    Mid,
    /// Weights after the epoch's last update.
    End,
}

impl Trace {
    pub fn read<R: Read>(source: R) -> Result<Self, TraceError> {
        let mut reader = TraceReader::new(source)?;
        let header = *reader.header();
        let mut steps = Vec::new();
        let mut snapshots: Vec<HeadSnapshot<f64>> = Vec::new();
        let mut step_snapshot = Vec::new();
        while let Some(rec) = reader.next_step()? {
            if let WeightSection::Full { .. } = rec.weights {
                snapshots.push(snapshot_from(
                    &rec.weights,
                    &header,
                    None,
                    rec.epoch,
                    rec.step,
                )?);
            }
            step_snapshot.push(snapshots.len() - 1);
            steps.push(rec);
        }
        Ok(Self {
            header,
            steps,
            snapshots,
            step_snapshot,
        })
    }

    /// Head at the start of step record `index`.
    pub fn head_at(&self, index: usize) -> HeadSnapshot<f64> {
        let rec = &self.steps[index];
        self.snapshots[self.step_snapshot[index]]
            .clone()
            .at(rec.epoch, rec.step)
    }

    /// Epochs that contain at least one sample, in order.
    pub fn epochs(&self) -> Vec<u32> {
        let mut out: Vec<u32> = Vec::new();
        for rec in self.steps.iter().filter(|r| !r.is_empty()) {
            if out.last() != Some(&rec.epoch) {
                out.push(rec.epoch);
            }
        }
        out
    }

    fn epoch_records(&self, epoch: u32) -> Vec<usize> {
        (0..self.steps.len())
            .filter(|&i| self.steps[i].epoch == epoch && !self.steps[i].is_empty())
            .collect()
    }

    pub fn reference_snapshot(
        &self,
        epoch: u32,
        point: ReferencePoint,
    ) -> Result<HeadSnapshot<f64>, TraceError> {
        let records = self.epoch_records(epoch);
        let missing = |what| TraceError::MissingReference { epoch, what };
        match point {
            ReferencePoint::Start => records.first().map(|&i| self.head_at(i)).ok_or(missing("start")),
            ReferencePoint::Mid => records
                .get(records.len() / 2)
                .map(|&i| self.head_at(i))
                .ok_or(missing("midpoint")),
            ReferencePoint::End => {
                let last = *records.last().ok_or(missing("end"))?;
                if last + 1 < self.steps.len() {
                    Ok(self.head_at(last + 1))
                } else {
                    Err(missing("end"))
                }
            }
        }
    }
}

/// Scores every sample of `epoch` against one fixed `snapshot`.
pub fn offline_recompute(
    trace: &Trace,
    epoch: u32,
    snapshot: &HeadSnapshot<f64>,
    cfg: &EngineConfig,
) -> Result<EpochDistribution<f64>, TraceError> {
    let mut scorer = Scorer::new(cfg, trace.header.latent_dim as usize)?;
    let head = snapshot.clone().at(epoch, 0);
    let mut dist = if cfg.retain_scores {
        EpochDistribution::retaining(epoch, cfg.beta)
    } else {
        EpochDistribution::new(epoch, cfg.beta)
    };
    let (mut latent, mut probs) = (Vec::new(), Vec::new());
    for i in trace.epoch_records(epoch) {
        for_each_sample(&trace.steps[i], &trace.header, &mut latent, &mut probs, |s| {
            let score = scorer.score(&head, s)?;
            dist.accumulate(&score)?;
            Ok(())
        })?;
    }
    Ok(dist)
}

/// Offline series with the head of each epoch fixed at `point`.
pub fn offline_series(
    trace: &Trace,
    point: ReferencePoint,
    cfg: &EngineConfig,
) -> Result<GwaSeries, TraceError> {
    let mut epochs = Vec::new();
    for epoch in trace.epochs() {
        let snap = trace.reference_snapshot(epoch, point)?;
        epochs.push(offline_recompute(trace, epoch, &snap, cfg)?.summary(cfg.min_samples));
    }
    Ok(series_from(&trace.header, epochs))
}

/// Online series of an in-memory trace; identical to [`ingest_stream`].
pub fn online_series(trace: &Trace, cfg: &EngineConfig) -> Result<GwaSeries, TraceError> {
    let mut est = OnlineEstimator::new(*cfg, trace.header.latent_dim as usize)?;
    let (mut latent, mut probs) = (Vec::new(), Vec::new());
    for (i, rec) in trace.steps.iter().enumerate() {
        let head = trace.head_at(i);
        for_each_sample(rec, &trace.header, &mut latent, &mut probs, |s| {
            est.observe(&head, s)?;
            Ok(())
        })?;
    }
    Ok(series_from(&trace.header, est.finish()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{StepBatch, TraceWriter, FLAG_PROBS_ARE_LOGITS};

    fn header(flags: u16) -> TraceHeader {
        TraceHeader {
            latent_dim: 2,
            classes: 2,
            dataset_size: 2,
            batch_size: 2,
            steps_per_epoch: 1,
            flags,
        }
    }

    #[test]
    fn empty_body_gives_empty_series() {
        let bytes = header(0).to_bytes();
        let out = ingest_stream(&bytes[..], &EngineConfig::default(), None).unwrap();
        assert!(out.series.is_empty());
        assert_eq!((out.steps, out.samples), (0, 0));
    }

    #[test]
    fn logits_are_softmaxed() {
        let mut w = TraceWriter::new(Vec::new(), header(FLAG_PROBS_ARE_LOGITS)).unwrap();
        w.write_step(
            0,
            0,
            &[1.0, 0.0, 0.0, 1.0],
            None,
            StepBatch {
                sample_ids: &[0],
                latents: &[1.0, 0.0],
                probs: &[0.0, 0.0],
                labels: &[0],
            },
        )
        .unwrap();
        let bytes = w.finish().unwrap();
        let mut rows = Vec::new();
        ingest_stream(&bytes[..], &EngineConfig::default(), Some(&mut rows)).unwrap();
        let rows = crate::trace::read_alignment_rows(&rows[..]).unwrap();
        // probs (0.5, 0.5): a = (0.5, -0.5), z = (1, 0), W = I -> gamma = 0.5 / (√0.5 √2) = 0.5.
        assert!((rows[0].gamma - 0.5).abs() < 1e-6);
        assert!((rows[0].grad_norm - 0.5f32.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn invalid_probabilities_rejected() {
        let mut out = [0.0; 2];
        assert!(decode_probs(&[0.5, 0.6], false, 3, &mut out).is_err());
        assert!(decode_probs(&[1.5, -0.5], false, 3, &mut out).is_err());
        assert!(decode_probs(&[0.25, 0.75], false, 3, &mut out).is_ok());
    }

    #[test]
    fn same_as_previous_without_snapshot_is_missing() {
        let rec = WeightSection::SameAsPrevious { hash: 1 };
        assert!(matches!(
            snapshot_from(&rec, &header(0), None, 0, 0),
            Err(TraceError::MissingSnapshot { .. })
        ));
    }
}
