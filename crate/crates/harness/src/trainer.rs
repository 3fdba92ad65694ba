//! The reference training loop.
//!
//! Every step the trainer rounds the head, the latents and the
//! probabilities to f32 exactly as the trace stores them, scores the batch
//! with the online estimator, writes the record, then updates the model.
//! Scoring the rounded values keeps the in-process gwa identical to what
//! ingesting the trace reproduces.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use gwa_core::alignment::{HeadSnapshot, SampleView};
use gwa_core::ingest::{decode_probs, EngineConfig, OnlineEstimator};
use gwa_core::moments::{GwaSeries, DEFAULT_MIN_SAMPLES};
use gwa_core::trace::{
    AlignmentRow, StepBatch, TraceError, TraceHeader, TraceWriter, FLAG_BIAS_PRESENT,
};
use gwa_core::AlignmentConfig;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{OptimizerKind, TrainerConfig};
use crate::data::{prepare, Dataset, Splits};
use crate::error::HarnessError;
use crate::model::{Activations, Model, Optimizer};
use crate::report::{assemble, RunRecord, RunReport};

pub const TRACE_FILE: &str = "trace.gwat";
pub const EPOCHS_FILE: &str = "epochs.jsonl";
pub const ALIGNMENT_FILE: &str = "alignment.bin";
pub const DECISION_FILE: &str = "decision.json";
pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const FLIPPED_FILE: &str = "flipped.json";

/// Everything a run produces besides the trace bytes.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub report: RunReport,
    pub series: GwaSeries,
    /// Per-sample scores in emission order.
    pub rows: Vec<AlignmentRow>,
    /// Train-set argmax predictions after each epoch, indexed by sample id.
    pub predictions: Vec<Vec<u32>>,
    pub flipped: Vec<bool>,
    /// Present when offline evaluation was enabled: every training sample
    /// re-scored after each epoch against the end-of-epoch head.
    pub offline: Option<GwaSeries>,
}

pub fn engine_config(cfg: &TrainerConfig) -> EngineConfig {
    EngineConfig {
        alignment: AlignmentConfig {
            include_bias: cfg.include_bias,
        },
        beta: cfg.beta,
        min_samples: DEFAULT_MIN_SAMPLES,
        retain_scores: false,
        projection: cfg.projection,
    }
}

fn accuracy(model: &Model, data: &Dataset, labels: &[u32], act: &mut Activations) -> Option<f64> {
    if data.is_empty() {
        return None;
    }
    let hits = (0..data.len())
        .filter(|&i| model.predict(data.row(i), act) == labels[i])
        .count();
    Some(hits as f64 / data.len() as f64)
}

pub struct Trainer {
    cfg: TrainerConfig,
    model: Model,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
    offline_eval: bool,
}

impl Trainer {
    pub fn new(cfg: TrainerConfig, input_dim: usize, classes: usize) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let model = Model::new(cfg.model, input_dim, classes, cfg.init_scale, cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        let optimizer = Optimizer::new(cfg.optimizer, model.params().len());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5851_f42d_4c95_7f2d));
        Ok(Self {
            cfg,
            model,
            optimizer,
            rng,
            offline_eval: false,
        })
    }

    /// Also re-scores the whole training set after every epoch with a fresh
    /// forward pass at the end-of-epoch weights.
    pub fn with_offline_eval(mut self, on: bool) -> Self {
        self.offline_eval = on;
        self
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    /// Starts a new phase on the current weights (warm start): fresh
    /// optimizer state and a new epoch budget.
    pub fn restart(&mut self, optimizer: OptimizerKind, epochs: usize) {
        self.cfg.optimizer = optimizer;
        self.cfg.epochs = epochs;
        self.optimizer = Optimizer::new(optimizer, self.model.params().len());
    }

    pub fn trace_header(&self, train_len: usize) -> TraceHeader {
        let b = self.cfg.batch_size.min(train_len.max(1));
        TraceHeader {
            latent_dim: self.model.latent_dim() as u32,
            classes: self.model.classes() as u32,
            dataset_size: train_len as u64,
            batch_size: b as u32,
            steps_per_epoch: train_len.div_ceil(b) as u32,
            flags: FLAG_BIAS_PRESENT,
        }
    }

    /// Trains for the configured number of epochs on `splits.train`.
    pub fn fit<W: Write>(
        &mut self,
        splits: &Splits,
        mut trace: Option<&mut TraceWriter<W>>,
    ) -> Result<TrainOutput, HarnessError> {
        let train = &splits.train;
        let n = train.len();
        let header = self.trace_header(n);
        let (b, c, l) = (header.batch_size as usize, self.model.classes(), self.model.latent_dim());
        let mut estimator = OnlineEstimator::new(engine_config(&self.cfg), l)?;
        let mut offline = if self.offline_eval {
            Some(OnlineEstimator::new(engine_config(&self.cfg), l)?)
        } else {
            None
        };

        let mut order: Vec<usize> = (0..n).collect();
        let mut act = Activations::default();
        let mut grad = vec![0.0; self.model.params().len()];
        let mut dh = Vec::new();
        let (mut w32, mut b32) = (Vec::<f32>::new(), Vec::<f32>::new());
        let (mut ids, mut lat32, mut probs32, mut labels) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let (mut z64, mut p64) = (Vec::with_capacity(l), vec![0.0; c]);

        let mut rows = Vec::with_capacity(n * self.cfg.epochs);
        let mut predictions: Vec<Vec<u32>> = Vec::with_capacity(self.cfg.epochs);
        let mut change_fraction = Vec::with_capacity(self.cfg.epochs);
        let (mut train_loss, mut train_acc, mut clean_acc, mut val_acc, mut test_acc) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());

        for epoch in 0..self.cfg.epochs as u32 {
            order.shuffle(&mut self.rng);
            let mut loss_sum = 0.0;
            for (step, batch) in order.chunks(b).enumerate() {
                let step = step as u32;
                w32.clear();
                w32.extend(self.model.head_weights().iter().map(|&v| v as f32));
                b32.clear();
                b32.extend(self.model.head_bias().iter().map(|&v| v as f32));
                let head = HeadSnapshot::new(
                    w32.iter().map(|&v| v as f64).collect(),
                    Some(b32.iter().map(|&v| v as f64).collect()),
                    c,
                    l,
                    epoch,
                    step,
                )
                .map_err(TraceError::from)?;

                ids.clear();
                lat32.clear();
                probs32.clear();
                labels.clear();
                grad.iter_mut().for_each(|g| *g = 0.0);
                let scale = 1.0 / batch.len() as f64;
                for &i in batch {
                    let x = train.row(i);
                    let y = train.labels[i];
                    self.model.forward(x, &mut act);
                    let loss = -act.probs[y as usize].max(f64::MIN_POSITIVE).ln();
                    if !loss.is_finite() || act.probs.iter().any(|p| !p.is_finite()) {
                        return Err(HarnessError::NonFiniteLoss { epoch, step });
                    }
                    loss_sum += loss;
                    self.model.accumulate_grad(x, y as usize, &act, scale, &mut grad, &mut dh);

                    let start = lat32.len();
                    lat32.extend(act.latent.iter().map(|&v| v as f32));
                    let pstart = probs32.len();
                    probs32.extend(act.probs.iter().map(|&v| v as f32));
                    ids.push(i as u64);
                    labels.push(y);

                    z64.clear();
                    z64.extend(lat32[start..].iter().map(|&v| v as f64));
                    decode_probs(&probs32[pstart..], false, i as u64, &mut p64)?;
                    let score = estimator.observe(
                        &head,
                        SampleView {
                            sample_id: i as u64,
                            latent: &z64,
                            probs: &p64,
                            label: y as usize,
                        },
                    )?;
                    rows.push(AlignmentRow {
                        sample_id: score.sample_id,
                        epoch,
                        step,
                        gamma: score.gamma.map_or(f32::NAN, |g| g as f32),
                        grad_norm: score.grad_norm as f32,
                    });
                }
                if let Some(tw) = trace.as_deref_mut() {
                    tw.write_step(
                        epoch,
                        step,
                        &w32,
                        Some(&b32),
                        StepBatch {
                            sample_ids: &ids,
                            latents: &lat32,
                            probs: &probs32,
                            labels: &labels,
                        },
                    )?;
                }
                self.optimizer.step(self.model.params_mut(), &grad);
                if self.model.params().iter().any(|p| !p.is_finite()) {
                    return Err(HarnessError::NonFiniteLoss { epoch, step });
                }
            }
            estimator.close_epoch()?;
            if let Some(off) = offline.as_mut() {
                self.score_offline(off, train, epoch, &mut act)?;
            }

            let preds: Vec<u32> = (0..n).map(|i| self.model.predict(train.row(i), &mut act)).collect();
            let hits = |labels: &[u32]| preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / n.max(1) as f64;
            train_acc.push(hits(&train.labels));
            clean_acc.push(hits(&splits.clean_labels));
            change_fraction.push(predictions.last().map(|prev: &Vec<u32>| {
                prev.iter().zip(&preds).filter(|(a, b)| a != b).count() as f64 / n.max(1) as f64
            }));
            predictions.push(preds);
            train_loss.push(loss_sum / n.max(1) as f64);
            val_acc.push(accuracy(&self.model, &splits.val, &splits.val.labels, &mut act));
            test_acc.push(accuracy(&self.model, &splits.test, &splits.test.labels, &mut act));
        }
        if let Some(tw) = trace {
            w32.clear();
            w32.extend(self.model.head_weights().iter().map(|&v| v as f32));
            b32.clear();
            b32.extend(self.model.head_bias().iter().map(|&v| v as f32));
            tw.write_step(self.cfg.epochs as u32, 0, &w32, Some(&b32), StepBatch::empty())?;
            tw.flush()?;
        }

        let series = GwaSeries {
            total_steps: header.steps_per_epoch as u64 * self.cfg.epochs as u64,
            steps_per_epoch: header.steps_per_epoch,
            batch_size: header.batch_size,
            dataset_size: header.dataset_size,
            epochs: estimator.finish()?,
        };
        let offline = match offline {
            Some(off) => Some(GwaSeries {
                epochs: off.finish()?,
                ..series.clone()
            }),
            None => None,
        };
        let flipped = splits.flipped.clone();
        let any_flips = flipped.iter().any(|&f| f);
        let report = assemble(RunRecord {
            config: Some(&self.cfg),
            series: &series,
            train_loss: &train_loss,
            train_accuracy: &train_acc,
            clean_train_accuracy: &clean_acc,
            val_accuracy: &val_acc,
            test_accuracy: &test_acc,
            change_fraction: &change_fraction,
            predictions: &predictions,
            rows: &rows,
            flipped: any_flips.then_some(&flipped[..]),
            warmup_fraction: self.cfg.warmup_fraction,
        });
        Ok(TrainOutput {
            report,
            series,
            rows,
            predictions,
            flipped,
            offline,
        })
    }

    fn score_offline(
        &self,
        est: &mut OnlineEstimator,
        train: &Dataset,
        epoch: u32,
        act: &mut Activations,
    ) -> Result<(), HarnessError> {
        let f32_round = |xs: &[f64]| -> Vec<f64> { xs.iter().map(|&v| v as f32 as f64).collect() };
        let head = HeadSnapshot::new(
            f32_round(self.model.head_weights()),
            Some(f32_round(self.model.head_bias())),
            self.model.classes(),
            self.model.latent_dim(),
            epoch,
            0,
        )
        .map_err(TraceError::from)?;
        let mut probs = vec![0.0; self.model.classes()];
        for i in 0..train.len() {
            self.model.forward(train.row(i), act);
            let latent = f32_round(&act.latent);
            let p32: Vec<f32> = act.probs.iter().map(|&v| v as f32).collect();
            decode_probs(&p32, false, i as u64, &mut probs)?;
            est.observe(
                &head,
                SampleView {
                    sample_id: i as u64,
                    latent: &latent,
                    probs: &probs,
                    label: train.labels[i] as usize,
                },
            )?;
        }
        est.close_epoch()?;
        Ok(())
    }
}

/// Builds the dataset from `cfg` and trains without writing a trace.
pub fn train(cfg: &TrainerConfig) -> Result<(TrainOutput, Splits), HarnessError> {
    let splits = prepare(cfg)?;
    let mut t = Trainer::new(cfg.clone(), splits.train.dim, splits.train.classes)?;
    let out = t.fit::<std::io::Sink>(&splits, None)?;
    Ok((out, splits))
}

/// Builds the dataset from `cfg` and trains, returning the trace bytes.
pub fn train_with_trace(cfg: &TrainerConfig) -> Result<(TrainOutput, Vec<u8>), HarnessError> {
    let splits = prepare(cfg)?;
    let mut t = Trainer::new(cfg.clone(), splits.train.dim, splits.train.classes)?;
    let mut tw = TraceWriter::new(Vec::new(), t.trace_header(splits.train.len()))?;
    let out = t.fit(&splits, Some(&mut tw))?;
    Ok((out, tw.finish()?))
}

/// Trains and writes every artifact to `dir`.
pub fn train_to_dir(cfg: &TrainerConfig, dir: &Path) -> Result<TrainOutput, HarnessError> {
    fs::create_dir_all(dir)?;
    let splits = prepare(cfg)?;
    let mut t = Trainer::new(cfg.clone(), splits.train.dim, splits.train.classes)?;
    let file = BufWriter::new(File::create(dir.join(TRACE_FILE))?);
    let mut tw = TraceWriter::new(file, t.trace_header(splits.train.len()))?;
    let mut out = t.fit(&splits, Some(&mut tw))?;
    tw.finish()?.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    write_artifacts(&mut out, dir)?;
    Ok(out)
}

/// Writes the epoch series, alignment rows, decisions, predictions, flip
/// mask and report next to an already written trace.
pub fn write_artifacts(out: &mut TrainOutput, dir: &Path) -> Result<(), HarnessError> {
    let mut w = BufWriter::new(File::create(dir.join(EPOCHS_FILE))?);
    out.series.write_jsonl(&mut w)?;
    w.flush()?;

    let mut w = BufWriter::new(File::create(dir.join(ALIGNMENT_FILE))?);
    for r in &out.rows {
        r.write_to(&mut w)?;
    }
    w.flush()?;

    fs::write(dir.join(DECISION_FILE), serde_json::to_vec_pretty(&out.report.decisions)?)?;
    fs::write(dir.join(PREDICTIONS_FILE), serde_json::to_vec(&out.predictions)?)?;
    fs::write(dir.join(FLIPPED_FILE), serde_json::to_vec(&out.flipped)?)?;

    let a = &mut out.report.artifacts;
    a.trace = Some(TRACE_FILE.into());
    a.epochs = Some(EPOCHS_FILE.into());
    a.alignment = Some(ALIGNMENT_FILE.into());
    a.decision = Some(DECISION_FILE.into());
    a.predictions = Some(PREDICTIONS_FILE.into());
    a.flipped = Some(FLIPPED_FILE.into());
    fs::write(dir.join(REPORT_FILE), serde_json::to_vec_pretty(&out.report)?)?;
    Ok(())
}
