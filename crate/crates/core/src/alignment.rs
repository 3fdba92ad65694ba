//! Closed-form per-sample gradients of a softmax cross-entropy classifier
//! head and their cosine alignment with the head weights.
//!
//! For a head `W` (C×D, row major) the negative loss gradient of one sample
//! is the rank-1 matrix `a zᵀ` with residual `a = onehot(y) − p` and latent
//! `z`. Everything here works on the two factors; the C×D gradient is never
//! built.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::weight_hash;
use crate::scalar::{dot, norm_sq, Scalar};

/// Norms below this (relative to the head norm for gradients) count as zero.
pub const ZERO_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignmentError {
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("head weights are degenerate (frobenius norm {norm:e})")]
    DegenerateWeights { norm: f64 },
    #[error("per-sample gradient is zero")]
    ZeroGradient,
}

/// Whether the bias column takes part in gradient and weight vectors.
///
/// With `include_bias` the latent is augmented by a constant 1 and the bias
/// is appended to `W` as an extra column, which keeps every rank-1 identity
/// exact.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub include_bias: bool,
}

/// Telemetry for one training sample at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord<T> {
    pub sample_id: u64,
    pub latent: Vec<T>,
    pub probs: Vec<T>,
    pub label: usize,
}

/// Borrowed form of [`SampleRecord`], used on hot paths that keep samples
/// in flat batch buffers.
#[derive(Debug, Clone, Copy)]
pub struct SampleView<'a, T> {
    pub sample_id: u64,
    pub latent: &'a [T],
    pub probs: &'a [T],
    pub label: usize,
}

impl<T: Scalar> SampleRecord<T> {
    pub fn new(sample_id: u64, latent: Vec<T>, probs: Vec<T>, label: usize) -> Self {
        Self {
            sample_id,
            latent,
            probs,
            label,
        }
    }

    pub fn view(&self) -> SampleView<'_, T> {
        SampleView {
            sample_id: self.sample_id,
            latent: &self.latent,
            probs: &self.probs,
            label: self.label,
        }
    }
}

/// Classifier head weights at the start of one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSnapshot<T> {
    weights: Vec<T>,
    bias: Option<Vec<T>>,
    classes: usize,
    dim: usize,
    pub epoch: u32,
    pub step: u32,
    weight_hash: u64,
    weights_norm_sq: T,
    bias_norm_sq: T,
}

impl<T: Scalar> HeadSnapshot<T> {
    /// Builds a snapshot from a row-major `classes × dim` weight buffer.
    pub fn new(
        weights: Vec<T>,
        bias: Option<Vec<T>>,
        classes: usize,
        dim: usize,
        epoch: u32,
        step: u32,
    ) -> Result<Self, AlignmentError> {
        if weights.len() != classes * dim {
            return Err(AlignmentError::DimensionMismatch {
                what: "head weights",
                expected: classes * dim,
                found: weights.len(),
            });
        }
        if let Some(b) = &bias {
            if b.len() != classes {
                return Err(AlignmentError::DimensionMismatch {
                    what: "head bias",
                    expected: classes,
                    found: b.len(),
                });
            }
        }
        let weight_hash = weight_hash(&weights, bias.as_deref());
        let weights_norm_sq = norm_sq(&weights);
        let bias_norm_sq = bias.as_deref().map(norm_sq).unwrap_or_else(T::zero);
        Ok(Self {
            weights,
            bias,
            classes,
            dim,
            epoch,
            step,
            weight_hash,
            weights_norm_sq,
            bias_norm_sq,
        })
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_deref()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight_hash(&self) -> u64 {
        self.weight_hash
    }

    pub fn row(&self, class: usize) -> &[T] {
        &self.weights[class * self.dim..(class + 1) * self.dim]
    }

    /// Frobenius norm of the flattened head as seen by the alignment.
    pub fn frobenius_norm(&self, cfg: AlignmentConfig) -> T {
        if cfg.include_bias {
            (self.weights_norm_sq + self.bias_norm_sq).sqrt()
        } else {
            self.weights_norm_sq.sqrt()
        }
    }

    /// Same snapshot relabelled to a different `(epoch, step)`.
    pub fn at(mut self, epoch: u32, step: u32) -> Self {
        self.epoch = epoch;
        self.step = step;
        self
    }

    fn check_sample(&self, sample: &SampleView<'_, T>) -> Result<(), AlignmentError> {
        if sample.latent.len() != self.dim {
            return Err(AlignmentError::DimensionMismatch {
                what: "latent",
                expected: self.dim,
                found: sample.latent.len(),
            });
        }
        check_probs(sample, self.classes)
    }

    /// `W z (+ b)` for one latent.
    fn project(&self, latent: &[T], cfg: AlignmentConfig, out: &mut [T]) {
        for (c, o) in out.iter_mut().enumerate() {
            let mut v = dot(self.row(c), latent);
            if cfg.include_bias {
                if let Some(b) = &self.bias {
                    v = v + b[c];
                }
            }
            *o = v;
        }
    }
}

fn check_probs<T>(sample: &SampleView<'_, T>, classes: usize) -> Result<(), AlignmentError> {
    if sample.probs.len() != classes {
        return Err(AlignmentError::DimensionMismatch {
            what: "probs",
            expected: classes,
            found: sample.probs.len(),
        });
    }
    if sample.label >= classes {
        return Err(AlignmentError::LabelOutOfRange {
            label: sample.label,
            classes,
        });
    }
    Ok(())
}

/// One per-sample alignment value. `gamma` is `None` when the gradient
/// vanished (perfectly fit sample or zero latent).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScore<T> {
    pub sample_id: u64,
    pub epoch: u32,
    pub step: u32,
    pub gamma: Option<T>,
    pub grad_norm: T,
}

impl<T: Scalar> AlignmentScore<T> {
    pub fn is_defined(&self) -> bool {
        self.gamma.is_some()
    }
}

/// Writes `onehot(label) − probs` into `out` and returns its squared norm.
#[inline]
fn residual_into<T: Scalar>(probs: &[T], label: usize, out: &mut [T]) -> T {
    let mut sq = T::zero();
    for (c, (o, p)) in out.iter_mut().zip(probs).enumerate() {
        let y = if c == label { T::one() } else { T::zero() };
        *o = y - *p;
        sq = sq + *o * *o;
    }
    sq
}

#[inline]
fn latent_norm_sq<T: Scalar>(latent: &[T], cfg: AlignmentConfig) -> T {
    let sq = norm_sq(latent);
    if cfg.include_bias {
        sq + T::one()
    } else {
        sq
    }
}

/// Closed-form negative head gradient of cross-entropy for one sample.
///
/// Returns the class-side factor `a = onehot(y) − p` and `‖a zᵀ‖_F`.
pub fn head_gradient<T: Scalar>(
    sample: SampleView<'_, T>,
    head: &HeadSnapshot<T>,
    cfg: AlignmentConfig,
) -> Result<(Vec<T>, T), AlignmentError> {
    head.check_sample(&sample)?;
    let mut residual = vec![T::zero(); head.classes];
    let a_sq = residual_into(sample.probs, sample.label, &mut residual);
    let grad_norm = (a_sq * latent_norm_sq(sample.latent, cfg)).sqrt();
    Ok((residual, grad_norm))
}

/// Reusable buffers for [`alignment_with`].
#[derive(Debug, Default, Clone)]
pub struct Workspace<T> {
    residual: Vec<T>,
    logits: Vec<T>,
}

impl<T: Scalar> Workspace<T> {
    pub fn new(classes: usize) -> Self {
        Self {
            residual: vec![T::zero(); classes],
            logits: vec![T::zero(); classes],
        }
    }
}

/// Cosine between the sample's negative head gradient and the head weights.
pub fn alignment<T: Scalar>(
    sample: SampleView<'_, T>,
    head: &HeadSnapshot<T>,
    cfg: AlignmentConfig,
) -> Result<AlignmentScore<T>, AlignmentError> {
    alignment_with(sample, head, cfg, &mut Workspace::new(head.classes))
}

/// [`alignment`] without per-call allocation.
pub fn alignment_with<T: Scalar>(
    sample: SampleView<'_, T>,
    head: &HeadSnapshot<T>,
    cfg: AlignmentConfig,
    ws: &mut Workspace<T>,
) -> Result<AlignmentScore<T>, AlignmentError> {
    head.check_sample(&sample)?;
    let w_norm = head.frobenius_norm(cfg);
    if w_norm.as_f64() < ZERO_THRESHOLD {
        return Err(AlignmentError::DegenerateWeights {
            norm: w_norm.as_f64(),
        });
    }
    ws.residual.resize(head.classes, T::zero());
    ws.logits.resize(head.classes, T::zero());

    let a_sq = residual_into(sample.probs, sample.label, &mut ws.residual);
    let a_norm = a_sq.sqrt();
    let z_norm = latent_norm_sq(sample.latent, cfg).sqrt();
    let grad_norm = a_norm * z_norm;

    let mut score = AlignmentScore {
        sample_id: sample.sample_id,
        epoch: head.epoch,
        step: head.step,
        gamma: None,
        grad_norm,
    };
    if grad_norm.as_f64() < ZERO_THRESHOLD * w_norm.as_f64() {
        return Ok(score);
    }
    head.project(sample.latent, cfg, &mut ws.logits);
    let num = dot(&ws.residual, &ws.logits);
    let gamma = num / (grad_norm * w_norm);
    score.gamma = Some(gamma.max(-T::one()).min(T::one()));
    Ok(score)
}

/// Cosine between the negative head gradients of two samples.
pub fn pairwise_alignment<T: Scalar>(
    a: SampleView<'_, T>,
    b: SampleView<'_, T>,
    cfg: AlignmentConfig,
) -> Result<T, AlignmentError> {
    if a.latent.len() != b.latent.len() {
        return Err(AlignmentError::DimensionMismatch {
            what: "latent",
            expected: a.latent.len(),
            found: b.latent.len(),
        });
    }
    let classes = a.probs.len();
    check_probs(&a, classes)?;
    check_probs(&b, classes)?;

    let mut ra = vec![T::zero(); classes];
    let mut rb = vec![T::zero(); classes];
    let ra_sq = residual_into(a.probs, a.label, &mut ra);
    let rb_sq = residual_into(b.probs, b.label, &mut rb);
    let za_sq = latent_norm_sq(a.latent, cfg);
    let zb_sq = latent_norm_sq(b.latent, cfg);

    let na = (ra_sq * za_sq).sqrt();
    let nb = (rb_sq * zb_sq).sqrt();
    if na.as_f64() < ZERO_THRESHOLD || nb.as_f64() < ZERO_THRESHOLD {
        return Err(AlignmentError::ZeroGradient);
    }
    let mut zz = dot(a.latent, b.latent);
    if cfg.include_bias {
        zz = zz + T::one();
    }
    let cos = zz * dot(&ra, &rb) / (na * nb);
    Ok(cos.max(-T::one()).min(T::one()))
}

/// Numerically stable softmax (max subtraction) into `out`.
pub fn softmax_into<T: Scalar>(logits: &[T], out: &mut [T]) {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |m, v| if v > m { v } else { m });
    let mut sum = T::zero();
    for (o, l) in out.iter_mut().zip(logits) {
        *o = (*l - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}
