//! Gaussian Johnson-Lindenstrauss projection of latents and heads to a
//! fixed dimension.
//!
//! Latents map to `R z` and heads to `W Rᵀ`, so the factored alignment
//! formula applies unchanged in the projected space.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{AlignmentError, HeadSnapshot, SampleRecord};
use crate::scalar::{dot, Scalar};

pub const DEFAULT_TARGET_DIM: usize = 192;
pub const DEFAULT_SEED: u64 = 0x6777_615f_6a6c_7400;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectionError {
    #[error("target dimension {target} exceeds source dimension {source_dim}")]
    TargetExceedsSource { target: usize, source_dim: usize },
    #[error("target dimension must be positive")]
    ZeroTarget,
    #[error("expected input of dimension {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Head(#[from] AlignmentError),
}

/// Config keys `projection.enabled`, `projection.dim`, `projection.seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    pub enabled: bool,
    pub dim: usize,
    pub seed: u64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            dim: DEFAULT_TARGET_DIM,
            seed: DEFAULT_SEED,
        }
    }
}

#[derive(Debug)]
enum Kind<T> {
    Gaussian(OnceLock<Vec<T>>),
    Identity,
}

/// A `k × D` projection drawn i.i.d. from `Normal(0, 1/k)` with a seeded
/// generator. The matrix is materialized on first use.
#[derive(Debug)]
pub struct ProjectionSpec<T> {
    source_dim: usize,
    target_dim: usize,
    seed: u64,
    kind: Kind<T>,
}

impl<T: Scalar> ProjectionSpec<T> {
    pub fn new(source_dim: usize, target_dim: usize, seed: u64) -> Result<Self, ProjectionError> {
        if target_dim == 0 {
            return Err(ProjectionError::ZeroTarget);
        }
        if target_dim > source_dim {
            return Err(ProjectionError::TargetExceedsSource {
                target: target_dim,
                source_dim,
            });
        }
        Ok(Self {
            source_dim,
            target_dim,
            seed,
            kind: Kind::Gaussian(OnceLock::new()),
        })
    }

    pub fn from_config(source_dim: usize, cfg: &ProjectionConfig) -> Result<Self, ProjectionError> {
        Self::new(source_dim, cfg.dim, cfg.seed)
    }

    /// `R = I`, for tests and for disabling projection without branching.
    pub fn identity(dim: usize) -> Self {
        Self {
            source_dim: dim,
            target_dim: dim,
            seed: 0,
            kind: Kind::Identity,
        }
    }

    pub fn source_dim(&self) -> usize {
        self.source_dim
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Row-major `k × D` matrix; `None` for the identity override.
    pub fn matrix(&self) -> Option<&[T]> {
        match &self.kind {
            Kind::Identity => None,
            Kind::Gaussian(cell) => Some(cell.get_or_init(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let scale = 1.0 / (self.target_dim as f64).sqrt();
                (0..self.target_dim * self.source_dim)
                    .map(|_| {
                        let x: f64 = StandardNormal.sample(&mut rng);
                        T::of(x * scale)
                    })
                    .collect()
            })),
        }
    }

    /// `R v` for one source vector.
    pub fn project_vec(&self, v: &[T]) -> Result<Vec<T>, ProjectionError> {
        if v.len() != self.source_dim {
            return Err(ProjectionError::DimensionMismatch {
                expected: self.source_dim,
                found: v.len(),
            });
        }
        let mut out = vec![T::zero(); self.target_dim];
        self.project_into(v, &mut out);
        Ok(out)
    }

    /// `R v` into a caller buffer of length `k`; `v` must have length `D`.
    pub fn project_into(&self, v: &[T], out: &mut [T]) {
        match self.matrix() {
            None => out.copy_from_slice(v),
            Some(m) => {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = dot(&m[j * self.source_dim..(j + 1) * self.source_dim], v);
                }
            }
        }
    }

    pub fn project_record(&self, record: &SampleRecord<T>) -> Result<SampleRecord<T>, ProjectionError> {
        Ok(SampleRecord {
            latent: self.project_vec(&record.latent)?,
            ..record.clone()
        })
    }

    /// `W Rᵀ`, bias untouched.
    pub fn project_head(&self, head: &HeadSnapshot<T>) -> Result<HeadSnapshot<T>, ProjectionError> {
        if head.dim() != self.source_dim {
            return Err(ProjectionError::DimensionMismatch {
                expected: self.source_dim,
                found: head.dim(),
            });
        }
        let classes = head.classes();
        let mut weights = vec![T::zero(); classes * self.target_dim];
        for c in 0..classes {
            // (W Rᵀ)_c = R W_c
            self.project_into(
                head.row(c),
                &mut weights[c * self.target_dim..(c + 1) * self.target_dim],
            );
        }
        Ok(HeadSnapshot::new(
            weights,
            head.bias().map(<[T]>::to_vec),
            classes,
            self.target_dim,
            head.epoch,
            head.step,
        )?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn identity_leaves_record_and_head_unchanged() {
        let spec = ProjectionSpec::<f64>::identity(3);
        let r = SampleRecord::new(1, vec![1.0, -2.0, 0.5], vec![0.4, 0.6], 1);
        assert_eq!(spec.project_record(&r).unwrap(), r);
        let h = HeadSnapshot::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], Some(vec![0.1, 0.2]), 2, 3, 1, 2)
            .unwrap();
        assert_eq!(spec.project_head(&h).unwrap(), h);
    }

    #[test]
    fn same_seed_same_matrix() {
        let a = ProjectionSpec::<f64>::new(64, 16, 9).unwrap();
        let b = ProjectionSpec::<f64>::new(64, 16, 9).unwrap();
        let c = ProjectionSpec::<f64>::new(64, 16, 10).unwrap();
        assert_eq!(a.matrix().unwrap(), b.matrix().unwrap());
        assert_ne!(a.matrix().unwrap(), c.matrix().unwrap());
    }

    #[test]
    fn entry_variance_is_one_over_k() {
        let spec = ProjectionSpec::<f64>::new(1000, 100, 3).unwrap();
        let m = spec.matrix().unwrap();
        let var = m.iter().map(|x| x * x).sum::<f64>() / m.len() as f64;
        assert!((var * 100.0 - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn linearity() {
        let spec = ProjectionSpec::<f64>::new(50, 10, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z1: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z2: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let alpha = 2.5;
        let mix: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| alpha * a + b).collect();
        let lhs = spec.project_vec(&mix).unwrap();
        let p1 = spec.project_vec(&z1).unwrap();
        let p2 = spec.project_vec(&z2).unwrap();
        for i in 0..10 {
            assert!((lhs[i] - (alpha * p1[i] + p2[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(
            ProjectionSpec::<f64>::new(10, 20, 0),
            Err(ProjectionError::TargetExceedsSource { .. })
        ));
        assert!(matches!(
            ProjectionSpec::<f64>::new(10, 0, 0),
            Err(ProjectionError::ZeroTarget)
        ));
        let spec = ProjectionSpec::<f64>::new(10, 5, 0).unwrap();
        assert!(matches!(
            spec.project_vec(&[1.0; 9]),
            Err(ProjectionError::DimensionMismatch { .. })
        ));
        let h = HeadSnapshot::new(vec![1.0; 8], None, 2, 4, 0, 0).unwrap();
        assert!(spec.project_head(&h).is_err());
    }
}
