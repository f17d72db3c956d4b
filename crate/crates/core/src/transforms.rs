//! Virtual classes: fixed orthogonal transforms of the raw input, label-space
//! expansion, and the stochastic query/key views.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::math::Mat;
use crate::rng::{self, Rng, Stream};

/// `M` orthogonal maps on the input space. Slot 0 is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSet {
    mats: Vec<Mat>,
    seed: u64,
}

impl TransformSet {
    /// Slot 0 is `I`; the rest are the Q factor of a seeded Gaussian matrix,
    /// with columns sign-fixed so that `diag(R) > 0`.
    pub fn new(m: usize, dim: usize, seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(Error::ConfigInvalid("transform count must be >= 1".into()));
        }
        if dim < 2 {
            return Err(Error::ConfigInvalid("transform dim must be >= 2".into()));
        }
        let mut rng = rng::stream(seed, Stream::Transforms);
        let mut mats = Vec::with_capacity(m);
        mats.push(Mat::identity(dim));
        for _ in 1..m {
            let g = DMatrix::<f64>::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut rng));
            let qr = g.qr();
            let mut q = qr.q();
            let r = qr.r();
            for j in 0..dim {
                if r[(j, j)] < 0.0 {
                    q.column_mut(j).neg_mut();
                }
            }
            mats.push(Mat::from_fn(dim, dim, |i, j| q[(i, j)]));
        }
        Ok(Self { mats, seed })
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.mats[0].rows()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn matrix(&self, m: usize) -> Result<&Mat> {
        self.mats.get(m).ok_or(Error::IndexOutOfRange {
            index: m,
            len: self.mats.len(),
        })
    }

    pub fn apply(&self, m: usize, x: &[f64]) -> Result<Vec<f64>> {
        let mat = self.matrix(m)?;
        if x.len() != mat.cols() {
            return Err(Error::DimMismatch {
                expected: mat.cols(),
                got: x.len(),
            });
        }
        if m == 0 {
            return Ok(x.to_vec());
        }
        Ok(mat.matvec(x))
    }

    pub fn apply_batch(&self, m: usize, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        xs.iter().map(|x| self.apply(m, x)).collect()
    }
}

/// Virtual label `y·M + m` with 0-indexed `m`.
#[inline]
pub fn expand_label(y: usize, m: usize, num_transforms: usize) -> usize {
    debug_assert!(m < num_transforms);
    y * num_transforms + m
}

/// Inverse of [`expand_label`].
#[inline]
pub fn split_label(v: usize, num_transforms: usize) -> (usize, usize) {
    (v / num_transforms, v % num_transforms)
}

/// Query/key augmentation: `x·(1 + s) + n`, `s ~ U(−jitter, jitter)`,
/// `n ~ N(0, noise_std²·I)`.
#[derive(Debug, Clone)]
pub struct Augmenter {
    pub noise_std: f64,
    pub scale_jitter: f64,
    rng: Rng,
}

impl Augmenter {
    pub fn new(noise_std: f64, scale_jitter: f64, seed: u64) -> Result<Self> {
        Self::with_rng(noise_std, scale_jitter, rng::stream(seed, Stream::Augment))
    }

    pub fn with_rng(noise_std: f64, scale_jitter: f64, rng: Rng) -> Result<Self> {
        if !(noise_std >= 0.0) || !(scale_jitter >= 0.0) {
            return Err(Error::ConfigInvalid(
                "augmentation noise and jitter must be non-negative".into(),
            ));
        }
        Ok(Self {
            noise_std,
            scale_jitter,
            rng,
        })
    }

    pub fn augment(&mut self, x: &[f64]) -> Vec<f64> {
        let s = if self.scale_jitter > 0.0 {
            self.rng
                .random_range(-self.scale_jitter..=self.scale_jitter)
        } else {
            0.0
        };
        x.iter()
            .map(|&v| {
                let n = if self.noise_std > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    z * self.noise_std
                } else {
                    0.0
                };
                v * (1.0 + s) + n
            })
            .collect()
    }

    /// Independent query and key views of `x`.
    pub fn views(&mut self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let q = self.augment(x);
        let k = self.augment(x);
        (q, k)
    }
}
