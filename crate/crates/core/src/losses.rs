//! Training objectives over a batch of virtual-class items.
//!
//! * classification: softmax over cosine logits against every virtual class;
//! * self-supervised contrast: InfoNCE of each query against its own key and
//!   the queue;
//! * momentum tightness: negative mean inner product with features of a
//!   different virtual class.
//!
//! Keys and queue entries are constants here. Only query features and the
//! classifier receive gradients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{axpy, dot, log_sum_exp, norm, Mat, NORM_EPS};
use crate::queue::QueueSnapshot;

/// Query/key features of the `B·M` items in a batch.
#[derive(Debug, Clone, Default)]
pub struct BatchFeatures {
    pub q: Vec<Vec<f64>>,
    pub k_plus: Vec<Vec<f64>>,
    pub vlabels: Vec<usize>,
}

impl BatchFeatures {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.q.first().map_or(0, |v| v.len())
    }

    fn check(&self) -> Result<()> {
        if self.q.len() != self.k_plus.len() || self.q.len() != self.vlabels.len() {
            return Err(Error::ShapeMismatch(format!(
                "batch with {} queries, {} keys, {} labels",
                self.q.len(),
                self.k_plus.len(),
                self.vlabels.len()
            )));
        }
        if self.q.is_empty() {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        let d = self.dim();
        for v in self.q.iter().chain(&self.k_plus) {
            if v.len() != d {
                return Err(Error::DimMismatch {
                    expected: d,
                    got: v.len(),
                });
            }
        }
        Ok(())
    }
}

/// Learnable virtual-class embeddings, one row per virtual class. Stored raw;
/// cosine similarity normalizes on use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierWeights {
    pub w: Mat,
}

impl ClassifierWeights {
    pub fn num_classes(&self) -> usize {
        self.w.rows()
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Classification temperature.
    pub tau: f64,
    /// Contrastive temperature.
    pub tau_v: f64,
    pub lambda_ssc: f64,
    pub lambda_moti: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            tau: 0.07,
            tau_v: 0.07,
            lambda_ssc: 0.1,
            lambda_moti: 2.5,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.tau_v > 0.0) {
            return Err(Error::ConfigInvalid("temperatures must be > 0".into()));
        }
        if !(self.lambda_ssc >= 0.0) || !(self.lambda_moti >= 0.0) {
            return Err(Error::ConfigInvalid("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub grad_q: Vec<Vec<f64>>,
    /// Only the classification loss touches the classifier.
    pub grad_w: Option<Mat>,
    /// Items that contributed nothing (empty different-class set).
    pub skipped: usize,
}

/// Mean cross-entropy over cosine logits `sim(q, w_j) / τ`.
pub fn loss_ce(batch: &BatchFeatures, weights: &ClassifierWeights, tau: f64) -> Result<LossReport> {
    batch.check()?;
    let classes = weights.num_classes();
    if batch.dim() != weights.dim() {
        return Err(Error::DimMismatch {
            expected: weights.dim(),
            got: batch.dim(),
        });
    }
    if let Some(&label) = batch.vlabels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let w_norms: Vec<f64> = (0..classes).map(|j| norm(weights.w.row(j))).collect();
    if let Some(&n) = w_norms.iter().find(|&&n| n <= NORM_EPS) {
        return Err(Error::ZeroNorm { norm: n });
    }
    let n = batch.len() as f64;
    let dim = batch.dim();

    struct Item {
        loss: f64,
        grad_q: Vec<f64>,
        /// dL/dcos for every class, already scaled by 1/(nτ).
        coef: Vec<f64>,
        cos: Vec<f64>,
        q_norm: f64,
    }

    let items: Vec<Item> = batch
        .q
        .par_iter()
        .zip(batch.vlabels.par_iter())
        .map(|(q, &y)| {
            let q_norm = norm(q);
            if q_norm <= NORM_EPS {
                return Err(Error::ZeroNorm { norm: q_norm });
            }
            let cos: Vec<f64> = (0..classes)
                .map(|j| dot(q, weights.w.row(j)) / (q_norm * w_norms[j]))
                .collect();
            let logits: Vec<f64> = cos.iter().map(|c| c / tau).collect();
            let lse = log_sum_exp(&logits);
            let loss = lse - logits[y];
            let coef: Vec<f64> = logits
                .iter()
                .enumerate()
                .map(|(j, l)| {
                    let p = (l - lse).exp();
                    (p - if j == y { 1.0 } else { 0.0 }) / (n * tau)
                })
                .collect();
            // d cos_j / dq = (ŵ_j − cos_j q̂) / ‖q‖
            let mut grad_q = vec![0.0; dim];
            let mut radial = 0.0;
            for j in 0..classes {
                axpy(
                    coef[j] / (w_norms[j] * q_norm),
                    weights.w.row(j),
                    &mut grad_q,
                );
                radial += coef[j] * cos[j];
            }
            axpy(-radial / (q_norm * q_norm), q, &mut grad_q);
            Ok(Item {
                loss,
                grad_q,
                coef,
                cos,
                q_norm,
            })
        })
        .collect::<Result<_>>()?;

    let mut grad_w = Mat::zeros(classes, dim);
    let mut value = 0.0;
    let mut grad_q = Vec::with_capacity(items.len());
    for (item, q) in items.into_iter().zip(&batch.q) {
        value += item.loss;
        let gw = grad_w.as_mut_slice();
        for j in 0..classes {
            // d cos_j / dw_j = (q̂ − cos_j ŵ_j) / ‖w_j‖
            let row = &mut gw[j * dim..(j + 1) * dim];
            let c = item.coef[j];
            axpy(c / (item.q_norm * w_norms[j]), q, row);
            axpy(
                -c * item.cos[j] / (w_norms[j] * w_norms[j]),
                weights.w.row(j),
                row,
            );
        }
        grad_q.push(item.grad_q);
    }
    Ok(LossReport {
        value: value / n,
        grad_q,
        grad_w: Some(grad_w),
        skipped: 0,
    })
}

/// InfoNCE against `{k⁺} ∪ queue` with logits `qᵀk / τ_v`.
pub fn loss_ssc(batch: &BatchFeatures, queue: &QueueSnapshot, tau_v: f64) -> Result<LossReport> {
    batch.check()?;
    let dim = batch.dim();
    if queue.count() > 0 && queue.dim != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            got: queue.dim,
        });
    }
    let n = batch.len() as f64;
    let per_item: Vec<(f64, Vec<f64>)> = batch
        .q
        .par_iter()
        .zip(batch.k_plus.par_iter())
        .map(|(q, kp)| {
            let mut logits = Vec::with_capacity(queue.count() + 1);
            logits.push(dot(q, kp) / tau_v);
            logits.extend(queue.iter().map(|(k, _)| dot(q, k) / tau_v));
            let lse = log_sum_exp(&logits);
            let loss = lse - logits[0];
            // dL/dq = (Σ p_j k_j − k⁺) / τ_v
            let mut g = vec![0.0; dim];
            axpy(((logits[0] - lse).exp() - 1.0) / (n * tau_v), kp, &mut g);
            for ((k, _), l) in queue.iter().zip(&logits[1..]) {
                axpy((l - lse).exp() / (n * tau_v), k, &mut g);
            }
            (loss, g)
        })
        .collect();
    let mut value = 0.0;
    let mut grad_q = Vec::with_capacity(per_item.len());
    for (l, g) in per_item {
        value += l;
        grad_q.push(g);
    }
    Ok(LossReport {
        value: value / n,
        grad_q,
        grad_w: None,
        skipped: 0,
    })
}

/// `−mean_{k′ ∈ F} qᵀk′` where `F` holds every batch key and queue entry
/// whose virtual label differs from the query's. Items with empty `F`
/// contribute zero and are counted in `skipped`.
pub fn loss_moti(batch: &BatchFeatures, queue: &QueueSnapshot) -> Result<LossReport> {
    batch.check()?;
    let dim = batch.dim();
    if queue.count() > 0 && queue.dim != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            got: queue.dim,
        });
    }
    let n = batch.len() as f64;
    let per_item: Vec<Option<(f64, Vec<f64>)>> = batch
        .q
        .par_iter()
        .zip(batch.vlabels.par_iter())
        .map(|(q, &y)| {
            let mut sum = vec![0.0; dim];
            let mut count = 0usize;
            for (k, &ky) in batch.k_plus.iter().zip(&batch.vlabels) {
                if ky != y {
                    axpy(1.0, k, &mut sum);
                    count += 1;
                }
            }
            for (k, ky) in queue.iter() {
                if ky != y {
                    axpy(1.0, k, &mut sum);
                    count += 1;
                }
            }
            if count == 0 {
                return None;
            }
            let c = count as f64;
            let loss = -dot(q, &sum) / c;
            let g = sum.iter().map(|s| -s / (c * n)).collect();
            Some((loss, g))
        })
        .collect();
    let mut value = 0.0;
    let mut skipped = 0;
    let mut grad_q = Vec::with_capacity(per_item.len());
    for item in per_item {
        match item {
            Some((l, g)) => {
                value += l;
                grad_q.push(g);
            }
            None => {
                skipped += 1;
                grad_q.push(vec![0.0; dim]);
            }
        }
    }
    Ok(LossReport {
        value: value / n,
        grad_q,
        grad_w: None,
        skipped,
    })
}

/// `ce + λ_ssc·ssc + λ_moti·moti`, gradients combined with the same weights.
pub fn loss_total(
    ce: &LossReport,
    ssc: &LossReport,
    moti: &LossReport,
    hp: &Hyperparams,
) -> Result<LossReport> {
    if ce.grad_q.len() != ssc.grad_q.len() || ce.grad_q.len() != moti.grad_q.len() {
        return Err(Error::ShapeMismatch(
            "loss reports cover different batches".into(),
        ));
    }
    let mut grad_q = Vec::with_capacity(ce.grad_q.len());
    for ((a, b), c) in ce.grad_q.iter().zip(&ssc.grad_q).zip(&moti.grad_q) {
        if a.len() != b.len() || a.len() != c.len() {
            return Err(Error::ShapeMismatch(
                "per-item gradient lengths differ".into(),
            ));
        }
        grad_q.push(
            a.iter()
                .zip(b)
                .zip(c)
                .map(|((x, y), z)| x + hp.lambda_ssc * y + hp.lambda_moti * z)
                .collect(),
        );
    }
    Ok(LossReport {
        value: ce.value + hp.lambda_ssc * ssc.value + hp.lambda_moti * moti.value,
        grad_q,
        grad_w: ce.grad_w.clone(),
        skipped: moti.skipped,
    })
}
