//! Base-session training and the frozen incremental procedure.
//!
//! Per batch: expand each sample into its `M` virtual variants, encode an
//! augmented query view with the query encoder and an independent key view
//! with the momentum encoder, evaluate the three losses against the queue,
//! step the query encoder and classifier, then update the key encoder by
//! momentum and enqueue the keys with their virtual labels.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bench::Sample;
use crate::encoder::{Arch, EncoderGrad, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::{
    loss_ce, loss_moti, loss_ssc, loss_total, BatchFeatures, ClassifierWeights, Hyperparams,
};
use crate::math::{l2_normalize, Mat};
use crate::prototypes::{
    build_finegrained, build_finegrained_bayes, ClassPrototypes, PrototypeBank, TauSqMode,
};
use crate::queue::FeatureQueue;
use crate::rng::{self, Stream};
use crate::transforms::{expand_label, Augmenter, TransformSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub sgd_momentum: f64,
    pub arch: Arch,
    pub hp: Hyperparams,
    /// `M`, including the identity.
    pub num_transforms: usize,
    pub queue_size: usize,
    /// Key-encoder momentum `m`.
    pub key_momentum: f64,
    pub noise_std: f64,
    pub scale_jitter: f64,
    pub seed: u64,
    /// Keep a copy of the query encoder after every step.
    #[serde(skip)]
    pub record_snapshots: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr_max: 0.1,
            sgd_momentum: 0.9,
            arch: Arch::default(),
            hp: Hyperparams::default(),
            num_transforms: 2,
            queue_size: 1024,
            key_momentum: 0.99,
            noise_std: 0.5,
            scale_jitter: 0.1,
            seed: 0,
            record_snapshots: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.hp.validate()?;
        let bad = |m: &str| Err(Error::ConfigInvalid(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr_max > 0.0) {
            return bad("lr_max must be > 0");
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return bad("sgd_momentum must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.key_momentum) {
            return bad("key_momentum must be in [0, 1]");
        }
        if self.num_transforms == 0 {
            return bad("num_transforms must be >= 1");
        }
        let push = self.batch_size * self.num_transforms;
        if self.queue_size == 0 || !self.queue_size.is_multiple_of(push) {
            return Err(Error::ConfigInvalid(format!(
                "queue_size {} must be a positive multiple of batch_size*num_transforms = {push}",
                self.queue_size
            )));
        }
        if !(self.noise_std >= 0.0) || !(self.scale_jitter >= 0.0) {
            return bad("augmentation parameters must be >= 0");
        }
        Ok(())
    }
}

/// `lr_max·(1 + cos(π·epoch/epochs))/2`
pub fn cosine_lr(epoch: usize, epochs: usize, lr_max: f64) -> f64 {
    lr_max * (1.0 + (PI * epoch as f64 / epochs as f64).cos()) / 2.0
}

/// Nesterov momentum in the form used by common deep-learning frameworks:
///
/// ```text
/// v ← μ·v + g
/// p ← p − lr·(g + μ·v)
/// ```
pub fn nesterov_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    mu: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::ShapeMismatch(format!(
            "params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = mu * *v + g;
        *p -= lr * (g + mu * *v);
    }
    Ok(())
}

/// Velocity buffers for the query encoder and classifier.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub encoder: EncoderParams,
    pub classifier: Mat,
}

impl OptimizerState {
    pub fn zeros(encoder: &EncoderParams, classifier: &ClassifierWeights) -> Self {
        Self {
            encoder: encoder.zeros_like(),
            classifier: Mat::zeros(classifier.w.rows(), classifier.w.cols()),
        }
    }

    pub fn step(
        &mut self,
        encoder: &mut EncoderParams,
        enc_grad: &EncoderGrad,
        classifier: &mut ClassifierWeights,
        cls_grad: &Mat,
        lr: f64,
        mu: f64,
    ) -> Result<()> {
        if !encoder.same_shape(enc_grad) || !encoder.same_shape(&self.encoder) {
            return Err(Error::ShapeMismatch(
                "encoder gradient or velocity shape".into(),
            ));
        }
        for ((p, g), v) in encoder
            .layers
            .iter_mut()
            .zip(&enc_grad.layers)
            .zip(self.encoder.layers.iter_mut())
        {
            nesterov_step(
                p.weight.as_mut_slice(),
                g.weight.as_slice(),
                v.weight.as_mut_slice(),
                lr,
                mu,
            )?;
            nesterov_step(&mut p.bias, &g.bias, &mut v.bias, lr, mu)?;
        }
        nesterov_step(
            classifier.w.as_mut_slice(),
            cls_grad.as_slice(),
            self.classifier.as_mut_slice(),
            lr,
            mu,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub ssc: f64,
    pub moti: f64,
    pub total: f64,
    pub skipped_moti_terms: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_ndjson(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub query: EncoderParams,
    pub key: EncoderParams,
    pub classifier: ClassifierWeights,
    pub log: TrainLog,
    /// Query encoder after each optimizer step, when requested.
    pub snapshots: Option<Vec<EncoderParams>>,
}

/// Random unit rows, one per virtual class.
pub fn init_classifier(classes: usize, dim: usize, seed: u64) -> Result<ClassifierWeights> {
    let mut r = rng::stream(seed, Stream::Classifier);
    let mut w = Mat::zeros(classes, dim);
    for c in 0..classes {
        let g: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let u = l2_normalize(&g)?;
        w.as_mut_slice()[c * dim..(c + 1) * dim].copy_from_slice(&u);
    }
    Ok(ClassifierWeights { w })
}

/// Loss values and gradients for one batch, before any parameter update.
#[derive(Debug, Clone)]
pub struct BatchStep {
    pub ce: f64,
    pub ssc: f64,
    pub moti: f64,
    pub total: f64,
    pub skipped: usize,
    pub encoder_grad: EncoderGrad,
    pub classifier_grad: Mat,
    /// Key features and virtual labels to enqueue.
    pub keys: Vec<Vec<f64>>,
    pub vlabels: Vec<usize>,
}

/// Forward and backward for one batch of real samples. The key encoder and
/// queue are read-only here; only query-side gradients are produced.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradients(
    query: &EncoderParams,
    key: &EncoderParams,
    classifier: &ClassifierWeights,
    queue: &FeatureQueue,
    transforms: &TransformSet,
    augmenter: &mut Augmenter,
    hp: &Hyperparams,
    batch: &[&Sample],
) -> Result<BatchStep> {
    let m_count = transforms.len();
    let n = batch.len() * m_count;
    let mut tapes = Vec::with_capacity(n);
    let mut feats = BatchFeatures {
        q: Vec::with_capacity(n),
        k_plus: Vec::with_capacity(n),
        vlabels: Vec::with_capacity(n),
    };
    for s in batch {
        for m in 0..m_count {
            let xm = transforms.apply(m, &s.x)?;
            let (xq, xk) = augmenter.views(&xm);
            let tape = query.forward(&xq)?;
            feats.q.push(tape.feature().to_vec());
            feats.k_plus.push(key.encode(&xk)?);
            feats.vlabels.push(expand_label(s.y as usize, m, m_count));
            tapes.push(tape);
        }
    }
    let snap = queue.snapshot();
    let ce = loss_ce(&feats, classifier, hp.tau)?;
    let ssc = loss_ssc(&feats, &snap, hp.tau_v)?;
    let moti = loss_moti(&feats, &snap)?;
    let total = loss_total(&ce, &ssc, &moti, hp)?;

    let mut encoder_grad = query.zeros_like();
    for (tape, g) in tapes.iter().zip(&total.grad_q) {
        query.backward_into(tape, g, &mut encoder_grad)?;
    }
    Ok(BatchStep {
        ce: ce.value,
        ssc: ssc.value,
        moti: moti.value,
        total: total.value,
        skipped: moti.skipped,
        encoder_grad,
        classifier_grad: total
            .grad_w
            .expect("classification loss yields a classifier gradient"),
        keys: feats.k_plus,
        vlabels: feats.vlabels,
    })
}

/// Train on the base session. `num_classes` is the number of real base
/// classes; labels must lie in `0..num_classes`.
pub fn train_base_session(
    cfg: &TrainConfig,
    base: &[Sample],
    num_classes: usize,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if base.is_empty() || num_classes == 0 {
        return Err(Error::ConfigInvalid("base session is empty".into()));
    }
    if base.len() < cfg.batch_size {
        return Err(Error::ConfigInvalid(format!(
            "base session has {} samples, fewer than one batch of {}",
            base.len(),
            cfg.batch_size
        )));
    }
    if let Some(s) = base.iter().find(|s| s.y as usize >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label: s.y as usize,
            classes: num_classes,
        });
    }
    let input_dim = cfg.arch.input_dim();
    if let Some(s) = base.iter().find(|s| s.x.len() != input_dim) {
        return Err(Error::DimMismatch {
            expected: input_dim,
            got: s.x.len(),
        });
    }

    let m_count = cfg.num_transforms;
    let transforms = TransformSet::new(m_count, input_dim, cfg.seed)?;
    let mut query = EncoderParams::init(&cfg.arch, cfg.seed)?;
    let mut key = query.clone();
    let mut classifier = init_classifier(num_classes * m_count, cfg.arch.output_dim(), cfg.seed)?;
    let mut opt = OptimizerState::zeros(&query, &classifier);
    let mut queue = FeatureQueue::new(cfg.queue_size, cfg.arch.output_dim())?;
    let mut augmenter = Augmenter::new(cfg.noise_std, cfg.scale_jitter, cfg.seed)?;
    let mut shuffle = rng::stream(cfg.seed, Stream::Shuffle);
    let mut snapshots = cfg.record_snapshots.then(Vec::new);

    let mut order: Vec<usize> = (0..base.len()).collect();
    let batches = base.len() / cfg.batch_size;
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max);
        order.shuffle(&mut shuffle);
        let mut acc = EpochRecord {
            epoch,
            lr,
            ce: 0.0,
            ssc: 0.0,
            moti: 0.0,
            total: 0.0,
            skipped_moti_terms: 0,
        };
        for b in 0..batches {
            let batch: Vec<&Sample> = order[b * cfg.batch_size..(b + 1) * cfg.batch_size]
                .iter()
                .map(|&i| &base[i])
                .collect();
            let step = batch_gradients(
                &query,
                &key,
                &classifier,
                &queue,
                &transforms,
                &mut augmenter,
                &cfg.hp,
                &batch,
            )?;
            if !step.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    ce: step.ce,
                    ssc: step.ssc,
                    moti: step.moti,
                });
            }
            opt.step(
                &mut query,
                &step.encoder_grad,
                &mut classifier,
                &step.classifier_grad,
                lr,
                cfg.sgd_momentum,
            )?;
            key.momentum_update(&query, cfg.key_momentum)?;
            queue.push(&step.keys, &step.vlabels)?;
            if let Some(s) = snapshots.as_mut() {
                s.push(query.clone());
            }
            acc.ce += step.ce;
            acc.ssc += step.ssc;
            acc.moti += step.moti;
            acc.total += step.total;
            acc.skipped_moti_terms += step.skipped;
        }
        let nb = batches as f64;
        acc.ce /= nb;
        acc.ssc /= nb;
        acc.moti /= nb;
        acc.total /= nb;
        log.epochs.push(acc);
    }

    Ok(TrainOutput {
        query,
        key,
        classifier,
        log,
        snapshots,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtoMode {
    Cea,
    Bayes,
}

/// How few-shot class prototypes are estimated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimator {
    Cea,
    Bayes { sigma_sq: f64, tau_sq: TauSqMode },
}

/// Extend the bank with each incremental session's prototypes. The encoder
/// is only read. `sessions` yields `(t, class_samples)` and must start right
/// after the bank's last session.
pub fn run_incremental_sessions<I>(
    encoder: &EncoderParams,
    transforms: &TransformSet,
    mut bank: PrototypeBank,
    sessions: I,
    estimator: Estimator,
) -> Result<PrototypeBank>
where
    I: IntoIterator<Item = (u32, Vec<(u32, Vec<Vec<f64>>)>)>,
{
    let base = bank.up_to(0);
    for (t, class_samples) in sessions {
        let expected = bank.last_session().map_or(0, |s| s + 1);
        if t != expected {
            return Err(Error::SessionOrderViolation { expected, got: t });
        }
        let protos: Vec<ClassPrototypes> = match estimator {
            Estimator::Cea => build_finegrained(encoder, transforms, &class_samples)?,
            Estimator::Bayes { sigma_sq, tau_sq } => build_finegrained_bayes(
                encoder,
                transforms,
                &class_samples,
                &base,
                sigma_sq,
                tau_sq,
            )?,
        };
        bank.append_session(t, protos)?;
    }
    Ok(bank)
}
