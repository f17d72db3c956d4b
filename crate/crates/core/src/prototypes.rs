//! Class prototypes: the plain class-mean estimator, the Gaussian-prior
//! posterior estimator, and the per-transform prototype bank that serves as
//! the expanding classifier.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::math::{axpy, cosine_sim};
use crate::transforms::TransformSet;

const BANK_MAGIC: &[u8; 8] = b"MOTICBNK";
const BANK_VERSION: u32 = 1;

/// Mean of the given features. Not re-normalized.
pub fn cea_prototype(features: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = features.first().ok_or(Error::EmptyClass)?;
    let mut sum = vec![0.0; first.len()];
    for f in features {
        if f.len() != sum.len() {
            return Err(Error::DimMismatch {
                expected: sum.len(),
                got: f.len(),
            });
        }
        axpy(1.0, f, &mut sum);
    }
    let k = features.len() as f64;
    Ok(sum.into_iter().map(|s| s / k).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesianPrior {
    pub prior_mean: Vec<f64>,
    /// Prior variance of the class mean around `prior_mean`.
    pub tau_sq: f64,
    /// Per-dimension feature noise variance.
    pub sigma_sq: f64,
}

impl BayesianPrior {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_sq > 0.0) || !(self.sigma_sq > 0.0) {
            return Err(Error::ConfigInvalid(format!(
                "prior variances must be > 0 (tau_sq={}, sigma_sq={})",
                self.tau_sq, self.sigma_sq
            )));
        }
        Ok(())
    }
}

/// Posterior mean `(Σf/σ² + μ′/τ²) / (K/σ² + 1/τ²)`; the prior mean when the
/// support is empty.
pub fn bayes_prototype(support: &[Vec<f64>], prior: &BayesianPrior) -> Result<Vec<f64>> {
    prior.validate()?;
    let dim = prior.prior_mean.len();
    let mut sum = vec![0.0; dim];
    for f in support {
        if f.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: f.len(),
            });
        }
        axpy(1.0, f, &mut sum);
    }
    let precision = support.len() as f64 / prior.sigma_sq + 1.0 / prior.tau_sq;
    Ok(sum
        .iter()
        .zip(&prior.prior_mean)
        .map(|(s, mu)| (s / prior.sigma_sq + mu / prior.tau_sq) / precision)
        .collect())
}

/// `(K/σ² + 1/τ²)⁻¹`
pub fn bayes_posterior_variance(k: usize, sigma_sq: f64, tau_sq: f64) -> f64 {
    1.0 / (k as f64 / sigma_sq + 1.0 / tau_sq)
}

/// Average over classes and dimensions of the within-class (population)
/// feature variance.
pub fn feature_noise_variance(classes: &[Vec<Vec<f64>>]) -> Result<f64> {
    let mut total = 0.0;
    let mut terms = 0usize;
    for feats in classes {
        let mean = cea_prototype(feats)?;
        let n = feats.len() as f64;
        for (d, mu) in mean.iter().enumerate() {
            let var = feats.iter().map(|f| (f[d] - mu).powi(2)).sum::<f64>() / n;
            total += var;
            terms += 1;
        }
    }
    if terms == 0 {
        return Err(Error::EmptyClass);
    }
    Ok(total / terms as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TauSqMode {
    Fixed(f64),
    /// `τ² = σ²·(1 − s)/s` from the similarity `s` of the chosen prior.
    Adaptive,
}

/// Smallest and largest prior variance produced by the adaptive rule.
const TAU_SQ_MIN: f64 = 1e-12;
const TAU_SQ_MAX: f64 = 1e12;

pub fn adaptive_tau_sq(sigma_sq: f64, similarity: f64) -> f64 {
    if similarity <= 0.0 {
        return TAU_SQ_MAX;
    }
    (sigma_sq * (1.0 - similarity) / similarity).clamp(TAU_SQ_MIN, TAU_SQ_MAX)
}

/// The prior picked for a support set, plus which base class it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedPrior {
    pub prior: BayesianPrior,
    pub session: u32,
    pub class: u32,
    pub similarity: f64,
}

/// Prior centred on the untransformed base prototype most cosine-similar to
/// the support mean. Ties go to the lowest `(session, class)`.
pub fn select_prior(
    support: &[Vec<f64>],
    base_bank: &PrototypeBank,
    sigma_sq: f64,
    mode: TauSqMode,
) -> Result<SelectedPrior> {
    let mean = cea_prototype(support)?;
    let mut best: Option<(f64, u32, u32)> = None;
    for (t, c) in base_bank.class_ids() {
        let p = base_bank.get(t, c, 0).ok_or(Error::EmptyBank)?;
        let s = cosine_sim(&mean, p)?;
        if best.is_none_or(|(bs, _, _)| s > bs) {
            best = Some((s, t, c));
        }
    }
    let (s, t, c) = best.ok_or(Error::EmptyBank)?;
    let tau_sq = match mode {
        TauSqMode::Fixed(v) => v,
        TauSqMode::Adaptive => adaptive_tau_sq(sigma_sq, s),
    };
    let prior = BayesianPrior {
        prior_mean: base_bank.get(t, c, 0).unwrap().clone(),
        tau_sq,
        sigma_sq,
    };
    prior.validate()?;
    Ok(SelectedPrior {
        prior,
        session: t,
        class: c,
        similarity: s,
    })
}

/// Bank key, ordered lexicographically as `(session, class, transform)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProtoKey {
    pub session: u32,
    pub class: u32,
    pub transform: u32,
}

/// All `M` prototypes for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototypes {
    pub class: u32,
    pub per_transform: Vec<Vec<f64>>,
}

/// The expanding classifier: `M` prototypes per class per session.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    num_transforms: usize,
    dim: usize,
    entries: BTreeMap<ProtoKey, Vec<f64>>,
    /// class id → owning session
    class_session: BTreeMap<u32, u32>,
    last_session: Option<u32>,
}

impl PrototypeBank {
    pub fn new(num_transforms: usize, dim: usize) -> Result<Self> {
        if num_transforms == 0 || dim == 0 {
            return Err(Error::ConfigInvalid(
                "bank needs at least one transform and dim >= 1".into(),
            ));
        }
        Ok(Self {
            num_transforms,
            dim,
            entries: BTreeMap::new(),
            class_session: BTreeMap::new(),
            last_session: None,
        })
    }

    pub fn num_transforms(&self) -> usize {
        self.num_transforms
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_session.len()
    }

    pub fn last_session(&self) -> Option<u32> {
        self.last_session
    }

    pub fn get(&self, session: u32, class: u32, transform: u32) -> Option<&Vec<f64>> {
        self.entries.get(&ProtoKey {
            session,
            class,
            transform,
        })
    }

    pub fn session_of(&self, class: u32) -> Option<u32> {
        self.class_session.get(&class).copied()
    }

    /// `(session, class)` pairs in lexicographic order.
    pub fn class_ids(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.entries
            .keys()
            .filter(|k| k.transform == 0)
            .map(|k| (k.session, k.class))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&ProtoKey, &Vec<f64>)> {
        self.entries.iter()
    }

    /// Restrict to sessions `<= session`.
    pub fn up_to(&self, session: u32) -> PrototypeBank {
        let mut out = PrototypeBank {
            num_transforms: self.num_transforms,
            dim: self.dim,
            entries: BTreeMap::new(),
            class_session: BTreeMap::new(),
            last_session: None,
        };
        for (k, v) in self.entries.range(
            ..ProtoKey {
                session: session.saturating_add(1),
                class: 0,
                transform: 0,
            },
        ) {
            if k.session > session {
                break;
            }
            out.entries.insert(*k, v.clone());
            out.class_session.insert(k.class, k.session);
            out.last_session = Some(k.session);
        }
        out
    }

    /// Append a whole session. Sessions must arrive in increasing order and
    /// class ids must be new.
    pub fn append_session(&mut self, session: u32, classes: Vec<ClassPrototypes>) -> Result<()> {
        if let Some(last) = self.last_session {
            if session <= last {
                return Err(Error::SessionOrderViolation {
                    expected: last + 1,
                    got: session,
                });
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for cp in &classes {
            if self.class_session.contains_key(&cp.class) || !seen.insert(cp.class) {
                return Err(Error::ConfigInvalid(format!(
                    "class {} already registered",
                    cp.class
                )));
            }
            if cp.per_transform.len() != self.num_transforms {
                return Err(Error::ShapeMismatch(format!(
                    "class {} has {} prototypes, bank expects {}",
                    cp.class,
                    cp.per_transform.len(),
                    self.num_transforms
                )));
            }
            for p in &cp.per_transform {
                if p.len() != self.dim {
                    return Err(Error::DimMismatch {
                        expected: self.dim,
                        got: p.len(),
                    });
                }
                if p.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("prototype of class {}", cp.class)));
                }
            }
        }
        for cp in classes {
            self.class_session.insert(cp.class, session);
            for (m, p) in cp.per_transform.into_iter().enumerate() {
                self.entries.insert(
                    ProtoKey {
                        session,
                        class: cp.class,
                        transform: m as u32,
                    },
                    p,
                );
            }
        }
        self.last_session = Some(session);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(BANK_MAGIC);
        w.u32(BANK_VERSION);
        w.u32(self.num_transforms as u32);
        w.u32(self.dim as u32);
        w.u64(self.entries.len() as u64);
        for (k, v) in &self.entries {
            w.u32(k.session);
            w.u32(k.class);
            w.u32(k.transform);
            w.u32(v.len() as u32);
            w.f64s(v);
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data);
        r.expect(BANK_MAGIC)?;
        let version = r.u32()?;
        if version != BANK_VERSION {
            return Err(Error::Decode(format!("unsupported bank version {version}")));
        }
        let m = r.u32()? as usize;
        let dim = r.u32()? as usize;
        if m == 0 || dim == 0 {
            return Err(Error::Decode("zero transform count or dim".into()));
        }
        let n = r.u64()?;
        // each entry needs at least 16 header bytes plus its payload
        let per_entry = 16u64 + 8 * dim as u64;
        if n.saturating_mul(per_entry) != r.remaining() as u64 {
            return Err(Error::Decode(
                "entry count does not match payload size".into(),
            ));
        }
        let mut sessions: BTreeMap<u32, BTreeMap<u32, Vec<Option<Vec<f64>>>>> = BTreeMap::new();
        for _ in 0..n {
            let t = r.u32()?;
            let c = r.u32()?;
            let tm = r.u32()? as usize;
            let d = r.u32()? as usize;
            if d != dim {
                return Err(Error::Decode(format!("entry dim {d}, header dim {dim}")));
            }
            if tm >= m {
                return Err(Error::Decode(format!("transform index {tm} >= {m}")));
            }
            let v = r.f64s(d)?;
            let slots = sessions
                .entry(t)
                .or_default()
                .entry(c)
                .or_insert_with(|| vec![None; m]);
            if slots[tm].replace(v).is_some() {
                return Err(Error::Decode("duplicate entry".into()));
            }
        }
        r.finish()?;
        let mut bank = PrototypeBank::new(m, dim)?;
        for (t, classes) in sessions {
            let mut protos = Vec::with_capacity(classes.len());
            for (c, slots) in classes {
                let per_transform = slots
                    .into_iter()
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| Error::Decode(format!("class {c} lacks a transform slot")))?;
                protos.push(ClassPrototypes {
                    class: c,
                    per_transform,
                });
            }
            bank.append_session(t, protos)
                .map_err(|e| Error::Decode(e.to_string()))?;
        }
        Ok(bank)
    }
}

/// Encoded features of every sample of one class under each transform.
pub fn encode_class(
    encoder: &EncoderParams,
    transforms: &TransformSet,
    samples: &[Vec<f64>],
) -> Result<Vec<Vec<Vec<f64>>>> {
    if samples.is_empty() {
        return Err(Error::EmptyClass);
    }
    (0..transforms.len())
        .map(|m| {
            samples
                .iter()
                .map(|x| encoder.encode(&transforms.apply(m, x)?))
                .collect()
        })
        .collect()
}

/// Class-mean prototypes for every class under every transform. No
/// stochastic augmentation is applied.
pub fn build_finegrained(
    encoder: &EncoderParams,
    transforms: &TransformSet,
    class_samples: &[(u32, Vec<Vec<f64>>)],
) -> Result<Vec<ClassPrototypes>> {
    class_samples
        .iter()
        .map(|(c, xs)| {
            let per_transform = encode_class(encoder, transforms, xs)?
                .iter()
                .map(|feats| cea_prototype(feats))
                .collect::<Result<_>>()?;
            Ok(ClassPrototypes {
                class: *c,
                per_transform,
            })
        })
        .collect()
}

/// Posterior-mean prototypes for few-shot classes. The prior class is chosen
/// once from the untransformed support; transform `m` then uses that class's
/// `m`-th base prototype as its prior mean.
pub fn build_finegrained_bayes(
    encoder: &EncoderParams,
    transforms: &TransformSet,
    class_samples: &[(u32, Vec<Vec<f64>>)],
    base_bank: &PrototypeBank,
    sigma_sq: f64,
    mode: TauSqMode,
) -> Result<Vec<ClassPrototypes>> {
    class_samples
        .iter()
        .map(|(c, xs)| {
            let feats = encode_class(encoder, transforms, xs)?;
            let sel = select_prior(&feats[0], base_bank, sigma_sq, mode)?;
            let per_transform = feats
                .iter()
                .enumerate()
                .map(|(m, f)| {
                    let prior_mean = base_bank
                        .get(sel.session, sel.class, m as u32)
                        .ok_or(Error::MissingFineGrained {
                            session: sel.session,
                            class: sel.class,
                            transform: m as u32,
                        })?
                        .clone();
                    bayes_prototype(
                        f,
                        &BayesianPrior {
                            prior_mean,
                            ..sel.prior.clone()
                        },
                    )
                })
                .collect::<Result<_>>()?;
            Ok(ClassPrototypes {
                class: *c,
                per_transform,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Arch;
    use crate::rng;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn one(class: u32, protos: Vec<Vec<f64>>) -> ClassPrototypes {
        ClassPrototypes {
            class,
            per_transform: protos,
        }
    }

    #[test]
    fn cea_examples() {
        assert_eq!(cea_prototype(&[vec![0.3, -0.2]]).unwrap(), vec![0.3, -0.2]);
        assert_eq!(
            cea_prototype(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            vec![0.5, 0.5]
        );
        assert!(matches!(cea_prototype(&[]), Err(Error::EmptyClass)));
    }

    #[test]
    fn cea_variance_shrinks_with_k() {
        let mut r = rng::stream_id(10, 0);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let (k, trials) = (5, 4000);
        let mut acc = 0.0;
        for _ in 0..trials {
            let s: Vec<Vec<f64>> = (0..k).map(|_| vec![noise.sample(&mut r)]).collect();
            acc += cea_prototype(&s).unwrap()[0].powi(2);
        }
        let var = acc / trials as f64;
        assert!((var - 0.2).abs() / 0.2 < 0.1, "var {var}");
    }

    #[test]
    fn bayes_examples() {
        let prior = BayesianPrior {
            prior_mean: vec![0.4, -0.1],
            tau_sq: 0.5,
            sigma_sq: 1.0,
        };
        assert_eq!(bayes_prototype(&[], &prior).unwrap(), prior.prior_mean);

        let support: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 1.0 - i as f64]).collect();
        let flat = BayesianPrior {
            tau_sq: 1e12,
            ..prior.clone()
        };
        let b = bayes_prototype(&support, &flat).unwrap();
        let c = cea_prototype(&support).unwrap();
        for (x, y) in b.iter().zip(&c) {
            assert!((x - y).abs() < 1e-6);
        }

        let zero_prior = BayesianPrior {
            prior_mean: vec![0.0, 0.0],
            tau_sq: 0.5,
            sigma_sq: 1.0,
        };
        let b = bayes_prototype(&support, &zero_prior).unwrap();
        assert!((b[0] - 10.0 / 7.0).abs() < 1e-15);
        assert!((b[1] - (-5.0) / 7.0).abs() < 1e-15);

        let bad = BayesianPrior {
            tau_sq: 0.0,
            ..prior
        };
        assert!(bayes_prototype(&support, &bad).is_err());
    }

    #[test]
    fn posterior_variance_examples() {
        assert_eq!(bayes_posterior_variance(5, 1.0, 0.5), 1.0 / 7.0);
        assert!(bayes_posterior_variance(5, 1.0, 0.5) < 0.2);
        assert!((bayes_posterior_variance(5, 1.0, 1e15) - 0.2).abs() < 1e-12);
        assert_eq!(bayes_posterior_variance(0, 1.0, 0.3), 0.3);
    }

    proptest! {
        #[test]
        fn posterior_dominates_mle(k in 1usize..50, sigma_sq in 0.01f64..10.0, tau_sq in 0.001f64..1e4) {
            prop_assert!(bayes_posterior_variance(k, sigma_sq, tau_sq) < sigma_sq / k as f64);
        }

        #[test]
        fn consistent_support_and_prior_is_fixed_point(
            v in prop::collection::vec(-3.0f64..3.0, 1..6),
            k in 0usize..8,
            sigma_sq in 0.01f64..10.0,
            tau_sq in 0.01f64..10.0,
        ) {
            let support = vec![v.clone(); k];
            let prior = BayesianPrior { prior_mean: v.clone(), tau_sq, sigma_sq };
            let b = bayes_prototype(&support, &prior).unwrap();
            for (x, y) in b.iter().zip(&v) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    fn base_bank() -> PrototypeBank {
        let mut b = PrototypeBank::new(2, 2).unwrap();
        b.append_session(
            0,
            vec![
                one(0, vec![vec![1.0, 0.0], vec![-1.0, 0.0]]),
                one(1, vec![vec![0.0, 1.0], vec![0.0, -1.0]]),
                one(
                    2,
                    vec![vec![0.9, 0.9f64.mul_add(-0.9, 1.0).sqrt()], vec![1.0, 1.0]],
                ),
            ],
        )
        .unwrap();
        b
    }

    #[test]
    fn prior_selection() {
        let bank = base_bank();
        let s = select_prior(&[vec![0.0, 2.0]], &bank, 1.0, TauSqMode::Fixed(0.3)).unwrap();
        assert_eq!((s.session, s.class), (0, 1));
        assert!((s.similarity - 1.0).abs() < 1e-12);
        assert_eq!(s.prior.tau_sq, 0.3);

        // exact match with class 2 beats class 0 at 0.9
        let q = vec![0.9, 0.9f64.mul_add(-0.9, 1.0).sqrt()];
        let s = select_prior(&[q], &bank, 1.0, TauSqMode::Adaptive).unwrap();
        assert_eq!(s.class, 2);

        assert_eq!(adaptive_tau_sq(1.0, 0.5), 1.0);
        assert_eq!(adaptive_tau_sq(1.0, -0.2), TAU_SQ_MAX);
        let empty = PrototypeBank::new(2, 2).unwrap();
        assert!(matches!(
            select_prior(&[vec![1.0, 0.0]], &empty, 1.0, TauSqMode::Adaptive),
            Err(Error::EmptyBank)
        ));
    }

    #[test]
    fn prior_selection_at_two_similarities() {
        let mut bank = PrototypeBank::new(1, 2).unwrap();
        let at = |s: f64| vec![s, (1.0 - s * s).sqrt()];
        bank.append_session(0, vec![one(4, vec![at(0.2)]), one(9, vec![at(0.9)])])
            .unwrap();
        let sel = select_prior(&[vec![1.0, 0.0]], &bank, 1.0, TauSqMode::Adaptive).unwrap();
        assert_eq!(sel.class, 9);
        assert!((sel.similarity - 0.9).abs() < 1e-12);
    }

    #[test]
    fn bank_rules() {
        let mut bank = base_bank();
        assert_eq!(bank.len(), 6);
        assert!(matches!(
            bank.append_session(0, vec![one(7, vec![vec![1.0, 0.0]; 2])]),
            Err(Error::SessionOrderViolation { .. })
        ));
        assert!(bank
            .append_session(1, vec![one(1, vec![vec![1.0, 0.0]; 2])])
            .is_err());
        assert!(bank
            .append_session(1, vec![one(5, vec![vec![1.0, 0.0]; 1])])
            .is_err());
        let before = bank.clone();
        bank.append_session(1, vec![one(5, vec![vec![1.0, 0.0]; 2])])
            .unwrap();
        for (k, v) in before.entries() {
            assert_eq!(bank.get(k.session, k.class, k.transform), Some(v));
        }
        assert_eq!(bank.up_to(0), before);
        assert_eq!(bank.session_of(5), Some(1));
    }

    #[test]
    fn bank_bytes_round_trip_and_reject_garbage() {
        let mut bank = base_bank();
        bank.append_session(
            3,
            vec![one(8, vec![vec![0.25, -1e-300], vec![f64::MAX, 0.0]])],
        )
        .unwrap();
        let bytes = bank.to_bytes();
        assert_eq!(PrototypeBank::from_bytes(&bytes).unwrap(), bank);
        assert!(PrototypeBank::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(PrototypeBank::from_bytes(&bad).is_err());
        assert!(PrototypeBank::from_bytes(&[]).is_err());
    }

    #[test]
    fn finegrained_cardinality_and_identity() {
        let enc = EncoderParams::init(&Arch(vec![4, 6, 3]), 1).unwrap();
        let ts = TransformSet::new(2, 4, 1).unwrap();
        let x = vec![0.5, -1.0, 0.3, 0.8];
        let protos = build_finegrained(&enc, &ts, &[(0, vec![x.clone(); 5])]).unwrap();
        assert_eq!(protos.len(), 1);
        assert_eq!(protos[0].per_transform.len(), 2);
        let f0 = enc.encode(&x).unwrap();
        for (a, b) in protos[0].per_transform[0].iter().zip(&f0) {
            assert!((a - b).abs() < 1e-15);
        }
        let mut bank = PrototypeBank::new(2, 3).unwrap();
        let classes: Vec<(u32, Vec<Vec<f64>>)> = (0..4)
            .map(|c| (c, vec![vec![c as f64 + 1.0, 0.2, -0.1, 0.4]]))
            .collect();
        bank.append_session(0, build_finegrained(&enc, &ts, &classes).unwrap())
            .unwrap();
        assert_eq!(bank.len(), 8);
        assert!(build_finegrained(&enc, &ts, &[(0, vec![])]).is_err());
    }
}
