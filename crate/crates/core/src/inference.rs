//! Nearest-class-mean classification over the prototype bank, single-view and
//! fused across all transform-aligned prototype subsets.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::math::cosine_sim;
use crate::prototypes::PrototypeBank;
use crate::transforms::TransformSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class_id: u32,
    pub session_id: u32,
    pub score: f64,
    /// Winning class's similarity under each transform (fused mode only).
    pub per_m_scores: Option<Vec<f64>>,
}

/// Argmax over `(session, class)` of the cosine similarity to the
/// untransformed prototype. Strictly-greater comparison over the bank's
/// lexicographic order breaks ties toward the lowest id.
pub fn ncm_classify(feature: &[f64], bank: &PrototypeBank) -> Result<Prediction> {
    let mut best: Option<Prediction> = None;
    for (t, c) in bank.class_ids() {
        let s = cosine_sim(feature, bank.get(t, c, 0).unwrap())?;
        if best.as_ref().is_none_or(|b| s > b.score) {
            best = Some(Prediction {
                class_id: c,
                session_id: t,
                score: s,
                per_m_scores: None,
            });
        }
    }
    best.ok_or(Error::EmptyBank)
}

/// Fused decision from precomputed per-transform features
/// `features[m] = f(T_m(x))`.
pub fn multigrain_classify_features(
    features: &[Vec<f64>],
    bank: &PrototypeBank,
) -> Result<Prediction> {
    if features.len() != bank.num_transforms() {
        return Err(Error::ShapeMismatch(format!(
            "{} transformed features for a bank with {} transforms",
            features.len(),
            bank.num_transforms()
        )));
    }
    let mut best: Option<Prediction> = None;
    for (t, c) in bank.class_ids() {
        let per_m = features
            .iter()
            .enumerate()
            .map(|(m, f)| {
                let w = bank.get(t, c, m as u32).ok_or(Error::MissingFineGrained {
                    session: t,
                    class: c,
                    transform: m as u32,
                })?;
                cosine_sim(f, w)
            })
            .collect::<Result<Vec<f64>>>()?;
        let score: f64 = per_m.iter().sum();
        if best.as_ref().is_none_or(|b| score > b.score) {
            best = Some(Prediction {
                class_id: c,
                session_id: t,
                score,
                per_m_scores: Some(per_m),
            });
        }
    }
    best.ok_or(Error::EmptyBank)
}

/// Encode every transform of `x` and classify by summed similarity.
pub fn multigrain_classify(
    x: &[f64],
    encoder: &EncoderParams,
    transforms: &TransformSet,
    bank: &PrototypeBank,
) -> Result<Prediction> {
    if transforms.len() != bank.num_transforms() {
        return Err(Error::ShapeMismatch(format!(
            "{} transforms for a bank with {}",
            transforms.len(),
            bank.num_transforms()
        )));
    }
    let features = (0..transforms.len())
        .map(|m| encoder.encode(&transforms.apply(m, x)?))
        .collect::<Result<Vec<_>>>()?;
    multigrain_classify_features(&features, bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Arch;
    use crate::prototypes::{build_finegrained, ClassPrototypes};

    fn cp(class: u32, protos: Vec<Vec<f64>>) -> ClassPrototypes {
        ClassPrototypes {
            class,
            per_transform: protos,
        }
    }

    #[test]
    fn exact_match_wins_with_score_one() {
        let mut bank = PrototypeBank::new(1, 3).unwrap();
        bank.append_session(
            0,
            vec![
                cp(0, vec![vec![1.0, 0.0, 0.0]]),
                cp(1, vec![vec![0.0, 1.0, 0.0]]),
                cp(2, vec![vec![0.0, 0.0, 1.0]]),
            ],
        )
        .unwrap();
        let p = ncm_classify(&[0.0, 5.0, 0.0], &bank).unwrap();
        assert_eq!((p.class_id, p.session_id), (1, 0));
        assert_eq!(p.score, 1.0);
    }

    #[test]
    fn ties_go_to_lowest_session_then_class() {
        let mut bank = PrototypeBank::new(1, 2).unwrap();
        bank.append_session(
            0,
            vec![cp(3, vec![vec![1.0, 1.0]]), cp(7, vec![vec![1.0, -1.0]])],
        )
        .unwrap();
        bank.append_session(1, vec![cp(1, vec![vec![1.0, 1.0]])])
            .unwrap();
        let p = ncm_classify(&[1.0, 0.0], &bank).unwrap();
        assert_eq!((p.session_id, p.class_id), (0, 3));
        let p = ncm_classify(&[0.0, 1.0], &bank).unwrap();
        assert_eq!((p.session_id, p.class_id), (0, 3));

        let empty = PrototypeBank::new(1, 2).unwrap();
        assert!(matches!(
            ncm_classify(&[1.0, 0.0], &empty),
            Err(Error::EmptyBank)
        ));
    }

    #[test]
    fn single_transform_fusion_equals_ncm() {
        let enc = EncoderParams::init(&Arch(vec![4, 8, 3]), 2).unwrap();
        let ts = TransformSet::new(1, 4, 2).unwrap();
        let classes: Vec<(u32, Vec<Vec<f64>>)> = (0..5)
            .map(|c| (c, vec![vec![c as f64, 1.0, -(c as f64) * 0.3, 0.5]]))
            .collect();
        let mut bank = PrototypeBank::new(1, 3).unwrap();
        bank.append_session(0, build_finegrained(&enc, &ts, &classes).unwrap())
            .unwrap();
        for i in 0..20 {
            let x = vec![i as f64 * 0.3 - 2.0, 0.7, (i as f64).sin(), 1.0];
            let a = ncm_classify(&enc.encode(&x).unwrap(), &bank).unwrap();
            let b = multigrain_classify(&x, &enc, &ts, &bank).unwrap();
            assert_eq!((a.class_id, a.session_id), (b.class_id, b.session_id));
        }
    }

    #[test]
    fn matching_class_scores_m() {
        let enc = EncoderParams::init(&Arch(vec![4, 8, 3]), 3).unwrap();
        let ts = TransformSet::new(3, 4, 3).unwrap();
        let x = vec![0.2, -0.4, 1.0, 0.6];
        let classes = vec![
            (0, vec![vec![1.0, 0.0, 0.0, 0.0]]),
            (1, vec![x.clone()]),
            (2, vec![vec![0.0, 0.0, 0.0, 1.0]]),
        ];
        let mut bank = PrototypeBank::new(3, 3).unwrap();
        bank.append_session(0, build_finegrained(&enc, &ts, &classes).unwrap())
            .unwrap();
        let p = multigrain_classify(&x, &enc, &ts, &bank).unwrap();
        assert_eq!(p.class_id, 1);
        assert!((p.score - 3.0).abs() < 1e-12);
        assert_eq!(p.per_m_scores.as_ref().unwrap().len(), 3);
    }

    #[test]
    fn missing_fine_grained_entry_is_reported() {
        let mut bank = PrototypeBank::new(1, 2).unwrap();
        bank.append_session(0, vec![cp(0, vec![vec![1.0, 0.0]])])
            .unwrap();
        let err = multigrain_classify_features(&[vec![1.0, 0.0], vec![0.0, 1.0]], &bank);
        assert!(err.is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vecs(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n)
        }

        fn bank_of(protos: &[Vec<f64>], m: usize, order: &[usize]) -> PrototypeBank {
            let mut bank = PrototypeBank::new(m, 3).unwrap();
            let classes = order
                .iter()
                .map(|&c| cp(c as u32, protos[c * m..(c + 1) * m].to_vec()))
                .collect();
            bank.append_session(0, classes).unwrap();
            bank
        }

        proptest! {
            #[test]
            fn ncm_argmax_is_scale_invariant(protos in vecs(5, 3), f in prop::collection::vec(-1.0f64..1.0, 3), alpha in 1e-3f64..1e3) {
                prop_assume!(crate::math::norm(&f) > 1e-3);
                prop_assume!(protos.iter().all(|p| crate::math::norm(p) > 1e-3));
                let bank = bank_of(&protos, 1, &[0, 1, 2, 3, 4]);
                let scaled: Vec<f64> = f.iter().map(|v| v * alpha).collect();
                let a = ncm_classify(&f, &bank).unwrap();
                let b = ncm_classify(&scaled, &bank).unwrap();
                // Rescaling can only move the score by rounding.
                prop_assert!(a.class_id == b.class_id || (a.score - b.score).abs() < 1e-12);
            }

            #[test]
            fn insertion_order_within_a_session_is_irrelevant(protos in vecs(8, 3), feats in vecs(2, 3)) {
                prop_assume!(protos.iter().chain(&feats).all(|p| crate::math::norm(p) > 1e-3));
                let a = bank_of(&protos, 2, &[0, 1, 2, 3]);
                let b = bank_of(&protos, 2, &[3, 1, 0, 2]);
                prop_assert_eq!(ncm_classify(&feats[0], &a).unwrap(), ncm_classify(&feats[0], &b).unwrap());
                prop_assert_eq!(
                    multigrain_classify_features(&feats, &a).unwrap(),
                    multigrain_classify_features(&feats, &b).unwrap()
                );
            }

            #[test]
            fn winner_of_every_view_wins_the_fusion(protos in vecs(8, 3), feats in vecs(2, 3)) {
                prop_assume!(protos.iter().chain(&feats).all(|p| crate::math::norm(p) > 1e-3));
                let bank = bank_of(&protos, 2, &[0, 1, 2, 3]);
                let per_view: Vec<u32> = (0..2)
                    .map(|m| {
                        let mut view = PrototypeBank::new(1, 3).unwrap();
                        let classes = (0..4).map(|c| cp(c, vec![protos[c as usize * 2 + m].clone()])).collect();
                        view.append_session(0, classes).unwrap();
                        ncm_classify(&feats[m], &view).unwrap().class_id
                    })
                    .collect();
                if per_view[0] == per_view[1] {
                    prop_assert_eq!(multigrain_classify_features(&feats, &bank).unwrap().class_id, per_view[0]);
                }
            }
        }
    }
}
