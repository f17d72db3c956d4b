use motic::bench::{gen_synthetic_fscil, BenchConfig, Sample};
use motic::encoder::{Arch, EncoderParams};
use motic::losses::Hyperparams;
use motic::queue::FeatureQueue;
use motic::trainer::{batch_gradients, init_classifier, train_base_session, TrainConfig};
use motic::transforms::{Augmenter, TransformSet};

fn samples(n: usize, dim: usize, classes: u32) -> Vec<Sample> {
    (0..n)
        .map(|i| Sample {
            x: (0..dim).map(|j| ((i * 7 + j * 3) as f64).sin()).collect(),
            y: i as u32 % classes,
        })
        .collect()
}

#[test]
fn final_epoch_loss_is_below_the_first_on_most_seeds() {
    let bench = BenchConfig::default();
    let mut decreased = 0;
    for seed in 0..5 {
        let data = gen_synthetic_fscil(&bench, seed).unwrap();
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let log = train_base_session(&cfg, &data.base, bench.base_classes).unwrap().log;
        assert_eq!(log.epochs.len(), cfg.epochs);
        let (first, last) = (&log.epochs[0], log.epochs.last().unwrap());
        assert!(log.epochs.iter().all(|e| e.total.is_finite()));
        if last.total < first.total {
            decreased += 1;
        }
    }
    assert!(decreased >= 4, "loss decreased on {decreased} of 5 seeds");
}

#[test]
fn key_encoder_only_reaches_the_contrastive_terms() {
    let arch = Arch(vec![5, 7, 4]);
    let query = EncoderParams::init(&arch, 1).unwrap();
    let key = query.clone();
    let mut shifted = key.clone();
    shifted.for_each_mut(|v| *v += 0.05);
    let ts = TransformSet::new(2, 5, 1).unwrap();
    let classifier = init_classifier(6, 4, 1).unwrap();
    let mut queue = FeatureQueue::new(8, 4).unwrap();
    let data = samples(4, 5, 3);
    let batch: Vec<&Sample> = data.iter().collect();

    let run = |key: &EncoderParams, queue: &FeatureQueue, hp: &Hyperparams| {
        let mut aug = Augmenter::new(0.1, 0.05, 9).unwrap();
        batch_gradients(&query, key, &classifier, queue, &ts, &mut aug, hp, &batch).unwrap()
    };
    let ce_only = Hyperparams {
        lambda_ssc: 0.0,
        lambda_moti: 0.0,
        ..Hyperparams::default()
    };
    let a = run(&key, &queue, &ce_only);
    let b = run(&shifted, &queue, &ce_only);
    assert_eq!(a.encoder_grad, b.encoder_grad);
    assert_eq!(a.classifier_grad, b.classifier_grad);
    assert_ne!(a.keys, b.keys);

    queue.push(&a.keys, &a.vlabels).unwrap();
    let full = Hyperparams::default();
    let c = run(&key, &queue, &full);
    let d = run(&shifted, &queue, &full);
    assert_ne!(c.encoder_grad, d.encoder_grad);
    assert_eq!(c.classifier_grad, d.classifier_grad);
    assert_eq!(c.ce, d.ce);
    assert!(c.encoder_grad.same_shape(&query));
}

#[test]
fn one_transform_without_augmentation_is_the_plain_pipeline() {
    let arch = Arch(vec![5, 7, 4]);
    let query = EncoderParams::init(&arch, 2).unwrap();
    let ts = TransformSet::new(1, 5, 2).unwrap();
    let classifier = init_classifier(3, 4, 2).unwrap();
    let queue = FeatureQueue::new(4, 4).unwrap();
    let data = samples(4, 5, 3);
    let batch: Vec<&Sample> = data.iter().collect();
    let mut aug = Augmenter::new(0.0, 0.0, 0).unwrap();
    let step = batch_gradients(
        &query,
        &query,
        &classifier,
        &queue,
        &ts,
        &mut aug,
        &Hyperparams::default(),
        &batch,
    )
    .unwrap();
    let labels: Vec<usize> = data.iter().map(|s| s.y as usize).collect();
    assert_eq!(step.vlabels, labels);
    for (k, s) in step.keys.iter().zip(&data) {
        assert_eq!(k, &query.encode(&s.x).unwrap());
    }
    // Empty queue and own key as the only candidate: the contrastive term vanishes.
    assert_eq!(step.ssc, 0.0);
}
