//! Finite-difference verification of every analytic gradient: the three
//! losses (with respect to query features, and the classifier for the
//! classification loss) and the encoder backward pass.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::encoder::{Arch, EncoderParams};
use crate::error::Result;
use crate::losses::{loss_ce, loss_moti, loss_ssc, BatchFeatures, ClassifierWeights};
use crate::math::{dot, finite_diff_grad, l2_normalize, relative_error, Mat};
use crate::queue::QueueSnapshot;
use crate::rng::{self, Rng};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
const FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn unit(r: &mut Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(r)).collect();
    l2_normalize(&v).expect("gaussian draw is nonzero")
}

fn gaussian(r: &mut Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(r)).collect()
}

fn flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

fn with_q(b: &BatchFeatures, x: &[f64]) -> BatchFeatures {
    let mut out = b.clone();
    out.q = x.chunks(b.dim()).map(|c| c.to_vec()).collect();
    out
}

/// Batch of `B·M` items in virtual-label space `[0, classes·M)`.
fn random_batch(r: &mut Rng, b: usize, m: usize, classes: usize, d: usize) -> BatchFeatures {
    let mut out = BatchFeatures::default();
    for _ in 0..b {
        let y = r.random_range(0..classes);
        for t in 0..m {
            out.q.push(unit(r, d));
            out.k_plus.push(unit(r, d));
            out.vlabels.push(y * m + t);
        }
    }
    out
}

fn random_queue(r: &mut Rng, n: usize, labels: usize, d: usize) -> QueueSnapshot {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| unit(r, d)).collect();
    let ls: Vec<usize> = (0..n).map(|_| r.random_range(0..labels)).collect();
    QueueSnapshot::from_rows(d, &rows, &ls)
}

pub fn check_ce(instances: usize, seed: u64) -> Result<GradcheckReport> {
    let mut r = rng::stream_id(seed, 0xce);
    let (b, m, classes, d, tau) = (2, 2, 3, 4, 0.1);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let batch = random_batch(&mut r, b, m, classes, d);
        let w = ClassifierWeights {
            w: Mat::from_vec(classes * m, d, gaussian(&mut r, classes * m * d))?,
        };
        let rep = loss_ce(&batch, &w, tau)?;
        let num_q = finite_diff_grad(
            |x| loss_ce(&with_q(&batch, x), &w, tau).map_or(f64::NAN, |l| l.value),
            &flat(&batch.q),
            STEP,
        )?;
        worst = worst.max(relative_error(&flat(&rep.grad_q), &num_q, FLOOR));
        let num_w = finite_diff_grad(
            |x| {
                let ww = ClassifierWeights {
                    w: Mat::from_vec(classes * m, d, x.to_vec()).unwrap(),
                };
                loss_ce(&batch, &ww, tau).map_or(f64::NAN, |l| l.value)
            },
            w.w.as_slice(),
            STEP,
        )?;
        let gw = rep.grad_w.expect("classifier gradient");
        worst = worst.max(relative_error(gw.as_slice(), &num_w, FLOOR));
    }
    Ok(GradcheckReport {
        name: "loss_ce",
        instances,
        max_rel_err: worst,
    })
}

pub fn check_ssc(instances: usize, seed: u64) -> Result<GradcheckReport> {
    let mut r = rng::stream_id(seed, 0x55c);
    let (b, m, classes, d, tau_v) = (2, 2, 3, 4, 0.2);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let batch = random_batch(&mut r, b, m, classes, d);
        let queue = random_queue(&mut r, 8, classes * m, d);
        let rep = loss_ssc(&batch, &queue, tau_v)?;
        let num = finite_diff_grad(
            |x| loss_ssc(&with_q(&batch, x), &queue, tau_v).map_or(f64::NAN, |l| l.value),
            &flat(&batch.q),
            STEP,
        )?;
        worst = worst.max(relative_error(&flat(&rep.grad_q), &num, FLOOR));
    }
    Ok(GradcheckReport {
        name: "loss_ssc",
        instances,
        max_rel_err: worst,
    })
}

pub fn check_moti(instances: usize, seed: u64) -> Result<GradcheckReport> {
    let mut r = rng::stream_id(seed, 0x307);
    let (b, m, classes, d) = (2, 2, 3, 4);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let batch = random_batch(&mut r, b, m, classes, d);
        let queue = random_queue(&mut r, 8, classes * m, d);
        let rep = loss_moti(&batch, &queue)?;
        let num = finite_diff_grad(
            |x| loss_moti(&with_q(&batch, x), &queue).map_or(f64::NAN, |l| l.value),
            &flat(&batch.q),
            STEP,
        )?;
        worst = worst.max(relative_error(&flat(&rep.grad_q), &num, FLOOR));
    }
    Ok(GradcheckReport {
        name: "loss_moti",
        instances,
        max_rel_err: worst,
    })
}

/// Parameter gradient of `gᵀ·f(x; θ)` for random `(θ, x, g)`.
pub fn check_encoder(instances: usize, seed: u64) -> Result<GradcheckReport> {
    let mut r = rng::stream_id(seed, 0xe4c);
    let arch = Arch(vec![6, 8, 8, 4]);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let params = EncoderParams::init(&arch, seed.wrapping_add(i as u64))?;
        let x: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let tape = params.forward(&x)?;
        let analytic = params.backward(&tape, &g)?;
        let mut probe = params.clone();
        let numeric = finite_diff_grad(
            |theta| {
                probe.set_flat(theta).unwrap();
                probe.encode(&x).map_or(f64::NAN, |f| dot(&g, &f))
            },
            &params.to_flat(),
            STEP,
        )?;
        worst = worst.max(relative_error(&analytic.to_flat(), &numeric, FLOOR));
    }
    Ok(GradcheckReport {
        name: "encoder_backward",
        instances,
        max_rel_err: worst,
    })
}

/// All four suites.
pub fn run_all(instances: usize, seed: u64) -> Result<Vec<GradcheckReport>> {
    Ok(vec![
        check_ce(instances, seed)?,
        check_ssc(instances, seed)?,
        check_moti(instances, seed)?,
        check_encoder(instances, seed)?,
    ])
}
