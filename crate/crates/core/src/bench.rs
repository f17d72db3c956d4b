//! Synthetic few-shot class-incremental benchmarks.
//!
//! Class means are placed on a sphere of radius `class_spread·√dim` with a
//! minimum pairwise angle enforced by rejection; samples are the mean plus
//! isotropic Gaussian noise. Session 0 holds many samples per base class;
//! sessions `1..=T` each add `N` new classes with `K` samples. The test split
//! of session `t` covers every class seen up to `t`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{cosine_sim, l2_normalize};
use crate::rng::{self, Stream};

const PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub dim: usize,
    pub base_classes: usize,
    /// Number of incremental sessions `T`.
    pub sessions: usize,
    /// New classes per incremental session `N`.
    pub ways: usize,
    /// Support samples per new class `K`.
    pub shots: usize,
    pub base_train_per_class: usize,
    pub test_per_class: usize,
    pub class_spread: f64,
    pub within_std: f64,
    pub min_angle_deg: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            base_classes: 12,
            sessions: 8,
            ways: 5,
            shots: 5,
            base_train_per_class: 100,
            test_per_class: 30,
            class_spread: 1.0,
            within_std: 1.0,
            min_angle_deg: 30.0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("dim", self.dim),
            ("base_classes", self.base_classes),
            ("ways", self.ways),
            ("shots", self.shots),
            ("base_train_per_class", self.base_train_per_class),
            ("test_per_class", self.test_per_class),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::ConfigInvalid(format!("{name} must be >= 1")));
            }
        }
        if self.dim < 2 {
            return Err(Error::ConfigInvalid("dim must be >= 2".into()));
        }
        if !(self.class_spread > 0.0) {
            return Err(Error::ConfigInvalid("class_spread must be > 0".into()));
        }
        if !(self.within_std >= 0.0) || !self.within_std.is_finite() {
            return Err(Error::ConfigInvalid("within_std must be >= 0".into()));
        }
        if !(0.0..180.0).contains(&self.min_angle_deg) {
            return Err(Error::ConfigInvalid(
                "min_angle_deg must be in [0, 180)".into(),
            ));
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.base_classes + self.sessions * self.ways
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: u32,
}

/// Read access to a session dataset. The pipeline only goes through this
/// trait, so tests can audit the order in which sessions are touched.
pub trait SessionSource {
    fn dim(&self) -> usize;
    /// `T`
    fn num_incremental(&self) -> usize;
    fn session_classes(&self, t: usize) -> &[u32];
    fn base_train(&self) -> &[Sample];
    /// Support set of incremental session `t` (`1 ≤ t ≤ T`).
    fn support(&self, t: usize) -> &[Sample];
    /// Test split of session `t`: every class from sessions `0..=t`.
    fn test_split(&self, t: usize) -> Vec<Sample>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDataset {
    pub dim: usize,
    /// `classes[t]` are the class ids introduced in session `t`.
    pub classes: Vec<Vec<u32>>,
    pub base: Vec<Sample>,
    /// `supports[t - 1]` for incremental session `t`.
    pub supports: Vec<Vec<Sample>>,
    /// Held-out samples per class id.
    pub test_pool: Vec<Vec<Vec<f64>>>,
    pub means: Vec<Vec<f64>>,
}

impl SessionSource for SessionDataset {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_incremental(&self) -> usize {
        self.supports.len()
    }

    fn session_classes(&self, t: usize) -> &[u32] {
        &self.classes[t]
    }

    fn base_train(&self) -> &[Sample] {
        &self.base
    }

    fn support(&self, t: usize) -> &[Sample] {
        assert!(t >= 1, "session 0 has no support set");
        &self.supports[t - 1]
    }

    fn test_split(&self, t: usize) -> Vec<Sample> {
        self.classes[..=t]
            .iter()
            .flatten()
            .flat_map(|&c| {
                self.test_pool[c as usize]
                    .iter()
                    .map(move |x| Sample { x: x.clone(), y: c })
            })
            .collect()
    }
}

/// Group samples by label, preserving first-seen class order.
pub fn group_by_class(samples: &[Sample]) -> Vec<(u32, Vec<Vec<f64>>)> {
    let mut groups: Vec<(u32, Vec<Vec<f64>>)> = Vec::new();
    for s in samples {
        match groups.iter_mut().find(|(c, _)| *c == s.y) {
            Some((_, xs)) => xs.push(s.x.clone()),
            None => groups.push((s.y, vec![s.x.clone()])),
        }
    }
    groups
}

pub fn gen_synthetic_fscil(cfg: &BenchConfig, seed: u64) -> Result<SessionDataset> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, Stream::Data);
    let total = cfg.total_classes();
    let radius = cfg.class_spread * (cfg.dim as f64).sqrt();
    let max_cos = cfg.min_angle_deg.to_radians().cos();

    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(total);
    for _ in 0..total {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let g: Vec<f64> = (0..cfg.dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let Ok(u) = l2_normalize(&g) else { continue };
            let ok = directions
                .iter()
                .all(|d| cosine_sim(d, &u).map(|c| c <= max_cos).unwrap_or(false));
            if ok {
                directions.push(u);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::SeparationUnsatisfiable {
                classes: total,
                min_angle_deg: cfg.min_angle_deg,
                attempts: PLACEMENT_ATTEMPTS,
            });
        }
    }
    let means: Vec<Vec<f64>> = directions
        .iter()
        .map(|d| d.iter().map(|v| v * radius).collect())
        .collect();

    let mut draw = |mean: &[f64]| -> Vec<f64> {
        mean.iter()
            .map(|&m| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + cfg.within_std * z
            })
            .collect()
    };

    let mut classes = Vec::with_capacity(cfg.sessions + 1);
    classes.push((0..cfg.base_classes as u32).collect::<Vec<_>>());
    for t in 0..cfg.sessions {
        let start = (cfg.base_classes + t * cfg.ways) as u32;
        classes.push((start..start + cfg.ways as u32).collect());
    }

    let mut base = Vec::with_capacity(cfg.base_classes * cfg.base_train_per_class);
    for &c in &classes[0] {
        for _ in 0..cfg.base_train_per_class {
            base.push(Sample {
                x: draw(&means[c as usize]),
                y: c,
            });
        }
    }
    let mut supports = Vec::with_capacity(cfg.sessions);
    for session in &classes[1..] {
        let mut s = Vec::with_capacity(cfg.ways * cfg.shots);
        for &c in session {
            for _ in 0..cfg.shots {
                s.push(Sample {
                    x: draw(&means[c as usize]),
                    y: c,
                });
            }
        }
        supports.push(s);
    }
    let test_pool = means
        .iter()
        .map(|m| (0..cfg.test_per_class).map(|_| draw(m)).collect())
        .collect();

    Ok(SessionDataset {
        dim: cfg.dim,
        classes,
        base,
        supports,
        test_pool,
        means,
    })
}
