//! End-to-end pipeline (generate → train → incremental sessions → evaluate),
//! its file outputs, and the experiment drivers built on it: the λ_moti
//! sweep, the loss-component ablation and the prototype-estimator
//! Monte-Carlo comparison.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::bench::{gen_synthetic_fscil, group_by_class, SessionSource};
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::math::sub;
use crate::metrics::{evaluate_session, mean_of, InferMode, MetricsReport};
use crate::prototypes::{
    bayes_prototype, build_finegrained, cea_prototype, feature_noise_variance, BayesianPrior,
    PrototypeBank,
};
use crate::rng::{self, Stream};
use crate::trainer::{
    run_incremental_sessions, train_base_session, Estimator, ProtoMode, TrainLog,
};
use crate::transforms::TransformSet;

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub report: MetricsReport,
    pub config_echo: String,
}

/// Base-session training. Only the base split is read.
pub fn train_stage<S: SessionSource + ?Sized>(
    cfg: &ExperimentConfig,
    data: &S,
) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let tc = cfg.train_config();
    let out = train_base_session(&tc, data.base_train(), data.session_classes(0).len())?;
    Ok(TrainArtifacts {
        checkpoint: Checkpoint {
            query: out.query,
            key: out.key,
            classifier: out.classifier,
            num_transforms: tc.num_transforms,
            transform_seed: tc.seed,
            config_echo: cfg.render(),
        },
        log: out.log,
    })
}

/// Session-0 bank from the base split and the estimator for later sessions.
pub fn base_bank<S: SessionSource + ?Sized>(
    cfg: &ExperimentConfig,
    ckpt: &Checkpoint,
    transforms: &TransformSet,
    data: &S,
) -> Result<(PrototypeBank, Estimator)> {
    let groups = group_by_class(data.base_train());
    let mut bank = PrototypeBank::new(transforms.len(), ckpt.query.output_dim())?;
    bank.append_session(0, build_finegrained(&ckpt.query, transforms, &groups)?)?;
    let estimator = match cfg.eval.proto_mode {
        ProtoMode::Cea => Estimator::Cea,
        ProtoMode::Bayes => {
            let feats = groups
                .iter()
                .map(|(_, xs)| xs.iter().map(|x| ckpt.query.encode(x)).collect())
                .collect::<Result<Vec<Vec<Vec<f64>>>>>()?;
            Estimator::Bayes {
                sigma_sq: feature_noise_variance(&feats)?,
                tau_sq: cfg.eval.tau_sq,
            }
        }
    };
    Ok((bank, estimator))
}

/// Evaluate session 0, then admit each incremental session in order and
/// evaluate after it. The support of session `t` is read only when session
/// `t` begins.
pub fn eval_stage<S: SessionSource + ?Sized>(
    cfg: &ExperimentConfig,
    ckpt: &Checkpoint,
    data: &S,
) -> Result<MetricsReport> {
    let transforms = TransformSet::new(ckpt.num_transforms, data.dim(), ckpt.transform_seed)?;
    let (mut bank, estimator) = base_bank(cfg, ckpt, &transforms, data)?;
    let mode = cfg.eval.infer_mode;
    let mut rows = vec![evaluate_session(
        &ckpt.query,
        &transforms,
        &bank,
        &data.test_split(0),
        0,
        mode,
    )?];
    for t in 1..=data.num_incremental() {
        let session = (t as u32, group_by_class(data.support(t)));
        bank = run_incremental_sessions(&ckpt.query, &transforms, bank, [session], estimator)?;
        rows.push(evaluate_session(
            &ckpt.query,
            &transforms,
            &bank,
            &data.test_split(t),
            t as u32,
            mode,
        )?);
    }
    MetricsReport::from_rows(rows)
}

pub fn run_on<S: SessionSource + ?Sized>(cfg: &ExperimentConfig, data: &S) -> Result<RunArtifacts> {
    let trained = train_stage(cfg, data)?;
    let report = eval_stage(cfg, &trained.checkpoint, data)?;
    Ok(RunArtifacts {
        config_echo: trained.checkpoint.config_echo.clone(),
        checkpoint: trained.checkpoint,
        log: trained.log,
        report,
    })
}

/// Generate the benchmark from `cfg.seed` and run the full pipeline.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let data = gen_synthetic_fscil(&cfg.bench, cfg.seed)?;
    run_on(cfg, &data)
}

pub fn write_train_outputs(dir: &Path, t: &TrainArtifacts) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("checkpoint.bin"), t.checkpoint.to_bytes())?;
    fs::write(dir.join("trainlog.ndjson"), t.log.to_ndjson()?)?;
    fs::write(dir.join("config.echo"), &t.checkpoint.config_echo)?;
    Ok(())
}

pub fn write_metrics(dir: &Path, report: &MetricsReport, config_echo: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), report.to_csv())?;
    fs::write(dir.join("metrics.json"), report.to_json(config_echo)?)?;
    Ok(())
}

pub fn write_run_outputs(dir: &Path, r: &RunArtifacts) -> Result<()> {
    write_train_outputs(
        dir,
        &TrainArtifacts {
            checkpoint: r.checkpoint.clone(),
            log: r.log.clone(),
        },
    )?;
    write_metrics(dir, &r.report, &r.config_echo)
}

/// Final-session `A_W` and `A_avg`, each averaged over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeedAverage {
    pub final_a_w: f64,
    pub a_avg: f64,
}

pub fn average_over_seeds(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<SeedAverage> {
    let mut finals = Vec::with_capacity(seeds.len());
    let mut avgs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run = run_pipeline(&ExperimentConfig {
            seed,
            ..cfg.clone()
        })?;
        finals.push(run.report.last().a_w);
        avgs.push(run.report.a_avg);
    }
    Ok(SeedAverage {
        final_a_w: mean_of(&finals)?,
        a_avg: mean_of(&avgs)?,
    })
}

pub const SWEEP_LAMBDAS: [f64; 5] = [0.0, 0.5, 1.5, 2.5, 5.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda_moti: f64,
    pub result: SeedAverage,
}

pub fn sweep(cfg: &ExperimentConfig, lambdas: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    lambdas
        .iter()
        .map(|&l| {
            let mut c = cfg.clone();
            c.loss.hp.lambda_moti = l;
            Ok(SweepRow {
                lambda_moti: l,
                result: average_over_seeds(&c, seeds)?,
            })
        })
        .collect()
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::from("lambda_moti,final_A_W,A_avg\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6}\n",
            r.lambda_moti, r.result.final_a_w, r.result.a_avg
        ));
    }
    s
}

/// Which loss components and whether virtual classes are on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AblationFlags {
    pub ssc: bool,
    pub moti: bool,
    pub virtual_classes: bool,
}

impl AblationFlags {
    pub const fn new(ssc: bool, moti: bool, virtual_classes: bool) -> Self {
        Self {
            ssc,
            moti,
            virtual_classes,
        }
    }

    /// Switch components off in `cfg`. Without virtual classes only the
    /// identity transform is used and inference is plain NCM.
    pub fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        if !self.ssc {
            c.loss.hp.lambda_ssc = 0.0;
        }
        if !self.moti {
            c.loss.hp.lambda_moti = 0.0;
        }
        if !self.virtual_classes {
            c.loss.m_transforms = 1;
            c.eval.infer_mode = InferMode::Ncm;
        }
        c
    }
}

pub const ABLATION_ROWS: [AblationFlags; 7] = [
    AblationFlags::new(false, false, false),
    AblationFlags::new(true, false, false),
    AblationFlags::new(false, true, false),
    AblationFlags::new(true, true, false),
    AblationFlags::new(true, false, true),
    AblationFlags::new(false, true, true),
    AblationFlags::new(true, true, true),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationRow {
    pub flags: AblationFlags,
    pub result: SeedAverage,
}

pub fn ablate(
    cfg: &ExperimentConfig,
    rows: &[AblationFlags],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    rows.iter()
        .map(|f| {
            Ok(AblationRow {
                flags: *f,
                result: average_over_seeds(&f.apply(cfg), seeds)?,
            })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "x" } else { "" };
    let mut s = String::from("L_ssc,L_MoTi,virtual,final_A_W,A_avg\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            mark(r.flags.ssc),
            mark(r.flags.moti),
            mark(r.flags.virtual_classes),
            r.result.final_a_w,
            r.result.a_avg
        ));
    }
    s
}

/// One cell of the estimator comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MseRow {
    pub shots: usize,
    pub tau_sq: f64,
    pub mse_cea: f64,
    pub mse_bayes: f64,
}

impl MseRow {
    pub fn ratio(&self) -> f64 {
        self.mse_bayes / self.mse_cea
    }
}

/// Monte-Carlo squared error of both estimators when the prior is the true
/// generating model: `μ ~ N(μ′, τ²I)`, `f ~ N(μ, σ²I)`. MSE is per trial,
/// summed over dimensions.
pub fn bayes_mse(
    dim: usize,
    shots: usize,
    sigma_sq: f64,
    tau_sq: f64,
    trials: usize,
    seed: u64,
) -> Result<MseRow> {
    if dim == 0 || shots == 0 || trials == 0 {
        return Err(Error::ConfigInvalid(
            "dim, shots and trials must be >= 1".into(),
        ));
    }
    let mut r = rng::stream(seed, Stream::MonteCarlo);
    let mut gauss = |n: usize, sd: f64| -> Vec<f64> {
        (0..n)
            .map(|_| sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r))
            .collect()
    };
    let (mut se_cea, mut se_bayes) = (0.0, 0.0);
    for _ in 0..trials {
        let prior_mean = gauss(dim, 1.0);
        let offset = gauss(dim, tau_sq.sqrt());
        let mu: Vec<f64> = prior_mean.iter().zip(&offset).map(|(a, b)| a + b).collect();
        let support: Vec<Vec<f64>> = (0..shots)
            .map(|_| {
                gauss(dim, sigma_sq.sqrt())
                    .iter()
                    .zip(&mu)
                    .map(|(e, m)| e + m)
                    .collect()
            })
            .collect();
        let cea = cea_prototype(&support)?;
        let bayes = bayes_prototype(
            &support,
            &BayesianPrior {
                prior_mean,
                tau_sq,
                sigma_sq,
            },
        )?;
        se_cea += sub(&cea, &mu).iter().map(|v| v * v).sum::<f64>();
        se_bayes += sub(&bayes, &mu).iter().map(|v| v * v).sum::<f64>();
    }
    Ok(MseRow {
        shots,
        tau_sq,
        mse_cea: se_cea / trials as f64,
        mse_bayes: se_bayes / trials as f64,
    })
}

pub const DEMO_SHOTS: [usize; 3] = [1, 5, 25];
pub const DEMO_TAU_SQ: [f64; 3] = [0.1, 1.0, 10.0];

/// The full shots × τ² grid at `σ² = 1`.
pub fn bayes_demo(dim: usize, trials: usize, seed: u64) -> Result<Vec<MseRow>> {
    let mut rows = Vec::new();
    for (i, &k) in DEMO_SHOTS.iter().enumerate() {
        for (j, &tau_sq) in DEMO_TAU_SQ.iter().enumerate() {
            let cell_seed = seed.wrapping_add((i * DEMO_TAU_SQ.len() + j) as u64);
            rows.push(bayes_mse(dim, k, 1.0, tau_sq, trials, cell_seed)?);
        }
    }
    Ok(rows)
}

pub fn mse_table(rows: &[MseRow]) -> String {
    let mut s = String::from("K,tau_sq,mse_cea,mse_bayes,ratio\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.4}\n",
            r.shots,
            r.tau_sq,
            r.mse_cea,
            r.mse_bayes,
            r.ratio()
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_flags_switch_components_off() {
        let cfg = ExperimentConfig::default();
        let off = AblationFlags::new(false, false, false).apply(&cfg);
        assert_eq!(off.loss.hp.lambda_ssc, 0.0);
        assert_eq!(off.loss.hp.lambda_moti, 0.0);
        assert_eq!(off.loss.m_transforms, 1);
        assert_eq!(off.eval.infer_mode, InferMode::Ncm);
        let full = AblationFlags::new(true, true, true).apply(&cfg);
        assert_eq!(full, cfg);
        assert_eq!(ABLATION_ROWS.len(), 7);
        assert_eq!(ABLATION_ROWS[6], AblationFlags::new(true, true, true));
    }

    #[test]
    fn ablation_table_marks_flags() {
        let rows = [AblationRow {
            flags: AblationFlags::new(true, false, true),
            result: SeedAverage {
                final_a_w: 0.5,
                a_avg: 0.75,
            },
        }];
        assert_eq!(
            ablation_table(&rows),
            "L_ssc,L_MoTi,virtual,final_A_W,A_avg\nx,,x,0.500000,0.750000\n"
        );
    }

    #[test]
    fn monte_carlo_mse_matches_theory() {
        // Per-dimension MSE: σ²/K for the mean, (K/σ² + 1/τ²)⁻¹ for the posterior.
        let (dim, k, sigma_sq, tau_sq) = (8, 5, 1.0, 0.5);
        let row = bayes_mse(dim, k, sigma_sq, tau_sq, 4000, 1).unwrap();
        let cea = dim as f64 * sigma_sq / k as f64;
        let bayes = dim as f64 / (k as f64 / sigma_sq + 1.0 / tau_sq);
        assert!((row.mse_cea / cea - 1.0).abs() < 0.05, "{row:?}");
        assert!((row.mse_bayes / bayes - 1.0).abs() < 0.05, "{row:?}");
    }

    #[test]
    fn demo_covers_the_grid() {
        let rows = bayes_demo(4, 50, 0).unwrap();
        assert_eq!(rows.len(), 9);
        assert_eq!(mse_table(&rows).lines().count(), 10);
        assert!(bayes_mse(4, 0, 1.0, 1.0, 10, 0).is_err());
    }
}
