//! Experiment configuration as flat `key = value` text grouped in
//! `[section]`s. `#` starts a comment. Keys absent from a file keep their
//! defaults; unknown sections or keys are errors.
//!
//! ```text
//! [experiment]
//! seed = 7
//!
//! [loss]
//! lambda_moti = 2.5
//! ```

use std::fmt::Write as _;
use std::str::FromStr;

use crate::bench::BenchConfig;
use crate::encoder::Arch;
use crate::error::{Error, Result};
use crate::losses::Hyperparams;
use crate::metrics::InferMode;
use crate::prototypes::TauSqMode;
use crate::trainer::{ProtoMode, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub sgd_momentum: f64,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub key_momentum: f64,
    pub queue_size: usize,
    pub noise_std: f64,
    pub scale_jitter: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let arch = &t.arch.0;
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_max: t.lr_max,
            sgd_momentum: t.sgd_momentum,
            hidden: arch[1..arch.len() - 1].to_vec(),
            output_dim: *arch.last().unwrap(),
            key_momentum: t.key_momentum,
            queue_size: t.queue_size,
            noise_std: t.noise_std,
            scale_jitter: t.scale_jitter,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSection {
    pub hp: Hyperparams,
    pub m_transforms: usize,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            hp: Hyperparams::default(),
            m_transforms: TrainConfig::default().num_transforms,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub proto_mode: ProtoMode,
    pub infer_mode: InferMode,
    pub tau_sq: TauSqMode,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            proto_mode: ProtoMode::Cea,
            infer_mode: InferMode::Multigrain,
            tau_sq: TauSqMode::Adaptive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub bench: BenchConfig,
    pub train: TrainSection,
    pub loss: LossSection,
    pub eval: EvalSection,
}

fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse::<T>()
        .map_err(|_| format!("invalid value {v:?} for {key}"))
}

fn usize_list(key: &str, v: &str) -> std::result::Result<Vec<usize>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| num(key, p.trim())).collect()
}

pub fn parse_proto_mode(v: &str) -> Option<ProtoMode> {
    match v {
        "cea" => Some(ProtoMode::Cea),
        "bayes" => Some(ProtoMode::Bayes),
        _ => None,
    }
}

pub fn parse_infer_mode(v: &str) -> Option<InferMode> {
    match v {
        "ncm" => Some(InferMode::Ncm),
        "multigrain" => Some(InferMode::Multigrain),
        _ => None,
    }
}

fn proto_mode_str(m: ProtoMode) -> &'static str {
    match m {
        ProtoMode::Cea => "cea",
        ProtoMode::Bayes => "bayes",
    }
}

fn infer_mode_str(m: InferMode) -> &'static str {
    match m {
        InferMode::Ncm => "ncm",
        InferMode::Multigrain => "multigrain",
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| Error::Parse {
                    line: line_no,
                    msg: "unterminated section header".into(),
                })?;
                section = Some(name.trim().to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: "expected key = value".into(),
            })?;
            let sec = section.as_deref().ok_or_else(|| Error::Parse {
                line: line_no,
                msg: "key outside of any section".into(),
            })?;
            cfg.set(sec, key.trim(), value.trim())
                .map_err(|msg| Error::Parse { line: line_no, msg })?;
        }
        Ok(cfg)
    }

    /// Set one `section.key`.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        let b = &mut self.bench;
        let t = &mut self.train;
        let l = &mut self.loss;
        let e = &mut self.eval;
        match (section, key) {
            ("experiment", "seed") => self.seed = num(key, v)?,

            ("bench", "dim") => b.dim = num(key, v)?,
            ("bench", "base_classes") => b.base_classes = num(key, v)?,
            ("bench", "sessions") => b.sessions = num(key, v)?,
            ("bench", "ways") => b.ways = num(key, v)?,
            ("bench", "shots") => b.shots = num(key, v)?,
            ("bench", "base_train_per_class") => b.base_train_per_class = num(key, v)?,
            ("bench", "test_per_class") => b.test_per_class = num(key, v)?,
            ("bench", "class_spread") => b.class_spread = num(key, v)?,
            ("bench", "within_std") => b.within_std = num(key, v)?,
            ("bench", "min_angle_deg") => b.min_angle_deg = num(key, v)?,

            ("train", "epochs") => t.epochs = num(key, v)?,
            ("train", "batch_size") => t.batch_size = num(key, v)?,
            ("train", "lr_max") => t.lr_max = num(key, v)?,
            ("train", "sgd_momentum") => t.sgd_momentum = num(key, v)?,
            ("train", "hidden") => t.hidden = usize_list(key, v)?,
            ("train", "output_dim") => t.output_dim = num(key, v)?,
            ("train", "key_momentum") => t.key_momentum = num(key, v)?,
            ("train", "queue_size") => t.queue_size = num(key, v)?,
            ("train", "noise_std") => t.noise_std = num(key, v)?,
            ("train", "scale_jitter") => t.scale_jitter = num(key, v)?,

            ("loss", "tau") => l.hp.tau = num(key, v)?,
            ("loss", "tau_v") => l.hp.tau_v = num(key, v)?,
            ("loss", "lambda_ssc") => l.hp.lambda_ssc = num(key, v)?,
            ("loss", "lambda_moti") => l.hp.lambda_moti = num(key, v)?,
            ("loss", "m_transforms") => l.m_transforms = num(key, v)?,

            ("eval", "proto_mode") => {
                e.proto_mode =
                    parse_proto_mode(v).ok_or_else(|| format!("unknown proto_mode {v:?}"))?
            }
            ("eval", "infer_mode") => {
                e.infer_mode =
                    parse_infer_mode(v).ok_or_else(|| format!("unknown infer_mode {v:?}"))?
            }
            ("eval", "tau_sq") => {
                e.tau_sq = if v == "adaptive" {
                    TauSqMode::Adaptive
                } else {
                    TauSqMode::Fixed(num(key, v)?)
                }
            }
            _ => return Err(format!("unknown key {section}.{key}")),
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn render(&self) -> String {
        let b = &self.bench;
        let t = &self.train;
        let l = &self.loss;
        let e = &self.eval;
        let mut s = String::new();
        let _ = writeln!(s, "[experiment]\nseed = {}\n", self.seed);
        let _ = writeln!(
            s,
            "[bench]\ndim = {}\nbase_classes = {}\nsessions = {}\nways = {}\nshots = {}\n\
             base_train_per_class = {}\ntest_per_class = {}\nclass_spread = {:?}\n\
             within_std = {:?}\nmin_angle_deg = {:?}\n",
            b.dim,
            b.base_classes,
            b.sessions,
            b.ways,
            b.shots,
            b.base_train_per_class,
            b.test_per_class,
            b.class_spread,
            b.within_std,
            b.min_angle_deg
        );
        let hidden: Vec<String> = t.hidden.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(
            s,
            "[train]\nepochs = {}\nbatch_size = {}\nlr_max = {:?}\nsgd_momentum = {:?}\n\
             hidden = {}\noutput_dim = {}\nkey_momentum = {:?}\nqueue_size = {}\n\
             noise_std = {:?}\nscale_jitter = {:?}\n",
            t.epochs,
            t.batch_size,
            t.lr_max,
            t.sgd_momentum,
            hidden.join(","),
            t.output_dim,
            t.key_momentum,
            t.queue_size,
            t.noise_std,
            t.scale_jitter
        );
        let _ = writeln!(
            s,
            "[loss]\ntau = {:?}\ntau_v = {:?}\nlambda_ssc = {:?}\nlambda_moti = {:?}\nm_transforms = {}\n",
            l.hp.tau, l.hp.tau_v, l.hp.lambda_ssc, l.hp.lambda_moti, l.m_transforms
        );
        let tau_sq = match e.tau_sq {
            TauSqMode::Adaptive => "adaptive".to_string(),
            TauSqMode::Fixed(v) => format!("{v:?}"),
        };
        let _ = write!(
            s,
            "[eval]\nproto_mode = {}\ninfer_mode = {}\ntau_sq = {}\n",
            proto_mode_str(e.proto_mode),
            infer_mode_str(e.infer_mode),
            tau_sq
        );
        s
    }

    pub fn arch(&self) -> Arch {
        let mut dims = vec![self.bench.dim];
        dims.extend(&self.train.hidden);
        dims.push(self.train.output_dim);
        Arch(dims)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_max: t.lr_max,
            sgd_momentum: t.sgd_momentum,
            arch: self.arch(),
            hp: self.loss.hp,
            num_transforms: self.loss.m_transforms,
            queue_size: t.queue_size,
            key_momentum: t.key_momentum,
            noise_std: t.noise_std,
            scale_jitter: t.scale_jitter,
            seed: self.seed,
            record_snapshots: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bench.validate()?;
        self.train_config().validate()?;
        if let TauSqMode::Fixed(v) = self.eval.tau_sq {
            if !(v > 0.0) {
                return Err(Error::ConfigInvalid("tau_sq must be > 0".into()));
            }
        }
        Ok(())
    }
}
