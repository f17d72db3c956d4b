use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use motic::bench::gen_synthetic_fscil;
use motic::checkpoint::Checkpoint;
use motic::config::ExperimentConfig;
use motic::experiment::{
    ablate, ablation_table, bayes_demo, eval_stage, mse_table, run_on, sweep, sweep_table,
    train_stage, write_metrics, write_run_outputs, write_train_outputs, ABLATION_ROWS,
    SWEEP_LAMBDAS,
};
use motic::gradcheck;
use motic::metrics::InferMode;
use motic::trainer::ProtoMode;

#[derive(Parser)]
#[command(
    name = "motic",
    version,
    about = "Few-shot class-incremental learning on synthetic benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on the base session; writes checkpoint.bin, trainlog.ndjson, config.echo.
    Train(Common),
    /// Evaluate a checkpoint over all sessions; writes metrics.csv and metrics.json.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out>/checkpoint.bin.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train then evaluate; writes every output file.
    Run(Common),
    /// Finite-difference checks of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Monte-Carlo MSE of the class-mean and posterior-mean estimators.
    BayesDemo {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Final accuracy over a grid of MoTi loss weights.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Number of consecutive seeds, starting at --seed, to average over.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Comma-separated weights; defaults to 0,0.5,1.5,2.5,5.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
    /// Final accuracy with loss components and virtual classes switched off.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtoArg {
    Cea,
    Bayes,
}

#[derive(Clone, Copy, ValueEnum)]
enum InferArg {
    Ncm,
    Multigrain,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum)]
    proto_mode: Option<ProtoArg>,
    #[arg(long, value_enum)]
    infer_mode: Option<InferArg>,
    #[arg(long)]
    lambda_moti: Option<f64>,
    #[arg(long)]
    lambda_ssc: Option<f64>,
    #[arg(long)]
    m_transforms: Option<usize>,
    #[arg(long)]
    queue_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl Common {
    fn base_config(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                ExperimentConfig::parse(&text).with_context(|| format!("parsing {}", p.display()))
            }
            None => Ok(ExperimentConfig::default()),
        }
    }

    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.proto_mode {
            cfg.eval.proto_mode = match v {
                ProtoArg::Cea => ProtoMode::Cea,
                ProtoArg::Bayes => ProtoMode::Bayes,
            };
        }
        if let Some(v) = self.infer_mode {
            cfg.eval.infer_mode = match v {
                InferArg::Ncm => InferMode::Ncm,
                InferArg::Multigrain => InferMode::Multigrain,
            };
        }
        if let Some(v) = self.lambda_moti {
            cfg.loss.hp.lambda_moti = v;
        }
        if let Some(v) = self.lambda_ssc {
            cfg.loss.hp.lambda_ssc = v;
        }
        if let Some(v) = self.m_transforms {
            cfg.loss.m_transforms = v;
        }
        if let Some(v) = self.queue_size {
            cfg.train.queue_size = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        cfg.validate()?;
        Ok(())
    }

    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = self.base_config()?;
        self.apply(&mut cfg)?;
        Ok(cfg)
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("MOTIC_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("MOTIC_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

fn write_table(out: &Path, name: &str, table: &str) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(name), table)?;
    Ok(())
}

fn seed_list(start: u64, count: u64) -> Result<Vec<u64>> {
    if count == 0 {
        bail!("--seeds must be >= 1");
    }
    Ok((0..count).map(|i| start.wrapping_add(i)).collect())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Train(c) => {
            let cfg = c.config()?;
            let data = gen_synthetic_fscil(&cfg.bench, cfg.seed)?;
            let trained = train_stage(&cfg, &data)?;
            write_train_outputs(&c.out, &trained)?;
            let last = trained.log.epochs.last().expect("at least one epoch");
            println!(
                "trained {} epochs, final loss {:.6}; wrote {}",
                trained.log.epochs.len(),
                last.total,
                c.out.display()
            );
        }
        Cmd::Eval { common, checkpoint } => {
            let path = checkpoint.unwrap_or_else(|| common.out.join("checkpoint.bin"));
            let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            let ckpt = Checkpoint::from_bytes(&bytes)
                .with_context(|| format!("decoding {}", path.display()))?;
            let mut cfg = match &common.config {
                Some(_) => common.base_config()?,
                None => ExperimentConfig::parse(&ckpt.config_echo).context("checkpoint config")?,
            };
            common.apply(&mut cfg)?;
            let data = gen_synthetic_fscil(&cfg.bench, cfg.seed)?;
            let report = eval_stage(&cfg, &ckpt, &data)?;
            let echo = cfg.render();
            write_metrics(&common.out, &report, &echo)?;
            fs::write(common.out.join("config.echo"), &echo)?;
            print!("{}", report.to_csv());
            println!("A_avg {:.6}", report.a_avg);
        }
        Cmd::Run(c) => {
            let cfg = c.config()?;
            let data = gen_synthetic_fscil(&cfg.bench, cfg.seed)?;
            let r = run_on(&cfg, &data)?;
            write_run_outputs(&c.out, &r)?;
            print!("{}", r.report.to_csv());
            println!("A_avg {:.6}", r.report.a_avg);
        }
        Cmd::Gradcheck { instances, seed } => {
            if instances == 0 {
                bail!("--instances must be >= 1");
            }
            let reports = gradcheck::run_all(instances, seed)?;
            println!("suite,instances,max_rel_err,status");
            let mut ok = true;
            for r in &reports {
                ok &= r.passed();
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!("{},{},{:.3e},{status}", r.name, r.instances, r.max_rel_err);
            }
            return Ok(ok);
        }
        Cmd::BayesDemo { trials, dim, seed } => {
            print!("{}", mse_table(&bayes_demo(dim, trials, seed)?));
        }
        Cmd::Sweep {
            common,
            seeds,
            lambdas,
        } => {
            let cfg = common.config()?;
            let grid = lambdas.unwrap_or_else(|| SWEEP_LAMBDAS.to_vec());
            let table = sweep_table(&sweep(&cfg, &grid, &seed_list(cfg.seed, seeds)?)?);
            write_table(&common.out, "sweep.csv", &table)?;
            print!("{table}");
        }
        Cmd::Ablate { common, seeds } => {
            let cfg = common.config()?;
            let table =
                ablation_table(&ablate(&cfg, &ABLATION_ROWS, &seed_list(cfg.seed, seeds)?)?);
            write_table(&common.out, "ablation.csv", &table)?;
            print!("{table}");
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| run(cli));
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
