//! `mocl`: train, evaluate and summarize meta-optimized continual learning runs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mocl_core::baselines::VariantKind;
use mocl_core::experiment::config::RunConfig;
use mocl_core::experiment::run;
use mocl_core::importance::Allocation;

#[derive(Parser)]
#[command(
    name = "mocl",
    version,
    about = "Meta-optimized continual learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the task-encoder backbone and write its checkpoint.
    PretrainEncoder {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a variant through the task stream and evaluate its snapshots.
    Train {
        #[command(flatten)]
        common: Common,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-evaluate the snapshots of a finished run.
    Eval {
        /// Run directory produced by `train`.
        run: PathBuf,
        /// Where to write accuracy_matrix.csv and metrics.json (default: the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Support examples per class at evaluation.
        #[arg(long)]
        k: Option<usize>,
        /// Inference adaptation iterations.
        #[arg(long)]
        q_test: Option<usize>,
    },
    /// Train one of the component ablations.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean and standard deviation of each metric over several runs.
    Report {
        /// Run directories, each holding a metrics.json.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the summary as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate at K = 1, 5, 10 and 20.
    SweepK {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AllocationArg {
    Sequential,
    Spatial,
}

/// Configuration file plus per-command overrides.
#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory holding the dataset files.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<VariantKind>,
    /// Support examples per class, in training and evaluation.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    q_test: Option<usize>,
    /// Zero every update outside the kept importance mask.
    #[arg(long)]
    hard_mask: bool,
    #[arg(long, value_enum)]
    allocation: Option<AllocationArg>,
    /// Pretrained task-encoder checkpoint.
    #[arg(long)]
    encoder: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<VariantKind, String> {
    s.parse().map_err(|_| {
        let names: Vec<_> = VariantKind::ALL.iter().map(|k| k.as_str()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

impl Common {
    fn resolve(&self) -> mocl_core::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.data {
            cfg.data_dir = Some(dir.clone());
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(k) = self.k {
            cfg.k_shot = k;
            cfg.eval_k = Some(k);
        }
        if let Some(q) = self.q_test {
            cfg.q_test = q;
            cfg.eval_q_test = Some(q);
        }
        if self.hard_mask {
            cfg.hard_mask = true;
        }
        if let Some(a) = self.allocation {
            cfg.allocation = match a {
                AllocationArg::Sequential => Allocation::Sequential,
                AllocationArg::Spatial => Allocation::Spatial,
            };
        }
        if let Some(path) = &self.encoder {
            cfg.encoder_checkpoint = Some(path.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_metrics(m: &run::Metrics) {
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.4}", x));
    println!(
        "{} seed={} M={} K={} avg_accuracy={:.4} bwt={} fwt={}",
        m.variant,
        m.seed,
        m.m,
        m.k,
        m.avg_accuracy,
        opt(m.bwt.map(f64::from)),
        opt(m.fwt.map(f64::from))
    );
}

fn execute(command: Command) -> mocl_core::Result<()> {
    match command {
        Command::PretrainEncoder { common, out } => {
            let cfg = common.resolve()?;
            let report = run::pretrain_encoder(&cfg, &out)?;
            println!(
                "encoder {} written to {}: held-out accuracy {:.4} (chance {:.4}), final loss {:.4}",
                cfg.encoder.name(),
                out.display(),
                report.heldout_accuracy,
                report.chance,
                report.final_loss
            );
        }
        Command::Train { common, out } => print_metrics(&run::train(&common.resolve()?, &out)?),
        Command::Ablate { common, out } => print_metrics(&run::ablate(&common.resolve()?, &out)?),
        Command::Eval {
            run: dir,
            out,
            k,
            q_test,
        } => {
            let out = out.unwrap_or_else(|| dir.clone());
            print_metrics(&run::eval(&dir, &out, k, q_test)?);
        }
        Command::Report { runs, out } => {
            let rows = run::report(&runs)?;
            print!("{}", run::format_report(&rows));
            if let Some(path) = out {
                run::write_report_json(&rows, &path)?;
            }
        }
        Command::SweepK { common, out } => {
            for m in run::sweep_k(&common.resolve()?, &out)? {
                print_metrics(&m);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
