use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use doco_cli::config::{parse_order, parse_seeds, ExperimentConfig, OUTPUT_ROOT_ENV};
use doco_cli::sweep::{render_table, Axis};
use doco_cli::CliError;
use doco_core::adapt::{Aggregation, Method};
use doco_core::metrics::OodScore;

#[derive(Parser)]
#[command(name = "doco", about = "Open-set continual test-time adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model and cache its feature statistics.
    Pretrain(Common),
    /// Run one configuration for every seed.
    Run(Common),
    /// Run a configuration over one axis of values.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// kappa, severity, order or score.
        #[arg(long)]
        axis: String,
        /// Comma-separated values (orders separated by ';'); defaults per axis.
        #[arg(long)]
        values: Option<String>,
    },
    /// Re-run one results row and check it is reproduced exactly.
    Verify {
        /// Output root holding results.csv.
        #[arg(long, env = OUTPUT_ROOT_ENV, default_value = doco_cli::config::DEFAULT_OUTPUT_ROOT)]
        out: PathBuf,
        /// Row index (0-based); drawn deterministically when omitted.
        #[arg(long)]
        row: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; unspecified fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// A seed, a list `0,3,7`, or a range `0..10`.
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    severity: Option<f64>,
    /// doco or source-only.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    no_split: bool,
    #[arg(long)]
    no_propagate: bool,
    #[arg(long)]
    no_reg: bool,
    /// energy, msp, maxlogit or entropy.
    #[arg(long)]
    ood_score: Option<String>,
    /// Domain visiting order, e.g. `2031` or `2,0,3,1`.
    #[arg(long)]
    domain_order: Option<String>,
    /// Output root (default: $DOCO_OUTPUT_ROOT, then ./doco-out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint directory (default: <out>/checkpoint).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    exclude_first_batch: bool,
    /// Pool all samples into one metric cell instead of averaging domains.
    #[arg(long)]
    pooled: bool,
}

impl Common {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = &self.seed {
            cfg.seeds = parse_seeds(s)?;
        }
        if let Some(k) = self.kappa {
            cfg.stream.kappa = k;
        }
        if let Some(s) = self.severity {
            cfg.stream.severity = s;
        }
        if let Some(m) = &self.method {
            cfg.method = Method::parse(m)?;
        }
        cfg.adapter.use_split &= !self.no_split;
        cfg.adapter.use_propagate &= !self.no_propagate;
        cfg.adapter.use_reg &= !self.no_reg;
        if let Some(s) = &self.ood_score {
            cfg.ood_score = OodScore::parse(s)?;
        }
        if let Some(o) = &self.domain_order {
            cfg.stream.domain_order = parse_order(o)?;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = Some(o.clone());
        }
        if let Some(c) = &self.checkpoint {
            cfg.checkpoint_dir = Some(c.clone());
        }
        cfg.exclude_first_batch |= self.exclude_first_batch;
        if self.pooled {
            cfg.aggregation = Aggregation::Pooled;
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain(common) => {
            let cfg = common.resolve()?;
            let report = doco_cli::cmd_pretrain(&cfg)?;
            println!(
                "pretrained in {} steps, held-out accuracy {:.4}; wrote {}",
                report.log.steps,
                report.log.held_out_accuracy,
                cfg.checkpoint_root().display()
            );
        }
        Command::Run(common) => {
            let cfg = common.resolve()?;
            let (report, groups) = doco_cli::cmd_run(&cfg)?;
            println!("{} rows written, {} runs already present", report.rows.len(), report.skipped);
            print!("{}", render_table("config", &groups));
        }
        Command::Sweep { common, axis, values } => {
            let cfg = common.resolve()?;
            let axis = Axis::parse(&axis)?;
            let (report, groups) = doco_cli::cmd_sweep(&cfg, axis, values.as_deref())?;
            println!("{} rows written, {} runs already present", report.rows.len(), report.skipped);
            print!("{}", render_table(axis.name(), &groups));
        }
        Command::Verify { out, row, checkpoint } => {
            let v = doco_cli::cmd_verify(&out, row, checkpoint.as_deref())?;
            println!("row {} reproduced exactly (run {}, seed {})", v.index, v.stored.run, v.stored.seed);
        }
    }
    Ok(())
}
