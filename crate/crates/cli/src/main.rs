use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ctrobust::attack::AttackMode;
use ctrobust::harness::{self, ExperimentConfig, SummaryRow};

#[derive(Parser)]
#[command(name = "ctrobust", version, about = "Adversarial robustness benchmark for CT reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON); built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory, overriding `output_dir` from the configuration.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Top-level seed; every dataset, training and attack seed is derived from it.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for per-sample work.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the evaluation, training and lesion datasets.
    Generate,
    /// Train the unrolled gradient-descent parameters.
    TrainUnrolled,
    /// Train the lesion classifier on ground-truth patches.
    TrainClassifier,
    /// Run an attack campaign over every configured method and radius.
    Attack {
        #[arg(long, value_enum, default_value = "untargeted")]
        mode: Mode,
    },
    /// Build the transfer matrix from cached untargeted perturbations.
    Transfer,
    /// Summarize the result files of the output directory.
    Report,
    /// Print the effective configuration as JSON.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Untargeted,
    Localized,
    Universal,
}

impl From<Mode> for AttackMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Untargeted => AttackMode::Untargeted,
            Mode::Localized => AttackMode::Localized,
            Mode::Universal => AttackMode::Universal,
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(rows: &[SummaryRow]) {
    println!("{:<14} {:>7} {:>4} {:>8} {:>7} {:>9} {:>9} {:>8} {:>8}", "method", "eps", "n", "psnr", "ssim", "dc_clean", "dc_adv", "l_b", "success");
    for r in rows {
        let l_b = r.l_b.map_or_else(|| "-".into(), |v| format!("{v:.3}"));
        let success = r.success_rate.map_or_else(|| "-".into(), |v| format!("{:.0}%", 100.0 * v));
        println!(
            "{:<14} {:>7} {:>4} {:>8.2} {:>7.4} {:>9.2} {:>9.2} {:>8} {:>8}",
            r.method, r.eps, r.n, r.psnr, r.ssim, r.dc_clean, r.dc_adv, l_b, success
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let jobs = cli.common.jobs;
    match cli.command {
        Command::Config => println!("{}", serde_json::to_string_pretty(&cfg)?),
        Command::Generate => {
            let s = harness::with_jobs(jobs, || harness::cmd_generate(&cfg))??;
            println!(
                "wrote {} evaluation, {} training and {} lesion phantoms to {}",
                s.evaluation,
                s.training,
                s.lesions,
                cfg.output_dir.display()
            );
        }
        Command::TrainUnrolled => {
            let p = harness::with_jobs(jobs, || harness::cmd_train_unrolled(&cfg))??;
            if let Some(t) = &p.training {
                println!("unrolled gd: loss {:.4} -> {:.4} after {} epochs", t.initial_loss, t.final_loss, t.epochs);
            }
        }
        Command::TrainClassifier => {
            let s = harness::with_jobs(jobs, || harness::cmd_train_classifier(&cfg))??;
            print!("classifier: train accuracy {:.3}", s.train_accuracy);
            match s.heldout_accuracy {
                Some(a) => println!(", held-out accuracy {a:.3}"),
                None => println!(),
            }
        }
        Command::Attack { mode } => {
            let rows = harness::with_jobs(jobs, || harness::cmd_attack(&cfg, mode.into()))??;
            print_summary(&rows);
        }
        Command::Transfer => {
            let cells = harness::with_jobs(jobs, || harness::cmd_transfer(&cfg))??;
            println!("{:<14} {:<14} {:>8} {:>7}", "source", "target", "psnr", "ssim");
            for c in cells {
                let mark = if c.is_self { " (self)" } else { "" };
                println!("{:<14} {:<14} {:>8.2} {:>7.4}{mark}", c.source, c.target, c.psnr, c.ssim);
            }
        }
        Command::Report => print!("{}", harness::cmd_report(&cfg.output_dir)?),
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
