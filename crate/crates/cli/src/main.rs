use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use evoloss::evolve::{FitnessKind, Strategy};
use evoloss::harness::{
    eval_file_name, gen_data, read_eval, read_history, run_eval, run_evolve, train_final, write_report,
    ExperimentConfig, Protocol, HISTORY_FILE, REPORT_DIR,
};
use evoloss::Exec;

#[derive(Parser, Debug)]
#[command(name = "evoloss", version, about = "Evolve self-supervised loss weightings for multi-modal encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON experiment configuration; built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    /// `elo` or `weak`.
    #[arg(long, value_parser = parse_fitness)]
    fitness: Option<FitnessKind>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of fitness evaluations for `evolve`.
    #[arg(long)]
    budget: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Run sequentially even when built with the parallel feature.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset and its label sidecar.
    GenData(Common),
    /// Search loss weightings and write history.ndjson and best.weights.
    Evolve(Common),
    /// Train the final model from a weights file and write model.ckpt.
    Train {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out>/best.weights.
        #[arg(long, value_name = "PATH")]
        weights: Option<PathBuf>,
    },
    /// Score a checkpoint with a downstream protocol.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out>/model.ckpt.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// `linear`, `kmeans` or `finetune`.
        #[arg(long, default_value = "linear", value_parser = parse_protocol)]
        protocol: Protocol,
    },
    /// Write CSV tables under <out>/report.
    Report {
        #[command(flatten)]
        common: Common,
        /// History files to merge; defaults to <out>/history.ndjson.
        #[arg(long = "history", value_name = "PATH")]
        histories: Vec<PathBuf>,
        /// Evaluation results; defaults to any eval_*.json in <out>.
        #[arg(long = "eval", value_name = "PATH")]
        evals: Vec<PathBuf>,
    },
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: evoloss::Error| e.to_string())
}

fn parse_fitness(s: &str) -> Result<FitnessKind, String> {
    s.parse().map_err(|e: evoloss::Error| e.to_string())
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: evoloss::Error| e.to_string())
}

impl Common {
    fn load(&self) -> evoloss::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.strategy {
            cfg.evolve.strategy = s;
        }
        if let Some(f) = self.fitness {
            cfg.fitness.kind = f;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.evolve.seed = seed;
            cfg.dataset.seed = seed;
        }
        if let Some(b) = self.budget {
            cfg.evolve.budget = b;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::default()
        }
    }
}

fn eval_files(out: &Path) -> Vec<PathBuf> {
    Protocol::ALL
        .iter()
        .map(|p| out.join(eval_file_name(*p)))
        .filter(|p| p.exists())
        .collect()
}

fn run(command: Command, cfg: &ExperimentConfig, exec: Exec) -> evoloss::Result<()> {
    match command {
        Command::GenData(_) => {
            let s = gen_data(cfg, exec)?;
            info!("class histogram {:?}", s.histogram);
            println!("{}", s.dataset.display());
            println!("{}", s.labels.display());
        }
        Command::Evolve(_) => {
            let s = run_evolve(cfg, exec)?;
            println!(
                "{} evaluations, best fitness {:?}",
                s.evaluations,
                s.best.fitness().unwrap_or(f64::NEG_INFINITY)
            );
            println!("{}", s.history.display());
            println!("{}", s.best_weights.display());
        }
        Command::Train { weights, .. } => {
            let s = train_final(cfg, weights.as_deref(), exec)?;
            if let Some(l) = s.losses.last() {
                info!("final loss {l}");
            }
            println!("{}", s.checkpoint.display());
        }
        Command::Eval {
            checkpoint, protocol, ..
        } => {
            let r = run_eval(cfg, checkpoint.as_deref(), protocol, exec)?;
            println!("{} accuracy {:.4}", r.protocol, r.accuracy);
        }
        Command::Report { histories, evals, .. } => {
            let histories = if histories.is_empty() {
                vec![cfg.out_path(HISTORY_FILE)]
            } else {
                histories
            };
            let mut records = Vec::new();
            for h in &histories {
                records.extend(read_history(h)?);
            }
            let evals = if evals.is_empty() { eval_files(&cfg.output_dir) } else { evals };
            let results = evals.iter().map(|p| read_eval(p)).collect::<evoloss::Result<Vec<_>>>()?;
            let s = write_report(&cfg.out_path(REPORT_DIR), &records, &results)?;
            for f in s.files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let common = match &cli.command {
        Command::GenData(c) | Command::Evolve(c) => c,
        Command::Train { common, .. } | Command::Eval { common, .. } | Command::Report { common, .. } => common,
    }
    .clone();
    let cfg = match common.load() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command, &cfg, common.exec()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
