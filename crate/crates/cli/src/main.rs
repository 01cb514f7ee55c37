use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use morphdet_cli::commands::{self, Init, Split};
use morphdet_cli::{CliResult, ExperimentConfig, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "morphdet", version, about = "Morphable prototype detector on a synthetic benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every config-driven command; they override the file.
#[derive(Args)]
struct ConfigArgs {
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load_or_default(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg = cfg.with_seed(s);
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate universe, datasets, semantic vectors and exemplars.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector on a generated data directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        em_iterations: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Prototype initialization: semantic or visual.
        #[arg(long, default_value = "semantic")]
        init: Init,
    },
    /// Add novel classes to a trained checkpoint from exemplar descriptors.
    Morph {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        exemplars: PathBuf,
        #[arg(long, default_value_t = 5)]
        shots: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        universe: PathBuf,
        /// Rows kept in report.csv: all, base or novel.
        #[arg(long, default_value = "all")]
        split: Split,
        /// Checkpoint to compare base-class AP against (typically pre-morph).
        #[arg(long)]
        before: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a canned experiment: em_iterations, lambda, init or zero_shot.
    Experiment {
        name: String,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Gen { cfg, out } => {
            let m = commands::cmd_gen(&cfg.load()?, &out)?;
            for f in &m.files {
                println!("{}  {}", f.sha256, out.join(&f.path).display());
            }
        }
        Command::Train { cfg, data, out, em_iterations, lambda, init } => {
            let mut c = cfg.load()?;
            if let Some(n) = em_iterations {
                c.train.em_iterations = n;
            }
            if let Some(l) = lambda {
                c.train.lambda = l;
            }
            c.validate().map_err(morphdet_cli::CliError::Usage)?;
            let s = commands::cmd_train(&c, &data, &out, init)?;
            for p in &s.checkpoints {
                println!("checkpoint {}", p.display());
            }
            println!("metrics {}", s.metrics.display());
            println!("final loss {:.6}", s.final_loss);
        }
        Command::Morph { checkpoint, exemplars, shots, out } => {
            let s = commands::cmd_morph(&checkpoint, &exemplars, shots, &out)?;
            println!(
                "added {} class(es) {:?} in {:.3} ms; gradient evaluations: {}",
                s.added.len(),
                s.added,
                s.wall_time.as_secs_f64() * 1e3,
                s.gradient_evaluations
            );
            println!("checkpoint {}", out.display());
        }
        Command::Eval { cfg, checkpoint, dataset, universe, split, before, out } => {
            let c = cfg.load()?;
            let r = commands::cmd_eval(&checkpoint, &dataset, &universe, split, &c.detect, before.as_deref(), &out)?;
            print!("{}", std::fs::read_to_string(out.join("report.csv")).unwrap_or_default());
            if r.before.is_some() {
                print!("{}", std::fs::read_to_string(out.join("base_paired.csv")).unwrap_or_default());
            }
        }
        Command::Experiment { name, cfg, output_dir } => {
            let mut c = cfg.load()?;
            if let Some(d) = output_dir {
                c.output_dir = d;
            }
            let dir = commands::cmd_experiment(&name, &c)?;
            print!("{}", std::fs::read_to_string(dir.join("summary.csv")).unwrap_or_default());
            println!("results in {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { EXIT_USAGE as u8 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
