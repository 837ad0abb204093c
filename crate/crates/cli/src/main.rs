//! `dtlight`: dataset generation, teacher training, distillation, adapter
//! fine-tuning, evaluation and reporting for decision-transformer signal control.

mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use dtlight_core::config::TrainConfig;
use dtlight_core::Error as CoreError;
use pipeline::{Method, RunDir};

#[derive(Parser)]
#[command(name = "dtlight", version, about = "Offline-to-online decision-transformer traffic signal control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Output root; each run lives in `<out>/<run>`.
    #[arg(long, env = "DTLIGHT_OUT", default_value = "runs")]
    out: PathBuf,
    /// Run name.
    #[arg(long, default_value = "default")]
    run: String,
}

impl RunArgs {
    fn dir(&self) -> RunDir {
        RunDir::new(self.out.join(&self.run))
    }
}

#[derive(Args, Clone)]
struct Common {
    #[command(flatten)]
    run: RunArgs,
    /// TOML config; missing keys take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set distill.alpha=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Start from the small desk-scale preset instead of the full-size defaults.
    #[arg(long)]
    desk: bool,
}

impl Common {
    fn config(&self, extra: &[String]) -> Result<TrainConfig> {
        let mut sets = self.sets.clone();
        sets.extend_from_slice(extra);
        let preset = self.desk.then(TrainConfig::desk);
        Ok(TrainConfig::resolve(preset.as_ref(), self.config.as_deref(), &sets)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the behavior policy and write one offline dataset per intersection.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of episodes (overrides `data.episodes`).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Pre-train one teacher per intersection on its offline dataset.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Distill each teacher into a small student and inject identity adapters.
    Distill {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune the students' adapters, layer norms and heads online.
    Finetune {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate baselines and trained policies over the configured seeds.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Comma-separated methods: fixed_time, max_pressure, emp, teacher, student, finetuned.
        /// Defaults to every method with artifacts.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
    },
    /// Render delay and model-size tables from a run's evaluation reports.
    Report {
        #[command(flatten)]
        run: RunArgs,
        /// Method that improvements are measured against.
        #[arg(long, default_value = "emp")]
        baseline: String,
    },
    /// Repeat the pipeline for each value of one config key and tabulate the results.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dotted config key, e.g. `distill.alpha`.
        #[arg(long)]
        key: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Methods to evaluate per value (default: student).
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
    },
}

fn parse_methods(names: &[String]) -> Result<Vec<Method>> {
    names.iter().map(|n| Method::parse(n.trim())).collect()
}

fn list(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, episodes } => {
            let extra: Vec<String> = episodes.map(|e| format!("data.episodes={e}")).into_iter().collect();
            let cfg = common.config(&extra)?;
            list(&pipeline::gen_data(&cfg, &common.run.dir())?);
        }
        Command::TrainTeacher { common } => {
            list(&pipeline::train_teachers(&common.config(&[])?, &common.run.dir())?);
        }
        Command::Distill { common } => {
            list(&pipeline::distill_students(&common.config(&[])?, &common.run.dir())?);
        }
        Command::Finetune { common } => {
            list(&pipeline::finetune(&common.config(&[])?, &common.run.dir())?);
        }
        Command::Eval { common, methods } => {
            let cfg = common.config(&[])?;
            for r in pipeline::eval(&cfg, &common.run.dir(), &parse_methods(&methods)?)? {
                println!("{} {} {}", r.scenario, r.method, r.delay_cell());
            }
        }
        Command::Report { run, baseline } => {
            print!("{}", pipeline::report(&run.dir(), &baseline)?);
        }
        Command::Sweep {
            common,
            key,
            values,
            methods,
        } => {
            let cfg = common.config(&[])?;
            let text = pipeline::sweep(&cfg, &common.run.dir(), &key, &values, &parse_methods(&methods)?)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(e.downcast_ref::<CoreError>(), Some(CoreError::Config(_)));
            ExitCode::from(if usage { 1 } else { 2 })
        }
    }
}
