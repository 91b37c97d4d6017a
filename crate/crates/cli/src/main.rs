use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use polyglot_core::cltrain::Strategy;
use polyglot_core::experiment::{Experiment, ExperimentConfig, RunKind};
use polyglot_core::Error;

#[derive(Parser, Debug)]
#[command(name = "polyglot", version, about = "Continual multilingual ASR experiments on a toy encoder-decoder")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Restrict `adapt` and `decode` to one strategy.
    #[arg(long, global = true)]
    strategy: Option<Strategy>,
    /// Start from the reduced preset instead of the full one.
    #[arg(long, global = true)]
    quick: bool,
    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate train/dev/test corpora for every language.
    GenData,
    /// Train the model on the old languages and check the learnability gate.
    Pretrain,
    /// Adapt the pretrained model to the new languages.
    Adapt,
    /// Decode test sets with every adapted checkpoint.
    Decode,
    /// Score decode outputs and write the report.
    Eval,
    /// Run every stage and print the summary table.
    Reproduce,
    /// Print the resolved configuration.
    ShowConfig,
}

fn resolve(cli: &Cli) -> polyglot_core::Result<ExperimentConfig> {
    let base = if cli.quick { ExperimentConfig::quick() } else { ExperimentConfig::default() };
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path, base, cli.seed.is_some())?,
        None if cli.seed.is_some() => base,
        None => return Err(Error::Config("a seed is required: pass --seed or set `seed` in --config".into())),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> polyglot_core::Result<()> {
    let cfg = resolve(cli)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let exp = Experiment::new(cfg)?;
    let wanted = |s: Strategy| cli.strategy.map_or(true, |w| w.training_strategy() == s.training_strategy());
    match cli.command {
        Command::GenData => exp.gen_data()?,
        Command::Pretrain => {
            let out = exp.pretrain()?;
            for (lang, wer) in &out.gate {
                println!("{lang}: test WER {:.1}%", 100.0 * wer);
            }
        }
        Command::Adapt => {
            let mut any = false;
            for run in [RunKind::Plan, RunKind::Sequential] {
                for s in exp.trained_strategies(run).into_iter().filter(|&s| wanted(s)) {
                    eprintln!("adapting {} ({})", s, run.dir());
                    for p in exp.adapt(run, s)? {
                        println!(
                            "{} phase {} {}: best val loss {:.4} at step {} of {}",
                            s, p.phase, p.language, p.best_val_loss, p.best_step, p.steps
                        );
                    }
                    any = true;
                }
            }
            if !any {
                return Err(Error::Config("no configured strategy matches --strategy".into()));
            }
        }
        Command::Decode => {
            if cli.strategy.is_none() {
                exp.decode_unadapted()?;
            }
            for m in exp.methods() {
                if wanted(m.weights) {
                    eprintln!("decoding {}", m.name);
                    exp.decode(&m)?;
                }
            }
        }
        Command::Eval => print!("{}", exp.evaluate()?.summary_table()),
        Command::Reproduce => {
            let report = exp.reproduce(|stage| eprintln!("{stage}"))?;
            print!("{}", report.summary_table());
            for note in &report.notes {
                println!("note: {note}");
            }
        }
        Command::ShowConfig => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::InvalidArgument(_) | Error::InvalidModelConfig(_) => 2,
                Error::Invariant(_) => 3,
                _ => 1,
            })
        }
    }
}
