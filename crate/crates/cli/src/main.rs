use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use decider::config::RunConfig;
use decider::pipeline;

#[derive(Parser)]
#[command(name = "decider", version, about = "Failure detection for image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed and every seed derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic dataset.
    GenScenario(Common),
    /// Train the task classifier (and the GDE ensemble when requested).
    TrainClassifier(Common),
    /// Train the PIM against the trained classifier.
    TrainPim(Common),
    /// Score the calibration and test splits with each scorer.
    Score(Common),
    /// Calibrate one threshold per scorer on the validation split.
    Calibrate(Common),
    /// Evaluate the scorers on the test split and write the report.
    Evaluate(Common),
    /// Explain classifier/PIM disagreements in terms of attributes.
    Explain {
        #[command(flatten)]
        common: Common,
        /// Comma-separated sample ids; defaults to the config's list or to
        /// disagreeing test samples.
        #[arg(long, value_delimiter = ',')]
        samples: Vec<String>,
    },
    /// Compare DECIDER with clean, irrelevant and insufficient banks.
    AblateAttributes(Common),
    /// Run gen-scenario through evaluate in one go.
    Run(Common),
}

fn load(common: &Common) -> decider::Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> decider::Result<()> {
    match cli.command {
        Command::GenScenario(c) => {
            let ds = pipeline::cmd_gen_scenario(&load(&c)?)?;
            println!("generated {} samples", ds.samples.len());
        }
        Command::TrainClassifier(c) => {
            let log = pipeline::cmd_train_classifier(&load(&c)?)?;
            if let Some(last) = log.last() {
                println!(
                    "classifier trained: epoch {} loss {:.4} train acc {:.4}",
                    last.epoch, last.loss, last.train_acc
                );
            }
        }
        Command::TrainPim(c) => {
            let state = pipeline::cmd_train_pim(&load(&c)?)?;
            if let Some(last) = state.log.last() {
                println!(
                    "PIM trained: epoch {} loss {:.4} acc {:.4} agreement {:.4}",
                    last.epoch, last.loss, last.pim_acc, last.agree_rate
                );
            }
        }
        Command::Score(c) => {
            for p in pipeline::cmd_score(&load(&c)?)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Calibrate(c) => {
            for file in pipeline::cmd_calibrate(&load(&c)?)? {
                for t in &file.thresholds {
                    match &t.domain {
                        Some(d) => println!("{} [{d}] tau {}", t.scorer, t.tau),
                        None => println!("{} tau {}", t.scorer, t.tau),
                    }
                }
            }
        }
        Command::Evaluate(c) => {
            print!("{}", pipeline::cmd_evaluate(&load(&c)?)?.to_table());
        }
        Command::Explain { common, samples } => {
            let cfg = load(&common)?;
            let out = pipeline::cmd_explain(&cfg, &samples)?;
            println!("explained {} samples", out.len());
        }
        Command::AblateAttributes(c) => {
            let summary = pipeline::cmd_ablate_attributes(&load(&c)?)?;
            for e in &summary.entries {
                if let Some(m) = e.report.entry(decider::scoring::ScorerId::Decider) {
                    println!("{:<13} FR {:.4} SR {:.4} MCC {:.4}", e.variant.as_str(), m.fr, m.sr, m.mcc);
                }
            }
        }
        Command::Run(c) => {
            print!("{}", pipeline::run_all(&load(&c)?)?.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
