use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sd2::commands::{self, AlignMode, AlignOptions, EvalOptions};
use sd2::config::RunConfig;
use sd2::specdec::DecodeMode;
use sd2::steering::VariantKind;
use sd2::training::OffsetMode;
use sd2::Error;

#[derive(Parser)]
#[command(name = "sd2", version, about = "Speculative decoding with steered drafters at toy scale")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints, curves, traces and tables.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the verifier and an independent drafter on the corpus.
    Pretrain,
    /// Align the pretrained drafter to the verifier.
    Align {
        #[arg(value_enum)]
        mode: AlignArg,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long, value_enum)]
        offset_mode: Option<OffsetArg>,
        #[arg(long)]
        freeze_drafter: bool,
        /// Write the checkpoint here instead of the configured location.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the evaluation matrix and write traces and tables.
    Eval {
        #[arg(long = "mode", value_enum)]
        modes: Vec<ModeArg>,
        #[arg(long = "temperature")]
        temperatures: Vec<f64>,
        /// Number of evaluation seeds, counting up from the master seed.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Check greedy identity and first-token sampling fidelity.
    VerifyLossless,
    /// Re-aggregate the JSONL traces of a previous eval.
    Report,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlignArg {
    Distill,
    Sd2,
}

#[derive(Clone, Copy, ValueEnum)]
#[allow(clippy::enum_variant_names)]
enum VariantArg {
    BiasInMlp,
    BiasAfterMlp,
    CondBiasInMlp,
}

#[derive(Clone, Copy, ValueEnum)]
enum OffsetArg {
    PerSequenceRandom,
    Blocked,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Pretrained,
    Distilled,
    Sd2,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingArtifact(_) | Error::MissingCells(_) => 3,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> sd2::Result<RunConfig> {
    let path = cli.config.as_deref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let cfg = RunConfig::load(path)?;
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn log(line: &str) {
    eprintln!("{line}");
}

fn run(cli: &Cli) -> sd2::Result<bool> {
    let out: &Path = &cli.out;
    match &cli.command {
        Command::Pretrain => {
            let s = commands::pretrain(&load_config(cli)?, out, &mut log)?;
            println!("verifier  {}", s.verifier_path.display());
            println!("drafter   {}", s.drafter_path.display());
            println!(
                "held-out loss: verifier {:.4} (init {:.4}), drafter {:.4}",
                s.verifier_val_loss, s.verifier_init_loss, s.drafter_val_loss
            );
        }
        Command::Align { mode, variant, offset_mode, freeze_drafter, output } => {
            let cfg = load_config(cli)?;
            let opts = AlignOptions {
                variant: variant.map(|v| match v {
                    VariantArg::BiasInMlp => VariantKind::BiasInMlp,
                    VariantArg::BiasAfterMlp => VariantKind::BiasAfterMlp,
                    VariantArg::CondBiasInMlp => VariantKind::CondBiasInMlp,
                }),
                offset_mode: offset_mode.map(|o| match o {
                    OffsetArg::PerSequenceRandom => OffsetMode::PerSequenceRandom,
                    OffsetArg::Blocked => OffsetMode::Blocked,
                }),
                freeze_drafter: freeze_drafter.then_some(true),
                output: output.clone(),
            };
            let mode = match mode {
                AlignArg::Distill => AlignMode::Distill,
                AlignArg::Sd2 => AlignMode::Sd2,
            };
            let s = commands::align(&cfg, out, mode, &opts, &mut log)?;
            println!("{} ({} steps, validation tau {:.4})", s.path.display(), s.steps, s.validation_tau);
        }
        Command::Eval { modes, temperatures, seeds } => {
            let cfg = load_config(cli)?;
            let opts = EvalOptions {
                modes: (!modes.is_empty()).then(|| {
                    modes
                        .iter()
                        .map(|m| match m {
                            ModeArg::Pretrained => DecodeMode::Pretrained,
                            ModeArg::Distilled => DecodeMode::Distilled,
                            ModeArg::Sd2 => DecodeMode::Sd2,
                        })
                        .collect()
                }),
                temperatures: (!temperatures.is_empty()).then(|| temperatures.clone()),
                n_seeds: *seeds,
            };
            let s = commands::eval(&cfg, out, &opts)?;
            for r in &s.comparison {
                print!("{:10} T={:<4} {:10} tau {:.4}", r.corpus, r.temperature, r.mode.name(), r.tau_mean);
                if r.n_seeds > 1 {
                    print!(" ± {:.4}", r.tau_std);
                }
                if let Some(sig) = &r.vs_pretrained {
                    print!("  vs pretrained t={:.3} p={:.4}", sig.t_statistic, sig.p_value);
                }
                println!();
            }
            println!("tables in {}, report hash {}", s.dir.display(), s.report_hash);
        }
        Command::VerifyLossless => {
            let report = commands::verify_lossless(&load_config(cli)?, out, &mut |_| {})?;
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(report.passed());
        }
        Command::Report => {
            let (path, summaries) = commands::report(out)?;
            for s in &summaries {
                println!("{}: {} blocks, tau {:.4}", s.file.display(), s.blocks, s.tau);
            }
            println!("wrote {}", path.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
