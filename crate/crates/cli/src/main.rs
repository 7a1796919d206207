use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mtnlu::config::ExperimentConfig;
use mtnlu::corpus::Lexicon;
use mtnlu::pipeline::{self, PipelineError, SubtitleMode};

#[derive(Parser)]
#[command(name = "mtnlu", version, about = "Multi-task sequence-to-sequence NLU workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Config override, `section.key=value`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, extra: &[String]) -> Result<ExperimentConfig, PipelineError> {
        let mut overrides = extra.to_vec();
        overrides.extend(self.overrides.iter().cloned());
        let cfg = ExperimentConfig::load(&self.config, &overrides)?;
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Small,
    Medium,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Qa,
    Dialog,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset from the annotated corpus.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Overrides `generate.variant`.
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
    },
    /// Extract sentence pairs from subtitle TSV files (start_ms, end_ms, text).
    ExtractSubtitles {
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Output prefix; writes `<output>.src` and `<output>.tgt`.
        #[arg(long, short)]
        output: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Learn a joint BPE merge table from every task's training data.
    LearnBpe {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Segment a text file with a merge table.
    ApplyBpe {
        #[arg(long)]
        merges: PathBuf,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Train all tasks jointly, then fine-tune if `trainer.finetune_epochs` > 0.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Skip joint training and fine-tune this checkpoint instead.
        #[arg(long)]
        finetune_from: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint on the synthetic task alone.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        from: PathBuf,
    },
    /// Decode a source file with a checkpoint, optionally scoring the result.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Task head to use; defaults to the synthetic task.
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        max_len: Option<usize>,
        /// Reference targets to score the hypotheses against.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long, requires = "reference")]
        report: Option<PathBuf>,
    },
    /// Score hypothesis targets against references.
    Evaluate {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        /// Lexicon file; alternatively taken from `--checkpoint`.
        #[arg(long, required_unless_present = "checkpoint")]
        lexicon: Option<PathBuf>,
        #[arg(long, conflicts_with = "lexicon")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Per-slot counts as CSV.
        #[arg(long)]
        per_slot: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn print_report(report: &mtnlu::eval::EvalReport) {
    print!("{}", report.to_text());
}

fn checkpoint_lexicon(path: &Path) -> Result<Lexicon, PipelineError> {
    let ck = mtnlu::checkpoint::Checkpoint::load(path)?;
    Ok(pipeline::CheckpointMeta::parse(&ck.metadata)?.lexicon())
}

fn train(cfg: &ExperimentConfig, from: Option<&Path>) -> Result<(), PipelineError> {
    let summary = pipeline::train(cfg, from)?;
    for p in &summary.phases {
        println!("phase {}: best epoch {} (val_f1={:.6})", p.phase, p.best_epoch, p.best_f1);
    }
    println!("best checkpoint: {}", summary.best_checkpoint.display());
    Ok(())
}

fn run(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Generate { cfg, variant } => {
            let extra: Vec<String> = match variant {
                Some(VariantArg::Small) => vec!["generate.variant=small".into()],
                Some(VariantArg::Medium) => vec!["generate.variant=medium".into()],
                None => Vec::new(),
            };
            let manifest = pipeline::generate(&cfg.load(&extra)?)?;
            print!("{}", manifest.to_text());
        }
        Command::ExtractSubtitles { mode, output, inputs } => {
            let mode = match mode {
                ModeArg::Qa => SubtitleMode::Qa,
                ModeArg::Dialog => SubtitleMode::Dialog,
            };
            let n = pipeline::extract_subtitles(&inputs, mode, &output)?;
            println!("pairs: {n}");
        }
        Command::LearnBpe { cfg } => {
            let cfg = cfg.load(&[])?;
            let table = pipeline::learn_bpe_from_config(&cfg)?;
            println!("merges: {} -> {}", table.len(), cfg.bpe.merges.display());
        }
        Command::ApplyBpe { merges, input, output } => {
            let n = pipeline::apply_bpe_file(&merges, &input, &output)?;
            println!("lines: {n}");
        }
        Command::Train { cfg, finetune_from } => {
            train(&cfg.load(&[])?, finetune_from.as_deref())?;
        }
        Command::Finetune { cfg, from } => {
            train(&cfg.load(&[])?, Some(&from))?;
        }
        Command::Decode {
            checkpoint,
            input,
            output,
            task,
            max_len,
            reference,
            report,
        } => {
            let hyps = pipeline::decode(&checkpoint, task.as_deref(), &input, &output, max_len)?;
            println!("hypotheses: {} -> {}", hyps.len(), output.display());
            if let Some(r) = reference {
                let lexicon = checkpoint_lexicon(&checkpoint)?;
                print_report(&pipeline::evaluate(&r, &output, &lexicon, report.as_deref(), None)?);
            }
        }
        Command::Evaluate {
            reference,
            hyp,
            lexicon,
            checkpoint,
            report,
            per_slot,
        } => {
            let lexicon = match (lexicon, checkpoint) {
                (Some(l), _) => Lexicon::read(&l)?,
                (None, Some(c)) => checkpoint_lexicon(&c)?,
                (None, None) => unreachable!("clap requires one of them"),
            };
            let rep = pipeline::evaluate(&reference, &hyp, &lexicon, report.as_deref(), per_slot.as_deref())?;
            print_report(&rep);
        }
    }
    Ok(())
}
