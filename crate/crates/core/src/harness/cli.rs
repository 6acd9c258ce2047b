//! Argument parsing and dispatch for the `lsl` binary.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::harness::commands::{self, AbxSource, GenerateArgs, RunContext, TrainArgs};
use crate::harness::config::RunConfig;
use crate::harness::manifest::Split;

#[derive(Debug, Parser)]
#[command(name = "lsl", version, about = "Train and analyse speech latents with a WaveNet decoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; the desk preset when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic corpus with its manifest and alignments.
    SynthCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// Compute input features for every manifest record.
    ExtractFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train the autoencoder on the manifest's train split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Total optimizer steps, overriding train.steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        checkpoint_every: u64,
    },
    /// Train the probe grid on frozen representations.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write VQ token streams of every manifest record.
    ExportTokens {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Fit the token to phone map on dev and score it on test.
    MapTokens {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
    },
    /// Minimal-pair ABX error of a representation.
    Abx {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// p_enc, p_proj, p_bn, p_cond, oracle or log-mel; eval.abx_point
        /// when omitted.
        #[arg(long)]
        point: Option<String>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Resynthesize an utterance from its latents.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        utterance: String,
        /// Speaker to condition on; the utterance's own by default.
        #[arg(long)]
        speaker: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        /// Greedy decoding instead of sampling.
        #[arg(long)]
        argmax: bool,
    },
    /// Print a checkpoint's inventory without building the model.
    Describe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn context(c: &Common, edit: impl FnOnce(&mut RunConfig)) -> Result<RunContext> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    edit(&mut cfg);
    RunContext::new(cfg, c.seed, c.out.clone())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthCorpus { common } => {
            let m = commands::synth_corpus(&context(&common, |_| {})?)?;
            println!("{} utterances, manifest {}", m.records.len(), common.out.join("manifest.jsonl").display());
        }
        Command::ExtractFeatures { common, manifest } => {
            commands::extract_features(&context(&common, |_| {})?, &manifest)?;
            println!("features in {}", common.out.join("features").display());
        }
        Command::Train {
            common,
            manifest,
            steps,
            resume,
            checkpoint_every,
        } => {
            let ctx = context(&common, |c| {
                if let Some(s) = steps {
                    c.train.steps = s;
                }
            })?;
            let st = commands::train(
                &ctx,
                &TrainArgs {
                    manifest,
                    resume,
                    checkpoint_every,
                },
            )?;
            println!("trained to step {}, checkpoint {}", st.step, ctx.out.join(commands::CHECKPOINT).display());
        }
        Command::Probe {
            common,
            manifest,
            checkpoint,
        } => {
            let r = commands::probe(&context(&common, |_| {})?, &manifest, &checkpoint)?;
            print!("{}", r.to_csv());
        }
        Command::ExportTokens {
            common,
            manifest,
            checkpoint,
        } => {
            let p = commands::export_tokens(&context(&common, |_| {})?, &manifest, &checkpoint)?;
            println!("tokens in {}", p.display());
        }
        Command::MapTokens {
            common,
            manifest,
            tokens,
        } => {
            let r = commands::map_tokens(&context(&common, |_| {})?, &manifest, &tokens)?;
            println!(
                "accuracy {:.4} over {} test frames ({} tokens mapped, majority baseline {:.4})",
                r.accuracy, r.frames, r.tokens_mapped, r.majority_baseline
            );
        }
        Command::Abx {
            common,
            manifest,
            checkpoint,
            point,
            split,
        } => {
            let ctx = context(&common, |_| {})?;
            let source = match point {
                Some(p) => AbxSource::parse(&p)?,
                None => AbxSource::Model(ctx.config.eval.abx_point),
            };
            let r = commands::abx(&ctx, &manifest, checkpoint.as_deref(), source, split)?;
            print!("{}", r.to_csv());
        }
        Command::Generate {
            common,
            manifest,
            checkpoint,
            utterance,
            speaker,
            samples,
            argmax,
        } => {
            let ctx = context(&common, |_| {})?;
            let p = commands::generate(
                &ctx,
                &GenerateArgs {
                    manifest,
                    checkpoint,
                    utterance,
                    speaker,
                    samples,
                    argmax,
                },
            )?;
            println!("wrote {}", p.display());
        }
        Command::Describe {
            checkpoint,
            config,
            seed,
            out,
        } => {
            if let Some(dir) = &out {
                let common = Common {
                    config,
                    seed,
                    out: dir.clone(),
                };
                context(&common, |_| {})?;
            }
            print!("{}", commands::describe(&checkpoint, out.as_deref())?);
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                Error::InvalidArgument(String::new()).exit_code()
            } else {
                0
            };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("lsl: {e}");
            e.exit_code()
        }
    }
}
