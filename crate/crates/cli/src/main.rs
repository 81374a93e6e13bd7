//! `delib`: data generation, training, decoding, evaluation and reporting.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] deliberation::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Lib(e) if e.is_data_error() => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "delib", version, about = "Two-pass deliberation sequence transduction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every configurable subcommand.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// `key = value` configuration file; flags override it.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (1 = sequential).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Any configuration key, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn value(self) -> &'static str {
        match self {
            OnOff::On => "true",
            OnOff::Off => "false",
        }
    }
}

/// Second-pass options shared by decoding subcommands.
#[derive(Args, Debug, Clone, Default)]
pub struct DecodeFlags {
    /// beam | rescore | first-pass
    #[arg(long)]
    pub mode: Option<String>,
    /// both | acoustic | text
    #[arg(long)]
    pub attention: Option<String>,
    /// First-pass hypotheses attended to.
    #[arg(long)]
    pub hyps: Option<usize>,
    /// Additional encoder.
    #[arg(long, value_enum)]
    pub ae: Option<OnOff>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Text,
    Acoustic,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        utterances: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// rnnt | delib-ce | mwer | joint
        #[arg(long)]
        stage: String,
        /// Training corpus.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to start from; a fresh model otherwise.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// sgd | adam
        #[arg(long)]
        optimizer: Option<String>,
        #[command(flatten)]
        decode: DecodeFlags,
    },
    /// Decode a corpus and write the top hypothesis per utterance.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the full output beam.
        #[arg(long)]
        nbest: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeFlags,
    },
    /// Report first-pass and final WER on a corpus.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        decode: DecodeFlags,
    },
    /// Second-pass cost estimate.
    Flops {
        /// Bidirectional hypothesis encoder parameters.
        #[arg(long)]
        mb: f64,
        /// Attention decoder parameters.
        #[arg(long)]
        md: f64,
        /// Decoded tokens.
        #[arg(long)]
        n: f64,
        /// Hypotheses attended to.
        #[arg(long)]
        h: f64,
        /// Second-pass beam size.
        #[arg(long)]
        b: f64,
        /// Acoustic frames.
        #[arg(long)]
        frames: f64,
        /// Padded hypothesis length.
        #[arg(long)]
        lpad: f64,
        /// Attention parameters over both layers, split evenly.
        #[arg(long, default_value_t = 2e6)]
        attention_params: f64,
    },
    /// Export attention weights of one decoded utterance as CSV and PGM.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Utterance index.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum, default_value = "text")]
        side: Side,
        /// Output path stem; `.csv` and `.pgm` are appended.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        decode: DecodeFlags,
    },
    /// Evaluate the ablation grid from a directory of checkpoints.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Directory holding `delib-<mode>-h<H>-ae<on|off>.ckpt` files.
        #[arg(long)]
        checkpoints: PathBuf,
        /// First-pass model; `<checkpoints>/rnnt.ckpt` by default.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        hyps_list: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "both,acoustic,text")]
        modes: Vec<String>,
        #[arg(long, value_delimiter = ',', value_enum, default_value = "on,off")]
        ae_list: Vec<OnOff>,
        #[arg(long, value_delimiter = ',', default_value = "beam,rescore")]
        decodes: Vec<String>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    use commands::*;
    match cli.command {
        Command::GenData { common, utterances, out } => gen_data(&common, utterances, &out),
        Command::Train {
            common,
            stage,
            data,
            init,
            out,
            log,
            steps,
            lr,
            optimizer,
            decode,
        } => {
            let mut flags = vec![("stage", Some(stage))];
            flags.push(("steps", steps.map(|v| v.to_string())));
            flags.push(("lr", lr.map(|v| v.to_string())));
            flags.push(("optimizer", optimizer));
            train(&common, flags, &decode, &data, init.as_deref(), &out, log.as_deref())
        }
        Command::Decode {
            common,
            checkpoint,
            data,
            out,
            nbest,
            decode: flags,
        } => decode(&common, &flags, &checkpoint, &data, &out, nbest.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            data,
            decode: flags,
        } => eval(&common, &flags, &checkpoint, &data),
        Command::Flops {
            mb,
            md,
            n,
            h,
            b,
            frames,
            lpad,
            attention_params,
        } => flops(mb, md, n, h, b, frames, lpad, attention_params),
        Command::Heatmap {
            common,
            checkpoint,
            data,
            index,
            side,
            out,
            decode: flags,
        } => heatmap(&common, &flags, &checkpoint, &data, index, side, &out),
        Command::Ablate {
            common,
            checkpoints,
            baseline,
            data,
            out,
            hyps_list,
            modes,
            ae_list,
            decodes,
        } => {
            let grid = AblateGrid {
                hyps: hyps_list,
                modes,
                ae: ae_list,
                decodes,
            };
            ablate(&common, &checkpoints, baseline.as_deref(), &data, &out, grid)
        }
    }
}

fn main() -> ExitCode {
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
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
