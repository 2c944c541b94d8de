use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use forvalue::metrics::LabelMode;
use forvalue::synth::{ClassSpec, ToySizes};
use forvalue::valuation::{ScorePath, VocabMode};
use forvalue::verify::VerifyHooks;
use forvalue_cli::*;

#[derive(Parser)]
#[command(name = "forvalue", version, about = "Forward-only training-data valuation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VocabArg {
    BatchUnion,
    Dataset,
    FullIfAvailable,
}

impl From<VocabArg> for VocabMode {
    fn from(v: VocabArg) -> Self {
        match v {
            VocabArg::BatchUnion => VocabMode::BatchUnion,
            VocabArg::Dataset => VocabMode::Dataset,
            VocabArg::FullIfAvailable => VocabMode::FullIfAvailable,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PathArg {
    Auto,
    Pairwise,
    Sketch,
}

impl From<PathArg> for ScorePath {
    fn from(p: PathArg) -> Self {
        match p {
            PathArg::Auto => ScorePath::Auto,
            PathArg::Pairwise => ScorePath::Pairwise,
            PathArg::Sketch => ScorePath::Sketch,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Influence,
    Mislabel,
}

#[derive(Clone, Copy, ValueEnum)]
enum DetectArg {
    BottomFraction,
    Value,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Random,
    Classes,
}

#[derive(Subcommand)]
enum Command {
    /// Check every sample of a dump directory.
    Validate { dump: PathBuf },
    /// Score training samples against valuation samples.
    Score {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, value_enum, default_value = "batch-union")]
        vocab_mode: VocabArg,
        #[arg(long, value_enum, default_value = "auto")]
        path: PathArg,
        #[arg(long)]
        threads: Option<usize>,
        /// Divide each score by the product of the two sequence lengths.
        #[arg(long)]
        normalize_length: bool,
    },
    /// Top training samples for one valuation sample.
    Rank {
        scores: PathBuf,
        #[arg(long)]
        valuation_id: String,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// AUC and recall against class labels.
    Eval {
        scores: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, value_enum, default_value = "influence")]
        mode: ModeArg,
    },
    /// Flag low-value training samples.
    Detect {
        scores: PathBuf,
        #[arg(long, value_enum, default_value = "bottom-fraction")]
        rule: DetectArg,
        /// Fraction for bottom-fraction, threshold for value.
        #[arg(long, allow_negative_numbers = true)]
        param: f64,
        /// Average over these valuation ids only (comma separated).
        #[arg(long, value_delimiter = ',')]
        valuation_ids: Option<Vec<String>>,
    },
    /// Run the toy-model property suite.
    ToyVerify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        vocab: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 12)]
        n_train: usize,
        #[arg(long, default_value_t = 4)]
        n_valid: usize,
        #[arg(long, hide = true, allow_negative_numbers = true)]
        perturb_sketch: Option<f64>,
    },
    /// Write toy train/valid dumps and a labels file.
    ToyExport {
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "classes")]
        dataset: DatasetArg,
        /// Fraction of training labels moved to another class.
        #[arg(long, default_value_t = 0.0)]
        flip_fraction: f64,
        /// Gradient steps on the valuation samples before export.
        #[arg(long, default_value_t = 0)]
        train_steps: usize,
        #[arg(long, default_value_t = 0.5)]
        learning_rate: f64,
    },
    /// Time synthetic scoring runs.
    Bench {
        #[arg(long, default_value_t = 1000)]
        n_train: usize,
        #[arg(long, default_value_t = 1000)]
        n_valid: usize,
        #[arg(long, default_value_t = 32)]
        len: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 500)]
        vocab: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        /// Sweep n_train and vocab and fit runtime exponents.
        #[arg(long)]
        scaling: bool,
    },
}

fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Validate { dump } => cmd_validate(&dump, out).map(drop),
        Command::Score {
            train,
            valid,
            out: csv,
            batch_size,
            vocab_mode,
            path,
            threads,
            normalize_length,
        } => {
            let opts = ScoreOptions {
                batch_size,
                vocab_mode: vocab_mode.into(),
                path: path.into(),
                threads,
                normalize_length,
            };
            cmd_score(&train, &valid, &csv, &opts, out).map(drop)
        }
        Command::Rank {
            scores,
            valuation_id,
            top_k,
        } => cmd_rank(&scores, &valuation_id, top_k, out).map(drop),
        Command::Eval { scores, labels, mode } => {
            let mode = match mode {
                ModeArg::Influence => LabelMode::Influence,
                ModeArg::Mislabel => LabelMode::Mislabel,
            };
            cmd_eval(&scores, &labels, mode, out).map(drop)
        }
        Command::Detect {
            scores,
            rule,
            param,
            valuation_ids,
        } => {
            let rule = match rule {
                DetectArg::BottomFraction => DetectRule::BottomFraction(param),
                DetectArg::Value => DetectRule::Below(param),
            };
            cmd_detect(&scores, rule, valuation_ids.as_deref(), out).map(drop)
        }
        Command::ToyVerify {
            seed,
            vocab,
            dim,
            n_train,
            n_valid,
            perturb_sketch,
        } => {
            let sizes = ToySizes {
                vocab,
                dim,
                n_train,
                n_valid,
                ..ToySizes::default()
            };
            cmd_toy_verify(seed, &sizes, VerifyHooks { perturb_sketch }, out).map(drop)
        }
        Command::ToyExport {
            out: dir,
            seed,
            dataset,
            flip_fraction,
            train_steps,
            learning_rate,
        } => {
            let opts = ToyExportOptions {
                seed,
                dataset: match dataset {
                    DatasetArg::Random => ToyDataset::Random,
                    DatasetArg::Classes => ToyDataset::Classes,
                },
                classes: ClassSpec {
                    flip_fraction,
                    ..ClassSpec::default()
                },
                train_steps,
                learning_rate,
                ..ToyExportOptions::default()
            };
            cmd_toy_export(&dir, &opts, out).map(drop)
        }
        Command::Bench {
            n_train,
            n_valid,
            len,
            dim,
            vocab,
            batch_size,
            threads,
            repeats,
            scaling,
        } => {
            let opts = BenchOptions {
                n_train,
                n_valid,
                len,
                dim,
                vocab,
                batch_size,
                threads,
                repeats,
                ..BenchOptions::default()
            };
            cmd_bench(&opts, scaling, out).map(drop)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match run(cli, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
