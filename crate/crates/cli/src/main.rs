//! `faultdiag`: bearing fault classification from the command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure.

mod config;
mod data;
mod failure;
mod output;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use faultdiag::dnn::{self, Architecture, PipelineConfig};
use faultdiag::eval::{self, phase, EvalReport, Timings};
use faultdiag::ingest::{self, SyntheticConfig};
use faultdiag::mrmr::{self, MrmrConfig, SelectionMethod, DEFAULT_BINS};
use faultdiag::transfer::{self, TransferPlan};

use config::{ExperimentConfig, Seeds, SettingsFile};
use failure::Failure;
use output::{OutDir, MODEL_FILE};

/// Writes to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($arg)*);
    }};
}

const DEFAULT_OUT_DIR: &str = "faultdiag-out";

#[derive(Parser)]
#[command(name = "faultdiag", version, about = "Bearing fault diagnosis with stacked sparse autoencoders")]
struct Cli {
    /// Worker threads; 0 uses the default pool.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `seed` in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a synthetic segment table.
    Synth {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 400)]
        per_class: usize,
        #[arg(long, default_value_t = ingest::DEFAULT_SEGMENT_LEN)]
        dim: usize,
        #[arg(long, default_value_t = 0.05)]
        noise_std: f64,
        #[arg(long, default_value_t = 1.0)]
        freq_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut signal CSVs into a segment table.
    Segment {
        #[arg(long = "input", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = ingest::DEFAULT_SEGMENT_LEN)]
        len: usize,
        /// Defaults to `len`.
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep the `m` best mRMR columns of a table.
    Select {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[arg(long, value_enum, default_value_t = MethodArg::Literal)]
        method: MethodArg,
        #[command(flatten)]
        table: TableArgs,
        #[arg(long)]
        out: PathBuf,
        /// Also write the full ranking here.
        #[arg(long)]
        ranking: Option<PathBuf>,
    },
    /// Layer-wise pretraining plus softmax pretraining, no fine-tuning.
    Pretrain {
        #[arg(long)]
        train: PathBuf,
        /// Layer widths, e.g. 100,50,40,20.
        #[arg(long, value_delimiter = ',', required = true)]
        arch: Vec<usize>,
        /// Select this many columns by mRMR first.
        #[arg(long)]
        m: Option<usize>,
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune every layer of a saved model.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transfer a source model to target data and fine-tune it.
    Transfer {
        #[arg(long)]
        source_model: PathBuf,
        #[arg(long)]
        target_train: PathBuf,
        /// Without a test table the target is cross-validated.
        #[arg(long)]
        target_test: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a saved model on a labelled table.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[command(flatten)]
        table: TableArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum MethodArg {
    Literal,
    Incremental,
}

impl From<MethodArg> for SelectionMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Literal => SelectionMethod::Literal,
            MethodArg::Incremental => SelectionMethod::Incremental,
        }
    }
}

#[derive(Args)]
struct TableArgs {
    #[arg(long, default_value = ingest::LABEL_COLUMN)]
    label_column: String,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON with `schema_version`, `trainer`, `sparsity` and `transfer`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    table: TableArgs,
}

impl TrainArgs {
    fn settings(&self) -> Result<SettingsFile, Failure> {
        match &self.config {
            Some(p) => SettingsFile::load(p),
            None => Ok(SettingsFile::default()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads;
    let result = faultdiag::par::with_threads(threads, move || dispatch(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("faultdiag: {f}");
            ExitCode::from(u8::try_from(f.code).unwrap_or(1))
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { config, out, seed } => cmd_run(&config, out, seed),
        Command::Synth {
            classes,
            per_class,
            dim,
            noise_std,
            freq_scale,
            seed,
            out,
        } => {
            let data = ingest::generate_synthetic_with(&SyntheticConfig {
                classes,
                per_class,
                segment_len: dim,
                noise_std,
                seed,
                freq_scale,
            })?;
            data.write_csv(&out)?;
            say!("wrote {} rows x {} columns to {}\n", data.n_samples(), dim, out.display());
            Ok(())
        }
        Command::Segment { inputs, len, stride, out } => {
            let data = data::segment_signals(&inputs, len, stride.unwrap_or(len))?;
            data.write_csv(&out)?;
            say!("wrote {} segments of length {len} to {}\n", data.n_samples(), out.display());
            Ok(())
        }
        Command::Select {
            input,
            m,
            bins,
            method,
            table,
            out,
            ranking,
        } => {
            let data = ingest::load_csv(&input, &table.label_column)?;
            let cfg = MrmrConfig {
                m,
                bins,
                method: method.into(),
            };
            let (rank, selected) = mrmr::select_features(&data, &cfg)?;
            selected.write_csv(&out)?;
            if let Some(path) = ranking {
                std::fs::write(&path, rank.to_csv(data.feature_names()))
                    .map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
            }
            say!("kept {m} of {} columns: {}\n", data.n_features(), selected.feature_names().join(","));
            Ok(())
        }
        Command::Pretrain {
            train,
            arch,
            m,
            common,
            out,
        } => {
            let settings = common.settings()?;
            let data = ingest::load_csv(&train, &common.table.label_column)?;
            let mut trainer = settings.trainer.resolve(Seeds::from_top(common.seed).source);
            trainer.epochs_finetune = 0;
            let mut pipeline = PipelineConfig::new(Architecture {
                layer_dims: arch,
                sparsity: settings.sparsity,
                trainer,
            });
            if let Some(m) = m {
                pipeline = pipeline.with_mrmr(MrmrConfig {
                    m,
                    ..MrmrConfig::default()
                });
            }
            let fit = dnn::fit_pipeline(&data, &pipeline)?;
            dnn::save_model(&fit.model, &out)?;
            say!("{}", dnn::describe_layers(&fit.model.network.encoders));
            say!("model written to {}\n", out.display());
            Ok(())
        }
        Command::Finetune {
            model,
            train,
            common,
            out,
        } => {
            let settings = common.settings()?;
            let model = dnn::load_model(&model)?;
            let data = ingest::load_csv(&train, &common.table.label_column)?;
            let trainer = settings.trainer.resolve(Seeds::from_top(common.seed).source);
            let (tuned, record) = dnn::fine_tune(&model, &data, &trainer)?;
            dnn::save_model(&tuned, &out)?;
            say!(
                "fine-tuned {} epochs, final loss {:.6}; model written to {}\n",
                record.epochs,
                record.trace.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
            Ok(())
        }
        Command::Transfer {
            source_model,
            target_train,
            target_test,
            k,
            common,
            out,
        } => {
            let settings = common.settings()?;
            let label = &common.table.label_column;
            let seeds = Seeds::from_top(common.seed);
            let plan = TransferPlan {
                source: dnn::load_model(&source_model)?,
                target_train: ingest::load_csv(&target_train, label)?,
                target_test: target_test.as_ref().map(|p| ingest::load_csv(p, label)).transpose()?,
                trainer: settings.trainer.resolve(seeds.target),
                options: settings.transfer,
            };
            let outcome = transfer::dtl_train(&plan)?;
            let report = match outcome.report {
                Some(r) => r,
                None => {
                    transfer::cross_validate_dtl(
                        &plan.source,
                        &plan.target_train,
                        &plan.trainer,
                        &plan.options,
                        k,
                        seeds.cv,
                    )?
                    .report
                }
            };
            let dir = OutDir::create(out)?;
            dir.model(MODEL_FILE, &outcome.fit.model)?;
            write_report(&dir, &report)?;
            say!("autoencoder evaluations during transfer: {}\n", outcome.sae_evaluations);
            say!("{}", output::summary(&report));
            Ok(())
        }
        Command::Evaluate { model, test, table, out } => {
            let model = dnn::load_model(&model)?;
            let data = ingest::load_csv(&test, &table.label_column)?;
            let report = eval::evaluate_model(&model, &data, "evaluate", Timings::default())?;
            let dir = OutDir::create(out)?;
            write_report(&dir, &report)?;
            say!("{}", output::summary(&report));
            Ok(())
        }
    }
}

fn write_report(dir: &OutDir, report: &EvalReport) -> Result<(), Failure> {
    dir.report(report)?;
    dir.timings(&eval::timing_report(report))
}

fn cmd_run(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let base = config
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    let out_path = match (out, &cfg.output) {
        (Some(p), _) => p,
        (None, Some(p)) => data::resolve(base, p),
        (None, None) => PathBuf::from(DEFAULT_OUT_DIR),
    };
    let dir = OutDir::create(&out_path)?;
    let outcome = run::execute(&cfg, base, &dir)?;
    say!("{}", output::summary(&outcome.report));
    if let Some(t) = outcome.report.timings.get(phase::FINETUNE) {
        say!("fine-tuning time {t:.2} s\n");
    }
    say!("artifacts in {}\n", out_path.display());
    Ok(())
}
