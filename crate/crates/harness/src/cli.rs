//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fat_core::forced::ForcedVariant;
use fat_core::metrics::MetricReport;
use fat_core::model::{checkpoint, ModelConfig};
use fat_core::{Error, Model, Result};

use crate::ablation::{run_ablation, AblationRow};
use crate::check::model_grad_check;
use crate::config::ExperimentConfig;
use crate::dataset_io::export_dataset;
use crate::export::{attention_heatmaps, write_heatmaps, ImageFormat};
use crate::synth::{generate_dataset, generate_sample, GenerationSpec};
use crate::train::{evaluate, train, write_run};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "fat", about = "Train, ablate and inspect forced-attention video transformers on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `experiment.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `experiment.out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `model.forced_variant` (off, a, b, c, d, e).
    #[arg(long)]
    forced_variant: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it to `<out>/data`.
    Generate(Common),
    /// Train one model; writes config, per-epoch record and best checkpoint.
    Train(Common),
    /// Train ablation rows over several seeds; writes `<out>/ablation.csv`.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated rows, or `all`.
        #[arg(long)]
        rows: Option<String>,
        /// Number of seeds per row.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Evaluate a checkpoint on the validation split of the configured data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write attention heatmaps of a checkpoint for one synthetic sample.
    ExportAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Seed of the generated sample.
        #[arg(long, default_value_t = 0)]
        sample: u64,
        #[arg(long, default_value = "pgm")]
        format: String,
    },
    /// Finite-difference check of a whole model's gradients.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Model preset to check.
        #[arg(long, default_value = "tiny")]
        preset: String,
        /// Random coordinates checked per parameter tensor.
        #[arg(long, default_value_t = 2)]
        per_param: usize,
    },
}

impl Common {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::for_model(ModelConfig::desk()),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out.clone_from(o);
        }
        if let Some(v) = &self.forced_variant {
            cfg.model.forced_variant = v.parse::<ForcedVariant>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse(_) | Error::Unsupported(_) => EXIT_CONFIG,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn write_report(dir: &Path, report: &MetricReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), report.to_csv())?;
    Ok(())
}

fn load_model(path: &Path) -> Result<Model<f64>> {
    checkpoint::load(path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = c.experiment()?;
            let d = &cfg.data;
            let data = generate_dataset(d.samples, cfg.data_seed(), &d.spec, d.train_fraction)?;
            let dir = cfg.out.join("data");
            export_dataset(&data, &dir)?;
            println!(
                "wrote {} samples ({} train / {} val) to {}",
                data.samples.len(),
                data.train.len(),
                data.val.len(),
                dir.display()
            );
            let counts = data.class_counts(&(0..data.samples.len()).collect::<Vec<_>>());
            if !counts.is_empty() {
                println!("class counts: {counts:?}");
            }
        }
        Command::Train(c) => {
            let cfg = c.experiment()?;
            let out = train(&cfg)?;
            write_run(&cfg.out, &cfg, &out)?;
            for e in &out.record.epochs {
                let loss = e.train_loss.map_or("-".to_string(), |l| format!("{l:.6}"));
                println!("epoch {:>3}  train {loss}  val {:.6}", e.epoch, e.val.loss_like());
            }
            println!("best epoch {}; {:.1}s", out.record.best_epoch, out.record.wall_time.as_secs_f64());
            print!("{}", out.record.best());
        }
        Command::Ablate { common, rows, seeds } => {
            let cfg = common.experiment()?;
            let rows = match rows {
                Some(r) => AblationRow::parse_list(&r)?,
                None => cfg.ablation.rows.clone(),
            };
            let seeds = seeds.unwrap_or(cfg.ablation.seeds);
            let table = run_ablation(&cfg, &rows, seeds, |r| {
                println!(
                    "{:<16} seed {:<4} best epoch {:<3} val {:.6}",
                    r.row.id(),
                    r.seed,
                    r.output.record.best_epoch,
                    r.output.record.best().loss_like()
                );
            })?;
            std::fs::create_dir_all(&cfg.out)?;
            let path = cfg.out.join("ablation.csv");
            std::fs::write(&path, table.to_csv()?)?;
            println!("wrote {} runs to {}", table.runs.len(), path.display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.experiment()?;
            let model = load_model(&checkpoint)?;
            let mut spec = cfg.data.spec.clone();
            let base = GenerationSpec::for_model(&model.cfg);
            spec.audio = base.audio;
            spec.transcript = base.transcript;
            spec.metadata_width = base.metadata_width;
            let data = generate_dataset(cfg.data.samples, cfg.data_seed(), &spec, cfg.data.train_fraction)?;
            let val: Vec<_> = data.val.iter().map(|&i| &data.samples[i]).collect();
            let report = evaluate(&model, &val, cfg.optim.batch_size)?;
            write_report(&cfg.out, &report)?;
            print!("{report}");
        }
        Command::ExportAttention {
            common,
            checkpoint,
            sample,
            format,
        } => {
            let cfg = common.experiment()?;
            let format: ImageFormat = format.parse()?;
            let model = load_model(&checkpoint)?;
            let spec = GenerationSpec::for_model(&model.cfg);
            let s = generate_sample(sample, &spec, None)?;
            let maps = attention_heatmaps(&model, &s.to_input(model.cfg.seg_per_frame))?;
            let files = write_heatmaps(&maps, &cfg.out, format)?;
            println!("wrote {} files to {}", files.len(), cfg.out.display());
        }
        Command::GradCheck {
            common,
            preset,
            per_param,
        } => {
            let seed = common.seed.unwrap_or(0);
            let mut model = ModelConfig::preset(&preset)?;
            if let Some(v) = &common.forced_variant {
                model.forced_variant = v.parse()?;
            }
            model.drop_path = 0.0;
            let err = model_grad_check(model, seed, per_param, 1e-5)?;
            println!("max relative error {err:.3e}");
            if err > 1e-4 {
                return Err(Error::Numeric(format!("gradient check failed: {err:.3e} > 1e-4")));
            }
        }
    }
    Ok(())
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn main_with<I, A>(argv: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
