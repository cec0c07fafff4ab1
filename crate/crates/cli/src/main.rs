//! `hdc`: synthesize data, train cascades, evaluate and export descriptors.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hdc_core::data::save_csv;
use hdc_core::eval::histogram_csv;
use hdc_core::gradcheck::{check_case, Fault, GradCheckCase, TOLERANCE};
use hdc_core::trainer::{train_with_observer, FileObserver};
use hdc_core::{
    evaluate, init_model, load_checkpoint, CascadeModel, Dataset, EvalOptions, HdcError, Matrix,
    RankBy, TrainMode,
};

use config::{CliError, RunConfig};

#[derive(Parser)]
#[command(
    name = "hdc",
    version,
    about = "Hard-aware deeply cascaded metric embedding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; omitted sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as CSV.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write `model.hdc` plus `train_log.csv`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<TrainMode>,
        #[arg(long)]
        rank_by: Option<RankBy>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Retrieval metrics of a checkpoint on the evaluation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
        #[arg(long, value_delimiter = ',')]
        recall_at: Option<Vec<usize>>,
    },
    /// Write descriptors of the evaluation split as CSV.
    Embed {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
    },
    /// Write positive/negative distance histograms as CSV.
    Histogram {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
    },
    /// Compare analytic and numeric gradients on a tiny cascade.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long)]
        rank_by: Option<RankBy>,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Args, Clone)]
struct Target {
    /// Defaults to `<output-dir>/model.hdc`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// 1-based sub-model; omitted means the concatenated descriptor.
    #[arg(long)]
    level: Option<usize>,
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
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.clone();
    }
    Ok(cfg)
}

fn prepare_output(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| HdcError::io(&cfg.output_dir, e))?;
    write(&cfg.output_dir.join(RunConfig::ECHO_FILE), &cfg.to_toml()?)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| HdcError::io(path, e).into())
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth { common } => {
            let cfg = resolve(&common)?;
            cfg.validate()?;
            prepare_output(&cfg)?;
            let ds = hdc_core::synth_clusters(&cfg.data.synth)?;
            let path = cfg.output_dir.join("dataset.csv");
            save_csv(&ds, &path)?;
            println!(
                "{} classes, {} points -> {}",
                ds.num_classes(),
                ds.len(),
                path.display()
            );
        }
        Command::Train {
            common,
            mode,
            rank_by,
            threads,
            iterations,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(m) = mode {
                cfg.train.mode = m;
            }
            if let Some(r) = rank_by {
                cfg.train.rank_by = r;
            }
            if let Some(t) = threads {
                cfg.train.threads = t;
            }
            if let Some(i) = iterations {
                cfg.train.iterations = i;
            }
            cfg.validate()?;
            let (train_set, _) = cfg.load_split()?;
            prepare_output(&cfg)?;
            let model = init_model(&cfg.cascade)?;
            let mut observer = FileObserver::create(&cfg.output_dir)?;
            let (model, log) =
                train_with_observer(model, &train_set, &cfg.train, &cfg.sampler, &mut observer)
                    .map_err(CliError::training)?;
            let path = observer.finish(&model)?;
            let last = log.records.last().map_or(f64::NAN, |r| r.loss);
            println!(
                "trained {} for {} iterations, final loss {last:.6} -> {}",
                cfg.train.mode,
                log.records.len(),
                path.display()
            );
        }
        Command::Eval {
            common,
            target,
            recall_at,
        } => {
            let cfg = resolve(&common)?;
            let (desc, labels, levels, title) = descriptors(&cfg, &target)?;
            let mut opts = EvalOptions::for_levels(levels);
            if let Some(ks) = recall_at {
                opts.ks = ks;
            }
            let report = evaluate(&desc, &labels, &opts)?;
            prepare_output(&cfg)?;
            let text = report.to_text(&title);
            write(&cfg.output_dir.join("report.txt"), &text)?;
            write(&cfg.output_dir.join("recall.csv"), &report.recall_csv())?;
            write(
                &cfg.output_dir.join("histogram.csv"),
                &histogram_csv(&report.histogram),
            )?;
            print!("{text}");
        }
        Command::Embed { common, target } => {
            let cfg = resolve(&common)?;
            let (desc, labels, _, _) = descriptors(&cfg, &target)?;
            prepare_output(&cfg)?;
            let path = cfg.output_dir.join("descriptors.csv");
            save_csv(&Dataset::new(desc, labels)?, &path)?;
            println!("descriptors -> {}", path.display());
        }
        Command::Histogram { common, target } => {
            let cfg = resolve(&common)?;
            let (desc, labels, levels, _) = descriptors(&cfg, &target)?;
            let opts = EvalOptions::for_levels(levels);
            let h = hdc_core::eval::distance_histograms(
                &desc,
                &labels,
                opts.bin_count,
                opts.bin_range,
            )?;
            prepare_output(&cfg)?;
            let path = cfg.output_dir.join("histogram.csv");
            write(&path, &histogram_csv(&h))?;
            println!("overlap {:.6} -> {}", h.overlap(), path.display());
        }
        Command::Gradcheck {
            common,
            levels,
            rank_by,
            inject_fault,
        } => {
            if !(1..=4).contains(&levels) {
                return Err(HdcError::Config("gradcheck supports 1 to 4 levels".into()).into());
            }
            let mut case = GradCheckCase::tiny(levels);
            if let Some(seed) = common.seed {
                case.cascade.seed = seed;
                case.data_seed = seed.wrapping_add(1);
            }
            if let Some(r) = rank_by {
                case.rank_by = r;
            }
            let fault = if inject_fault {
                Fault::NegateHeadWeights
            } else {
                Fault::None
            };
            let report = check_case(&case, fault)?;
            println!(
                "max relative error {:.3e} at parameter {} (analytic {:.9e}, numeric {:.9e})",
                report.max_relative_error,
                report.worst_parameter_index,
                report.analytic_value,
                report.numeric_value
            );
            if !report.passes(TOLERANCE) {
                return Err(CliError::GradCheck(report.max_relative_error));
            }
            println!("gradcheck passed");
        }
    }
    Ok(())
}

/// Descriptors of the evaluation split, their labels, the number of unit
/// embeddings they concatenate, and a report title.
fn descriptors(
    cfg: &RunConfig,
    target: &Target,
) -> Result<(Matrix, Vec<u32>, usize, String), CliError> {
    cfg.validate()?;
    let path = target
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join(FileObserver::FINAL_CHECKPOINT));
    let model: CascadeModel = load_checkpoint(&path)?;
    let (_, eval_set) = cfg.load_split()?;
    let x = eval_set.features();
    let (desc, levels, title) = match target.level {
        None => (
            model.extract_descriptor(x)?,
            model.levels(),
            "descriptor".to_string(),
        ),
        Some(l) if (1..=model.levels()).contains(&l) => {
            (model.extract_level(x, l - 1)?, 1, format!("level {l}"))
        }
        Some(l) => {
            return Err(
                HdcError::Config(format!("level {l} out of range 1..={}", model.levels())).into(),
            )
        }
    };
    Ok((desc, eval_set.labels().to_vec(), levels, title))
}
