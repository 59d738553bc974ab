//! Command-line driver for the jersey-number recognition lab.
//!
//! Exit codes: 0 on success, 1 for spec/validation problems, 2 for runtime
//! failures (io, training aborts).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use jerseynum::data::{DatasetManifest, ImageStore, Split};
use jerseynum::eval::PredictionMode;
use jerseynum::experiment::{
    emit_curves, ensure_dataset, evaluate_model, parse_spec, run_ablation, run_backbone_sweep,
    run_comparison, run_experiment, ExperimentError, ExperimentSpec, Precision, ResultsTable,
};
use jerseynum::model::Network;
use jerseynum::trainer::TrainingHistory;

#[derive(Parser)]
#[command(
    name = "jerseynum",
    about = "Multi-task jersey number recognition lab",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct SpecArgs {
    /// Experiment spec file (TOML).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the spec's training precision.
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(format!("unknown precision {other:?}; use f32 or f64")),
    }
}

fn parse_mode(s: &str) -> Result<PredictionMode, String> {
    match s {
        "holistic" => Ok(PredictionMode::Holistic),
        "digit-wise" => Ok(PredictionMode::DigitWise),
        "multi-task-default" => Ok(PredictionMode::MultiTaskDefault),
        "fused" => Ok(PredictionMode::Fused),
        other => Err(format!(
            "unknown mode {other:?}; use holistic | digit-wise | multi-task-default | fused"
        )),
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::from_tag(s).map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the spec's dataset (manifest + PNG images).
    Gen {
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Train a single named run from the spec.
    Train {
        #[command(flatten)]
        spec: SpecArgs,
        /// Run name ([runs.<name>] section).
        #[arg(long)]
        run: String,
        /// Override the run's seed list with a single seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on one split of a generated dataset.
    Eval {
        /// Checkpoint file written by train/compare.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory containing manifest.txt and images/.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_parser = parse_split, default_value = "test")]
        split: Split,
        #[arg(long, value_parser = parse_mode, default_value = "multi-task-default")]
        mode: PredictionMode,
    },
    /// The holistic / digit-wise / multi-task comparison.
    Compare {
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// The 8-point loss-weight ablation grid.
    Ablate {
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// The backbone sweep at fixed loss weights.
    Backbones {
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Plot validation-accuracy curves from history CSVs.
    Curves {
        /// Repeatable name=path pairs of history CSVs.
        #[arg(long = "history", required = true)]
        histories: Vec<String>,
        /// Output directory for curves.csv and curves.svg.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are not errors.
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_validation(&e) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn is_validation(e: &anyhow::Error) -> bool {
    match e.downcast_ref::<ExperimentError>() {
        Some(ExperimentError::Spec(_)) | Some(ExperimentError::Loss(_)) => true,
        Some(ExperimentError::Run { source, .. }) => {
            matches!(**source, ExperimentError::Spec(_) | ExperimentError::Loss(_))
        }
        _ => false,
    }
}

fn load_spec(args: &SpecArgs) -> Result<ExperimentSpec, anyhow::Error> {
    let mut spec = parse_spec(&args.spec)?;
    if let Some(p) = args.precision {
        spec.precision = p;
    }
    Ok(spec)
}

fn print_table(table: &ResultsTable) {
    print!("{}", table.to_csv());
    println!("# manifest_sha256={}", table.manifest_sha256);
}

fn run(cli: Cli) -> Result<(), anyhow::Error> {
    match cli.cmd {
        Cmd::Gen { spec } => {
            let s = load_spec(&spec)?;
            let (manifest, dir) = ensure_dataset(&s, &spec.out)?;
            println!(
                "dataset: {} records ({} train / {} val / {} test) under {}",
                manifest.records.len(),
                manifest.split_len(Split::Train),
                manifest.split_len(Split::Val),
                manifest.split_len(Split::Test),
                dir.display()
            );
            println!("manifest_sha256={}", manifest.sha256());
        }
        Cmd::Train { spec, run, seed } => {
            let mut s = load_spec(&spec)?;
            let idx = s
                .runs
                .iter()
                .position(|r| r.name == run)
                .ok_or_else(|| ExperimentError::Spec(format!("no run named {run:?} in spec")))?;
            let mut one = s.runs[idx].clone();
            if let Some(seed) = seed {
                one.seeds = vec![seed];
            }
            s.runs = vec![one];
            let table = run_experiment(&s, &spec.out)?;
            print_table(&table);
        }
        Cmd::Eval {
            checkpoint,
            dataset,
            split,
            mode,
        } => {
            let manifest = DatasetManifest::load(&dataset.join("manifest.txt"))?;
            // Probe the stored precision.
            let report = match Network::<f32>::load_checkpoint(&checkpoint) {
                Ok((model, _)) => {
                    let mut store = ImageStore::new(&manifest, &dataset);
                    evaluate_model(&model, &mut store, split, mode)?
                }
                Err(_) => {
                    let (model, _) = Network::<f64>::load_checkpoint(&checkpoint)?;
                    let mut store = ImageStore::new(&manifest, &dataset);
                    evaluate_model(&model, &mut store, split, mode)?
                }
            };
            println!("method,accuracy,precision,recall,f1");
            println!("{}", report.to_csv_row(mode.tag()));
        }
        Cmd::Compare { spec } => {
            let s = load_spec(&spec)?;
            let table = run_comparison(&s, &spec.out)?;
            print_table(&table);
        }
        Cmd::Ablate { spec } => {
            let s = load_spec(&spec)?;
            let table = run_ablation(&s, &spec.out)?;
            print_table(&table);
            let best = table.best_row_by_accuracy();
            println!(
                "# best row: {} with mean accuracy {:.4}",
                table.rows[best].name,
                table.rows[best].mean_accuracy()
            );
        }
        Cmd::Backbones { spec } => {
            let s = load_spec(&spec)?;
            let table = run_backbone_sweep(&s, &spec.out)?;
            print_table(&table);
        }
        Cmd::Curves { histories, out } => {
            let mut names = Vec::new();
            let mut parsed = Vec::new();
            for h in &histories {
                let (name, path) = h.split_once('=').ok_or_else(|| {
                    ExperimentError::Spec(format!("--history wants name=path, got {h:?}"))
                })?;
                names.push(name.to_string());
                let text = std::fs::read_to_string(path)?;
                parsed.push(TrainingHistory::from_csv(&text)?);
            }
            std::fs::create_dir_all(&out)?;
            emit_curves(
                &parsed,
                &names,
                &out.join("curves.csv"),
                &out.join("curves.svg"),
            )?;
            println!("wrote {}", out.join("curves.svg").display());
        }
    }
    Ok(())
}
