use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use diffinspect::Error;
use diffinspect_cli::commands::{
    cmd_evaluate, cmd_infer, cmd_prepare_data, cmd_report, cmd_sweep_boxes, cmd_synth_data, cmd_train, exit_code,
    EvalArgs, InferArgs, SweepArgs, SynthArgs, TrainArgs,
};

#[derive(Parser)]
#[command(
    name = "diffinspect",
    version,
    about = "Diffusion-based SEM defect detection and segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate an annotated corpus and copy it into a run-ready layout.
    PrepareData {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also re-encode the TIFF sources as JPEG under `<out>/jpg`.
        #[arg(long)]
        to_jpg: bool,
    },
    /// Generate the synthetic grating corpus.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, env = "DIFFINSPECT_SEED", default_value_t = 0)]
        seed: u64,
        /// Use the inspection corpus class proportions instead of a uniform mix.
        #[arg(long)]
        corpus_mix: bool,
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
    },
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        balanced_sampling: bool,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        eval_period: Option<usize>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Box and mask AP of a trained model on a dataset.
    Evaluate {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        boxes: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Score the ground truth against itself.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Accuracy and latency over a list of random box counts.
    SweepBoxes {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        boxes: Vec<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Detect and segment defects in one image.
    Infer {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Plots and best-AP tables for a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::PrepareData {
            images,
            annotations,
            out,
            to_jpg,
        } => print!("{}", cmd_prepare_data(&images, &annotations, &out, to_jpg)?),
        Command::SynthData {
            out,
            count,
            size,
            seed,
            corpus_mix,
            val_fraction,
        } => print!(
            "{}",
            cmd_synth_data(&SynthArgs {
                out,
                count,
                size,
                seed,
                corpus_mix,
                val_fraction,
            })?
        ),
        Command::Train {
            config,
            balanced_sampling,
            iterations,
            eval_period,
            dataset,
            out,
            resume,
        } => print!(
            "{}",
            cmd_train(&TrainArgs {
                config,
                balanced: balanced_sampling,
                iterations,
                eval_period,
                dataset,
                out,
                resume,
            })?
        ),
        Command::Evaluate {
            weights,
            dataset,
            boxes,
            steps,
            out,
            oracle,
            config,
            seed,
        } => {
            let r = cmd_evaluate(&EvalArgs {
                weights,
                dataset,
                boxes,
                steps,
                out,
                oracle,
                config,
                seed,
            })?;
            println!(
                "bbox mAP {:.4}, mask mAP {:.4}",
                r["bbox"]["map"].as_f64().unwrap_or(f64::NAN),
                r["mask"]["map"].as_f64().unwrap_or(f64::NAN)
            );
        }
        Command::SweepBoxes {
            weights,
            dataset,
            boxes,
            steps,
            out,
            config,
            seed,
        } => {
            let rows = cmd_sweep_boxes(&SweepArgs {
                weights,
                dataset,
                boxes,
                steps,
                out,
                config,
                seed,
            })?;
            print!("{}", diffinspect::eval::sweep_csv(&rows));
        }
        Command::Infer {
            weights,
            image,
            out,
            config,
            seed,
        } => {
            let preds = cmd_infer(&InferArgs {
                weights,
                image,
                out,
                config,
                seed,
            })?;
            println!("{}", serde_json::to_string(&preds).expect("predictions serialize"));
        }
        Command::Report { run, out } => {
            for p in cmd_report(&run, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Validation(problems) = &e {
                for p in problems {
                    eprintln!("  {p}");
                }
            }
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
