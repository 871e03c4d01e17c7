use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unifiq_core::datagen::{build_dataset, Manifest, Split, MANIFEST_FILE};
use unifiq_core::eval::{consistency_mse, evaluate, EvalConfig};
use unifiq_core::gradcheck::{default_grad_check, TOLERANCE};
use unifiq_core::image::RgbImage;
use unifiq_core::train::{train_samples, TrainConfig, TrainMode};
use unifiq_core::{Error, Mode, ModePair, Model, ModelConfig, WeightStore};

#[derive(Parser)]
#[command(name = "unifiq", version, about = "Unified FR/NR image quality model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic distorted-image dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_base: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from scratch and write the weights.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "nr")]
        mode: TrainMode,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 50)]
        tmax: usize,
    },
    /// Evaluate on the test split and write a JSON report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value = "nr")]
        mode: Mode,
        #[arg(long, default_value_t = 8)]
        crops: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
        /// Also report the mean squared FR/NR score gap.
        #[arg(long)]
        consistency: bool,
    },
    /// Score one image; passing --ref switches to full-reference mode.
    Score {
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Finite-difference check of every weight tensor on fresh weights.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sampled elements per tensor; 0 checks every element.
        #[arg(long, default_value_t = 4)]
        per_param: usize,
    },
    /// Write encoder, HA and SDA feature maps as PGM heatmaps.
    DumpMaps {
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exit status for a failed run: 2 for filesystem trouble, 1 otherwise.
fn exit_code(err: &Error) -> u8 {
    if err.is_io() {
        2
    } else {
        1
    }
}

fn kind(err: &Error) -> &'static str {
    match err {
        _ if err.is_io() => "io",
        Error::Format { .. } => "format",
        Error::Degenerate(_) => "degenerate",
        Error::Csv { .. } => "format",
        _ => "contract",
    }
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn load_weights(model: &Model, path: &Path) -> Result<WeightStore, Error> {
    let store = WeightStore::load(path)?;
    model.params.validate(&store)?;
    Ok(store)
}

fn load_pair(image: &Path, reference: Option<&Path>) -> Result<ModePair, Error> {
    let dis = RgbImage::read_ppm(image)?;
    match reference {
        Some(r) => ModePair::fr(dis, RgbImage::read_ppm(r)?),
        None => Ok(ModePair::nr(dis)),
    }
}

/// Runs one subcommand; `Ok(false)` means it completed but its check failed.
fn run(command: Command) -> Result<bool, Error> {
    let model = Model::new(ModelConfig::default());
    match command {
        Command::GenData { out, n_base, seed } => {
            let manifest = build_dataset(&out, n_base, seed)?;
            eprintln!("wrote {} samples", manifest.rows.len());
            println!("{}", out.join(MANIFEST_FILE).display());
        }
        Command::Train {
            data,
            mode,
            epochs,
            seed,
            out,
            lr,
            batch,
            tmax,
        } => {
            let cfg = TrainConfig {
                mode,
                epochs,
                batch_size: batch,
                lr0: lr,
                t_max: tmax,
                seed,
                ..Default::default()
            };
            let samples = Manifest::load(&data)?.load_split(Split::Train)?;
            let outcome = train_samples(&samples, &cfg, |e, _| {
                eprintln!("epoch {} lr {:.3e} loss {:.6}", e.epoch + 1, e.lr, e.loss);
                true
            })?;
            outcome.weights.save(&out)?;
            println!("{}", out.display());
        }
        Command::Eval {
            data,
            weights,
            mode,
            crops,
            seed,
            report,
            consistency,
        } => {
            let store = load_weights(&model, &weights)?;
            let samples = Manifest::load(&data)?.load_split(Split::Test)?;
            let cfg = EvalConfig::new(mode, crops, seed);
            let mut metrics = evaluate(&model, &store, &samples, &cfg)?;
            if consistency {
                metrics.mse_fr_nr = Some(consistency_mse(&model, &store, &samples, &cfg)?);
            }
            let json = metrics.to_json();
            std::fs::write(&report, &json).map_err(|e| Error::Io {
                path: report.clone(),
                source: e,
            })?;
            print!("{json}");
        }
        Command::Score {
            image,
            reference,
            weights,
        } => {
            let store = load_weights(&model, &weights)?;
            let pair = load_pair(&image, reference.as_deref())?;
            println!("{:.6}", model.score(&store, &pair)?);
        }
        Command::GradCheck { seed, per_param } => {
            let report = default_grad_check(&model, seed, (per_param > 0).then_some(per_param))?;
            eprintln!(
                "{} tensors, {} elements checked",
                report.params.len(),
                report.elements_checked()
            );
            println!("{:.6e}", report.max_rel_error());
            return Ok(report.max_rel_error() < TOLERANCE);
        }
        Command::DumpMaps {
            image,
            reference,
            weights,
            out,
        } => {
            let store = load_weights(&model, &weights)?;
            let pair = load_pair(&image, reference.as_deref())?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            for path in model.dump_feature_maps(&store, &pair, &out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) if !err.use_stderr() => {
            // --help and --version
            let _ = err.print();
            return ExitCode::SUCCESS;
        }
        Err(err) => {
            let _ = err.print();
            eprintln!("{}", error_line("usage", &err.kind().to_string()));
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("{}", error_line(kind(&err), &err.to_string()));
            ExitCode::from(exit_code(&err))
        }
    }
}
