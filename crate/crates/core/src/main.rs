use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use uchfr_core::backbone::Checkpoint;
use uchfr_core::checks::gradient_suite;
use uchfr_core::config::{AblationMatrix, RunConfig};
use uchfr_core::data::Dataset;
use uchfr_core::eval::{evaluate_checkpoint, raw_feature_rank1};
use uchfr_core::trainer::{
    loss_matrix_cells, margin_grid_cells, pretrain, run_ablation, train_hfr, AblationSpec, TrainOutput,
};
use uchfr_core::{DType, Error, Real, Result};

#[derive(Parser, Debug)]
#[command(name = "uchfr", version, about = "Two-modality recognition with Unit-Class loss and a pair discriminator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate (or load) the configured dataset and write it as an archive.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classification pretraining of the backbone.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset archive; defaults to building the configured data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a pretraining checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Joint metric + discriminator training from a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pretrained checkpoint, or a joint-stage checkpoint to resume.
        #[arg(long)]
        init_from: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the held-out split and write `<out>.json` / `<out>.csv`.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also report raw-feature nearest-neighbour Rank-1.
        #[arg(long)]
        raw_baseline: bool,
    },
    /// Train and evaluate an ablation matrix over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; defaults to `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        matrix: Option<MatrixArg>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MatrixArg {
    Losses,
    MarginGrid,
    Both,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn load_data(cfg: &RunConfig, path: Option<&Path>) -> Result<Dataset> {
    match path {
        Some(p) => Dataset::import(p),
        None => cfg.build_dataset(),
    }
}

fn write_outputs(out: &Path, o: &TrainOutput) -> Result<()> {
    o.checkpoint.save(out)?;
    let log_path = log_path(out);
    o.log.save(&log_path)?;
    let last = o.log.records.last();
    println!(
        "wrote {} ({} epochs, final loss {}) and {}",
        out.display(),
        o.log.records.len(),
        last.map_or("NA".into(), |r| r.total.to_string()),
        log_path.display()
    );
    Ok(())
}

fn log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.csv");
    PathBuf::from(s)
}

fn run_pretrain<T: Real>(cfg: &RunConfig, train: &Dataset, resume: Option<&Checkpoint>) -> Result<TrainOutput> {
    pretrain::<T>(train, &cfg.backbone, &cfg.train_options()?, resume)
}

fn run_train<T: Real>(cfg: &RunConfig, train: &Dataset, init: &Checkpoint) -> Result<TrainOutput> {
    train_hfr::<T>(train, init, &cfg.hfr_options(), &cfg.train_options()?)
}

fn threads() -> usize {
    std::env::var("UCHFR_THREADS").ok().and_then(|v| v.parse().ok()).unwrap_or(0)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let ds = cfg.build_dataset()?;
            ds.export(&out)?;
            println!(
                "wrote {} samples of {} classes, dim {}, to {}",
                ds.len(),
                ds.classes().len(),
                ds.dim(),
                out.display()
            );
        }
        Command::Pretrain {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = load_config(config.as_deref())?;
            let (train, _) = cfg.splits(&load_data(&cfg, data.as_deref())?)?;
            let resume = resume.as_deref().map(Checkpoint::load).transpose()?;
            let o = match cfg.precision {
                DType::F32 => run_pretrain::<f32>(&cfg, &train, resume.as_ref())?,
                DType::F64 => run_pretrain::<f64>(&cfg, &train, resume.as_ref())?,
            };
            write_outputs(&out, &o)?;
        }
        Command::Train {
            config,
            data,
            init_from,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let (train, _) = cfg.splits(&load_data(&cfg, data.as_deref())?)?;
            let init = Checkpoint::load(&init_from)?;
            let o = match cfg.precision {
                DType::F32 => run_train::<f32>(&cfg, &train, &init)?,
                DType::F64 => run_train::<f64>(&cfg, &train, &init)?,
            };
            write_outputs(&out, &o)?;
        }
        Command::Eval {
            config,
            data,
            checkpoint,
            out,
            raw_baseline,
        } => {
            let cfg = load_config(config.as_deref())?;
            let (_, test) = cfg.splits(&load_data(&cfg, data.as_deref())?)?;
            let report = evaluate_checkpoint(&Checkpoint::load(&checkpoint)?, &test, &cfg.eval)?;
            print!("{}", report.to_csv());
            if raw_baseline {
                println!("raw_feature_rank1,{}", raw_feature_rank1(&test, &cfg.eval)?);
            }
            if let Some(stem) = out {
                report.save(&stem)?;
            }
        }
        Command::Ablate {
            config,
            data,
            out,
            matrix,
            seeds,
        } => {
            let cfg = load_config(config.as_deref())?;
            let out = out
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| Error::Config("ablate needs --out or output_dir".into()))?;
            let (train, test) = cfg.splits(&load_data(&cfg, data.as_deref())?)?;
            let base = cfg.loss.loss_config();
            let matrix = match matrix {
                Some(MatrixArg::Losses) => AblationMatrix::Losses,
                Some(MatrixArg::MarginGrid) => AblationMatrix::MarginGrid,
                Some(MatrixArg::Both) => AblationMatrix::Both,
                None => cfg.ablation.matrix,
            };
            let mut tables = Vec::new();
            if matches!(matrix, AblationMatrix::Losses | AblationMatrix::Both) {
                tables.push(("ablation", loss_matrix_cells(&base)));
            }
            if matches!(matrix, AblationMatrix::MarginGrid | AblationMatrix::Both) {
                tables.push(("margin_grid", margin_grid_cells(&base)));
            }
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let opts = cfg.train_options()?;
            for (stem, cells) in tables {
                let spec = AblationSpec {
                    cells,
                    seeds: seeds.clone().unwrap_or_else(|| cfg.ablation.seeds.clone()),
                    cmd: cfg.cmd.clone(),
                    threads: threads(),
                };
                let report = match cfg.precision {
                    DType::F32 => run_ablation::<f32>(&train, &test, &cfg.backbone, &opts, &cfg.eval, &spec)?,
                    DType::F64 => run_ablation::<f64>(&train, &test, &cfg.backbone, &opts, &cfg.eval, &spec)?,
                };
                let csv = report.to_csv();
                for (name, text) in [(format!("{stem}.csv"), &csv), (format!("{stem}_detail.csv"), &report.detail_csv())] {
                    let p = out.join(name);
                    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
                }
                print!("{csv}");
            }
        }
        Command::Gradcheck { instances, seed, tol } => {
            let rows = gradient_suite(instances, seed, tol);
            println!("{:<26} {:>9} {:>8} {:>12}  status", "check", "instances", "redrawn", "max_rel_err");
            for r in &rows {
                println!(
                    "{:<26} {:>9} {:>8} {:>12.3e}  {}",
                    r.name,
                    r.instances,
                    r.redrawn,
                    r.max_rel_err,
                    match (&r.error, r.passed) {
                        (Some(e), _) => format!("ERROR {e}"),
                        (None, true) => "PASS".into(),
                        (None, false) => "FAIL".into(),
                    }
                );
            }
            let failed = rows.iter().filter(|r| !r.passed).count();
            println!("{} of {} checks passed at tol {tol:e}", rows.len() - failed, rows.len());
            return Ok(failed == 0);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
