//! Command-line front end. Usage errors exit with 1, runtime failures with 2.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use crate::data::{self, SynthConfig};
use crate::error::{Error, Result};
use crate::pipeline::{
    self, checkpoint_dir, evaluate, generate_round_labels, initial_state, read_checkpoint, save_checkpoint, Baseline,
    Experiment, ExperimentConfig,
};
use crate::pseudolabel::selection_stats;
use crate::report::{self, emit_csv};
use crate::sweep::{run_sweep, SweepParam};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "hiast", version, about = "Self-training for segmentation domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Strategy {
    Ias,
    Constant,
    Classbalanced,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelChoice {
    Teacher,
    Student,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic source/target pair.
    Synth {
        /// Synthetic benchmark settings (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Source-only warm-up; writes a round-0 checkpoint.
    Warmup {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate pseudo-labels for a target set with a checkpoint's teacher.
    Pseudolabel {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "ias")]
        strategy: Strategy,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 0.9)]
        beta: f64,
        #[arg(long, default_value_t = 8.0)]
        gamma: f64,
        /// Threshold for the constant strategy.
        #[arg(long, default_value_t = 0.9)]
        theta: f64,
        #[arg(long)]
        pgm: bool,
    },
    /// Warm-up plus self-training rounds.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a round checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// mIoU of a checkpoint on a labeled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "teacher")]
        model: ModelChoice,
        /// Optional per-class CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one hyperparameter over values and seeds.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize finished training runs into one CSV.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    cfg.validate()?;
    info!("seed {}", cfg.seed);
    info!("resolved config: {}", serde_json::to_string(&cfg)?);
    Ok(cfg)
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { config, seed, out } => {
            let mut cfg = match &config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    serde_json::from_str::<SynthConfig>(&text)?
                }
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            info!("seed {}", cfg.seed);
            info!("resolved config: {}", serde_json::to_string(&cfg)?);
            let (s, t) = data::make_synthetic_pair(&cfg)?;
            data::save_dataset(&s, &out.join("source"))?;
            data::save_dataset(&t, &out.join("target"))?;
            println!(
                "wrote {} source and {} target samples to {}",
                s.len(),
                t.len(),
                out.display()
            );
        }
        Command::Warmup { config, seed, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let exp = Experiment::from_config(&cfg)?;
            let state = initial_state(&cfg, &exp)?;
            mkdir(&out)?;
            let dir = checkpoint_dir(&out, 0);
            save_checkpoint(&state, &cfg, &dir)?;
            report::write_json(&out.join("config.json"), &cfg)?;
            println!(
                "warm-up target mIoU {:.4}; checkpoint {}",
                state.history[0].miou,
                dir.display()
            );
        }
        Command::Pseudolabel {
            checkpoint,
            target,
            out,
            strategy,
            alpha,
            beta,
            gamma,
            theta,
            pgm,
        } => {
            let (state, meta) = read_checkpoint(&checkpoint)?;
            let ds = data::load_dataset(&target)?;
            let mut cfg = ExperimentConfig::default();
            cfg.ias.alpha = alpha;
            cfg.ias.beta = beta;
            cfg.ias.gamma = gamma;
            cfg.constant_threshold = theta;
            match strategy {
                Strategy::Ias => {}
                Strategy::Constant => {
                    cfg.switches.ias = false;
                    cfg.baseline = Baseline::Constant;
                }
                Strategy::Classbalanced => {
                    cfg.switches.ias = false;
                    cfg.baseline = Baseline::ClassBalanced;
                }
            }
            cfg.ias.validate()?;
            cfg.validate()?;
            info!("generator {} from {}", meta.model_id, checkpoint.display());
            let generated = generate_round_labels(&cfg, &state.teacher, &ds, state.round + 1)?;
            let refs = ds.labels();
            let stats = selection_stats(&generated.labels, refs.as_deref(), ds.num_classes())?;
            mkdir(&out)?;
            pipeline::write_label_dump(&out, pgm, &ds, &generated, &stats)?;
            println!("{}", serde_json::to_string(&stats)?);
        }
        Command::Train {
            config,
            seed,
            out,
            resume,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let report = pipeline::run_self_training(&cfg, Some(&out), resume.as_deref())?;
            println!(
                "warm-up mIoU {:.4}, final mIoU {:.4} ({})",
                report.warmup_miou, report.final_miou, report.final_model_id
            );
        }
        Command::Eval {
            checkpoint,
            data: data_dir,
            model,
            out,
        } => {
            let (state, meta) = read_checkpoint(&checkpoint)?;
            let ds = data::load_dataset(&data_dir)?;
            let params = match model {
                ModelChoice::Teacher => &state.teacher,
                ModelChoice::Student => &state.student,
            };
            let (m, per_class) = evaluate(params, &ds)?;
            if let Some(p) = out {
                let mut header = vec!["model".to_string(), "miou".into()];
                header.extend((0..per_class.len()).map(|c| format!("per_class_iou_{c}")));
                let mut row = vec![meta.model_id.clone(), m.to_string()];
                row.extend(per_class.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
                emit_csv(&p, &header, &[row])?;
            }
            println!("{} mIoU {:.4}", meta.model_id, m);
        }
        Command::Sweep {
            config,
            param,
            values,
            seeds,
            out,
        } => {
            let cfg = load_config(config.as_deref(), None)?;
            let param: SweepParam = param.parse()?;
            let rows = run_sweep(&cfg, param, &values, &seeds, &out)?;
            println!("{} runs written to {}", rows.len(), out.display());
        }
        Command::Report { runs, out } => {
            let dirs: Vec<&Path> = runs.iter().map(PathBuf::as_path).collect();
            let reports = report::summarize_runs(&dirs, &out)?;
            println!("summarized {} runs into {}", reports.len(), out.display());
        }
    }
    Ok(())
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
