//! Grid sweeps of one hyperparameter over several seeds.

use std::path::Path;
use std::str::FromStr;

use log::info;

use crate::error::{Error, Result};
use crate::pipeline::{initial_state, run_from_state, Experiment, ExperimentConfig};
use crate::report::{emit_csv, mean, median};

/// Sweepable hyperparameters. None of them affects warm-up, so one warm-up
/// per seed serves every value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Alpha,
    Beta,
    Gamma,
    K,
    LambdaI,
    LambdaC,
    LambdaCst,
    Tau,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "alpha" => Self::Alpha,
            "beta" => Self::Beta,
            "gamma" => Self::Gamma,
            "k" => Self::K,
            "lambda_i" => Self::LambdaI,
            "lambda_c" => Self::LambdaC,
            "lambda_cst" => Self::LambdaCst,
            "tau" => Self::Tau,
            _ => return Err(Error::InvalidConfig(format!("unknown sweep parameter {s:?}"))),
        })
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::Alpha => "alpha",
            Self::Beta => "beta",
            Self::Gamma => "gamma",
            Self::K => "k",
            Self::LambdaI => "lambda_i",
            Self::LambdaC => "lambda_c",
            Self::LambdaCst => "lambda_cst",
            Self::Tau => "tau",
        }
    }

    pub fn apply(self, cfg: &mut ExperimentConfig, value: f64) -> Result<()> {
        match self {
            Self::Alpha => cfg.ias.alpha = value,
            Self::Beta => cfg.ias.beta = value,
            Self::Gamma => cfg.ias.gamma = value,
            Self::K => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "k must be a positive integer, got {value}"
                    )));
                }
                cfg.k = Some(value as usize);
            }
            Self::LambdaI => cfg.loss_weights.lambda_i = value,
            Self::LambdaC => cfg.loss_weights.lambda_c = value,
            Self::LambdaCst => cfg.loss_weights.lambda_cst = value,
            Self::Tau => cfg.tau = value,
        }
        cfg.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub warmup_miou: f64,
    pub final_miou: f64,
}

/// Runs every (value, seed) pair and writes `sweep.csv` and
/// `sweep_summary.csv` under `out`.
pub fn run_sweep(
    base: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
    out: &Path,
) -> Result<Vec<SweepRow>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for &v in values {
        param.apply(&mut base.clone(), v)?;
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let cfg0 = base.clone().with_seed(seed);
        let exp = Experiment::from_config(&cfg0)?;
        let start = initial_state(&cfg0, &exp)?;
        for &value in values {
            let mut cfg = cfg0.clone();
            param.apply(&mut cfg, value)?;
            let (report, _) = run_from_state(&cfg, &exp, start.clone(), None)?;
            info!(
                "sweep {}={value} seed {seed}: final mIoU {:.4}",
                param.name(),
                report.final_miou
            );
            rows.push(SweepRow {
                value,
                seed,
                warmup_miou: report.warmup_miou,
                final_miou: report.final_miou,
            });
        }
    }
    let header = [param.name(), "seed", "warmup_miou", "final_miou"];
    let lines: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.value.to_string(),
                r.seed.to_string(),
                r.warmup_miou.to_string(),
                r.final_miou.to_string(),
            ]
        })
        .collect();
    emit_csv(&out.join("sweep.csv"), &header, &lines)?;

    let summary: Vec<Vec<String>> = values
        .iter()
        .map(|&v| {
            let finals: Vec<f64> = rows.iter().filter(|r| r.value == v).map(|r| r.final_miou).collect();
            vec![
                v.to_string(),
                finals.len().to_string(),
                mean(&finals).unwrap_or(0.0).to_string(),
                median(&finals).unwrap_or(0.0).to_string(),
            ]
        })
        .collect();
    emit_csv(
        &out.join("sweep_summary.csv"),
        &[param.name(), "runs", "mean_final_miou", "median_final_miou"],
        &summary,
    )?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_apply() {
        let mut c = ExperimentConfig::default();
        "gamma".parse::<SweepParam>().unwrap().apply(&mut c, 4.0).unwrap();
        assert_eq!(c.ias.gamma, 4.0);
        SweepParam::K.apply(&mut c, 3.0).unwrap();
        assert_eq!(c.k, Some(3));
        assert!(SweepParam::K.apply(&mut c, 2.5).is_err());
        assert!(SweepParam::Alpha.apply(&mut c, 0.0).is_err());
        assert!("delta".parse::<SweepParam>().is_err());
    }
}
