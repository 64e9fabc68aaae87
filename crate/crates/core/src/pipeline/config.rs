use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::{Activation, AdamConfig, AugmentConfig, LossWeights};
use crate::pseudolabel::IasParams;

/// Component switches for ablations; every combination is runnable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Switches {
    pub ias: bool,
    pub hpla: bool,
    pub r_i: bool,
    pub r_c: bool,
    pub r_cst: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Self {
            ias: true,
            hpla: true,
            r_i: true,
            r_c: true,
            r_cst: true,
        }
    }
}

impl Switches {
    pub fn none() -> Self {
        Self {
            ias: false,
            hpla: false,
            r_i: false,
            r_c: false,
            r_cst: false,
        }
    }
}

/// Generator used when `switches.ias` is off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    ClassBalanced,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalModel {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Dataset directories; when both are absent the synthetic pair is generated.
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub synth: SynthConfig,
    pub ias: IasParams,
    pub loss_weights: LossWeights,
    /// Number of hard classes; defaults to `ceil(C / 2)`.
    pub k: Option<usize>,
    /// Teacher EMA rate. 0.999 over 8000 iterations per round leaves the same
    /// weight on a round's starting teacher as 0.984 over 500.
    pub tau: f64,
    pub rounds: usize,
    pub iterations_per_round: usize,
    pub warmup_iterations: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub optimizer: AdamConfig,
    pub warmup_optimizer: AdamConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub switches: Switches,
    pub baseline: Baseline,
    pub constant_threshold: f64,
    /// Keep a supervised source term during self-training.
    pub source_ce: bool,
    pub eval_model: EvalModel,
    /// Process target instances in a seeded random order instead of manifest order.
    pub shuffle_instances: bool,
    /// Donor draws per image during pseudo-label augmentation.
    pub hpla_draws: usize,
    /// Also dump pseudo-labels as PGM images.
    pub dump_pgm: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: None,
            target: None,
            synth: SynthConfig::default(),
            ias: IasParams::default(),
            loss_weights: LossWeights::default(),
            k: None,
            tau: 0.984,
            rounds: 3,
            iterations_per_round: 500,
            warmup_iterations: 500,
            batch_size: 8,
            hidden: 16,
            activation: Activation::Tanh,
            optimizer: AdamConfig::default(),
            warmup_optimizer: AdamConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            switches: Switches::default(),
            baseline: Baseline::ClassBalanced,
            constant_threshold: 0.9,
            source_ce: false,
            eval_model: EvalModel::Teacher,
            shuffle_instances: false,
            hpla_draws: 1,
            dump_pgm: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Sets the experiment seed and the synthetic benchmark seed together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self
    }

    pub fn hard_class_count(&self, num_classes: usize) -> usize {
        self.k.unwrap_or(num_classes.div_ceil(2))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.ias.validate()?;
        self.loss_weights.validate()?;
        if self.source.is_some() != self.target.is_some() {
            return bad("source and target must be given together".into());
        }
        if self.source.is_none() {
            self.synth.validate()?;
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must be in [0, 1], got {}", self.tau));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.k == Some(0) {
            return bad("k must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.constant_threshold) {
            return bad(format!(
                "constant_threshold must be in [0, 1), got {}",
                self.constant_threshold
            ));
        }
        for (name, o) in [
            ("optimizer", &self.optimizer),
            ("warmup_optimizer", &self.warmup_optimizer),
        ] {
            if !(o.learning_rate >= 0.0 && o.epsilon > 0.0) {
                return bad(format!("{name}: learning_rate must be >= 0 and epsilon > 0"));
            }
        }
        Ok(())
    }

    /// Loss weights with switched-off regularizers zeroed.
    pub fn effective_weights(&self) -> LossWeights {
        let w = self.loss_weights;
        LossWeights {
            lambda_i: if self.switches.r_i { w.lambda_i } else { 0.0 },
            lambda_c: if self.switches.r_c { w.lambda_c } else { 0.0 },
            lambda_cst: if self.switches.r_cst { w.lambda_cst } else { 0.0 },
        }
    }
}
