//! Source-only warm-up followed by rounds of self-training on the target.
//!
//! A round regenerates pseudo-labels with the current teacher, trains the
//! student against them while the teacher tracks it by EMA, and then hands
//! the teacher on as the next round's generator. Every random draw comes from
//! a stream keyed by the experiment seed and the draw's coordinates, so a run
//! is a function of its configuration and resuming from a round checkpoint
//! reproduces an uninterrupted run exactly.

mod checkpoint;
mod config;

use std::path::{Path, PathBuf};

use log::info;
use rand::seq::index;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, CheckpointInfo, CHECKPOINT_VERSION};
pub use config::*;

use crate::data::{self, export_label_pgm, Array, ArrayData, Dataset, LabelMap, ProbMap};
use crate::error::{Error, Result};
use crate::hpla::{
    build_class_index, detect_hard_classes, hpla_augment, sampling_probabilities, DonorPool, HardClassSet,
    SamplingDistribution,
};
use crate::metrics::{confusion_matrix, miou};
use crate::model::{
    adam_step, ema_update_params, forward, supervised_loss, total_loss, AdamState, ModelParams, TrainItem,
};
use crate::pseudolabel::{
    generate_pseudo_labels_classbalanced, generate_pseudo_labels_constant, generate_pseudo_labels_ias, selection_stats,
    write_stats_json, SelectionStats, ThresholdState, TraceEntry,
};
use crate::rng::{self, tag};

/// Source and target data for one experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub source: Dataset,
    pub target: Dataset,
}

impl Experiment {
    pub fn new(source: Dataset, target: Dataset) -> Result<Self> {
        let (s, t) = (source.meta(), target.meta());
        if s.num_classes != t.num_classes {
            return Err(Error::ClassMismatch {
                expected: s.num_classes,
                found: t.num_classes,
            });
        }
        if s.channels != t.channels {
            return Err(Error::ShapeMismatch(format!(
                "source has {} channels, target {}",
                s.channels, t.channels
            )));
        }
        if source.labels().is_none() {
            return Err(Error::UnlabeledSource(
                "every source sample needs labels for warm-up".into(),
            ));
        }
        if target.is_empty() {
            return Err(Error::InvalidConfig("target dataset is empty".into()));
        }
        Ok(Self { source, target })
    }

    /// Loads the configured directories, or generates the synthetic pair.
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        match (&cfg.source, &cfg.target) {
            (Some(s), Some(t)) => Self::new(data::load_dataset(s)?, data::load_dataset(t)?),
            _ => {
                let (s, t) = data::make_synthetic_pair(&cfg.synth)?;
                Self::new(s, t)
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        self.target.num_classes()
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub phase: String,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub pseudo_labels: Option<SelectionStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub generator_id: String,
    pub model_id: String,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub pseudo_labels: SelectionStats,
    /// Thresholds handed to hard-class detection.
    pub thresholds: Vec<f64>,
    pub hard_classes: Vec<u8>,
    pub mean_loss: f64,
}

/// Everything needed to continue after a completed round (round 0 is warm-up).
#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    pub round: usize,
    pub step: u64,
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub adam: AdamState,
    pub thresholds: Vec<f64>,
    pub pseudo_labels: Option<Vec<LabelMap>>,
    pub untrained_miou: f64,
    pub history: Vec<MetricsRow>,
    pub rounds: Vec<RoundRecord>,
}

impl RoundState {
    pub fn model_id(&self) -> String {
        model_id(self.round)
    }
}

fn model_id(round: usize) -> String {
    if round == 0 {
        "warmup".into()
    } else {
        format!("round{round}-teacher")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub seed: u64,
    pub num_classes: usize,
    pub untrained_miou: f64,
    pub warmup_miou: f64,
    pub final_miou: f64,
    pub final_model_id: String,
    pub rounds: Vec<RoundRecord>,
    pub history: Vec<MetricsRow>,
}

pub fn predict_all(params: &ModelParams, ds: &Dataset) -> Result<Vec<ProbMap>> {
    ds.samples().iter().map(|s| forward(params, &s.features)).collect()
}

/// mIoU and per-class IoU of `params` on a labeled dataset.
pub fn evaluate(params: &ModelParams, ds: &Dataset) -> Result<(f64, Vec<Option<f64>>)> {
    let refs = ds
        .labels()
        .ok_or_else(|| Error::InvalidConfig("evaluation needs a labeled dataset".into()))?;
    let preds: Vec<LabelMap> = predict_all(params, ds)?.iter().map(ProbMap::predict).collect();
    Ok(miou(&confusion_matrix(&preds, &refs, ds.num_classes())?))
}

#[derive(Debug, Clone)]
pub struct WarmupOutcome {
    pub params: ModelParams,
    /// Batch loss before each update.
    pub losses: Vec<f64>,
}

fn source_batch<'a>(
    source: &'a Dataset,
    seed: u64,
    tags: &[u64],
    size: usize,
) -> Vec<(&'a data::FeatureMap, &'a LabelMap)> {
    let mut r = rng::stream(seed, tags);
    index::sample(&mut r, source.len(), size.min(source.len()))
        .into_iter()
        .map(|i| {
            let s = &source.samples()[i];
            (&s.features, s.labels.as_ref().expect("source labels checked"))
        })
        .collect()
}

/// Supervised training on the labeled source domain.
pub fn warmup_source_only(cfg: &ExperimentConfig, source: &Dataset, init: ModelParams) -> Result<WarmupOutcome> {
    let mut params = init;
    let mut adam = AdamState::new(&params);
    let total = cfg.warmup_iterations as u64;
    let mut losses = Vec::with_capacity(cfg.warmup_iterations);
    for it in 0..cfg.warmup_iterations {
        let batch = source_batch(source, cfg.seed, &[tag::WARMUP_BATCH, it as u64], cfg.batch_size);
        let (loss, grad) = supervised_loss(&params, &batch)?;
        losses.push(loss);
        adam_step(&mut params, &grad, &mut adam, &cfg.warmup_optimizer, total)?;
    }
    Ok(WarmupOutcome { params, losses })
}

/// Randomly initialized model for the experiment.
pub fn init_model(cfg: &ExperimentConfig, exp: &Experiment) -> ModelParams {
    let mut r = rng::stream(cfg.seed, &[tag::INIT]);
    ModelParams::init(
        exp.source.meta().channels,
        cfg.hidden,
        exp.num_classes(),
        cfg.activation,
        &mut r,
    )
}

/// Round-0 state: initialization, warm-up, and its evaluation.
pub fn initial_state(cfg: &ExperimentConfig, exp: &Experiment) -> Result<RoundState> {
    cfg.validate()?;
    let init = init_model(cfg, exp);
    let (untrained_miou, _) = evaluate(&init, &exp.target)?;
    let warm = warmup_source_only(cfg, &exp.source, init)?;
    let (miou, per_class_iou) = evaluate(&warm.params, &exp.target)?;
    info!(
        "warm-up done: target mIoU {:.4} (untrained {:.4})",
        miou, untrained_miou
    );
    Ok(RoundState {
        round: 0,
        step: cfg.warmup_iterations as u64,
        adam: AdamState::new(&warm.params),
        student: warm.params.clone(),
        teacher: warm.params,
        thresholds: vec![cfg.ias.theta_init; exp.num_classes()],
        pseudo_labels: None,
        untrained_miou,
        history: vec![MetricsRow {
            round: 0,
            phase: "warmup".into(),
            miou,
            per_class_iou,
            pseudo_labels: None,
        }],
        rounds: Vec::new(),
    })
}

/// Pseudo-labels for one round, in dataset order.
#[derive(Debug, Clone)]
pub struct RoundLabels {
    pub labels: Vec<LabelMap>,
    /// Thresholds used for hard-class detection.
    pub thresholds: Vec<f64>,
    /// Per-instance state in processing order, for the IAS generator.
    pub trace: Option<(Vec<usize>, Vec<TraceEntry>)>,
}

/// Runs the configured generator over the target with `generator` weights.
pub fn generate_round_labels(
    cfg: &ExperimentConfig,
    generator: &ModelParams,
    target: &Dataset,
    round: usize,
) -> Result<RoundLabels> {
    let probs = predict_all(generator, target)?;
    let c = target.num_classes();
    if !cfg.switches.ias {
        return Ok(match cfg.baseline {
            Baseline::ClassBalanced => {
                let (labels, thresholds) = generate_pseudo_labels_classbalanced(&probs, cfg.ias.alpha)?;
                RoundLabels {
                    labels,
                    thresholds,
                    trace: None,
                }
            }
            Baseline::Constant => RoundLabels {
                labels: generate_pseudo_labels_constant(&probs, cfg.constant_threshold),
                thresholds: vec![cfg.constant_threshold; c],
                trace: None,
            },
        });
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    if cfg.shuffle_instances {
        let mut r = rng::stream(cfg.seed, &[tag::SHUFFLE, round as u64]);
        order = index::sample(&mut r, probs.len(), probs.len()).into_vec();
    }
    let ordered: Vec<&ProbMap> = order.iter().map(|&i| &probs[i]).collect();
    let (labels, state): (Vec<LabelMap>, ThresholdState) = generate_pseudo_labels_ias(&ordered, c, &cfg.ias, true)?;
    let mut in_order = vec![None; labels.len()];
    for (&i, l) in order.iter().zip(labels) {
        in_order[i] = Some(l);
    }
    Ok(RoundLabels {
        labels: in_order
            .into_iter()
            .map(|l| l.expect("order is a permutation"))
            .collect(),
        thresholds: state.thresholds,
        trace: Some((order, state.trace.unwrap_or_default())),
    })
}

/// Hard classes and the donor-class distribution derived from thresholds.
pub fn hard_class_setup(cfg: &ExperimentConfig, thresholds: &[f64]) -> Result<(HardClassSet, SamplingDistribution)> {
    let c = thresholds.len();
    let hard = detect_hard_classes(thresholds, cfg.hard_class_count(c).min(c))?;
    let r = match sampling_probabilities(thresholds) {
        Ok(r) => r,
        Err(Error::DegenerateThresholds) => SamplingDistribution::uniform(c),
        Err(e) => return Err(e),
    };
    Ok((hard, r))
}

/// Training item `i` for iteration `it` of `round`, with HPLA applied when on.
#[allow(clippy::too_many_arguments)]
fn train_item(
    cfg: &ExperimentConfig,
    target: &Dataset,
    labels: &[LabelMap],
    pool: Option<HplaSetup<'_>>,
    round: usize,
    it: usize,
    i: usize,
) -> Result<TrainItem> {
    let s = &target.samples()[i];
    match pool {
        Some((pool, hard, r)) => {
            let mut hr = rng::stream(cfg.seed, &[tag::HPLA, round as u64, it as u64, i as u64]);
            let (features, labels, _) =
                hpla_augment(&s.features, &labels[i], Some(i), pool, hard, r, cfg.hpla_draws, &mut hr)?;
            Ok(TrainItem { features, labels })
        }
        None => Ok(TrainItem {
            features: s.features.clone(),
            labels: labels[i].clone(),
        }),
    }
}

/// Donor pool, hard classes and sampling distribution for augmentation.
pub type HplaSetup<'a> = (&'a DonorPool<'a>, &'a HardClassSet, &'a SamplingDistribution);

/// Items for iteration `it` of `round`: a seeded draw of target indices,
/// augmented when `hpla` is given and otherwise the raw samples.
pub fn training_batch(
    cfg: &ExperimentConfig,
    target: &Dataset,
    labels: &[LabelMap],
    hpla: Option<HplaSetup<'_>>,
    round: usize,
    it: usize,
) -> Result<Vec<TrainItem>> {
    let mut br = rng::stream(cfg.seed, &[tag::BATCH, round as u64, it as u64]);
    index::sample(&mut br, target.len(), cfg.batch_size.min(target.len()))
        .into_iter()
        .map(|i| train_item(cfg, target, labels, hpla, round, it, i))
        .collect()
}

/// Pixel share of hard-class labels over one pass of the target, before and
/// after augmentation.
pub fn hpla_epoch_mass(
    cfg: &ExperimentConfig,
    target: &Dataset,
    labels: &[LabelMap],
    hard: &HardClassSet,
    r: &SamplingDistribution,
    round: usize,
) -> Result<(f64, f64)> {
    let index = build_class_index(labels, target.num_classes());
    let pool = DonorPool {
        dataset: target,
        labels,
        index: &index,
    };
    let (mut before, mut after, mut total) = (0u64, 0u64, 0u64);
    let count = |l: &LabelMap| l.labels().iter().filter(|&&v| hard.contains(v)).count() as u64;
    for i in 0..target.len() {
        let item = train_item(cfg, target, labels, Some((&pool, hard, r)), round, usize::MAX, i)?;
        before += count(&labels[i]);
        after += count(&item.labels);
        total += labels[i].num_pixels() as u64;
    }
    let t = total.max(1) as f64;
    Ok((before as f64 / t, after as f64 / t))
}

/// One self-training round. Writes the round's label dumps under `out`.
pub fn run_round(
    state: &RoundState,
    cfg: &ExperimentConfig,
    exp: &Experiment,
    out: Option<&Path>,
) -> Result<RoundState> {
    let round = state.round + 1;
    let target = &exp.target;
    let c = exp.num_classes();
    let generated = generate_round_labels(cfg, &state.teacher, target, round)?;
    let refs = target.labels();
    let stats = selection_stats(&generated.labels, refs.as_deref(), c)?;
    let (hard, r) = hard_class_setup(cfg, &generated.thresholds)?;
    info!(
        "round {round}: generator {}, pseudo-label proportion {:.4}, hard classes {:?}",
        state.model_id(),
        stats.proportion,
        hard.classes()
    );
    if let Some(dir) = out {
        write_label_dump(&round_dir(dir, round), cfg.dump_pgm, target, &generated, &stats)?;
    }

    let index = build_class_index(&generated.labels, c);
    let pool = DonorPool {
        dataset: target,
        labels: &generated.labels,
        index: &index,
    };
    let use_hpla = cfg.switches.hpla && !hard.is_empty();
    let weights = cfg.effective_weights();
    let mut student = state.student.clone();
    let mut teacher = state.teacher.clone();
    let mut adam = AdamState::new(&student);
    let total_steps = cfg.iterations_per_round as u64;
    let mut loss_sum = 0.0;
    for it in 0..cfg.iterations_per_round {
        let hpla = use_hpla.then_some((&pool, &hard, &r));
        let items = training_batch(cfg, target, &generated.labels, hpla, round, it)?;
        let aug_seed = rng::derive_seed(cfg.seed, &[tag::AUGMENT, round as u64, it as u64]);
        let mut report = total_loss(&student, &teacher, &items, &weights, Some(&cfg.augment), aug_seed)?;
        if cfg.source_ce {
            let batch = source_batch(
                &exp.source,
                cfg.seed,
                &[tag::WARMUP_BATCH, round as u64, it as u64],
                cfg.batch_size,
            );
            let (l, g) = supervised_loss(&student, &batch)?;
            report.source_ce = l;
            report.total += l;
            report.grad.add_scaled(&g, 1.0);
        }
        loss_sum += report.total;
        adam_step(&mut student, &report.grad, &mut adam, &cfg.optimizer, total_steps)?;
        teacher = ema_update_params(&teacher, &student, cfg.tau)?;
    }

    let evaluated = match cfg.eval_model {
        EvalModel::Teacher => &teacher,
        EvalModel::Student => &student,
    };
    let (miou, per_class_iou) = evaluate(evaluated, target)?;
    info!("round {round}: target mIoU {miou:.4}");
    let mut history = state.history.clone();
    history.push(MetricsRow {
        round,
        phase: "self_training".into(),
        miou,
        per_class_iou: per_class_iou.clone(),
        pseudo_labels: Some(stats.clone()),
    });
    let mut rounds = state.rounds.clone();
    rounds.push(RoundRecord {
        round,
        generator_id: state.model_id(),
        model_id: model_id(round),
        miou,
        per_class_iou,
        pseudo_labels: stats,
        thresholds: generated.thresholds.clone(),
        hard_classes: hard.classes().to_vec(),
        mean_loss: if cfg.iterations_per_round == 0 {
            0.0
        } else {
            loss_sum / cfg.iterations_per_round as f64
        },
    });
    Ok(RoundState {
        round,
        step: state.step + total_steps,
        student,
        teacher,
        adam,
        thresholds: generated.thresholds,
        pseudo_labels: Some(generated.labels),
        untrained_miou: state.untrained_miou,
        history,
        rounds,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn round_dir(out: &Path, round: usize) -> PathBuf {
    out.join(format!("round_{round}"))
}

pub fn checkpoint_dir(out: &Path, round: usize) -> PathBuf {
    out.join("checkpoints").join(format!("round_{round}"))
}

/// File name for a sample's dump, shared with the dataset layout.
pub fn label_dump_name(position: usize, id: &str) -> String {
    format!("{position:05}_{}", data::file_stem_for(id))
}

/// Writes `pseudo_labels/*.arr`, `thresholds.csv` and `stats.json` into `dir`.
pub fn write_label_dump(
    dir: &Path,
    dump_pgm: bool,
    target: &Dataset,
    generated: &RoundLabels,
    stats: &SelectionStats,
) -> Result<()> {
    let labels_dir = dir.join("pseudo_labels");
    create_dir(&labels_dir)?;
    let c = target.num_classes();
    for (i, (s, l)) in target.samples().iter().zip(&generated.labels).enumerate() {
        let name = label_dump_name(i, &s.id);
        let arr = Array::new(vec![l.height(), l.width()], ArrayData::U8(l.labels().to_vec()))?;
        data::write_array_file(&labels_dir.join(format!("{name}.arr")), &arr)?;
        if dump_pgm {
            export_label_pgm(l, c, &labels_dir.join(format!("{name}.pgm")))?;
        }
    }
    let ids: Vec<&str>;
    let trace_state;
    match &generated.trace {
        Some((order, entries)) => {
            ids = order.iter().map(|&i| target.samples()[i].id.as_str()).collect();
            trace_state = ThresholdState {
                thresholds: generated.thresholds.clone(),
                updates: entries.len(),
                trace: Some(entries.clone()),
            };
        }
        None => {
            // Baselines use one threshold vector for every instance.
            ids = target.samples().iter().map(|s| s.id.as_str()).collect();
            let entry = TraceEntry {
                local: generated.thresholds.clone(),
                thresholds: generated.thresholds.clone(),
            };
            trace_state = ThresholdState {
                thresholds: generated.thresholds.clone(),
                updates: ids.len(),
                trace: Some(vec![entry; ids.len()]),
            };
        }
    }
    trace_state.write_trace_csv(&ids, &dir.join("thresholds.csv"))?;
    write_stats_json(stats, &dir.join("stats.json"))
}

/// Reads a round's pseudo-label dump back in dataset order.
pub fn load_round_labels(out: &Path, round: usize, target: &Dataset) -> Result<Vec<LabelMap>> {
    load_label_dump(&round_dir(out, round), target)
}

pub fn load_label_dump(dir: &Path, target: &Dataset) -> Result<Vec<LabelMap>> {
    let dir = dir.join("pseudo_labels");
    target
        .samples()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let path = dir.join(format!("{}.arr", label_dump_name(i, &s.id)));
            let arr = data::read_array_file(&path)?;
            match (arr.dims.as_slice(), arr.data) {
                (&[h, w], ArrayData::U8(v)) => LabelMap::new(h, w, v),
                _ => Err(Error::Corrupt(format!("{} is not a u8 label map", path.display()))),
            }
        })
        .collect()
}

pub fn final_report(cfg: &ExperimentConfig, exp: &Experiment, state: &RoundState) -> FinalReport {
    let final_miou = state.history.last().map_or(0.0, |r| r.miou);
    FinalReport {
        seed: cfg.seed,
        num_classes: exp.num_classes(),
        untrained_miou: state.untrained_miou,
        warmup_miou: state.history.first().map_or(0.0, |r| r.miou),
        final_miou,
        final_model_id: state.model_id(),
        rounds: state.rounds.clone(),
        history: state.history.clone(),
    }
}

/// Continues from `state` up to `cfg.rounds`, checkpointing after each round.
pub fn run_from_state(
    cfg: &ExperimentConfig,
    exp: &Experiment,
    mut state: RoundState,
    out: Option<&Path>,
) -> Result<(FinalReport, RoundState)> {
    while state.round < cfg.rounds {
        state = run_round(&state, cfg, exp, out)?;
        if let Some(dir) = out {
            save_checkpoint(&state, cfg, &checkpoint_dir(dir, state.round))?;
        }
    }
    let report = final_report(cfg, exp, &state);
    if let Some(dir) = out {
        write_outputs(dir, cfg, &report)?;
    }
    Ok((report, state))
}

/// The whole pipeline. With `resume` set, continues from that checkpoint.
pub fn run_self_training(cfg: &ExperimentConfig, out: Option<&Path>, resume: Option<&Path>) -> Result<FinalReport> {
    cfg.validate()?;
    let exp = Experiment::from_config(cfg)?;
    if let Some(dir) = out {
        create_dir(dir)?;
    }
    let state = match resume {
        Some(path) => load_checkpoint(path, cfg)?,
        None => {
            let s = initial_state(cfg, &exp)?;
            if let Some(dir) = out {
                save_checkpoint(&s, cfg, &checkpoint_dir(dir, 0))?;
            }
            s
        }
    };
    Ok(run_from_state(cfg, &exp, state, out)?.0)
}

pub fn metrics_csv_rows(history: &[MetricsRow], num_classes: usize) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["round".to_string(), "phase".into(), "miou".into()];
    header.extend((0..num_classes).map(|c| format!("per_class_iou_{c}")));
    header.extend(["pl_proportion", "pl_diversity", "pl_pmiou"].map(String::from));
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let rows = history
        .iter()
        .map(|r| {
            let mut row = vec![r.round.to_string(), r.phase.clone(), r.miou.to_string()];
            row.extend((0..num_classes).map(|c| opt(r.per_class_iou.get(c).copied().flatten())));
            let pl = r.pseudo_labels.as_ref();
            row.push(opt(pl.map(|s| s.proportion)));
            row.push(pl.map(|s| s.diversity.to_string()).unwrap_or_default());
            row.push(opt(pl.and_then(|s| s.pmiou)));
            row
        })
        .collect();
    (header, rows)
}

pub fn write_outputs(out: &Path, cfg: &ExperimentConfig, report: &FinalReport) -> Result<()> {
    create_dir(out)?;
    let (header, rows) = metrics_csv_rows(&report.history, report.num_classes);
    crate::report::emit_csv(&out.join("metrics.csv"), &header, &rows)?;
    crate::report::write_json(&out.join("report.json"), report)?;
    crate::report::write_json(&out.join("config.json"), cfg)
}
