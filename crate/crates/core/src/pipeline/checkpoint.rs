//! Round checkpoints: a JSON header next to raw tensor files.
//!
//! A checkpoint is written into a sibling `.partial` directory and renamed
//! into place, so a reader sees either the previous checkpoint or the new one.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{model_id, ExperimentConfig, MetricsRow, RoundRecord, RoundState};
use crate::data::{read_array_file, write_array_file, Array, ArrayData, LabelMap};
use crate::error::{Error, Result};
use crate::model::{Activation, AdamState, ModelParams};

pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER: &str = "checkpoint.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelShape {
    inputs: usize,
    hidden: usize,
    classes: usize,
    activation: Activation,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerRef {
    step: u64,
    m: BTreeMap<String, String>,
    v: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    round: usize,
    step: u64,
    seed: u64,
    tau: f64,
    model_id: String,
    generator_id: Option<String>,
    model: ModelShape,
    student: BTreeMap<String, String>,
    teacher: BTreeMap<String, String>,
    optimizer: OptimizerRef,
    thresholds: String,
    pseudo_labels: Option<String>,
    untrained_miou: f64,
    history: Vec<MetricsRow>,
    rounds: Vec<RoundRecord>,
}

fn write_params(dir: &Path, prefix: &str, p: &ModelParams) -> Result<BTreeMap<String, String>> {
    let mut refs = BTreeMap::new();
    for (name, t) in p.tensors() {
        let file = format!("{prefix}.{name}.arr");
        write_array_file(&dir.join(&file), &Array::f64(p.tensor_dims(name), t.to_vec())?)?;
        refs.insert(name.to_string(), file);
    }
    Ok(refs)
}

fn read_params(dir: &Path, refs: &BTreeMap<String, String>, shape: &ModelShape) -> Result<ModelParams> {
    let mut p = ModelParams::zeros(shape.inputs, shape.hidden, shape.classes, shape.activation);
    let dims: Vec<Vec<usize>> = crate::model::TENSOR_NAMES.iter().map(|n| p.tensor_dims(n)).collect();
    for ((name, t), want) in p.tensors_mut().into_iter().zip(dims) {
        let file = refs
            .get(name)
            .ok_or_else(|| Error::Corrupt(format!("checkpoint header lacks tensor {name}")))?;
        let path = dir.join(file);
        let arr = read_array_file(&path)?;
        if arr.dims != want {
            return Err(Error::Corrupt(format!(
                "{} has dims {:?}, expected {:?}",
                path.display(),
                arr.dims,
                want
            )));
        }
        *t = arr.into_f64(name)?;
    }
    Ok(p)
}

fn partial_path(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    dir.with_file_name(name)
}

pub fn save_checkpoint(state: &RoundState, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let tmp = partial_path(dir);
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

    let student = write_params(&tmp, "student", &state.student)?;
    let teacher = write_params(&tmp, "teacher", &state.teacher)?;
    let m = write_params(&tmp, "adam_m", &state.adam.m)?;
    let v = write_params(&tmp, "adam_v", &state.adam.v)?;
    let thresholds = Array::f64(vec![state.thresholds.len()], state.thresholds.clone())?;
    write_array_file(&tmp.join("thresholds.arr"), &thresholds)?;
    let pseudo_labels = match &state.pseudo_labels {
        Some(labels) if !labels.is_empty() => {
            let (h, w) = (labels[0].height(), labels[0].width());
            if labels.iter().any(|l| l.height() != h || l.width() != w) {
                return Err(Error::ShapeMismatch("pseudo-label maps differ in size".into()));
            }
            let flat = labels.iter().flat_map(|l| l.labels().iter().copied()).collect();
            let arr = Array::new(vec![labels.len(), h, w], ArrayData::U8(flat))?;
            write_array_file(&tmp.join("pseudo_labels.arr"), &arr)?;
            Some("pseudo_labels.arr".to_string())
        }
        _ => None,
    };
    let p = &state.student;
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        round: state.round,
        step: state.step,
        seed: cfg.seed,
        tau: cfg.tau,
        model_id: state.model_id(),
        generator_id: (state.round > 0).then(|| model_id(state.round - 1)),
        model: ModelShape {
            inputs: p.inputs,
            hidden: p.hidden,
            classes: p.classes,
            activation: p.activation,
        },
        student,
        teacher,
        optimizer: OptimizerRef {
            step: state.adam.step,
            m,
            v,
        },
        thresholds: "thresholds.arr".into(),
        pseudo_labels,
        untrained_miou: state.untrained_miou,
        history: state.history.clone(),
        rounds: state.rounds.clone(),
    };
    let header_path = tmp.join(HEADER);
    let text = serde_json::to_string_pretty(&header)?;
    std::fs::write(&header_path, text + "\n").map_err(|e| Error::io(&header_path, e))?;

    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

/// Identity fields stored alongside a checkpoint's state.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub seed: u64,
    pub tau: f64,
    pub model_id: String,
    pub generator_id: Option<String>,
}

/// Loads a checkpoint and checks it belongs to an experiment like `cfg`.
pub fn load_checkpoint(dir: &Path, cfg: &ExperimentConfig) -> Result<RoundState> {
    let (state, info) = read_checkpoint(dir)?;
    let p = &state.student;
    if info.seed != cfg.seed || info.tau != cfg.tau || p.hidden != cfg.hidden || p.activation != cfg.activation {
        return Err(Error::InvalidConfig(format!(
            "checkpoint {} was written by a different experiment configuration",
            dir.display()
        )));
    }
    Ok(state)
}

pub fn read_checkpoint(dir: &Path) -> Result<(RoundState, CheckpointInfo)> {
    let header_path = dir.join(HEADER);
    let text = std::fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let h: Header =
        serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("{}: {e}", header_path.display())))?;
    if h.format_version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: header_path,
            expected: CHECKPOINT_VERSION,
            found: h.format_version,
        });
    }
    let student = read_params(dir, &h.student, &h.model)?;
    let teacher = read_params(dir, &h.teacher, &h.model)?;
    let adam = AdamState {
        m: read_params(dir, &h.optimizer.m, &h.model)?,
        v: read_params(dir, &h.optimizer.v, &h.model)?,
        step: h.optimizer.step,
    };
    let thresholds = read_array_file(&dir.join(&h.thresholds))?.into_f64("thresholds")?;
    if thresholds.len() != h.model.classes {
        return Err(Error::Corrupt("threshold count does not match the class count".into()));
    }
    let pseudo_labels = match &h.pseudo_labels {
        Some(file) => {
            let path = dir.join(file);
            let arr = read_array_file(&path)?;
            match (arr.dims.as_slice(), arr.data) {
                (&[n, hh, w], ArrayData::U8(v)) => Some(
                    (0..n)
                        .map(|i| LabelMap::new(hh, w, v[i * hh * w..(i + 1) * hh * w].to_vec()))
                        .collect::<Result<Vec<_>>>()?,
                ),
                _ => {
                    return Err(Error::Corrupt(format!(
                        "{} is not a u8 [N, H, W] array",
                        path.display()
                    )))
                }
            }
        }
        None => None,
    };
    let info = CheckpointInfo {
        seed: h.seed,
        tau: h.tau,
        model_id: h.model_id,
        generator_id: h.generator_id,
    };
    let state = RoundState {
        round: h.round,
        step: h.step,
        student,
        teacher,
        adam,
        thresholds,
        pseudo_labels,
        untrained_miou: h.untrained_miou,
        history: h.history,
        rounds: h.rounds,
    };
    Ok((state, info))
}
