//! Pseudo-label generation: the instance-adaptive selector and two baselines.
//!
//! The instance-adaptive selector walks the target set in a fixed order. For
//! each instance it takes, per class, a percentile of that class's sorted
//! confidences as a local threshold, folds it into a running per-class
//! threshold with an exponential moving average, and keeps pixels whose
//! confidence strictly exceeds the updated threshold of their argmax class.
//!
//! The local percentile is shrunk by `theta_prev^gamma`, so classes whose
//! running threshold is low (hard classes) drop more of their low-confidence
//! tail.

use std::borrow::Borrow;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, ProbMap, PseudoLabelMap, IGNORE};
use crate::error::{Error, Result};
use crate::metrics::{confusion_matrix_restricted, miou};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IasParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub theta_init: f64,
}

impl Default for IasParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.9,
            gamma: 8.0,
            theta_init: 0.9,
        }
    }
}

impl IasParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must be in (0, 1], got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must be in [0, 1], got {}", self.beta));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be finite and >= 0, got {}", self.gamma));
        }
        if !(self.theta_init > 0.0 && self.theta_init <= 1.0) {
            return bad(format!("theta_init must be in (0, 1], got {}", self.theta_init));
        }
        Ok(())
    }
}

/// One instance step of the selector, kept when tracing is on.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    /// Local (per-instance) thresholds.
    pub local: Vec<f64>,
    /// Running thresholds after the update; these labeled the instance.
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdState {
    pub thresholds: Vec<f64>,
    pub updates: usize,
    pub trace: Option<Vec<TraceEntry>>,
}

impl ThresholdState {
    pub fn new(num_classes: usize, theta_init: f64, trace: bool) -> Self {
        Self {
            thresholds: vec![theta_init; num_classes],
            updates: 0,
            trace: trace.then(Vec::new),
        }
    }

    /// Writes `instance_id,class_0,..,class_{C-1}`, one row per traced instance.
    pub fn write_trace_csv<S: AsRef<str>>(&self, ids: &[S], path: &Path) -> Result<()> {
        let trace = self
            .trace
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("threshold tracing was not enabled".into()))?;
        if trace.len() != ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} trace rows but {} instance ids",
                trace.len(),
                ids.len()
            )));
        }
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["instance_id".to_string()];
        header.extend((0..self.thresholds.len()).map(|c| format!("class_{c}")));
        w.write_record(&header)?;
        for (id, entry) in ids.iter().zip(trace) {
            let mut row = vec![id.as_ref().to_string()];
            row.extend(entry.thresholds.iter().map(|t| t.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Max-probabilities of the pixels predicted as `class`, sorted descending.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedClassConfidences {
    pub class: u8,
    pub confidences: Vec<f64>,
}

impl SortedClassConfidences {
    pub fn new(class: u8, mut confidences: Vec<f64>) -> Self {
        confidences.sort_by(|a, b| b.total_cmp(a));
        Self { class, confidences }
    }

    /// Splits one probability map into per-class sorted confidence lists.
    pub fn from_probmap(pm: &ProbMap) -> Vec<Self> {
        let mut pools = vec![Vec::new(); pm.num_classes()];
        for i in 0..pm.num_pixels() {
            let (c, p) = pm.argmax(i);
            pools[c as usize].push(p);
        }
        pools
            .into_iter()
            .enumerate()
            .map(|(c, v)| Self::new(c as u8, v))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.confidences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidences.is_empty()
    }
}

/// 0-based floor index into a descending list of length `len`, clamped.
fn percentile_index(fraction: f64, len: usize) -> usize {
    let idx = (fraction * len as f64).floor();
    (idx.max(0.0) as usize).min(len - 1)
}

/// Local threshold: the `alpha * theta_prev^gamma` percentile of the class's
/// sorted confidences, or `theta_prev` when the class has no pixels.
pub fn local_threshold(confs: &SortedClassConfidences, theta_prev: f64, alpha: f64, gamma: f64) -> f64 {
    if confs.is_empty() {
        return theta_prev;
    }
    let idx = percentile_index(alpha * theta_prev.powf(gamma), confs.len());
    confs.confidences[idx]
}

pub fn ema_update_thresholds(theta_prev: &[f64], theta_local: &[f64], beta: f64) -> Result<Vec<f64>> {
    if theta_prev.len() != theta_local.len() {
        return Err(Error::ShapeMismatch(format!(
            "threshold vectors differ in length: {} vs {}",
            theta_prev.len(),
            theta_local.len()
        )));
    }
    Ok(theta_prev
        .iter()
        .zip(theta_local)
        .map(|(&p, &l)| beta * p + (1.0 - beta) * l)
        .collect())
}

fn label_with(pm: &ProbMap, thresholds: &[f64]) -> PseudoLabelMap {
    let labels = (0..pm.num_pixels())
        .map(|i| {
            let (c, p) = pm.argmax(i);
            if p > thresholds[c as usize] {
                c
            } else {
                IGNORE
            }
        })
        .collect();
    LabelMap::new(pm.height(), pm.width(), labels).expect("prob map shape is valid")
}

fn check_classes<P: Borrow<ProbMap>>(probmaps: &[P]) -> Result<Option<usize>> {
    let Some(first) = probmaps.first() else {
        return Ok(None);
    };
    let c = first.borrow().num_classes();
    for pm in probmaps {
        if pm.borrow().num_classes() != c {
            return Err(Error::ClassMismatch {
                expected: c,
                found: pm.borrow().num_classes(),
            });
        }
    }
    Ok(Some(c))
}

/// Instance-adaptive pseudo-labeling over `probmaps` in the given order.
///
/// `num_classes` sizes the threshold state even when the sequence is empty.
pub fn generate_pseudo_labels_ias<P: Borrow<ProbMap>>(
    probmaps: &[P],
    num_classes: usize,
    params: &IasParams,
    trace: bool,
) -> Result<(Vec<PseudoLabelMap>, ThresholdState)> {
    params.validate()?;
    if let Some(c) = check_classes(probmaps)? {
        if c != num_classes {
            return Err(Error::ClassMismatch {
                expected: num_classes,
                found: c,
            });
        }
    }
    let mut state = ThresholdState::new(num_classes, params.theta_init, trace);
    let mut out = Vec::with_capacity(probmaps.len());
    for pm in probmaps {
        let pm = pm.borrow();
        let local: Vec<f64> = SortedClassConfidences::from_probmap(pm)
            .iter()
            .zip(&state.thresholds)
            .map(|(confs, &prev)| local_threshold(confs, prev, params.alpha, params.gamma))
            .collect();
        state.thresholds = ema_update_thresholds(&state.thresholds, &local, params.beta)?;
        state.updates += 1;
        out.push(label_with(pm, &state.thresholds));
        if let Some(t) = state.trace.as_mut() {
            t.push(TraceEntry {
                local,
                thresholds: state.thresholds.clone(),
            });
        }
    }
    Ok((out, state))
}

/// Baseline: one threshold for every class and instance.
pub fn generate_pseudo_labels_constant<P: Borrow<ProbMap>>(probmaps: &[P], theta_const: f64) -> Vec<PseudoLabelMap> {
    probmaps
        .iter()
        .map(|pm| {
            let pm = pm.borrow();
            label_with(pm, &vec![theta_const; pm.num_classes()])
        })
        .collect()
}

/// Global per-class thresholds from confidences pooled over the whole set.
pub fn class_balanced_thresholds<P: Borrow<ProbMap>>(probmaps: &[P], num_classes: usize, alpha: f64) -> Vec<f64> {
    let mut pools = vec![Vec::new(); num_classes];
    for pm in probmaps {
        for confs in SortedClassConfidences::from_probmap(pm.borrow()) {
            pools[confs.class as usize].extend(confs.confidences);
        }
    }
    pools
        .into_iter()
        .map(|pool| {
            let pool = SortedClassConfidences::new(0, pool);
            if pool.is_empty() {
                // No pixel predicts this class, so the value is never consulted.
                1.0
            } else {
                pool.confidences[percentile_index(alpha, pool.len())]
            }
        })
        .collect()
}

/// Baseline: class-balanced thresholds shared by all instances.
pub fn generate_pseudo_labels_classbalanced<P: Borrow<ProbMap>>(
    probmaps: &[P],
    alpha: f64,
) -> Result<(Vec<PseudoLabelMap>, Vec<f64>)> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidConfig(format!("alpha must be in (0, 1], got {alpha}")));
    }
    let Some(c) = check_classes(probmaps)? else {
        return Ok((Vec::new(), Vec::new()));
    };
    let thresholds = class_balanced_thresholds(probmaps, c, alpha);
    let labels = probmaps.iter().map(|pm| label_with(pm.borrow(), &thresholds)).collect();
    Ok((labels, thresholds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    /// Non-IGNORE pixels over all pixels.
    pub proportion: f64,
    /// Per-class selected pixels over all pixels.
    pub per_class_proportion: Vec<f64>,
    /// Classes with at least one selected pixel anywhere in the set.
    pub diversity: usize,
    /// Mean count of distinct selected classes per instance.
    pub mean_instance_diversity: f64,
    /// mIoU over selected pixels against reference labels.
    pub pmiou: Option<f64>,
}

pub fn selection_stats(
    labels: &[PseudoLabelMap],
    reference: Option<&[LabelMap]>,
    num_classes: usize,
) -> Result<SelectionStats> {
    let mut counts = vec![0u64; num_classes];
    let mut total = 0u64;
    let mut instance_diversity = 0usize;
    for lm in labels {
        lm.validate(num_classes)?;
        let mut present = vec![false; num_classes];
        for &l in lm.labels() {
            if l != IGNORE {
                counts[l as usize] += 1;
                present[l as usize] = true;
            }
        }
        instance_diversity += present.iter().filter(|&&p| p).count();
        total += lm.num_pixels() as u64;
    }
    let pmiou = match reference {
        Some(refs) => {
            let cm = confusion_matrix_restricted(labels, refs, num_classes)?;
            Some(miou(&cm).0)
        }
        None => None,
    };
    let frac = |n: u64| if total == 0 { 0.0 } else { n as f64 / total as f64 };
    Ok(SelectionStats {
        proportion: frac(counts.iter().sum()),
        per_class_proportion: counts.iter().map(|&n| frac(n)).collect(),
        diversity: counts.iter().filter(|&&n| n > 0).count(),
        mean_instance_diversity: if labels.is_empty() {
            0.0
        } else {
            instance_diversity as f64 / labels.len() as f64
        },
        pmiou,
    })
}

pub fn write_stats_json(stats: &SelectionStats, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, stats)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pm(h: usize, w: usize, px: &[&[f64]]) -> ProbMap {
        let c = px[0].len();
        ProbMap::new(h, w, c, px.iter().flat_map(|p| p.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn local_threshold_plain_percentile() {
        let confs = SortedClassConfidences::new(0, vec![0.9, 0.8, 0.7, 0.6]);
        assert_eq!(local_threshold(&confs, 0.9, 0.5, 0.0), 0.7);
    }

    #[test]
    fn local_threshold_with_decay() {
        // floor(0.5 * 0.9^8 * 10) = floor(2.152) = 2
        let confs = SortedClassConfidences::new(0, vec![0.99, 0.95, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55, 0.5]);
        assert_abs_diff_eq!(0.5 * 0.9f64.powi(8) * 10.0, 2.152, epsilon = 1e-3);
        assert_eq!(local_threshold(&confs, 0.9, 0.5, 8.0), 0.85);
    }

    #[test]
    fn local_threshold_empty_keeps_previous() {
        let confs = SortedClassConfidences::new(3, vec![]);
        assert_eq!(local_threshold(&confs, 0.42, 0.5, 8.0), 0.42);
    }

    #[test]
    fn local_threshold_clamps_at_end() {
        let confs = SortedClassConfidences::new(0, vec![0.9, 0.5]);
        assert_eq!(local_threshold(&confs, 1.0, 1.0, 0.0), 0.5);
    }

    #[test]
    fn ema_cases() {
        assert_eq!(ema_update_thresholds(&[0.9], &[0.7], 1.0).unwrap(), vec![0.9]);
        assert_eq!(ema_update_thresholds(&[0.9], &[0.7], 0.0).unwrap(), vec![0.7]);
        assert_abs_diff_eq!(
            ema_update_thresholds(&[0.9], &[0.7], 0.9).unwrap()[0],
            0.88,
            epsilon = 1e-15
        );
        assert!(ema_update_thresholds(&[0.9], &[0.7, 0.1], 0.5).is_err());
    }

    #[test]
    fn ias_all_confident_single_class() {
        let p = pm(2, 2, &[&[1.0, 0.0][..]; 4]);
        let params = IasParams {
            alpha: 0.5,
            beta: 0.9,
            gamma: 0.0,
            theta_init: 0.9,
        };
        let (labels, state) = generate_pseudo_labels_ias(&[p], 2, &params, false).unwrap();
        assert_abs_diff_eq!(state.thresholds[0], 0.91, epsilon = 1e-12);
        assert_eq!(state.thresholds[1], 0.9);
        assert_eq!(labels[0].labels(), &[0, 0, 0, 0]);
    }

    #[test]
    fn ias_empty_sequence() {
        let (labels, state) = generate_pseudo_labels_ias::<ProbMap>(&[], 3, &IasParams::default(), true).unwrap();
        assert!(labels.is_empty());
        assert_eq!(state.thresholds, vec![0.9; 3]);
        assert_eq!(state.updates, 0);
    }

    #[test]
    fn ias_rejects_mixed_class_counts() {
        let a = pm(1, 1, &[&[0.5, 0.5]]);
        let b = pm(1, 1, &[&[0.2, 0.3, 0.5]]);
        assert!(generate_pseudo_labels_ias(&[a, b], 2, &IasParams::default(), false).is_err());
    }

    #[test]
    fn constant_threshold_cases() {
        let p = pm(1, 1, &[&[0.6, 0.4]]);
        assert_eq!(generate_pseudo_labels_constant(&[&p], 0.5)[0].labels(), &[0]);
        assert_eq!(generate_pseudo_labels_constant(&[&p], 0.7)[0].labels(), &[IGNORE]);
        assert_eq!(generate_pseudo_labels_constant(&[&p], 0.0)[0].labels(), &[0]);
        let q = pm(1, 2, &[&[0.99, 0.01], &[0.3, 0.7]]);
        assert!(generate_pseudo_labels_constant(&[&q], 0.9999)[0]
            .labels()
            .iter()
            .all(|&l| l == IGNORE));
    }

    #[test]
    fn class_balanced_alpha_one_drops_minimum() {
        let p = pm(1, 3, &[&[0.9, 0.1], &[0.8, 0.2], &[0.7, 0.3]]);
        let (labels, th) = generate_pseudo_labels_classbalanced(&[p], 1.0).unwrap();
        assert_eq!(th[0], 0.7);
        assert_eq!(labels[0].labels(), &[0, 0, IGNORE]);
    }

    #[test]
    fn class_balanced_absent_class_never_labeled() {
        let p = pm(1, 2, &[&[0.9, 0.05, 0.05], &[0.6, 0.3, 0.1]]);
        let (labels, _) = generate_pseudo_labels_classbalanced(&[p], 0.5).unwrap();
        assert!(labels[0].labels().iter().all(|&l| l != 1 && l != 2));
    }

    #[test]
    fn stats_cases() {
        let none = LabelMap::filled(2, 2, IGNORE);
        let s = selection_stats(std::slice::from_ref(&none), None, 2).unwrap();
        assert_eq!(s.proportion, 0.0);
        assert_eq!(s.diversity, 0);

        let full = LabelMap::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let s = selection_stats(std::slice::from_ref(&full), Some(std::slice::from_ref(&full)), 2).unwrap();
        assert_eq!(s.proportion, 1.0);
        assert_eq!(s.pmiou, Some(1.0));

        // One correct class-0 pixel, one class-1 prediction on a class-0 pixel.
        let pred = LabelMap::new(2, 2, vec![0, 1, IGNORE, IGNORE]).unwrap();
        let reference = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        let s = selection_stats(&[pred], Some(&[reference]), 2).unwrap();
        assert_eq!(s.proportion, 0.5);
        assert_abs_diff_eq!(s.pmiou.unwrap(), 0.25, epsilon = 1e-15);
        assert_eq!(s.per_class_proportion, vec![0.25, 0.25]);
    }

    #[test]
    fn stats_shape_mismatch() {
        let a = LabelMap::filled(2, 2, 0);
        let b = LabelMap::filled(2, 3, 0);
        assert!(selection_stats(&[a], Some(&[b]), 2).is_err());
    }

    #[test]
    fn trace_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = pm(1, 2, &[&[0.9, 0.1], &[0.2, 0.8]]);
        let (_, state) = generate_pseudo_labels_ias(&[p.clone(), p], 2, &IasParams::default(), true).unwrap();
        let path = dir.path().join("thresholds.csv");
        state.write_trace_csv(&["a", "b"], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "instance_id,class_0,class_1");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("b,"));
    }
}
