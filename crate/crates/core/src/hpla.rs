//! Hard-aware pseudo-label augmentation.
//!
//! Classes with the lowest adaptive thresholds are treated as hard. For each
//! target image a class is drawn with probability proportional to
//! `1 - theta`, a donor image whose pseudo-label contains that class is
//! picked, and every donor pixel labeled with any hard class is pasted onto
//! the target image and its pseudo-label.

use rand::Rng as _;

use crate::data::{Dataset, FeatureMap, PseudoLabelMap, IGNORE};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Hard classes in ascending threshold order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardClassSet {
    classes: Vec<u8>,
    member: Vec<bool>,
}

impl HardClassSet {
    pub fn new(classes: Vec<u8>, num_classes: usize) -> Result<Self> {
        let mut member = vec![false; num_classes];
        for &c in &classes {
            let slot = member
                .get_mut(c as usize)
                .ok_or(Error::LabelOutOfRange { label: c, num_classes })?;
            if *slot {
                return Err(Error::InvalidConfig(format!("hard class {c} listed twice")));
            }
            *slot = true;
        }
        Ok(Self { classes, member })
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn contains(&self, label: u8) -> bool {
        label != IGNORE && self.member.get(label as usize).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// The `k` classes with the smallest thresholds; ties go to the lower class id.
pub fn detect_hard_classes(theta: &[f64], k: usize) -> Result<HardClassSet> {
    if k == 0 || k > theta.len() {
        return Err(Error::InvalidConfig(format!(
            "k must be in [1, {}], got {k}",
            theta.len()
        )));
    }
    let mut order: Vec<usize> = (0..theta.len()).collect();
    order.sort_by(|&a, &b| theta[a].total_cmp(&theta[b]));
    HardClassSet::new(order[..k].iter().map(|&c| c as u8).collect(), theta.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingDistribution {
    probs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl SamplingDistribution {
    fn from_weights(weights: Vec<f64>) -> Self {
        let total: f64 = weights.iter().sum();
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Self { probs, cumulative }
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self::from_weights(vec![1.0; num_classes])
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Inverse-CDF draw; never returns a zero-probability class.
    pub fn sample(&self, rng: &mut Rng) -> usize {
        let u: f64 = rng.random::<f64>() * self.cumulative.last().copied().unwrap_or(1.0);
        let pos = self.cumulative.partition_point(|&c| c <= u);
        let mut c = pos.min(self.probs.len() - 1);
        // Guard the top end against rounding in the cumulative sum.
        while self.probs[c] == 0.0 && c > 0 {
            c -= 1;
        }
        c
    }
}

/// `r_c = (1 - theta_c) / sum_i (1 - theta_i)`.
pub fn sampling_probabilities(theta: &[f64]) -> Result<SamplingDistribution> {
    if let Some(t) = theta.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(Error::InvalidConfig(format!("threshold {t} outside (0, 1]")));
    }
    let weights: Vec<f64> = theta.iter().map(|t| 1.0 - t).collect();
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::DegenerateThresholds);
    }
    Ok(SamplingDistribution::from_weights(weights))
}

/// For each class, the indices of samples whose pseudo-label contains it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassIndex {
    lists: Vec<Vec<usize>>,
}

impl ClassIndex {
    pub fn samples_with(&self, class: usize) -> &[usize] {
        &self.lists[class]
    }

    pub fn num_classes(&self) -> usize {
        self.lists.len()
    }
}

pub fn build_class_index(labels: &[PseudoLabelMap], num_classes: usize) -> ClassIndex {
    let mut lists = vec![Vec::new(); num_classes];
    let mut seen = vec![false; num_classes];
    for (i, lm) in labels.iter().enumerate() {
        seen.iter_mut().for_each(|s| *s = false);
        for &l in lm.labels() {
            if l != IGNORE && (l as usize) < num_classes {
                seen[l as usize] = true;
            }
        }
        for (c, _) in seen.iter().enumerate().filter(|(_, &s)| s) {
            lists[c].push(i);
        }
    }
    ClassIndex { lists }
}

/// Target images and their pseudo-labels, available as paste donors.
#[derive(Debug, Clone, Copy)]
pub struct DonorPool<'a> {
    pub dataset: &'a Dataset,
    pub labels: &'a [PseudoLabelMap],
    pub index: &'a ClassIndex,
}

/// Picks a donor for one draw, or `None` when no drawn class has a donor.
fn pick_donor(pool: &DonorPool<'_>, r: &SamplingDistribution, exclude: Option<usize>, rng: &mut Rng) -> Option<usize> {
    let num_classes = pool.index.num_classes();
    for _ in 0..=num_classes {
        let c = r.sample(rng);
        let list = pool.index.samples_with(c);
        if list.is_empty() {
            continue;
        }
        let donor = match exclude {
            Some(me) if list.len() > 1 && list.contains(&me) => {
                let j = rng.random_range(0..list.len() - 1);
                let others = list.iter().copied().filter(|&s| s != me);
                others.clone().nth(j).expect("j indexes the remaining donors")
            }
            _ => list[rng.random_range(0..list.len())],
        };
        return Some(donor);
    }
    None
}

/// Pastes hard-class regions from `draws` donor images onto one target image.
///
/// `self_index` is the target's position in the donor pool, so it is only
/// its own donor when no other image contains the drawn class. Returns the
/// augmented pair and the donors used.
#[allow(clippy::too_many_arguments)]
pub fn hpla_augment(
    features: &FeatureMap,
    labels: &PseudoLabelMap,
    self_index: Option<usize>,
    pool: &DonorPool<'_>,
    hard: &HardClassSet,
    r: &SamplingDistribution,
    draws: usize,
    rng: &mut Rng,
) -> Result<(FeatureMap, PseudoLabelMap, Vec<usize>)> {
    if !features.same_grid(labels.height(), labels.width()) {
        return Err(Error::ShapeMismatch(
            "target features and pseudo-labels differ in size".into(),
        ));
    }
    let mut out_f = features.clone();
    let mut out_l = labels.clone();
    let mut used = Vec::new();
    for _ in 0..draws {
        let Some(donor) = pick_donor(pool, r, self_index, rng) else {
            break;
        };
        let df = &pool.dataset.samples()[donor].features;
        let dl = &pool.labels[donor];
        if !df.same_grid(out_l.height(), out_l.width()) || !dl.same_shape(&out_l) || df.channels() != out_f.channels() {
            return Err(Error::ShapeMismatch(format!(
                "donor {} differs in shape from the target",
                pool.dataset.samples()[donor].id
            )));
        }
        for (i, &l) in dl.labels().iter().enumerate() {
            if hard.contains(l) {
                out_f.pixel_mut(i).copy_from_slice(df.pixel(i));
                out_l.labels_mut()[i] = l;
            }
        }
        used.push(donor);
    }
    Ok((out_f, out_l, used))
}
