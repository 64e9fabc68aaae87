//! Region-adaptive self-training objective with analytic gradients.
//!
//! Confident (pseudo-labeled) pixels get cross-entropy plus a cross-entropy
//! to the uniform distribution that discourages overconfidence. Ignored
//! pixels get entropy minimization plus a soft cross-entropy towards the
//! teacher's prediction on the weak view. Every term is a mean over the
//! pixels of its region across the batch, and an empty region contributes 0.
//!
//! All gradients are taken with respect to the student logits and then
//! backpropagated through the MLP; the teacher is a constant.

use serde::{Deserialize, Serialize};

use super::augment::{apply_geometry_labels, augment_strong, augment_weak, AugmentConfig};
use super::{Kernel, ModelParams};
use crate::data::{FeatureMap, LabelMap, ProbMap, PseudoLabelMap, IGNORE};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMasks {
    pub confident: Vec<bool>,
    pub ignored: Vec<bool>,
}

impl RegionMasks {
    pub fn confident_count(&self) -> usize {
        self.confident.iter().filter(|&&b| b).count()
    }

    pub fn ignored_count(&self) -> usize {
        self.ignored.iter().filter(|&&b| b).count()
    }
}

pub fn region_masks(y: &PseudoLabelMap) -> RegionMasks {
    let confident: Vec<bool> = y.labels().iter().map(|&l| l != IGNORE).collect();
    let ignored = confident.iter().map(|&c| !c).collect();
    RegionMasks { confident, ignored }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_i: f64,
    pub lambda_c: f64,
    pub lambda_cst: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_i: 1.0,
            lambda_c: 0.1,
            lambda_cst: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_i", self.lambda_i),
            ("lambda_c", self.lambda_c),
            ("lambda_cst", self.lambda_cst),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Value of one loss term on a single map and its gradient with respect to
/// the logits (pixel-major, `C` entries per pixel).
#[derive(Debug, Clone, PartialEq)]
pub struct TermGrad {
    pub value: f64,
    pub grad_logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub ce: f64,
    pub kld: f64,
    pub entropy: f64,
    pub consistency: f64,
    /// Supervised source-domain term, when the pipeline adds one.
    pub source_ce: f64,
    pub grad: ModelParams,
}

impl LossReport {
    /// Recomputes `total` from the term fields.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        self.ce + w.lambda_c * self.kld + w.lambda_i * self.entropy + w.lambda_cst * self.consistency + self.source_ce
    }
}

// Per-pixel terms. Each returns the term value and adds `scale * dterm/dlogits`
// into `g`. `logp` must be the log-probabilities matching `p`.

#[inline]
fn pixel_ce(p: &[f64], logp: &[f64], label: usize, scale: f64, g: &mut [f64]) -> f64 {
    for (gi, &pi) in g.iter_mut().zip(p) {
        *gi += scale * pi;
    }
    g[label] -= scale;
    -logp[label]
}

#[inline]
fn pixel_kld(p: &[f64], logp: &[f64], scale: f64, g: &mut [f64]) -> f64 {
    let inv_c = 1.0 / p.len() as f64;
    for (gi, &pi) in g.iter_mut().zip(p) {
        *gi += scale * (pi - inv_c);
    }
    -inv_c * logp.iter().sum::<f64>()
}

#[inline]
fn pixel_entropy(p: &[f64], logp: &[f64], scale: f64, g: &mut [f64]) -> f64 {
    let h: f64 = -p
        .iter()
        .zip(logp)
        .map(|(&pi, &li)| if pi > 0.0 { pi * li } else { 0.0 })
        .sum::<f64>();
    for ((gi, &pi), &li) in g.iter_mut().zip(p).zip(logp) {
        if pi > 0.0 {
            *gi -= scale * pi * (li + h);
        }
    }
    h
}

#[inline]
fn pixel_consistency(p: &[f64], logp: &[f64], q: &[f64], scale: f64, g: &mut [f64]) -> f64 {
    let mut v = 0.0;
    for (((gi, &pi), &li), &qi) in g.iter_mut().zip(p).zip(logp).zip(q) {
        *gi += scale * (pi - qi);
        if qi > 0.0 {
            v -= qi * li;
        }
    }
    v
}

fn logs(p: &[f64]) -> Vec<f64> {
    p.iter().map(|v| v.ln()).collect()
}

fn check_masks(p: &ProbMap, masks: &RegionMasks) -> Result<()> {
    if masks.confident.len() != p.num_pixels() || masks.ignored.len() != p.num_pixels() {
        return Err(Error::ShapeMismatch(format!(
            "masks cover {} pixels, prob map has {}",
            masks.confident.len(),
            p.num_pixels()
        )));
    }
    Ok(())
}

fn region_term(
    p: &ProbMap,
    region: &[bool],
    mut f: impl FnMut(usize, &[f64], &[f64], f64, &mut [f64]) -> Result<f64>,
) -> Result<TermGrad> {
    let c = p.num_classes();
    let n = region.iter().filter(|&&b| b).count();
    let mut grad = vec![0.0; p.probs().len()];
    if n == 0 {
        return Ok(TermGrad {
            value: 0.0,
            grad_logits: grad,
        });
    }
    let scale = 1.0 / n as f64;
    let mut sum = 0.0;
    for i in (0..p.num_pixels()).filter(|&i| region[i]) {
        let px = p.pixel(i);
        sum += f(i, px, &logs(px), scale, &mut grad[i * c..(i + 1) * c])?;
    }
    Ok(TermGrad {
        value: sum * scale,
        grad_logits: grad,
    })
}

/// Mean cross-entropy against the pseudo-label over confident pixels.
pub fn loss_ce_confident(p: &ProbMap, y: &PseudoLabelMap, masks: &RegionMasks) -> Result<TermGrad> {
    check_masks(p, masks)?;
    if y.num_pixels() != p.num_pixels() {
        return Err(Error::ShapeMismatch("labels and prob map differ in size".into()));
    }
    let c = p.num_classes();
    region_term(p, &masks.confident, |i, px, lp, scale, g| {
        let label = y.labels()[i];
        if label == IGNORE || label as usize >= c {
            return Err(Error::LabelOutOfRange { label, num_classes: c });
        }
        Ok(pixel_ce(px, lp, label as usize, scale, g))
    })
}

/// Mean cross-entropy to the uniform distribution over confident pixels.
pub fn loss_kld_confident(p: &ProbMap, masks: &RegionMasks) -> Result<TermGrad> {
    check_masks(p, masks)?;
    region_term(p, &masks.confident, |_, px, lp, scale, g| {
        Ok(pixel_kld(px, lp, scale, g))
    })
}

/// Mean entropy over ignored pixels (`0 log 0 = 0`).
pub fn loss_entropy_ignored(p: &ProbMap, masks: &RegionMasks) -> Result<TermGrad> {
    check_masks(p, masks)?;
    region_term(p, &masks.ignored, |_, px, lp, scale, g| {
        Ok(pixel_entropy(px, lp, scale, g))
    })
}

/// Mean soft cross-entropy from the teacher to the student over ignored pixels.
pub fn loss_consistency_ignored(p_student: &ProbMap, p_teacher: &ProbMap, masks: &RegionMasks) -> Result<TermGrad> {
    check_masks(p_student, masks)?;
    if p_student.num_pixels() != p_teacher.num_pixels()
        || p_student.num_classes() != p_teacher.num_classes()
        || p_student.height() != p_teacher.height()
    {
        return Err(Error::ShapeMismatch("student and teacher maps are misaligned".into()));
    }
    region_term(p_student, &masks.ignored, |i, px, lp, scale, g| {
        Ok(pixel_consistency(px, lp, p_teacher.pixel(i), scale, g))
    })
}

/// A target image after pseudo-label augmentation, before weak/strong views.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub features: FeatureMap,
    pub labels: PseudoLabelMap,
}

/// Forward pass of one pixel with log-softmax; returns nothing, fills buffers.
#[inline]
fn pixel_forward(kernel: &Kernel, x: &[f64], hidden: &mut [f64], logits: &mut [f64], p: &mut [f64], logp: &mut [f64]) {
    kernel.logits(x, hidden, logits);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (pi, &z) in p.iter_mut().zip(logits.iter()) {
        *pi = (z - max).exp();
        sum += *pi;
    }
    let log_sum = sum.ln();
    for ((pi, li), &z) in p.iter_mut().zip(logp.iter_mut()).zip(logits.iter()) {
        *pi /= sum;
        *li = z - max - log_sum;
    }
}

fn to_f64(dst: &mut [f64], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = f64::from(s));
}

/// The full self-training objective over a batch and its parameter gradient.
///
/// Each item gets a weak view (shared geometry) for the teacher and a strong
/// view (same geometry plus photometric noise) for the student; all four
/// terms are evaluated on the student's strong-view prediction. With `aug`
/// set to `None` both views are the raw item. A term whose weight is zero is
/// skipped when it would need extra work: the consistency term is then
/// reported as 0 and the teacher is not run.
pub fn total_loss(
    student: &ModelParams,
    teacher: &ModelParams,
    batch: &[TrainItem],
    weights: &LossWeights,
    aug: Option<&AugmentConfig>,
    aug_seed: u64,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("loss batch is empty".into()));
    }
    if !student.same_shape(teacher) {
        return Err(Error::ShapeMismatch("student and teacher shapes differ".into()));
    }
    let c = student.classes;

    // Views and masks first: the region means need batch-wide counts.
    let mut views = Vec::with_capacity(batch.len());
    let (mut n_conf, mut n_ign) = (0usize, 0usize);
    for (i, item) in batch.iter().enumerate() {
        if item.features.channels() != student.inputs
            || !item.features.same_grid(item.labels.height(), item.labels.width())
        {
            return Err(Error::ShapeMismatch(format!("batch item {i} has inconsistent shape")));
        }
        item.labels.validate(c)?;
        let (weak, strong, labels) = match aug {
            Some(cfg) => {
                let mut g = rng::stream(aug_seed, &[tag::AUGMENT, i as u64]);
                let (weak, geometry) = augment_weak(&item.features, cfg, &mut g);
                let strong = augment_strong(&weak, cfg, &mut g);
                (weak, strong, apply_geometry_labels(&item.labels, geometry))
            }
            None => (item.features.clone(), item.features.clone(), item.labels.clone()),
        };
        let confident = labels.labels().iter().filter(|&&l| l != IGNORE).count();
        n_conf += confident;
        n_ign += labels.num_pixels() - confident;
        views.push((weak, strong, labels));
    }
    let conf_scale = if n_conf > 0 { 1.0 / n_conf as f64 } else { 0.0 };
    let ign_scale = if n_ign > 0 { 1.0 / n_ign as f64 } else { 0.0 };
    let use_teacher = weights.lambda_cst > 0.0;

    let sk = Kernel::new(student);
    let tk = Kernel::new(teacher);
    let mut acc = sk.zero_grad();
    let (mut ce, mut kld, mut ent, mut cst) = (0.0, 0.0, 0.0, 0.0);
    let mut x = vec![0.0; student.inputs];
    let mut xw = vec![0.0; student.inputs];
    let mut hidden = vec![0.0; student.hidden];
    let mut g_hidden = vec![0.0; student.hidden];
    let mut logits = vec![0.0; c];
    let (mut p, mut logp) = (vec![0.0; c], vec![0.0; c]);
    let (mut q, mut logq) = (vec![0.0; c], vec![0.0; c]);
    let mut t_hidden = vec![0.0; teacher.hidden];
    let mut t_logits = vec![0.0; c];
    let mut g = vec![0.0; c];

    for (weak, strong, labels) in &views {
        for (i, &label) in labels.labels().iter().enumerate() {
            to_f64(&mut x, strong.pixel(i));
            pixel_forward(&sk, &x, &mut hidden, &mut logits, &mut p, &mut logp);
            g.iter_mut().for_each(|v| *v = 0.0);
            if label != IGNORE {
                ce += pixel_ce(&p, &logp, label as usize, conf_scale, &mut g);
                kld += pixel_kld(&p, &logp, weights.lambda_c * conf_scale, &mut g);
            } else {
                ent += pixel_entropy(&p, &logp, weights.lambda_i * ign_scale, &mut g);
                if use_teacher {
                    to_f64(&mut xw, weak.pixel(i));
                    pixel_forward(&tk, &xw, &mut t_hidden, &mut t_logits, &mut q, &mut logq);
                    cst += pixel_consistency(&p, &logp, &q, weights.lambda_cst * ign_scale, &mut g);
                }
            }
            sk.backward(&x, &hidden, &g, &mut g_hidden, &mut acc);
        }
    }

    let grad = acc.into_params(student);
    let (ce, kld, ent, cst) = (ce * conf_scale, kld * conf_scale, ent * ign_scale, cst * ign_scale);
    let mut report = LossReport {
        total: 0.0,
        ce,
        kld,
        entropy: ent,
        consistency: cst,
        source_ce: 0.0,
        grad,
    };
    report.total = report.recombine(weights);
    Ok(report)
}

/// Mean cross-entropy over labeled pixels of fully supervised items, with
/// gradient. Used for source-only warm-up and the optional source term.
pub fn supervised_loss(params: &ModelParams, items: &[(&FeatureMap, &LabelMap)]) -> Result<(f64, ModelParams)> {
    let c = params.classes;
    let mut n = 0usize;
    for (f, l) in items {
        if f.channels() != params.inputs || !f.same_grid(l.height(), l.width()) {
            return Err(Error::ShapeMismatch("supervised item has inconsistent shape".into()));
        }
        l.validate(c)?;
        n += l.labels().iter().filter(|&&v| v != IGNORE).count();
    }
    if n == 0 {
        return Ok((0.0, params.zeros_like()));
    }
    let kernel = Kernel::new(params);
    let mut acc = kernel.zero_grad();
    let scale = 1.0 / n as f64;
    let mut x = vec![0.0; params.inputs];
    let mut hidden = vec![0.0; params.hidden];
    let mut g_hidden = vec![0.0; params.hidden];
    let mut logits = vec![0.0; c];
    let (mut p, mut logp) = (vec![0.0; c], vec![0.0; c]);
    let mut g = vec![0.0; c];
    let mut sum = 0.0;
    for (f, l) in items {
        for (i, &label) in l.labels().iter().enumerate() {
            if label == IGNORE {
                continue;
            }
            to_f64(&mut x, f.pixel(i));
            pixel_forward(&kernel, &x, &mut hidden, &mut logits, &mut p, &mut logp);
            g.iter_mut().for_each(|v| *v = 0.0);
            sum += pixel_ce(&p, &logp, label as usize, scale, &mut g);
            kernel.backward(&x, &hidden, &g, &mut g_hidden, &mut acc);
        }
    }
    Ok((sum * scale, acc.into_params(params)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pm(px: &[&[f64]]) -> ProbMap {
        let c = px[0].len();
        ProbMap::new(1, px.len(), c, px.iter().flat_map(|p| p.iter().copied()).collect()).unwrap()
    }

    fn lm(labels: Vec<u8>) -> LabelMap {
        LabelMap::new(1, labels.len(), labels).unwrap()
    }

    #[test]
    fn masks_partition() {
        let m = region_masks(&LabelMap::new(2, 2, vec![0, IGNORE, 1, IGNORE]).unwrap());
        assert_eq!(m.confident, vec![true, false, true, false]);
        assert!(m.confident.iter().zip(&m.ignored).all(|(a, b)| a ^ b));
        let none = region_masks(&LabelMap::filled(2, 2, IGNORE));
        assert_eq!((none.confident_count(), none.ignored_count()), (0, 4));
        let all = region_masks(&LabelMap::filled(2, 2, 1));
        assert_eq!(all.confident_count(), 4);
    }

    #[test]
    fn ce_values() {
        let p = pm(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let y = lm(vec![0, 0]);
        assert_eq!(loss_ce_confident(&p, &y, &region_masks(&y)).unwrap().value, 0.0);

        let p = pm(&[&[0.5, 0.5]]);
        let y = lm(vec![0]);
        let t = loss_ce_confident(&p, &y, &region_masks(&y)).unwrap();
        assert_abs_diff_eq!(t.value, std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(t.value, std::f64::consts::LN_2, epsilon = 1e-12);
        assert_eq!(t.grad_logits, vec![-0.5, 0.5]);

        let y = lm(vec![IGNORE]);
        let t = loss_ce_confident(&p, &y, &region_masks(&y)).unwrap();
        assert_eq!(t.value, 0.0);
        assert!(t.grad_logits.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn kld_values() {
        let y = lm(vec![0]);
        let m = region_masks(&y);
        for c in [2usize, 5, 19] {
            let u = vec![1.0 / c as f64; c];
            let t = loss_kld_confident(&pm(&[&u]), &m).unwrap();
            assert_abs_diff_eq!(t.value, (c as f64).ln(), epsilon = 1e-12);
        }
        let t = loss_kld_confident(&pm(&[&[0.8, 0.2]]), &m).unwrap();
        assert_abs_diff_eq!(t.value, -(0.5 * 0.8f64.ln() + 0.5 * 0.2f64.ln()), epsilon = 1e-15);
        assert_abs_diff_eq!(t.value, 0.916291, epsilon = 1e-6);
        let ign = region_masks(&lm(vec![IGNORE]));
        assert_eq!(loss_kld_confident(&pm(&[&[0.8, 0.2]]), &ign).unwrap().value, 0.0);
    }

    #[test]
    fn entropy_values() {
        let y = lm(vec![IGNORE]);
        let m = region_masks(&y);
        assert_eq!(loss_entropy_ignored(&pm(&[&[1.0, 0.0, 0.0]]), &m).unwrap().value, 0.0);
        let t = loss_entropy_ignored(&pm(&[&[0.25; 4]]), &m).unwrap();
        assert_abs_diff_eq!(t.value, 4f64.ln(), epsilon = 1e-15);
        let t = loss_entropy_ignored(&pm(&[&[0.8, 0.2]]), &m).unwrap();
        assert_abs_diff_eq!(t.value, 0.500402, epsilon = 1e-6);
    }

    #[test]
    fn consistency_values() {
        let m = region_masks(&lm(vec![IGNORE]));
        let u = pm(&[&[0.25; 4]]);
        let t = loss_consistency_ignored(&u, &u, &m).unwrap();
        assert_abs_diff_eq!(t.value, 4f64.ln(), epsilon = 1e-15);
        let s = pm(&[&[0.2, 0.5, 0.3]]);
        let onehot = pm(&[&[0.0, 1.0, 0.0]]);
        let t = loss_consistency_ignored(&s, &onehot, &m).unwrap();
        assert_abs_diff_eq!(t.value, -(0.5f64.ln()), epsilon = 1e-15);
        let t = loss_consistency_ignored(&pm(&[&[0.6, 0.4]]), &pm(&[&[0.9, 0.1]]), &m).unwrap();
        let expected = -(0.9 * 0.6f64.ln() + 0.1 * 0.4f64.ln());
        assert_abs_diff_eq!(t.value, expected, epsilon = 1e-12);
        // 0.551372 to six places; 0.551374 is a rounding slip.
        assert_abs_diff_eq!(t.value, 0.551374, epsilon = 5e-6);
    }

    #[test]
    fn misaligned_consistency_is_error() {
        let m = region_masks(&lm(vec![IGNORE]));
        let a = pm(&[&[0.5, 0.5]]);
        let b = pm(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert!(loss_consistency_ignored(&a, &b, &m).is_err());
    }

    #[test]
    fn ce_rejects_label_overflow() {
        let p = pm(&[&[0.5, 0.5]]);
        let y = lm(vec![3]);
        assert!(loss_ce_confident(&p, &y, &region_masks(&y)).is_err());
    }
}
