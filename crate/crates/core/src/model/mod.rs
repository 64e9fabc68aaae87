//! A per-pixel MLP classifier with hand-written backpropagation, the
//! self-training objective, augmentations, and the optimizer.

mod augment;
mod losses;
mod optim;

pub use augment::{
    apply_geometry_features, apply_geometry_labels, augment_strong, augment_weak, AugmentConfig, GeometryRecord,
    StrongOp,
};
pub use losses::{
    loss_ce_confident, loss_consistency_ignored, loss_entropy_ignored, loss_kld_confident, region_masks,
    supervised_loss, total_loss, LossReport, LossWeights, RegionMasks, TermGrad, TrainItem,
};
pub use optim::{adam_step, adam_update, cosine_lr, ema_update_params, AdamConfig, AdamState};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{softmax_into, FeatureMap, ProbMap};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, a: f64) -> f64 {
        match self {
            // Equal to `f64::tanh` up to rounding, with a single exp.
            Activation::Tanh => 1.0 - 2.0 / ((2.0 * a).exp() + 1.0),
            Activation::Relu => a.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `a` and output `h`.
    fn derivative(self, a: f64, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Weights of an `inputs -> hidden -> classes` MLP; `hidden == 0` is a plain
/// linear softmax model. Gradients and optimizer moments reuse this type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
    pub activation: Activation,
    /// `hidden x inputs`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `classes x width` where width is `hidden`, or `inputs` when `hidden == 0`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

pub const TENSOR_NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];

impl ModelParams {
    pub fn zeros(inputs: usize, hidden: usize, classes: usize, activation: Activation) -> Self {
        let width = if hidden == 0 { inputs } else { hidden };
        Self {
            inputs,
            hidden,
            classes,
            activation,
            w1: vec![0.0; hidden * inputs],
            b1: vec![0.0; hidden],
            w2: vec![0.0; classes * width],
            b2: vec![0.0; classes],
        }
    }

    /// Gaussian weights with variance `1 / fan_in`, zero biases.
    pub fn init(inputs: usize, hidden: usize, classes: usize, activation: Activation, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(inputs, hidden, classes, activation);
        let std1 = (1.0 / inputs as f64).sqrt();
        let n1 = Normal::new(0.0, std1).expect("positive std");
        p.w1.iter_mut().for_each(|w| *w = n1.sample(rng));
        let std2 = (1.0 / p.width() as f64).sqrt();
        let n2 = Normal::new(0.0, std2).expect("positive std");
        p.w2.iter_mut().for_each(|w| *w = n2.sample(rng));
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.inputs, self.hidden, self.classes, self.activation)
    }

    pub fn width(&self) -> usize {
        if self.hidden == 0 {
            self.inputs
        } else {
            self.hidden
        }
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn tensors(&self) -> [(&'static str, &[f64]); 4] {
        [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 4] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    /// Dimensions of each named tensor, for serialization.
    pub fn tensor_dims(&self, name: &str) -> Vec<usize> {
        match name {
            "w1" => vec![self.hidden, self.inputs],
            "b1" => vec![self.hidden],
            "w2" => vec![self.classes, self.width()],
            _ => vec![self.classes],
        }
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.inputs == other.inputs
            && self.hidden == other.hidden
            && self.classes == other.classes
            && self.w1.len() == other.w1.len()
            && self.b1.len() == other.b1.len()
            && self.w2.len() == other.w2.len()
            && self.b2.len() == other.b2.len()
    }

    /// Flattened copy in `w1, b1, w2, b2` order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut offset = 0;
        for (_, t) in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b.iter()).for_each(|(x, y)| *x += scale * y);
        }
    }

    fn check_input(&self, features: &FeatureMap) -> Result<()> {
        if features.channels() != self.inputs {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} input channels, features have {}",
                self.inputs,
                features.channels()
            )));
        }
        Ok(())
    }
}

/// Weights rearranged for the per-pixel loops: `w1t` is `inputs x hidden`
/// and `w2t` is `width x classes`, so every inner loop runs over a contiguous
/// hidden or class axis.
pub(crate) struct Kernel {
    hidden: usize,
    classes: usize,
    activation: Activation,
    w1t: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    w2t: Vec<f64>,
    b2: Vec<f64>,
}

fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

/// Parameter gradient in the kernel's layout.
pub(crate) struct GradAccum {
    w1t: Vec<f64>,
    b1: Vec<f64>,
    w2t: Vec<f64>,
    b2: Vec<f64>,
}

impl Kernel {
    pub(crate) fn new(p: &ModelParams) -> Self {
        let width = p.width();
        Self {
            hidden: p.hidden,
            classes: p.classes,
            activation: p.activation,
            w1t: transpose(&p.w1, p.hidden, p.inputs),
            b1: p.b1.clone(),
            w2: p.w2.clone(),
            w2t: transpose(&p.w2, p.classes, width),
            b2: p.b2.clone(),
        }
    }

    pub(crate) fn zero_grad(&self) -> GradAccum {
        GradAccum {
            w1t: vec![0.0; self.w1t.len()],
            b1: vec![0.0; self.b1.len()],
            w2t: vec![0.0; self.w2t.len()],
            b2: vec![0.0; self.b2.len()],
        }
    }

    /// Logits of one pixel; fills `hidden` (length `self.hidden`) with activations.
    #[inline]
    pub(crate) fn logits(&self, x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
        let h_in: &[f64] = if self.hidden == 0 {
            x
        } else {
            hidden.copy_from_slice(&self.b1);
            for (k, &v) in x.iter().enumerate() {
                let row = &self.w1t[k * self.hidden..(k + 1) * self.hidden];
                hidden.iter_mut().zip(row).for_each(|(h, w)| *h += w * v);
            }
            hidden.iter_mut().for_each(|h| *h = self.activation.apply(*h));
            hidden
        };
        logits.copy_from_slice(&self.b2);
        for (j, &v) in h_in.iter().enumerate() {
            let row = &self.w2t[j * self.classes..(j + 1) * self.classes];
            logits.iter_mut().zip(row).for_each(|(z, w)| *z += w * v);
        }
    }

    /// Accumulates the parameter gradient for one pixel given `dL/dlogits`.
    ///
    /// `hidden` must hold the activations from [`Self::logits`] on `x`.
    #[inline]
    pub(crate) fn backward(
        &self,
        x: &[f64],
        hidden: &[f64],
        g_logits: &[f64],
        g_hidden: &mut [f64],
        acc: &mut GradAccum,
    ) {
        let h_in: &[f64] = if self.hidden == 0 { x } else { hidden };
        acc.b2.iter_mut().zip(g_logits).for_each(|(b, g)| *b += g);
        for (j, &v) in h_in.iter().enumerate() {
            let row = &mut acc.w2t[j * self.classes..(j + 1) * self.classes];
            row.iter_mut().zip(g_logits).for_each(|(w, g)| *w += g * v);
        }
        if self.hidden == 0 {
            return;
        }
        g_hidden.iter_mut().for_each(|v| *v = 0.0);
        for (c, &g) in g_logits.iter().enumerate() {
            let row = &self.w2[c * self.hidden..(c + 1) * self.hidden];
            g_hidden.iter_mut().zip(row).for_each(|(s, w)| *s += w * g);
        }
        // For ReLU the sign of the output equals the sign of the pre-activation.
        g_hidden
            .iter_mut()
            .zip(hidden)
            .for_each(|(s, &h)| *s *= self.activation.derivative(h, h));
        acc.b1.iter_mut().zip(g_hidden.iter()).for_each(|(b, g)| *b += g);
        for (k, &v) in x.iter().enumerate() {
            let row = &mut acc.w1t[k * self.hidden..(k + 1) * self.hidden];
            row.iter_mut().zip(g_hidden.iter()).for_each(|(w, g)| *w += g * v);
        }
    }
}

impl GradAccum {
    /// Back to the [`ModelParams`] layout.
    pub(crate) fn into_params(self, like: &ModelParams) -> ModelParams {
        let mut g = like.zeros_like();
        g.w1 = transpose(&self.w1t, like.inputs, like.hidden);
        g.b1 = self.b1;
        g.w2 = transpose(&self.w2t, like.width(), like.classes);
        g.b2 = self.b2;
        g
    }
}

/// Per-pixel MLP followed by a stable softmax.
pub fn forward(params: &ModelParams, features: &FeatureMap) -> Result<ProbMap> {
    params.check_input(features)?;
    let c = params.classes;
    let mut probs = vec![0.0; features.num_pixels() * c];
    let mut x = vec![0.0; params.inputs];
    let mut hidden = vec![0.0; params.hidden];
    let mut logits = vec![0.0; c];
    let kernel = Kernel::new(params);
    for (i, out) in probs.chunks_exact_mut(c).enumerate() {
        for (xi, &v) in x.iter_mut().zip(features.pixel(i)) {
            *xi = f64::from(v);
        }
        kernel.logits(&x, &mut hidden, &mut logits);
        softmax_into(&logits, out);
    }
    Ok(ProbMap::from_raw(features.height(), features.width(), c, probs))
}

/// Raw logits as a map with one channel per class (narrowed to `f32`).
pub fn forward_logits(params: &ModelParams, features: &FeatureMap) -> Result<FeatureMap> {
    params.check_input(features)?;
    let c = params.classes;
    let mut values = Vec::with_capacity(features.num_pixels() * c);
    let mut x = vec![0.0; params.inputs];
    let mut hidden = vec![0.0; params.hidden];
    let mut logits = vec![0.0; c];
    let kernel = Kernel::new(params);
    for i in 0..features.num_pixels() {
        for (xi, &v) in x.iter_mut().zip(features.pixel(i)) {
            *xi = f64::from(v);
        }
        kernel.logits(&x, &mut hidden, &mut logits);
        values.extend(logits.iter().map(|&z| z as f32));
    }
    FeatureMap::new(features.height(), features.width(), c, values)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use rand::Rng as _;

    #[test]
    fn zero_model_is_uniform() {
        let p = ModelParams::zeros(3, 4, 5, Activation::Tanh);
        let f = FeatureMap::new(1, 2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.1, 9.0]).unwrap();
        let pm = forward(&p, &f).unwrap();
        assert!(pm.probs().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn linear_identity_is_softmax_of_features() {
        let mut p = ModelParams::zeros(3, 0, 3, Activation::Tanh);
        for c in 0..3 {
            p.w2[c * 3 + c] = 1.0;
        }
        let f = FeatureMap::new(1, 1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let pm = forward(&p, &f).unwrap();
        let e: Vec<f64> = [0.5f64, -1.0, 2.0].iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        for c in 0..3 {
            assert_abs_diff_eq!(pm.pixel(0)[c], e[c] / s, epsilon = 1e-15);
        }
    }

    /// Straight scalar-loop evaluation of the MLP, independent of the
    /// slice-based forward path.
    fn brute_force_probs(p: &ModelParams, x: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; p.hidden];
        for j in 0..p.hidden {
            let mut a = p.b1[j];
            for k in 0..p.inputs {
                a += p.w1[j * p.inputs + k] * x[k];
            }
            h[j] = match p.activation {
                Activation::Tanh => a.tanh(),
                Activation::Relu => a.max(0.0),
            };
        }
        let src = if p.hidden == 0 { x.to_vec() } else { h };
        let mut z = vec![0.0; p.classes];
        for c in 0..p.classes {
            z[c] = p.b2[c];
            for j in 0..src.len() {
                z[c] += p.w2[c * src.len() + j] * src[j];
            }
        }
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        for seed in 0..5 {
            for (hidden, act) in [(0, Activation::Tanh), (6, Activation::Tanh), (6, Activation::Relu)] {
                let mut g = rng::stream(seed, &[99]);
                let mut p = ModelParams::init(3, hidden, 4, act, &mut g);
                p.b1.iter_mut().for_each(|b| *b = g.random_range(-0.5..0.5));
                p.b2.iter_mut().for_each(|b| *b = g.random_range(-0.5..0.5));
                let vals: Vec<f32> = (0..27).map(|_| g.random_range(-2.0..2.0)).collect();
                let f = FeatureMap::new(3, 3, 3, vals).unwrap();
                let pm = forward(&p, &f).unwrap();
                for i in 0..9 {
                    let x: Vec<f64> = f.pixel(i).iter().map(|&v| f64::from(v)).collect();
                    let want = brute_force_probs(&p, &x);
                    for c in 0..4 {
                        assert_abs_diff_eq!(pm.pixel(i)[c], want[c], epsilon = 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn forward_rejects_channel_mismatch() {
        let p = ModelParams::zeros(3, 4, 5, Activation::Tanh);
        assert!(forward(&p, &FeatureMap::zeros(1, 1, 2)).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let mut g = rng::stream(1, &[]);
        let p = ModelParams::init(3, 5, 4, Activation::Tanh, &mut g);
        let mut q = p.zeros_like();
        q.set_flat(&p.to_flat());
        assert_eq!(p, q);
    }
}
