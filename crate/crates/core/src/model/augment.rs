//! Weak (geometric) and strong (photometric) views of a training image.
//!
//! The weak view only flips horizontally. The strong view takes the same
//! geometry and then applies photometric perturbations, so teacher and
//! student predictions stay pixel-aligned.

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{FeatureMap, LabelMap};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    /// Photometric ops drawn per strong view (distinct, at most 4).
    pub strong_ops: usize,
    /// Per-channel gain drawn from `[1 - g, 1 + g]`.
    pub gain: f64,
    pub noise_std: f64,
    /// Contrast factor drawn from `[1 - c, 1 + c]`, applied about the channel mean.
    pub contrast: f64,
    /// Maximum side of the erased rectangle as a fraction of the image side.
    pub erase_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            strong_ops: 3,
            gain: 0.2,
            noise_std: 0.1,
            contrast: 0.2,
            erase_fraction: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GeometryRecord {
    pub flip: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrongOp {
    Gain,
    Noise,
    Contrast,
    Erase,
}

const STRONG_POOL: [StrongOp; 4] = [StrongOp::Gain, StrongOp::Noise, StrongOp::Contrast, StrongOp::Erase];

fn flip_rows<T: Copy>(values: &mut [T], height: usize, width: usize, channels: usize) {
    for r in 0..height {
        let row = &mut values[r * width * channels..(r + 1) * width * channels];
        for c in 0..width / 2 {
            let mirror = width - 1 - c;
            for k in 0..channels {
                row.swap(c * channels + k, mirror * channels + k);
            }
        }
    }
}

pub fn apply_geometry_features(x: &FeatureMap, geometry: GeometryRecord) -> FeatureMap {
    let mut out = x.clone();
    if geometry.flip {
        let (h, w, c) = (x.height(), x.width(), x.channels());
        flip_rows(out.values_mut(), h, w, c);
    }
    out
}

pub fn apply_geometry_labels(y: &LabelMap, geometry: GeometryRecord) -> LabelMap {
    let mut out = y.clone();
    if geometry.flip {
        let (h, w) = (y.height(), y.width());
        flip_rows(out.labels_mut(), h, w, 1);
    }
    out
}

/// Draws the shared geometry and returns the weak view.
pub fn augment_weak(x: &FeatureMap, cfg: &AugmentConfig, rng: &mut Rng) -> (FeatureMap, GeometryRecord) {
    let geometry = GeometryRecord {
        flip: rng.random::<f64>() < cfg.flip_probability,
    };
    (apply_geometry_features(x, geometry), geometry)
}

/// Photometric perturbation of an already geometry-transformed view.
pub fn augment_strong(x: &FeatureMap, cfg: &AugmentConfig, rng: &mut Rng) -> FeatureMap {
    let mut out = x.clone();
    let n = cfg.strong_ops.min(STRONG_POOL.len());
    for i in index::sample(rng, STRONG_POOL.len(), n).into_iter() {
        apply_op(&mut out, STRONG_POOL[i], cfg, rng);
    }
    out
}

fn apply_op(x: &mut FeatureMap, op: StrongOp, cfg: &AugmentConfig, rng: &mut Rng) {
    let (h, w, ch) = (x.height(), x.width(), x.channels());
    match op {
        StrongOp::Gain => {
            let gains: Vec<f32> = (0..ch)
                .map(|_| (1.0 + cfg.gain * (2.0 * rng.random::<f64>() - 1.0)) as f32)
                .collect();
            for px in x.values_mut().chunks_exact_mut(ch) {
                px.iter_mut().zip(&gains).for_each(|(v, g)| *v *= g);
            }
        }
        StrongOp::Noise => {
            if cfg.noise_std > 0.0 {
                let n = Normal::new(0.0, cfg.noise_std).expect("positive std");
                for v in x.values_mut() {
                    *v += n.sample(rng) as f32;
                }
            }
        }
        StrongOp::Contrast => {
            let mut means = vec![0.0f64; ch];
            for px in x.values().chunks_exact(ch) {
                means.iter_mut().zip(px).for_each(|(m, &v)| *m += f64::from(v));
            }
            means.iter_mut().for_each(|m| *m /= (h * w) as f64);
            let factor = 1.0 + cfg.contrast * (2.0 * rng.random::<f64>() - 1.0);
            for px in x.values_mut().chunks_exact_mut(ch) {
                for (v, m) in px.iter_mut().zip(&means) {
                    *v = (m + factor * (f64::from(*v) - m)) as f32;
                }
            }
        }
        StrongOp::Erase => {
            let eh = ((cfg.erase_fraction * h as f64 * rng.random::<f64>()) as usize).min(h);
            let ew = ((cfg.erase_fraction * w as f64 * rng.random::<f64>()) as usize).min(w);
            let r0 = rng.random_range(0..=h - eh);
            let c0 = rng.random_range(0..=w - ew);
            for r in r0..r0 + eh {
                for c in c0..c0 + ew {
                    x.pixel_mut(r * w + c).iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }
}
