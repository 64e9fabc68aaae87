//! Class-conditional synthetic benchmark with a controllable covariate shift.
//!
//! Each image is a Voronoi partition whose cells draw a class from a
//! long-tailed distribution. Pixel features are the class mean plus Gaussian
//! noise. The target domain rotates the class means in channel space (around
//! the axis spanned by the first two channels), adds a global bias, and adds
//! a per-image illumination offset and noise level.

use rand::Rng as _;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetMeta, Domain, FeatureMap, LabelMap, Sample};
use crate::error::{Error, Result};
use crate::rng::{self, tag, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub source_images: usize,
    pub target_images: usize,
    /// Class `c` has relative frequency `(c + 1)^-exponent`.
    pub long_tail_exponent: f64,
    /// Explicit class means (`num_classes` rows of `channels` values). When
    /// absent, classes sit on the scaled corners of the unit hypercube.
    pub class_means: Option<Vec<Vec<f64>>>,
    pub mean_scale: f64,
    /// Voronoi cells per image.
    pub regions_per_image: usize,
    pub source_noise: f64,
    /// Rotation of the target class means in the plane of channels 0 and 1.
    pub target_rotation_deg: f64,
    pub target_bias: Vec<f64>,
    pub target_noise: f64,
    /// Standard deviation of the per-image additive offset in the target domain.
    pub target_image_offset: f64,
    /// Per-image noise level is `target_noise * exp(spread * z)`, `z ~ N(0, 1)`.
    pub target_noise_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            channels: 3,
            height: 64,
            width: 64,
            source_images: 200,
            target_images: 200,
            long_tail_exponent: 1.5,
            class_means: None,
            mean_scale: 1.0,
            regions_per_image: 12,
            source_noise: 0.45,
            target_rotation_deg: 25.0,
            target_bias: vec![0.25, -0.15, 0.2],
            target_noise: 0.45,
            target_image_offset: 0.3,
            target_noise_spread: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_classes < 2 || self.num_classes > 254 {
            return bad(format!("num_classes must be in [2, 254], got {}", self.num_classes));
        }
        if self.channels < 2 {
            return bad(format!("channels must be at least 2, got {}", self.channels));
        }
        if self.height == 0 || self.width == 0 || self.regions_per_image == 0 {
            return bad("image size and region count must be positive".into());
        }
        if self.source_images == 0 || self.target_images == 0 {
            return bad("image counts must be positive".into());
        }
        if !self.long_tail_exponent.is_finite() || self.long_tail_exponent < 0.0 {
            return bad(format!(
                "long_tail_exponent must be finite and >= 0, got {}",
                self.long_tail_exponent
            ));
        }
        for (name, v) in [
            ("source_noise", self.source_noise),
            ("target_noise", self.target_noise),
            ("target_image_offset", self.target_image_offset),
            ("target_noise_spread", self.target_noise_spread),
            ("mean_scale", self.mean_scale),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.target_bias.len() != self.channels {
            return bad(format!(
                "target_bias has {} entries, expected {}",
                self.target_bias.len(),
                self.channels
            ));
        }
        if let Some(means) = &self.class_means {
            if means.len() != self.num_classes || means.iter().any(|m| m.len() != self.channels) {
                return bad("class_means must be num_classes x channels".into());
            }
        } else if self.num_classes > 1 << self.channels.min(16) {
            return bad(format!(
                "default class layout supports at most 2^channels classes; pass class_means for {}",
                self.num_classes
            ));
        }
        Ok(())
    }

    /// Normalized class frequencies of the long-tail profile.
    pub fn class_frequencies(&self) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.num_classes)
            .map(|c| ((c + 1) as f64).powf(-self.long_tail_exponent))
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|r| r / total).collect()
    }

    pub fn means(&self) -> Vec<Vec<f64>> {
        if let Some(m) = &self.class_means {
            return m.clone();
        }
        // Corner `c` takes the sign of bit `k` of `c` on channel `k`, with the
        // bit order chosen so that consecutive classes differ on channel 2 first.
        (0..self.num_classes)
            .map(|c| {
                (0..self.channels)
                    .map(|k| {
                        let bit = (c >> (self.channels - 1 - k)) & 1;
                        self.mean_scale * if bit == 1 { 1.0 } else { -1.0 }
                    })
                    .collect()
            })
            .collect()
    }

    fn target_means(&self) -> Vec<Vec<f64>> {
        let (s, c) = self.target_rotation_deg.to_radians().sin_cos();
        self.means()
            .into_iter()
            .map(|mut m| {
                let (x, y) = (m[0], m[1]);
                m[0] = c * x - s * y;
                m[1] = s * x + c * y;
                for (v, b) in m.iter_mut().zip(&self.target_bias) {
                    *v += b;
                }
                m
            })
            .collect()
    }
}

fn voronoi_labels(cfg: &SynthConfig, classes: &WeightedIndex<f64>, rng: &mut Rng) -> Vec<u8> {
    let sites: Vec<(f64, f64, u8)> = (0..cfg.regions_per_image)
        .map(|_| {
            let r = rng.random::<f64>() * cfg.height as f64;
            let c = rng.random::<f64>() * cfg.width as f64;
            (r, c, classes.sample(rng) as u8)
        })
        .collect();
    let mut labels = Vec::with_capacity(cfg.height * cfg.width);
    for r in 0..cfg.height {
        for c in 0..cfg.width {
            let (pr, pc) = (r as f64 + 0.5, c as f64 + 0.5);
            let mut best = (f64::INFINITY, 0u8);
            for &(sr, sc, class) in &sites {
                let d = (sr - pr).powi(2) + (sc - pc).powi(2);
                if d < best.0 {
                    best = (d, class);
                }
            }
            labels.push(best.1);
        }
    }
    labels
}

fn render(cfg: &SynthConfig, labels: &[u8], means: &[Vec<f64>], offset: &[f64], noise: f64, rng: &mut Rng) -> Vec<f32> {
    let mut values = Vec::with_capacity(labels.len() * cfg.channels);
    for &l in labels {
        for (k, &m) in means[l as usize].iter().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            values.push((m + offset[k] + noise * z) as f32);
        }
    }
    values
}

/// Generates a labeled source domain and a shifted target domain.
///
/// Target labels are kept for evaluation only. The output is a pure function
/// of `cfg`, seed included.
pub fn make_synthetic_pair(cfg: &SynthConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let classes = WeightedIndex::new(cfg.class_frequencies())
        .map_err(|e| Error::InvalidConfig(format!("class frequencies: {e}")))?;
    let source_means = cfg.means();
    let target_means = cfg.target_means();
    let zero = vec![0.0; cfg.channels];

    let mut source = Vec::with_capacity(cfg.source_images);
    for i in 0..cfg.source_images {
        let mut rng = rng::stream(cfg.seed, &[tag::SYNTH_SOURCE, i as u64]);
        let labels = voronoi_labels(cfg, &classes, &mut rng);
        let values = render(cfg, &labels, &source_means, &zero, cfg.source_noise, &mut rng);
        source.push(Sample {
            id: format!("src_{i:05}"),
            features: FeatureMap::new(cfg.height, cfg.width, cfg.channels, values)?,
            labels: Some(LabelMap::new(cfg.height, cfg.width, labels)?),
        });
    }

    let offset_dist = Normal::new(0.0, cfg.target_image_offset)
        .map_err(|e| Error::InvalidConfig(format!("target_image_offset: {e}")))?;
    let mut target = Vec::with_capacity(cfg.target_images);
    for i in 0..cfg.target_images {
        let mut rng = rng::stream(cfg.seed, &[tag::SYNTH_TARGET, i as u64]);
        let labels = voronoi_labels(cfg, &classes, &mut rng);
        let offset: Vec<f64> = (0..cfg.channels).map(|_| offset_dist.sample(&mut rng)).collect();
        let z: f64 = StandardNormal.sample(&mut rng);
        let noise = cfg.target_noise * (cfg.target_noise_spread * z).exp();
        let values = render(cfg, &labels, &target_means, &offset, noise, &mut rng);
        target.push(Sample {
            id: format!("tgt_{i:05}"),
            features: FeatureMap::new(cfg.height, cfg.width, cfg.channels, values)?,
            labels: Some(LabelMap::new(cfg.height, cfg.width, labels)?),
        });
    }

    let meta = |domain| DatasetMeta {
        num_classes: cfg.num_classes,
        channels: cfg.channels,
        height: cfg.height,
        width: cfg.width,
        domain,
    };
    Ok((
        Dataset::new(meta(Domain::Source), source)?,
        Dataset::new(meta(Domain::Target), target)?,
    ))
}
