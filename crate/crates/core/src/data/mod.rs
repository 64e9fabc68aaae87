//! Dense per-pixel fields, datasets, and the synthetic domain-shift benchmark.
//!
//! All grids are row-major over `(row, col)`; multi-channel grids interleave
//! channels per pixel, so value `k` of pixel `(r, c)` sits at
//! `(r * width + c) * channels + k`.

mod io;
mod synth;

pub(crate) use io::file_stem_for;
pub use io::{
    export_label_pgm, load_dataset, read_array, read_array_file, save_dataset, write_array, write_array_file, Array,
    ArrayData, Dtype, ARRAY_MAGIC, ARRAY_VERSION, MANIFEST_VERSION,
};
pub use synth::{make_synthetic_pair, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value for pixels that carry no class.
pub const IGNORE: u8 = u8::MAX;

/// Multi-channel real-valued image (inputs, or logits when `channels == C`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::ShapeMismatch(format!(
                "feature map dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "feature map {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Corrupt(format!("non-finite feature value at index {i}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            values: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Mutable access for in-place transforms. Callers must keep values finite.
    pub(crate) fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn pixel(&self, index: usize) -> &[f32] {
        &self.values[index * self.channels..(index + 1) * self.channels]
    }

    pub(crate) fn pixel_mut(&mut self, index: usize) -> &mut [f32] {
        &mut self.values[index * self.channels..(index + 1) * self.channels]
    }

    pub fn same_grid(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }
}

/// One class id per pixel, or [`IGNORE`].
///
/// Pseudo-label maps use the same type: a labeled pixel is the one-hot case,
/// an `IGNORE` pixel the all-zero case.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

pub type PseudoLabelMap = LabelMap;

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "label map dimensions must be positive, got {height}x{width}"
            )));
        }
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "label map {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub(crate) fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    /// Checks that every non-IGNORE label is below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l != IGNORE && l as usize >= num_classes) {
            Some(&label) => Err(Error::LabelOutOfRange { label, num_classes }),
            None => Ok(()),
        }
    }

    pub fn same_shape(&self, other: &LabelMap) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Per-pixel class distribution produced by a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    num_classes: usize,
    probs: Vec<f64>,
}

impl ProbMap {
    /// Wraps raw probabilities, checking range and per-pixel normalization.
    pub fn new(height: usize, width: usize, num_classes: usize, probs: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || num_classes == 0 {
            return Err(Error::ShapeMismatch(format!(
                "prob map dimensions must be positive, got {height}x{width}x{num_classes}"
            )));
        }
        if probs.len() != height * width * num_classes {
            return Err(Error::ShapeMismatch(format!(
                "prob map {height}x{width}x{num_classes} needs {} values, got {}",
                height * width * num_classes,
                probs.len()
            )));
        }
        for (i, px) in probs.chunks_exact(num_classes).enumerate() {
            if px.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Corrupt(format!("probability out of [0,1] at pixel {i}")));
            }
            let sum: f64 = px.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Corrupt(format!("pixel {i} sums to {sum}")));
            }
        }
        Ok(Self {
            height,
            width,
            num_classes,
            probs,
        })
    }

    pub(crate) fn from_raw(height: usize, width: usize, num_classes: usize, probs: Vec<f64>) -> Self {
        debug_assert_eq!(probs.len(), height * width * num_classes);
        Self {
            height,
            width,
            num_classes,
            probs,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.probs[index * self.num_classes..(index + 1) * self.num_classes]
    }

    /// Argmax class and its probability for one pixel. Ties go to the lower class id.
    pub fn argmax(&self, index: usize) -> (u8, f64) {
        let mut best = 0usize;
        let px = self.pixel(index);
        for (c, &p) in px.iter().enumerate().skip(1) {
            if p > px[best] {
                best = c;
            }
        }
        (best as u8, px[best])
    }

    /// Hard prediction map (argmax everywhere).
    pub fn predict(&self) -> LabelMap {
        let labels = (0..self.num_pixels()).map(|i| self.argmax(i).0).collect();
        LabelMap {
            height: self.height,
            width: self.width,
            labels,
        }
    }
}

/// Stable softmax over one logit vector, written into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Converts a logit map (one channel per class) to probabilities.
pub fn softmax_probmap(logits: &FeatureMap, num_classes: usize) -> Result<ProbMap> {
    if logits.channels() != num_classes {
        return Err(Error::ClassMismatch {
            expected: num_classes,
            found: logits.channels(),
        });
    }
    let mut probs = vec![0.0; logits.values().len()];
    let mut z = vec![0.0; num_classes];
    for (px, out) in logits
        .values()
        .chunks_exact(num_classes)
        .zip(probs.chunks_exact_mut(num_classes))
    {
        for (zi, &v) in z.iter_mut().zip(px) {
            *zi = f64::from(v);
        }
        softmax_into(&z, out);
    }
    Ok(ProbMap::from_raw(logits.height(), logits.width(), num_classes, probs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub features: FeatureMap,
    pub labels: Option<LabelMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    meta: DatasetMeta,
    samples: Vec<Sample>,
}

impl Dataset {
    /// Builds a dataset, enforcing shared dimensions, label range, and unique ids.
    pub fn new(meta: DatasetMeta, samples: Vec<Sample>) -> Result<Self> {
        if meta.num_classes < 2 || meta.num_classes > usize::from(IGNORE) {
            return Err(Error::InvalidConfig(format!(
                "num_classes must be in [2, {}], got {}",
                IGNORE, meta.num_classes
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Corrupt(format!("duplicate sample id {}", s.id)));
            }
            let f = &s.features;
            if f.height() != meta.height || f.width() != meta.width || f.channels() != meta.channels {
                return Err(Error::DimensionMismatch {
                    id: s.id.clone(),
                    detail: format!(
                        "features are {}x{}x{}, manifest says {}x{}x{}",
                        f.height(),
                        f.width(),
                        f.channels(),
                        meta.height,
                        meta.width,
                        meta.channels
                    ),
                });
            }
            if let Some(l) = &s.labels {
                if l.height() != meta.height || l.width() != meta.width {
                    return Err(Error::DimensionMismatch {
                        id: s.id.clone(),
                        detail: format!(
                            "labels are {}x{}, manifest says {}x{}",
                            l.height(),
                            l.width(),
                            meta.height,
                            meta.width
                        ),
                    });
                }
                l.validate(meta.num_classes)?;
            }
        }
        Ok(Self { meta, samples })
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    /// Reference labels of every sample, if all samples are labeled.
    pub fn labels(&self) -> Option<Vec<LabelMap>> {
        self.samples.iter().map(|s| s.labels.clone()).collect()
    }
}
