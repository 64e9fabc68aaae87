#![allow(dead_code)]

use hiast::data::{FeatureMap, LabelMap, SynthConfig, IGNORE};
use hiast::model::{Activation, ModelParams, TrainItem};
use hiast::pipeline::ExperimentConfig;
use hiast::rng;
use rand::Rng as _;

/// A run small enough for debug-speed tests: 4 classes, 16x16 images.
pub fn tiny_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        synth: SynthConfig {
            num_classes: 4,
            channels: 3,
            height: 16,
            width: 16,
            source_images: 12,
            target_images: 12,
            regions_per_image: 5,
            target_bias: vec![0.2, -0.1, 0.1],
            ..SynthConfig::default()
        },
        rounds: 2,
        warmup_iterations: 30,
        iterations_per_round: 15,
        batch_size: 4,
        hidden: 6,
        ..ExperimentConfig::default()
    }
    .with_seed(seed)
}

pub fn random_params(inputs: usize, hidden: usize, classes: usize, seed: u64) -> ModelParams {
    let mut r = rng::stream(seed, &[1000]);
    let mut p = ModelParams::init(inputs, hidden, classes, Activation::Tanh, &mut r);
    for v in p.b1.iter_mut().chain(p.b2.iter_mut()) {
        *v = r.random_range(-0.5..0.5);
    }
    p
}

/// Random features plus labels with roughly a third IGNORE.
pub fn random_item(h: usize, w: usize, ch: usize, classes: usize, seed: u64) -> TrainItem {
    let mut r = rng::stream(seed, &[2000]);
    let values = (0..h * w * ch).map(|_| r.random_range(-1.5f32..1.5)).collect();
    let labels = (0..h * w)
        .map(|i| {
            // Guarantee both regions are non-empty.
            if i == 0 {
                0
            } else if i == 1 || r.random::<f64>() < 0.33 {
                IGNORE
            } else {
                r.random_range(0..classes) as u8
            }
        })
        .collect();
    TrainItem {
        features: FeatureMap::new(h, w, ch, values).unwrap(),
        labels: LabelMap::new(h, w, labels).unwrap(),
    }
}

use hiast::model::{total_loss, AugmentConfig, LossReport, LossWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Ce,
    Kld,
    Entropy,
    Consistency,
    Total,
}

pub const ALL_TERMS: [Term; 5] = [Term::Ce, Term::Kld, Term::Entropy, Term::Consistency, Term::Total];

fn weights_for(term: Term) -> LossWeights {
    let (i, c, cst) = match term {
        Term::Ce => (0.0, 0.0, 0.0),
        Term::Kld => (0.0, 1.0, 0.0),
        Term::Entropy => (1.0, 0.0, 0.0),
        Term::Consistency => (0.0, 0.0, 1.0),
        Term::Total => (1.0, 0.1, 0.5),
    };
    LossWeights {
        lambda_i: i,
        lambda_c: c,
        lambda_cst: cst,
    }
}

fn term_value(r: &LossReport, term: Term) -> f64 {
    match term {
        Term::Ce => r.ce,
        Term::Kld => r.kld,
        Term::Entropy => r.entropy,
        Term::Consistency => r.consistency,
        Term::Total => r.total,
    }
}

/// Largest elementwise relative error between the analytic gradient of one
/// loss term and central differences with step `h`. The relative error is
/// `|a - n| / max(|a|, |n|, 1e-4)`; the floor keeps near-zero entries from
/// turning rounding noise into large ratios.
pub fn fd_max_rel_error(
    student: &ModelParams,
    teacher: &ModelParams,
    batch: &[TrainItem],
    aug: Option<&AugmentConfig>,
    aug_seed: u64,
    term: Term,
    h: f64,
) -> f64 {
    let w = weights_for(term);
    let report = total_loss(student, teacher, batch, &w, aug, aug_seed).unwrap();
    let mut analytic = report.grad.to_flat();
    if term != Term::Ce && term != Term::Total {
        let ce = total_loss(student, teacher, batch, &weights_for(Term::Ce), aug, aug_seed).unwrap();
        let lambda = w.lambda_i + w.lambda_c + w.lambda_cst;
        for (a, c) in analytic.iter_mut().zip(ce.grad.to_flat()) {
            *a = (*a - c) / lambda;
        }
    }
    let base = student.to_flat();
    let mut p = student.clone();
    let mut worst: f64 = 0.0;
    for (j, &a) in analytic.iter().enumerate() {
        let mut flat = base.clone();
        flat[j] = base[j] + h;
        p.set_flat(&flat);
        let up = term_value(&total_loss(&p, teacher, batch, &w, aug, aug_seed).unwrap(), term);
        flat[j] = base[j] - h;
        p.set_flat(&flat);
        let down = term_value(&total_loss(&p, teacher, batch, &w, aug, aug_seed).unwrap(), term);
        let n = (up - down) / (2.0 * h);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    worst
}

/// Minimal binary PGM reader written against the format description only.
pub fn parse_pgm(bytes: &[u8]) -> (usize, usize, u32, Vec<u8>) {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if bytes[i] == b'#' {
            while bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        fields.push(String::from_utf8(bytes[start..i].to_vec()).unwrap());
    }
    assert_eq!(fields[0], "P5");
    // Exactly one whitespace byte separates the header from the raster.
    let raster = bytes[i + 1..].to_vec();
    (
        fields[1].parse().unwrap(),
        fields[2].parse().unwrap(),
        fields[3].parse().unwrap(),
        raster,
    )
}
