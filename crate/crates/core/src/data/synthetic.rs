//! Deterministic synthetic image sets.
//!
//! * `blobs`: one Gaussian bump per class at a class-specific position.
//!   Class means are far apart relative to the pixel noise, so the classes
//!   are linearly separable.
//! * `bars`: sinusoidal stripes whose orientation encodes the class.
//! * `noise`: uniform pixels, the generic OOD pool.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Blobs,
    Bars,
    Noise,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SyntheticKind::Blobs),
            "bars" => Ok(SyntheticKind::Bars),
            "noise" => Ok(SyntheticKind::Noise),
            other => Err(Error::InvalidArgument(format!("unknown synthetic set {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub classes: usize,
    pub per_class: usize,
    pub side: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind, classes: usize, per_class: usize, seed: u64) -> Self {
        Self {
            kind,
            classes,
            per_class,
            side: 28,
            seed,
        }
    }
}

pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.side < 4 {
        return Err(Error::InvalidArgument(format!(
            "synthetic set needs >= 1 class and side >= 4, got {spec:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.side;
    let mut images = Vec::with_capacity(spec.classes * spec.per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    // Interleave classes so any prefix stays balanced.
    for _ in 0..spec.per_class {
        for class in 0..spec.classes {
            let pixels = match spec.kind {
                SyntheticKind::Blobs => blob(&mut rng, s, class, spec.classes),
                SyntheticKind::Bars => bars(&mut rng, s, class, spec.classes),
                SyntheticKind::Noise => (0..s * s).map(|_| rng.random::<f64>()).collect(),
            };
            images.push(Tensor::new(vec![1, s, s], pixels)?);
            labels.push(class);
        }
    }
    Dataset::new(vec![1, s, s], images, labels, spec.classes)
}

fn blob(rng: &mut ChaCha8Rng, s: usize, class: usize, classes: usize) -> Vec<f64> {
    let c = (s as f64 - 1.0) / 2.0;
    let angle = 2.0 * PI * class as f64 / classes as f64;
    let radius = s as f64 * 0.28;
    let cx = c + radius * angle.cos() + rng.random_range(-1.0..1.0);
    let cy = c + radius * angle.sin() + rng.random_range(-1.0..1.0);
    let sigma = s as f64 * 0.09;
    let mut out = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let v = (-d2 / (2.0 * sigma * sigma)).exp() + rng.random_range(-0.05..0.05);
            out.push(v.clamp(0.0, 1.0));
        }
    }
    out
}

fn bars(rng: &mut ChaCha8Rng, s: usize, class: usize, classes: usize) -> Vec<f64> {
    let theta = PI * class as f64 / classes as f64;
    let period = s as f64 / 4.0;
    let phase = rng.random_range(0.0..2.0 * PI);
    let (ct, st) = (theta.cos(), theta.sin());
    let mut out = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let u = x as f64 * ct + y as f64 * st;
            let v = 0.5 + 0.5 * (2.0 * PI * u / period + phase).sin();
            out.push((v + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0));
        }
    }
    out
}
