//! Initial OOD images `x'_out` for the attack.
//!
//! Whether an image is "OOD" cannot be decided by a machine, so we guard it
//! with a proxy: the image must be at least `floor` away (L2) from every
//! in-distribution training sample.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{make_synthetic, Dataset, SyntheticKind, SyntheticSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OodInitKind {
    UniformNoise,
    /// `blocks × blocks` alternating 0/1 squares.
    Checker { blocks: usize },
    Spiral,
    /// A sample drawn from another (synthetic) dataset, by id.
    ForeignDataset { id: String },
}

impl std::str::FromStr for OodInitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform_noise" | "noise" => Ok(OodInitKind::UniformNoise),
            "checker" => Ok(OodInitKind::Checker { blocks: 2 }),
            "spiral" => Ok(OodInitKind::Spiral),
            other => match other.strip_prefix("foreign:") {
                Some(id) => Ok(OodInitKind::ForeignDataset { id: id.to_string() }),
                None => Err(Error::InvalidArgument(format!("unknown OOD init {other:?}"))),
            },
        }
    }
}

/// Minimum-distance guard against an in-distribution reference set.
pub struct DistanceGuard<'a> {
    pub reference: &'a Dataset,
    pub floor: f64,
}

impl DistanceGuard<'_> {
    /// Nearest reference index and its L2 distance.
    pub fn nearest(&self, x: &Tensor) -> Option<(usize, f64)> {
        self.reference
            .images()
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let d2: f64 = r.data().iter().zip(x.data()).map(|(a, b)| (a - b).powi(2)).sum();
                (i, d2.sqrt())
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    pub fn check(&self, x: &Tensor) -> Result<()> {
        if let Some((i, d)) = self.nearest(x) {
            if d < self.floor {
                return Err(Error::InvalidArgument(format!(
                    "initial OOD image too close to training sample {i}: nearest neighbour distance {d:.4} < floor {:.4}",
                    self.floor
                )));
            }
        }
        Ok(())
    }
}

/// Resolves a foreign dataset id to a generated pool.
pub fn foreign_dataset(id: &str, side: usize) -> Result<Dataset> {
    let kind = match id {
        "bars" => SyntheticKind::Bars,
        "blobs" => SyntheticKind::Blobs,
        "noise" => SyntheticKind::Noise,
        other => {
            return Err(Error::InvalidArgument(format!(
                "foreign dataset id {other:?} is not resolvable (known: bars, blobs, noise)"
            )))
        }
    };
    let mut spec = SyntheticSpec::new(kind, 4, 8, 0x00F0_4E16);
    spec.side = side;
    make_synthetic(&spec)
}

/// Generates an initial OOD image of `shape` (`C×H×W`). When a guard is
/// supplied the image is rejected if it lies within the guard's floor.
pub fn make_initial_ood(
    kind: &OodInitKind,
    shape: &[usize],
    seed: u64,
    guard: Option<&DistanceGuard<'_>>,
) -> Result<Tensor> {
    if shape.len() != 3 {
        return Err(Error::Shape(format!("initial OOD image needs C×H×W, got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = match kind {
        OodInitKind::UniformNoise => (0..c * h * w).map(|_| rng.random::<f64>()).collect(),
        OodInitKind::Checker { blocks } => {
            let blocks = (*blocks).max(1);
            let mut out = Vec::with_capacity(c * h * w);
            for _ in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let by = y * blocks / h;
                        let bx = x * blocks / w;
                        out.push(((by + bx) % 2) as f64);
                    }
                }
            }
            out
        }
        OodInitKind::Spiral => {
            let turn = rng.random_range(0.0..2.0 * PI);
            let mut out = Vec::with_capacity(c * h * w);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let dx = x as f64 - (w as f64 - 1.0) / 2.0;
                        let dy = y as f64 - (h as f64 - 1.0) / 2.0;
                        let r = (dx * dx + dy * dy).sqrt();
                        let a = dy.atan2(dx);
                        let phase = ch as f64 * 2.0 * PI / 3.0;
                        out.push(0.5 + 0.5 * (3.0 * a + r * 0.9 + turn + phase).sin());
                    }
                }
            }
            out
        }
        OodInitKind::ForeignDataset { id } => {
            if c != 1 || h != w {
                return Err(Error::Shape(format!(
                    "foreign datasets provide 1×S×S images, requested {shape:?}"
                )));
            }
            let pool = foreign_dataset(id, h)?;
            let i = rng.random_range(0..pool.len());
            pool.image(i).data().to_vec()
        }
    };
    let x = Tensor::new(shape.to_vec(), data)?;
    if let Some(g) = guard {
        g.check(&x)?;
    }
    Ok(x)
}
