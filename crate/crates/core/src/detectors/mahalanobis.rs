//! Class-conditional Gaussian fit on pooled tap features with a shared
//! covariance per tap.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::Orientation;
use crate::nn::{Container, Network};
use crate::tensor::Tensor;

use super::DetectorScore;

/// Relative eigenvalue floor below which a covariance counts as singular.
const SINGULAR_RCOND: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct TapStats {
    pub dim: usize,
    /// One mean per class.
    pub means: Vec<Vec<f64>>,
    /// Shared covariance, row-major, after regularization.
    pub covariance: Vec<f64>,
    pub precision: Vec<f64>,
    /// Ridge added to the diagonal; zero when the raw covariance was fine.
    pub lambda: f64,
}

impl TapStats {
    fn distance_to(&self, f: &[f64], class: usize) -> f64 {
        let d: Vec<f64> = f.iter().zip(&self.means[class]).map(|(a, b)| a - b).collect();
        let mut total = 0.0;
        for i in 0..self.dim {
            let row = &self.precision[i * self.dim..(i + 1) * self.dim];
            total += d[i] * row.iter().zip(&d).map(|(p, v)| p * v).sum::<f64>();
        }
        total
    }

    /// `(min over classes of the squared Mahalanobis distance, argmin)`.
    pub fn min_distance(&self, f: &[f64]) -> (f64, usize) {
        (0..self.means.len())
            .map(|c| (self.distance_to(f, c), c))
            .fold((f64::INFINITY, 0), |best, cur| if cur.0 < best.0 { cur } else { best })
    }
}

/// Fits class means and a shared, regularized covariance on raw vectors.
pub fn fit_mahalanobis_features(features: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<TapStats> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} feature vectors for {} labels",
            features.len(),
            labels.len()
        )));
    }
    let dim = features[0].len();
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (f, &y) in features.iter().zip(labels) {
        if y >= classes || f.len() != dim {
            return Err(Error::InvalidArgument(format!("bad sample: label {y}, dim {}", f.len())));
        }
        counts[y] += 1;
        sums[y].iter_mut().zip(f).for_each(|(s, v)| *s += v);
    }
    let means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| s.into_iter().map(|v| if n == 0 { 0.0 } else { v / n as f64 }).collect())
        .collect();
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidArgument(format!("class {empty} has no samples")));
    }
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for (f, &y) in features.iter().zip(labels) {
        let d = DVector::from_iterator(dim, f.iter().zip(&means[y]).map(|(a, b)| a - b));
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov /= features.len() as f64;
    cov = (&cov + cov.transpose()) * 0.5;

    let eig = SymmetricEigen::new(cov.clone());
    let max_eig = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let min_eig = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let mut lambda = 0.0;
    if !(min_eig > SINGULAR_RCOND * max_eig) || max_eig == 0.0 {
        lambda = (1e-3 * cov.trace() / dim as f64).max(1e-9);
        for i in 0..dim {
            cov[(i, i)] += lambda;
        }
    }
    let precision = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NonFinite("covariance is not positive definite after regularization".into()))?
        .inverse();
    let precision = (&precision + precision.transpose()) * 0.5;
    let row_major = |m: &DMatrix<f64>| m.transpose().as_slice().to_vec();
    Ok(TapStats {
        dim,
        means,
        covariance: row_major(&cov),
        precision: row_major(&precision),
        lambda,
    })
}

/// Per-tap feature vectors: channel means of rank-3 taps, rank-1 taps as is.
pub fn pooled_taps(net: &Network, x: &Tensor) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let params = net.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let pooled = pooled_taps_on(&mut tape, net, &params, xv)?;
    Ok(pooled.iter().map(|&v| tape.value(v).data().to_vec()).collect())
}

fn pooled_taps_on(tape: &mut Tape, net: &Network, params: &[Var], x: Var) -> Result<Vec<Var>> {
    let taps = net.forward_on(tape, params, x)?.taps;
    if taps.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "network {:?} exports no taps",
            net.spec().name
        )));
    }
    taps.into_iter()
        .map(|t| {
            let s = tape.value(t).shape().to_vec();
            match s.len() {
                3 => {
                    let p = tape.avgpool2d(t, s[1], s[2])?;
                    tape.reshape(p, &[s[0]])
                }
                1 => Ok(t),
                _ => Err(Error::Shape(format!("cannot pool tap of shape {s:?}"))),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MahalanobisStats {
    pub classes: usize,
    pub taps: Vec<TapStats>,
}

impl MahalanobisStats {
    /// Mean over taps of the min-class distance.
    pub fn score_features(&self, pooled: &[Vec<f64>]) -> f64 {
        self.taps
            .iter()
            .zip(pooled)
            .map(|(t, f)| t.min_distance(f).0)
            .sum::<f64>()
            / self.taps.len() as f64
    }

    pub fn to_container(&self) -> Container {
        let header = serde_json::json!({
            "detector": "mahalanobis",
            "classes": self.classes,
            "dims": self.taps.iter().map(|t| t.dim).collect::<Vec<_>>(),
            "lambdas": self.taps.iter().map(|t| t.lambda).collect::<Vec<_>>(),
        });
        let mut tensors = Vec::new();
        for t in &self.taps {
            tensors.push(Tensor::new(vec![self.classes, t.dim], t.means.concat()).expect("consistent"));
            tensors.push(Tensor::new(vec![t.dim, t.dim], t.covariance.clone()).expect("consistent"));
            tensors.push(Tensor::new(vec![t.dim, t.dim], t.precision.clone()).expect("consistent"));
        }
        Container::new(header, tensors)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        #[derive(Deserialize, Serialize)]
        struct Header {
            detector: String,
            classes: usize,
            dims: Vec<usize>,
            lambdas: Vec<f64>,
        }
        let h: Header = serde_json::from_value(c.header.clone()).map_err(|e| Error::Format(format!("{e}")))?;
        if h.detector != "mahalanobis" || c.tensors.len() != 3 * h.dims.len() || h.lambdas.len() != h.dims.len() {
            return Err(Error::Format(format!("not a mahalanobis artifact (detector {:?})", h.detector)));
        }
        let mut taps = Vec::new();
        for (i, (&dim, &lambda)) in h.dims.iter().zip(&h.lambdas).enumerate() {
            let [m, cov, prec] = [&c.tensors[3 * i], &c.tensors[3 * i + 1], &c.tensors[3 * i + 2]];
            if m.shape() != [h.classes, dim] || cov.shape() != [dim, dim] || prec.shape() != [dim, dim] {
                return Err(Error::Format(format!("tap {i} tensors have inconsistent shapes")));
            }
            taps.push(TapStats {
                dim,
                means: m.data().chunks(dim).map(<[f64]>::to_vec).collect(),
                covariance: cov.data().to_vec(),
                precision: prec.data().to_vec(),
                lambda,
            });
        }
        Ok(Self {
            classes: h.classes,
            taps,
        })
    }
}

/// Fits on in-distribution training data only.
pub fn fit_mahalanobis(net: &Network, train: &Dataset) -> Result<MahalanobisStats> {
    let pooled = train
        .images()
        .iter()
        .map(|x| pooled_taps(net, x))
        .collect::<Result<Vec<_>>>()?;
    let n_taps = pooled.first().map_or(0, Vec::len);
    let taps = (0..n_taps)
        .map(|t| {
            let feats: Vec<Vec<f64>> = pooled.iter().map(|p| p[t].clone()).collect();
            fit_mahalanobis_features(&feats, train.labels(), train.num_classes())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MahalanobisStats {
        classes: train.num_classes(),
        taps,
    })
}

/// Differentiable mean-over-taps distance, classes fixed at their current
/// argmin.
fn distance_on(tape: &mut Tape, net: &Network, stats: &MahalanobisStats, x: Var) -> Result<Var> {
    let params = net.bind(tape, false);
    let pooled = pooled_taps_on(tape, net, &params, x)?;
    let mut total: Option<Var> = None;
    for (t, &f) in stats.taps.iter().zip(&pooled) {
        let (_, c) = t.min_distance(tape.value(f).data());
        let mu = tape.constant(Tensor::from_vec(t.means[c].clone()));
        let d = tape.sub(f, mu)?;
        let p = tape.constant(Tensor::new(vec![t.dim, t.dim], t.precision.clone())?);
        let col = tape.reshape(d, &[t.dim, 1])?;
        let pd = tape.matmul(p, col)?;
        let pd = tape.reshape(pd, &[t.dim])?;
        let q = tape.mul(d, pd)?;
        let q = tape.sum(q);
        total = Some(match total {
            None => q,
            Some(acc) => tape.add(acc, q)?,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("no taps".into()))?;
    Ok(tape.scale(total, 1.0 / stats.taps.len() as f64))
}

/// τ = mean over taps of the min-class distance, optionally after moving
/// `x` by `PM` in the gradient-sign direction that decreases it.
pub fn score_mahalanobis(net: &Network, stats: &MahalanobisStats, x: &Tensor, pm: f64) -> Result<DetectorScore> {
    if !(pm >= 0.0 && pm.is_finite()) {
        return Err(Error::InvalidArgument(format!("perturbation magnitude must be ≥ 0, got {pm}")));
    }
    let x_tilde = if pm > 0.0 {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let m = distance_on(&mut tape, net, stats, xv)?;
        tape.backward(m)?;
        let g = tape.grad(xv).expect("input requires grad");
        x.zip_map(g, |v, gi| (v - pm * gi.signum() * f64::from(gi != 0.0)).clamp(0.0, 1.0))?
    } else {
        x.clone()
    };
    let pooled = pooled_taps(net, &x_tilde)?;
    Ok(DetectorScore::new(
        "mahalanobis",
        stats.score_features(&pooled),
        Orientation::HigherIsOod,
    )
    .with("PM", pm))
}
