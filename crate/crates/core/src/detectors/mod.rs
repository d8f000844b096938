//! OOD scoring functions.
//!
//! Each detector maps an input (or the logits it produces) to a scalar τ.
//! Orientation is fixed per detector and travels with the score, so AUROC
//! never has to guess which way is "in-distribution".
//!
//! | id | τ | larger means |
//! |----|---|--------------|
//! | `max_softmax` | `max softmax(logits)` | in-distribution |
//! | `odin` | max softmax of `logits(x̃)/T` after input preprocessing | in-distribution |
//! | `mahalanobis` | mean over taps of min-class Mahalanobis distance | OOD |
//! | `gram` | normalized total deviation from Gram bounds | OOD |
//! | `ensemble_entropy` | entropy of the mean member softmax | OOD |
//! | `oe` | `mean(logits) − logsumexp(logits)` | in-distribution |
//! | `energy_*` | `logsumexp`, `max softmax`, `−‖∂ logsumexp/∂x‖₂` | in-distribution |
//! | `reconstruction` | `‖x − dec(enc(x))‖_p` | OOD |

mod gram;
mod mahalanobis;
mod odin;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attack::FeatureMap;
use crate::autodiff::{logsumexp_slice, softmax_slice, Tape, Var};
use crate::error::{Error, Result};
use crate::metrics::Orientation;
use crate::nn::Network;
use crate::tensor::Tensor;

pub use gram::{
    fit_gram, gram_matrix_direct, gram_matrix_on, gram_matrix_stable, score_gram, GramReference, GramScore,
    GRAM_EPS, MAX_GRAM_ORDER,
};
pub use mahalanobis::{
    fit_mahalanobis, fit_mahalanobis_features, pooled_taps, score_mahalanobis, MahalanobisStats, TapStats,
};
pub use odin::{odin_preprocess, score_odin, OdinLogits};

/// The fixed orientation of a detector id, `None` if unknown.
pub fn orientation_of(detector: &str) -> Option<Orientation> {
    match detector {
        "max_softmax" | "odin" | "oe" | "energy_logsumexp" | "energy_max_softmax" | "energy_grad_norm" => {
            Some(Orientation::HigherIsInDistribution)
        }
        "mahalanobis" | "gram" | "ensemble_entropy" | "reconstruction" => Some(Orientation::HigherIsOod),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorScore {
    pub detector: String,
    pub score: f64,
    pub orientation: Orientation,
    #[serde(default)]
    pub hyperparameters: BTreeMap<String, f64>,
}

impl DetectorScore {
    pub fn new(detector: &str, score: f64, orientation: Orientation) -> Self {
        Self {
            detector: detector.to_string(),
            score,
            orientation,
            hyperparameters: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.hyperparameters.insert(key.to_string(), value);
        self
    }
}

fn check_logits(logits: &Tensor) -> Result<()> {
    if logits.rank() != 1 {
        return Err(Error::Shape(format!("logits must be a vector, got {:?}", logits.shape())));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits contain NaN or inf".into()));
    }
    Ok(())
}

pub(crate) fn max_softmax(logits: &[f64]) -> f64 {
    softmax_slice(logits).into_iter().fold(f64::NEG_INFINITY, f64::max)
}

pub fn score_max_softmax(logits: &Tensor) -> Result<DetectorScore> {
    check_logits(logits)?;
    Ok(DetectorScore::new(
        "max_softmax",
        max_softmax(logits.data()),
        Orientation::HigherIsInDistribution,
    ))
}

pub fn score_oe(logits: &Tensor) -> Result<DetectorScore> {
    check_logits(logits)?;
    let mean = logits.sum() / logits.len() as f64;
    Ok(DetectorScore::new(
        "oe",
        mean - logsumexp_slice(logits.data()),
        Orientation::HigherIsInDistribution,
    ))
}

/// Entropy of the mean of the members' softmax outputs.
pub fn ensemble_entropy(member_logits: &[Tensor]) -> Result<f64> {
    if member_logits.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "ensemble entropy needs at least 2 members, got {}",
            member_logits.len()
        )));
    }
    let k = member_logits[0].len();
    let mut mean = vec![0.0; k];
    for l in member_logits {
        check_logits(l)?;
        if l.len() != k {
            return Err(Error::Shape("ensemble members disagree on class count".into()));
        }
        for (m, p) in mean.iter_mut().zip(softmax_slice(l.data())) {
            *m += p / member_logits.len() as f64;
        }
    }
    Ok(-mean.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
}

pub fn score_ensemble_entropy(members: &[Network], x: &Tensor) -> Result<DetectorScore> {
    let logits = members.iter().map(|m| m.logits(x)).collect::<Result<Vec<_>>>()?;
    Ok(DetectorScore::new(
        "ensemble_entropy",
        ensemble_entropy(&logits)?,
        Orientation::HigherIsOod,
    ))
}

/// Mean of the members' logits, the classifier scored by `oe` in the
/// ensemble experiments.
pub fn ensemble_mean_logits(members: &[Network], x: &Tensor) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for m in members {
        let l = m.logits(x)?;
        acc = Some(match acc {
            None => l,
            Some(a) => a.zip_map(&l, |u, v| u + v)?,
        });
    }
    let n = members.len() as f64;
    acc.map(|a| a.map(|v| v / n))
        .ok_or_else(|| Error::InvalidArgument("empty ensemble".into()))
}

/// Concatenated logits of every member.
#[derive(Debug, Clone, Copy)]
pub struct EnsembleLogits<'a>(pub &'a [Network]);

impl FeatureMap for EnsembleLogits<'_> {
    fn input_shape(&self) -> Vec<usize> {
        self.0[0].input_shape().to_vec()
    }

    fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut parts = Vec::with_capacity(self.0.len());
        for m in self.0 {
            let params = m.bind(tape, false);
            parts.push(m.forward_on(tape, &params, x)?.logits);
        }
        tape.concat(&parts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyVariant {
    Logsumexp,
    MaxSoftmax,
    GradNorm,
}

impl EnergyVariant {
    pub fn id(self) -> &'static str {
        match self {
            EnergyVariant::Logsumexp => "energy_logsumexp",
            EnergyVariant::MaxSoftmax => "energy_max_softmax",
            EnergyVariant::GradNorm => "energy_grad_norm",
        }
    }
}

/// `∂ logsumexp(logits(x)) / ∂x`.
pub fn logsumexp_input_gradient(net: &Network, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = net.bind(&mut tape, false);
    let xv = tape.leaf(x.clone(), true);
    let logits = net.forward_on(&mut tape, &params, xv)?.logits;
    let lse = tape.logsumexp(logits)?;
    tape.backward(lse)?;
    Ok(tape.grad(xv).expect("input requires grad").clone())
}

pub fn score_energy(net: &Network, x: &Tensor, variant: EnergyVariant) -> Result<DetectorScore> {
    let score = match variant {
        EnergyVariant::Logsumexp => {
            let l = net.logits(x)?;
            check_logits(&l)?;
            logsumexp_slice(l.data())
        }
        EnergyVariant::MaxSoftmax => {
            let l = net.logits(x)?;
            check_logits(&l)?;
            max_softmax(l.data())
        }
        EnergyVariant::GradNorm => -logsumexp_input_gradient(net, x)?.norm_l2(),
    };
    Ok(DetectorScore::new(variant.id(), score, Orientation::HigherIsInDistribution))
}

/// `‖a − b‖_p` for `p ≥ 1`, with `p = ∞` allowed.
pub fn lp_norm_of_difference(a: &Tensor, b: &Tensor, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::InvalidArgument(format!("norm order {p} < 1")));
    }
    let d = a.zip_map(b, |u, v| (u - v).abs())?;
    Ok(if p.is_infinite() {
        d.max()
    } else if p == 1.0 {
        d.sum()
    } else if p == 2.0 {
        d.norm_l2()
    } else {
        d.data().iter().map(|v| v.powf(p)).sum::<f64>().powf(1.0 / p)
    })
}

pub fn score_reconstruction(encoder: &Network, decoder: &Network, x: &Tensor, p: f64) -> Result<DetectorScore> {
    let x_hat = decoder.logits(&encoder.encode(x)?)?;
    if x_hat.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "decoder output {:?} does not match input {:?}",
            x_hat.shape(),
            x.shape()
        )));
    }
    Ok(DetectorScore::new(
        "reconstruction",
        lp_norm_of_difference(x, &x_hat, p)?,
        Orientation::HigherIsOod,
    )
    .with("p", p))
}
