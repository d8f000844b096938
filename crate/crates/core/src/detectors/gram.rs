//! Higher-order Gram matrices of convolutional feature maps.
//!
//! For a tap `F` (channels × positions) and order `p`, `G = (Fᵖ Fᵖᵀ)^{1/p}`.
//! The direct root has an unbounded derivative wherever an entry of
//! `Fᵖ Fᵖᵀ` is zero, which happens constantly after a ReLU. The stable form
//! `exp(log(B + GRAM_EPS)/p)` keeps every gradient finite.
//!
//! Bounds are class-conditional, keyed by the network's *predicted* class,
//! so scoring never needs a label. Deviations are relative to the violated
//! bound and each tap's total is divided by its mean over held-out data.

use rayon::prelude::*;
use serde::Deserialize;

use crate::attack::FeatureMap;
use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::Orientation;
use crate::nn::{Container, Network};
use crate::tensor::Tensor;

use super::DetectorScore;

pub const GRAM_EPS: f64 = 1e-40;
pub const MAX_GRAM_ORDER: usize = 5;

/// Bounds equal to zero are divided by this instead.
const BOUND_FLOOR: f64 = 1e-6;

fn check_order(p: usize) -> Result<()> {
    if !(1..=MAX_GRAM_ORDER).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "Gram order must be in 1..={MAX_GRAM_ORDER}, got {p}"
        )));
    }
    Ok(())
}

/// Reference formula `(Fᵖ Fᵖᵀ)^{1/p}` with no stabilization.
pub fn gram_matrix_direct(f: &Tensor, p: usize) -> Result<Tensor> {
    check_order(p)?;
    let [c, n] = matrix_dims(f.shape())?;
    let fp: Vec<f64> = f.data().iter().map(|v| v.powi(p as i32)).collect();
    let mut out = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            let b: f64 = (0..n).map(|k| fp[i * n + k] * fp[j * n + k]).sum();
            out[i * c + j] = b.powf(1.0 / p as f64);
        }
    }
    Tensor::new(vec![c, c], out)
}

/// Stabilized Gram matrix as a value.
pub fn gram_matrix_stable(f: &Tensor, p: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let g = gram_matrix_on(&mut tape, fv, p)?;
    Ok(tape.value(g).clone())
}

/// Stabilized Gram matrix recorded on a tape. `f` must be a `[C, HW]`
/// matrix with non-negative entries.
pub fn gram_matrix_on(tape: &mut Tape, f: Var, p: usize) -> Result<Var> {
    check_order(p)?;
    matrix_dims(tape.value(f).shape())?;
    if let Some(bad) = tape.value(f).data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain(format!("Gram features must be non-negative, found {bad}")));
    }
    let fp = if p == 1 { f } else { tape.powi(f, p as i32)? };
    let fpt = tape.transpose(fp)?;
    let b = tape.matmul(fp, fpt)?;
    if p == 1 {
        return Ok(b);
    }
    let logb = tape.log_eps(b, GRAM_EPS)?;
    let scaled = tape.scale(logb, 1.0 / p as f64);
    Ok(tape.exp(scaled))
}

fn matrix_dims(shape: &[usize]) -> Result<[usize; 2]> {
    match shape {
        [c, n] => Ok([*c, *n]),
        _ => Err(Error::Shape(format!("Gram input must be [C, HW], got {shape:?}"))),
    }
}

/// Forward pass returning the rank-3 taps reshaped to `[C, HW]` and the
/// logits.
fn conv_taps(tape: &mut Tape, net: &Network, x: Var) -> Result<(Vec<Var>, Var)> {
    let params = net.bind(tape, false);
    let out = net.forward_on(tape, &params, x)?;
    let mut mats = Vec::new();
    for t in out.taps {
        let s = tape.value(t).shape().to_vec();
        if let [c, h, w] = s[..] {
            mats.push(tape.reshape(t, &[c, h * w])?);
        }
    }
    if mats.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "network {:?} has no convolutional taps for Gram statistics",
            net.spec().name
        )));
    }
    Ok((mats, out.logits))
}

/// Per tap, per order: the Gram matrix values (flattened `C×C`).
type GramValues = Vec<Vec<Vec<f64>>>;

fn gram_values(net: &Network, x: &Tensor, orders: usize) -> Result<(GramValues, usize)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (mats, logits) = conv_taps(&mut tape, net, xv)?;
    let class = tape.value(logits).argmax();
    let mut all = Vec::with_capacity(mats.len());
    for m in mats {
        let mut per_order = Vec::with_capacity(orders);
        for p in 1..=orders {
            let g = gram_matrix_on(&mut tape, m, p)?;
            per_order.push(tape.value(g).data().to_vec());
        }
        all.push(per_order);
    }
    Ok((all, class))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramTap {
    pub channels: usize,
    /// `[class][order]` → flattened `C×C` lower bounds.
    pub lo: Vec<Vec<Vec<f64>>>,
    pub hi: Vec<Vec<Vec<f64>>>,
    /// Mean raw deviation of held-out data at this tap (1 when that is 0).
    pub normalizer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramReference {
    pub classes: usize,
    pub orders: usize,
    pub taps: Vec<GramTap>,
}

fn relative_deviation(v: f64, lo: f64, hi: f64) -> f64 {
    if v < lo {
        (lo - v) / lo.abs().max(BOUND_FLOOR)
    } else if v > hi {
        (v - hi) / hi.abs().max(BOUND_FLOOR)
    } else {
        0.0
    }
}

impl GramReference {
    /// Raw (unnormalized) deviation per tap.
    pub fn raw_deviations(&self, values: &GramValues, class: usize) -> Vec<f64> {
        self.taps
            .iter()
            .zip(values)
            .map(|(tap, per_order)| {
                per_order
                    .iter()
                    .enumerate()
                    .map(|(o, g)| {
                        g.iter()
                            .zip(&tap.lo[class][o])
                            .zip(&tap.hi[class][o])
                            .map(|((&v, &lo), &hi)| relative_deviation(v, lo, hi))
                            .sum::<f64>()
                    })
                    .sum()
            })
            .collect()
    }

    pub fn to_container(&self) -> Container {
        let header = serde_json::json!({
            "detector": "gram",
            "classes": self.classes,
            "orders": self.orders,
            "channels": self.taps.iter().map(|t| t.channels).collect::<Vec<_>>(),
            "normalizers": self.taps.iter().map(|t| t.normalizer).collect::<Vec<_>>(),
        });
        let flat = |b: &Vec<Vec<Vec<f64>>>| b.iter().flatten().flatten().copied().collect::<Vec<_>>();
        let mut tensors = Vec::new();
        for t in &self.taps {
            let shape = vec![self.classes, self.orders, t.channels, t.channels];
            tensors.push(Tensor::new(shape.clone(), flat(&t.lo)).expect("consistent"));
            tensors.push(Tensor::new(shape, flat(&t.hi)).expect("consistent"));
        }
        Container::new(header, tensors)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            detector: String,
            classes: usize,
            orders: usize,
            channels: Vec<usize>,
            normalizers: Vec<f64>,
        }
        let h: Header = serde_json::from_value(c.header.clone()).map_err(|e| Error::Format(format!("{e}")))?;
        if h.detector != "gram" || c.tensors.len() != 2 * h.channels.len() || h.normalizers.len() != h.channels.len() {
            return Err(Error::Format(format!("not a gram artifact (detector {:?})", h.detector)));
        }
        check_order(h.orders)?;
        let unflat = |t: &Tensor, ch: usize| -> Result<Vec<Vec<Vec<f64>>>> {
            if t.shape() != [h.classes, h.orders, ch, ch] {
                return Err(Error::Format(format!("bounds tensor has shape {:?}", t.shape())));
            }
            Ok(t.data()
                .chunks(h.orders * ch * ch)
                .map(|cls| cls.chunks(ch * ch).map(<[f64]>::to_vec).collect())
                .collect())
        };
        let taps = h
            .channels
            .iter()
            .zip(&h.normalizers)
            .enumerate()
            .map(|(i, (&ch, &normalizer))| {
                Ok(GramTap {
                    channels: ch,
                    lo: unflat(&c.tensors[2 * i], ch)?,
                    hi: unflat(&c.tensors[2 * i + 1], ch)?,
                    normalizer,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            classes: h.classes,
            orders: h.orders,
            taps,
        })
    }
}

/// Records elementwise min/max Gram bounds per predicted class on `train`,
/// then sets each tap's normalizer from `held_out`.
///
/// A class that the network never predicts on `train` falls back to the
/// bounds pooled over all classes.
pub fn fit_gram(net: &Network, train: &Dataset, held_out: &Dataset, orders: usize) -> Result<GramReference> {
    check_order(orders)?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("cannot fit Gram bounds on an empty set".into()));
    }
    let values = train
        .images()
        .par_iter()
        .map(|x| gram_values(net, x, orders))
        .collect::<Result<Vec<_>>>()?;
    let classes = train.num_classes().max(net.output_dim());
    let channels: Vec<usize> = values[0]
        .0
        .iter()
        .map(|per_order| (per_order[0].len() as f64).sqrt().round() as usize)
        .collect();

    let mut lo: Vec<Vec<Option<Vec<Vec<f64>>>>> = vec![vec![None; classes]; channels.len()];
    let mut hi = lo.clone();
    let mut glo: Vec<Option<Vec<Vec<f64>>>> = vec![None; channels.len()];
    let mut ghi = glo.clone();
    let merge = |slot: &mut Option<Vec<Vec<f64>>>, g: &[Vec<f64>], pick: fn(f64, f64) -> f64| match slot {
        None => *slot = Some(g.to_vec()),
        Some(b) => b
            .iter_mut()
            .flatten()
            .zip(g.iter().flatten())
            .for_each(|(b, &v)| *b = pick(*b, v)),
    };
    for (per_tap, class) in &values {
        for (t, g) in per_tap.iter().enumerate() {
            merge(&mut lo[t][*class], g, f64::min);
            merge(&mut hi[t][*class], g, f64::max);
            merge(&mut glo[t], g, f64::min);
            merge(&mut ghi[t], g, f64::max);
        }
    }
    let taps: Vec<GramTap> = channels
        .iter()
        .enumerate()
        .map(|(t, &ch)| {
            let resolve = |per_class: &[Option<Vec<Vec<f64>>>], global: &Option<Vec<Vec<f64>>>| {
                per_class
                    .iter()
                    .map(|b| b.clone().or_else(|| global.clone()).expect("train is non-empty"))
                    .collect::<Vec<_>>()
            };
            GramTap {
                channels: ch,
                lo: resolve(&lo[t], &glo[t]),
                hi: resolve(&hi[t], &ghi[t]),
                normalizer: 1.0,
            }
        })
        .collect();
    let mut reference = GramReference { classes, orders, taps };

    if !held_out.is_empty() {
        let held = held_out
            .images()
            .par_iter()
            .map(|x| gram_values(net, x, orders).map(|(v, c)| reference.raw_deviations(&v, c)))
            .collect::<Result<Vec<_>>>()?;
        for (t, tap) in reference.taps.iter_mut().enumerate() {
            let mean = held.iter().map(|d| d[t]).sum::<f64>() / held.len() as f64;
            tap.normalizer = if mean > 0.0 { mean } else { 1.0 };
        }
    }
    Ok(reference)
}

/// τ = Σ over taps of (Σ over orders and entries of relative deviation) /
/// tap normalizer.
pub fn score_gram(net: &Network, reference: &GramReference, x: &Tensor) -> Result<DetectorScore> {
    let (values, class) = gram_values(net, x, reference.orders)?;
    let score = reference
        .raw_deviations(&values, class)
        .iter()
        .zip(&reference.taps)
        .map(|(d, t)| d / t.normalizer)
        .sum();
    Ok(DetectorScore::new("gram", score, Orientation::HigherIsOod).with("orders", reference.orders as f64))
}

/// The Gram score itself as a differentiable `[1]` feature, so the attack
/// can match an in-distribution sample's score.
///
/// The predicted class selecting the bounds is piecewise constant in `x`.
#[derive(Debug, Clone, Copy)]
pub struct GramScore<'a> {
    pub net: &'a Network,
    pub reference: &'a GramReference,
}

impl FeatureMap for GramScore<'_> {
    fn input_shape(&self) -> Vec<usize> {
        self.net.input_shape().to_vec()
    }

    fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (mats, logits) = conv_taps(tape, self.net, x)?;
        if mats.len() != self.reference.taps.len() {
            return Err(Error::Shape(format!(
                "reference has {} taps, network exports {}",
                self.reference.taps.len(),
                mats.len()
            )));
        }
        let class = tape.value(logits).argmax();
        let mut total: Option<Var> = None;
        for (m, tap) in mats.into_iter().zip(&self.reference.taps) {
            let shape = vec![tap.channels, tap.channels];
            for p in 1..=self.reference.orders {
                let g = gram_matrix_on(tape, m, p)?;
                let lo = &tap.lo[class][p - 1];
                let hi = &tap.hi[class][p - 1];
                let inv = |b: &[f64]| {
                    let w = b.iter().map(|v| 1.0 / (v.abs().max(BOUND_FLOOR) * tap.normalizer)).collect();
                    Tensor::new(shape.clone(), w)
                };
                let lo_v = tape.constant(Tensor::new(shape.clone(), lo.clone())?);
                let hi_v = tape.constant(Tensor::new(shape.clone(), hi.clone())?);
                let inv_lo = tape.constant(inv(lo)?);
                let inv_hi = tape.constant(inv(hi)?);
                let below = tape.sub(lo_v, g)?;
                let below = tape.relu(below);
                let below = tape.mul(below, inv_lo)?;
                let above = tape.sub(g, hi_v)?;
                let above = tape.relu(above);
                let above = tape.mul(above, inv_hi)?;
                let dev = tape.add(below, above)?;
                let dev = tape.sum(dev);
                total = Some(match total {
                    None => dev,
                    Some(acc) => tape.add(acc, dev)?,
                });
            }
        }
        let total = total.expect("at least one tap");
        tape.reshape(total, &[1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_evaluated_order_two() {
        let f = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let g = gram_matrix_stable(&f, 2).unwrap();
        assert!((g.data()[0] - 4.0).abs() < 1e-12);
        assert_eq!(gram_matrix_direct(&f, 2).unwrap().data(), &[4.0]);
    }

    #[test]
    fn order_one_is_plain_gram() {
        let f = Tensor::new(vec![2, 3], vec![1.0, 2.0, 0.0, 0.5, 0.0, 3.0]).unwrap();
        let g = gram_matrix_stable(&f, 1).unwrap();
        assert_eq!(g.data(), &[5.0, 0.5, 0.5, 9.25]);
    }

    #[test]
    fn orders_outside_range_and_negative_features_rejected() {
        let f = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        assert!(gram_matrix_stable(&f, 0).is_err());
        assert!(gram_matrix_stable(&f, 6).is_err());
        let neg = Tensor::new(vec![1, 1], vec![-1.0]).unwrap();
        assert!(matches!(gram_matrix_stable(&neg, 2), Err(Error::Domain(_))));
    }

    #[test]
    fn stable_gradient_is_finite_on_zero_rows() {
        for p in 1..=MAX_GRAM_ORDER {
            let mut tape = Tape::new();
            let f = tape.leaf(Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.3, 0.0]).unwrap(), true);
            let g = gram_matrix_on(&mut tape, f, p).unwrap();
            let s = tape.sum(g);
            tape.backward(s).unwrap();
            assert!(tape.grad(f).unwrap().is_finite(), "p = {p}");
        }
    }

    #[test]
    fn relative_deviation_examples() {
        assert_eq!(relative_deviation(6.0, 1.0, 3.0), 1.0);
        assert_eq!(relative_deviation(0.5, 1.0, 3.0), 0.5);
        assert_eq!(relative_deviation(2.0, 1.0, 3.0), 0.0);
    }
}
