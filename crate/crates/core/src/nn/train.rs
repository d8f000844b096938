use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::{Network, NetworkSpec};
use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderReport {
    pub epochs: usize,
    pub epoch_losses: Vec<f64>,
    /// Mean `‖x − x̂‖₂` on the held-out set.
    pub mean_reconstruction_error: f64,
}

/// Per-sample loss builder: `(tape, bound params, input) -> scalar loss`.
type LossFn<'a> = dyn Fn(&mut Tape, &[Vec<Var>], Var, usize) -> Result<Var> + Sync + 'a;

/// Minibatch Adam over one or more jointly trained networks.
fn fit(nets: &mut [&mut Network], data: &Dataset, cfg: &TrainConfig, loss_fn: &LossFn<'_>) -> Result<Vec<f64>> {
    let sizes: Vec<usize> = nets
        .iter()
        .flat_map(|n| n.params().iter().map(|p| p.len()).collect::<Vec<_>>())
        .collect();
    let mut opt = Adam::new(cfg.learning_rate, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let batch = cfg.batch_size.max(1);
    let mut tape = Tape::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(batch).enumerate() {
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            let mut batch_loss = 0.0;
            for &i in chunk {
                tape.reset();
                let bound: Vec<Vec<Var>> = nets.iter().map(|n| n.bind(&mut tape, true)).collect();
                let x = tape.constant(data.image(i).clone());
                let loss = loss_fn(&mut tape, &bound, x, data.label(i))?;
                let lv = tape.scalar(loss);
                if !lv.is_finite() {
                    return Err(Error::Diverged(format!(
                        "epoch {epoch}, batch {b}, sample {i}: loss {lv} (learning rate {})",
                        cfg.learning_rate
                    )));
                }
                batch_loss += lv;
                tape.backward(loss)?;
                for (slot, v) in grads.iter_mut().zip(bound.iter().flatten()) {
                    let g = tape.grad(*v).expect("parameters require grad");
                    for (s, gv) in slot.iter_mut().zip(g.data()) {
                        *s += gv;
                    }
                }
            }
            tape.reset();
            let scale = 1.0 / chunk.len() as f64;
            for g in &mut grads {
                g.iter_mut().for_each(|v| *v *= scale);
            }
            let mut slices: Vec<&mut [f64]> = nets
                .iter_mut()
                .flat_map(|n| n.params_mut().iter_mut().map(|p| Arc::make_mut(p).data_mut()))
                .collect();
            opt.step(&mut slices, &grads);
            total += batch_loss;
        }
        epoch_losses.push(if data.is_empty() { 0.0 } else { total / data.len() as f64 });
    }
    Ok(epoch_losses)
}

fn cross_entropy(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let n = tape.value(logits).len();
    let mut onehot = vec![0.0; n];
    onehot[label] = 1.0;
    let onehot = tape.constant(Tensor::from_vec(onehot));
    let lse = tape.logsumexp(logits)?;
    let picked = tape.mul(logits, onehot)?;
    let picked = tape.sum(picked);
    tape.sub(lse, picked)
}

pub fn predict(net: &Network, x: &Tensor) -> Result<usize> {
    Ok(net.logits(x)?.argmax())
}

pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let correct: Result<Vec<bool>> = data
        .images()
        .par_iter()
        .zip(data.labels().par_iter())
        .map(|(x, &y)| Ok(predict(net, x)? == y))
        .collect();
    Ok(correct?.iter().filter(|&&c| c).count() as f64 / data.len() as f64)
}

/// Trains `net` with softmax cross-entropy. Deterministic given `cfg.seed`.
pub fn train_classifier(
    net: &mut Network,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if net.output_dim() != train.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "head has {} outputs but dataset has {} classes",
            net.output_dim(),
            train.num_classes()
        )));
    }
    // The loss cannot borrow `net` while `fit` mutates it; the forward pass
    // only needs the topology, and parameters come in through the tape.
    let topology = net.clone();
    let loss_fn = move |tape: &mut Tape, bound: &[Vec<Var>], x: Var, label: usize| -> Result<Var> {
        let logits = topology.forward_on(tape, &bound[0], x)?.logits;
        cross_entropy(tape, logits, label)
    };
    let epoch_losses = fit(&mut [net], train, cfg, &loss_fn)?;
    Ok(TrainReport {
        epochs: cfg.epochs,
        epoch_losses,
        train_accuracy: accuracy(net, train)?,
        test_accuracy: test.map(|t| accuracy(net, t)).transpose()?,
    })
}

pub fn reconstruct(encoder: &Network, decoder: &Network, x: &Tensor) -> Result<Tensor> {
    decoder.logits(&encoder.encode(x)?)
}

/// Mean L2 reconstruction error over a dataset.
pub fn mean_reconstruction_error(encoder: &Network, decoder: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let errs: Result<Vec<f64>> = data
        .images()
        .par_iter()
        .map(|x| {
            let xh = reconstruct(encoder, decoder, x)?;
            Ok(x.zip_map(&xh, |a, b| a - b)?.norm_l2())
        })
        .collect();
    Ok(errs?.iter().sum::<f64>() / data.len() as f64)
}

/// Trains an encoder/decoder pair on per-pixel mean squared error.
pub fn train_autoencoder(
    encoder: &mut Network,
    decoder: &mut Network,
    train: &Dataset,
    held_out: &Dataset,
    cfg: &TrainConfig,
) -> Result<AutoencoderReport> {
    let dec_shapes = decoder.spec().layer_shapes()?;
    let out_shape = dec_shapes.last().expect("validated");
    if out_shape.as_slice() != encoder.input_shape() || decoder.input_shape() != encoder.latent_shape() {
        return Err(Error::Shape(format!(
            "decoder maps {:?} -> {:?}, encoder maps {:?} -> {:?}",
            decoder.input_shape(),
            out_shape,
            encoder.input_shape(),
            encoder.latent_shape()
        )));
    }
    let (enc_t, dec_t) = (encoder.clone(), decoder.clone());
    let loss_fn = move |tape: &mut Tape, bound: &[Vec<Var>], x: Var, _label: usize| -> Result<Var> {
        let z = enc_t.forward_on(tape, &bound[0], x)?.z;
        let xh = dec_t.forward_on(tape, &bound[1], z)?.logits;
        let d = tape.sub(xh, x)?;
        let sq = tape.square(d);
        Ok(tape.mean(sq))
    };
    let epoch_losses = fit(&mut [encoder, decoder], train, cfg, &loss_fn)?;
    Ok(AutoencoderReport {
        epochs: cfg.epochs,
        epoch_losses,
        mean_reconstruction_error: mean_reconstruction_error(encoder, decoder, held_out)?,
    })
}

/// Independently initialized ensemble members. A single spec is reused for
/// every seed.
pub fn build_ensemble(specs: &[NetworkSpec], seeds: &[u64]) -> Result<Vec<Network>> {
    if specs.is_empty() || seeds.is_empty() || (specs.len() != 1 && specs.len() != seeds.len()) {
        return Err(Error::InvalidArgument(format!(
            "{} specs cannot pair with {} seeds",
            specs.len(),
            seeds.len()
        )));
    }
    let members = seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| {
            let mut spec = specs[i.min(specs.len() - 1)].clone();
            spec.seed = seed;
            spec.name = format!("{}-member{i}", spec.name);
            Network::new(spec)
        })
        .collect::<Result<Vec<_>>>()?;
    let classes = members[0].output_dim();
    if members.iter().any(|m| m.output_dim() != classes) {
        return Err(Error::InvalidArgument("ensemble heads disagree on class count".into()));
    }
    Ok(members)
}

/// Trains members concurrently; member `i` shuffles with `cfg.seed + i`.
pub fn train_ensemble(
    members: &mut [Network],
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<Vec<TrainReport>> {
    members
        .par_iter_mut()
        .enumerate()
        .map(|(i, m)| {
            let mut c = cfg.clone();
            c.seed = cfg.seed.wrapping_add(i as u64);
            train_classifier(m, train, test, &c)
        })
        .collect()
}
