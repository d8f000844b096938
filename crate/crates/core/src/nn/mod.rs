//! Small feed-forward networks: layer specs, parameter storage, forward
//! passes on a tape, training and checkpoints.
//!
//! A [`Network`] splits into an encoder `z = f(x)` (the first
//! `encoder_cut` layers) and a head producing logits from `z`. Tap points
//! export intermediate activations for feature-statistics detectors.

mod checkpoint;
pub mod optim;
mod train;
pub mod zoo;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{load_network, save_network, Container, TrainingMetadata, CHECKPOINT_MAGIC};
pub use train::{
    accuracy, build_ensemble, mean_reconstruction_error, predict, train_autoencoder,
    train_classifier, train_ensemble, AutoencoderReport, TrainConfig, TrainReport,
};

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    AvgPool2d {
        window: usize,
    },
    Flatten,
    Reshape {
        shape: Vec<usize>,
    },
    InstanceNorm {
        channels: usize,
    },
}

const INSTANCE_NORM_EPS: f64 = 1e-5;

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense {
            inputs,
            outputs,
            bias: true,
        }
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding,
        }
    }

    /// Output shape for a given input shape, or a description of the mismatch.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |want: String| {
            Err(Error::Shape(format!(
                "{self:?} expects input {want}, got {input:?}"
            )))
        };
        match self {
            LayerSpec::Dense { inputs, outputs, .. } => {
                if input != [*inputs] {
                    return mismatch(format!("[{inputs}]"));
                }
                Ok(vec![*outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != *in_channels {
                    return mismatch(format!("[{in_channels}, H, W]"));
                }
                if *stride == 0 || *kernel > input[1] + 2 * padding || *kernel > input[2] + 2 * padding {
                    return mismatch(format!("spatial extent >= kernel {kernel} after padding"));
                }
                Ok(vec![
                    *out_channels,
                    (input[1] + 2 * padding - kernel) / stride + 1,
                    (input[2] + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::AvgPool2d { window } => {
                if input.len() != 3 || *window == 0 || input[1] < *window || input[2] < *window {
                    return mismatch(format!("[C, H, W] with H, W >= {window}"));
                }
                Ok(vec![input[0], input[1] / window, input[2] / window])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return mismatch(format!("{} elements", shape.iter().product::<usize>()));
                }
                Ok(shape.clone())
            }
            LayerSpec::InstanceNorm { channels } => {
                if input.len() != 3 || input[0] != *channels {
                    return mismatch(format!("[{channels}, H, W]"));
                }
                Ok(input.to_vec())
            }
        }
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            LayerSpec::Dense {
                inputs,
                outputs,
                bias,
            } => {
                let mut v = vec![vec![*outputs, *inputs]];
                if *bias {
                    v.push(vec![*outputs]);
                }
                v
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                vec![*out_channels, *in_channels, *kernel, *kernel],
                vec![*out_channels],
            ],
            LayerSpec::InstanceNorm { channels } => vec![vec![*channels], vec![*channels]],
            _ => vec![],
        }
    }

    fn init_params(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        let shapes = self.param_shapes();
        match self {
            LayerSpec::Dense { inputs, .. } => he_init(&shapes, *inputs, rng),
            LayerSpec::Conv2d {
                in_channels, kernel, ..
            } => he_init(&shapes, in_channels * kernel * kernel, rng),
            LayerSpec::InstanceNorm { channels } => vec![
                Tensor::full(vec![*channels], 1.0),
                Tensor::zeros(vec![*channels]),
            ],
            _ => vec![],
        }
    }
}

/// He-normal weights, zero biases.
fn he_init(shapes: &[Vec<usize>], fan_in: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if i == 0 {
                let n = s.iter().product();
                Tensor::new(s.clone(), (0..n).map(|_| normal.sample(rng)).collect())
                    .expect("shape from spec")
            } else {
                Tensor::zeros(s.clone())
            }
        })
        .collect()
}

/// Topology of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Number of leading layers forming the encoder; `z` is the output of
    /// layer `encoder_cut - 1`.
    pub encoder_cut: usize,
    /// Layer indices whose outputs are exported as feature maps.
    #[serde(default)]
    pub taps: Vec<usize>,
    pub seed: u64,
}

impl NetworkSpec {
    /// Output shape of every layer, validating compatibility along the way.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer
                .output_shape(&cur)
                .map_err(|e| Error::Shape(format!("layer {i}: {e}")))?;
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(Error::Shape(format!("network {:?} has no layers", self.name)));
        }
        if self.encoder_cut == 0 || self.encoder_cut > self.layers.len() {
            return Err(Error::Shape(format!(
                "encoder cut {} outside 1..={}",
                self.encoder_cut,
                self.layers.len()
            )));
        }
        if let Some(&t) = self.taps.iter().find(|&&t| t >= self.layers.len()) {
            return Err(Error::Shape(format!("tap {t} beyond last layer")));
        }
        self.layer_shapes()
    }
}

/// Forward results as tape handles.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub z: Var,
    pub logits: Var,
    pub taps: Vec<Var>,
}

/// Forward results as values.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub z: Tensor,
    pub logits: Tensor,
    pub taps: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    shapes: Vec<Vec<usize>>,
    params: Vec<Arc<Tensor>>,
}

impl Network {
    /// Builds a network with freshly initialized parameters.
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let shapes = spec.validate()?;
        let mut params = Vec::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i as u64 + 1)));
            params.extend(layer.init_params(&mut rng).into_iter().map(Arc::new));
        }
        Ok(Self { spec, shapes, params })
    }

    /// Builds a network around existing parameters (e.g. from a checkpoint).
    pub fn with_params(spec: NetworkSpec, params: Vec<Tensor>) -> Result<Self> {
        let shapes = spec.validate()?;
        let expected: Vec<Vec<usize>> = spec.layers.iter().flat_map(LayerSpec::param_shapes).collect();
        if expected.len() != params.len()
            || expected.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape())
        {
            return Err(Error::Shape(format!(
                "parameter shapes {:?} do not match topology {:?}",
                params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>(),
                expected
            )));
        }
        Ok(Self {
            spec,
            shapes,
            params: params.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_shape.iter().product()
    }

    pub fn latent_shape(&self) -> &[usize] {
        &self.shapes[self.spec.encoder_cut - 1]
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_shape().iter().product()
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().expect("validated non-empty").iter().product()
    }

    pub fn tap_shapes(&self) -> Vec<Vec<usize>> {
        self.spec.taps.iter().map(|&t| self.shapes[t].clone()).collect()
    }

    pub fn params(&self) -> &[Arc<Tensor>] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Arc<Tensor>] {
        &mut self.params
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf_shared(Arc::clone(p), requires_grad))
            .collect()
    }

    /// Differentiable forward pass of `x` using bound parameters.
    pub fn forward_on(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<ForwardVars> {
        if tape.value(x).shape() != self.spec.input_shape.as_slice() {
            return Err(Error::Shape(format!(
                "network {:?} expects input {:?}, got {:?}",
                self.spec.name,
                self.spec.input_shape,
                tape.value(x).shape()
            )));
        }
        let mut cur = x;
        let mut next_param = 0;
        let mut z = None;
        let mut taps = Vec::with_capacity(self.spec.taps.len());
        for (i, layer) in self.spec.layers.iter().enumerate() {
            cur = match layer {
                LayerSpec::Dense { inputs, outputs, bias } => {
                    let w = params[next_param];
                    next_param += 1;
                    let col = tape.reshape(cur, &[*inputs, 1])?;
                    let y = tape.matmul(w, col)?;
                    let y = tape.reshape(y, &[*outputs])?;
                    if *bias {
                        let b = params[next_param];
                        next_param += 1;
                        tape.add(y, b)?
                    } else {
                        y
                    }
                }
                LayerSpec::Conv2d { stride, padding, .. } => {
                    let (k, b) = (params[next_param], params[next_param + 1]);
                    next_param += 2;
                    tape.conv2d(cur, k, Some(b), *stride, *padding)?
                }
                LayerSpec::Relu => tape.relu(cur),
                LayerSpec::AvgPool2d { window } => tape.avgpool2d(cur, *window, *window)?,
                LayerSpec::Flatten => {
                    let n = tape.value(cur).len();
                    tape.reshape(cur, &[n])?
                }
                LayerSpec::Reshape { shape } => tape.reshape(cur, shape)?,
                LayerSpec::InstanceNorm { .. } => {
                    let (g, b) = (params[next_param], params[next_param + 1]);
                    next_param += 2;
                    tape.instance_norm(cur, g, b, INSTANCE_NORM_EPS)?
                }
            };
            if self.spec.taps.contains(&i) {
                taps.push(cur);
            }
            if i + 1 == self.spec.encoder_cut {
                z = Some(cur);
            }
        }
        Ok(ForwardVars {
            z: z.expect("validated cut point"),
            logits: cur,
            taps,
        })
    }

    /// Forward pass with constant parameters.
    pub fn forward(&self, x: &Tensor) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward_on(&mut tape, &params, xv)?;
        Ok(ForwardOutput {
            z: tape.value(out.z).clone(),
            logits: tape.value(out.logits).clone(),
            taps: out.taps.iter().map(|&t| tape.value(t).clone()).collect(),
        })
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.z)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.logits)
    }
}
