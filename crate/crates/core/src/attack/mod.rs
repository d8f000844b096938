//! Latent-matching OOD attack and the exact null-space attack on linear
//! encoders.
//!
//! The iterative attack starts from an OOD image `x'` and searches the
//! ε-ball around it for a point whose features match those of an
//! in-distribution image:
//!
//! ```text
//! J(x) = ‖f(x) − f(x_in)‖²
//! x    ← project(x − Adamax(h(∂J/∂x)))
//! ```
//!
//! `h` is the sign function under L∞ and L2 normalization under L2. Adamax
//! consumes `h(J′)` directly with learning rate α. Every iterate is
//! projected onto the ball first and the pixel range second, so each
//! candidate is feasible; the best loss over all iterates and restarts wins.
//!
//! What `f` is depends on the detector under attack, hence [`FeatureMap`].

mod null_space;

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{Network, optim::Adamax};
use crate::tensor::{DType, Tensor};

pub use null_space::{null_space_attack, null_space_attack_with, null_space_basis, perturb_along, NullSpaceAttack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    L2,
    Linf,
}

impl std::str::FromStr for Norm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(Norm::L2),
            "linf" | "inf" => Ok(Norm::Linf),
            other => Err(Error::Config(format!("unknown norm {other:?} (expected l2 or linf)"))),
        }
    }
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_stability() -> f64 {
    1e-8
}
fn default_restarts() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Ball radius in [0,1]-scaled pixel units.
    pub epsilon: f64,
    pub norm: Norm,
    pub iterations: usize,
    /// Step size; `epsilon / 100` when absent.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_stability")]
    pub stability: f64,
    /// Stop as soon as the best loss reaches this value.
    #[serde(default)]
    pub target_loss: Option<f64>,
    /// Stop as soon as the best iterate's MAPE reaches this value.
    #[serde(default)]
    pub target_mape: Option<f64>,
}

impl AttackConfig {
    pub fn new(epsilon: f64, norm: Norm, iterations: usize) -> Self {
        Self {
            epsilon,
            norm,
            iterations,
            alpha: None,
            restarts: 1,
            seed: 0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            stability: default_stability(),
            target_loss: None,
            target_mape: None,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.epsilon / 100.0)
    }

    pub fn validate(&self) -> Result<()> {
        let alpha = self.alpha();
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        if self.iterations == 0 || self.restarts == 0 {
            return Err(Error::Config("iterations and restarts must be at least 1".into()));
        }
        if self.target_mape.is_some_and(|t| !(t >= 0.0)) || self.target_loss.is_some_and(|t| t.is_nan()) {
            return Err(Error::Config("early-stopping targets must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adamax betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// A differentiable map from an image to the quantity the attack matches.
pub trait FeatureMap: Sync {
    fn input_shape(&self) -> Vec<usize>;

    /// Records `f(x)` on `tape`.
    fn features(&self, tape: &mut Tape, x: Var) -> Result<Var>;

    fn evaluate(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let f = self.features(&mut tape, xv)?;
        Ok(tape.value(f).clone())
    }
}

/// The encoder output `z`.
#[derive(Debug, Clone, Copy)]
pub struct Latent<'a>(pub &'a Network);

impl FeatureMap for Latent<'_> {
    fn input_shape(&self) -> Vec<usize> {
        self.0.input_shape().to_vec()
    }

    fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let params = self.0.bind(tape, false);
        Ok(self.0.forward_on(tape, &params, x)?.z)
    }
}

/// The classifier logits.
#[derive(Debug, Clone, Copy)]
pub struct Logits<'a>(pub &'a Network);

impl FeatureMap for Logits<'_> {
    fn input_shape(&self) -> Vec<usize> {
        self.0.input_shape().to_vec()
    }

    fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let params = self.0.bind(tape, false);
        Ok(self.0.forward_on(tape, &params, x)?.logits)
    }
}

/// Records `‖f − target‖²` (sum of squared differences).
pub fn latent_loss_on(tape: &mut Tape, f: Var, target: &Tensor) -> Result<Var> {
    if tape.value(f).shape() != target.shape() {
        return Err(Error::Shape(format!(
            "features {:?} vs target {:?}",
            tape.value(f).shape(),
            target.shape()
        )));
    }
    let t = tape.constant(target.clone());
    let d = tape.sub(f, t)?;
    let sq = tape.square(d);
    Ok(tape.sum(sq))
}

/// `J = ‖f(x_out) − z_in‖²`.
pub fn latent_loss<F: FeatureMap + ?Sized>(f: &F, x_out: &Tensor, z_in: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(x_out.clone());
    let fx = f.features(&mut tape, x)?;
    let j = latent_loss_on(&mut tape, fx, z_in)?;
    Ok(tape.scalar(j))
}

/// `h(J′)`: elementwise sign under L∞, unit-L2 direction under L2.
pub fn step_direction(grad: &Tensor, norm: Norm) -> Result<Tensor> {
    if !grad.is_finite() {
        return Err(Error::NonFinite("attack gradient contains NaN or inf".into()));
    }
    Ok(match norm {
        Norm::Linf => grad.map(|g| if g > 0.0 { 1.0 } else if g < 0.0 { -1.0 } else { 0.0 }),
        Norm::L2 => {
            let n = grad.norm_l2();
            if n == 0.0 {
                grad.map(|_| 0.0)
            } else {
                grad.map(|g| g / n)
            }
        }
    })
}

/// `‖a − b‖_p`.
pub fn lp_distance(a: &Tensor, b: &Tensor, norm: Norm) -> Result<f64> {
    let d = a.zip_map(b, |u, v| u - v)?;
    Ok(match norm {
        Norm::L2 => d.norm_l2(),
        Norm::Linf => d.norm_linf(),
    })
}

/// Projects onto the ε-ball around `x_ref`, then onto `[0,1]`.
///
/// The result satisfies `lp_distance(result, x_ref) ≤ epsilon` as evaluated
/// in floating point, not merely up to rounding, provided `x_ref` itself lies
/// in `[0,1]`.
pub fn project(x: &Tensor, x_ref: &Tensor, epsilon: f64, norm: Norm) -> Result<Tensor> {
    if x.shape() != x_ref.shape() {
        return Err(Error::Shape(format!("project {:?} onto {:?}", x.shape(), x_ref.shape())));
    }
    if x_ref.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain("projection centre has pixels outside [0,1]".into()));
    }
    match norm {
        Norm::Linf => x.zip_map(x_ref, |v, r| {
            let mut out = (r + (v - r).clamp(-epsilon, epsilon)).clamp(0.0, 1.0);
            // Rounding in `r + d` can overshoot by an ulp.
            while (out - r).abs() > epsilon {
                out = if out > r { out.next_down() } else { out.next_up() };
            }
            out
        }),
        Norm::L2 => {
            let delta = x.zip_map(x_ref, |v, r| v - r)?;
            let n = delta.norm_l2();
            let mut scale = if n > epsilon { epsilon / n } else { 1.0 };
            loop {
                let out = delta.zip_map(x_ref, |d, r| (r + d * scale).clamp(0.0, 1.0))?;
                if lp_distance(&out, x_ref, Norm::L2)? <= epsilon {
                    return Ok(out);
                }
                scale *= 1.0 - f64::EPSILON * 8.0;
            }
        }
    }
}

fn random_in_ball(rng: &mut ChaCha8Rng, shape: &[usize], epsilon: f64, norm: Norm) -> Tensor {
    let n: usize = shape.iter().product();
    let data = match norm {
        Norm::Linf => (0..n).map(|_| rng.random_range(-epsilon..=epsilon)).collect(),
        Norm::L2 => {
            let dir: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let radius = epsilon * rng.random::<f64>().powf(1.0 / n as f64);
            dir.into_iter().map(|v| v * radius / len).collect()
        }
    };
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub loss: f64,
    pub best_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub x_out: Tensor,
    pub z_out: Tensor,
    pub z_in: Tensor,
    /// Best loss `J(x_out)`.
    pub loss: f64,
    /// Row 0 evaluates the unperturbed start; then every iterate of every
    /// restart in order. `best_loss` is the running minimum.
    pub trace: Vec<TracePoint>,
    /// `None` when `z_in` is all zeros and MAPE is undefined.
    pub mape: Option<f64>,
    /// `ε − ‖x_out − x'‖_p`; never negative.
    pub slack: f64,
    /// Restart that produced `x_out` (`None` if the start itself won).
    pub restart: Option<usize>,
    pub discarded_restarts: usize,
}

impl AttackResult {
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Format(format!("csv: {e}"));
        out.write_record(["iteration", "loss", "best_loss"]).map_err(err)?;
        for p in &self.trace {
            out.write_record([p.iteration.to_string(), p.loss.to_string(), p.best_loss.to_string()])
                .map_err(err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes `<stem>.in.otnsr`, `<stem>.out.otnsr` and `<stem>.trace.csv`.
    pub fn save_artifacts(&self, dir: &Path, stem: &str, x_in: &Tensor) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.in.otnsr")), x_in.to_bytes(DType::F64))?;
        std::fs::write(dir.join(format!("{stem}.out.otnsr")), self.x_out.to_bytes(DType::F64))?;
        let f = std::fs::File::create(dir.join(format!("{stem}.trace.csv")))?;
        self.write_trace_csv(std::io::BufWriter::new(f))
    }
}

struct Evaluated {
    loss: f64,
    features: Tensor,
    grad: Option<Tensor>,
}

fn evaluate<F: FeatureMap + ?Sized>(
    f: &F,
    tape: &mut Tape,
    x: &Tensor,
    target: &Tensor,
    with_grad: bool,
) -> Result<Evaluated> {
    tape.reset();
    let xv = tape.leaf(x.clone(), with_grad);
    let fx = f.features(tape, xv)?;
    let j = latent_loss_on(tape, fx, target)?;
    let loss = tape.scalar(j);
    let grad = if with_grad && loss.is_finite() {
        tape.backward(j)?;
        tape.grad(xv).cloned()
    } else {
        None
    };
    Ok(Evaluated {
        loss,
        features: tape.value(fx).clone(),
        grad,
    })
}

fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    rng
}

/// Runs the attack towards `f(x_in)` from the OOD start `x_out_init`.
pub fn ood_attack<F: FeatureMap + ?Sized>(
    f: &F,
    x_in: &Tensor,
    x_out_init: &Tensor,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let z_in = f.evaluate(x_in)?;
    ood_attack_to(f, &z_in, x_out_init, cfg)
}

/// Runs the attack towards a precomputed feature target.
pub fn ood_attack_to<F: FeatureMap + ?Sized>(
    f: &F,
    z_in: &Tensor,
    x_out_init: &Tensor,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    if x_out_init.shape() != f.input_shape().as_slice() {
        return Err(Error::Shape(format!(
            "initial image {:?} does not match input {:?}",
            x_out_init.shape(),
            f.input_shape()
        )));
    }
    if x_out_init.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain("initial image has pixels outside [0,1]".into()));
    }
    let (eps, norm, alpha) = (cfg.epsilon, cfg.norm, cfg.alpha());
    let done = |best: Option<(f64, &Tensor)>| {
        best.is_some_and(|(loss, feat)| {
            cfg.target_loss.is_some_and(|t| loss <= t)
                || cfg
                    .target_mape
                    .is_some_and(|t| metrics::mape(feat, z_in).is_ok_and(|m| m <= t))
        })
    };
    let mut tape = Tape::new();
    let mut trace = Vec::with_capacity(cfg.iterations * cfg.restarts + 1);

    let start = evaluate(f, &mut tape, x_out_init, z_in, false)?;
    let mut best: Option<(f64, Tensor, Tensor, Option<usize>)> = None;
    if start.loss.is_finite() {
        best = Some((start.loss, x_out_init.clone(), start.features, None));
    }
    let best_loss = |b: &Option<(f64, Tensor, Tensor, Option<usize>)>| b.as_ref().map_or(f64::INFINITY, |b| b.0);
    trace.push(TracePoint {
        iteration: 0,
        loss: start.loss,
        best_loss: best_loss(&best),
    });

    let mut discarded = 0;
    for r in 0..cfg.restarts {
        if done(best.as_ref().map(|b| (b.0, &b.2))) {
            break;
        }
        let mut rng = restart_rng(cfg.seed, r);
        let xi = random_in_ball(&mut rng, x_out_init.shape(), eps, norm);
        let mut x = project(&x_out_init.zip_map(&xi, |a, b| a + b)?, x_out_init, eps, norm)?;
        let mut opt = Adamax::new(alpha, cfg.beta1, cfg.beta2, cfg.stability, x.len());
        let mut restart_trace = Vec::with_capacity(cfg.iterations + 1);
        let mut restart_best: Option<(f64, Tensor, Tensor)> = None;
        let mut failed = false;
        for t in 0..=cfg.iterations {
            let ev = evaluate(f, &mut tape, &x, z_in, t < cfg.iterations)?;
            if !ev.loss.is_finite() {
                failed = true;
                break;
            }
            if restart_best.as_ref().is_none_or(|b| ev.loss < b.0) {
                restart_best = Some((ev.loss, x.clone(), ev.features));
            }
            restart_trace.push(ev.loss);
            if t == cfg.iterations || done(restart_best.as_ref().map(|b| (b.0, &b.2))) {
                break;
            }
            let dir = match step_direction(ev.grad.as_ref().expect("gradient requested"), norm) {
                Ok(d) => d,
                Err(_) => {
                    failed = true;
                    break;
                }
            };
            let delta = opt.update(dir.data());
            let stepped = Tensor::new(
                x.shape().to_vec(),
                x.data().iter().zip(&delta).map(|(v, d)| v - d).collect(),
            )?;
            x = project(&stepped, x_out_init, eps, norm)?;
        }
        if failed {
            discarded += 1;
            continue;
        }
        for loss in restart_trace {
            let prev = trace.last().map_or(f64::INFINITY, |p: &TracePoint| p.best_loss);
            trace.push(TracePoint {
                iteration: trace.len(),
                loss,
                best_loss: prev.min(loss),
            });
        }
        if let Some((l, xb, fb)) = restart_best {
            if l < best_loss(&best) {
                best = Some((l, xb, fb, Some(r)));
            }
        }
    }

    let Some((loss, x_out, z_out, restart)) = best else {
        return Err(Error::AttackFailed(format!(
            "all {} restarts produced non-finite losses",
            cfg.restarts
        )));
    };
    let mape = match metrics::mape(&z_out, z_in) {
        Ok(m) => Some(m),
        Err(Error::Domain(_)) => None,
        Err(e) => return Err(e),
    };
    let slack = eps - lp_distance(&x_out, x_out_init, norm)?;
    Ok(AttackResult {
        x_out,
        z_out,
        z_in: z_in.clone(),
        loss,
        trace,
        mape,
        slack,
        restart,
        discarded_restarts: discarded,
    })
}

/// Attacks many (x_in, x_out_init) pairs in parallel. Pair `i` uses seed
/// `cfg.seed + i`, so results do not depend on the worker count.
pub fn ood_attack_many<F: FeatureMap + ?Sized>(
    f: &F,
    pairs: &[(Tensor, Tensor)],
    cfg: &AttackConfig,
) -> Vec<Result<AttackResult>> {
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, (x_in, init))| {
            let mut c = cfg.clone();
            c.seed = cfg.seed.wrapping_add(i as u64);
            ood_attack(f, x_in, init, &c)
        })
        .collect()
}
