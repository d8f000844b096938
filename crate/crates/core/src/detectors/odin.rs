//! ODIN: temperature scaling plus a gradient-sign input perturbation.

use crate::attack::FeatureMap;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::metrics::Orientation;
use crate::nn::Network;
use crate::tensor::Tensor;

use super::{check_logits, max_softmax, DetectorScore};

fn check_hyper(t: f64, pm: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")));
    }
    if !(pm >= 0.0 && pm.is_finite()) {
        return Err(Error::InvalidArgument(format!("perturbation magnitude must be ≥ 0, got {pm}")));
    }
    Ok(())
}

/// `x̃ = clamp(x − PM·sign(−∂/∂x log max softmax(logits(x)/T)), 0, 1)`.
pub fn odin_preprocess(net: &Network, x: &Tensor, t: f64, pm: f64) -> Result<Tensor> {
    check_hyper(t, pm)?;
    if pm == 0.0 {
        return Ok(x.clone());
    }
    let mut tape = Tape::new();
    let params = net.bind(&mut tape, false);
    let xv = tape.leaf(x.clone(), true);
    let logits = net.forward_on(&mut tape, &params, xv)?.logits;
    let scaled = tape.scale(logits, 1.0 / t);
    // log max softmax = s_max − logsumexp(s); the argmax is fixed locally.
    let k = tape.value(scaled).argmax();
    let mut pick = vec![0.0; tape.value(scaled).len()];
    pick[k] = 1.0;
    let pick = tape.constant(Tensor::from_vec(pick));
    let top = tape.mul(scaled, pick)?;
    let top = tape.sum(top);
    let lse = tape.logsumexp(scaled)?;
    let log_p = tape.sub(top, lse)?;
    tape.backward(log_p)?;
    let g = tape.grad(xv).expect("input requires grad");
    // −sign(−g) == sign(g): step uphill on the max log-probability.
    x.zip_map(g, |v, gi| {
        let s = if gi > 0.0 { 1.0 } else if gi < 0.0 { -1.0 } else { 0.0 };
        (v + pm * s).clamp(0.0, 1.0)
    })
}

pub fn score_odin(net: &Network, x: &Tensor, t: f64, pm: f64) -> Result<DetectorScore> {
    let x_tilde = odin_preprocess(net, x, t, pm)?;
    let logits = net.logits(&x_tilde)?;
    check_logits(&logits)?;
    let scaled: Vec<f64> = logits.data().iter().map(|v| v / t).collect();
    Ok(DetectorScore::new("odin", max_softmax(&scaled), Orientation::HigherIsInDistribution)
        .with("T", t)
        .with("PM", pm))
}

/// Logits of the ODIN-preprocessed input, as an attack target.
///
/// The preprocessing offset `x̃ − x` is piecewise constant in `x` (a sign
/// times a constant, then a clamp), so the map is recorded as `x + const`
/// and its Jacobian is the identity almost everywhere.
#[derive(Debug, Clone, Copy)]
pub struct OdinLogits<'a> {
    pub net: &'a Network,
    pub temperature: f64,
    pub magnitude: f64,
}

impl FeatureMap for OdinLogits<'_> {
    fn input_shape(&self) -> Vec<usize> {
        self.net.input_shape().to_vec()
    }

    fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xv = tape.value(x).clone();
        let x_tilde = odin_preprocess(self.net, &xv, self.temperature, self.magnitude)?;
        let offset = tape.constant(x_tilde.zip_map(&xv, |a, b| a - b)?);
        let shifted = tape.add(x, offset)?;
        let params = self.net.bind(tape, false);
        Ok(self.net.forward_on(tape, &params, shifted)?.logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectors::score_max_softmax;
    use crate::nn::{zoo, LayerSpec, NetworkSpec};

    #[test]
    fn closed_form_temperature() {
        // A network whose logits are its input makes the scaling visible.
        let spec = NetworkSpec {
            name: "id".into(),
            input_shape: vec![2],
            layers: vec![LayerSpec::Dense {
                inputs: 2,
                outputs: 2,
                bias: false,
            }],
            encoder_cut: 1,
            taps: vec![],
            seed: 0,
        };
        let net = Network::with_params(spec, vec![Tensor::eye(2).map(|v| v * 2.0)]).unwrap();
        let x = Tensor::from_vec(vec![1.0, 0.0]);
        let s = score_odin(&net, &x, 2.0, 0.0).unwrap();
        let e = 1f64.exp();
        assert!((s.score - e / (1.0 + e)).abs() < 1e-12);
        let hot = score_odin(&net, &x, 1000.0, 0.0).unwrap();
        assert!(hot.score > 0.5 && hot.score < 0.5006);
        assert!(score_odin(&net, &x, 0.0, 0.0).is_err());
    }

    #[test]
    fn preprocessing_moves_by_pm_and_raises_confidence() {
        let net = Network::new(zoo::mlp_classifier(2)).unwrap();
        let x = Tensor::full(zoo::DIGIT_SHAPE.to_vec(), 0.5);
        let xt = odin_preprocess(&net, &x, 1.0, 0.004).unwrap();
        assert!(xt.zip_map(&x, |a, b| (a - b).abs()).unwrap().max() <= 0.004 + 1e-15);
        let before = score_max_softmax(&net.logits(&x).unwrap()).unwrap().score;
        let after = score_odin(&net, &x, 1.0, 0.004).unwrap().score;
        assert!(after >= before);
    }

    #[test]
    fn straight_through_features_match_values() {
        let net = Network::new(zoo::mlp_classifier(4)).unwrap();
        let x = Tensor::full(zoo::DIGIT_SHAPE.to_vec(), 0.3);
        let target = OdinLogits {
            net: &net,
            temperature: 10.0,
            magnitude: 0.002,
        };
        let via_map = target.evaluate(&x).unwrap();
        let direct = net.logits(&odin_preprocess(&net, &x, 10.0, 0.002).unwrap()).unwrap();
        for (a, b) in via_map.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
