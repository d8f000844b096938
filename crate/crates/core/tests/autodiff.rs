//! Randomized finite-difference checks over every tape operation, the conv
//! path against a direct-loop oracle, and the input-gradient pass used by the
//! gradient-norm detector.

use ood_core::autodiff::gradcheck::{check_gradients, eval_scalar};
use ood_core::autodiff::{Tape, Var};
use ood_core::detectors::{gram_matrix_on, logsumexp_input_gradient};
use ood_core::nn::{LayerSpec, Network, NetworkSpec};
use ood_core::{Result, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Entries bounded away from zero, so kinks (relu, max) sit far from the
/// finite-difference stencil.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let t = rand_tensor(rng, shape, 0.1, 1.5);
    let signs: Vec<f64> = (0..t.len()).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    Tensor::new(shape.to_vec(), t.data().iter().zip(signs).map(|(v, s)| v * s).collect()).unwrap()
}

/// Weighted sum with fixed random weights, so every output entry carries a
/// distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let w = tape.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

fn assert_passes<F>(name: &str, f: F, inputs: &[Tensor])
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = check_gradients(f, inputs, STEP).unwrap();
    assert!(report.checked > 0, "{name}: nothing checked");
    assert!(report.passed(), "{name}: {report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_ops_match_central_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_away_from_zero(&mut rng, &[3, 4]);
        let b = rand_away_from_zero(&mut rng, &[3, 4]);
        let s = rand_away_from_zero(&mut rng, &[1]);
        assert_passes("add/sub/mul/scalar broadcast", |t, v| {
            let x = t.add(v[0], v[1])?;
            let y = t.mul(x, v[1])?;
            let z = t.sub(y, v[2])?;
            let w = t.mul(v[2], z)?;
            let w = t.add_scalar(w, 0.3);
            let w = t.scale(w, -1.7);
            weighted_sum(t, w, seed)
        }, &[a.clone(), b.clone(), s]);
        assert_passes("exp/log/log_eps/square/powi", |t, v| {
            let sq = t.square(v[0]);
            let pos = t.add_scalar(sq, 0.5);
            let l = t.log(pos)?;
            let le = t.log_eps(sq, 1e-3)?;
            let e = t.scale(v[1], 0.5);
            let e = t.exp(e);
            let p3 = t.powi(v[0], 3)?;
            let p1 = t.powi(v[1], 1)?;
            let acc = t.add(l, le)?;
            let acc = t.add(acc, e)?;
            let acc = t.add(acc, p3)?;
            let acc = t.mul(acc, p1)?;
            weighted_sum(t, acc, seed)
        }, &[a.clone(), b.clone()]);
        assert_passes("relu/max/mean", |t, v| {
            let r = t.relu(v[0]);
            let m = t.max(v[1]);
            let mean = t.mean(v[0]);
            let rs = weighted_sum(t, r, seed)?;
            let acc = t.add(rs, m)?;
            t.mul(acc, mean)
        }, &[a, b]);
    }

    #[test]
    fn linear_algebra_ops_match_central_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let a = rand_tensor(&mut rng, &[m, k], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[k, n], -1.0, 1.0);
        assert_passes("matmul/transpose/reshape/concat", |t, v| {
            let p = t.matmul(v[0], v[1])?;
            let pt = t.transpose(p)?;
            let flat = t.reshape(pt, &[m * n])?;
            let c = t.concat(&[flat, v[0]])?;
            weighted_sum(t, c, seed)
        }, &[a, b]);
    }

    #[test]
    fn softmax_family_matches_central_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[3, 5], -4.0, 4.0);
        assert_passes("softmax", |t, v| {
            let s = t.softmax(v[0])?;
            weighted_sum(t, s, seed)
        }, &[x.clone()]);
        assert_passes("logsumexp", |t, v| {
            let s = t.logsumexp(v[0])?;
            weighted_sum(t, s, seed)
        }, &[x]);
    }

    #[test]
    fn spatial_ops_match_central_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c_in, c_out) = (rng.random_range(1..3), rng.random_range(1..4));
        let (h, w) = (rng.random_range(4..7), rng.random_range(4..7));
        let kernel = rng.random_range(1..4);
        let stride = rng.random_range(1..3);
        let padding = rng.random_range(0..2);
        let x = rand_tensor(&mut rng, &[c_in, h, w], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[c_out, c_in, kernel, kernel], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, &[c_out], -0.5, 0.5);
        assert_passes("conv2d", |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, padding)?;
            weighted_sum(t, y, seed)
        }, &[x.clone(), k, bias]);
        assert_passes("avgpool2d", |t, v| {
            let y = t.avgpool2d(v[0], 2, 2)?;
            weighted_sum(t, y, seed)
        }, &[x.clone()]);
        let gamma = rand_tensor(&mut rng, &[c_in], 0.5, 1.5);
        let beta = rand_tensor(&mut rng, &[c_in], -0.5, 0.5);
        assert_passes("instance_norm", |t, v| {
            let y = t.instance_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, seed)
        }, &[x, gamma, beta]);
    }

    #[test]
    fn gram_matrices_match_central_differences(seed in any::<u64>(), p in 1usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = rand_tensor(&mut rng, &[3, 6], 0.2, 1.2);
        assert_passes("gram", |t, v| {
            let g = gram_matrix_on(t, v[0], p)?;
            weighted_sum(t, g, seed)
        }, &[f]);
    }
}

fn tiny_cnn(seed: u64) -> Network {
    let spec = NetworkSpec {
        name: "tiny".into(),
        input_shape: vec![1, 6, 6],
        layers: vec![
            LayerSpec::conv(1, 3, 3, 1),
            LayerSpec::InstanceNorm { channels: 3 },
            LayerSpec::Relu,
            LayerSpec::AvgPool2d { window: 2 },
            LayerSpec::Flatten,
            LayerSpec::dense(27, 8),
            LayerSpec::Relu,
            LayerSpec::dense(8, 4),
        ],
        encoder_cut: 6,
        taps: vec![2],
        seed,
    };
    Network::new(spec).unwrap()
}

#[test]
fn network_forward_gradients_match_central_differences() {
    for seed in 0..5 {
        let net = tiny_cnn(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = rand_tensor(&mut rng, &[1, 6, 6], 0.0, 1.0);
        assert_passes(
            "network",
            |t, v| {
                let params = net.bind(t, false);
                let out = net.forward_on(t, &params, v[0])?;
                let lse = t.logsumexp(out.logits)?;
                let zs = weighted_sum(t, out.z, seed)?;
                t.add(lse, zs)
            },
            &[x],
        );
    }
}

#[test]
fn grad_norm_input_gradient_matches_central_differences() {
    for seed in 0..5 {
        let net = tiny_cnn(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let x = rand_tensor(&mut rng, &[1, 6, 6], 0.0, 1.0);
        let g = logsumexp_input_gradient(&net, &x).unwrap();
        let lse = |t: &mut Tape, v: &[Var]| {
            let params = net.bind(t, false);
            let logits = net.forward_on(t, &params, v[0])?.logits;
            t.logsumexp(logits)
        };
        for i in 0..x.len() {
            let (mut plus, mut minus) = (x.clone(), x.clone());
            plus.data_mut()[i] += STEP;
            minus.data_mut()[i] -= STEP;
            let numeric = (eval_scalar(&lse, &[plus]).unwrap() - eval_scalar(&lse, &[minus]).unwrap()) / (2.0 * STEP);
            let tol = (1e-4 * numeric.abs()).max(1e-6);
            assert!((g.data()[i] - numeric).abs() <= tol, "entry {i}: {} vs {numeric}", g.data()[i]);
        }
    }
}

/// Textbook six-loop cross-correlation with zero padding.
fn naive_conv(x: &Tensor, k: &Tensor, bias: &[f64], stride: usize, pad: usize) -> Tensor {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[o];
                for c in 0..c_in {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (oy * stride + dy) as isize - pad as isize;
                            let ix = (ox * stride + dx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += x.data()[(c * h + iy as usize) * w + ix as usize]
                                * k.data()[((o * c_in + c) * kh + dy) * kw + dx];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![c_out, oh, ow], out).unwrap()
}

#[test]
fn conv_forward_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let (c_in, c_out) = (rng.random_range(1..4), rng.random_range(1..5));
        let (h, w) = (rng.random_range(3..10), rng.random_range(3..10));
        let kernel = rng.random_range(1..4);
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..3);
        let x = rand_tensor(&mut rng, &[c_in, h, w], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[c_out, c_in, kernel, kernel], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[c_out], -1.0, 1.0);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.constant(x.clone()), tape.constant(k.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, kv, Some(bv), stride, pad).unwrap();
        let expected = naive_conv(&x, &k, b.data(), stride, pad);
        let got = tape.value(y);
        assert_eq!(got.shape(), expected.shape());
        for (g, e) in got.data().iter().zip(expected.data()) {
            assert!((g - e).abs() <= 1e-12, "{g} vs {e}");
        }
    }
}
