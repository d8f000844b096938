//! Cross-checks between detectors and independent reference computations.

use ood_core::autodiff::Tape;
use ood_core::detectors::{
    fit_mahalanobis_features, gram_matrix_direct, gram_matrix_on, gram_matrix_stable, score_max_softmax, score_odin,
    MAX_GRAM_ORDER,
};
use ood_core::nn::{zoo, Network};
use ood_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn odin_without_temperature_or_perturbation_is_max_softmax() {
    let net = Network::new(zoo::desk_cnn(9)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let x = Tensor::new(vec![1, 28, 28], (0..784).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let odin = score_odin(&net, &x, 1.0, 0.0).unwrap();
        let msp = score_max_softmax(&net.logits(&x).unwrap()).unwrap();
        assert_eq!(odin.score, msp.score);
        assert_eq!(odin.orientation, msp.orientation);
    }
}

#[test]
fn stabilized_gram_agrees_with_the_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..40 {
        let (c, n) = (rng.random_range(1..6), rng.random_range(1..30));
        let f = Tensor::new(vec![c, n], (0..c * n).map(|_| rng.random_range(0.05..3.0)).collect()).unwrap();
        for p in 1..=MAX_GRAM_ORDER {
            let direct = gram_matrix_direct(&f, p).unwrap();
            let stable = gram_matrix_stable(&f, p).unwrap();
            for (a, b) in stable.data().iter().zip(direct.data()) {
                assert!((a - b).abs() <= 1e-6 * b.abs(), "p={p}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn stabilized_gram_gradients_are_finite_on_zero_activations() {
    // A dead channel and a column of zeros, as ReLU features often have.
    let f = Tensor::from_rows(&[vec![0.0, 0.0, 0.0, 0.0], vec![0.5, 0.0, 2.0, 1.0], vec![0.0, 0.0, 3.0, 0.0]])
        .unwrap();
    for p in 1..=MAX_GRAM_ORDER {
        let mut tape = Tape::new();
        let fv = tape.leaf(f.clone(), true);
        let g = gram_matrix_on(&mut tape, fv, p).unwrap();
        let s = tape.sum(g);
        tape.backward(s).unwrap();
        assert!(tape.value(g).is_finite(), "p={p}");
        assert!(tape.grad(fv).unwrap().is_finite(), "p={p}");
    }
}

#[test]
fn shared_covariance_is_recovered_from_gaussian_classes() {
    let dim = 4;
    // Σ = L Lᵀ with a fixed lower-triangular L.
    let l = [
        [1.0, 0.0, 0.0, 0.0],
        [0.5, 0.8, 0.0, 0.0],
        [-0.3, 0.2, 0.6, 0.0],
        [0.1, -0.4, 0.3, 1.2],
    ];
    let mut sigma = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            sigma[i * dim + j] = (0..dim).map(|k| l[i][k] * l[j][k]).sum();
        }
    }
    let means = [[0.0, 0.0, 0.0, 0.0], [5.0, -2.0, 1.0, 0.0], [-3.0, 4.0, 0.0, 2.0]];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 10_000;
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % means.len();
        let e: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let v: Vec<f64> = (0..dim)
            .map(|r| means[class][r] + (0..dim).map(|k| l[r][k] * e[k]).sum::<f64>())
            .collect();
        features.push(v);
        labels.push(class);
    }
    let stats = fit_mahalanobis_features(&features, &labels, means.len()).unwrap();
    assert_eq!(stats.lambda, 0.0, "well-conditioned data needs no ridge");
    let frob = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = stats.covariance.iter().zip(&sigma).map(|(a, b)| a - b).collect();
    let rel = frob(&diff) / frob(&sigma);
    assert!(rel <= 0.05, "relative covariance error {rel}");
    for (est, truth) in stats.means.iter().zip(&means) {
        for (a, b) in est.iter().zip(truth) {
            assert!((a - b).abs() < 0.1, "mean {a} vs {b}");
        }
    }
    // Distances to the true mean follow χ²(dim): average ≈ dim.
    let avg: f64 = features.iter().map(|f| stats.min_distance(f).0).sum::<f64>() / n as f64;
    assert!((avg - dim as f64).abs() < 0.3, "mean squared distance {avg}");
}
