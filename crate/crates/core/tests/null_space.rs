//! Null-space perturbations leave a rank-deficient linear encoder's output
//! unchanged while moving the input arbitrarily far.

use ood_core::attack::{null_space_attack, null_space_attack_with, null_space_basis, perturb_along};
use ood_core::nn::{zoo, Network};
use ood_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn encoder_weight() -> (Network, Tensor) {
    let net = Network::new(zoo::linear_encoder(3)).unwrap();
    let w = (*net.params()[0]).clone();
    assert_eq!(w.shape(), &[16, 256]);
    (net, w)
}

#[test]
fn basis_is_orthonormal_and_annihilated() {
    let (_, w) = encoder_weight();
    let basis = null_space_basis(&w).unwrap();
    assert_eq!(basis.len(), 256 - 16);
    for (i, a) in basis.iter().enumerate().step_by(17) {
        for (j, b) in basis.iter().enumerate().step_by(13) {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let expected = if i == j { 1.0 } else { 0.0 };
            assert!((d - expected).abs() < 1e-10, "<η{i}, η{j}> = {d}");
        }
        for row in w.data().chunks(256) {
            let d: f64 = row.iter().zip(a).map(|(x, y)| x * y).sum();
            assert!(d.abs() < 1e-10);
        }
    }
}

#[test]
fn latent_is_unchanged_for_many_random_inputs() {
    let (net, w) = encoder_weight();
    let basis = null_space_basis(&w).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let x = Tensor::from_vec((0..256).map(|_| rng.random_range(0.0..1.0)).collect());
        let magnitude = 10.0 * x.norm_l2();
        // Random directions within the null space, scaled to the magnitude.
        let raw: Vec<f64> = (0..basis.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let len = raw.iter().map(|c| c * c).sum::<f64>().sqrt();
        let coefficients: Vec<f64> = raw.iter().map(|c| c * magnitude / len).collect();
        let x_prime = perturb_along(&basis, &x, &coefficients).unwrap();
        let dx = x_prime.zip_map(&x, |a, b| a - b).unwrap();
        assert!(dx.norm_l2() >= 10.0 * x.norm_l2() * (1.0 - 1e-9), "perturbation is as large as requested");
        let z = net.encode(&x).unwrap();
        let z_prime = net.encode(&x_prime).unwrap();
        let dev = z_prime.zip_map(&z, |a, b| a - b).unwrap().norm_l2() / z.norm_l2();
        worst = worst.max(dev);
    }
    assert!(worst <= 1e-8, "worst relative latent deviation {worst}");
}

#[test]
fn equal_coefficient_attack_has_the_requested_size() {
    let (net, w) = encoder_weight();
    let x = Tensor::from_vec((0..256).map(|i| (i % 7) as f64 / 7.0).collect());
    let attack = null_space_attack(&w, &x, 25.0).unwrap();
    assert!((attack.magnitude() - 25.0).abs() < 1e-9);
    let z = net.encode(&x).unwrap();
    let dev = net.encode(&attack.x_prime).unwrap().zip_map(&z, |a, b| a - b).unwrap().norm_l2();
    assert!(dev <= 1e-8 * z.norm_l2());
}

#[test]
fn explicit_coefficients_must_match_the_null_dimension() {
    let (_, w) = encoder_weight();
    let x = Tensor::zeros(vec![256]);
    assert!(null_space_attack_with(&w, &x, &[1.0; 3]).is_err());
    assert!(null_space_attack(&w, &Tensor::zeros(vec![255]), 1.0).is_err());
    let full_rank = Tensor::eye(4);
    assert!(null_space_basis(&full_rank).is_err());
}
