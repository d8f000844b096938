//! Exact attack on a linear encoder `z = W x`.
//!
//! Any `η` with `W η = 0` is invisible to the encoder, so `x + Σ λᵢ ηᵢ` has
//! the same latent as `x` for arbitrary coefficients. The basis comes from
//! Gram–Schmidt (applied twice per vector) over the rows of `W` followed by
//! the standard basis; whatever survives orthogonalization against the row
//! space spans the null space.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const DEPENDENCE_TOL: f64 = 1e-10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthogonalizes `v` against `basis` and normalizes it; `None` if nothing
/// independent is left.
fn orthonormalize(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    let original = dot(&v, &v).sqrt();
    for _ in 0..2 {
        for b in basis {
            let c = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
    }
    let n = dot(&v, &v).sqrt();
    (n > DEPENDENCE_TOL * original.max(1.0)).then(|| v.into_iter().map(|x| x / n).collect())
}

/// Orthonormal basis of `{η : W η = 0}` for `W` of shape `[K, M]`.
pub fn null_space_basis(w: &Tensor) -> Result<Vec<Vec<f64>>> {
    let [k, m] = w.shape() else {
        return Err(Error::Shape(format!("W must be a matrix, got {:?}", w.shape())));
    };
    let (k, m) = (*k, *m);
    if !w.is_finite() {
        return Err(Error::NonFinite("W contains NaN or inf".into()));
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    for r in w.data().chunks(m) {
        if let Some(q) = orthonormalize(r.to_vec(), &rows) {
            rows.push(q);
        }
    }
    let rank = rows.len();
    let mut all = rows;
    for j in 0..m {
        if all.len() == m {
            break;
        }
        let mut e = vec![0.0; m];
        e[j] = 1.0;
        if let Some(q) = orthonormalize(e, &all) {
            all.push(q);
        }
    }
    let null = all.split_off(rank);
    if null.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "W of shape [{k}, {m}] has full column rank; its null space is trivial"
        )));
    }
    Ok(null)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NullSpaceAttack {
    pub x_prime: Tensor,
    pub basis: Vec<Vec<f64>>,
    pub coefficients: Vec<f64>,
}

impl NullSpaceAttack {
    /// `‖Σ λᵢ ηᵢ‖₂`, which equals `‖λ‖₂` for an orthonormal basis.
    pub fn magnitude(&self) -> f64 {
        dot(&self.coefficients, &self.coefficients).sqrt()
    }
}

fn check_x(w: &Tensor, x: &Tensor) -> Result<()> {
    if x.rank() != 1 || w.shape().get(1) != Some(&x.len()) {
        return Err(Error::Shape(format!("W {:?} cannot act on x {:?}", w.shape(), x.shape())));
    }
    Ok(())
}

/// `x' = x + Σ λᵢ ηᵢ` with explicit coefficients, one per basis vector.
pub fn null_space_attack_with(w: &Tensor, x: &Tensor, coefficients: &[f64]) -> Result<NullSpaceAttack> {
    check_x(w, x)?;
    let basis = null_space_basis(w)?;
    let x_prime = perturb_along(&basis, x, coefficients)?;
    Ok(NullSpaceAttack {
        x_prime,
        basis,
        coefficients: coefficients.to_vec(),
    })
}

/// `x + Σ λᵢ ηᵢ` for a precomputed basis, so one basis can serve many inputs.
pub fn perturb_along(basis: &[Vec<f64>], x: &Tensor, coefficients: &[f64]) -> Result<Tensor> {
    if coefficients.len() != basis.len() {
        return Err(Error::InvalidArgument(format!(
            "{} coefficients for a {}-dimensional null space",
            coefficients.len(),
            basis.len()
        )));
    }
    if let Some(eta) = basis.iter().find(|eta| eta.len() != x.len()) {
        return Err(Error::Shape(format!("basis vector of length {} for x {:?}", eta.len(), x.shape())));
    }
    let mut out = x.data().to_vec();
    for (lambda, eta) in coefficients.iter().zip(basis) {
        out.iter_mut().zip(eta).for_each(|(o, e)| *o += lambda * e);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `x' = x + Σ λᵢ ηᵢ` with equal positive coefficients of total L2 size
/// `magnitude`.
pub fn null_space_attack(w: &Tensor, x: &Tensor, magnitude: f64) -> Result<NullSpaceAttack> {
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(Error::InvalidArgument(format!("magnitude must be finite and ≥ 0, got {magnitude}")));
    }
    check_x(w, x)?;
    let d = null_space_basis(w)?.len();
    let lambda = magnitude / (d as f64).sqrt();
    null_space_attack_with(w, x, &vec![lambda; d])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_row_example() {
        let w = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let a = null_space_attack(&w, &Tensor::from_vec(vec![5.0, 7.0]), 100.0).unwrap();
        assert_eq!(a.x_prime.data(), &[5.0, 107.0]);
        assert_eq!(a.magnitude(), 100.0);
    }

    #[test]
    fn zero_magnitude_is_identity() {
        let w = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let x = Tensor::from_vec(vec![0.1, 0.2, 0.3]);
        assert_eq!(null_space_attack(&w, &x, 0.0).unwrap().x_prime, x);
    }

    #[test]
    fn square_full_rank_is_rejected() {
        let err = null_space_attack(&Tensor::eye(3), &Tensor::from_vec(vec![1.0; 3]), 1.0).unwrap_err();
        assert!(err.to_string().contains("trivial"));
    }

    #[test]
    fn rank_deficient_w_enlarges_the_basis() {
        let w = Tensor::from_rows(&[vec![1.0, 1.0, 0.0], vec![2.0, 2.0, 0.0]]).unwrap();
        assert_eq!(null_space_basis(&w).unwrap().len(), 2);
    }
}
