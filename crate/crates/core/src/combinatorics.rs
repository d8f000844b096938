//! How likely random throws are to cover every latent spot, and how much
//! smaller a latent space is than the input space it encodes.
//!
//! Throwing `n` samples uniformly into `k` spots covers all of them with
//! probability `k!·S(n, k)/kⁿ`, where `S` is the Stirling number of the
//! second kind. That is computed exactly with big integers when the sizes
//! are modest, and otherwise through the independence approximation
//! `(1 − (1 − 1/k)ⁿ)ᵏ` evaluated in log space, which is what matters when the
//! sizes are astronomically large.

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

use crate::error::{Error, Result};

/// Largest spot count evaluated exactly.
pub const EXACT_MAX_SPOTS: u64 = 20;
/// Largest throw count evaluated exactly.
pub const EXACT_MAX_THROWS: u64 = 200;

/// `S(n, k)` via `S(n,k) = k·S(n−1,k) + S(n−1,k−1)`, `S(0,0) = 1`.
/// Returns zero for `k > n`.
pub fn stirling2(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k as usize;
    // row[j] holds S(i, j) for the current i.
    let mut row = vec![BigUint::zero(); k + 1];
    row[0] = BigUint::one();
    for i in 1..=n as usize {
        for j in (1..=k.min(i)).rev() {
            row[j] = &row[j] * j + &row[j - 1];
        }
        row[0] = BigUint::zero();
    }
    std::mem::take(&mut row[k])
}

pub fn factorial(n: u64) -> BigUint {
    (1..=n).fold(BigUint::one(), |acc, i| acc * i)
}

/// Spot count `|F|` and throw count `|Ω_out|`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpaceSizes {
    pub spots: BigUint,
    pub throws: BigUint,
}

impl SpaceSizes {
    pub fn new(spots: impl Into<BigUint>, throws: impl Into<BigUint>) -> Result<Self> {
        let (spots, throws) = (spots.into(), throws.into());
        if spots.is_zero() || throws.is_zero() {
            return Err(Error::InvalidArgument(format!(
                "spot and throw counts must be ≥ 1, got {spots} and {throws}"
            )));
        }
        Ok(Self { spots, throws })
    }

    fn small(&self) -> Option<(u64, u64)> {
        let (k, n) = (self.spots.to_u64()?, self.throws.to_u64()?);
        (k <= EXACT_MAX_SPOTS && n <= EXACT_MAX_THROWS).then_some((k, n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoverageMethod {
    Exact,
    /// Pigeonhole: fewer throws than spots.
    Impossible,
    Asymptotic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coverage {
    pub exact: Option<BigRational>,
    pub value: f64,
    /// Natural log of the probability; `-inf` when it is zero.
    pub ln_value: f64,
    pub method: CoverageMethod,
}

/// Exact `k!·S(n,k)/kⁿ` for machine-sized inputs.
pub fn coverage_exact(spots: u64, throws: u64) -> Result<BigRational> {
    if spots == 0 {
        return Err(Error::InvalidArgument("spot count must be ≥ 1".into()));
    }
    let num = factorial(spots) * stirling2(throws, spots);
    let den = BigUint::from(spots).pow(u32::try_from(throws).map_err(|_| {
        Error::InvalidArgument(format!("{throws} throws is too many for exact evaluation"))
    })?);
    Ok(BigRational::new(BigInt::from(num), BigInt::from(den)))
}

/// Natural log of a big integer, accurate to f64 precision.
fn ln_big(x: &BigUint) -> f64 {
    let bits = x.bits();
    if bits <= 1000 {
        return x.to_f64().expect("fits").ln();
    }
    let shift = bits - 64;
    let top = (x >> shift).to_f64().expect("64 bits");
    top.ln() + shift as f64 * std::f64::consts::LN_2
}

pub fn coverage_probability(sizes: &SpaceSizes) -> Coverage {
    if sizes.throws < sizes.spots {
        return Coverage {
            exact: Some(BigRational::zero()),
            value: 0.0,
            ln_value: f64::NEG_INFINITY,
            method: CoverageMethod::Impossible,
        };
    }
    if let Some((k, n)) = sizes.small() {
        let exact = coverage_exact(k, n).expect("validated sizes");
        let value = exact.to_f64().expect("probability is finite");
        return Coverage {
            exact: Some(exact),
            value,
            ln_value: value.ln(),
            method: CoverageMethod::Exact,
        };
    }
    // ln q = n·ln(1 − 1/k) is the log-probability that one spot stays empty.
    let ln_k = ln_big(&sizes.spots);
    let k = ln_k.exp();
    let ratio = (ln_big(&sizes.throws) - ln_k).exp();
    let ln_q = if k > 1e6 { -ratio * (1.0 + 0.5 / k) } else { ratio * k * (-1.0 / k).ln_1p() };
    // ln P = k·ln(1 − q) = −exp(ln k + ln(−ln(1 − q))), kept in log form
    // because k itself may overflow a float.
    let m = if ln_q < -30.0 { ln_q } else { (-(-ln_q.exp()).ln_1p()).ln() };
    let ln_value = if sizes.spots.is_one() { 0.0 } else { -(ln_k + m).exp() };
    Coverage {
        exact: None,
        value: ln_value.exp(),
        ln_value,
        method: CoverageMethod::Asymptotic,
    }
}

/// Counts onto maps among all `kⁿ` assignments of `n` throws to `k` spots.
pub fn coverage_brute_force(spots: u64, throws: u64) -> BigRational {
    let (k, n) = (spots as usize, throws as u32);
    let total = spots.pow(n);
    let mut onto = 0u64;
    let mut hit = vec![false; k];
    for code in 0..total {
        hit.iter_mut().for_each(|h| *h = false);
        let mut c = code;
        for _ in 0..n {
            hit[(c % spots) as usize] = true;
            c /= spots;
        }
        onto += u64::from(hit.iter().all(|&h| h));
    }
    BigRational::new(BigInt::from(onto), BigInt::from(total))
}

/// `log₂(latent space size / input space size)` for discrete spaces:
/// `latent_dims·bits_per_float − input_dims·bits_per_pixel`.
pub fn space_ratio_log2(input_dims: u64, bits_per_pixel: u64, latent_dims: u64, bits_per_float: u64) -> Result<i128> {
    if [input_dims, bits_per_pixel, latent_dims, bits_per_float].contains(&0) {
        return Err(Error::InvalidArgument("space sizes must be positive".into()));
    }
    Ok(i128::from(latent_dims) * i128::from(bits_per_float) - i128::from(input_dims) * i128::from(bits_per_pixel))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ratio(n: i64, d: i64) -> BigRational {
        BigRational::new(n.into(), d.into())
    }

    #[test]
    fn stirling_examples() {
        assert_eq!(stirling2(3, 2), BigUint::from(3u32));
        assert_eq!(stirling2(0, 0), BigUint::one());
        assert_eq!(stirling2(4, 5), BigUint::zero());
        assert_eq!(stirling2(10, 3), BigUint::from(9330u32));
        for n in 1..30 {
            assert_eq!(stirling2(n, 1), BigUint::one());
            assert_eq!(stirling2(n, n), BigUint::one());
            assert_eq!(stirling2(n, 0), BigUint::zero());
        }
    }

    #[test]
    fn coverage_examples() {
        let c = coverage_probability(&SpaceSizes::new(2u32, 3u32).unwrap());
        assert_eq!(c.exact, Some(ratio(3, 4)));
        assert_eq!(c.value, 0.75);
        let c = coverage_probability(&SpaceSizes::new(5u32, 4u32).unwrap());
        assert_eq!(c.method, CoverageMethod::Impossible);
        assert_eq!(c.value, 0.0);
        for n in 1..40u32 {
            assert_eq!(coverage_probability(&SpaceSizes::new(1u32, n).unwrap()).value, 1.0);
        }
        assert!(SpaceSizes::new(0u32, 3u32).is_err());
    }

    #[test]
    fn asymptotic_tracks_exact_at_the_boundary() {
        // Just outside the exact range, compare against the exact rational.
        let exact = coverage_exact(20, 201).unwrap().to_f64().unwrap();
        let approx = coverage_probability(&SpaceSizes::new(20u32, 201u32).unwrap());
        assert_eq!(approx.method, CoverageMethod::Asymptotic);
        assert!((approx.value - exact).abs() < 1e-4, "{} vs {exact}", approx.value);
    }

    #[test]
    fn astronomically_large_sizes_avoid_nan() {
        let spots = BigUint::one() << 16384u32;
        let few = coverage_probability(&SpaceSizes::new(spots.clone(), &spots * 2u32).unwrap());
        assert!(few.ln_value < -1e4 && few.value == 0.0);
        assert!(!few.ln_value.is_nan());
        let many = coverage_probability(&SpaceSizes::new(spots.clone(), &spots * 100_000u32).unwrap());
        assert!(many.ln_value <= 0.0 && many.value == 1.0);
    }

    #[test]
    fn space_ratio_examples() {
        assert_eq!(space_ratio_log2(224 * 224 * 3, 8, 512, 32).unwrap(), -1_187_840);
        assert_eq!(space_ratio_log2(100, 32, 100, 32).unwrap(), 0);
        let a = space_ratio_log2(784, 8, 64, 32).unwrap();
        let b = space_ratio_log2(784, 8, 128, 32).unwrap();
        assert_eq!(b - a, 32 * 64);
        assert!(space_ratio_log2(0, 8, 1, 32).is_err());
    }
}
