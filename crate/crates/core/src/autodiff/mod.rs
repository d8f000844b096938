//! Reverse-mode automatic differentiation.

pub mod gradcheck;
pub mod kernels;
mod tape;

pub use tape::{logsumexp_slice, softmax_slice, Tape, Var};

#[cfg(test)]
mod tests {
    use super::gradcheck::check_gradients;
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::eye(2));
        let m = t.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = t.constant(mat(&[&[1.0, 2.0]]));
        let b = t.constant(mat(&[&[3.0], &[4.0]]));
        let p = t.matmul(a, b).unwrap();
        assert_eq!(t.value(p).data(), &[11.0]);
    }

    #[test]
    fn matmul_gradient_example() {
        let mut t = Tape::new();
        let a = t.leaf(mat(&[&[1.0, 1.0]]), true);
        let b = t.constant(mat(&[&[2.0], &[5.0]]));
        let p = t.matmul(a, b).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[2.0, 5.0]);
        assert!(t.grad(b).is_none());

        let report = check_gradients(
            |t, v| {
                let p = t.matmul(v[0], v[1])?;
                Ok(t.sum(p))
            },
            &[mat(&[&[1.0, 1.0]]), mat(&[&[2.0], &[5.0]])],
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![2, 3]));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn conv2d_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(vec![1, 3, 3], 1.0));
        let k = t.constant(Tensor::full(vec![1, 1, 1, 1], 2.0));
        let y = t.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 3, 3]);
        assert!(t.value(y).data().iter().all(|&v| v == 2.0));

        let x = t.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = t.constant(Tensor::full(vec![1, 1, 2, 2], 1.0));
        let y = t.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 1, 1]);
        assert_eq!(t.value(y).data(), &[10.0]);
    }

    #[test]
    fn conv2d_output_extent_and_rejection() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(vec![2, 7, 5]));
        let k = t.constant(Tensor::zeros(vec![3, 2, 3, 3]));
        let y = t.conv2d(x, k, None, 2, 1).unwrap();
        // floor((7+2-3)/2)+1 = 4, floor((5+2-3)/2)+1 = 3
        assert_eq!(t.value(y).shape(), &[3, 4, 3]);

        let big = t.constant(Tensor::zeros(vec![1, 2, 6, 6]));
        assert!(t.conv2d(x, big, None, 1, 0).is_err());
        let x1 = t.constant(Tensor::zeros(vec![2, 3, 3]));
        let k5 = t.constant(Tensor::zeros(vec![1, 2, 6, 2]));
        assert!(t.conv2d(x1, k5, None, 1, 1).is_err());
        assert!(t.conv2d(x1, k5, None, 1, 2).is_ok());
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let x = t.constant(Tensor::from_vec(vec![3.0]));
        let s = t.square(x);
        assert_eq!(t.value(s).data(), &[9.0]);
        let x = t.constant(Tensor::from_vec(vec![1.5]));
        let e = t.exp(x);
        let l = t.log(e).unwrap();
        assert!((t.value(l).data()[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn log_rejects_non_positive_unless_stabilized() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(t.log(x).is_err());
        let y = t.log_eps(x, 1e-40).unwrap();
        assert!((t.value(y).data()[1] - (1e-40f64).ln()).abs() < 1e-9);
        let neg = t.constant(Tensor::from_vec(vec![-1.0]));
        assert!(t.log_eps(neg, 1e-40).is_err());
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![0.0, 1.0, -1.0]), true);
        let r = t.relu(x);
        let s = t.sum(r);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn broadcasting_is_limited_to_scalars() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 2]));
        let b = t.constant(Tensor::zeros(vec![4]));
        assert!(t.add(a, b).is_err());
        let s = t.constant(Tensor::scalar(3.0));
        let c = t.add(a, s).unwrap();
        assert_eq!(t.value(c).data(), &[3.0; 4]);
    }

    #[test]
    fn reduction_examples() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let sm = t.softmax(z).unwrap();
        assert_eq!(t.value(sm).data(), &[0.5, 0.5]);
        let lse = t.logsumexp(z).unwrap();
        assert!((t.scalar(lse) - std::f64::consts::LN_2).abs() < 1e-15);

        let x = t.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let p = t.avgpool2d(x, 2, 2).unwrap();
        assert_eq!(t.value(p).shape(), &[1, 1, 1]);
        assert_eq!(t.value(p).data(), &[4.0]);
    }

    #[test]
    fn reductions_reject_empty_axis_or_bad_window() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(vec![1, 2, 2]));
        assert!(t.avgpool2d(x, 3, 1).is_err());
        assert!(t.avgpool2d(x, 0, 1).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]), true);
        let sq = t.square(x);
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let c = t.constant(Tensor::from_vec(vec![4.0, 5.0]));
        let loss = t.sum(c);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_empty() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        assert!(t.backward(x).is_err());
        let mut empty = Tape::new();
        let mut other = Tape::new();
        let v = other.leaf(Tensor::scalar(1.0), true);
        assert!(empty.backward(v).is_err());
    }

    #[test]
    fn backward_is_repeatable_and_reset_clears() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![0.3, -0.7, 1.1]), true);
        let e = t.exp(x);
        let sm = t.softmax(e).unwrap();
        let sq = t.square(sm);
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        let first = t.grad(x).unwrap().clone();
        t.backward(loss).unwrap();
        assert_eq!(first.data(), t.grad(x).unwrap().data());
        t.reset();
        assert!(t.is_empty());
    }

    #[test]
    fn tape_is_topologically_ordered() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let y = t.square(x);
        let z = t.add(x, y).unwrap();
        let s = t.sum(z);
        for i in 0..t.len() {
            let v = [x, y, z, s].into_iter().find(|v| v.index() == i).unwrap();
            assert!(t.inputs_of(v).iter().all(|inp| inp.index() < i));
        }
    }

    #[test]
    fn instance_norm_normalizes_each_channel() {
        let mut t = Tape::new();
        let x = t.constant(
            Tensor::new(vec![2, 1, 3], vec![1.0, 2.0, 3.0, 10.0, 10.0, 40.0]).unwrap(),
        );
        let g = t.constant(Tensor::from_vec(vec![1.0, 1.0]));
        let b = t.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let y = t.instance_norm(x, g, b, 0.0).unwrap();
        for ch in t.value(y).data().chunks(3) {
            let mean: f64 = ch.iter().sum::<f64>() / 3.0;
            let var: f64 = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in prop::collection::vec(-50.0f64..50.0, 1..32), rows in 1usize..4) {
            let data: Vec<f64> = (0..rows).flat_map(|r| v.iter().map(move |x| x * (r as f64 + 1.0))).collect();
            let mut t = Tape::new();
            let x = t.constant(Tensor::new(vec![rows, v.len()], data).unwrap());
            let sm = t.softmax(x).unwrap();
            for row in t.value(sm).data().chunks(v.len()) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn logsumexp_bounds(v in prop::collection::vec(-700.0f64..700.0, 1..64)) {
            let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let l = logsumexp_slice(&v);
            prop_assert!(l >= m);
            prop_assert!(l <= m + (v.len() as f64).ln() + 1e-12);
        }
    }
}
