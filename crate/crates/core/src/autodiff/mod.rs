//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! The primitive set is closed: everything the pipeline computes is composed
//! from the ops on [`Var`], and every primitive is covered by
//! [`check::primitive_suite`].

pub mod check;
mod tape;
mod tensor;

use thiserror::Error;

pub use check::{finite_diff_check, relative_error, GradCheckError, GradCheckReport};
pub use tape::{OpKind, Tape, Var};
pub use tensor::{logsumexp, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a rank-2 tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("variables belong to different tapes")]
    ForeignVar,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_by_identity() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]]));
        let i = tape.constant(Tensor::identity(2));
        assert_eq!(a.matmul(i).unwrap().value(), a.value());
    }

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.constant(v(&[0.0]));
        assert_eq!(x.sigmoid().value().data(), &[0.5]);
    }

    #[test]
    fn softmax_uniform_row() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 4, vec![1.0; 4]));
        assert_eq!(x.softmax_rows().unwrap().value().data(), &[0.25; 4]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn grad_of_sum() {
        let tape = Tape::new();
        let x = tape.param(v(&[1., 2., 3.]));
        tape.backward(x.sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1., 1., 1.]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.param(v(&[1., 2., 3.]));
        tape.backward(x.mul(x).unwrap().sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.param(v(&[1., 2.]));
        assert_eq!(
            tape.backward(x.exp()),
            Err(AutodiffError::NonScalarLoss(vec![2]))
        );
    }

    #[test]
    fn second_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.param(Tensor::matrix(2, 2, vec![0.3, -1.2, 0.7, 2.0]));
        let loss = x.sigmoid().mul(x).unwrap().softmax_rows().unwrap().log().sum();
        tape.backward(loss).unwrap();
        let once = x.grad().unwrap();
        tape.backward(loss).unwrap();
        let twice = x.grad().unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
        tape.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(v(&[1.0]));
        let c = tape.constant(v(&[2.0]));
        tape.backward(x.mul(c).unwrap().sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0]);
        assert!(c.grad().is_none());
    }

    #[test]
    fn finite_diff_square() {
        let report = finite_diff_check(&[Tensor::scalar(3.0)], 1e-5, |_, p| {
            Ok(p[0].mul(p[0])?.sum())
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{}", report.max_rel_error);
    }

    #[test]
    fn finite_diff_constant_function() {
        let report = finite_diff_check(&[Tensor::scalar(3.0)], 1e-5, |tape, _| {
            Ok(tape.constant(Tensor::scalar(4.0)))
        })
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert_eq!(report.params[0].analytic, 0.0);
    }

    #[test]
    fn finite_diff_reports_nan_index() {
        let err = finite_diff_check(&[v(&[1.0, 1e-6])], 1e-5, |_, p| Ok(p[0].log().sum()))
            .unwrap_err();
        match err {
            GradCheckError::NonFinite { param, index } => assert_eq!((param, index), (0, 1)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(finite_diff_check(&[v(&[1.0])], 0.0, |_, p| Ok(p[0].sum())).is_err());
    }

    #[test]
    fn random_pipeline_fragment_matches_finite_differences() {
        let mk = |seed: u64| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            Tensor::matrix(4, 4, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect())
        };
        let report = finite_diff_check(&[mk(1), mk(2), mk(3)], 1e-5, |_, p| {
            let h = p[0].matmul(p[1])?.sigmoid();
            let s = h.matmul(p[2])?.softmax_rows()?;
            let l = s.clamp(1e-12, 1.0).log();
            Ok(l.mul(h)?.logsumexp_cols()?.transpose()?.sum_cols()?.mean())
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        for seed in 0..5 {
            for (kind, report) in check::primitive_suite(seed, 1e-5, None).unwrap() {
                assert!(
                    report.max_rel_error < 1e-6,
                    "{} seed {seed}: {:?}",
                    kind.name(),
                    report
                );
            }
        }
    }

    #[test]
    fn injected_fault_is_detected_for_each_primitive() {
        for kind in OpKind::PRIMITIVES {
            let report = check::check_primitive(kind, 0, 1e-5, Some(kind)).unwrap();
            assert!(report.max_rel_error > 0.5, "{} fault undetected", kind.name());
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let tape = Tape::new();
            let x = tape.param(Tensor::matrix(3, 3, (0..9).map(|i| i as f64 * 0.37 - 1.0).collect()));
            let loss = x.matmul(x).unwrap().logsumexp_rows().unwrap().exp().sum();
            tape.backward(loss).unwrap();
            x.grad().unwrap()
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(xs in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let tape = Tape::new();
            let s = tape.constant(Tensor::matrix(3, 4, xs)).softmax_rows().unwrap().value();
            for r in 0..3 {
                let total: f64 = s.row(r).iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn logsumexp_cols_matches_transposed_rows(xs in proptest::collection::vec(-5.0f64..5.0, 12)) {
            let tape = Tape::new();
            let x = tape.constant(Tensor::matrix(3, 4, xs));
            let a = x.logsumexp_cols().unwrap().value();
            let b = x.transpose().unwrap().logsumexp_rows().unwrap().transpose().unwrap().value();
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }

        #[test]
        fn shifted_logsumexp_matches_broadcast_then_reduce(
            xs in proptest::collection::vec(-50.0f64..50.0, 12),
            r in proptest::collection::vec(-50.0f64..50.0, 4),
            c in proptest::collection::vec(-50.0f64..50.0, 3),
        ) {
            let tape = Tape::new();
            let x = tape.constant(Tensor::matrix(3, 4, xs));
            let r = tape.constant(Tensor::matrix(1, 4, r));
            let c = tape.constant(Tensor::matrix(3, 1, c));
            let a = x.logsumexp_rows_shifted(r).unwrap().value();
            let b = x.add_row_vec(r).unwrap().logsumexp_rows().unwrap().value();
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
            let a = x.logsumexp_cols_shifted(c).unwrap().value();
            let b = x.add_col_vec(c).unwrap().logsumexp_cols().unwrap().value();
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }
}
