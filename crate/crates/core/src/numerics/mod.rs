//! Dense tensors and a reverse-mode tape.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, CoordinateCheck, GradCheckReport};
pub(crate) use tape::gemm;
pub use tape::{logistic, Nonlinearity, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut t = Tape::new();
        let i2 = t.constant(&Tensor::eye(2));
        let b = t.constant(&mat(&[&[1.5, -2.0], &[0.25, 4.0]]));
        let p = t.matmul(i2, b).unwrap();
        assert_eq!(t.value(p), t.value(b));

        let a = t.constant(&mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let c = t.constant(&mat(&[&[5.0], &[6.0]]));
        let p = t.matmul(a, c).unwrap();
        assert_eq!(t.shape(p), &[2, 1]);
        assert_eq!(t.value(p), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(&Tensor::zeros(&[2, 3]));
        let b = t.constant(&Tensor::zeros(&[2, 3]));
        match t.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_is_ones_times_b_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[4, 2]);
        let mut t = Tape::new();
        let av = t.param(&a);
        let bv = t.constant(&b);
        let p = t.matmul(av, bv).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        let g = t.grad(av).unwrap();
        for i in 0..3 {
            for k in 0..4 {
                let expect: f64 = (0..2).map(|j| b.at(k, j)).sum();
                assert!((g[i * 4 + k] - expect).abs() < 1e-12);
            }
        }
        let err = grad_check(
            |t, x| {
                let bv = t.constant(&b);
                let p = t.matmul(x, bv)?;
                Ok(t.sum(p))
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let z = t.constant(&Tensor::zeros(&[2, 2]));
        let e = t.exp(z);
        assert_eq!(t.value(e), &[1.0; 4]);

        let x = t.param(&Tensor::scalar(-3.0));
        let a = t.abs(x);
        assert_eq!(t.item(a), 3.0);
        t.backward(a).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[-1.0]);

        let mut t = Tape::new();
        let x = t.param(&Tensor::scalar(0.0));
        let a = t.abs(x);
        t.backward(a).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0]);

        let err = grad_check(|t, x| t.log(x), &Tensor::scalar(2.0), 1e-5).unwrap();
        assert!(err < 1e-9);
        let mut t = Tape::new();
        let x = t.param(&Tensor::scalar(2.0));
        let l = t.log(x).unwrap();
        t.backward(l).unwrap();
        assert!((t.grad(x).unwrap()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut t = Tape::new();
        let x = t.constant(&Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(t.log(x), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn binary_ops_reject_mismatched_shapes() {
        let mut t = Tape::new();
        let a = t.constant(&Tensor::zeros(&[2, 3]));
        let b = t.constant(&Tensor::zeros(&[3, 2]));
        assert!(t.add(a, b).is_err());
        let s = t.scalar(2.0);
        let m = t.mul(a, s).unwrap();
        assert_eq!(t.shape(m), &[2, 3]);
    }

    #[test]
    fn reductions() {
        let mut t = Tape::new();
        let i3 = t.constant(&Tensor::eye(3));
        let tr = t.trace(i3).unwrap();
        assert_eq!(t.item(tr), 3.0);
        let m = t.constant(&mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let s = t.sum(m);
        assert_eq!(t.item(s), 10.0);
        let rows = t.sum_axis(m, 1).unwrap();
        assert_eq!(t.value(rows), &[3.0, 7.0]);
        let cols = t.sum_axis(m, 0).unwrap();
        assert_eq!(t.value(cols), &[4.0, 6.0]);

        let nonsq = t.constant(&Tensor::zeros(&[2, 3]));
        assert!(matches!(t.trace(nonsq), Err(Error::Dimension { .. })));

        let mut t = Tape::new();
        let x = t.param(&Tensor::ones(&[4, 5]));
        let m = t.mean(x);
        t.backward(m).unwrap();
        assert!(t.grad(x).unwrap().iter().all(|&g| g == 1.0 / 20.0));
    }

    #[test]
    fn trace_backward_scatters_to_diagonal() {
        let mut t = Tape::new();
        let x = t.param(&Tensor::ones(&[3, 3]));
        let tr = t.trace(x).unwrap();
        t.backward(tr).unwrap();
        assert_eq!(t.grad(x).unwrap(), Tensor::eye(3).data());
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let u = t.constant(&Tensor::full(&[1, 4], 0.7));
        let s = t.softmax(u, 1).unwrap();
        assert!(t.value(s).iter().all(|&p| (p - 0.25).abs() < 1e-15));

        let l = t.constant(&Tensor::new(&[2], vec![0.0, 3f64.ln()]).unwrap());
        let s = t.softmax(l, 0).unwrap();
        assert!((t.value(s)[0] - 0.25).abs() < 1e-15);
        assert!((t.value(s)[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn nonlinearity_examples() {
        let mut t = Tape::new();
        let z = t.param(&Tensor::scalar(0.0));
        let l = t.logistic(z);
        assert_eq!(t.item(l), 0.5);
        let th = t.tanh(z);
        assert_eq!(t.item(th), 0.0);
        t.backward(th).unwrap();
        assert_eq!(t.grad(z).unwrap(), &[1.0]);

        let mut t = Tape::new();
        let m = t.param(&Tensor::scalar(-1.0));
        let r = t.relu(m);
        assert_eq!(t.item(r), 0.0);
        t.backward(r).unwrap();
        assert_eq!(t.grad(m).unwrap(), &[0.0]);
    }

    #[test]
    fn backward_basics_and_accumulation() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut t = Tape::new();
        let xv = t.param(&x);
        let s = t.sum(xv);
        t.backward(s).unwrap();
        assert_eq!(t.grad(xv).unwrap(), &[1.0; 3]);
        t.backward(s).unwrap();
        assert_eq!(t.grad(xv).unwrap(), &[2.0; 3]);
        t.zero_grad();
        assert!(t.grad(xv).is_none());

        let mut t = Tape::new();
        let xv = t.param(&x);
        let q = t.square(xv);
        let s = t.sum(q);
        t.backward(s).unwrap();
        assert_eq!(t.grad(xv).unwrap(), &[2.0, -4.0, 1.0]);

        assert!(matches!(t.backward(xv), Err(Error::Contract(_))));
    }

    fn mlp_loss(t: &mut Tape, v: &[Var]) -> crate::error::Result<Var> {
        let (x, w1, b1, w2, b2) = (v[0], v[1], v[2], v[3], v[4]);
        let h = t.matmul(x, w1)?;
        let h = t.add_row(h, b1)?;
        let h = t.tanh(h);
        let o = t.matmul(h, w2)?;
        let o = t.add_row(o, b2)?;
        let o = t.logistic(o);
        let q = t.square(o);
        Ok(t.mean(q))
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        for seed in [11, 12] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![
                randn(&mut rng, &[4, 5]),
                randn(&mut rng, &[5, 6]),
                randn(&mut rng, &[6]),
                randn(&mut rng, &[6, 3]),
                randn(&mut rng, &[3]),
            ];
            let report = grad_check_many(mlp_loss, &inputs, 1e-5).unwrap();
            assert!(report.max_relative_error() < 1e-4);
        }
    }

    #[test]
    fn linear_function_gradcheck_is_near_machine_precision() {
        let x = Tensor::new(&[4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let err = grad_check(|t, x| Ok(t.sum(x)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn structural_ops_roundtrip_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = vec![
            randn(&mut rng, &[3, 2]),
            randn(&mut rng, &[1, 4]),
            randn(&mut rng, &[3, 3]),
        ];
        let report = grad_check_many(
            |t, v| {
                let b = t.broadcast_rows(v[1], 3)?;
                let c = t.concat_cols(v[0], b)?;
                let s = t.slice_cols(c, 1, 4)?;
                let st = t.transpose(s)?;
                let p = t.matmul(st, v[2])?;
                let sm = t.softmax(p, 1)?;
                let w = t.sum_axis(sm, 0)?;
                let e = t.exp(w);
                let q = t.square(e);
                Ok(t.sum(q))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error() < 1e-6);
    }

    #[test]
    fn div_gradient() {
        let a = Tensor::new(&[3], vec![1.0, 2.0, -3.0]).unwrap();
        let b = Tensor::new(&[3], vec![0.5, 4.0, 2.5]).unwrap();
        let report = grad_check_many(
            |t, v| {
                let q = t.div(v[0], v[1])?;
                let q = t.square(q);
                Ok(t.sum(q))
            },
            &[a, b],
            1e-6,
        )
        .unwrap();
        assert!(report.max_relative_error() < 1e-7);
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let inputs: Vec<Tensor> = vec![
                randn(&mut rng, &[4, 5]),
                randn(&mut rng, &[5, 6]),
                randn(&mut rng, &[6]),
                randn(&mut rng, &[6, 3]),
                randn(&mut rng, &[3]),
            ];
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| t.param(x)).collect();
            let l = mlp_loss(&mut t, &vars).unwrap();
            t.item(l).to_bits()
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            logits in proptest::collection::vec(-30.0f64..30.0, 12)
        ) {
            let mut t = Tape::new();
            let x = t.constant(&Tensor::new(&[3, 4], logits).unwrap());
            let s = t.softmax(x, 1).unwrap();
            for row in t.value(s).chunks(4) {
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
            let s0 = t.softmax(x, 0).unwrap();
            for j in 0..4 {
                let col: f64 = (0..3).map(|i| t.value(s0)[i * 4 + j]).sum();
                prop_assert!((col - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn trace_is_cyclic(seed in any::<u64>(), n in 1usize..6, m in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = randn(&mut rng, &[n, m]);
            let b = randn(&mut rng, &[m, n]);
            let mut t = Tape::new();
            let (av, bv) = (t.constant(&a), t.constant(&b));
            let ab = t.matmul(av, bv).unwrap();
            let ba = t.matmul(bv, av).unwrap();
            let x = t.trace(ab).unwrap();
            let y = t.trace(ba).unwrap();
            let (x, y) = (t.item(x), t.item(y));
            prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(y.abs()).max(1.0));
        }

        #[test]
        fn random_compositions_pass_gradcheck(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![randn(&mut rng, &[3, 3]), randn(&mut rng, &[3, 3])];
            let report = grad_check_many(
                |t, v| {
                    let p = t.matmul(v[0], v[1])?;
                    let h = t.tanh(p);
                    let s = t.softmax(h, 1)?;
                    let e = t.exp(v[1]);
                    let m = t.mul(s, e)?;
                    let l = t.add_scalar(m, 1.0);
                    let l = t.log(l)?;
                    let g = t.logistic(v[0]);
                    let d = t.sub(l, g)?;
                    let r = t.trace(d)?;
                    let q = t.sum(m);
                    let z = t.mul(r, q)?;
                    Ok(t.scale(z, 0.5))
                },
                &inputs,
                1e-5,
            ).unwrap();
            prop_assert!(report.max_relative_error() <= 1e-4);
        }
    }
}
