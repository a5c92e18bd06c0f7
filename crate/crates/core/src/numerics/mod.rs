//! Differentiable dense-tensor substrate.
//!
//! A small reverse-mode engine: eager values in an arena, operations
//! optionally recorded for a single backward sweep, and an independent
//! central-difference checker for gradient verification.

mod finite_diff;
mod tape;
mod tensor;

pub use finite_diff::finite_diff_check;
pub use tape::{log_sum_exp, sigmoid, softmax_into, top_t_indices, Tape, ValueId};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn tensor(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::inference();
        let i2 = tape.constant(&tensor(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(&tensor(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_zero_row_selection() {
        let mut tape = Tape::inference();
        let a = tape.constant(&tensor(1, 2, &[1.0, 0.0]));
        let b = tape.constant(&tensor(2, 1, &[0.0, 5.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();

        let mut tape = Tape::inference();
        let ta = tape.constant(&tensor(3, 4, &a));
        let tb = tape.constant(&tensor(4, 2, &b));
        let out = tape.matmul(ta, tb).unwrap();

        // scalar triple-loop oracle
        let mut expect = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a[i * 4 + k] * b[k * 2 + j];
                }
                expect[i * 2 + j] = acc;
            }
        }
        for (got, want) in tape.value(out).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::inference();
        let a = tape.constant(&tensor(2, 3, &[0.0; 6]));
        let b = tape.constant(&tensor(2, 2, &[0.0; 4]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("2x2"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::inference();
        let x = tape.constant(&tensor(1, 2, &[0.0, 0.0]));
        let s = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5]);

        let x = tape.constant(&tensor(1, 2, &[1000.0, 0.0]));
        let s = tape.softmax_rows(x).unwrap();
        let v = tape.value(s);
        assert!(v[0] > 1.0 - 1e-12 && v[1] < 1e-12);
        assert!(v.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn softmax_matches_exp_normalize_oracle() {
        let logits = [1.0, 2.0, 3.0];
        let mut tape = Tape::inference();
        let x = tape.constant(&tensor(1, 3, &logits));
        let s = tape.softmax_rows(x).unwrap();
        let denom: f64 = logits.iter().map(|v| v.exp()).sum();
        for (got, &l) in tape.value(s).iter().zip(&logits) {
            assert!((got - l.exp() / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_empty_axis() {
        let mut tape = Tape::inference();
        let x = tape.constant(&Tensor::from_vec(vec![1, 0], vec![]).unwrap());
        assert!(matches!(tape.softmax_rows(x), Err(Error::Shape(_))));
    }

    #[test]
    fn sigmoid_values() {
        let mut tape = Tape::inference();
        let x = tape.constant(&tensor(1, 4, &[0.0, 50.0, -50.0, 1.5]));
        let s = tape.sigmoid(x).unwrap();
        let v = tape.value(s);
        assert_eq!(v[0], 0.5);
        assert!(v[1] > 1.0 - 1e-12 && v[1].is_finite());
        assert!(v[2] < 1e-12 && v[2].is_finite());
        // closed form
        assert!((v[3] - 1.0 / (1.0 + (-1.5f64).exp())).abs() < 1e-15);
        assert!((v[3] - 0.8175744761936437).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::inference();
        let confident = tape.constant(&tensor(1, 2, &[10.0, -10.0]));
        let loss = tape.cross_entropy_mean(confident, &[0]).unwrap();
        assert!(tape.scalar_value(loss) <= 1e-4);

        let uniform = tape.constant(&tensor(1, 2, &[0.0, 0.0]));
        let loss = tape.cross_entropy_mean(uniform, &[1]).unwrap();
        assert!((tape.scalar_value(loss) - 2.0f64.ln()).abs() < 1e-12);

        // softmax-then-log oracle
        let logits = [1.0, 2.0, 3.0];
        let x = tape.constant(&tensor(1, 3, &logits));
        let loss = tape.cross_entropy_mean(x, &[0]).unwrap();
        let denom: f64 = logits.iter().map(|v| v.exp()).sum();
        let expect = -(logits[0].exp() / denom).ln();
        assert!((tape.scalar_value(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut tape = Tape::inference();
        let x = tape.constant(&tensor(1, 3, &[0.0, 0.0, 0.0]));
        assert!(matches!(
            tape.cross_entropy_mean(x, &[3]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn rmse_cases() {
        let mut tape = Tape::inference();
        let same = tape.constant(&tensor(1, 3, &[1.0, 2.0, 3.0]));
        let loss = tape.rmse(same, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(tape.scalar_value(loss), 0.0);

        let zero = tape.constant(&tensor(1, 2, &[0.0, 0.0]));
        let loss = tape.rmse(zero, &[3.0, 4.0]).unwrap();
        assert!((tape.scalar_value(loss) - 12.5f64.sqrt()).abs() < 1e-12);

        // two-pass oracle on random vectors
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p: Vec<f64> = (0..16).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let t: Vec<f64> = (0..16).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let pred = tape.constant(&tensor(1, 16, &p));
        let loss = tape.rmse(pred, &t).unwrap();
        let mut acc = 0.0;
        for i in 0..16 {
            acc += (p[i] - t[i]).powi(2);
        }
        let expect = (acc / 16.0).sqrt();
        assert!((tape.scalar_value(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn rmse_length_mismatch() {
        let mut tape = Tape::inference();
        let p = tape.constant(&tensor(1, 2, &[0.0, 0.0]));
        assert!(matches!(tape.rmse(p, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::recording();
        let w = tape.param(&tensor(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.0, 4.0]));
        // sum(W) via mean_rows then a weighted scalar reduction
        let mean = tape.mean_rows(w).unwrap(); // [1x3], each = col mean (rows=2)
        let ones = tape.constant(&tensor(3, 1, &[1.0, 1.0, 1.0]));
        let total = tape.matmul(mean, ones).unwrap(); // (1/2) sum
        let loss = tape.scale(total, 2.0).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_half_square_norm_is_identity() {
        let mut tape = Tape::recording();
        let data = [1.0, -2.0, 0.5, 3.0];
        let w = tape.param(&tensor(1, 4, &data));
        let sq = tape.mul(w, w).unwrap();
        let ones = tape.constant(&tensor(4, 1, &[1.0; 4]));
        let total = tape.matmul(sq, ones).unwrap();
        let loss = tape.scale(total, 0.5).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &data);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::recording();
        let w = tape.param(&tensor(1, 2, &[1.0, 2.0]));
        let y = tape.scale(w, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn tape_consumed_after_backward() {
        let mut tape = Tape::recording();
        let w = tape.param(&Tensor::scalar(2.0));
        let loss = tape.scale(w, 3.0).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.scale(w, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn top_t_mask_keeps_order_and_ties() {
        let mut tape = Tape::inference();
        let x = tape.constant(&tensor(1, 4, &[0.4, 0.3, 0.2, 0.1]));
        let (out, kept) = tape.top_t_mask(x, 2).unwrap();
        assert_eq!(tape.value(out), &[0.4, 0.3, 0.0, 0.0]);
        assert_eq!(kept, vec![0, 1]);

        let uniform = tape.constant(&tensor(1, 4, &[0.25; 4]));
        let (_, kept) = tape.top_t_mask(uniform, 1).unwrap();
        assert_eq!(kept, vec![0]);
    }

    /// Every differentiable op, checked against central differences on a
    /// composite expression that touches all of them.
    #[test]
    fn op_gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let n_params = 4 * 6;
        let at: Vec<f64> = (0..n_params).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let eval = |p: &[f64], tape: &mut Tape| -> crate::error::Result<(ValueId, ValueId)> {
            let w = tape.param(&tensor(4, 6, p));
            let x = tape.constant(&tensor(2, 4, &[0.3, -0.7, 0.2, 0.9, -0.1, 0.5, -0.4, 0.8]));
            let gamma = tape.constant(&tensor(1, 6, &[1.0, 0.9, 1.1, 1.0, 0.8, 1.2]));
            let beta = tape.constant(&tensor(1, 6, &[0.0, 0.1, -0.1, 0.0, 0.2, 0.0]));
            let bias = tape.constant(&tensor(1, 6, &[0.05, -0.05, 0.1, 0.0, 0.02, -0.2]));

            let h = tape.matmul(x, w)?; // [2x6]
            let h = tape.add_bias(h, bias)?;
            let h = tape.layer_norm(h, gamma, beta)?;
            let t = tape.tanh(h)?;
            let s = tape.sigmoid(h)?;
            let m = tape.mul(t, s)?;
            let a = tape.add(m, h)?;
            let sm = tape.softmax_rows(a)?;
            let left = tape.slice_cols(sm, 0, 3)?;
            let right = tape.slice_cols(sm, 3, 3)?;
            let cat = tape.concat_cols(&[right, left])?;
            let pooled = tape.mean_rows(cat)?; // [1x6]
            let att = tape.matmul_nt(cat, cat)?; // [2x2]
            let att = tape.softmax_rows(att)?;
            let mixed = tape.matmul(att, cat)?; // [2x6]
            let pooled2 = tape.mean_rows(mixed)?;
            let (gates, kept) = tape.top_t_mask(pooled, 3)?;
            let ren = tape.renormalize_kept(gates, &kept)?;
            let contrib = tape.scale_by_element(pooled2, ren, kept[0])?;
            let ce = tape.cross_entropy_mean(contrib, &[2])?;
            let cv = tape.cv_squared(pooled2)?;
            let r = tape.rmse(pooled, &[0.1, 0.2, 0.1, 0.3, 0.2, 0.1])?;
            let loss = tape.add_scalars(&[(ce, 1.0), (cv, 0.5), (r, 0.25)])?;
            Ok((loss, w))
        };

        let mut tape = Tape::recording();
        let (loss, w) = eval(&at, &mut tape).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(w).unwrap().to_vec();

        let f = |p: &[f64]| -> crate::error::Result<f64> {
            let mut t = Tape::inference();
            let (loss, _) = eval(p, &mut t)?;
            Ok(t.scalar_value(loss))
        };
        let err = finite_diff_check(f, &at, &analytic, 1e-6).unwrap();
        assert!(err <= 1e-6, "max relative error {err}");
    }

    #[test]
    fn embedding_gradient_scatters() {
        let mut tape = Tape::recording();
        let table = tape.param(&tensor(3, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let emb = tape.embed(table, &[1, 1, 0]).unwrap(); // [3x2]
        let pooled = tape.mean_rows(emb).unwrap();
        let ones = tape.constant(&tensor(2, 1, &[1.0, 1.0]));
        let loss = tape.matmul(pooled, ones).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(table).unwrap();
        // rows: 0 used once, 1 used twice, 2 unused; mean divides by 3
        let third = 1.0 / 3.0;
        assert!((g[0] - third).abs() < 1e-15 && (g[1] - third).abs() < 1e-15);
        assert!((g[2] - 2.0 * third).abs() < 1e-15 && (g[3] - 2.0 * third).abs() < 1e-15);
        assert_eq!(&g[4..], &[0.0, 0.0]);
    }

    #[test]
    fn embed_unknown_row_is_index_error() {
        let mut tape = Tape::inference();
        let table = tape.constant(&tensor(3, 2, &[0.0; 6]));
        assert!(matches!(tape.embed(table, &[5]), Err(Error::Index(_))));
    }

    #[test]
    fn softmax_ce_composite_finite_diff() {
        let at: Vec<f64> = vec![0.4, -0.3, 0.9, 0.1, -0.6, 0.2];
        let run = |p: &[f64], tape: &mut Tape| {
            let w = tape.param(&tensor(2, 3, p));
            let loss = tape.cross_entropy_mean(w, &[0, 2]).unwrap();
            (loss, w)
        };
        let mut tape = Tape::recording();
        let (loss, w) = run(&at, &mut tape);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(w).unwrap().to_vec();
        let err = finite_diff_check(
            |p| {
                let mut t = Tape::inference();
                let (loss, _) = run(p, &mut t);
                Ok(t.scalar_value(loss))
            },
            &at,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "error {err}");
    }

    #[test]
    fn deterministic_across_tapes_and_threads() {
        let run = || {
            let mut tape = Tape::inference();
            let x = tape.constant(&tensor(2, 3, &[0.1, 0.7, -0.3, 0.9, 0.2, -0.8]));
            let s = tape.softmax_rows(x).unwrap();
            let pooled = tape.mean_rows(s).unwrap();
            tape.value(pooled).to_vec()
        };
        let a = run();
        let handle = std::thread::spawn(run);
        let b = handle.join().unwrap();
        assert_eq!(a, b, "identical inputs must be bit-identical");
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(values in proptest::collection::vec(-30.0f64..30.0, 2..12)) {
            let mut tape = Tape::inference();
            let n = values.len();
            let x = tape.constant(&Tensor::matrix(1, n, values).unwrap());
            let s = tape.softmax_rows(x).unwrap();
            let sum: f64 = tape.value(s).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(tape.value(s).iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn softmax_is_permutation_equivariant(
            values in proptest::collection::vec(-20.0f64..20.0, 3..10),
            seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let n = values.len();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            perm.shuffle(&mut rng);

            let mut tape = Tape::inference();
            let x = tape.constant(&Tensor::matrix(1, n, values.clone()).unwrap());
            let sx = tape.softmax_rows(x).unwrap();
            let sx = tape.value(sx).to_vec();

            let permuted: Vec<f64> = perm.iter().map(|&i| values[i]).collect();
            let px = tape.constant(&Tensor::matrix(1, n, permuted).unwrap());
            let spx = tape.softmax_rows(px).unwrap();
            let spx = tape.value(spx).to_vec();

            for (j, &i) in perm.iter().enumerate() {
                prop_assert!((spx[j] - sx[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn cross_entropy_is_nonnegative(
            values in proptest::collection::vec(-15.0f64..15.0, 2..8),
            target_seed in 0usize..8,
        ) {
            let n = values.len();
            let target = target_seed % n;
            let mut tape = Tape::inference();
            let x = tape.constant(&Tensor::matrix(1, n, values).unwrap());
            let loss = tape.cross_entropy_mean(x, &[target]).unwrap();
            prop_assert!(tape.scalar_value(loss) >= -1e-12);
        }
    }
}
