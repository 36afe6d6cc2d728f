//! Forward-value and gradient tests for the tensor ops.
//!
//! Expected values come from three sources: analytically forced cases,
//! hand-evaluated small cases, and independent oracles (the element-loop
//! matmul in `kernels::tests`, and central finite differences here).

use super::*;
use crate::error::Error;
use crate::rng::Rng;

fn assert_close(actual: &[f64], expect: &[f64], tol: f64) {
    assert_eq!(actual.len(), expect.len());
    for (i, (a, e)) in actual.iter().zip(expect).enumerate() {
        assert!(
            (a - e).abs() <= tol,
            "element {i}: {a} vs {e} (diff {})",
            (a - e).abs()
        );
    }
}

/// Check the analytic gradient of a scalar-valued graph against central
/// differences, for one leaf tensor.
fn gradcheck_one<F>(build: F, x0: &Tensor, tol: f64)
where
    F: Fn(&mut Tape, &Tensor) -> Tensor,
{
    let x = x0.with_requires_grad(true);
    let mut tape = Tape::new();
    let loss = build(&mut tape, &x);
    tape.backward(&loss).unwrap();
    let analytic = x.grad().expect("grad populated");

    let numeric = finite_diff_grad(
        |xt| {
            let mut t = Tape::no_grad();
            build(&mut t, xt).scalar()
        },
        x0,
        1e-5,
    )
    .unwrap();
    let err = max_rel_err(&analytic, numeric.values());
    assert!(err <= tol, "rel err {err} > {tol}");
}

#[test]
fn matmul_identity_passthrough() {
    let mut tape = Tape::no_grad();
    let eye = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    let m = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let out = matmul(&mut tape, &eye, &m).unwrap();
    assert_eq!(out.values(), m.values());
}

#[test]
fn matmul_projector_selects_rows() {
    let mut tape = Tape::no_grad();
    let proj = Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0], &[2, 2]).unwrap();
    let m = Tensor::from_vec(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]).unwrap();
    let out = matmul(&mut tape, &proj, &m).unwrap();
    assert_eq!(out.values(), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_random_against_element_loop_oracle() {
    let mut rng = Rng::new(2024);
    let a = Tensor::rand_uniform(&[3, 4], -2.0, 2.0, &mut rng);
    let b = Tensor::rand_uniform(&[4, 2], -2.0, 2.0, &mut rng);
    let mut tape = Tape::no_grad();
    let out = matmul(&mut tape, &a, &b).unwrap();
    // Independent oracle: out[i][j] = sum_k a[i][k] * b[k][j].
    let mut expect = vec![0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a.values()[i * 4 + k] * b.values()[k * 2 + j];
            }
            expect[i * 2 + j] = s;
        }
    }
    assert_close(out.values(), &expect, 1e-12);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::no_grad();
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    match matmul(&mut tape, &a, &b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_uniform_and_degenerate_rows() {
    let mut tape = Tape::no_grad();
    let x = Tensor::from_vec(vec![0.0; 4], &[4]).unwrap();
    let y = softmax_lastdim(&mut tape, &x).unwrap();
    assert_close(y.values(), &[0.25; 4], 1e-15);

    let single = Tensor::from_vec(vec![-173.5], &[1]).unwrap();
    let y = softmax_lastdim(&mut tape, &single).unwrap();
    assert_close(y.values(), &[1.0], 1e-15);
}

#[test]
fn softmax_log_inputs_exponentiate_and_normalize() {
    // softmax([ln 1, ln 2, ln 3]) = [1/6, 2/6, 3/6], by hand.
    let mut tape = Tape::no_grad();
    let x = Tensor::from_vec(vec![0.0, 2f64.ln(), 3f64.ln()], &[3]).unwrap();
    let y = softmax_lastdim(&mut tape, &x).unwrap();
    assert_close(y.values(), &[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0], 1e-12);
}

#[test]
fn softmax_rejects_nan() {
    let mut tape = Tape::no_grad();
    let x = Tensor::from_vec(vec![1.0, f64::NAN], &[2]).unwrap();
    assert!(matches!(
        softmax_lastdim(&mut tape, &x),
        Err(Error::Numeric { .. })
    ));
}

#[test]
fn layer_norm_edge_rows() {
    let mut tape = Tape::no_grad();
    let gamma = Tensor::from_vec(vec![1.0, 1.0, 1.0], &[3]).unwrap();
    let beta = Tensor::zeros(&[3]);

    // Constant row has zero variance: output collapses to beta (zeros).
    let x = Tensor::from_vec(vec![4.2, 4.2, 4.2], &[1, 3]).unwrap();
    let y = layer_norm(&mut tape, &x, &gamma, &beta, 1e-12).unwrap();
    assert_close(y.values(), &[0.0, 0.0, 0.0], 1e-6);

    // [1, -1] already has mean 0 and population variance 1.
    let g2 = Tensor::from_vec(vec![1.0, 1.0], &[2]).unwrap();
    let b2 = Tensor::zeros(&[2]);
    let x = Tensor::from_vec(vec![1.0, -1.0], &[1, 2]).unwrap();
    let y = layer_norm(&mut tape, &x, &g2, &b2, 1e-14).unwrap();
    assert_close(y.values(), &[1.0, -1.0], 1e-7);

    // gamma = 0 collapses every row to beta.
    let g0 = Tensor::zeros(&[2]);
    let b5 = Tensor::from_vec(vec![5.0, 5.0], &[2]).unwrap();
    let x = Tensor::from_vec(vec![0.3, 9.1, -2.0, 0.0], &[2, 2]).unwrap();
    let y = layer_norm(&mut tape, &x, &g0, &b5, 1e-5).unwrap();
    assert_close(y.values(), &[5.0; 4], 1e-15);
}

#[test]
fn layer_norm_length_mismatch_is_shape_error() {
    let mut tape = Tape::no_grad();
    let x = Tensor::zeros(&[2, 3]);
    let gamma = Tensor::zeros(&[2]);
    let beta = Tensor::zeros(&[3]);
    assert!(matches!(
        layer_norm(&mut tape, &x, &gamma, &beta, 1e-5),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn concat_and_pool_small_cases() {
    let mut tape = Tape::no_grad();
    let a = Tensor::from_vec((0..6).map(f64::from).collect(), &[2, 3]).unwrap();
    let b = Tensor::from_vec((6..18).map(f64::from).collect(), &[4, 3]).unwrap();
    let cat = concat_tokens(&mut tape, &[a.clone(), b.clone()]).unwrap();
    assert_eq!(cat.shape(), &[6, 3]);
    let expect: Vec<f64> = (0..18).map(f64::from).collect();
    assert_eq!(cat.values(), expect.as_slice());

    let x = Tensor::from_vec(vec![2.0, 4.0, 4.0, 8.0], &[2, 2]).unwrap();
    let pooled = mean_pool_tokens(&mut tape, &x).unwrap();
    assert_eq!(pooled.values(), &[3.0, 6.0]);

    assert_eq!(gelu(&mut tape, &Tensor::zeros(&[1])).values(), &[0.0]);
}

#[test]
fn concat_then_slice_roundtrips_bit_exactly() {
    let mut rng = Rng::new(31);
    let parts = [
        Tensor::rand_uniform(&[2, 5], -3.0, 3.0, &mut rng),
        Tensor::rand_uniform(&[7, 5], -3.0, 3.0, &mut rng),
        Tensor::rand_uniform(&[1, 5], -3.0, 3.0, &mut rng),
    ];
    let mut tape = Tape::no_grad();
    let cat = concat_tokens(&mut tape, &parts).unwrap();
    let mut start = 0;
    for part in &parts {
        let n = part.shape()[0];
        let back = slice_rows(&mut tape, &cat, start, n).unwrap();
        assert_eq!(back.values(), part.values());
        start += n;
    }
}

#[test]
fn cross_entropy_forced_cases() {
    let mut tape = Tape::no_grad();
    // Uniform logits over 7 classes: loss is exactly ln 7.
    let logits = Tensor::zeros(&[1, 7]);
    let loss = cross_entropy(&mut tape, &logits, &[3]).unwrap();
    assert!((loss.scalar().unwrap() - 7f64.ln()).abs() < 1e-12);
    assert!((loss.scalar().unwrap() - 1.945_910).abs() < 1e-6);

    // Huge margin toward the true class: loss tends to zero.
    let logits = Tensor::from_vec(vec![1e9, 0.0, 0.0], &[1, 3]).unwrap();
    let loss = cross_entropy(&mut tape, &logits, &[0]).unwrap();
    assert!(loss.scalar().unwrap().abs() < 1e-12);

    // Hand-evaluated: -log softmax([1,2])[0] = ln(e + e^2) - 1 = ln(1 + e).
    let logits = Tensor::from_vec(vec![1.0, 2.0], &[1, 2]).unwrap();
    let loss = cross_entropy(&mut tape, &logits, &[0]).unwrap();
    let expect = (1.0 + 1f64.exp()).ln();
    assert!((loss.scalar().unwrap() - expect).abs() < 1e-12);
    assert!((loss.scalar().unwrap() - 1.313_262).abs() < 1e-6);
}

#[test]
fn cross_entropy_rejects_out_of_range_label() {
    let mut tape = Tape::new();
    let logits = Tensor::zeros(&[1, 3]);
    assert!(matches!(
        cross_entropy(&mut tape, &logits, &[3]),
        Err(Error::Index { .. })
    ));
}

#[test]
fn backward_sum_gives_ones_and_quadratic_gives_x() {
    let x = Tensor::param(vec![1.5, -2.0, 0.25, 9.0], &[2, 2]).unwrap();
    let mut tape = Tape::new();
    let loss = sum_all(&mut tape, &x);
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 4]);

    // loss = sum(x * x) / 2  =>  grad = x
    let x = Tensor::param(vec![3.0, -1.0, 0.0], &[3]).unwrap();
    let mut tape = Tape::new();
    let sq = mul(&mut tape, &x, &x).unwrap();
    let half = scale(&mut tape, &sq, 0.5);
    let loss = sum_all(&mut tape, &half);
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), x.values());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    let mut tape = Tape::new();
    let y = scale(&mut tape, &x, 2.0);
    assert!(matches!(tape.backward(&y), Err(Error::Contract { .. })));
}

#[test]
fn backward_over_empty_tape_is_noop() {
    let loss = Tensor::param(vec![3.0], &[1]).unwrap();
    let tape = Tape::new();
    tape.backward(&loss).unwrap();
    assert_eq!(loss.grad().unwrap(), vec![1.0]);
}

#[test]
fn gradient_accumulates_across_uses() {
    // y = x + x  =>  dy/dx = 2
    let x = Tensor::param(vec![0.7, -0.1], &[2]).unwrap();
    let mut tape = Tape::new();
    let y = add(&mut tape, &x, &x).unwrap();
    let loss = sum_all(&mut tape, &y);
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
}

#[test]
fn finite_diff_on_simple_functions() {
    // f = sum: gradient is all ones.
    let x = Tensor::from_vec(vec![0.2, -0.9, 4.0], &[3]).unwrap();
    let g = finite_diff_grad(
        |t| Ok(t.values().iter().sum()),
        &x,
        1e-5,
    )
    .unwrap();
    assert_close(g.values(), &[1.0; 3], 1e-9);

    // f(x) = x^2 at 3: derivative 6 within 1e-8.
    let x = Tensor::from_vec(vec![3.0], &[1]).unwrap();
    let g = finite_diff_grad(|t| Ok(t.values()[0] * t.values()[0]), &x, 1e-5).unwrap();
    assert!((g.values()[0] - 6.0).abs() < 1e-8);
}

#[test]
fn backward_matches_finite_diff_through_matmul_softmax_ce_chain() {
    let mut rng = Rng::new(99);
    let x0 = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let w0 = Tensor::rand_uniform(&[4, 5], -0.7, 0.7, &mut rng);
    let labels = [1usize, 4, 0];

    // Gradient wrt the input.
    gradcheck_one(
        |tape, x| {
            let logits = matmul(tape, x, &w0).unwrap();
            cross_entropy(tape, &logits, &labels).unwrap()
        },
        &x0,
        1e-4,
    );
    // Gradient wrt the weight.
    gradcheck_one(
        |tape, w| {
            let logits = matmul(tape, &x0, w).unwrap();
            cross_entropy(tape, &logits, &labels).unwrap()
        },
        &w0,
        1e-4,
    );
}

#[test]
fn gradients_of_each_op_match_finite_differences() {
    let mut rng = Rng::new(4242);
    let tol = 1e-4;

    let x34 = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let other = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let w45 = Tensor::rand_uniform(&[4, 5], -1.0, 1.0, &mut rng);
    let b5 = Tensor::rand_uniform(&[5], -1.0, 1.0, &mut rng);
    let gamma = Tensor::rand_uniform(&[4], 0.5, 1.5, &mut rng);
    let beta = Tensor::rand_uniform(&[4], -0.5, 0.5, &mut rng);

    // Reductions to a scalar exercise each op's backward rule.
    gradcheck_one(
        |t, x| {
            let y = linear(t, x, &w45, &b5).unwrap();
            sum_of_squares(t, &y)
        },
        &x34,
        tol,
    );
    gradcheck_one(
        |t, w| {
            let y = linear(t, &x34, w, &b5).unwrap();
            sum_of_squares(t, &y)
        },
        &w45,
        tol,
    );
    gradcheck_one(
        |t, b| {
            let y = linear(t, &x34, &w45, b).unwrap();
            sum_of_squares(t, &y)
        },
        &b5,
        tol,
    );
    gradcheck_one(
        |t, x| {
            let y = gelu(t, x);
            sum_of_squares(t, &y)
        },
        &x34,
        tol,
    );
    gradcheck_one(
        |t, x| {
            let y = softmax_lastdim(t, x).unwrap();
            sum_of_squares(t, &y)
        },
        &x34,
        tol,
    );
    gradcheck_one(
        |t, x| {
            let y = layer_norm(t, x, &gamma, &beta, 1e-5).unwrap();
            sum_of_squares(t, &y)
        },
        &x34,
        tol,
    );
    gradcheck_one(
        |t, g| {
            let y = layer_norm(t, &x34, g, &beta, 1e-5).unwrap();
            sum_of_squares(t, &y)
        },
        &gamma,
        tol,
    );
    gradcheck_one(
        |t, x| {
            let y = add(t, x, &other).unwrap();
            let y = mul(t, &y, x).unwrap();
            sum_all(t, &y)
        },
        &x34,
        tol,
    );
    gradcheck_one(
        |t, x| {
            let y = transpose_last2(t, x).unwrap();
            sum_of_squares(t, &y)
        },
        &x34,
        tol,
    );
    gradcheck_one(
        |t, x| {
            let y = split_heads(t, x, 2).unwrap();
            let z = merge_heads(t, &y).unwrap();
            let z = mul(t, &z, &other).unwrap();
            sum_of_squares(t, &z)
        },
        &x34,
        tol,
    );
    gradcheck_one(
        |t, x| {
            let pooled = mean_pool_tokens(t, x).unwrap();
            sum_of_squares(t, &pooled)
        },
        &x34,
        tol,
    );
    gradcheck_one(
        |t, x| {
            let part = slice_rows(t, x, 1, 2).unwrap();
            sum_of_squares(t, &part)
        },
        &x34,
        tol,
    );
    gradcheck_one(
        |t, x| {
            let cat = concat_tokens(t, &[x.clone(), other.clone()]).unwrap();
            sum_of_squares(t, &cat)
        },
        &x34,
        tol,
    );

    // Batched matmul.
    let a = Tensor::rand_uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
    let b = Tensor::rand_uniform(&[2, 4, 3], -1.0, 1.0, &mut rng);
    gradcheck_one(
        |t, x| {
            let y = bmm(t, x, &b).unwrap();
            sum_of_squares(t, &y)
        },
        &a,
        tol,
    );
    gradcheck_one(
        |t, x| {
            let y = bmm(t, &a, x).unwrap();
            sum_of_squares(t, &y)
        },
        &b,
        tol,
    );

    // Spatial ops.
    let img = Tensor::rand_uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
    gradcheck_one(
        |t, x| {
            let cols = im2col(t, x, 3, 2, 1).unwrap();
            sum_of_squares(t, &cols)
        },
        &img,
        tol,
    );
    gradcheck_one(
        |t, x| {
            let pooled = avg_pool_chw(t, x, (2, 2)).unwrap();
            sum_of_squares(t, &pooled)
        },
        &img,
        tol,
    );
    gradcheck_one(
        |t, x| {
            let tokens = chw_to_tokens(t, x).unwrap();
            let back = tokens_to_chw(t, &tokens, (4, 4)).unwrap();
            let y = mul(t, &back, &img).unwrap();
            sum_all(t, &y)
        },
        &img,
        tol,
    );
}

/// sum(x^2), a convenient scalar reduction that makes every element's
/// gradient distinct from its neighbors'.
fn sum_of_squares(tape: &mut Tape, x: &Tensor) -> Tensor {
    let sq = mul(tape, x, x).unwrap();
    sum_all(tape, &sq)
}

#[test]
fn forward_is_deterministic() {
    let build = || {
        let mut rng = Rng::new(555);
        let a = Tensor::rand_uniform(&[5, 6], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[6, 5], -1.0, 1.0, &mut rng);
        let mut tape = Tape::no_grad();
        let y = matmul(&mut tape, &a, &b).unwrap();
        let y = gelu(&mut tape, &y);
        softmax_lastdim(&mut tape, &y).unwrap().values().to_vec()
    };
    assert_eq!(build(), build());
}

#[test]
fn avg_pool_hand_means() {
    // 1x4x4 pooled to 2x2: each output is the mean of its 2x2 cell.
    let x = Tensor::from_vec((1..=16).map(f64::from).collect(), &[1, 4, 4]).unwrap();
    let mut tape = Tape::no_grad();
    let y = avg_pool_chw(&mut tape, &x, (2, 2)).unwrap();
    // Cells: [1,2,5,6], [3,4,7,8], [9,10,13,14], [11,12,15,16].
    assert_eq!(y.values(), &[3.5, 5.5, 11.5, 13.5]);
}

#[test]
fn mac_counter_counts_only_matrix_products() {
    let mut tape = Tape::no_grad().with_mac_counting();
    let a = Tensor::zeros(&[3, 4]);
    let b = Tensor::zeros(&[4, 2]);
    let y = matmul(&mut tape, &a, &b).unwrap();
    assert_eq!(tape.macs(), 3 * 4 * 2);
    let _ = gelu(&mut tape, &y);
    let _ = softmax_lastdim(&mut tape, &y).unwrap();
    assert_eq!(tape.macs(), 3 * 4 * 2, "elementwise ops must not count");
    let w = Tensor::zeros(&[2, 5]);
    let bias = Tensor::zeros(&[5]);
    let _ = linear(&mut tape, &y, &w, &bias).unwrap();
    assert_eq!(tape.macs(), 3 * 4 * 2 + 3 * 2 * 5);
}

#[cfg(test)]
mod properties {
    use super::*;
    use crate::rng::Rng as SeedRng;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            rows in 1usize..5,
            cols in 1usize..8,
            seed in any::<u64>(),
        ) {
            let mut rng = SeedRng::new(seed);
            let x = Tensor::rand_uniform(&[rows, cols], -30.0, 30.0, &mut rng);
            let mut tape = Tape::no_grad();
            let y = softmax_lastdim(&mut tape, &x).unwrap();
            for row in y.values().chunks(cols) {
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
                prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn concat_slice_roundtrip_bit_exact(
            n1 in 1usize..6,
            n2 in 1usize..6,
            d in 1usize..6,
            seed in any::<u64>(),
        ) {
            let mut rng = SeedRng::new(seed);
            let a = Tensor::rand_uniform(&[n1, d], -5.0, 5.0, &mut rng);
            let b = Tensor::rand_uniform(&[n2, d], -5.0, 5.0, &mut rng);
            let mut tape = Tape::no_grad();
            let cat = concat_tokens(&mut tape, &[a.clone(), b.clone()]).unwrap();
            let a2 = slice_rows(&mut tape, &cat, 0, n1).unwrap();
            let b2 = slice_rows(&mut tape, &cat, n1, n2).unwrap();
            prop_assert_eq!(a.values(), a2.values());
            prop_assert_eq!(b.values(), b2.values());
        }
    }
}
