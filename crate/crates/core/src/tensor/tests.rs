use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{finite_diff_check, finite_diff_check_many};
use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn grad_of_sum_of_squares() {
    let tape = Tape::new();
    let x = tape.var(t(&[3], &[1.0, 2.0, 3.0]));
    let y = x.mul(x).unwrap().sum().unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn stop_gradient_blocks_one_path() {
    let tape = Tape::new();
    let x = tape.var(t(&[2], &[1.0, 2.0]));
    let y = x.detach().mul(x).unwrap().sum().unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).data(), &[1.0, 2.0]);
}

#[test]
fn detach_is_bit_exact_identity() {
    let tape = Tape::new();
    let x = tape.var(t(&[3], &[0.1, -0.0, 1e-300]));
    let d = x.detach();
    assert_eq!(
        d.value().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        x.value().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert!(!d.requires_grad());
}

#[test]
fn non_participating_inputs_get_zeros() {
    let tape = Tape::new();
    let x = tape.var(t(&[2], &[1.0, 2.0]));
    let unused = tape.var(t(&[2, 2], &[1.0; 4]));
    let g = tape.backward(x.sum().unwrap()).unwrap();
    assert_eq!(g.wrt(unused).data(), &[0.0; 4]);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::<f64>::new();
    let x = tape.var(t(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
}

#[test]
fn non_finite_is_an_error() {
    let tape = Tape::<f64>::new();
    let x = tape.var(t(&[2], &[1.0, 2.0]));
    let z = tape.constant(t(&[2], &[0.0, 1.0]));
    assert!(matches!(x.div(z), Err(TensorError::NonFinite { op: "div" })));
}

#[test]
fn sigmoid_at_zero_has_quarter_slope() {
    let err = finite_diff_check(|x| x.sigmoid()?.sum(), &Tensor::<f64>::zeros([5]), 1e-4).unwrap();
    assert!(err < 1e-7, "{err}");
}

#[test]
fn softmax_then_dot_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random(&[4, 6], &mut rng);
    let x = random(&[4, 6], &mut rng);
    let err = finite_diff_check(
        |x| {
            let w = x.tape().constant(w.clone());
            x.softmax(1)?.mul(w)?.sum()
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn bilinear_offset_gradcheck_at_fractional_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grid = random(&[1, 4, 5, 3], &mut rng);
    let pos = t(&[2, 2], &[1.3, 2.6, 0.45, 3.2]);
    let weights = random(&[2, 3], &mut rng);
    let report = finite_diff_check_many(
        |v| {
            let w = v[0].tape().constant(weights.clone());
            Var::sample_bilinear(v[0], v[1], &[0, 0])?.mul(w)?.sum()
        },
        &[grid, pos],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn bilinear_kernel_expansion() {
    let tape = Tape::new();
    // 2x2 patch v00=1, v01=2, v10=3, v11=4 (one channel)
    let grid = tape.var(t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
    let pos = tape.var(t(&[3, 2], &[0.25, 0.75, 1.0, 0.0, 0.0, 0.5]));
    let out = Var::sample_bilinear(grid, pos, &[0, 0, 0]).unwrap().value();
    let expect = 0.1875 * 1.0 + 0.5625 * 2.0 + 0.0625 * 3.0 + 0.1875 * 4.0;
    assert!((out.data()[0] - expect).abs() < 1e-15);
    assert_eq!(out.data()[1], 3.0);
    assert_eq!(out.data()[2], 1.5);
}

#[test]
fn bilinear_clamps_outside_positions() {
    let tape = Tape::new();
    let grid = tape.var(t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
    let pos = tape.var(t(&[1, 2], &[-3.0, 9.0]));
    let s = Var::sample_bilinear(grid, pos, &[0]).unwrap();
    assert_eq!(s.value().data(), &[2.0]);
    let g = tape.backward(s.sum().unwrap()).unwrap();
    assert_eq!(g.wrt(pos).data(), &[0.0, 0.0]);
}

#[test]
fn matmul_transposes_match_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 5, 4], &mut rng);
    let tape = Tape::new();
    let out = tape.var(a.clone()).matmul_t(tape.var(b.clone()), false, true).unwrap().value();
    assert_eq!(out.shape(), &[2, 3, 5]);
    for bi in 0..2 {
        for i in 0..3 {
            for j in 0..5 {
                let s: f64 = (0..4).map(|k| a.data()[bi * 12 + i * 4 + k] * b.data()[bi * 20 + j * 4 + k]).sum();
                assert!((out.data()[bi * 15 + i * 5 + j] - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn every_matmul_layout_gradchecks() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
        let a = random(if ta { &[2, 4, 3] } else { &[2, 3, 4] }, &mut rng);
        let b = random(if tb { &[2, 5, 4] } else { &[2, 4, 5] }, &mut rng);
        let w = random(&[2, 3, 5], &mut rng);
        let r = finite_diff_check_many(
            |v| v[0].matmul_t(v[1], ta, tb)?.mul(v[0].tape().constant(w.clone()))?.sum(),
            &[a, b],
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{ta} {tb} {r:?}");
    }
}

#[test]
fn patches_produce_zero_padded_convolution_windows() {
    let tape = Tape::new();
    let x = tape.var(Tensor::from_fn([1, 2, 2, 1], |i| (i + 1) as f64));
    let p = x.patches3x3(Arc::new(vec![[0, 0, 0]])).unwrap().value();
    assert_eq!(p.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0]);
}

#[test]
fn custom_primitive_with_wrong_backward_is_caught() {
    let x = t(&[3], &[0.3, -0.2, 0.5]);
    fn bad<'t>(v: Var<'t, f64>) -> Result<Var<'t, f64>> {
        let val = v.value().map(|a| a * a);
        // deliberately reports d(x^2)/dx = x instead of 2x
        let xv = v.value();
        let back: BackwardFn<f64> =
            Box::new(move |g| vec![Tensor::from_fn(xv.shape().to_vec(), |i| g.data()[i] * xv.data()[i])]);
        v.tape().custom(&[v], val, back)?.sum()
    }
    let err = finite_diff_check(bad, &x, 1e-6).unwrap();
    assert!(err > 0.4, "{err}");
}

#[test]
fn giou_gradient_matches_differences() {
    let a = t(&[2, 4], &[0.5, 0.5, 0.3, 0.4, 0.2, 0.3, 0.2, 0.2]);
    let b = t(&[2, 4], &[0.55, 0.6, 0.35, 0.3, 0.6, 0.7, 0.1, 0.3]);
    let r = finite_diff_check_many(|v| v[0].giou(v[1])?.sum(), &[a, b], 1e-6).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn concat_narrow_permute_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random(&[2, 3, 2], &mut rng);
    let b = random(&[2, 1, 2], &mut rng);
    let w = random(&[2, 2, 4], &mut rng);
    let r = finite_diff_check_many(
        |v| {
            let c = concat(&[v[0], v[1]], 1)?; // [2,4,2]
            let p = c.permute(&[0, 2, 1])?; // [2,2,4]
            p.mul(v[0].tape().constant(w.clone()))?.narrow(2, 1, 3)?.sum()
        },
        &[a.clone(), b],
        1e-6,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-7, "{r:?}");
    let tape = Tape::new();
    let c = concat(&[tape.var(a.clone()), tape.var(a.clone())], 0).unwrap();
    assert_eq!(c.narrow(0, 2, 2).unwrap().value().data(), a.data());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 12), axis in 0usize..2) {
        let tape = Tape::new();
        let y = tape.var(t(&[3, 4], &vals)).softmax(axis).unwrap().value();
        let (outer, len) = if axis == 0 { (4, 3) } else { (3, 4) };
        for o in 0..outer {
            let s: f64 = (0..len).map(|j| if axis == 0 { y.data()[j * 4 + o] } else { y.data()[o * 4 + j] }).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
        prop_assert!(y.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn layer_norm_standardizes(vals in prop::collection::vec(-5.0f64..5.0, 16), shift in -100.0f64..100.0) {
        let spread = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 0.5);
        let tape = Tape::new();
        let x = tape.var(t(&[2, 8], &vals.iter().map(|v| v + shift).collect::<Vec<_>>()));
        let y = x
            .layer_norm(tape.constant(Tensor::full([8], 1.0)), tape.constant(Tensor::zeros([8])), 1e-6)
            .unwrap()
            .value();
        for r in 0..2 {
            let row = &y.data()[r * 8..(r + 1) * 8];
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-6);
            // group variance can be small; eps bounds the shortfall
            prop_assert!((var - 1.0).abs() < 1e-4, "var {}", var);
        }
    }

    #[test]
    fn broadcast_add_gradient_sums_over_repeats(rows in 1usize..5, cols in 1usize..5) {
        let tape = Tape::new();
        let x = tape.var(Tensor::<f64>::zeros([rows, cols]));
        let b = tape.var(Tensor::<f64>::zeros([cols]));
        let g = tape.backward(x.add(b).unwrap().sum().unwrap()).unwrap();
        prop_assert!(g.wrt(b).data().iter().all(|&v| v == rows as f64));
    }
}
