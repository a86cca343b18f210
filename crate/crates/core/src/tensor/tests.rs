use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::rng;

fn random(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, &[]);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

#[test]
fn matmul_identity_and_hand_cases() {
    let mut g = Graph::<f64>::new();
    let i2 = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let x = g.constant(&[2, 2], vec![3.0, -1.0, 0.5, 7.0]).unwrap();
    let y = g.matmul(i2, x).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let a = g.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = g.constant(&[2, 1], vec![0.0, 1.0]).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[2, 1]);
    assert_eq!(g.value(c), &[2.0, 4.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let (av, bv) = (random(1, 12), random(2, 8));
    let mut g = Graph::<f64>::new();
    let a = g.constant(&[3, 4], av.clone()).unwrap();
    let b = g.constant(&[4, 2], bv.clone()).unwrap();
    let c = g.matmul(a, b).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut want = 0.0;
            for k in 0..4 {
                want += av[i * 4 + k] * bv[k * 2 + j];
            }
            assert!((g.value(c)[i * 2 + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    let msg = alloc::format!("{err}");
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, Error::ShapeMismatch { ref lhs, ref rhs, .. } if lhs == &vec![2, 3] && rhs == &vec![2, 3]));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(&[3, 2], vec![0.0, 0.0, 1000.0, 1000.0, 1.0, 0.0]).unwrap();
    let y = g.softmax_rows(x).unwrap();
    let v = g.value(y);
    assert_eq!(&v[..4], &[0.5, 0.5, 0.5, 0.5]);
    // e / (1 + e)
    assert!((v[4] - 0.731_058_578_630_004_9).abs() < 1e-4);
    assert!((v[5] - 0.268_941_421_369_995_1).abs() < 1e-4);
}

#[test]
fn softmax_rejects_nan_and_all_masked_rows() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(&[1, 2], vec![f64::NAN, 0.0]).unwrap();
    assert!(matches!(g.softmax_rows(x), Err(Error::NonFinite { .. })));
    let x = g.constant(&[1, 2], vec![f64::INFINITY, 0.0]).unwrap();
    assert!(g.softmax_rows(x).is_err());
    let x = g.constant(&[1, 2], vec![f64::NEG_INFINITY; 2]).unwrap();
    assert!(g.softmax_rows(x).is_err());
    let x = g.constant(&[1, 2], vec![f64::NEG_INFINITY, 3.0]).unwrap();
    let y = g.softmax_rows(x).unwrap();
    assert_eq!(g.value(y), &[0.0, 1.0]);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let gain = g.constant(&[2], vec![1.0, 1.0]).unwrap();
    let bias = g.constant(&[2], vec![0.0, 0.0]).unwrap();
    let x = g.constant(&[2, 2], vec![3.0, 3.0, 1.0, -1.0]).unwrap();
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    let v = g.value(y);
    assert_eq!(&v[..2], &[0.0, 0.0]);
    assert!((v[2] - 1.0).abs() < 1e-9 && (v[3] + 1.0).abs() < 1e-9);
}

#[test]
fn layer_norm_matches_two_pass_oracle() {
    let xv = random(5, 7);
    let gv = random(6, 7);
    let bv = random(7, 7);
    let mut g = Graph::<f64>::new();
    let x = g.constant(&[1, 7], xv.clone()).unwrap();
    let gain = g.constant(&[7], gv.clone()).unwrap();
    let bias = g.constant(&[7], bv.clone()).unwrap();
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    let mean = xv.iter().sum::<f64>() / 7.0;
    let var = xv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 7.0;
    for j in 0..7 {
        let want = (xv[j] - mean) / libm::sqrt(var + 1e-5) * gv[j] + bv[j];
        assert!((g.value(y)[j] - want).abs() < 1e-12);
    }
}

#[test]
fn gelu_examples() {
    assert_eq!(kernels::gelu(0.0f64), 0.0);
    assert!((kernels::gelu(10.0f64) - 10.0).abs() < 1e-6);
    // 0.5·(1 + tanh(√(2/π)·1.044715))
    let want = 0.5 * (1.0 + libm::tanh(libm::sqrt(2.0 / core::f64::consts::PI) * 1.044715));
    assert!((kernels::gelu(1.0f64) - want).abs() < 1e-12);
    assert!((kernels::gelu(1.0f64) - 0.8412).abs() < 1e-3);
}

#[test]
fn backward_simple_roots() {
    let xv = random(9, 6);
    let mut g = Graph::<f64>::new();
    let x = g.param(&[2, 3], xv.clone()).unwrap();
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

    let mut g = Graph::<f64>::new();
    let x = g.param(&[2, 3], xv.clone()).unwrap();
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    for (gr, v) in g.grad(x).unwrap().iter().zip(&xv) {
        assert!((gr - 2.0 * v).abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::<f64>::new();
    let x = g.param(&[2], vec![1.0, 2.0]).unwrap();
    assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
}

#[test]
fn fan_out_equals_duplicated_leaf() {
    let xv = random(11, 4);
    let wv = random(12, 4);
    // f(x) = sum(x ⊙ w) + sum(gelu(x)), x used twice.
    let mut g = Graph::<f64>::new();
    let x = g.param(&[4], xv.clone()).unwrap();
    let w = g.constant(&[4], wv.clone()).unwrap();
    let a = g.mul(x, w).unwrap();
    let b = g.gelu(x);
    let s = g.add(a, b).unwrap();
    let s = g.sum(s);
    g.backward(s).unwrap();
    let shared = g.grad(x).unwrap().to_vec();

    let mut g = Graph::<f64>::new();
    let x1 = g.param(&[4], xv.clone()).unwrap();
    let x2 = g.param(&[4], xv.clone()).unwrap();
    let w = g.constant(&[4], wv).unwrap();
    let a = g.mul(x1, w).unwrap();
    let b = g.gelu(x2);
    let s = g.add(a, b).unwrap();
    let s = g.sum(s);
    g.backward(s).unwrap();
    let split: Vec<f64> = g
        .grad(x1)
        .unwrap()
        .iter()
        .zip(g.grad(x2).unwrap())
        .map(|(a, b)| a + b)
        .collect();
    for (a, b) in shared.iter().zip(&split) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn backward_is_bitwise_repeatable() {
    let xv = random(13, 12);
    let mut g = Graph::<f64>::new();
    let x = g.param(&[3, 4], xv).unwrap();
    let y = g.softmax_rows(x).unwrap();
    let z = g.mul(y, x).unwrap();
    let s = g.sum(z);
    g.backward(s).unwrap();
    let first = g.grad(x).unwrap().to_vec();
    g.backward(s).unwrap();
    assert_eq!(first, g.grad(x).unwrap());
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(&[2], vec![1.0, 2.0]).unwrap();
    let d = g.detach(x);
    let y = g.mul(x, d).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
}

fn check(f: impl Fn(&mut Graph<f64>, Tensor) -> Result<Tensor>, shape: &[usize], seed: u64) -> GradCheck {
    let n = shape.iter().product();
    finite_diff_check(f, shape, &random(seed, n), 1e-5).unwrap()
}

#[test]
fn gradcheck_sum_of_squares_is_exact() {
    let r = check(
        |g, x| {
            let y = g.mul(x, x)?;
            Ok(g.sum(y))
        },
        &[5],
        20,
    );
    assert!(r.max_rel_error < 1e-8, "{r:?}");
}

/// Weights the output so every coordinate of the input receives a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Tensor, seed: u64) -> Result<Tensor> {
    let w = g.constant(g.shape(y).to_vec().as_slice(), random(seed, g.value(y).len()))?;
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn gradcheck_every_primitive() {
    let tol = 1e-4;
    let cases: Vec<(&str, Vec<usize>, Box<dyn Fn(&mut Graph<f64>, Tensor) -> Result<Tensor>>)> = vec![
        (
            "matmul lhs",
            vec![3, 4],
            Box::new(|g, x| {
                let b = g.constant(&[4, 2], random(31, 8))?;
                let y = g.matmul(x, b)?;
                weighted_sum(g, y, 40)
            }),
        ),
        (
            "matmul rhs",
            vec![4, 2],
            Box::new(|g, x| {
                let a = g.constant(&[3, 4], random(32, 12))?;
                let y = g.matmul(a, x)?;
                weighted_sum(g, y, 41)
            }),
        ),
        (
            "batched_matmul",
            vec![2, 3, 4],
            Box::new(|g, x| {
                let b = g.constant(&[2, 4, 2], random(33, 16))?;
                let y = g.batched_matmul(x, b, false)?;
                let z = g.batched_matmul(y, x, false);
                assert!(z.is_err());
                weighted_sum(g, y, 42)
            }),
        ),
        (
            "batched_matmul transposed (both sides)",
            vec![2, 3, 4],
            Box::new(|g, x| {
                let y = g.batched_matmul(x, x, true)?;
                weighted_sum(g, y, 43)
            }),
        ),
        (
            "batched_matmul rhs",
            vec![2, 4, 2],
            Box::new(|g, x| {
                let a = g.constant(&[2, 3, 4], random(34, 24))?;
                let y = g.batched_matmul(a, x, false)?;
                weighted_sum(g, y, 44)
            }),
        ),
        (
            "permute+reshape",
            vec![2, 3, 2, 2],
            Box::new(|g, x| {
                let y = g.permute(x, &[0, 2, 1, 3])?;
                let y = g.reshape(y, &[4, 6])?;
                weighted_sum(g, y, 45)
            }),
        ),
        (
            "sub+scale+add_bias",
            vec![3, 4],
            Box::new(|g, x| {
                let c = g.constant(&[3, 4], random(35, 12))?;
                let b = g.constant(&[4], random(36, 4))?;
                let y = g.sub(c, x)?;
                let y = g.scale(y, 1.7);
                let y = g.add_bias(y, b)?;
                let y = g.mul(y, y)?;
                Ok(g.sum(y))
            }),
        ),
        (
            "add_bias bias",
            vec![4],
            Box::new(|g, b| {
                let x = g.constant(&[3, 4], random(37, 12))?;
                let y = g.add_bias(x, b)?;
                let y = g.gelu(y);
                weighted_sum(g, y, 46)
            }),
        ),
        (
            "softmax",
            vec![3, 5],
            Box::new(|g, x| {
                let y = g.softmax_rows(x)?;
                weighted_sum(g, y, 47)
            }),
        ),
        (
            "masked softmax",
            vec![2, 4],
            Box::new(|g, x| {
                let y = g.mask_fill_neg_inf(x, vec![false, true, false, false, false, false, true, true])?;
                let y = g.softmax_rows(y)?;
                weighted_sum(g, y, 48)
            }),
        ),
        (
            "log_softmax",
            vec![3, 5],
            Box::new(|g, x| {
                let y = g.log_softmax_rows(x)?;
                weighted_sum(g, y, 49)
            }),
        ),
        (
            "gelu",
            vec![16],
            Box::new(|g, x| {
                let y = g.scale(x, 3.0);
                let y = g.gelu(y);
                weighted_sum(g, y, 50)
            }),
        ),
        (
            "layer_norm input",
            vec![3, 5],
            Box::new(|g, x| {
                let gain = g.constant(&[5], random(38, 5))?;
                let bias = g.constant(&[5], random(39, 5))?;
                let y = g.layer_norm(x, gain, bias, 1e-5)?;
                weighted_sum(g, y, 51)
            }),
        ),
        (
            "layer_norm gain",
            vec![5],
            Box::new(|g, gain| {
                let x = g.constant(&[3, 5], random(52, 15))?;
                let bias = g.constant(&[5], random(53, 5))?;
                let y = g.layer_norm(x, gain, bias, 1e-5)?;
                weighted_sum(g, y, 54)
            }),
        ),
        (
            "select_rows + gather",
            vec![4, 3],
            Box::new(|g, x| {
                let y = g.select_rows(x, &[2, 0, 2])?;
                let y = g.gelu(y);
                let z = g.gather(y, &[0, 4, 4, 8])?;
                weighted_sum(g, z, 55)
            }),
        ),
        (
            "kl_div q",
            vec![2, 3],
            Box::new(|g, x| {
                let p = g.constant(&[2, 3], vec![0.2, 0.3, 0.5, 0.0, 0.6, 0.4])?;
                let q = g.softmax_rows(x)?;
                g.kl_div(p, q)
            }),
        ),
        (
            "kl_div p",
            vec![2, 3],
            Box::new(|g, x| {
                let p = g.softmax_rows(x)?;
                let q = g.constant(&[2, 3], vec![0.3, 0.3, 0.4, 0.1, 0.6, 0.3])?;
                g.kl_div(p, q)
            }),
        ),
    ];
    for (i, (name, shape, f)) in cases.iter().enumerate() {
        let r = check(|g, x| f(g, x), shape, 100 + i as u64);
        assert!(r.passes(tol), "{name}: {r:?}");
    }
}

#[test]
fn gradcheck_tolerates_identically_zero_gradients() {
    // Every softmax row sums to one, so the true gradient vanishes and both
    // sides are pure round-off.
    let r = check(
        |g, x| {
            let y = g.softmax_rows(x)?;
            Ok(g.sum(y))
        },
        &[3, 5],
        61,
    );
    assert!(r.analytic.iter().chain(&r.numeric).all(|v| v.abs() < 1e-9), "{r:?}");
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn gradcheck_detects_a_broken_backward_rule() {
    // x ↦ x² with a VJP that forgets the factor 2.
    let r = check(
        |g, x| {
            let v: Vec<f64> = g.value(x).iter().map(|a| a * a).collect();
            let shape = g.shape(x).to_vec();
            let y = g.custom(
                &[x],
                &shape,
                v,
                Box::new(|inputs, _out, grad| vec![inputs[0].iter().zip(grad).map(|(a, gr)| a * gr).collect()]),
            )?;
            Ok(g.sum(y))
        },
        &[6],
        60,
    );
    assert!(r.max_rel_error > 1e-2, "{r:?}");
}

proptest! {
    #[test]
    fn softmax_rows_are_positive_distributions(values in proptest::collection::vec(-30.0f64..30.0, 1..64), width in 1usize..8) {
        let rows = values.len() / width;
        prop_assume!(rows >= 1);
        let v = values[..rows * width].to_vec();
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[rows, width], v).unwrap();
        let y = g.softmax_rows(x).unwrap();
        for row in g.value(y).chunks(width) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }
}
