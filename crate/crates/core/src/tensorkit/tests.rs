use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t32(shape: &[usize], data: &[f32]) -> Tensor<f32> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-1.0..1.0)))
}

/// Nested-loop direct convolution, independent of the im2col path.
fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for ni in 0..n {
        for oi in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for u in 0..k {
                            for v in 0..k {
                                let y = (i * stride + u) as isize - pad as isize;
                                let xx = (j * stride + v) as isize - pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    acc += x.at(&[ni, ci, y as usize, xx as usize]) * w.at(&[oi, ci, u, v]);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (vec![n, o, ho, wo], out)
}

fn run_conv(x: &Tensor<f32>, w: &Tensor<f32>, b: &Tensor<f32>, s: usize, p: usize) -> Tensor<f32> {
    let mut tape = Tape::new();
    let (x, w, b) = (
        tape.constant(x.clone()),
        tape.constant(w.clone()),
        tape.constant(b.clone()),
    );
    let y = tape.conv2d(x, w, b, s, p).unwrap();
    tape.value(y).clone()
}

#[test]
fn conv2d_scalar_kernel_scales() {
    let y = run_conv(
        &t32(&[1, 1, 2, 2], &[1., 2., 3., 4.]),
        &t32(&[1, 1, 1, 1], &[2.]),
        &t32(&[1], &[0.]),
        1,
        0,
    );
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), &[2., 4., 6., 8.]);
}

#[test]
fn conv2d_constant_sums() {
    let y = run_conv(
        &Tensor::full(&[1, 1, 3, 3], 1.0),
        &Tensor::full(&[1, 1, 2, 2], 1.0),
        &t32(&[1], &[0.]),
        1,
        0,
    );
    assert_eq!(y.data(), &[4.; 4]);
}

#[test]
fn conv2d_matches_direct_loop_with_stride_and_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random::<f32>(&mut rng, &[1, 2, 8, 8]);
    let w = random::<f32>(&mut rng, &[3, 2, 3, 3]);
    let b = random::<f32>(&mut rng, &[3]);
    let y = run_conv(&x, &w, &b, 2, 1);
    let (shape, reference) = conv_reference(&x.cast(), &w.cast(), &b.cast::<f64>().to_vec(), 2, 1);
    assert_eq!(y.shape(), &shape[..]);
    for (a, r) in y.data().iter().zip(&reference) {
        assert!((*a as f64 - r).abs() < 1e-5);
    }
}

#[test]
fn conv2d_agrees_with_direct_loop_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let n = rng.gen_range(1..3);
        let c = rng.gen_range(1..4);
        let o = rng.gen_range(1..4);
        let k = rng.gen_range(1..6);
        let s = rng.gen_range(1..4);
        let p = rng.gen_range(0..3);
        let h = rng.gen_range(k.max(1)..12);
        let x = random::<f32>(&mut rng, &[n, c, h, h]);
        let w = random::<f32>(&mut rng, &[o, c, k, k]);
        let b = random::<f32>(&mut rng, &[o]);
        let y = run_conv(&x, &w, &b, s, p);
        let (shape, reference) = conv_reference(&x.cast(), &w.cast(), &b.cast::<f64>().to_vec(), s, p);
        assert_eq!(y.shape(), &shape[..]);
        let worst = y
            .data()
            .iter()
            .zip(&reference)
            .map(|(a, r)| (*a as f64 - r).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-4, "n{n} c{c} o{o} k{k} s{s} p{p} h{h}: {worst}");
    }
}

#[test]
fn conv2d_rejects_bad_shapes() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(matches!(tape.conv2d(x, w, b, 1, 0), Err(Error::Dimension(_))));
    let w = tape.constant(Tensor::zeros(&[1, 2, 7, 7]));
    assert!(matches!(tape.conv2d(x, w, b, 1, 1), Err(Error::Geometry(_))));
}

fn run_matmul(a: &Tensor<f32>, b: &Tensor<f32>) -> crate::error::Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(a, b)?;
    Ok(tape.value(c).clone())
}

#[test]
fn matmul_examples() {
    let eye = t32(&[2, 2], &[1., 0., 0., 1.]);
    let b = t32(&[2, 2], &[5., 6., 7., 8.]);
    assert_eq!(run_matmul(&eye, &b).unwrap().data(), &[5., 6., 7., 8.]);
    let a = t32(&[2, 2], &[1., 2., 3., 4.]);
    let perm = t32(&[2, 2], &[0., 1., 1., 0.]);
    assert_eq!(run_matmul(&a, &perm).unwrap().data(), &[2., 1., 4., 3.]);
    assert!(matches!(
        run_matmul(&t32(&[2, 3], &[0.; 6]), &b),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random::<f32>(&mut rng, &[7, 5]);
    let b = random::<f32>(&mut rng, &[5, 3]);
    let c = run_matmul(&a, &b).unwrap();
    for i in 0..7 {
        for j in 0..3 {
            let r: f64 = (0..5).map(|k| a.at(&[i, k]) as f64 * b.at(&[k, j]) as f64).sum();
            assert!((c.at(&[i, j]) as f64 - r).abs() < 1e-5);
        }
    }
    // batched form: each slice is an independent product
    let a = random::<f32>(&mut rng, &[2, 3, 4, 5]);
    let b = random::<f32>(&mut rng, &[2, 3, 5, 2]);
    let c = run_matmul(&a, &b).unwrap();
    assert_eq!(c.shape(), &[2, 3, 4, 2]);
    for p in 0..2 {
        for q in 0..3 {
            for i in 0..4 {
                for j in 0..2 {
                    let r: f64 = (0..5)
                        .map(|k| a.at(&[p, q, i, k]) as f64 * b.at(&[p, q, k, j]) as f64)
                        .sum();
                    assert!((c.at(&[p, q, i, j]) as f64 - r).abs() < 1e-5);
                }
            }
        }
    }
}

fn run_softmax(x: &[f32]) -> Vec<f32> {
    let mut tape = Tape::new();
    let v = tape.constant(t32(&[x.len()], x));
    let y = tape.softmax(v, 0).unwrap();
    tape.value(y).to_vec()
}

#[test]
fn softmax_examples() {
    assert_eq!(run_softmax(&[0., 0.]), vec![0.5, 0.5]);
    let y = run_softmax(&[1., 2., 3.]);
    for (a, b) in y.iter().zip([0.09003, 0.24473, 0.66524]) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-5);
    }
    let shifted = run_softmax(&[101., 102., 103.]);
    for (a, b) in y.iter().zip(&shifted) {
        assert_abs_diff_eq!(*a, *b, epsilon = 1e-7);
    }
    let mut tape = Tape::<f32>::new();
    let v = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(tape.softmax(v, 2).is_err());
}

fn run_layernorm(row: &[f32], eps: f64) -> Vec<f32> {
    let d = row.len();
    let mut tape = Tape::new();
    let x = tape.constant(t32(&[1, d], row));
    let g = tape.constant(Tensor::full(&[d], 1.0));
    let b = tape.constant(Tensor::zeros(&[d]));
    let y = tape.layernorm(x, g, b, eps).unwrap();
    tape.value(y).to_vec()
}

#[test]
fn layernorm_examples() {
    assert_eq!(run_layernorm(&[3., 3., 3.], 1e-5), vec![0.0; 3]);
    let y = run_layernorm(&[1., -1.], 1e-12);
    assert_abs_diff_eq!(y[0], 1.0, epsilon = 1e-6);
    assert_abs_diff_eq!(y[1], -1.0, epsilon = 1e-6);
    let y = run_layernorm(&[1., 2., 3., 4.], 1e-5);
    for (a, b) in y.iter().zip([-1.34160, -0.44720, 0.44720, 1.34160]) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-4);
    }
}

fn run_gelu(x: f32) -> f32 {
    let mut tape = Tape::new();
    let v = tape.constant(t32(&[1], &[x]));
    let y = tape.gelu(v);
    tape.value(y).data()[0]
}

#[test]
fn gelu_examples() {
    assert_eq!(run_gelu(0.0), 0.0);
    assert_abs_diff_eq!(run_gelu(10.0), 10.0, epsilon = 1e-4);
    assert_abs_diff_eq!(run_gelu(1.0), 0.84119, epsilon = 1e-4);
}

fn run_ce(logits: &Tensor<f32>, labels: &[usize]) -> crate::error::Result<f32> {
    let mut tape = Tape::new();
    let v = tape.constant(logits.clone());
    let l = tape.cross_entropy(v, labels)?;
    Ok(tape.value(l).data()[0])
}

#[test]
fn cross_entropy_examples() {
    let uniform = Tensor::zeros(&[3, 9]);
    assert_abs_diff_eq!(run_ce(&uniform, &[0, 4, 8]).unwrap(), 9f32.ln(), epsilon = 1e-6);
    let mut margin = vec![0.0; 9];
    margin[3] = 50.0;
    assert!(run_ce(&t32(&[1, 9], &margin), &[3]).unwrap() < 1e-6);
    assert_abs_diff_eq!(
        run_ce(&t32(&[1, 3], &[1., 2., 3.]), &[2]).unwrap(),
        0.40761,
        epsilon = 1e-5
    );
    assert!(matches!(run_ce(&uniform, &[0, 9, 1]), Err(Error::Index(_))));
}

#[test]
fn backward_sum_of_squares_and_mean() {
    let x = t32(&[4], &[1., -2., 0.5, 3.]);
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let sq = tape.mul(v, v).unwrap();
    let f = tape.sum(sq);
    tape.backward(f).unwrap();
    let g = tape.grad(v).unwrap();
    for (gi, xi) in g.data().iter().zip(x.data()) {
        assert_eq!(*gi, 2.0 * xi);
    }

    let mut tape = Tape::new();
    let v = tape.param(x);
    let f = tape.mean(v);
    tape.backward(f).unwrap();
    assert_eq!(tape.grad(v).unwrap().data(), &[0.25; 4]);
}

#[test]
fn backward_contract_errors() {
    let mut tape = Tape::<f32>::new();
    let v = tape.param(Tensor::full(&[3], 1.0));
    assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    let s = tape.sum(v);
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::Contract(_))));

    let mut tape = Tape::<f32>::new();
    let c = tape.constant(Tensor::full(&[3], 1.0));
    let s = tape.sum(c);
    assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
}

fn opts() -> GradCheckOptions {
    GradCheckOptions {
        eps: 1e-3,
        tol: 1e-3,
        max_per_param: None,
        seed: 0,
    }
}

fn named(ts: Vec<Tensor<f64>>) -> Vec<(String, Tensor<f64>)> {
    ts.into_iter().enumerate().map(|(i, t)| (format!("p{i}"), t)).collect()
}

fn assert_all_pass(reports: &[ParamCheck]) {
    for r in reports {
        assert!(
            r.passed,
            "{}: rel err {:.3e} at {}",
            r.name, r.max_rel_error, r.worst_index
        );
    }
}

#[test]
fn grad_check_trivial_functions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random::<f64>(&mut rng, &[6]);
    let r = grad_check(
        &named(vec![x.clone()]),
        |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        },
        &opts(),
    )
    .unwrap();
    assert!(r[0].max_rel_error < 1e-6);
    let r = grad_check(&named(vec![x]), |t, v| Ok(t.sum(v[0])), &opts()).unwrap();
    assert!(r[0].max_rel_error < 1e-9);
}

/// Fixed random projection to a scalar so every output element gets a distinct weight.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> crate::error::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random::<f64>(&mut rng, t.shape(y));
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

#[test]
fn every_op_passes_grad_check_at_random_points() {
    for point in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + point);
        let a = random::<f64>(&mut rng, &[2, 3, 4]);
        let b = random::<f64>(&mut rng, &[2, 3, 4]);
        let m = random::<f64>(&mut rng, &[4, 5]);
        let bb = random::<f64>(&mut rng, &[2, 4, 3]);
        let row = random::<f64>(&mut rng, &[4]);
        let tok = random::<f64>(&mut rng, &[4]);
        let x = random::<f64>(&mut rng, &[2, 2, 6, 6]);
        let w = random::<f64>(&mut rng, &[3, 2, 3, 3]);
        let bias = random::<f64>(&mut rng, &[3]);
        let logits = random::<f64>(&mut rng, &[3, 5]);

        let checks: Vec<(
            &str,
            Vec<Tensor<f64>>,
            Box<dyn Fn(&mut Tape<f64>, &[Var]) -> crate::error::Result<Var>>,
        )> = vec![
            (
                "add",
                vec![a.clone(), b.clone()],
                Box::new(|t, v| {
                    let y = t.add(v[0], v[1])?;
                    project(t, y, 1)
                }),
            ),
            (
                "mul",
                vec![a.clone(), b.clone()],
                Box::new(|t, v| {
                    let y = t.mul(v[0], v[1])?;
                    project(t, y, 2)
                }),
            ),
            (
                "scale_mean",
                vec![a.clone()],
                Box::new(|t, v| {
                    let y = t.scale(v[0], -1.7);
                    let y = t.mul(y, y)?;
                    Ok(t.mean(y))
                }),
            ),
            (
                "add_trailing",
                vec![a.clone(), row.clone()],
                Box::new(|t, v| {
                    let y = t.add_trailing(v[0], v[1])?;
                    project(t, y, 3)
                }),
            ),
            (
                "matmul_shared",
                vec![a.clone(), m.clone()],
                Box::new(|t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    project(t, y, 4)
                }),
            ),
            (
                "matmul_batched",
                vec![a.clone(), bb.clone()],
                Box::new(|t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    project(t, y, 5)
                }),
            ),
            (
                "softmax_mid_axis",
                vec![a.clone()],
                Box::new(|t, v| {
                    let y = t.softmax(v[0], 1)?;
                    project(t, y, 6)
                }),
            ),
            (
                "layernorm",
                vec![a.clone(), row.clone(), tok.clone()],
                Box::new(|t, v| {
                    let y = t.layernorm(v[0], v[1], v[2], 1e-5)?;
                    project(t, y, 7)
                }),
            ),
            (
                "gelu",
                vec![a.clone()],
                Box::new(|t, v| {
                    let y = t.gelu(v[0]);
                    project(t, y, 8)
                }),
            ),
            (
                "permute",
                vec![a.clone()],
                Box::new(|t, v| {
                    let y = t.permute(v[0], &[2, 0, 1])?;
                    project(t, y, 9)
                }),
            ),
            (
                "narrow_reshape",
                vec![a.clone()],
                Box::new(|t, v| {
                    let y = t.narrow(v[0], 2, 1, 2)?;
                    let y = t.reshape(y, &[12])?;
                    project(t, y, 10)
                }),
            ),
            (
                "prepend_token",
                vec![a.clone(), tok.clone()],
                Box::new(|t, v| {
                    let y = t.prepend_token(v[0], v[1])?;
                    project(t, y, 11)
                }),
            ),
            (
                "conv2d",
                vec![x.clone(), w.clone(), bias.clone()],
                Box::new(|t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
                    project(t, y, 12)
                }),
            ),
            (
                "cross_entropy",
                vec![logits.clone()],
                Box::new(|t, v| t.cross_entropy(v[0], &[0, 4, 2])),
            ),
        ];
        for (name, params, f) in checks {
            let reports = grad_check(&named(params), |t, v| f(t, v), &opts()).unwrap();
            for r in reports {
                assert!(r.passed, "{name} point {point} {}: {:.3e}", r.name, r.max_rel_error);
            }
        }
    }
}

#[test]
fn conv_gelu_cross_entropy_composite_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = named(vec![
        random::<f64>(&mut rng, &[2, 2, 5, 5]),
        random::<f64>(&mut rng, &[4, 2, 3, 3]),
        random::<f64>(&mut rng, &[4]),
    ]);
    let reports = grad_check(
        &params,
        |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2, 0)?;
            let y = t.gelu(y);
            let y = t.reshape(y, &[2, 16])?;
            t.cross_entropy(y, &[3, 11])
        },
        &opts(),
    )
    .unwrap();
    assert_all_pass(&reports);
}

#[test]
fn grad_check_flags_a_corrupted_derivative() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = named(vec![random::<f64>(&mut rng, &[8])]);
    set_gelu_grad_fault(true);
    let reports = grad_check(
        &params,
        |t, v| {
            let y = t.gelu(v[0]);
            project(t, y, 1)
        },
        &opts(),
    );
    set_gelu_grad_fault(false);
    assert!(!reports.unwrap()[0].passed);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random::<f32>(&mut rng, &[2, 3, 9, 9]);
        let w = random::<f32>(&mut rng, &[4, 3, 3, 3]);
        let mut tape = Tape::new();
        let (x, w) = (tape.constant(x), tape.param(w));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.conv2d(x, w, b, 2, 1).unwrap();
        let y = tape.gelu(y);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        (tape.value(y).clone(), tape.grad(w).unwrap().clone())
    };
    let (y1, g1) = run();
    let (y2, g2) = run();
    assert!(y1.bit_eq(&y2) && g1.bit_eq(&g2));
}

proptest! {
    #[test]
    fn softmax_slices_sum_to_one(v in proptest::collection::vec(-30.0f32..30.0, 1..40), rows in 1usize..4) {
        let n = v.len();
        let data: Vec<f32> = (0..rows).flat_map(|r| v.iter().map(move |x| x + r as f32)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[rows, n], data).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for r in 0..rows {
            let s: f64 = tape.value(y).data()[r * n..(r + 1) * n].iter().map(|&p| p as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn layernorm_rows_are_standardized(v in proptest::collection::vec(-10.0f32..10.0, 4..64)) {
        let spread = v.iter().cloned().fold(f32::MIN, f32::max) - v.iter().cloned().fold(f32::MAX, f32::min);
        prop_assume!(spread > 0.5);
        let y = run_layernorm(&v, 1e-5);
        let n = y.len() as f64;
        let mean = y.iter().map(|&a| a as f64).sum::<f64>() / n;
        let var = y.iter().map(|&a| (a as f64 - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-5);
        prop_assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn cross_entropy_is_nonnegative(v in proptest::collection::vec(-20.0f32..20.0, 9), label in 0usize..9) {
        let loss = run_ce(&t32(&[1, 9], &v), &[label]).unwrap();
        prop_assert!(loss >= 0.0);
    }
}
