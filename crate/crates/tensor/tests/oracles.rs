//! Independent oracles for the tensor engine: brute-force loops, inner
//! product identities and central finite differences.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unetrpp_tensor::{grad_check, ConvGeometry, GradCheckOptions, Tensor};

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Entries bounded away from zero so kinked ops stay differentiable under ±h.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[i * k + l] * b[l * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

#[test]
fn matmul_3x4_by_4x2_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[4, 2]);
    let c = a.matmul(&b).unwrap();
    let expect = triple_loop(a.data(), b.data(), 3, 4, 2);
    for (x, y) in c.data().iter().zip(&expect) {
        assert!((x - y).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..=16, k in 1usize..=16, n in 1usize..=16, seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = randn(&mut rng, &[m, k]);
        let b = randn(&mut rng, &[k, n]);
        let c = a.matmul(&b).unwrap();
        let expect = triple_loop(a.data(), b.data(), m, k, n);
        for (x, y) in c.data().iter().zip(&expect) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_lanes_are_distributions(rows in 1usize..6, cols in 1usize..12, seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Tensor<f64> = Tensor::from_fn(&[rows, cols], |_| rng.random_range(-30.0..30.0));
        for axis in 0..2 {
            let s = x.softmax(axis).unwrap();
            prop_assert!(s.data().iter().all(|&v| v > 0.0 && v <= 1.0));
            let sums = s.sum_axis(axis, false).unwrap();
            prop_assert!(sums.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        }
    }

    #[test]
    fn conv_extents_follow_arithmetic(
        h in 1usize..9, w in 1usize..9, d in 1usize..9,
        k in 1usize..4, s in 1usize..4, p in 0usize..2,
    ) {
        let geo = ConvGeometry::new([s; 3], [p; 3]);
        let res = geo.output_extents([h, w, d], [k; 3]);
        let expect = |len: usize| -> Option<usize> {
            let span = len + 2 * p;
            (span >= k && (span - k).is_multiple_of(s)).then(|| (span - k) / s + 1)
        };
        match (expect(h), expect(w), expect(d)) {
            (Some(a), Some(b), Some(c)) => {
                prop_assert_eq!(res.unwrap(), [a, b, c]);
                let x = Tensor::<f64>::ones(&[1, h, w, d]);
                let y = x.conv3d(&Tensor::ones(&[2, 1, k, k, k]), None, geo).unwrap();
                prop_assert_eq!(y.shape(), &[2, a, b, c]);
            }
            _ => prop_assert!(res.is_err()),
        }
    }
}

#[test]
fn backward_of_sum_of_squares() {
    let x = Tensor::from_slice(&[0.5, -1.5, 2.0, 3.0], &[4]).unwrap().requires_grad();
    x.mul(&x).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, -3.0, 4.0, 6.0]);
}

#[test]
fn shared_leaf_accumulates_over_branches() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w0 = randn(&mut rng, &[3, 4]);
    let x = randn(&mut rng, &[4, 2]);
    let y = randn(&mut rng, &[4, 2]);

    let w = w0.detach().requires_grad();
    w.matmul(&x).unwrap().sum().add(&w.matmul(&y).unwrap().sum()).unwrap().backward().unwrap();
    let shared = w.grad().unwrap();

    let wa = w0.detach().requires_grad();
    wa.matmul(&x).unwrap().sum().backward().unwrap();
    let wb = w0.detach().requires_grad();
    wb.matmul(&y).unwrap().sum().backward().unwrap();
    let summed: Vec<f64> = wa.grad().unwrap().iter().zip(wb.grad().unwrap()).map(|(a, b)| a + b).collect();
    assert_eq!(shared, summed);
}

#[test]
fn repeated_backward_accumulates() {
    let x = Tensor::from_slice(&[1.0, 2.0], &[2]).unwrap().requires_grad();
    x.scale(3.0).sum().backward().unwrap();
    x.scale(3.0).sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![6.0, 6.0]);
    x.zero_grad();
    assert!(x.grad().is_none());
}

#[test]
fn composite_graph_matches_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let a = randn(&mut rng, &[3, 5]);
        let b = randn(&mut rng, &[5, 4]);
        let r = randn(&mut rng, &[3, 4]);
        let f = |t: &[Tensor<f64>]| {
            let z = t[0].matmul(&t[1])?.leaky_relu(0.01).exp();
            let s = z.softmax(1)?.mul(&r)?;
            s.sum().add(&z.scale(0.1).mean())
        };
        let rep = grad_check("composite", f, &[a, b], &GradCheckOptions::new(1e-6)).unwrap();
        assert!(rep.passed, "seed {seed}: {rep:?}");
    }
}

/// Every op at 1e-6 on ten seeds, each scalarized by a random projection.
#[test]
fn every_op_passes_gradcheck() {
    type Case = (
        &'static str,
        Box<
            dyn Fn(
                &mut ChaCha8Rng,
            )
                -> (Vec<Tensor<f64>>, Box<dyn Fn(&[Tensor<f64>]) -> unetrpp_tensor::Result<Tensor<f64>>>),
        >,
    );
    fn proj(out: Tensor<f64>, r: &Tensor<f64>) -> unetrpp_tensor::Result<Tensor<f64>> {
        Ok(out.mul(r)?.sum())
    }
    let cases: Vec<Case> = vec![
        (
            "add",
            Box::new(|rng| {
                let r = randn(rng, &[3, 4]);
                (vec![randn(rng, &[3, 4]), randn(rng, &[3, 4])], Box::new(move |t| proj(t[0].add(&t[1])?, &r)))
            }),
        ),
        (
            "div",
            Box::new(|rng| {
                let r = randn(rng, &[5]);
                (vec![randn(rng, &[5]), rand_away_from_zero(rng, &[5])], Box::new(move |t| proj(t[0].div(&t[1])?, &r)))
            }),
        ),
        (
            "leaky_relu",
            Box::new(|rng| {
                let r = randn(rng, &[6]);
                (vec![rand_away_from_zero(rng, &[6])], Box::new(move |t| proj(t[0].leaky_relu(0.01), &r)))
            }),
        ),
        (
            "log",
            Box::new(|rng| {
                let r = randn(rng, &[6]);
                let x = Tensor::from_fn(&[6], |_| rng.random_range(0.2..2.0));
                (vec![x], Box::new(move |t| proj(t[0].log()?, &r)))
            }),
        ),
        (
            "max",
            Box::new(|rng| {
                let r = randn(rng, &[3]);
                (vec![randn(rng, &[3, 4])], Box::new(move |t| proj(t[0].max_axis(1, false)?, &r)))
            }),
        ),
        (
            "log_softmax",
            Box::new(|rng| {
                let r = randn(rng, &[4, 3]);
                (vec![randn(rng, &[4, 3])], Box::new(move |t| proj(t[0].log_softmax(0)?, &r)))
            }),
        ),
        (
            "permute+narrow+concat",
            Box::new(|rng| {
                let r = randn(rng, &[4, 2, 3]);
                (
                    vec![randn(rng, &[2, 3, 4])],
                    Box::new(move |t| {
                        let p = t[0].permute(&[2, 0, 1])?;
                        let parts = [p.narrow(2, 2, 1)?, p.narrow(2, 0, 2)?];
                        proj(Tensor::concat(&parts, 2)?, &r)
                    }),
                )
            }),
        ),
        (
            "layernorm",
            Box::new(|rng| {
                let r = randn(rng, &[4, 5]);
                (
                    vec![randn(rng, &[4, 5]), randn(rng, &[5]), randn(rng, &[5])],
                    Box::new(move |t| proj(t[0].layernorm(&t[1], &t[2], 1e-5)?, &r)),
                )
            }),
        ),
        (
            "conv3d",
            Box::new(|rng| {
                let r = randn(rng, &[2, 3, 2, 3]);
                (
                    vec![randn(rng, &[2, 5, 3, 5]), randn(rng, &[2, 2, 3, 2, 3]), randn(rng, &[2])],
                    Box::new(move |t| {
                        proj(t[0].conv3d(&t[1], Some(&t[2]), ConvGeometry::new([2, 1, 1], [1, 0, 0]))?, &r)
                    }),
                )
            }),
        ),
        (
            "deconv3d",
            Box::new(|rng| {
                let r = randn(rng, &[3, 4, 2, 4]);
                (
                    vec![randn(rng, &[2, 2, 2, 2]), randn(rng, &[2, 3, 2, 1, 2]), randn(rng, &[3])],
                    Box::new(move |t| proj(t[0].deconv3d(&t[1], Some(&t[2]), [2, 1, 2], [2, 1, 2])?, &r)),
                )
            }),
        ),
    ];
    for (name, build) in &cases {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (inputs, f) = build(&mut rng);
            let rep = grad_check(name, |t| f(t), &inputs, &GradCheckOptions::new(1e-6)).unwrap();
            assert!(rep.passed, "{name} seed {seed}: {rep:?}");
        }
    }
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&mut rng, &[7]);
    let rep = grad_check("softmax_sum", |t| Ok(t[0].softmax(0)?.sum()), &[x], &GradCheckOptions::new(1e-6)).unwrap();
    assert!(rep.max_abs_error < 1e-8, "{rep:?}");
}

#[test]
fn gradcheck_rejects_non_scalar_output() {
    let x = Tensor::<f64>::ones(&[3]);
    assert!(grad_check("bad", |t| Ok(t[0].scale(2.0)), &[x], &GradCheckOptions::new(1e-6)).is_err());
}

/// A softmax whose backward has its sign flipped must be caught.
#[test]
fn gradcheck_detects_sign_bug_in_softmax_backward() {
    fn buggy_softmax(x: &Tensor<f64>) -> Tensor<f64> {
        let good = x.detach().softmax(0).unwrap();
        Tensor::from_op("softmax_buggy", good.to_vec(), x.shape().to_vec(), &[x], |_, s, g| {
            let dot: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
            vec![Some(s.iter().zip(g).map(|(&si, &gi)| -si * (gi - dot)).collect())]
        })
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = randn(&mut rng, &[6]);
    let r = randn(&mut rng, &[6]);
    let rep =
        grad_check("softmax_buggy", |t| Ok(buggy_softmax(&t[0]).mul(&r)?.sum()), &[x], &GradCheckOptions::new(1e-6))
            .unwrap();
    assert!(!rep.passed);
    assert!(rep.max_rel_error > 0.5);
}

#[test]
fn gradcheck_probe_modes_agree_and_catch_bugs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[4, 2]);
    let good = |t: &[Tensor<f64>]| Ok(t[0].matmul(&t[1])?.exp().sum());
    let modes = [
        GradCheckOptions::new(1e-6).sampled(5, 1),
        GradCheckOptions::new(1e-6).directional(3, 1),
        GradCheckOptions::new(1e-6).joint_directional(3, 1),
    ];
    for opts in &modes {
        let rep = grad_check("good", good, &[a.clone(), b.clone()], opts).unwrap();
        assert!(rep.passed, "{opts:?}: {rep:?}");
    }
    // Correct value, doubled backward.
    let wrong = |t: &[Tensor<f64>]| {
        let y = t[0].matmul(&t[1])?.exp().sum();
        Ok(Tensor::from_op("twice", y.to_vec(), y.shape().to_vec(), &[&y], |_, _, g| vec![Some(vec![2.0 * g[0]])]))
    };
    for opts in &modes {
        let rep = grad_check("wrong", wrong, &[a.clone(), b.clone()], opts).unwrap();
        assert!(!rep.passed && rep.max_rel_error > 0.4, "{opts:?}: {rep:?}");
    }
}

fn conv_reference(x: &[f64], w: &[f64], ci: usize, co: usize, n: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; co * n * n * n];
    for o in 0..co {
        for ox in 0..n {
            for oy in 0..n {
                for oz in 0..n {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for a in 0..k {
                            for b in 0..k {
                                for e in 0..k {
                                    let (ix, iy, iz) = (ox + a, oy + b, oz + e);
                                    if ix < p || iy < p || iz < p || ix - p >= n || iy - p >= n || iz - p >= n {
                                        continue;
                                    }
                                    let xv = x[((c * n + ix - p) * n + iy - p) * n + iz - p];
                                    acc += xv * w[(((o * ci + c) * k + a) * k + b) * k + e];
                                }
                            }
                        }
                    }
                    out[((o * n + ox) * n + oy) * n + oz] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv3d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (ci, co) in [(1, 1), (1, 3), (2, 2)] {
        let x = randn(&mut rng, &[ci, 4, 4, 4]);
        let w = randn(&mut rng, &[co, ci, 3, 3, 3]);
        let y = x.conv3d(&w, None, ConvGeometry::same([3, 3, 3])).unwrap();
        let expect = conv_reference(x.data(), w.data(), ci, co, 4, 3, 1);
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn deconv_is_adjoint_of_strided_conv() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cin, cout) = (3, 5);
        let w = randn(&mut rng, &[cout, cin, 2, 2, 2]);
        let x = randn(&mut rng, &[cin, 4, 6, 2]);
        let y = randn(&mut rng, &[cout, 2, 3, 1]);
        let cx = x.conv3d(&w, None, ConvGeometry::non_overlapping([2, 2, 2])).unwrap();
        let dy = y.deconv3d(&w, None, [2, 2, 2], [2, 2, 2]).unwrap();
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "seed {seed}: {lhs} vs {rhs}");
    }
}

#[test]
fn layernorm_rows_are_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::from_fn(&[16, 12], |_| rng.random_range(-5.0..5.0));
    let y = x.layernorm(&Tensor::ones(&[12]), &Tensor::zeros(&[12]), 1e-5).unwrap();
    for row in y.data().chunks(12) {
        let mean: f64 = row.iter().sum::<f64>() / 12.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5);
    }
}
