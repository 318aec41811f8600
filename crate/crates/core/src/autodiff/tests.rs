use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Maximum over inputs of ‖analytic − central difference‖ / max(‖analytic‖, ‖numeric‖).
fn fd_rel_error(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let h = 1e-5;
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t)).collect();
        let out = build(&mut g, &vars);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = build(&mut g, &vars);
    g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.numel()]);
        let mut numeric = vec![0.0; t.numel()];
        for (j, num) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            *num = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let diff = norm(analytic.iter().zip(&numeric).map(|(a, b)| a - b));
        let scale = norm(analytic.iter().copied()).max(norm(numeric.iter().copied()));
        if scale > 1e-10 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

fn norm(it: impl Iterator<Item = f64>) -> f64 {
    it.map(|v| v * v).sum::<f64>().sqrt()
}

fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = g.value(v).len();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    g.dot_const(v, &w).unwrap()
}

fn naive_matmul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            for p in 0..k {
                out[i * c + j] += a[i * k + p] * b[p * c + j];
            }
        }
    }
    out
}

/// Zero-padded "same" cross-correlation by direct summation.
fn naive_conv(x: &Tensor, k: &Tensor, bias: &[f64]) -> Vec<f64> {
    let (b, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (pt, pl) = ((kh as isize - 1) / 2, (kw as isize - 1) / 2);
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; b * co * h * w];
    for n in 0..b {
        for o in 0..co {
            for i in 0..h {
                for j in 0..w {
                    let mut s = bias[o];
                    for c in 0..ci {
                        for u in 0..kh {
                            for v in 0..kw {
                                let ii = i as isize + u as isize - pt;
                                let jj = j as isize + v as isize - pl;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                    continue;
                                }
                                s += kd[((o * ci + c) * kh + u) * kw + v]
                                    * xd[((n * ci + c) * h + ii as usize) * w + jj as usize];
                            }
                        }
                    }
                    out[((n * co + o) * h + i) * w + j] = s;
                }
            }
        }
    }
    out
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let id = g.leaf(&Tensor::identity(2));
    let a = g.leaf(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let b = g.leaf(&Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap());
    let ia = g.matmul(id, a).unwrap();
    assert_eq!(g.value(ia), &[1.0, 2.0, 3.0, 4.0]);
    let ab = g.matmul(a, b).unwrap();
    assert_eq!(g.value(ab), &[19.0, 22.0, 43.0, 50.0]);
    assert_eq!(g.value(ab), naive_matmul(g.value(a), g.value(b), 2, 2, 2).as_slice());
    let z = g.leaf(&Tensor::zeros(&[3, 2]));
    let zb = g.matmul(z, b).unwrap();
    assert!(g.value(zb).iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.leaf(&Tensor::zeros(&[2, 3]));
    let b = g.leaf(&Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Dimension(msg)) => assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (r, k, c) in [(1, 1, 1), (3, 4, 2), (5, 2, 7)] {
        let a = rand_tensor(&mut rng, &[r, k]);
        let b = rand_tensor(&mut rng, &[k, c]);
        let mut g = Graph::new();
        let (va, vb) = (g.leaf(&a), g.leaf(&b));
        let out = g.matmul(va, vb).unwrap();
        let want = naive_matmul(a.data(), b.data(), r, k, c);
        for (x, y) in g.value(out).iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g
        .constant(
            vec![3, 3],
            vec![0.0, 0.0, 0.0, 0.0, 2f64.ln(), f64::NEG_INFINITY, 1.0, 2.0, 3.0],
        )
        .unwrap();
    let y = g.softmax_rows(x).unwrap();
    let v = g.value(y);
    for e in &v[0..3] {
        assert!((e - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!((v[3] - 1.0 / 3.0).abs() < 1e-15);
    assert!((v[4] - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(v[5], 0.0);
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|a| a.exp()).sum();
    for (i, a) in [1.0f64, 2.0, 3.0].iter().enumerate() {
        assert!((v[6 + i] - a.exp() / z).abs() < 1e-12);
    }
}

#[test]
fn softmax_rejects_nan() {
    let mut g = Graph::new();
    let x = g.constant(vec![1, 2], vec![0.0, f64::NAN]).unwrap();
    assert!(matches!(g.softmax_rows(x), Err(Error::Numeric(_))));
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[1, 3, 3]);
    let mut g = Graph::new();
    let vx = g.leaf(&x);
    let k = g.leaf(&Tensor::filled(&[1, 1, 1, 1], 1.0));
    let b = g.leaf(&Tensor::zeros(&[1]));
    let y = g.conv2d(vx, k, b).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 3]);
    assert_eq!(g.value(y), x.data());
}

#[test]
fn conv_even_kernel_same_padding() {
    let x = Tensor::filled(&[1, 1, 2, 2], 1.0);
    let k = Tensor::filled(&[1, 1, 2, 2], 1.0);
    let mut g = Graph::new();
    let (vx, vk) = (g.leaf(&x), g.leaf(&k));
    let b = g.leaf(&Tensor::zeros(&[1]));
    let y = g.conv2d(vx, vk, b).unwrap();
    let want = naive_conv(&x, &k, &[0.0]);
    assert_eq!(want, vec![4.0, 2.0, 2.0, 1.0]);
    assert_eq!(g.value(y), want.as_slice());
}

#[test]
fn conv_zero_kernel_gives_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 3, 4, 5]);
    let mut g = Graph::new();
    let vx = g.leaf(&x);
    let k = g.leaf(&Tensor::zeros(&[2, 3, 3, 3]));
    let b = g.leaf(&Tensor::filled(&[2], 0.7));
    let y = g.conv2d(vx, k, b).unwrap();
    assert!(g.value(y).iter().all(|&v| v == 0.7));
}

#[test]
fn conv_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::zeros(&[1, 2, 3, 3]));
    let k = g.leaf(&Tensor::zeros(&[1, 3, 3, 3]));
    let b = g.leaf(&Tensor::zeros(&[1]));
    assert!(matches!(g.conv2d(x, k, b), Err(Error::Dimension(_))));
}

#[test]
fn batch_norm_constant_channel_gives_shift() {
    let mut g = Graph::new();
    let x = g
        .constant(
            vec![3, 2, 2],
            vec![5.0, 5.0, -1.0, -1.0, 5.0, 5.0, -1.0, -1.0, 5.0, 5.0, -1.0, -1.0],
        )
        .unwrap();
    let gamma = g.leaf(&Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
    let beta = g.leaf(&Tensor::new(vec![2], vec![0.25, 4.0]).unwrap());
    let y = g.batch_norm_with(x, gamma, beta, 1e-5, NormStats::Batch).unwrap();
    let v = g.value(y);
    for (i, &o) in v.iter().enumerate() {
        let want = if (i / 2) % 2 == 0 { 0.25 } else { 4.0 };
        assert_eq!(o, want);
    }
}

#[test]
fn batch_norm_standardized_batch_is_fixed_point() {
    let mut g = Graph::new();
    let x = g.constant(vec![2, 1], vec![-1.0, 1.0]).unwrap();
    let gamma = g.leaf(&Tensor::filled(&[1], 1.0));
    let beta = g.leaf(&Tensor::zeros(&[1]));
    let y = g.batch_norm_with(x, gamma, beta, 1e-12, NormStats::Batch).unwrap();
    assert!((g.value(y)[0] + 1.0).abs() < 1e-9);
    assert!((g.value(y)[1] - 1.0).abs() < 1e-9);
}

#[test]
fn batch_norm_output_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (b, c, inner) = (16, 3, 5);
    let x = rand_tensor(&mut rng, &[b, c, inner]);
    let mut running = RunningStats::new(c);
    let mut g = Graph::new();
    let vx = g.leaf(&x);
    let gamma = g.leaf(&Tensor::filled(&[c], 1.0));
    let beta = g.leaf(&Tensor::zeros(&[c]));
    let y = g
        .batch_norm(
            vx,
            gamma,
            beta,
            1e-5,
            BatchNormMode::Train {
                running: &mut running,
                momentum: 0.1,
            },
        )
        .unwrap();
    let v = g.value(y);
    for ch in 0..c {
        let vals: Vec<f64> = (0..b)
            .flat_map(|n| v[(n * c + ch) * inner..(n * c + ch + 1) * inner].to_vec())
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let s = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-6);
        assert!((s - 1.0).abs() < 1e-4);
    }
    assert!(running.mean.iter().any(|&m| m != 0.0));
}

#[test]
fn batch_norm_infer_uses_running_stats() {
    let running = RunningStats {
        mean: vec![1.0],
        var: vec![4.0],
    };
    let mut g = Graph::new();
    let x = g.constant(vec![1, 1, 2], vec![3.0, -1.0]).unwrap();
    let gamma = g.leaf(&Tensor::filled(&[1], 1.0));
    let beta = g.leaf(&Tensor::zeros(&[1]));
    let y = g
        .batch_norm(x, gamma, beta, 1e-12, BatchNormMode::Infer(&running))
        .unwrap();
    assert!((g.value(y)[0] - 1.0).abs() < 1e-9);
    assert!((g.value(y)[1] + 1.0).abs() < 1e-9);
}

#[test]
fn batch_norm_empty_batch() {
    let mut g = Graph::new();
    let x = g.constant(vec![0, 2], vec![]).unwrap();
    let gamma = g.leaf(&Tensor::filled(&[2], 1.0));
    let beta = g.leaf(&Tensor::zeros(&[2]));
    assert!(matches!(
        g.batch_norm_with(x, gamma, beta, 1e-5, NormStats::Batch),
        Err(Error::Contract(_))
    ));
}

#[test]
fn sigmoid_examples() {
    let mut g = Graph::new();
    let x = g.constant(vec![4], vec![0.0, -100.0, 3f64.ln(), 800.0]).unwrap();
    let y = g.sigmoid(x);
    let v = g.value(y);
    assert_eq!(v[0], 0.5);
    assert!(v[1] > 0.0 && v[1] < 1e-40);
    assert!((v[2] - 0.75).abs() < 1e-15);
    assert_eq!(v[3], 1.0);
}

#[test]
fn backward_analytic_cases() {
    let mut g = Graph::new();
    let x = g.param(&Tensor::scalar(3.0));
    let sq = g.mul(x, x).unwrap();
    g.backward(sq).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);

    let mut g = Graph::new();
    let x = g.param(&Tensor::scalar(0.0));
    let s = g.sigmoid(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.25]);
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::new();
    let x = g.param(&Tensor::zeros(&[2]));
    let y = g.relu(x);
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
}

#[test]
fn backward_populates_every_reachable_param_and_skips_constants() {
    let mut g = Graph::new();
    let a = g.param(&Tensor::filled(&[2], 1.5));
    let c = g.constant(vec![2], vec![2.0, 3.0]).unwrap();
    let b = g.param(&Tensor::filled(&[2], -0.5));
    let ab = g.mul(a, c).unwrap();
    let s = g.add(ab, b).unwrap();
    let out = g.sum(s);
    g.backward(out).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[2.0, 3.0]);
    assert_eq!(g.grad(b).unwrap(), &[1.0, 1.0]);
    assert!(g.grad(c).is_none());

    let mut target = Tensor::filled(&[2], 1.5).requiring_grad();
    g.accumulate_grad(a, &mut target).unwrap();
    g.accumulate_grad(a, &mut target).unwrap();
    assert_eq!(target.grad().unwrap(), &[4.0, 6.0]);
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2, 2, 3, 4]);
    let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let mut g = Graph::new();
    let (vx, vk) = (g.param(&x), g.param(&k));
    let b = g.param(&Tensor::zeros(&[3]));
    let y = g.conv2d(vx, vk, b).unwrap();
    let r = g.relu(y);
    let out = weighted_sum(&mut g, r, 9);
    g.backward(out).unwrap();
    let first = (g.grad(vx).unwrap().to_vec(), g.grad(vk).unwrap().to_vec());
    g.backward(out).unwrap();
    assert_eq!(first.0.as_slice(), g.grad(vx).unwrap());
    assert_eq!(first.1.as_slice(), g.grad(vk).unwrap());
}

#[test]
fn finite_differences_for_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..3u64 {
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let e = fd_rel_error(&[a.clone(), b], |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            weighted_sum(g, y, trial)
        });
        assert!(e < 1e-4, "matmul {e}");

        let q = rand_tensor(&mut rng, &[2, 3, 4]);
        let k = rand_tensor(&mut rng, &[2, 5, 4]);
        let vv = rand_tensor(&mut rng, &[2, 4, 5]);
        let e = fd_rel_error(&[q, k, vv], |g, v| {
            let s = g.bmm(v[0], v[1], true).unwrap();
            let y = g.bmm(s, v[2], true).unwrap();
            weighted_sum(g, y, trial)
        });
        assert!(e < 1e-4, "bmm {e}");

        let x = rand_tensor(&mut rng, &[3, 5]);
        let y = rand_tensor(&mut rng, &[3, 5]);
        let e = fd_rel_error(&[x.clone(), y.clone()], |g, v| {
            let s = g.add(v[0], v[1]).unwrap();
            let d = g.sub(s, v[1]).unwrap();
            let m = g.mul(d, v[1]).unwrap();
            let pos = g.affine(v[1], 0.1, 3.0);
            let q = g.div(m, pos).unwrap();
            weighted_sum(g, q, trial)
        });
        assert!(e < 1e-4, "elementwise {e}");

        let bias = rand_tensor(&mut rng, &[5]);
        let e = fd_rel_error(&[x.clone(), bias], |g, v| {
            let y = g.add_bias(v[0], v[1]).unwrap();
            let a = g.silu(y);
            let b = g.sigmoid(a);
            let c = g.relu(b);
            let r = g.reshape(c, vec![15]).unwrap();
            weighted_sum(g, r, trial)
        });
        assert!(e < 1e-4, "activations {e}");

        let p = Tensor::new(vec![4], (0..4).map(|_| rng.random_range(0.1..0.9)).collect()).unwrap();
        let e = fd_rel_error(&[p], |g, v| {
            let c = g.clamp(v[0], 1e-7, 1.0 - 1e-7);
            let l = g.log(c);
            let m = g.mean(l);
            let s = g.sum(v[0]);
            g.add(m, s).unwrap()
        });
        assert!(e < 1e-4, "log/mean/sum {e}");

        let e = fd_rel_error(std::slice::from_ref(&x), |g, v| {
            let y = g.scale(v[0], 2.0);
            let s = g.softmax_rows(y).unwrap();
            weighted_sum(g, s, trial)
        });
        assert!(e < 1e-4, "softmax {e}");

        let img = rand_tensor(&mut rng, &[2, 2, 3, 4]);
        let ker = rand_tensor(&mut rng, &[3, 2, 3, 2]);
        let cb = rand_tensor(&mut rng, &[3]);
        let e = fd_rel_error(&[img, ker, cb], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2]).unwrap();
            weighted_sum(g, y, trial)
        });
        assert!(e < 1e-4, "conv2d {e}");

        let bx = rand_tensor(&mut rng, &[4, 3, 2]);
        let gm = rand_tensor(&mut rng, &[3]);
        let bt = rand_tensor(&mut rng, &[3]);
        let e = fd_rel_error(&[bx.clone(), gm.clone(), bt.clone()], |g, v| {
            let y = g.batch_norm_with(v[0], v[1], v[2], 1e-5, NormStats::Batch).unwrap();
            weighted_sum(g, y, trial)
        });
        assert!(e < 1e-4, "batch_norm train {e}");
        let running = RunningStats {
            mean: vec![0.1, -0.2, 0.3],
            var: vec![0.5, 1.5, 2.0],
        };
        let e = fd_rel_error(&[bx, gm, bt], |g, v| {
            let y = g
                .batch_norm(v[0], v[1], v[2], 1e-5, BatchNormMode::Infer(&running))
                .unwrap();
            weighted_sum(g, y, trial)
        });
        assert!(e < 1e-4, "batch_norm infer {e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 4), 1..5),
        shift in -50.0f64..50.0,
    ) {
        let n = rows.len();
        let flat: Vec<f64> = rows.concat();
        let shifted: Vec<f64> = flat.iter().map(|v| v + shift).collect();
        let mut g = Graph::new();
        let a = g.constant(vec![n, 4], flat).unwrap();
        let b = g.constant(vec![n, 4], shifted).unwrap();
        let sa = g.softmax_rows(a).unwrap();
        let sb = g.softmax_rows(b).unwrap();
        for row in g.value(sa).chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
        for (x, y) in g.value(sa).iter().zip(g.value(sb)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_matches_naive_loops(
        co in 1usize..=4, ci in 1usize..=4, h in 1usize..=8, w in 1usize..=8,
        kh in 1usize..=4, kw in 1usize..=4, b in 1usize..=2, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[b, ci, h, w]);
        let k = rand_tensor(&mut rng, &[co, ci, kh, kw]);
        let bias = rand_tensor(&mut rng, &[co]);
        let mut g = Graph::new();
        let (vx, vk, vb) = (g.leaf(&x), g.leaf(&k), g.leaf(&bias));
        let y = g.conv2d(vx, vk, vb).unwrap();
        let want = naive_conv(&x, &k, bias.data());
        for (p, q) in g.value(y).iter().zip(&want) {
            prop_assert!((p - q).abs() < 1e-10);
        }
    }
}
