use rand::Rng as _;

use super::*;
use crate::cohort::Label;

fn small_config() -> SacConfig {
    SacConfig {
        n_time: 3,
        n_features: 4,
        channels: vec![2, 3],
        d_a: 2,
        kernel: 3,
        bn_eps: 1e-5,
        bn_momentum: 0.1,
    }
}

fn random_rows(rng: &mut Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect()
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

/// Direct attention: softmax(H·W_Q·(H·W_K)ᵀ/√d)·H·W_V.
fn oracle_attention(
    h: &[Vec<f64>],
    wq: &[Vec<f64>],
    wk: &[Vec<f64>],
    wv: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mm = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
        a.iter()
            .map(|r| {
                (0..b[0].len())
                    .map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                    .collect()
            })
            .collect()
    };
    let (q, k, v) = (mm(h, wq), mm(h, wk), mm(h, wv));
    let d = wq[0].len() as f64;
    let a: Vec<Vec<f64>> = q
        .iter()
        .map(|qr| {
            let s: Vec<f64> = k
                .iter()
                .map(|kr| qr.iter().zip(kr).map(|(x, y)| x * y).sum::<f64>() / d.sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect()
        })
        .collect();
    let out = mm(&a, &v);
    (a, out)
}

fn run_attention(h: &[Vec<f64>], wq: &[Vec<f64>], wk: &[Vec<f64>], wv: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let hv = g.leaf(&tensor(h));
    let (q, k, v) = (g.leaf(&tensor(wq)), g.leaf(&tensor(wk)), g.leaf(&tensor(wv)));
    let (a, out) = attention_forward(&mut g, hv, q, k, v).unwrap();
    (g.value(a).to_vec(), g.value(out).to_vec())
}

#[test]
fn zero_query_key_gives_uniform_attention() {
    let mut rng = SeedStream::new(1).stream("t");
    let h = random_rows(&mut rng, 4, 3);
    let zero = vec![vec![0.0; 2]; 3];
    let wv = random_rows(&mut rng, 3, 2);
    let (a, out) = run_attention(&h, &zero, &zero, &wv);
    assert!(a.iter().all(|x| (x - 0.25).abs() < 1e-15));
    let (_, oracle) = oracle_attention(&h, &zero, &zero, &wv);
    let vmean: Vec<f64> = (0..2)
        .map(|j| {
            h.iter()
                .map(|r| r.iter().zip(&wv).map(|(x, w)| x * w[j]).sum::<f64>())
                .sum::<f64>()
                / 4.0
        })
        .collect();
    for row in out.chunks(2) {
        for (x, m) in row.iter().zip(&vmean) {
            assert!((x - m).abs() < 1e-12);
        }
    }
    assert!((oracle[0][0] - vmean[0]).abs() < 1e-12);
}

#[test]
fn single_step_attention_returns_value_row() {
    let mut rng = SeedStream::new(2).stream("t");
    let h = random_rows(&mut rng, 1, 3);
    let (wq, wk, wv) = (
        random_rows(&mut rng, 3, 2),
        random_rows(&mut rng, 3, 2),
        random_rows(&mut rng, 3, 2),
    );
    let (a, out) = run_attention(&h, &wq, &wk, &wv);
    assert_eq!(a, [1.0]);
    for j in 0..2 {
        let v: f64 = (0..3).map(|i| h[0][i] * wv[i][j]).sum();
        assert!((out[j] - v).abs() < 1e-15);
    }
}

#[test]
fn attention_matches_direct_oracle_and_is_row_stochastic() {
    for seed in 0..20 {
        let mut rng = SeedStream::new(seed).stream("t");
        let h = random_rows(&mut rng, 3, 4);
        let (wq, wk, wv) = (
            random_rows(&mut rng, 4, 2),
            random_rows(&mut rng, 4, 2),
            random_rows(&mut rng, 4, 2),
        );
        let (a, out) = run_attention(&h, &wq, &wk, &wv);
        let (oa, oo) = oracle_attention(&h, &wq, &wk, &wv);
        for (x, y) in a.iter().zip(oa.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in out.iter().zip(oo.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
        for row in a.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_projection_mismatch_is_reported() {
    let mut g = Graph::new();
    let h = g.leaf(&Tensor::zeros(&[3, 4]));
    let w = g.leaf(&Tensor::zeros(&[5, 2]));
    assert!(matches!(
        attention_forward(&mut g, h, w, w, w),
        Err(Error::Dimension(_))
    ));

    let net = SacNetwork::init(small_config(), 0).unwrap();
    let mut g = Graph::new();
    let vars = net.bind(&mut g);
    let x = g.constant(vec![1, 1, 3, 5], vec![0.0; 15]).unwrap();
    let err = net.unit_forward(&mut g, &vars, 0, x, Mode::Infer).unwrap_err();
    assert!(err.to_string().contains("SAC unit 1"), "{err}");
}

#[test]
fn identity_unit_passes_activated_input() {
    let cfg = SacConfig {
        n_time: 1,
        n_features: 3,
        channels: vec![1],
        d_a: 3,
        kernel: 1,
        bn_eps: 1e-12,
        bn_momentum: 0.1,
    };
    let mut net = SacNetwork::init(cfg, 0).unwrap();
    let u = &mut net.units[0];
    u.w_v = Tensor::identity(3);
    u.kernel = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
    u.bias = Tensor::zeros(&[1]);
    u.running = RunningStats::new(1);
    let input = [0.7, -0.4, 1.3];
    let mut g = Graph::new();
    let vars = net.bind(&mut g);
    let x = g.constant(vec![1, 1, 1, 3], input.to_vec()).unwrap();
    let (_, out) = net.unit_forward(&mut g, &vars, 0, x, Mode::Infer).unwrap();
    for (o, i) in g.value(out).iter().zip(input) {
        assert!((o - i.max(0.0)).abs() < 1e-9);
    }
}

fn windows(rng: &mut Rng, n: usize, cfg: &SacConfig) -> Vec<Window> {
    (0..n)
        .map(|i| Window {
            subject_id: format!("s{}", i / 2),
            label: Label::AD,
            features: random_rows(rng, cfg.n_time, cfg.n_features),
            window_start: i % 2 + 1,
        })
        .collect()
}

#[test]
fn infer_mode_is_deterministic_and_stateless() {
    let net = SacNetwork::init(small_config(), 3).unwrap();
    let ws = windows(&mut SeedStream::new(3).stream("w"), 5, &net.config);
    let a = net.predict_windows(&ws).unwrap();
    let before = net.clone();
    let b = net.predict_windows(&ws).unwrap();
    assert_eq!(a, b);
    assert_eq!(net, before);
    assert!(a.iter().all(|p| *p > 0.0 && *p < 1.0));
}

#[test]
fn batch_composition_does_not_change_infer_probabilities() {
    let net = SacNetwork::init(small_config(), 3).unwrap();
    let ws = windows(&mut SeedStream::new(4).stream("w"), 6, &net.config);
    let all = net.predict_windows(&ws).unwrap();
    for (w, p) in ws.iter().zip(&all) {
        assert!((net.window_probability(&w.features).unwrap() - p).abs() < 1e-14);
    }
}

#[test]
fn head_extremes() {
    let mut net = SacNetwork::init(small_config(), 5).unwrap();
    let w = random_rows(&mut SeedStream::new(5).stream("w"), 3, 4);
    net.head_w = Tensor::zeros(&[net.config.flat_len(), 1]);
    assert_eq!(net.window_probability(&w).unwrap(), 0.5);
    net.head_b = Tensor::new(vec![1], vec![100.0]).unwrap();
    assert!(net.window_probability(&w).unwrap() > 1.0 - 1e-12);
}

/// Independent loop-level forward pass in infer mode.
fn oracle_probability(net: &SacNetwork, window: &[Vec<f64>]) -> f64 {
    let cfg = &net.config;
    let (l, d_a) = (cfg.n_time, cfg.d_a);
    // h[c][t][f]
    let mut h: Vec<Vec<Vec<f64>>> = vec![window.to_vec()];
    let rows_of = |t: &Tensor| -> Vec<Vec<f64>> { t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect() };
    for u in &net.units {
        let (wq, wk, wv) = (rows_of(&u.w_q), rows_of(&u.w_k), rows_of(&u.w_v));
        let att: Vec<Vec<Vec<f64>>> = h.iter().map(|s| oracle_attention(s, &wq, &wk, &wv).1).collect();
        let ks = u.kernel.shape().to_vec();
        let (co, ci, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        let k = u.kernel.data();
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let mut next = vec![vec![vec![0.0; d_a]; l]; co];
        for (o, plane) in next.iter_mut().enumerate() {
            for (t, row) in plane.iter_mut().enumerate() {
                for (f, cell) in row.iter_mut().enumerate() {
                    let mut s = u.bias.data()[o];
                    for c in 0..ci {
                        for a in 0..kh {
                            for b in 0..kw {
                                let (ti, fi) = (
                                    t as isize + a as isize - ph as isize,
                                    f as isize + b as isize - pw as isize,
                                );
                                if ti >= 0 && (ti as usize) < l && fi >= 0 && (fi as usize) < d_a {
                                    s += k[((o * ci + c) * kh + a) * kw + b] * att[c][ti as usize][fi as usize];
                                }
                            }
                        }
                    }
                    let r = s.max(0.0);
                    let norm = (r - u.running.mean[o]) / (u.running.var[o] + cfg.bn_eps).sqrt();
                    *cell = norm * u.gamma.data()[o] + u.beta.data()[o];
                }
            }
        }
        h = next;
    }
    let flat: Vec<f64> = h.into_iter().flatten().flatten().collect();
    let logit: f64 = flat.iter().zip(net.head_w.data()).map(|(x, w)| x * w).sum::<f64>() + net.head_b.data()[0];
    1.0 / (1.0 + (-logit).exp())
}

fn perturb_running(net: &mut SacNetwork, rng: &mut Rng) {
    for u in &mut net.units {
        for m in &mut u.running.mean {
            *m = rng.random_range(-0.5..0.5);
        }
        for v in &mut u.running.var {
            *v = rng.random_range(0.5..2.0);
        }
        for g in u.gamma.data_mut() {
            *g = rng.random_range(0.5..1.5);
        }
        for b in u.beta.data_mut() {
            *b = rng.random_range(-0.3..0.3);
        }
    }
}

#[test]
fn forward_matches_straight_line_oracle() {
    for seed in 0..10 {
        let mut rng = SeedStream::new(seed).stream("o");
        let mut net = SacNetwork::init(small_config(), seed).unwrap();
        perturb_running(&mut net, &mut rng);
        let w = random_rows(&mut rng, 3, 4);
        let got = net.window_probability(&w).unwrap();
        let want = oracle_probability(&net, &w);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
    let mut rng = SeedStream::new(99).stream("o");
    let mut net = SacNetwork::init(SacConfig::new(2, 12), 1).unwrap();
    perturb_running(&mut net, &mut rng);
    let w = random_rows(&mut rng, 2, 12);
    assert!((net.window_probability(&w).unwrap() - oracle_probability(&net, &w)).abs() < 1e-10);
}

fn loss_and_grads(net: &SacNetwork, ws: &[Window], weights: &[f64], mode: Mode) -> (f64, Vec<Vec<f64>>, Vec<f64>) {
    let mut g = Graph::new();
    let vars = net.bind(&mut g);
    let refs: Vec<&Window> = ws.iter().collect();
    let x = net.input_for(&mut g, &refs).unwrap();
    let x = g.leaf(&g.to_tensor(x).requiring_grad());
    let fwd = net.forward(&mut g, &vars, x, mode).unwrap();
    let loss = g.dot_const(fwd.probs, weights).unwrap();
    g.backward(loss).unwrap();
    let grads = vars.0.iter().map(|v| g.grad(*v).unwrap().to_vec()).collect();
    (g.scalar(loss), grads, g.grad(x).unwrap().to_vec())
}

#[test]
fn gradients_match_finite_differences() {
    for (seed, mode) in [(0, Mode::Train), (1, Mode::Infer), (2, Mode::Train)] {
        let mut rng = SeedStream::new(seed).stream("fd");
        let mut net = SacNetwork::init(small_config(), seed).unwrap();
        perturb_running(&mut net, &mut rng);
        let ws = windows(&mut rng, 4, &net.config);
        let weights: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, grads, _) = loss_and_grads(&net, &ws, &weights, mode);
        let h = 1e-5;
        for (pi, grad) in grads.iter().enumerate() {
            let mut num = vec![0.0; grad.len()];
            for (k, slot) in num.iter_mut().enumerate() {
                let mut plus = net.clone();
                plus.params_mut()[pi].data_mut()[k] += h;
                let mut minus = net.clone();
                minus.params_mut()[pi].data_mut()[k] -= h;
                *slot = (loss_and_grads(&plus, &ws, &weights, mode).0 - loss_and_grads(&minus, &ws, &weights, mode).0)
                    / (2.0 * h);
            }
            let diff = grad.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = grad
                .iter()
                .map(|a| a * a)
                .sum::<f64>()
                .sqrt()
                .max(num.iter().map(|a| a * a).sum::<f64>().sqrt());
            assert!(
                diff <= 1e-4 * scale.max(1e-7),
                "{mode:?} param {}: {diff} vs {scale}",
                net.param_names()[pi]
            );
        }
    }
}

#[test]
fn train_mode_updates_running_stats() {
    let mut net = SacNetwork::init(small_config(), 0).unwrap();
    let ws = windows(&mut SeedStream::new(0).stream("w"), 4, &net.config);
    let mut g = Graph::new();
    let vars = net.bind(&mut g);
    let refs: Vec<&Window> = ws.iter().collect();
    let x = net.input_for(&mut g, &refs).unwrap();
    let fwd = net.forward(&mut g, &vars, x, Mode::Train).unwrap();
    let before = net.units[0].running.clone();
    net.update_running(&g, &fwd).unwrap();
    assert_ne!(net.units[0].running, before);

    let mut g = Graph::new();
    let vars = net.bind(&mut g);
    let x = net.input_for(&mut g, &refs).unwrap();
    let fwd = net.forward(&mut g, &vars, x, Mode::Infer).unwrap();
    assert!(net.update_running(&g, &fwd).is_err());
}

#[test]
fn nan_parameter_reports_unit() {
    let mut net = SacNetwork::init(small_config(), 0).unwrap();
    net.units[1].kernel.data_mut()[0] = f64::NAN;
    let w = random_rows(&mut SeedStream::new(0).stream("w"), 3, 4);
    let err = net.window_probability(&w).unwrap_err();
    assert!(matches!(&err, Error::Numeric(m) if m.contains("SAC unit 2")), "{err}");
}

#[test]
fn checkpoint_and_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let mut net = SacNetwork::init(small_config(), 7).unwrap();
    perturb_running(&mut net, &mut SeedStream::new(7).stream("r"));
    net.loss_trace = vec![0.7, 0.6];
    save_sacnet(dir.path(), &net).unwrap();
    assert_eq!(load_sacnet(dir.path()).unwrap(), net);

    let ws = windows(&mut SeedStream::new(7).stream("w"), 3, &net.config);
    let cells = net.embedding_maps(&ws).unwrap();
    assert_eq!(cells.len(), 2 * 3 * 3 * 2);
    assert_eq!(cells[0].unit, 1);
    assert!(cells.iter().all(|c| c.activation >= 0.0));
    let path = dir.path().join("emb.csv");
    write_embedding_csv(&path, &cells).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("unit,window_id,time_idx,feature_idx,activation\n"));
    assert_eq!(text.lines().count(), cells.len() + 1);
}
