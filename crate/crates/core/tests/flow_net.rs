use meanflow_autodiff::{Graph, ParamSet, PrimitiveSet, Tensor};
use meanflow_core::net::*;
use meanflow_core::selftest::{network_grad_error, network_jvp_error, perturbed_params, toy_config, FD_TOL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn net_and_params(seed: u64) -> (FlowNet, ParamSet<f64>) {
    let net = FlowNet::new(toy_config()).unwrap();
    let p = net.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
    (net, p)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[test]
fn zero_network_outputs_final_bias() {
    let (net, mut p) = net_and_params(0);
    let names: Vec<String> = p.names().map(str::to_string).collect();
    for n in &names {
        let shape = p.get(n).unwrap().shape().to_vec();
        p.set(n, Tensor::zeros(&shape)).unwrap();
    }
    p.set("final.b", Tensor::new(vec![2], vec![0.5, -2.0]).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = randn(&mut rng, &[3, 4, 2]);
    let y = net
        .eval(&p, &x, &[0.0, 0.2, 0.5], &[0.1, 0.9, 0.5], &[Condition::Label(0), Condition::Null, Condition::Label(2)])
        .unwrap();
    for pair in y.data().chunks(2) {
        assert_eq!(pair, [0.5, -2.0]);
    }
}

#[test]
fn output_shape_contract() {
    let cfg = FlowNetConfig {
        latent_dim: 8,
        max_seq_len: 16,
        ..toy_config()
    };
    let net = FlowNet::new(cfg).unwrap();
    let p: ParamSet<f64> = net.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    let x = Tensor::zeros(&[3, 16, 8]);
    let y = net
        .eval(&p, &x, &[0.1, 0.2, 0.3], &[0.4, 0.5, 0.6], &[Condition::Label(1); 3])
        .unwrap();
    assert_eq!(y.shape(), &[3, 16, 8]);
}

#[test]
fn embeddings_are_lookups_with_a_distinct_null_row() {
    let (net, p) = net_and_params(3);
    let cfg = net.config().clone();
    let mut g: Graph<f64> = Graph::new();
    let b = p.bind_constant(&mut g);
    let cond = [Condition::Label(1), Condition::Label(1), Condition::Label(0), Condition::Label(2), Condition::Null];
    let (tokens, global) = embed_condition(&mut g, &b, &cfg, &cond).unwrap();
    let h = cfg.hidden_dim;
    let glob = g.value(global).data().to_vec();
    let row = |i: usize| &glob[i * h..(i + 1) * h];
    assert_eq!(row(0), row(1));
    let toks = g.value(tokens).data().to_vec();
    let m = cfg.pseudo_token_count * h;
    assert_eq!(&toks[0..m], &toks[m..2 * m]);
    for i in [0, 2, 3] {
        for j in [0, 2, 3, 4] {
            if i != j {
                let d: Vec<f64> = row(i).iter().zip(row(j)).map(|(a, b)| a - b).collect();
                assert!(norm(&d) > 0.0, "rows {i} and {j} coincide");
            }
        }
    }
    // The null row is its own table row, not a zero vector.
    assert!(norm(row(4)) > 0.0);
    assert_eq!(row(4), &p.get("label.global").unwrap().data()[cfg.n_labels * h..]);
}

fn time_emb(net: &FlowNet, p: &ParamSet<f64>, s: f64) -> Vec<f64> {
    let mut g: Graph<f64> = Graph::new();
    let b = p.bind_constant(&mut g);
    let sv = g.constant(Tensor::new(vec![1], vec![s]).unwrap());
    let e = timestep_embed(&mut g, &b, "t_embed", sv, net.config().time_embed_dim).unwrap();
    g.value(e).data().to_vec()
}

#[test]
fn timestep_embedding_is_deterministic_distinct_and_smooth() {
    let (net, p) = net_and_params(4);
    let e0 = time_emb(&net, &p, 0.0);
    let e1 = time_emb(&net, &p, 1.0);
    assert_eq!(e0, time_emb(&net, &p, 0.0));
    let d: Vec<f64> = e0.iter().zip(&e1).map(|(a, b)| a - b).collect();
    assert!(norm(&d) > 1e-3);

    // Local Lipschitz constant measured at 1e-2, then checked at 1e-3.
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0 * 0.99).collect();
    let slope = |s: f64, h: f64| {
        let a = time_emb(&net, &p, s);
        let b = time_emb(&net, &p, s + h);
        norm(&a.iter().zip(&b).map(|(x, y)| x - y).collect::<Vec<_>>()) / h
    };
    let c = grid.iter().map(|&s| slope(s, 1e-2)).fold(0.0, f64::max);
    for &s in &grid {
        assert!(slope(s, 1e-3) <= 1.5 * c, "embedding jumps at s = {s}");
    }
}

fn rope(q: &Tensor<f64>, k: &Tensor<f64>, pos: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut g: Graph<f64> = Graph::new();
    let qv = g.constant(q.clone());
    let kv = g.constant(k.clone());
    let (a, b) = rope_apply(&mut g, qv, kv, pos).unwrap();
    (g.value(a).data().to_vec(), g.value(b).data().to_vec())
}

#[test]
fn rope_identity_norm_and_relative_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let hd = 8;
    let q = randn(&mut rng, &[1, hd]);
    let k = randn(&mut rng, &[1, hd]);
    let (q0, _) = rope(&q, &k, &[0]);
    for (a, b) in q0.iter().zip(q.data()) {
        assert!((a - b).abs() < 1e-15);
    }
    let (q7, _) = rope(&q, &k, &[7]);
    assert!((norm(&q7) - norm(q.data())).abs() < 1e-12);

    for (i, j) in [(0usize, 3usize), (2, 2), (5, 1)] {
        let (qi, _) = rope(&q, &k, &[i]);
        let (_, kj) = rope(&q, &k, &[j]);
        let base = dot(&qi, &kj);
        for shift in [1usize, 4, 11] {
            let (qs, _) = rope(&q, &k, &[i + shift]);
            let (_, ks) = rope(&q, &k, &[j + shift]);
            assert!((dot(&qs, &ks) - base).abs() < 1e-10, "shift {shift} at ({i}, {j})");
        }
    }
}

#[test]
fn adaln_with_zero_modulation_is_plain_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = randn(&mut rng, &[2, 3, 8]);
    let mut g: Graph<f64> = Graph::new();
    let hv = g.constant(h.clone());
    let zero = g.constant(Tensor::zeros(&[2, 1, 8]));
    let out = adaln_modulate(&mut g, hv, zero, zero).unwrap();
    let plain = layer_norm(&mut g, hv).unwrap();
    assert_eq!(g.value(out), g.value(plain));
    for row in g.value(out).data().chunks(8) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / 8.0).sqrt();
        assert!(mean.abs() < 1e-12 && (rms - 1.0).abs() < 1e-4);
    }
    // Constant features have zero variance; the epsilon floor keeps them finite.
    let c = g.constant(Tensor::full(&[1, 1, 8], 3.0).unwrap());
    let z = g.constant(Tensor::zeros(&[1, 1, 8]));
    let out = adaln_modulate(&mut g, c, z, z).unwrap();
    assert!(g.value(out).data().iter().all(|v| v.is_finite() && v.abs() < 1e-6));
}

#[test]
fn rms_norm_properties() {
    let mut g: Graph<f64> = Graph::new();
    let h = g.constant(Tensor::new(vec![1, 2], vec![5.0, -5.0]).unwrap());
    let ones = g.constant(Tensor::full(&[2], 1.0).unwrap());
    let out = rms_norm(&mut g, h, ones).unwrap();
    let v = g.value(out).data().to_vec();
    assert!(((v[0] * v[0] + v[1] * v[1]) / 2.0 - 1.0).abs() < 1e-6);

    let zero = g.constant(Tensor::zeros(&[1, 2]));
    let out = rms_norm(&mut g, zero, ones).unwrap();
    assert_eq!(g.value(out).data(), &[0.0, 0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randn(&mut rng, &[3, 6]);
    let base = {
        let xv = g.constant(x.clone());
        let ones = g.constant(Tensor::full(&[6], 1.0).unwrap());
        let o = rms_norm(&mut g, xv, ones).unwrap();
        g.value(o).data().to_vec()
    };
    for alpha in [0.5, 3.0, 40.0] {
        let xv = g.constant(x.scale(alpha).unwrap());
        let ones = g.constant(Tensor::full(&[6], 1.0).unwrap());
        let o = rms_norm(&mut g, xv, ones).unwrap();
        for (a, b) in g.value(o).data().iter().zip(&base) {
            // The epsilon inside the root bounds the deviation.
            assert!((a - b).abs() < 1e-5, "alpha {alpha}");
        }
    }
}

fn conv_out(p: &ParamSet<f64>, h: &Tensor<f64>) -> Tensor<f64> {
    let mut g: Graph<f64> = Graph::new();
    let b = p.bind_constant(&mut g);
    let hv = g.constant(h.clone());
    let o = conv_mlp(&mut g, &b, "mm0.x.mlp", hv).unwrap();
    g.value(o).clone()
}

#[test]
fn conv_mlp_shapes_and_receptive_field() {
    let (net, p) = net_and_params(8);
    let h = net.config().hidden_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for l in [1usize, 2, 16] {
        let x = randn(&mut rng, &[1, l, h]);
        assert_eq!(conv_out(&p, &x).shape(), &[1, l, h]);
    }
    let l = 12;
    let x = randn(&mut rng, &[1, l, h]);
    let base = conv_out(&p, &x);
    for i in [0usize, 5, 11] {
        let mut moved = x.to_vec();
        for f in 0..h {
            moved[i * h + f] += 1.0;
        }
        let y = conv_out(&p, &Tensor::new(vec![1, l, h], moved).unwrap());
        for tok in 0..l {
            let diff = (0..h)
                .map(|f| (y.data()[tok * h + f] - base.data()[tok * h + f]).abs())
                .fold(0.0, f64::max);
            if tok.abs_diff(i) > 2 {
                assert_eq!(diff, 0.0, "token {tok} sees a perturbation at {i}");
            }
        }
        let near = (0..h).map(|f| (y.data()[i * h + f] - base.data()[i * h + f]).abs()).fold(0.0, f64::max);
        assert!(near > 0.0);
    }
}

#[test]
fn conv_mlp_on_one_token_uses_the_center_tap_only() {
    let (net, p) = net_and_params(10);
    let h = net.config().hidden_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = randn(&mut rng, &[1, 1, h]);
    let y = conv_out(&p, &x);
    // Per-token MLP built from the center column of each kernel.
    let center = |name: &str| {
        let w = p.get(&format!("mm0.x.mlp.{name}.w")).unwrap();
        let (i, o) = (w.shape()[1], w.shape()[2]);
        (w.data()[i * o..2 * i * o].to_vec(), i, o)
    };
    let mat = |x: &[f64], (w, i, o): &(Vec<f64>, usize, usize), b: &[f64]| -> Vec<f64> {
        (0..*o).map(|c| b[c] + (0..*i).map(|r| x[r] * w[r * o + c]).sum::<f64>()).collect()
    };
    let b1 = p.get("mm0.x.mlp.conv1.b").unwrap().data().to_vec();
    let b2 = p.get("mm0.x.mlp.conv2.b").unwrap().data().to_vec();
    let a = mat(x.data(), &center("conv1"), &b1);
    let a: Vec<f64> = a.iter().map(|v| v / (1.0 + (-v).exp())).collect();
    let want = mat(&a, &center("conv2"), &b2);
    for (g, w) in y.data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn null_condition_never_reads_label_rows() {
    let net = FlowNet::new(toy_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    // Random output layers so the label can show through.
    let p = perturbed_params(&net, &mut rng);
    let x = randn(&mut rng, &[2, 3, 2]);
    let base = net.eval(&p, &x, &[0.1, 0.3], &[0.5, 0.9], &[Condition::Null; 2]).unwrap();
    // Scrambling every label row leaves null-conditioned outputs unchanged.
    let mut q = p.clone();
    for name in ["label.tokens", "label.global"] {
        let t = q.get(name).unwrap().clone();
        let cols = t.shape()[1];
        let n_labels = net.config().n_labels;
        let mut v = t.to_vec();
        for x in v[..n_labels * cols].iter_mut() {
            *x = rng.sample::<f64, _>(StandardNormal);
        }
        q.set(name, Tensor::new(t.shape().to_vec(), v).unwrap()).unwrap();
    }
    assert_eq!(net.eval(&q, &x, &[0.1, 0.3], &[0.5, 0.9], &[Condition::Null; 2]).unwrap(), base);
    let labelled = net.eval(&q, &x, &[0.1, 0.3], &[0.5, 0.9], &[Condition::Label(0); 2]).unwrap();
    assert_ne!(labelled, base);
}

#[test]
fn full_network_derivatives_match_finite_differences() {
    let net = FlowNet::new(toy_config()).unwrap();
    for seed in 0..5 {
        let e = network_jvp_error(&net, &PrimitiveSet::all(), seed).unwrap();
        assert!(e <= FD_TOL, "jvp seed {seed}: {e:e}");
        let e = network_grad_error(&net, &PrimitiveSet::all(), seed, Some(8)).unwrap();
        assert!(e <= FD_TOL, "grad seed {seed}: {e:e}");
    }
}
