use meanflow_autodiff::{ParamSet, Tensor};
use meanflow_core::data::DatasetSpec;
use meanflow_core::eval::*;
use meanflow_core::net::{FlowNet, FlowNetConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal_rows(n: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn mixture_rows(spec: &DatasetSpec, n_per_label: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for k in 0..spec.n_labels {
        for _ in 0..n_per_label {
            rows.extend(spec.draw(k, &mut rng));
            labels.push(k);
        }
    }
    (rows, labels)
}

#[test]
fn sliced_w2_of_a_unit_shift() {
    let a = normal_rows(10_000, 2, 1);
    let b: Vec<f64> = a.chunks(2).flat_map(|r| [r[0] + 1.0, r[1]]).collect();
    let d = sliced_wasserstein(&a, &b, 2, 512, 7).unwrap();
    let want = 2.0 / std::f64::consts::PI;
    assert!((d - want).abs() <= 0.05, "{d} vs {want}");
}

#[test]
fn sliced_w2_is_a_pseudometric() {
    let a = normal_rows(500, 3, 2);
    assert_eq!(sliced_wasserstein(&a, &a, 3, 64, 0).unwrap(), 0.0);
    let mut rows: Vec<Vec<f64>> = a.chunks(3).map(<[f64]>::to_vec).collect();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    let shuffled: Vec<f64> = rows.concat();
    assert_eq!(sliced_wasserstein(&shuffled, &a, 3, 64, 0).unwrap(), 0.0);
    for seed in 0..5 {
        let x = normal_rows(300, 3, 10 + seed);
        let y: Vec<f64> = normal_rows(300, 3, 20 + seed).iter().map(|v| 0.5 + 2.0 * v).collect();
        let z: Vec<f64> = normal_rows(200, 3, 30 + seed).iter().map(|v| v - 1.0).collect();
        let d = |p: &[f64], q: &[f64]| sliced_wasserstein(p, q, 3, 64, seed).unwrap();
        assert_eq!(d(&x, &y), d(&y, &x));
        assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z) + 1e-12);
    }
    assert!(sliced_wasserstein(&a, &a, 3, 31, 0).is_err());
    assert!(sliced_wasserstein(&[], &a, 3, 64, 0).is_err());
}

#[test]
fn mmd_null_is_within_bootstrap_noise() {
    let n = 600;
    let h = 1.0;
    // Spread of the statistic under the null, from independent replicate pairs.
    let reps: Vec<f64> = (0..30)
        .map(|i| mmd_rbf(&normal_rows(n, 2, 100 + 2 * i), &normal_rows(n, 2, 101 + 2 * i), 2, h).unwrap())
        .collect();
    let mean = reps.iter().sum::<f64>() / reps.len() as f64;
    let se = (reps.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps.len() - 1) as f64).sqrt();
    let stat = mmd_rbf(&normal_rows(n, 2, 1), &normal_rows(n, 2, 2), 2, h).unwrap();
    assert!(stat.abs() <= 3.0 * se, "{stat} vs se {se}");
    // A mean shift is far outside that band.
    let shifted: Vec<f64> = normal_rows(n, 2, 3).iter().map(|v| v + 0.5).collect();
    assert!(mmd_rbf(&normal_rows(n, 2, 1), &shifted, 2, h).unwrap() > 10.0 * se);
}

#[test]
fn mmd_of_distant_clusters_approaches_its_maximum() {
    let a: Vec<f64> = normal_rows(200, 2, 4).iter().map(|v| 1e-4 * v).collect();
    let b: Vec<f64> = normal_rows(200, 2, 5).iter().map(|v| 50.0 + 1e-4 * v).collect();
    // Two deltas: k(a, a) + k(b, b) - 2 k(a, b) = 2 - 2 exp(-d^2 / 2h^2).
    let m = mmd_rbf(&a, &b, 2, 1.0).unwrap();
    assert!((m - 2.0).abs() < 1e-6, "{m}");
    assert_eq!(mmd_rbf(&a, &b, 2, 1.0).unwrap(), mmd_rbf(&b, &a, 2, 1.0).unwrap());
    assert!(mmd_rbf(&a[..2], &b, 2, 1.0).is_err());
    assert!(mmd_rbf(&a, &b, 2, 0.0).is_err());
}

#[test]
fn coverage_examples() {
    let spec = DatasetSpec::mixture(8, 4.0, 0.3, 1, 0);
    let centers = spec.centers();
    let exact: Vec<f64> = [0, 0, 0, 1, 2, 3, 4, 5, 6, 7].iter().flat_map(|&k: &usize| centers[k].clone()).collect();
    let cov = mode_coverage(&exact, 2, &centers, 0.1).unwrap();
    assert_eq!(cov.per_mode[0], 0.3);
    assert!(cov.per_mode[1..].iter().all(|&f| f == 0.1));
    assert_eq!(cov.unassigned, 0.0);

    let (rows, _) = mixture_rows(&spec, 1250, 6);
    let cov = mode_coverage(&rows, 2, &centers, 3.0 * 0.3).unwrap();
    for f in &cov.per_mode {
        assert!((f - 0.125).abs() <= 0.03, "{f}");
    }
    let cov = mode_coverage(&rows, 2, &centers, 0.0).unwrap();
    assert_eq!(cov.unassigned, 1.0);
}

#[test]
fn conditional_accuracy_examples() {
    let spec = DatasetSpec::mixture(8, 4.0, 0.3, 1, 0);
    let centers = spec.centers();
    let mut oracle = |label: usize, n: usize, rng: &mut ChaCha8Rng| {
        Ok((0..n).flat_map(|_| spec.draw(label, rng)).collect::<Vec<f64>>())
    };
    assert!(cond_accuracy(&mut oracle, &centers, 500, 1).unwrap() >= 0.99);
    let mut agnostic = |_: usize, n: usize, rng: &mut ChaCha8Rng| {
        Ok((0..n).flat_map(|_| spec.draw(rng.random_range(0..8), rng)).collect::<Vec<f64>>())
    };
    let chance = cond_accuracy(&mut agnostic, &centers, 1000, 2).unwrap();
    assert!((chance - 0.125).abs() <= 0.02, "{chance}");

    let single = DatasetSpec::mixture(1, 2.0, 0.3, 1, 0);
    let mut near = |_: usize, n: usize, rng: &mut ChaCha8Rng| {
        Ok((0..n).flat_map(|_| single.draw(0, rng)).collect::<Vec<f64>>())
    };
    assert_eq!(cond_accuracy(&mut near, &single.centers(), 100, 3).unwrap(), 1.0);
}

fn constant_model(c: [f64; 2], n_labels: usize) -> (FlowNet, ParamSet<f32>) {
    let net = FlowNet::new(FlowNetConfig {
        n_mm_blocks: 1,
        n_sm_blocks: 1,
        hidden_dim: 8,
        n_heads: 2,
        latent_dim: 2,
        max_seq_len: 1,
        n_labels,
        pseudo_token_count: 2,
        time_embed_dim: 4,
    })
    .unwrap();
    let mut p: ParamSet<f32> = net.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    p.set("final.b", Tensor::from_f64(vec![2], &c).unwrap()).unwrap();
    (net, p)
}

#[test]
fn constant_field_sweep_is_nfe_invariant() {
    let spec = DatasetSpec::mixture(4, 2.0, 0.3, 1, 0);
    let (net, p) = constant_model([0.5, -0.25], 4);
    let cfg = EvalConfig {
        samples_per_label: 100,
        n_projections: 64,
        mmd_samples: 200,
        ..EvalConfig::default()
    };
    let reports = nfe_sweep("const", &net, &p, &spec, &[1, 2, 5, 25], &cfg).unwrap();
    assert_eq!(reports.len(), 4);
    let strip = |r: &EvalReport| EvalReport { nfe: 0, wall_per_sample: 0.0, ..r.clone() };
    // f32 samples agree to rounding, so counts match and distances agree to 1e-6.
    let b = &reports[0];
    for r in &reports[1..] {
        assert_eq!(r.mode_coverage, b.mode_coverage);
        assert_eq!((r.unassigned, r.cond_accuracy), (b.unassigned, b.cond_accuracy));
        assert!((r.sliced_w2 - b.sliced_w2).abs() <= 1e-6 * (1.0 + b.sliced_w2.abs()));
        assert!((r.mmd - b.mmd).abs() <= 1e-6 * (1.0 + b.mmd.abs()));
    }
    assert!(reports.iter().all(EvalReport::is_valid));
    assert_eq!(nfe_sweep("const", &net, &p, &spec, &[1], &cfg).unwrap().len(), 1);
    assert!(nfe_sweep("const", &net, &p, &spec, &[], &cfg).is_err());
    // Same inputs and seed give the same metrics.
    let again = nfe_sweep("const", &net, &p, &spec, &[1, 2, 5, 25], &cfg).unwrap();
    for (a, b) in again.iter().zip(&reports) {
        assert_eq!(strip(a), strip(b));
    }
}

#[test]
fn reports_serialize_with_the_documented_columns() {
    let spec = DatasetSpec::mixture(2, 2.0, 0.3, 1, 0);
    let (net, p) = constant_model([0.0, 0.0], 2);
    let cfg = EvalConfig {
        samples_per_label: 20,
        n_projections: 32,
        mmd_samples: 20,
        ..EvalConfig::default()
    };
    let reports = nfe_sweep("m", &net, &p, &spec, &[1, 3], &cfg).unwrap();
    let dir = tempfile::TempDir::new().unwrap();
    write_csv(&dir.path().join("r.csv"), &reports).unwrap();
    write_jsonl(&dir.path().join("r.jsonl"), &reports).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), CSV_HEADER);
    let cols = CSV_HEADER.split(',').count();
    assert!(lines.all(|l| l.split(',').count() == cols));
    let back: Vec<EvalReport> = std::fs::read_to_string(dir.path().join("r.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(back, reports);
}

#[test]
fn batching_amortizes_per_sample_time() {
    let (net, p) = constant_model([0.1, 0.2], 1);
    let one = measure_rtf(&net, &p, 2, 1, 1, 5).unwrap();
    let many = measure_rtf(&net, &p, 2, 64, 1, 5).unwrap();
    assert!(many.seconds_per_sample <= one.seconds_per_sample, "{many:?} vs {one:?}");
    assert!(!one.machine.is_empty());
    assert!(measure_rtf(&net, &p, 2, 1, 1, 2).is_err());
}
