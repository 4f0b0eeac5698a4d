//! Built-in oracle suites: derivative checks against central differences,
//! the flow-matching degeneracy identity, guidance algebra, closed-form
//! velocity oracles and sampler telescoping.

use std::time::Instant;

use meanflow_autodiff::{
    finite_diff_jvp, jvp_with, BoundParams, Graph, ParamSet, Primitive, PrimitiveSet, Result as AdResult, Tensor,
    Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::data::{brute_force_mean_velocity, oracle_mean_velocity, oracle_velocity, DatasetSpec};
use crate::error::{CoreError, Result};
use crate::net::{Condition, FlowNet, FlowNetConfig};
use crate::objective::{cfm_loss, guided_velocity, meanflow_loss, FlowBatch, GuidanceConfig};
use crate::sampler::{make_schedule, one_step, sample_from};

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

/// `|a - b| <= tol (1 + |b|)` elementwise; returns the worst ratio to `tol`.
pub fn scaled_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / (1.0 + y.abs()))
        .fold(0.0, f64::max)
}

/// Small network exercising every block type.
pub fn toy_config() -> FlowNetConfig {
    FlowNetConfig {
        n_mm_blocks: 2,
        n_sm_blocks: 1,
        hidden_dim: 8,
        n_heads: 2,
        latent_dim: 2,
        max_seq_len: 4,
        n_labels: 3,
        pseudo_token_count: 2,
        time_embed_dim: 4,
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), v).expect("length matches shape")
}

/// Initialized parameters plus N(0, 0.1) noise so zero-initialized
/// modulation and output layers take part.
pub fn perturbed_params(net: &FlowNet, rng: &mut ChaCha8Rng) -> ParamSet<f64> {
    let mut p: ParamSet<f64> = net.init_params(rng);
    let names: Vec<String> = p.names().map(str::to_string).collect();
    for n in names {
        let t = p.get(&n).expect("name from set");
        let noise = randn(rng, t.shape(), 0.1);
        let updated = t.add(&noise).expect("same shape");
        p.set(&n, updated).expect("same shape");
    }
    p
}

/// Inputs for one derivative probe: `x [2, 3, D]`, `r`, `t` with a gap so
/// finite-difference steps keep `r <= t`.
struct Probe {
    params: ParamSet<f64>,
    x: Tensor<f64>,
    r: Tensor<f64>,
    t: Tensor<f64>,
    cond: Vec<Condition>,
}

fn probe(net: &FlowNet, seed: u64) -> Probe {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = perturbed_params(net, &mut rng);
    let c = net.config();
    let x = randn(&mut rng, &[2, 3, c.latent_dim], 1.0);
    let r = Tensor::new(vec![2], vec![rng.random_range(0.1..0.4), rng.random_range(0.1..0.4)]).unwrap();
    let t = Tensor::new(vec![2], vec![rng.random_range(0.6..0.9), rng.random_range(0.6..0.9)]).unwrap();
    let cond = vec![Condition::Label(rng.random_range(0..c.n_labels)), Condition::Null];
    Probe { params, x, r, t, cond }
}

fn forward_with(net: &FlowNet, p: &BoundParams, g: &mut Graph<f64>, v: &[Var], cond: &[Condition]) -> AdResult<Var> {
    net.forward(g, p, v[0], v[1], v[2], cond).map_err(|e| match e {
        CoreError::Autodiff(a) => a,
        other => meanflow_autodiff::AutodiffError::InvalidArgument {
            op: "forward",
            reason: other.to_string(),
        },
    })
}

/// Worst scaled JVP error over inputs `(x, r, t)` for one seed.
pub fn network_jvp_error(net: &FlowNet, prims: &PrimitiveSet, seed: u64) -> Result<f64> {
    let pr = probe(net, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdead_beef);
    let inputs = [pr.x.clone(), pr.r.clone(), pr.t.clone()];
    let tangents = [
        randn(&mut rng, pr.x.shape(), 1.0),
        randn(&mut rng, &[2], 1.0),
        randn(&mut rng, &[2], 1.0),
    ];
    let exact = jvp_with(
        prims.clone(),
        |g, v| {
            let p = pr.params.bind_constant(g);
            forward_with(net, &p, g, v, &pr.cond)
        },
        &inputs,
        &tangents,
    )?;
    let fd = finite_diff_jvp(
        |g, v| {
            let p = pr.params.bind_constant(g);
            forward_with(net, &p, g, v, &pr.cond)
        },
        &inputs,
        &tangents,
        FD_STEP,
    )?;
    Ok(scaled_error(exact.tangent().data(), fd.data()))
}

fn weighted_loss(net: &FlowNet, params: &ParamSet<f64>, pr: &Probe, w: &Tensor<f64>) -> Result<f64> {
    let out = net.eval(params, &pr.x, pr.r.data(), pr.t.data(), &pr.cond)?;
    Ok(out.mul(w)?.sum())
}

/// Reverse-mode parameter gradient of `sum(f * w)` against central
/// differences: one random direction over all parameters plus `coords`
/// random coordinates, or every coordinate when `coords` is `None`.
pub fn network_grad_error(net: &FlowNet, prims: &PrimitiveSet, seed: u64, coords: Option<usize>) -> Result<f64> {
    let pr = probe(net, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0bad_cafe);
    let w = randn(&mut rng, &[2, 3, net.config().latent_dim], 1.0);

    let mut g = Graph::with_primitives(prims.clone());
    let bound = pr.params.bind(&mut g);
    let x = g.constant(pr.x.clone());
    let r = g.constant(pr.r.clone());
    let t = g.constant(pr.t.clone());
    let out = net.forward(&mut g, &bound, x, r, t, &pr.cond)?;
    let wv = g.constant(w.clone());
    let prod = g.mul(out, wv)?;
    let loss = g.sum_all(prod)?;
    let grads = meanflow_autodiff::backward(&g, loss, &bound)?;

    let shift = |dir: &dyn Fn(&str, usize) -> f64, sign: f64| -> Result<f64> {
        let mut p = pr.params.clone();
        for (name, t) in pr.params.iter() {
            let moved: Vec<f64> = t
                .data()
                .iter()
                .enumerate()
                .map(|(k, v)| v + sign * FD_STEP * dir(name, k))
                .collect();
            p.set(name, Tensor::new(t.shape().to_vec(), moved)?)?;
        }
        weighted_loss(net, &p, &pr, &w)
    };

    let mut worst: f64 = 0.0;
    // Random direction over all parameters.
    let dirs: ParamSet<f64> = {
        let mut d = ParamSet::new();
        for (name, t) in pr.params.iter() {
            d.insert(name, randn(&mut rng, t.shape(), 1.0))?;
        }
        d
    };
    let dir = |name: &str, k: usize| dirs.get(name).map(|t| t.data()[k]).unwrap_or(0.0);
    let fd = (shift(&dir, 1.0)? - shift(&dir, -1.0)?) / (2.0 * FD_STEP);
    let exact: f64 = grads
        .iter()
        .map(|(n, gt)| match dirs.get(n) {
            Ok(d) => gt.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>(),
            Err(_) => 0.0,
        })
        .sum();
    worst = worst.max(scaled_error(&[exact], &[fd]));

    let all: Vec<(String, usize)> = pr
        .params
        .iter()
        .flat_map(|(n, t)| (0..t.numel()).map(move |k| (n.to_string(), k)))
        .collect();
    let picked: Vec<&(String, usize)> = match coords {
        None => all.iter().collect(),
        Some(n) => (0..n).map(|_| &all[rng.random_range(0..all.len())]).collect(),
    };
    for (name, k) in picked {
        let unit = |n: &str, j: usize| if n == name && j == *k { 1.0 } else { 0.0 };
        let fd = (shift(&unit, 1.0)? - shift(&unit, -1.0)?) / (2.0 * FD_STEP);
        let exact = grads.get(name)?.data()[*k];
        worst = worst.max(scaled_error(&[exact], &[fd]));
    }
    Ok(worst)
}

type Build = fn(&mut Graph<f64>, &[Var]) -> AdResult<Var>;

/// One small graph per primitive, used to localize derivative faults.
pub fn primitive_cases() -> Vec<(Primitive, Vec<Vec<usize>>, Build)> {
    let c = |p, shapes: &[&[usize]], b: Build| (p, shapes.iter().map(|s| s.to_vec()).collect(), b);
    vec![
        c(Primitive::Add, &[&[3, 4], &[3, 4]], |g, x| g.add(x[0], x[1])),
        c(Primitive::Sub, &[&[3, 4], &[3, 4]], |g, x| g.sub(x[0], x[1])),
        c(Primitive::Mul, &[&[3, 4], &[3, 4]], |g, x| g.mul(x[0], x[1])),
        c(Primitive::Scale, &[&[5]], |g, x| g.scale(x[0], -1.7)),
        c(Primitive::MatMul, &[&[2, 3, 4], &[2, 4, 5]], |g, x| g.matmul(x[0], x[1])),
        c(Primitive::Reshape, &[&[2, 6]], |g, x| g.reshape(x[0], &[3, 4])),
        c(Primitive::Permute, &[&[2, 3, 4]], |g, x| g.permute(x[0], &[2, 0, 1])),
        c(Primitive::Broadcast, &[&[3, 1]], |g, x| g.broadcast_to(x[0], &[2, 3, 4])),
        c(Primitive::Concat, &[&[2, 3], &[2, 2]], |g, x| g.concat(&[x[0], x[1]], 1)),
        c(Primitive::Slice, &[&[3, 5]], |g, x| g.slice(x[0], 1, 1, 3)),
        c(Primitive::Sum, &[&[3, 4]], |g, x| g.sum_last(x[0])),
        c(Primitive::Silu, &[&[7]], |g, x| g.silu(x[0])),
        c(Primitive::Sin, &[&[7]], |g, x| g.sin(x[0])),
        c(Primitive::Cos, &[&[7]], |g, x| g.cos(x[0])),
        c(Primitive::Softmax, &[&[3, 5]], |g, x| g.softmax(x[0])),
        c(Primitive::RmsNormalize, &[&[3, 5]], |g, x| g.rms_normalize(x[0], 1e-6)),
        c(Primitive::Conv1d, &[&[2, 5, 3], &[3, 3, 4]], |g, x| g.conv1d(x[0], x[1])),
        c(Primitive::Gather, &[&[4, 3]], |g, x| g.gather(x[0], &[2, 0, 2, 3])),
        c(Primitive::StopGradient, &[&[4]], |g, x| g.stop_gradient(x[0])),
    ]
}

/// Primitives whose JVP disagrees with central differences.
pub fn failing_primitives(prims: &PrimitiveSet, seeds: u64) -> Result<Vec<Primitive>> {
    let mut bad = Vec::new();
    for (p, shapes, build) in primitive_cases() {
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<_> = shapes.iter().map(|s| randn(&mut rng, s, 1.0)).collect();
            let vs: Vec<_> = shapes.iter().map(|s| randn(&mut rng, s, 1.0)).collect();
            let exact = jvp_with(prims.clone(), build, &xs, &vs)?;
            let fd = if p == Primitive::StopGradient {
                Tensor::zeros(exact.primal().shape())
            } else {
                finite_diff_jvp(build, &xs, &vs, FD_STEP)?
            };
            if scaled_error(exact.tangent().data(), fd.data()) > FD_TOL {
                bad.push(p);
                break;
            }
        }
    }
    Ok(bad)
}

/// Random f64 batch on the toy network with `r == t`.
pub fn degenerate_batch(net: &FlowNet, seed: u64) -> Result<(ParamSet<f64>, FlowBatch<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = perturbed_params(net, &mut rng);
    let c = net.config();
    let b = 4;
    let x = randn(&mut rng, &[b, 2, c.latent_dim], 1.0);
    let eps = randn(&mut rng, &[b, 2, c.latent_dim], 1.0);
    let t: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..1.0)).collect();
    let label: Vec<Condition> = (0..b).map(|_| Condition::Label(rng.random_range(0..c.n_labels))).collect();
    let dropped: Vec<bool> = (0..b).map(|_| rng.random::<f64>() < 0.3).collect();
    let batch = FlowBatch::new(x, eps, t.clone(), t, label, dropped)?;
    Ok((params, batch))
}

/// Largest `|L_MF - L_CFM|` over `n` degenerate batches (`r == t`, unguided).
pub fn degeneracy_gap(n: u64) -> Result<f64> {
    let net = FlowNet::new(toy_config())?;
    let g = GuidanceConfig::unguided(0.1);
    let mut worst: f64 = 0.0;
    for seed in 0..n {
        let (params, batch) = degenerate_batch(&net, seed)?;
        let mf = meanflow_loss(&net, &params, &batch, &g)?;
        let cfm = cfm_loss(&net, &params, &batch)?;
        worst = worst.max((mf - cfm).abs());
    }
    Ok(worst)
}

/// Effective scale of the ω = 0.3, κ = 0.9 setting, worst affine-shift residual, and
/// whether `(1, 0)` reproduces `v_t` bit-exactly.
pub fn guidance_algebra() -> Result<(f64, f64, bool)> {
    let g = GuidanceConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = randn(&mut rng, &[16], 1.0);
    let fc = randn(&mut rng, &[16], 1.0);
    let fu = randn(&mut rng, &[16], 1.0);
    let base = guided_velocity(&v, &fc, &fu, &g)?;
    let c = 2.5;
    let shift = |t: &Tensor<f64>| t.map(|x| x + c).expect("map");
    let shifted = guided_velocity(&shift(&v), &shift(&fc), &shift(&fu), &g)?;
    let residual = shifted
        .data()
        .iter()
        .zip(base.data())
        .map(|(s, b)| (s - b - c).abs())
        .fold(0.0, f64::max);
    let unguided = guided_velocity(&v, &fc, &fu, &GuidanceConfig::unguided(0.1))?;
    Ok((g.effective_scale(), residual, unguided == v))
}

/// Worst gap between closed-form mean velocities and RK4 quadrature with
/// `n_quad` steps over a grid of `n_points` `(x, r, t)` triples, for the
/// point mass and a Gaussian with `sd = 2`.
pub fn oracle_quadrature_gap(n_points: usize, n_quad: usize) -> Result<(f64, f64)> {
    let pm = DatasetSpec::point_mass(vec![1.0, -1.0], 1, 0);
    let ga = DatasetSpec::gaussian(vec![0.0, 0.0], 2.0, 1, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst_pm, mut worst_ga): (f64, f64) = (0.0, 0.0);
    for _ in 0..n_points {
        let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let t = rng.random_range(0.2..1.0);
        let r = rng.random_range(0.0..t * 0.95);
        let a = oracle_mean_velocity(&pm, &x, r, t)?;
        let b = brute_force_mean_velocity(&pm, &x, r, t, n_quad)?;
        worst_pm = worst_pm.max(scaled_error(&a, &b));
        let a = oracle_mean_velocity(&ga, &x, r, t)?;
        let b = brute_force_mean_velocity(&ga, &x, r, t, n_quad)?;
        worst_ga = worst_ga.max(scaled_error(&a, &b));
        let diag = oracle_mean_velocity(&ga, &x, t, t)?;
        let v = oracle_velocity(&ga, &x, t)?;
        worst_ga = worst_ga.max(scaled_error(&diag, &v));
    }
    Ok((worst_pm, worst_ga))
}

/// Constant-field network in f32: worst drift from `eps - c` over several
/// schedule lengths, and whether one step equals the single-step rule bit-exactly.
pub fn telescoping_drift() -> Result<(f64, bool)> {
    let net = FlowNet::new(toy_config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params: ParamSet<f32> = net.init_params(&mut rng);
    let c = [0.75f32, -1.25];
    params.set("final.b", Tensor::new(vec![2], c.to_vec())?)?;
    let noise: Tensor<f32> = crate::sampler::prior_noise([8, 1, 2], &mut rng);
    let cond = vec![Condition::Label(1); 8];
    let want: Vec<f64> = noise
        .data()
        .iter()
        .enumerate()
        .map(|(i, &e)| e as f64 - c[i % 2] as f64)
        .collect();
    let mut worst: f64 = 0.0;
    for n in [1, 2, 3, 5, 25, 100] {
        let out = sample_from(&net, &params, &cond, &make_schedule(n)?, &noise)?;
        let got = out.to_f64_vec();
        worst = worst.max(got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    let single = one_step(&net, &params, &cond, &noise)?;
    let sampled = sample_from(&net, &params, &cond, &make_schedule(1)?, &noise)?;
    Ok((worst, single == sampled))
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct SelftestOptions {
    /// Scale this primitive's derivative rule by 1.5 in every check.
    pub corrupt: Option<Primitive>,
    pub network_seeds: u64,
    pub primitive_seeds: u64,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        SelftestOptions {
            corrupt: None,
            network_seeds: 20,
            primitive_seeds: 20,
        }
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult {
        name: name.into(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn run_selftest(opts: &SelftestOptions) -> Vec<CheckResult> {
    let prims = match opts.corrupt {
        Some(p) => PrimitiveSet::all().with_perturbed_derivative(p, 1.5),
        None => PrimitiveSet::all(),
    };
    let net = FlowNet::new(toy_config()).expect("toy config is valid");
    vec![
        timed("primitive_jvp", || {
            let bad = failing_primitives(&prims, opts.primitive_seeds)?;
            Ok((bad.is_empty(), format!("failing primitives: {bad:?}")))
        }),
        timed("network_jvp", || {
            let mut worst: f64 = 0.0;
            for seed in 0..opts.network_seeds {
                worst = worst.max(network_jvp_error(&net, &prims, seed)?);
            }
            Ok((worst <= FD_TOL, format!("worst scaled error {worst:.2e} over {} seeds", opts.network_seeds)))
        }),
        timed("network_grad", || {
            let mut worst: f64 = 0.0;
            for seed in 0..opts.network_seeds {
                worst = worst.max(network_grad_error(&net, &prims, seed, Some(16))?);
            }
            Ok((worst <= FD_TOL, format!("worst scaled error {worst:.2e} over {} seeds", opts.network_seeds)))
        }),
        timed("degeneracy_identity", || {
            let gap = degeneracy_gap(50)?;
            Ok((gap <= 1e-9, format!("max |L_MF - L_CFM| = {gap:.2e}")))
        }),
        timed("guidance_algebra", || {
            let (scale, residual, unguided) = guidance_algebra()?;
            Ok((
                scale == 3.0 && residual <= 1e-12 && unguided,
                format!("scale {scale}, shift residual {residual:.1e}, unguided exact {unguided}"),
            ))
        }),
        timed("velocity_oracles", || {
            let (pm, ga) = oracle_quadrature_gap(100, 10_000)?;
            Ok((pm <= 1e-8 && ga <= 1e-6, format!("point mass {pm:.1e}, gaussian {ga:.1e}")))
        }),
        timed("sampler_telescoping", || {
            let (drift, exact) = telescoping_drift()?;
            Ok((drift <= 1e-6 && exact, format!("drift {drift:.1e}, one-step exact {exact}")))
        }),
    ]
}

/// Fixed-width pass/fail table.
pub fn format_table(results: &[CheckResult]) -> String {
    let mut s = format!("{:<22} {:<6} {:>8}  detail\n", "check", "result", "seconds");
    for r in results {
        s.push_str(&format!(
            "{:<22} {:<6} {:>8.2}  {}\n",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.seconds,
            r.detail
        ));
    }
    s
}

pub fn parse_primitive(name: &str) -> Result<Primitive> {
    Primitive::ALL
        .iter()
        .copied()
        .find(|p| p.name() == name)
        .ok_or_else(|| {
            let names: Vec<&str> = Primitive::ALL.iter().map(|p| p.name()).collect();
            CoreError::config("corrupt", format!("unknown primitive `{name}` (one of {})", names.join(", ")))
        })
}
