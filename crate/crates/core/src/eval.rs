//! Sample-distribution metrics, conditional fidelity, NFE sweeps and timing.
//! Samples are flattened row-major `[N, dim]` slices.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use meanflow_autodiff::ParamSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{ensure, CoreError, Result};
use crate::net::{Condition, FlowNet};
use crate::sampler::{make_schedule, prior_noise, sample_from};

/// Coverage radius floor for zero-spread datasets.
pub const MIN_COVERAGE_RADIUS: f64 = 0.1;

/// Fixed CSV column order.
pub const CSV_HEADER: &str =
    "model_id,nfe,seed,sliced_w2,mmd,mode_coverage_min,mode_coverage_mean,unassigned,cond_accuracy,wall_per_sample";

fn check_rows(name: &str, a: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 || a.is_empty() || a.len() % dim != 0 {
        return Err(CoreError::InvalidInput(format!(
            "{name}: {} values do not form non-empty rows of width {dim}",
            a.len()
        )));
    }
    Ok(a.len() / dim)
}

/// Exact squared 2-Wasserstein distance between two sorted 1-D empirical
/// distributions, by merging their quantile functions.
fn w2_sq_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut acc = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        let d = a[i] - b[j];
        acc += (next - u) * d * d;
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    acc
}

fn random_directions(dim: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

fn project_sorted(a: &[f64], dim: usize, dir: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = a
        .chunks(dim)
        .map(|row| row.iter().zip(dir).map(|(x, w)| x * w).sum())
        .collect();
    p.sort_by(f64::total_cmp);
    p
}

/// Mean over `n_projections` random unit directions of the 1-D
/// 2-Wasserstein distance between the projected samples.
pub fn sliced_wasserstein(a: &[f64], b: &[f64], dim: usize, n_projections: usize, seed: u64) -> Result<f64> {
    check_rows("sliced_wasserstein", a, dim)?;
    check_rows("sliced_wasserstein", b, dim)?;
    if n_projections < 32 {
        return Err(CoreError::InvalidInput(format!(
            "sliced_wasserstein needs at least 32 projections, got {n_projections}"
        )));
    }
    let dirs = random_directions(dim, n_projections, seed);
    let total: f64 = dirs
        .iter()
        .map(|d| w2_sq_sorted(&project_sorted(a, dim, d), &project_sorted(b, dim, d)).sqrt())
        .sum();
    Ok(total / n_projections as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unbiased MMD² with kernel `exp(-|x - y|² / (2 h²))`.
pub fn mmd_rbf(a: &[f64], b: &[f64], dim: usize, bandwidth: f64) -> Result<f64> {
    let n = check_rows("mmd_rbf", a, dim)?;
    let m = check_rows("mmd_rbf", b, dim)?;
    if n < 2 || m < 2 {
        return Err(CoreError::InvalidInput("mmd_rbf needs at least 2 samples per set".into()));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(CoreError::InvalidInput(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let g = -0.5 / (bandwidth * bandwidth);
    let k = |x: &[f64], y: &[f64]| (g * sq_dist(x, y)).exp();
    let within = |s: &[f64], n: usize| {
        let mut acc = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                acc += k(&s[i * dim..(i + 1) * dim], &s[j * dim..(j + 1) * dim]);
            }
        }
        2.0 * acc / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    for x in a.chunks(dim) {
        for y in b.chunks(dim) {
            cross += k(x, y);
        }
    }
    Ok(within(a, n) + within(b, m) - 2.0 * cross / (n * m) as f64)
}

/// Median pairwise distance over (up to) the first 1000 rows.
pub fn median_bandwidth(reference: &[f64], dim: usize) -> Result<f64> {
    let n = check_rows("median_bandwidth", reference, dim)?.min(1000);
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            d.push(sq_dist(&reference[i * dim..(i + 1) * dim], &reference[j * dim..(j + 1) * dim]).sqrt());
        }
    }
    if d.is_empty() {
        return Err(CoreError::InvalidInput("median_bandwidth needs at least 2 samples".into()));
    }
    d.sort_by(f64::total_cmp);
    let med = d[d.len() / 2];
    Ok(if med > 0.0 { med } else { 1.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub per_mode: Vec<f64>,
    pub unassigned: f64,
}

/// Each sample counts toward its nearest center if within `radius`;
/// otherwise it is unassigned.
pub fn mode_coverage(samples: &[f64], dim: usize, centers: &[Vec<f64>], radius: f64) -> Result<Coverage> {
    let n = check_rows("mode_coverage", samples, dim)?;
    let mut counts = vec![0usize; centers.len()];
    let mut unassigned = 0usize;
    for row in samples.chunks(dim) {
        match nearest(row, centers) {
            Some((k, d2)) if d2.sqrt() <= radius && radius > 0.0 => counts[k] += 1,
            _ => unassigned += 1,
        }
    }
    Ok(Coverage {
        per_mode: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        unassigned: unassigned as f64 / n as f64,
    })
}

fn nearest(row: &[f64], centers: &[Vec<f64>]) -> Option<(usize, f64)> {
    centers
        .iter()
        .map(|c| sq_dist(row, c))
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
}

/// Fraction of samples whose nearest center is their label's center.
pub fn label_accuracy(samples: &[f64], labels: &[usize], dim: usize, centers: &[Vec<f64>]) -> Result<f64> {
    let n = check_rows("label_accuracy", samples, dim)?;
    if labels.len() != n {
        return Err(CoreError::InvalidInput(format!("{} labels for {n} samples", labels.len())));
    }
    let hits = samples
        .chunks(dim)
        .zip(labels)
        .filter(|(row, &l)| nearest(row, centers).map(|(k, _)| k) == Some(l))
        .count();
    Ok(hits as f64 / n as f64)
}

/// Draw `n_per_label` samples per label from `generate(label, n, rng)` and
/// score them with [`label_accuracy`].
pub fn cond_accuracy(
    generate: &mut dyn FnMut(usize, usize, &mut ChaCha8Rng) -> Result<Vec<f64>>,
    centers: &[Vec<f64>],
    n_per_label: usize,
    seed: u64,
) -> Result<f64> {
    let dim = centers.first().map_or(0, Vec::len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = Vec::new();
    let mut labels = Vec::new();
    for label in 0..centers.len() {
        all.extend(generate(label, n_per_label, &mut rng)?);
        labels.extend(std::iter::repeat_n(label, n_per_label));
    }
    label_accuracy(&all, &labels, dim, centers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Generated samples per label.
    pub samples_per_label: usize,
    pub n_projections: usize,
    /// Coverage radius in units of the dataset's per-mode sd.
    pub coverage_radius_sds: f64,
    /// Rows of the reference set used for MMD (quadratic cost).
    pub mmd_samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples_per_label: 1250,
            n_projections: 512,
            coverage_radius_sds: 3.0,
            mmd_samples: 2000,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.samples_per_label > 0, "eval.samples_per_label", || "must be positive".into())?;
        ensure(self.n_projections >= 32, "eval.n_projections", || {
            format!("must be at least 32, got {}", self.n_projections)
        })?;
        ensure(
            self.coverage_radius_sds > 0.0 && self.coverage_radius_sds.is_finite(),
            "eval.coverage_radius_sds",
            || "must be positive".into(),
        )?;
        ensure(self.mmd_samples >= 2, "eval.mmd_samples", || "must be at least 2".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub nfe: usize,
    pub seed: u64,
    pub sliced_w2: f64,
    pub mmd: f64,
    pub mode_coverage: Vec<f64>,
    pub unassigned: f64,
    pub cond_accuracy: f64,
    pub wall_per_sample: f64,
}

impl EvalReport {
    pub fn csv_row(&self) -> String {
        let min = self.mode_coverage.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = self.mode_coverage.iter().sum::<f64>() / self.mode_coverage.len().max(1) as f64;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.model_id,
            self.nfe,
            self.seed,
            self.sliced_w2,
            self.mmd,
            if min.is_finite() { min } else { 0.0 },
            mean,
            self.unassigned,
            self.cond_accuracy,
            self.wall_per_sample
        )
    }

    /// All metrics finite and fractions in `[0, 1]`.
    pub fn is_valid(&self) -> bool {
        let frac = |v: f64| (0.0..=1.0).contains(&v);
        [self.sliced_w2, self.mmd, self.wall_per_sample].iter().all(|v| v.is_finite())
            && self.mode_coverage.iter().all(|&v| frac(v))
            && frac(self.unassigned)
            && frac(self.cond_accuracy)
    }
}

pub fn write_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| CoreError::io(path, e))
}

pub fn write_jsonl(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut out = Vec::new();
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    f.write_all(&out).map_err(|e| CoreError::io(path, e))
}

/// Noise and labels shared by every NFE setting of a sweep.
pub struct PairedNoise {
    pub labels: Vec<usize>,
    pub noise: meanflow_autodiff::Tensor<f32>,
}

impl PairedNoise {
    pub fn new(spec: &DatasetSpec, latent_dim: usize, samples_per_label: usize, seed: u64) -> Self {
        let [l, _] = spec.sample_shape();
        let labels: Vec<usize> = (0..spec.n_labels)
            .flat_map(|k| std::iter::repeat_n(k, samples_per_label))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = prior_noise([labels.len(), l, latent_dim], &mut rng);
        PairedNoise { labels, noise }
    }
}

/// Reference data for a sweep: fresh draws from the spec (independent of
/// the training set), per-label balanced.
pub fn reference_samples(spec: &DatasetSpec, per_label: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    (0..spec.n_labels)
        .flat_map(|k| (0..per_label).flat_map(|_| spec.draw(k, &mut rng)).collect::<Vec<_>>())
        .collect()
}

/// Generate with `nfe` steps on the paired noise, chunked to bound memory.
pub fn generate_paired(
    net: &FlowNet,
    params: &ParamSet<f32>,
    paired: &PairedNoise,
    nfe: usize,
) -> Result<Vec<f64>> {
    const CHUNK: usize = 1024;
    let schedule = make_schedule(nfe)?;
    let shape = paired.noise.shape().to_vec();
    let width: usize = shape[1..].iter().product();
    let mut out = Vec::with_capacity(paired.noise.numel());
    for (start, labels) in (0..).step_by(CHUNK).zip(paired.labels.chunks(CHUNK)) {
        let noise = meanflow_autodiff::Tensor::new(
            vec![labels.len(), shape[1], shape[2]],
            paired.noise.data()[start * width..(start + labels.len()) * width].to_vec(),
        )?;
        let cond: Vec<Condition> = labels.iter().map(|&k| Condition::Label(k)).collect();
        out.extend(sample_from(net, params, &cond, &schedule, &noise)?.to_f64_vec());
    }
    Ok(out)
}

/// Score generated samples against the reference set.
pub fn score(
    model_id: &str,
    nfe: usize,
    spec: &DatasetSpec,
    cfg: &EvalConfig,
    samples: &[f64],
    labels: &[usize],
    reference: &[f64],
    wall_per_sample: f64,
) -> Result<EvalReport> {
    let dim = spec.sample_shape().iter().product();
    let sliced_w2 = sliced_wasserstein(samples, reference, dim, cfg.n_projections, cfg.seed)?;
    let take = |v: &[f64]| {
        let n = (v.len() / dim).min(cfg.mmd_samples);
        // Evenly strided rows keep the label balance of `v`.
        let stride = (v.len() / dim) / n.max(1);
        (0..n)
            .flat_map(|i| v[i * stride * dim..(i * stride + 1) * dim].to_vec())
            .collect::<Vec<_>>()
    };
    let (a, b) = (take(samples), take(reference));
    let mmd = mmd_rbf(&a, &b, dim, median_bandwidth(&b, dim)?)?;
    let centers = spec.centers();
    let (coverage, cond_accuracy) = if centers.first().is_some_and(|c| c.len() == dim) {
        // Point masses have zero spread; keep a usable radius.
        let radius = (cfg.coverage_radius_sds * spec.spread()).max(MIN_COVERAGE_RADIUS);
        let cov = mode_coverage(samples, dim, &centers, radius)?;
        (cov, label_accuracy(samples, labels, dim, &centers)?)
    } else {
        (
            Coverage {
                per_mode: vec![],
                unassigned: 0.0,
            },
            0.0,
        )
    };
    Ok(EvalReport {
        model_id: model_id.to_string(),
        nfe,
        seed: cfg.seed,
        sliced_w2,
        mmd,
        mode_coverage: coverage.per_mode,
        unassigned: coverage.unassigned,
        cond_accuracy,
        wall_per_sample,
    })
}

/// One report per NFE, every setting fed the same noise.
pub fn nfe_sweep(
    model_id: &str,
    net: &FlowNet,
    params: &ParamSet<f32>,
    spec: &DatasetSpec,
    nfe_list: &[usize],
    cfg: &EvalConfig,
) -> Result<Vec<EvalReport>> {
    if nfe_list.is_empty() {
        return Err(CoreError::InvalidInput("nfe list is empty".into()));
    }
    cfg.validate()?;
    let paired = PairedNoise::new(spec, net.config().latent_dim, cfg.samples_per_label, cfg.seed);
    let reference = reference_samples(spec, cfg.samples_per_label, cfg.seed);
    nfe_list
        .iter()
        .map(|&nfe| {
            let start = Instant::now();
            let samples = generate_paired(net, params, &paired, nfe)?;
            let wall = start.elapsed().as_secs_f64() / paired.labels.len() as f64;
            score(model_id, nfe, spec, cfg, &samples, &paired.labels, &reference, wall)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtfMeasurement {
    pub nfe: usize,
    pub batch: usize,
    pub seconds_per_sample: f64,
    pub machine: String,
}

pub fn machine_descriptor() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{}-{} cpus={}", std::env::consts::ARCH, std::env::consts::OS, cpus)
}

/// Median wall-clock seconds per generated sample over `repeats` timed runs
/// after one untimed warm-up run.
pub fn measure_rtf(
    net: &FlowNet,
    params: &ParamSet<f32>,
    nfe: usize,
    batch: usize,
    seq_len: usize,
    repeats: usize,
) -> Result<RtfMeasurement> {
    if repeats < 3 || batch == 0 {
        return Err(CoreError::InvalidInput("measure_rtf needs repeats >= 3 and batch >= 1".into()));
    }
    let schedule = make_schedule(nfe)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noise = prior_noise([batch, seq_len, net.config().latent_dim], &mut rng);
    let cond = vec![Condition::Label(0); batch];
    sample_from(net, params, &cond, &schedule, &noise)?;
    let mut times: Vec<f64> = (0..repeats)
        .map(|_| {
            let start = Instant::now();
            sample_from(net, params, &cond, &schedule, &noise)?;
            Ok(start.elapsed().as_secs_f64() / batch as f64)
        })
        .collect::<Result<_>>()?;
    times.sort_by(f64::total_cmp);
    Ok(RtfMeasurement {
        nfe,
        batch,
        seconds_per_sample: times[times.len() / 2],
        machine: machine_descriptor(),
    })
}

/// Least-squares line `y = a x + b`; returns `(a, b, r_squared)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let a = sxy / sxx;
    let b = my - a * mx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (a, b, r2)
}
