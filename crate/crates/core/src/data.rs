//! Synthetic conditional datasets and their velocity-field oracles.
//!
//! Every analytic dataset is a mixture of isotropic Gaussians (a point mass is
//! a component with zero spread). Along the path `x_t = (1-t) x + t eps` each
//! component stays Gaussian, so the marginal velocity `E[eps - x | x_t]` has a
//! closed form per component, weighted by the component posteriors.

use std::f64::consts::PI;
use std::path::Path;

use meanflow_autodiff::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{self, Entry};
use crate::error::{ensure, CoreError, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"MFLOWDS1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataKind {
    PointMass { point: Vec<f64> },
    IsotropicGaussian { mean: Vec<f64>, sd: f64 },
    /// `n_modes` components evenly spaced on a circle in the plane; label `k`
    /// selects mode `k`.
    GaussianMixture { n_modes: usize, radius: f64, sd: f64 },
    /// Per-label stationary AR(1) sequences of `len` tokens with `dim`
    /// independent channels; `coeffs[k]` is label `k`'s lag-one coefficient.
    SequenceAr { len: usize, dim: usize, coeffs: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DataKind,
    pub n_labels: usize,
    pub samples_per_label: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn point_mass(point: Vec<f64>, samples: usize, seed: u64) -> Self {
        DatasetSpec {
            kind: DataKind::PointMass { point },
            n_labels: 1,
            samples_per_label: samples,
            seed,
        }
    }

    pub fn gaussian(mean: Vec<f64>, sd: f64, samples: usize, seed: u64) -> Self {
        DatasetSpec {
            kind: DataKind::IsotropicGaussian { mean, sd },
            n_labels: 1,
            samples_per_label: samples,
            seed,
        }
    }

    pub fn mixture(n_modes: usize, radius: f64, sd: f64, samples_per_label: usize, seed: u64) -> Self {
        DatasetSpec {
            kind: DataKind::GaussianMixture { n_modes, radius, sd },
            n_labels: n_modes,
            samples_per_label,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.n_labels >= 1, "dataset.n_labels", || "must be at least 1".into())?;
        ensure(self.samples_per_label >= 1, "dataset.samples_per_label", || "must be at least 1".into())?;
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match &self.kind {
            DataKind::PointMass { point } => {
                ensure(!point.is_empty() && finite(point), "dataset.kind.point", || {
                    "must be a non-empty finite vector".into()
                })
            }
            DataKind::IsotropicGaussian { mean, sd } => {
                ensure(!mean.is_empty() && finite(mean), "dataset.kind.mean", || {
                    "must be a non-empty finite vector".into()
                })?;
                ensure(sd.is_finite() && *sd > 0.0, "dataset.kind.sd", || format!("must be positive, got {sd}"))
            }
            DataKind::GaussianMixture { n_modes, radius, sd } => {
                ensure(*n_modes >= 1, "dataset.kind.n_modes", || "must be at least 1".into())?;
                ensure(radius.is_finite() && *radius >= 0.0, "dataset.kind.radius", || {
                    format!("must be non-negative, got {radius}")
                })?;
                ensure(sd.is_finite() && *sd > 0.0, "dataset.kind.sd", || format!("must be positive, got {sd}"))?;
                ensure(self.n_labels == *n_modes, "dataset.n_labels", || {
                    format!("must equal n_modes ({n_modes}) for a mixture")
                })
            }
            DataKind::SequenceAr { len, dim, coeffs } => {
                ensure(*len >= 1 && *dim >= 1, "dataset.kind", || "len and dim must be positive".into())?;
                ensure(coeffs.len() == self.n_labels, "dataset.kind.coeffs", || {
                    format!("needs one coefficient per label ({}), got {}", self.n_labels, coeffs.len())
                })?;
                ensure(coeffs.iter().all(|a| a.abs() < 1.0), "dataset.kind.coeffs", || {
                    "coefficients must lie in (-1, 1)".into()
                })
            }
        }
    }

    /// Per-sample `[tokens, features]`.
    pub fn sample_shape(&self) -> [usize; 2] {
        match &self.kind {
            DataKind::PointMass { point } => [1, point.len()],
            DataKind::IsotropicGaussian { mean, .. } => [1, mean.len()],
            DataKind::GaussianMixture { .. } => [1, 2],
            DataKind::SequenceAr { len, dim, .. } => [*len, *dim],
        }
    }

    /// Mode centers for labeled mixtures; one center otherwise (none for sequences).
    pub fn centers(&self) -> Vec<Vec<f64>> {
        match &self.kind {
            DataKind::PointMass { point } => vec![point.clone()],
            DataKind::IsotropicGaussian { mean, .. } => vec![mean.clone()],
            DataKind::GaussianMixture { n_modes, radius, .. } => (0..*n_modes)
                .map(|k| {
                    let a = 2.0 * PI * k as f64 / *n_modes as f64;
                    vec![radius * a.cos(), radius * a.sin()]
                })
                .collect(),
            DataKind::SequenceAr { .. } => Vec::new(),
        }
    }

    /// Center associated with `label`.
    pub fn label_center(&self, label: usize) -> Option<Vec<f64>> {
        let centers = self.centers();
        match centers.len() {
            0 => None,
            1 => Some(centers[0].clone()),
            _ => centers.get(label).cloned(),
        }
    }

    /// Per-component spread of the data (zero for a point mass).
    pub fn spread(&self) -> f64 {
        match &self.kind {
            DataKind::PointMass { .. } => 0.0,
            DataKind::IsotropicGaussian { sd, .. } | DataKind::GaussianMixture { sd, .. } => *sd,
            DataKind::SequenceAr { .. } => 1.0,
        }
    }

    /// One fresh sample of `label`, flattened `[tokens * features]`.
    pub fn draw<R: Rng + ?Sized>(&self, label: usize, rng: &mut R) -> Vec<f64> {
        let mut normal = || rng.sample::<f64, _>(StandardNormal);
        match &self.kind {
            DataKind::PointMass { point } => point.clone(),
            DataKind::IsotropicGaussian { mean, sd } => mean.iter().map(|m| m + sd * normal()).collect(),
            DataKind::GaussianMixture { sd, .. } => {
                let c = self.label_center(label).expect("mixture has one center per label");
                c.iter().map(|m| m + sd * normal()).collect()
            }
            DataKind::SequenceAr { len, dim, coeffs } => {
                let a = coeffs[label];
                let innov = (1.0 - a * a).sqrt();
                let mut out = Vec::with_capacity(len * dim);
                let mut prev: Vec<f64> = (0..*dim).map(|_| normal()).collect();
                out.extend_from_slice(&prev);
                for _ in 1..*len {
                    for p in prev.iter_mut() {
                        *p = a * *p + innov * normal();
                    }
                    out.extend_from_slice(&prev);
                }
                out
            }
        }
    }
}

/// Materialized dataset: samples `[N, tokens, features]` with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    spec: DatasetSpec,
    shape: [usize; 2],
    samples: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    /// Generate every label's samples from `spec.seed`, then shuffle.
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let shape = spec.sample_shape();
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(spec.n_labels * spec.samples_per_label);
        for label in 0..spec.n_labels {
            for _ in 0..spec.samples_per_label {
                rows.push((label, spec.draw(label, &mut rng)));
            }
        }
        rows.shuffle(&mut rng);
        let labels = rows.iter().map(|(l, _)| *l).collect();
        let samples = rows.into_iter().flat_map(|(_, s)| s).collect();
        Ok(Dataset {
            spec: spec.clone(),
            shape,
            samples,
            labels,
        })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn sample_width(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let w = self.sample_width();
        &self.samples[i * w..(i + 1) * w]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Uniform draw with replacement: flattened rows and their labels.
    pub fn batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(size * self.sample_width());
        let mut labels = Vec::with_capacity(size);
        for _ in 0..size {
            let i = rng.random_range(0..self.len());
            x.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        (x, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let n = self.len();
        let samples = Tensor::<f64>::new(vec![n, self.shape[0], self.shape[1]], self.samples.clone())?;
        let labels = Tensor::<f64>::new(vec![n], self.labels.iter().map(|&l| l as f64).collect())?;
        let entries = vec![
            Entry::new("samples", DType::F64, samples.shape().to_vec(), samples.to_le_bytes()),
            Entry::new("labels", DType::F64, labels.shape().to_vec(), labels.to_le_bytes()),
        ];
        container::write(path, DATASET_MAGIC, serde_json::to_value(&self.spec)?, &entries)
    }

    /// Load a cached dataset; it must match regeneration from its own spec.
    pub fn load(path: &Path) -> Result<Self> {
        let (meta, entries) = container::read(path, DATASET_MAGIC)?;
        let spec: DatasetSpec = serde_json::from_value(meta)?;
        let corrupt = |reason: &str| CoreError::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let find = |name: &str| entries.iter().find(|e| e.name == name).ok_or_else(|| corrupt(name));
        let samples = find("samples")?.tensor::<f64>()?;
        let labels = find("labels")?.tensor::<f64>()?;
        let fresh = Dataset::generate(&spec)?;
        if samples.data() != fresh.samples.as_slice()
            || labels.data().iter().zip(&fresh.labels).any(|(&a, &b)| a != b as f64)
        {
            return Err(corrupt("payload does not match its spec"));
        }
        Ok(fresh)
    }
}

/// Isotropic Gaussian component; `sd == 0` is a point mass.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub mean: Vec<f64>,
    pub sd: f64,
    pub weight: f64,
}

impl Component {
    /// Marginal variance of `x_t` under this component.
    fn var(&self, t: f64) -> f64 {
        (1.0 - t).powi(2) * self.sd * self.sd + t * t
    }

    /// `E[eps - x | x_t, component]`.
    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        let a = (t - (1.0 - t) * self.sd * self.sd) / self.var(t);
        x.iter()
            .zip(&self.mean)
            .map(|(&xi, &m)| -m + a * (xi - (1.0 - t) * m))
            .collect()
    }

    fn log_density(&self, x: &[f64], t: f64) -> f64 {
        let s = self.var(t);
        let d2: f64 = x.iter().zip(&self.mean).map(|(&xi, &m)| (xi - (1.0 - t) * m).powi(2)).sum();
        self.weight.ln() - 0.5 * d2 / s - 0.5 * x.len() as f64 * (2.0 * PI * s).ln()
    }
}

/// Exact marginal velocity field of a Gaussian mixture under linear interpolation to N(0, I).
#[derive(Debug, Clone, PartialEq)]
pub struct OracleField {
    components: Vec<Component>,
}

impl OracleField {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        if components.is_empty() {
            return Err(CoreError::InvalidInput("oracle needs at least one component".into()));
        }
        Ok(OracleField { components })
    }

    /// Field of the data distribution, or of one label's conditional.
    pub fn for_spec(spec: &DatasetSpec, label: Option<usize>) -> Result<Self> {
        spec.validate()?;
        let single = |mean: &Vec<f64>, sd: f64| vec![Component { mean: mean.clone(), sd, weight: 1.0 }];
        let comps = match &spec.kind {
            DataKind::PointMass { point } => single(point, 0.0),
            DataKind::IsotropicGaussian { mean, sd } => single(mean, *sd),
            DataKind::GaussianMixture { sd, .. } => {
                let centers = spec.centers();
                match label {
                    Some(k) => {
                        let c = centers.get(k).ok_or_else(|| {
                            CoreError::InvalidInput(format!("label {k} out of range 0..{}", centers.len()))
                        })?;
                        single(c, *sd)
                    }
                    None => {
                        let w = 1.0 / centers.len() as f64;
                        centers.into_iter().map(|mean| Component { mean, sd: *sd, weight: w }).collect()
                    }
                }
            }
            DataKind::SequenceAr { .. } => {
                return Err(CoreError::InvalidInput("sequence datasets have no velocity oracle".into()))
            }
        };
        OracleField::new(comps)
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        let d = self.components[0].mean.len();
        if x.len() != d {
            return Err(CoreError::InvalidInput(format!("point has dimension {}, field has {d}", x.len())));
        }
        Ok(())
    }

    fn singular(&self, t: f64) -> bool {
        self.components.iter().any(|c| c.var(t) <= 0.0)
    }

    /// Instantaneous velocity `v(x, t)`.
    pub fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_point(x)?;
        if !(0.0..=1.0).contains(&t) || self.singular(t) {
            return Err(CoreError::InvalidInput(format!("velocity is undefined at t = {t}")));
        }
        if self.components.len() == 1 {
            return Ok(self.components[0].velocity(x, t));
        }
        let logs: Vec<f64> = self.components.iter().map(|c| c.log_density(x, t)).collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        let mut v = vec![0.0; x.len()];
        for (c, wi) in self.components.iter().zip(&w) {
            for (o, cv) in v.iter_mut().zip(c.velocity(x, t)) {
                *o += wi / total * cv;
            }
        }
        Ok(v)
    }

    /// Closed-form average velocity over `[r, t]`; single-component fields only.
    pub fn mean_velocity(&self, x: &[f64], r: f64, t: f64) -> Result<Vec<f64>> {
        self.check_point(x)?;
        if !(0.0 <= r && r <= t && t <= 1.0) {
            return Err(CoreError::InvalidInput(format!("need 0 <= r <= t <= 1, got r={r}, t={t}")));
        }
        if self.components.len() != 1 {
            return Err(CoreError::InvalidInput(
                "no closed-form mean velocity for a mixture; use brute_force_mean_velocity".into(),
            ));
        }
        if r == t {
            return self.velocity(x, t);
        }
        let c = &self.components[0];
        if c.sd == 0.0 {
            if t == 0.0 {
                return Err(CoreError::InvalidInput("point-mass field is singular at t = 0".into()));
            }
            return Ok(x.iter().zip(&c.mean).map(|(xi, m)| (xi - m) / t).collect());
        }
        // Each component trajectory is x_tau = (1-tau) mu + z * sqrt(s(tau)).
        let ratio = (c.var(r) / c.var(t)).sqrt();
        Ok(x.iter()
            .zip(&c.mean)
            .map(|(&xi, &m)| {
                let xr = (1.0 - r) * m + (xi - (1.0 - t) * m) * ratio;
                (xi - xr) / (t - r)
            })
            .collect())
    }

    /// Average velocity by integrating `dx/dtau = v(x, tau)` from `t` down to
    /// `r` with `n_quad` classical Runge-Kutta steps.
    pub fn brute_force_mean_velocity(&self, x: &[f64], r: f64, t: f64, n_quad: usize) -> Result<Vec<f64>> {
        self.check_point(x)?;
        if n_quad < 100 {
            return Err(CoreError::InvalidInput(format!("n_quad must be at least 100, got {n_quad}")));
        }
        if !(0.0 <= r && r < t && t <= 1.0) {
            return Err(CoreError::InvalidInput(format!("need 0 <= r < t <= 1, got r={r}, t={t}")));
        }
        if self.singular(r) {
            return Err(CoreError::InvalidInput(format!("field is singular at tau = {r}")));
        }
        let h = (r - t) / n_quad as f64;
        let axpy = |a: &[f64], k: f64, b: &[f64]| a.iter().zip(b).map(|(p, q)| p + k * q).collect::<Vec<_>>();
        let mut state = x.to_vec();
        for i in 0..n_quad {
            let tau = t + i as f64 * h;
            // Land exactly on r so rounding never steps past a singular endpoint.
            let next = if i + 1 == n_quad { r } else { t + (i + 1) as f64 * h };
            let mid = 0.5 * (tau + next);
            let k1 = self.velocity(&state, tau)?;
            let k2 = self.velocity(&axpy(&state, h / 2.0, &k1), mid)?;
            let k3 = self.velocity(&axpy(&state, h / 2.0, &k2), mid)?;
            let k4 = self.velocity(&axpy(&state, h, &k3), next)?;
            for (j, s) in state.iter_mut().enumerate() {
                *s += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
        }
        Ok(x.iter().zip(&state).map(|(a, b)| (a - b) / (t - r)).collect())
    }
}

fn closed_form_field(spec: &DatasetSpec) -> Result<OracleField> {
    match spec.kind {
        DataKind::PointMass { .. } | DataKind::IsotropicGaussian { .. } => OracleField::for_spec(spec, None),
        _ => Err(CoreError::InvalidInput(
            "closed-form oracle exists only for point_mass and isotropic_gaussian".into(),
        )),
    }
}

/// `v(x, t)` for point-mass and isotropic Gaussian data.
pub fn oracle_velocity(spec: &DatasetSpec, x: &[f64], t: f64) -> Result<Vec<f64>> {
    closed_form_field(spec)?.velocity(x, t)
}

/// `u(x, r, t)` for point-mass and isotropic Gaussian data.
pub fn oracle_mean_velocity(spec: &DatasetSpec, x: &[f64], r: f64, t: f64) -> Result<Vec<f64>> {
    closed_form_field(spec)?.mean_velocity(x, r, t)
}

/// Numeric `u(x, r, t)` for any analytic dataset, including mixtures.
pub fn brute_force_mean_velocity(spec: &DatasetSpec, x: &[f64], r: f64, t: f64, n_quad: usize) -> Result<Vec<f64>> {
    OracleField::for_spec(spec, None)?.brute_force_mean_velocity(x, r, t, n_quad)
}
