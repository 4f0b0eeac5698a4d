//! Training targets: interpolation path, timestep sampling, condition
//! dropout, guided velocity and the flow-matching / mean-flow losses.

use meanflow_autodiff::{BoundParams, Element, Graph, ParamSet, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{ensure, CoreError, Result};
use crate::net::{Condition, FlowNet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimestepConfig {
    pub mu: f64,
    pub sigma: f64,
    pub mixup_ratio: f64,
}

impl Default for TimestepConfig {
    fn default() -> Self {
        TimestepConfig {
            mu: 0.4,
            sigma: 1.0,
            mixup_ratio: 0.75,
        }
    }
}

impl TimestepConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        ensure(self.mu.is_finite(), &format!("{field}.mu"), || "must be finite".into())?;
        ensure(self.sigma.is_finite() && self.sigma > 0.0, &format!("{field}.sigma"), || {
            format!("must be positive, got {}", self.sigma)
        })?;
        ensure((0.0..=1.0).contains(&self.mixup_ratio), &format!("{field}.mixup_ratio"), || {
            format!("must lie in [0, 1], got {}", self.mixup_ratio)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub omega: f64,
    pub kappa: f64,
    pub drop_prob: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            omega: 0.3,
            kappa: 0.9,
            drop_prob: 0.1,
        }
    }
}

impl GuidanceConfig {
    /// No guidance; condition dropout kept at `drop_prob`.
    pub fn unguided(drop_prob: f64) -> Self {
        GuidanceConfig {
            omega: 1.0,
            kappa: 0.0,
            drop_prob,
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        ensure(self.omega.is_finite(), &format!("{field}.omega"), || "must be finite".into())?;
        ensure(self.kappa.is_finite() && self.kappa < 1.0, &format!("{field}.kappa"), || {
            format!("must be below 1, got {}", self.kappa)
        })?;
        ensure((0.0..=1.0).contains(&self.drop_prob), &format!("{field}.drop_prob"), || {
            format!("must lie in [0, 1], got {}", self.drop_prob)
        })
    }

    /// `omega / (1 - kappa)`, rounded to 12 significant digits so decimal
    /// inputs such as `(0.3, 0.9)` report `3.0` rather than binary round-off.
    pub fn effective_scale(&self) -> f64 {
        round_significant(self.omega / (1.0 - self.kappa), 12)
    }

    /// Weights of `(v_t, f_cond, f_uncond)`; they sum to one.
    pub fn coefficients(&self) -> (f64, f64, f64) {
        (self.omega, self.kappa, 1.0 - self.omega - self.kappa)
    }

    pub fn is_unguided(&self) -> bool {
        self.omega == 1.0 && self.kappa == 0.0
    }
}

/// One training minibatch; `x`, `eps`, `x_t`, `v_t` are `[B, L, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBatch<T> {
    pub x: Tensor<T>,
    pub eps: Tensor<T>,
    pub x_t: Tensor<T>,
    pub v_t: Tensor<T>,
    pub t: Vec<f64>,
    pub r: Vec<f64>,
    /// Condition fed to the model (null where dropped).
    pub cond: Vec<Condition>,
    /// Condition before dropout; guidance targets use it for kept samples.
    pub label: Vec<Condition>,
    pub dropped: Vec<bool>,
}

impl<T: Element> FlowBatch<T> {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Assemble from data and noise, checking shapes and time ranges.
    pub fn new(
        x: Tensor<T>,
        eps: Tensor<T>,
        t: Vec<f64>,
        r: Vec<f64>,
        label: Vec<Condition>,
        dropped: Vec<bool>,
    ) -> Result<Self> {
        let b = t.len();
        if x.rank() != 3 || x.shape()[0] != b || r.len() != b || label.len() != b || dropped.len() != b {
            return Err(CoreError::InvalidInput(format!(
                "inconsistent batch: x {:?}, {} t, {} r, {} labels, {} flags",
                x.shape(),
                b,
                r.len(),
                label.len(),
                dropped.len()
            )));
        }
        if r.iter().zip(&t).any(|(&r, &t)| !(0.0 <= r && r <= t && t <= 1.0)) {
            return Err(CoreError::InvalidInput("batch times must satisfy 0 <= r <= t <= 1".into()));
        }
        let (x_t, v_t) = interpolate(&x, &eps, &t)?;
        let cond = label
            .iter()
            .zip(&dropped)
            .map(|(&c, &d)| if d { Condition::Null } else { c })
            .collect();
        Ok(FlowBatch {
            x,
            eps,
            x_t,
            v_t,
            t,
            r,
            cond,
            label,
            dropped,
        })
    }

    /// The same batch with `r` replaced by `t`.
    pub fn with_r_equal_t(&self) -> Self {
        FlowBatch {
            r: self.t.clone(),
            ..self.clone()
        }
    }
}

fn round_significant(x: f64, digits: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let mag = 10f64.powi(digits - 1 - x.abs().log10().floor() as i32);
    (x * mag).round() / mag
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Two logit-normal draws per element, larger to `t`; then `r := t` with
/// probability `mixup_ratio`.
pub fn sample_timesteps<R: Rng + ?Sized>(b: usize, cfg: &TimestepConfig, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let mut t = Vec::with_capacity(b);
    let mut r = Vec::with_capacity(b);
    for _ in 0..b {
        let a = sigmoid(cfg.mu + cfg.sigma * rng.sample::<f64, _>(StandardNormal));
        let c = sigmoid(cfg.mu + cfg.sigma * rng.sample::<f64, _>(StandardNormal));
        let (hi, lo) = if a >= c { (a, c) } else { (c, a) };
        let mix = rng.random::<f64>() < cfg.mixup_ratio;
        t.push(hi);
        r.push(if mix { hi } else { lo });
    }
    (t, r)
}

/// `x_t = (1 - t) x + t eps` and `v_t = eps - x`, `t` broadcast per sample.
pub fn interpolate<T: Element>(x: &Tensor<T>, eps: &Tensor<T>, t: &[f64]) -> Result<(Tensor<T>, Tensor<T>)> {
    if x.shape() != eps.shape() || x.rank() == 0 || x.shape()[0] != t.len() {
        return Err(CoreError::InvalidInput(format!(
            "interpolate: x {:?}, eps {:?}, {} times",
            x.shape(),
            eps.shape(),
            t.len()
        )));
    }
    let per = x.numel() / t.len().max(1);
    let mut xt = Vec::with_capacity(x.numel());
    let mut vt = Vec::with_capacity(x.numel());
    for (i, (&a, &e)) in x.data().iter().zip(eps.data()).enumerate() {
        let ti = T::from_f64(t[i / per]);
        xt.push((T::one() - ti) * a + ti * e);
        vt.push(e - a);
    }
    Ok((
        Tensor::new(x.shape().to_vec(), xt)?,
        Tensor::new(x.shape().to_vec(), vt)?,
    ))
}

/// Replace each condition by null with probability `p`.
pub fn drop_conditions<R: Rng + ?Sized>(cond: &[Condition], p: f64, rng: &mut R) -> (Vec<Condition>, Vec<bool>) {
    cond.iter()
        .map(|&c| {
            let drop = rng.random::<f64>() < p;
            (if drop { Condition::Null } else { c }, drop)
        })
        .unzip()
}

/// Whether a stage trains the plain flow-matching loss or the mixed mean-flow loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    FlowMatching,
    MixedFlows,
}

/// Draw a minibatch: data, prior noise, times and condition dropout. For
/// flow matching `r` is forced equal to `t`.
pub fn draw_batch<T: Element, R: Rng + ?Sized>(
    data: &Dataset,
    size: usize,
    objective: ObjectiveKind,
    ts: &TimestepConfig,
    guidance: &GuidanceConfig,
    rng: &mut R,
) -> Result<FlowBatch<T>> {
    let (x, labels) = data.batch(size, rng);
    let eps: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
    let (t, r) = sample_timesteps(size, ts, rng);
    let r = match objective {
        ObjectiveKind::FlowMatching => t.clone(),
        ObjectiveKind::MixedFlows => r,
    };
    let label: Vec<Condition> = labels.into_iter().map(Condition::Label).collect();
    let (_, dropped) = drop_conditions(&label, guidance.drop_prob, rng);
    let [l, d] = data.sample_shape();
    let shape = vec![size, l, d];
    FlowBatch::new(
        Tensor::from_f64(shape.clone(), &x)?,
        Tensor::from_f64(shape, &eps)?,
        t,
        r,
        label,
        dropped,
    )
}

/// `omega v_t + kappa f_cond + (1 - omega - kappa) f_uncond`.
pub fn guided_velocity<T: Element>(
    v_t: &Tensor<T>,
    f_cond: &Tensor<T>,
    f_uncond: &Tensor<T>,
    g: &GuidanceConfig,
) -> Result<Tensor<T>> {
    let (a, b, c) = g.coefficients();
    debug_assert!((a + b + c - 1.0).abs() < 1e-12);
    let (a, b, c) = (T::from_f64(a), T::from_f64(b), T::from_f64(c));
    let vc = v_t.zip_with(f_cond, |v, f| a * v + b * f)?;
    Ok(vc.zip_with(f_uncond, |s, u| s + c * u)?)
}

fn time_tensor<T: Element>(v: &[f64]) -> Result<Tensor<T>> {
    Ok(Tensor::from_f64(vec![v.len()], v)?)
}

/// Primal `f(x_t, r, t)` and its total time derivative along the tangent
/// `(v_t, r_tangent, 1)`; the mean-flow target uses `r_tangent = 0`.
pub fn model_jvp<T: Element>(
    net: &FlowNet,
    params: &ParamSet<T>,
    batch: &FlowBatch<T>,
    r_tangent: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let b = batch.len();
    let mut g = Graph::new();
    let p = params.bind_constant(&mut g);
    let x = g.input(batch.x_t.clone(), Some(batch.v_t.clone()))?;
    let r = g.input(time_tensor(&batch.r)?, Some(Tensor::full(&[b], T::from_f64(r_tangent))?))?;
    let t = g.input(time_tensor(&batch.t)?, Some(Tensor::ones(&[b])))?;
    let out = net.forward(&mut g, &p, x, r, t, &batch.cond)?;
    Ok((g.value(out).clone(), g.tangent_or_zeros(out)))
}

/// Guided instantaneous velocity per sample: kept samples mix in the
/// conditional and unconditional predictions at `r = t`, dropped samples use
/// `v_t` unchanged.
pub fn guided_target_velocity<T: Element>(
    net: &FlowNet,
    params: &ParamSet<T>,
    batch: &FlowBatch<T>,
    guidance: &GuidanceConfig,
) -> Result<Tensor<T>> {
    if guidance.is_unguided() || batch.dropped.iter().all(|&d| d) {
        return Ok(batch.v_t.clone());
    }
    let b = batch.len();
    let shape = batch.x_t.shape().to_vec();
    let mut stacked = batch.x_t.to_vec();
    stacked.extend_from_slice(batch.x_t.data());
    let mut both_shape = shape.clone();
    both_shape[0] *= 2;
    let mut times = batch.t.clone();
    times.extend_from_slice(&batch.t);
    let mut cond = batch.label.clone();
    cond.extend(std::iter::repeat_n(Condition::Null, b));
    let out = net.eval(params, &Tensor::new(both_shape, stacked)?, &times, &times, &cond)?;
    let half = out.numel() / 2;
    let f_cond = Tensor::new(shape.clone(), out.data()[..half].to_vec())?;
    let f_uncond = Tensor::new(shape.clone(), out.data()[half..].to_vec())?;
    let guided = guided_velocity(&batch.v_t, &f_cond, &f_uncond, guidance)?;
    let per = half / b;
    let mixed = guided
        .data()
        .iter()
        .zip(batch.v_t.data())
        .enumerate()
        .map(|(i, (&gv, &v))| if batch.dropped[i / per] { v } else { gv })
        .collect();
    Ok(Tensor::new(shape, mixed)?)
}

/// `u_tgt = v_cfg - (t - r) * d/dt f`, computed without parameter gradients.
pub fn meanflow_target<T: Element>(
    net: &FlowNet,
    params: &ParamSet<T>,
    batch: &FlowBatch<T>,
    guidance: &GuidanceConfig,
) -> Result<Tensor<T>> {
    let (_, dudt) = model_jvp(net, params, batch, 0.0)?;
    let v_cfg = guided_target_velocity(net, params, batch, guidance)?;
    let per = dudt.numel() / batch.len().max(1);
    let data = v_cfg
        .data()
        .iter()
        .zip(dudt.data())
        .enumerate()
        .map(|(i, (&v, &d))| {
            let j = i / per;
            v - T::from_f64(batch.t[j] - batch.r[j]) * d
        })
        .collect();
    Ok(Tensor::new(v_cfg.shape().to_vec(), data)?)
}

/// A recorded loss ready for [`meanflow_autodiff::backward`].
pub struct LossGraph<T> {
    pub graph: Graph<T>,
    pub loss: Var,
    pub params: BoundParams,
}

impl<T: Element> LossGraph<T> {
    pub fn value(&self) -> f64 {
        self.graph.value(self.loss).data()[0].as_f64()
    }
}

/// `mean((f(x_t, r, t) - target)^2)` with `target` a constant.
pub fn regression_loss_graph<T: Element>(
    net: &FlowNet,
    params: &ParamSet<T>,
    batch: &FlowBatch<T>,
    r: &[f64],
    target: &Tensor<T>,
) -> Result<LossGraph<T>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let x = g.constant(batch.x_t.clone());
    let rv = g.constant(time_tensor(r)?);
    let tv = g.constant(time_tensor(&batch.t)?);
    let pred = net.forward(&mut g, &p, x, rv, tv, &batch.cond)?;
    let tgt = g.constant(target.clone());
    let diff = g.sub(pred, tgt)?;
    let sq = g.square(diff)?;
    let loss = g.mean_all(sq)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(CoreError::NonFinite { what: "loss".into(), step: 0 });
    }
    Ok(LossGraph { graph: g, loss, params: p })
}

/// Flow-matching loss graph: regress `f(x_t, t, t)` onto `v_t`.
pub fn cfm_loss_graph<T: Element>(net: &FlowNet, params: &ParamSet<T>, batch: &FlowBatch<T>) -> Result<LossGraph<T>> {
    regression_loss_graph(net, params, batch, &batch.t, &batch.v_t)
}

/// Mean-flow loss graph: regress `f(x_t, r, t)` onto the stopped target.
pub fn meanflow_loss_graph<T: Element>(
    net: &FlowNet,
    params: &ParamSet<T>,
    batch: &FlowBatch<T>,
    guidance: &GuidanceConfig,
) -> Result<LossGraph<T>> {
    let target = meanflow_target(net, params, batch, guidance)?;
    regression_loss_graph(net, params, batch, &batch.r, &target)
}

pub fn cfm_loss<T: Element>(net: &FlowNet, params: &ParamSet<T>, batch: &FlowBatch<T>) -> Result<f64> {
    Ok(cfm_loss_graph(net, params, batch)?.value())
}

pub fn meanflow_loss<T: Element>(
    net: &FlowNet,
    params: &ParamSet<T>,
    batch: &FlowBatch<T>,
    guidance: &GuidanceConfig,
) -> Result<f64> {
    Ok(meanflow_loss_graph(net, params, batch, guidance)?.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn interpolation_examples() {
        let x = Tensor::<f64>::new(vec![1, 1, 2], vec![1.0, -1.0]).unwrap();
        let e = Tensor::zeros(&[1, 1, 2]);
        let (xt, vt) = interpolate(&x, &e, &[0.5]).unwrap();
        assert_eq!(xt.data(), &[0.5, -0.5]);
        assert_eq!(vt.data(), &[-1.0, 1.0]);
        let (xt, _) = interpolate(&x, &e, &[0.0]).unwrap();
        assert_eq!(xt, x);
        let (xt, _) = interpolate(&x, &e, &[1.0]).unwrap();
        assert_eq!(xt, e);
    }

    #[test]
    fn effective_scale_of_reference_setting() {
        let g = GuidanceConfig { omega: 0.3, kappa: 0.9, drop_prob: 0.1 };
        assert_eq!(g.effective_scale(), 3.0);
        let (a, b, c) = g.coefficients();
        assert!((a + b + c - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mixup_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let all = TimestepConfig { mixup_ratio: 1.0, ..Default::default() };
        let (t, r) = sample_timesteps(1000, &all, &mut rng);
        assert_eq!(t, r);
        let none = TimestepConfig { mixup_ratio: 0.0, ..Default::default() };
        let (t, r) = sample_timesteps(1000, &none, &mut rng);
        assert!(t.iter().zip(&r).all(|(a, b)| a > b));
        assert!(t.iter().chain(&r).all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn dropout_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = vec![Condition::Label(1); 50];
        assert_eq!(drop_conditions(&c, 0.0, &mut rng).0, c);
        assert!(drop_conditions(&c, 1.0, &mut rng).0.iter().all(|&c| c == Condition::Null));
    }

    #[test]
    fn config_validation_names_field() {
        let ts = TimestepConfig { mixup_ratio: 1.5, ..Default::default() };
        let err = ts.validate("stage2.timestep").unwrap_err().to_string();
        assert!(err.contains("stage2.timestep.mixup_ratio"), "{err}");
        assert!(GuidanceConfig { kappa: 1.0, ..Default::default() }.validate("g").is_err());
    }
}
