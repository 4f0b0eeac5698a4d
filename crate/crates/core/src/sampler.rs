//! Few-step generation by average-velocity displacements on a decreasing
//! uniform time grid.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use meanflow_autodiff::{AutodiffError, Element, ParamSet, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::net::{Condition, FlowNet};

/// Time points from 1 down to 0, `n + 1` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSchedule {
    points: Vec<f64>,
}

impl TimeSchedule {
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn n_steps(&self) -> usize {
        self.points.len() - 1
    }
}

/// Uniform grid `points[i] = 1 - i/n`.
pub fn make_schedule(n_steps: usize) -> Result<TimeSchedule> {
    if n_steps == 0 {
        return Err(CoreError::InvalidInput("schedule needs at least one step".into()));
    }
    let n = n_steps as f64;
    let mut points: Vec<f64> = (0..=n_steps).map(|i| 1.0 - i as f64 / n).collect();
    points[n_steps] = 0.0;
    Ok(TimeSchedule { points })
}

/// Standard-normal prior noise `[B, L, D]`.
pub fn prior_noise<T: Element, R: Rng + ?Sized>(shape: [usize; 3], rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_f64(shape.to_vec(), &v).expect("shape matches length")
}

/// Tag a non-finite failure inside step `step` with its index.
fn at_step(step: usize) -> impl Fn(CoreError) -> CoreError {
    move |e| match e {
        CoreError::Autodiff(AutodiffError::NonFinite { .. }) | CoreError::NonFinite { .. } => {
            CoreError::NonFinite { what: "sampler state".into(), step }
        }
        other => other,
    }
}

/// Round the f64 state to the model precision, rejecting overflow.
fn narrow<T: Element>(x: &Tensor<f64>, index: usize) -> Result<Tensor<T>> {
    Tensor::new(x.shape().to_vec(), x.cast::<T>().into_vec()).map_err(|e| at_step(index)(e.into()))
}

/// One interval `x <- x - (s - s') f(x, s', s)`. The state is carried in f64
/// so f32 models do not accumulate rounding across steps.
fn step<T: Element>(
    net: &FlowNet,
    params: &ParamSet<T>,
    cond: &[Condition],
    x: &Tensor<f64>,
    (r, t): (f64, f64),
    index: usize,
) -> Result<Tensor<f64>> {
    let b = cond.len();
    let f = net
        .eval(params, &narrow::<T>(x, index)?, &vec![r; b], &vec![t; b], cond)
        .map_err(at_step(index))?;
    x.axpy(r - t, &f.cast::<f64>())
        .map_err(|e| at_step(index)(e.into()))
}

fn check_noise<T: Element>(noise: &Tensor<T>, b: usize) -> Result<()> {
    if noise.rank() != 3 || noise.shape()[0] != b {
        return Err(CoreError::InvalidInput(format!(
            "noise shape {:?} does not match {b} conditions",
            noise.shape()
        )));
    }
    Ok(())
}

/// Integrate from the given noise: `x <- x - (s - s') f(x, s', s)` per interval.
pub fn sample_from<T: Element>(
    net: &FlowNet,
    params: &ParamSet<T>,
    cond: &[Condition],
    schedule: &TimeSchedule,
    noise: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_noise(noise, cond.len())?;
    let mut x = noise.cast::<f64>();
    for (i, w) in schedule.points.windows(2).enumerate() {
        x = step(net, params, cond, &x, (w[1], w[0]), i)?;
    }
    narrow(&x, schedule.n_steps() - 1)
}

/// Draw `[B, seq_len, D]` prior noise from `rng` and integrate along `schedule`.
pub fn sample<T: Element, R: Rng + ?Sized>(
    net: &FlowNet,
    params: &ParamSet<T>,
    cond: &[Condition],
    seq_len: usize,
    schedule: &TimeSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let noise = prior_noise([cond.len(), seq_len, net.config().latent_dim], rng);
    sample_from(net, params, cond, schedule, &noise)
}

/// Single-step map `x_0 = x_1 - f(x_1, 0, 1)`.
pub fn one_step<T: Element>(
    net: &FlowNet,
    params: &ParamSet<T>,
    cond: &[Condition],
    noise: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_noise(noise, cond.len())?;
    narrow(&step(net, params, cond, &noise.cast(), (0.0, 1.0), 0)?, 0)
}

/// Euler integration of the instantaneous field `f(x, s, s)`.
pub fn euler_instantaneous<T: Element>(
    net: &FlowNet,
    params: &ParamSet<T>,
    cond: &[Condition],
    n_steps: usize,
    noise: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_noise(noise, cond.len())?;
    let schedule = make_schedule(n_steps)?;
    let b = cond.len();
    let mut x = noise.cast::<f64>();
    for (i, w) in schedule.points.windows(2).enumerate() {
        let f = net
            .eval(params, &narrow::<T>(&x, i)?, &vec![w[0]; b], &vec![w[0]; b], cond)
            .map_err(at_step(i))?;
        x = x.axpy(w[1] - w[0], &f.cast::<f64>()).map_err(|e| at_step(i)(e.into()))?;
    }
    narrow(&x, n_steps - 1)
}

/// One generated sample as written to a dump file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub seed: u64,
    pub label: Option<usize>,
    pub nfe: usize,
    pub values: Vec<f64>,
    pub wall_ms: f64,
}

/// Generate `count` samples for one condition; `wall_ms` is the batch time
/// divided evenly across records.
pub fn sample_records<T: Element, R: Rng + ?Sized>(
    net: &FlowNet,
    params: &ParamSet<T>,
    cond: Condition,
    seq_len: usize,
    nfe: usize,
    count: usize,
    seed: u64,
    rng: &mut R,
) -> Result<Vec<SampleRecord>> {
    let schedule = make_schedule(nfe)?;
    let conds = vec![cond; count];
    let start = Instant::now();
    let x = sample(net, params, &conds, seq_len, &schedule, rng)?;
    let per = start.elapsed().as_secs_f64() * 1e3 / count.max(1) as f64;
    let width = x.numel() / count.max(1);
    let label = match cond {
        Condition::Label(k) => Some(k),
        Condition::Null => None,
    };
    Ok(x.to_f64_vec()
        .chunks(width.max(1))
        .take(count)
        .map(|v| SampleRecord {
            seed,
            label,
            nfe,
            values: v.to_vec(),
            wall_ms: per,
        })
        .collect())
}

pub fn write_records(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    f.write_all(&out).map_err(|e| CoreError::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(make_schedule(1).unwrap().points(), &[1.0, 0.0]);
        assert_eq!(make_schedule(4).unwrap().points(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
        assert!(make_schedule(0).is_err());
        let s = make_schedule(10_000).unwrap();
        assert!(s.points().windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.points()[0], 1.0);
        assert_eq!(*s.points().last().unwrap(), 0.0);
    }
}
