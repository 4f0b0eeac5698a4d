//! Optimizer loop, learning-rate schedule, checkpoints, the two-stage
//! curriculum and run manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use meanflow_autodiff::{backward, AutodiffError, ParamSet, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::container::{self, Entry};
use crate::data::Dataset;
use crate::error::{ensure, CoreError, Result};
use crate::net::{FlowNet, FlowNetConfig};
use crate::objective::{
    cfm_loss_graph, draw_batch, meanflow_loss_graph, GuidanceConfig, ObjectiveKind, TimestepConfig,
};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MFLOWCK1";

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Where a stage's parameters come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StageInit {
    Fresh,
    /// The checkpoint written by the curriculum's first stage.
    FromStage1,
    FromCheckpoint { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub objective: ObjectiveKind,
    pub dataset: String,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub decay_milestones: Vec<f64>,
    pub decay_factor: f64,
    pub timestep: TimestepConfig,
    pub guidance: GuidanceConfig,
    pub init: StageInit,
    #[serde(default = "default_log_interval")]
    pub log_interval: usize,
}

fn default_log_interval() -> usize {
    10
}

impl StageConfig {
    /// A stage with the default schedule shape: 10% warmup, decays at 80% and 90%.
    pub fn new(objective: ObjectiveKind, dataset: &str, steps: usize, batch_size: usize, peak_lr: f64) -> Self {
        StageConfig {
            objective,
            dataset: dataset.to_string(),
            steps,
            batch_size,
            peak_lr,
            warmup_steps: steps / 10,
            decay_milestones: vec![0.8, 0.9],
            decay_factor: 0.1,
            timestep: TimestepConfig::default(),
            guidance: match objective {
                ObjectiveKind::FlowMatching => GuidanceConfig::unguided(0.1),
                ObjectiveKind::MixedFlows => GuidanceConfig::default(),
            },
            init: StageInit::Fresh,
            log_interval: default_log_interval(),
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        ensure(self.batch_size > 0, &format!("{field}.batch_size"), || "must be positive".into())?;
        ensure(
            self.peak_lr.is_finite() && self.peak_lr > 0.0,
            &format!("{field}.peak_lr"),
            || format!("must be positive, got {}", self.peak_lr),
        )?;
        ensure(
            self.decay_milestones.iter().all(|m| *m > 0.0 && *m <= 1.0)
                && self.decay_milestones.windows(2).all(|w| w[0] < w[1]),
            &format!("{field}.decay_milestones"),
            || format!("must be strictly increasing in (0, 1], got {:?}", self.decay_milestones),
        )?;
        ensure(
            self.decay_factor.is_finite() && self.decay_factor > 0.0,
            &format!("{field}.decay_factor"),
            || format!("must be positive, got {}", self.decay_factor),
        )?;
        ensure(self.log_interval > 0, &format!("{field}.log_interval"), || "must be positive".into())?;
        self.timestep.validate(&format!("{field}.timestep"))?;
        self.guidance.validate(&format!("{field}.guidance"))
    }
}

/// Linear warmup to `peak_lr`, then multiplied by `decay_factor` at every
/// milestone fraction of `steps` already reached.
pub fn lr_at(step: usize, cfg: &StageConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let passed = cfg
        .decay_milestones
        .iter()
        .filter(|&&m| step as f64 >= (m * cfg.steps as f64).round())
        .count();
    cfg.peak_lr * cfg.decay_factor.powi(passed as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    pub stage1: StageConfig,
    /// `None` trains a single stage.
    pub stage2: Option<StageConfig>,
    pub seed: u64,
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        self.stage1.validate("curriculum.stage1")?;
        ensure(self.stage1.init != StageInit::FromStage1, "curriculum.stage1.init", || {
            "the first stage cannot start from itself".into()
        })?;
        if let Some(s2) = &self.stage2 {
            s2.validate("curriculum.stage2")?;
            ensure(s2.init == StageInit::FromStage1, "curriculum.stage2.init", || {
                "must be from_stage1".into()
            })?;
        }
        Ok(())
    }
}

/// Mutable training state: parameters, optimizer moments, completed steps
/// and the data/noise stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub params: ParamSet<f32>,
    pub adam_m: ParamSet<f32>,
    pub adam_v: ParamSet<f32>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(params: ParamSet<f32>, rng: ChaCha8Rng) -> Self {
        TrainState {
            step: 0,
            adam_m: params.zeros_like(),
            adam_v: params.zeros_like(),
            params,
            rng,
        }
    }
}

/// Per-stage RNG: the run seed with the stage index as stream.
pub fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fresh parameters for `seed`, drawn from a stream reserved for initialization.
pub fn init_params(net: &FlowNet, seed: u64) -> ParamSet<f32> {
    net.init_params(&mut stage_rng(seed, u64::MAX))
}

/// Adam step with bias correction for update number `t` (1-based).
pub fn adam_update(state: &mut TrainState, grads: &meanflow_autodiff::GradSet<f32>, lr: f64, t: usize) -> Result<()> {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
    let (bc1, bc2, lr, eps) = (bc1 as f32, bc2 as f32, lr as f32, ADAM_EPS as f32);
    let names: Vec<String> = state.params.names().map(str::to_string).collect();
    for name in &names {
        let g = grads.get(name)?;
        let m = state.adam_m.get(name)?.zip_with(g, |m, g| b1 * m + (1.0 - b1) * g)?;
        let v = state.adam_v.get(name)?.zip_with(g, |v, g| b2 * v + (1.0 - b2) * g * g)?;
        let step: Vec<f32> = m
            .data()
            .iter()
            .zip(v.data())
            .map(|(&m, &v)| lr * (m / bc1) / ((v / bc2).sqrt() + eps))
            .collect();
        let p = state.params.get(name)?;
        let p = p.zip_with(&Tensor::new(p.shape().to_vec(), step)?, |p, s| p - s)?;
        state.params.set(name, p)?;
        state.adam_m.set(name, m)?;
        state.adam_v.set(name, v)?;
    }
    Ok(())
}

/// One line of a metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

/// Check that a dataset fits the network.
pub fn check_compatible(net: &FlowNet, data: &Dataset) -> Result<()> {
    let c = net.config();
    let [l, d] = data.sample_shape();
    if d != c.latent_dim || l > c.max_seq_len || data.spec().n_labels > c.n_labels {
        return Err(CoreError::InvalidInput(format!(
            "dataset samples [{l}, {d}] with {} labels do not fit the model (latent_dim {}, max_seq_len {}, n_labels {})",
            data.spec().n_labels,
            c.latent_dim,
            c.max_seq_len,
            c.n_labels
        )));
    }
    Ok(())
}

fn is_non_finite(e: &CoreError) -> bool {
    matches!(e, CoreError::NonFinite { .. } | CoreError::Autodiff(AutodiffError::NonFinite { .. }))
}

/// Run optimizer updates until `state.step == until`. Returns the per-step
/// losses; `on_log` sees every `log_interval`-th record and the last one.
/// A non-finite loss or gradient aborts, writing the pre-step state to
/// `snapshot` when given.
pub fn train_until(
    net: &FlowNet,
    stage: &StageConfig,
    data: &Dataset,
    state: &mut TrainState,
    until: usize,
    snapshot: Option<&Path>,
    on_log: &mut dyn FnMut(&MetricRecord) -> Result<()>,
) -> Result<Vec<f64>> {
    check_compatible(net, data)?;
    let start = Instant::now();
    let mut losses = Vec::with_capacity(until.saturating_sub(state.step));
    while state.step < until {
        let before = snapshot.map(|_| state.clone());
        let batch = draw_batch::<f32, _>(
            data,
            stage.batch_size,
            stage.objective,
            &stage.timestep,
            &stage.guidance,
            &mut state.rng,
        )?;
        let lg = match stage.objective {
            ObjectiveKind::FlowMatching => cfm_loss_graph(net, &state.params, &batch),
            ObjectiveKind::MixedFlows => meanflow_loss_graph(net, &state.params, &batch, &stage.guidance),
        };
        let diverged = |what: &str, state: &TrainState| -> Result<CoreError> {
            let snapshot = match (snapshot, &before) {
                (Some(path), Some(prev)) => {
                    Checkpoint::new(net.config().clone(), serde_json::to_value(stage)?, prev.clone()).save(path)?;
                    Some(path.to_path_buf())
                }
                _ => None,
            };
            Ok(CoreError::Diverged {
                what: what.into(),
                step: state.step,
                snapshot,
            })
        };
        let lg = match lg {
            Ok(lg) => lg,
            Err(e) if is_non_finite(&e) => return Err(diverged("loss", state)?),
            Err(e) => return Err(e),
        };
        let loss = lg.value();
        let grads = match backward(&lg.graph, lg.loss, &lg.params).map_err(CoreError::from) {
            Ok(g) if g.max_abs().is_finite() => g,
            Ok(_) => return Err(diverged("gradient", state)?),
            Err(e) if is_non_finite(&e) => return Err(diverged("gradient", state)?),
            Err(e) => return Err(e),
        };
        let lr = lr_at(state.step + 1, stage);
        adam_update(state, &grads, lr, state.step + 1)?;
        state.step += 1;
        losses.push(loss);
        if state.step % stage.log_interval == 0 || state.step == until {
            on_log(&MetricRecord {
                step: state.step,
                loss,
                lr,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            })?;
        }
    }
    Ok(losses)
}

/// Outcome of one stage.
#[derive(Debug, Clone)]
pub struct StageResult {
    pub state: TrainState,
    pub losses: Vec<f64>,
    pub wall_ms: f64,
}

/// Train a whole stage from `state`, appending metrics to `metrics` as JSON lines.
pub fn train_stage(
    net: &FlowNet,
    stage: &StageConfig,
    data: &Dataset,
    mut state: TrainState,
    metrics: Option<&Path>,
    snapshot: Option<&Path>,
) -> Result<StageResult> {
    let start = Instant::now();
    let mut log = Vec::new();
    let losses = train_until(net, stage, data, &mut state, stage.steps, snapshot, &mut |r| {
        serde_json::to_writer(&mut log, r)?;
        log.push(b'\n');
        Ok(())
    });
    if let Some(path) = metrics {
        let mut f = fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
        f.write_all(&log).map_err(|e| CoreError::io(path, e))?;
    }
    Ok(StageResult {
        state,
        losses: losses?,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Serialized training state plus the model and config it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: FlowNetConfig,
    pub config: Value,
    pub state: TrainState,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

impl Checkpoint {
    pub fn new(model: FlowNetConfig, config: Value, state: TrainState) -> Self {
        Checkpoint { model, config, state }
    }

    fn meta(&self) -> Value {
        json!({
            "model": self.model,
            "config": self.config,
            "step": self.state.step,
            "rng": {
                "seed": hex(&self.state.rng.get_seed()),
                "stream": self.state.rng.get_stream(),
                "word_pos": self.state.rng.get_word_pos().to_string(),
            },
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        container::encode(CHECKPOINT_MAGIC, self.meta(), &self.entries())
    }

    fn entries(&self) -> Vec<Entry> {
        let mut out = Vec::new();
        for (prefix, set) in [
            ("param", &self.state.params),
            ("adam_m", &self.state.adam_m),
            ("adam_v", &self.state.adam_v),
        ] {
            out.extend(set.iter().map(|(n, t)| Entry::from_tensor(format!("{prefix}/{n}"), t)));
        }
        out
    }

    /// Atomic write.
    pub fn save(&self, path: &Path) -> Result<()> {
        container::write(path, CHECKPOINT_MAGIC, self.meta(), &self.entries())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, entries) = container::read(path, CHECKPOINT_MAGIC)?;
        Self::from_parts(path, meta, entries)
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let (meta, entries) = container::decode(path, CHECKPOINT_MAGIC, bytes)?;
        Self::from_parts(path, meta, entries)
    }

    fn from_parts(path: &Path, meta: Value, entries: Vec<Entry>) -> Result<Self> {
        let corrupt = |reason: String| CoreError::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let model: FlowNetConfig = serde_json::from_value(meta["model"].clone())
            .map_err(|e| corrupt(format!("bad model config: {e}")))?;
        let step = meta["step"].as_u64().ok_or_else(|| corrupt("missing step".into()))? as usize;
        let rng_meta = &meta["rng"];
        let seed: [u8; 32] = rng_meta["seed"]
            .as_str()
            .and_then(unhex)
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| corrupt("bad rng seed".into()))?;
        let stream = rng_meta["stream"].as_u64().ok_or_else(|| corrupt("bad rng stream".into()))?;
        let word_pos: u128 = rng_meta["word_pos"]
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("bad rng position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let mut sets = [ParamSet::new(), ParamSet::new(), ParamSet::new()];
        for e in &entries {
            let (prefix, name) = e
                .name
                .split_once('/')
                .ok_or_else(|| corrupt(format!("unexpected tensor `{}`", e.name)))?;
            let idx = match prefix {
                "param" => 0,
                "adam_m" => 1,
                "adam_v" => 2,
                _ => return Err(corrupt(format!("unexpected tensor `{}`", e.name))),
            };
            sets[idx]
                .insert(name, e.tensor::<f32>()?)
                .map_err(|_| corrupt(format!("duplicate tensor `{}`", e.name)))?;
        }
        let [params, adam_m, adam_v] = sets;
        let net = FlowNet::new(model.clone())?;
        net.check_params(&params)?;
        net.check_params(&adam_m)?;
        net.check_params(&adam_v)?;
        Ok(Checkpoint {
            model,
            config: meta["config"].clone(),
            state: TrainState {
                step,
                params,
                adam_m,
                adam_v,
                rng,
            },
        })
    }

    /// Confirm the parameters fit `net`, naming the first mismatch.
    pub fn check_model(&self, net: &FlowNet) -> Result<()> {
        net.check_params(&self.state.params)
    }
}

/// Trailing moving average with window `w`.
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// Unstable when any loss is non-finite or the smoothed loss at the end is
/// above 0.9 times its value at 10% of the budget.
pub fn is_unstable(losses: &[f64]) -> bool {
    if losses.is_empty() {
        return false;
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return true;
    }
    let s = smooth(losses, (losses.len() / 20).max(1));
    let early = s[(losses.len() / 10).min(s.len() - 1)];
    s[s.len() - 1] > 0.9 * early
}

/// Mean of the last `w` losses.
pub fn final_smoothed(losses: &[f64], w: usize) -> f64 {
    let w = w.clamp(1, losses.len().max(1));
    let tail = &losses[losses.len().saturating_sub(w)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub name: String,
    pub steps: usize,
    pub final_loss: f64,
    pub smoothed_final_loss: f64,
    pub unstable: bool,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub wall_ms: f64,
}

/// Record of one training run. The hash covers every field except timings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub seed: u64,
    pub config: Value,
    pub env: Value,
    pub stages: Vec<StageSummary>,
    pub final_metrics: Value,
    pub wall_ms: f64,
}

fn strip_timing(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.retain(|k, _| k != "wall_ms");
            map.values_mut().for_each(strip_timing);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

impl RunManifest {
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        strip_timing(&mut v);
        Ok(sha256_hex(serde_json::to_string(&v)?.as_bytes()))
    }

    /// Pretty JSON with the hash attached.
    pub fn to_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        v["hash"] = Value::String(self.hash()?);
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

/// Datasets and output location for a curriculum run.
pub struct CurriculumInputs<'a> {
    pub net: &'a FlowNet,
    pub resolve: &'a dyn Fn(&str) -> Result<Dataset>,
    pub out_dir: &'a Path,
    pub config_snapshot: Value,
    pub env: Value,
}

fn stage_summary(name: &str, res: &StageResult, path: &Path) -> Result<StageSummary> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    Ok(StageSummary {
        name: name.into(),
        steps: res.state.step,
        final_loss: res.losses.last().copied().unwrap_or(f64::NAN),
        smoothed_final_loss: final_smoothed(&res.losses, (res.losses.len() / 20).max(1)),
        unstable: is_unstable(&res.losses),
        checkpoint: path.file_name().unwrap_or_default().to_string_lossy().into(),
        checkpoint_sha256: sha256_hex(&bytes),
        wall_ms: res.wall_ms,
    })
}

fn initial_state(net: &FlowNet, stage: &StageConfig, seed: u64, stream: u64, stage1: Option<&Path>) -> Result<TrainState> {
    let rng = stage_rng(seed, stream);
    let params = match &stage.init {
        StageInit::Fresh => init_params(net, seed),
        StageInit::FromStage1 => {
            let path = stage1.ok_or_else(|| CoreError::config("init", "from_stage1 outside a curriculum"))?;
            let ck = Checkpoint::load(path)?;
            ck.check_model(net)?;
            ck.state.params
        }
        StageInit::FromCheckpoint { path } => {
            let ck = Checkpoint::load(path)?;
            ck.check_model(net)?;
            ck.state.params
        }
    };
    Ok(TrainState::new(params, rng))
}

/// Stage 1, checkpoint to disk, then stage 2 initialized from the file on
/// disk with fresh optimizer moments. Writes `stage{1,2}.ckpt`,
/// `metrics_stage{1,2}.jsonl` and returns the final checkpoint and manifest.
pub fn run_curriculum(cfg: &CurriculumConfig, inputs: &CurriculumInputs) -> Result<(Checkpoint, RunManifest)> {
    cfg.validate()?;
    let start = Instant::now();
    let out = inputs.out_dir;
    fs::create_dir_all(out).map_err(|e| CoreError::io(out, e))?;
    let net = inputs.net;
    let mut stages = Vec::new();

    let data1 = (inputs.resolve)(&cfg.stage1.dataset)?;
    let s1 = initial_state(net, &cfg.stage1, cfg.seed, 1, None)?;
    let res1 = train_stage(
        net,
        &cfg.stage1,
        &data1,
        s1,
        Some(&out.join("metrics_stage1.jsonl")),
        Some(&out.join("diagnostic_stage1.ckpt")),
    )?;
    let path1 = out.join("stage1.ckpt");
    let mut last = Checkpoint::new(net.config().clone(), inputs.config_snapshot.clone(), res1.state.clone());
    last.save(&path1)?;
    stages.push(stage_summary("stage1", &res1, &path1)?);

    if let Some(stage2) = &cfg.stage2 {
        let data2 = (inputs.resolve)(&stage2.dataset)?;
        let s2 = initial_state(net, stage2, cfg.seed, 2, Some(&path1))?;
        let res2 = train_stage(
            net,
            stage2,
            &data2,
            s2,
            Some(&out.join("metrics_stage2.jsonl")),
            Some(&out.join("diagnostic_stage2.ckpt")),
        )?;
        let path2 = out.join("stage2.ckpt");
        last = Checkpoint::new(net.config().clone(), inputs.config_snapshot.clone(), res2.state.clone());
        last.save(&path2)?;
        stages.push(stage_summary("stage2", &res2, &path2)?);
    }

    let manifest = RunManifest {
        version: 1,
        seed: cfg.seed,
        config: inputs.config_snapshot.clone(),
        env: inputs.env.clone(),
        final_metrics: json!({
            "final_loss": stages.last().map(|s| s.final_loss),
            "smoothed_final_loss": stages.last().map(|s| s.smoothed_final_loss),
        }),
        stages,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((last, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_stage() -> StageConfig {
        let mut s = StageConfig::new(ObjectiveKind::MixedFlows, "d", 10_000, 8, 1e-4);
        s.warmup_steps = 1000;
        s
    }

    #[test]
    fn lr_examples() {
        let s = reference_stage();
        assert_eq!(lr_at(0, &s), 0.0);
        assert_eq!(lr_at(1000, &s), 1e-4);
        assert!((lr_at(8100, &s) - 1e-5).abs() < 1e-18);
        assert!((lr_at(9100, &s) - 1e-6).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for step in 1000..=10_000 {
            let lr = lr_at(step, &s);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn warmup_area() {
        let s = reference_stage();
        let area: f64 = (0..s.warmup_steps).map(|k| 0.5 * (lr_at(k, &s) + lr_at(k + 1, &s))).sum();
        assert!((area - s.peak_lr * s.warmup_steps as f64 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn milestones_validated() {
        let mut s = reference_stage();
        s.decay_milestones = vec![0.9, 0.8];
        let err = s.validate("stage").unwrap_err().to_string();
        assert!(err.contains("stage.decay_milestones"), "{err}");
    }

    #[test]
    fn instability_detector() {
        let falling: Vec<f64> = (0..200).map(|i| 1.0 / (1.0 + i as f64)).collect();
        assert!(!is_unstable(&falling));
        assert!(is_unstable(&vec![1.0; 200]));
        let mut nan = falling.clone();
        nan[150] = f64::NAN;
        assert!(is_unstable(&nan));
    }

    #[test]
    fn manifest_hash_ignores_timing() {
        let mut m = RunManifest {
            version: 1,
            seed: 3,
            config: json!({"a": 1}),
            env: json!({}),
            stages: vec![],
            final_metrics: json!({"wall_ms": 5.0, "loss": 1.0}),
            wall_ms: 10.0,
        };
        let h = m.hash().unwrap();
        m.wall_ms = 99.0;
        m.final_metrics["wall_ms"] = json!(7.0);
        assert_eq!(m.hash().unwrap(), h);
        m.seed = 4;
        assert_ne!(m.hash().unwrap(), h);
    }
}
