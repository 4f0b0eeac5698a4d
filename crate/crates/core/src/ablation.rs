//! Ablation suites: curriculum vs single-stage baselines, flow mix-up ratio
//! and guidance scale, each with machine-checked trend assertions.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use meanflow_autodiff::ParamSet;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::eval::{nfe_sweep, EvalReport, CSV_HEADER};
use crate::net::FlowNet;
use crate::objective::{GuidanceConfig, ObjectiveKind};
use crate::train::{init_params, is_unstable, stage_rng, train_stage, StageConfig, StageInit, TrainState};

/// Relative tolerance for trend comparisons.
pub const NOISE_BAND: f64 = 0.10;
/// NFE settings every variant is evaluated at.
pub const SUITE_NFES: [usize; 2] = [1, 25];
pub const MIXUP_RATIOS: [f64; 4] = [0.0, 0.25, 0.5, 0.75];
/// `(effective scale, omega, kappa)`.
pub const CFG_GRID: [(f64, f64, f64); 4] = [(1.0, 1.0, 0.0), (2.0, 0.2, 0.9), (3.0, 0.3, 0.9), (4.0, 0.4, 0.9)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Curriculum,
    Mixup,
    CfgScale,
}

impl FromStr for Suite {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "curriculum" => Ok(Suite::Curriculum),
            "mixup" => Ok(Suite::Mixup),
            "cfg_scale" => Ok(Suite::CfgScale),
            other => Err(CoreError::config(
                "suite",
                format!("unknown suite `{other}` (expected curriculum, mixup or cfg_scale)"),
            )),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Curriculum => "curriculum",
            Suite::Mixup => "mixup",
            Suite::CfgScale => "cfg_scale",
        })
    }
}

/// One trained variant evaluated at one NFE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub unstable: bool,
    pub final_loss: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub suite: Suite,
    pub rows: Vec<AblationRow>,
    pub checks: Vec<TrendCheck>,
}

impl AblationOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn row(&self, variant: &str, nfe: usize) -> Result<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.report.nfe == nfe)
            .ok_or_else(|| CoreError::InvalidInput(format!("no row for {variant} at nfe {nfe}")))
    }

    pub fn table_csv(&self) -> String {
        let mut s = format!("variant,unstable,final_loss,{CSV_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.variant, r.unstable, r.final_loss, r.report.csv_row()));
        }
        s
    }

    /// `table.csv` and `checks.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let table = dir.join("table.csv");
        std::fs::write(&table, self.table_csv()).map_err(|e| CoreError::io(&table, e))?;
        let checks = dir.join("checks.json");
        std::fs::write(&checks, serde_json::to_string_pretty(&self.checks)?).map_err(|e| CoreError::io(&checks, e))
    }
}

struct Trained {
    variant: String,
    params: ParamSet<f32>,
    losses: Vec<f64>,
}

/// A variant's stage; divergence counts as an unstable result, not an error.
fn run_stage(
    net: &FlowNet,
    cfg: &RunConfig,
    variant: &str,
    stage: &StageConfig,
    params: ParamSet<f32>,
    stream: u64,
) -> Result<Trained> {
    let data = cfg.dataset(&stage.dataset)?;
    let state = TrainState::new(params.clone(), stage_rng(cfg.curriculum.seed, stream));
    match train_stage(net, stage, &data, state, None, None) {
        Ok(res) => Ok(Trained {
            variant: variant.into(),
            params: res.state.params,
            losses: res.losses,
        }),
        Err(CoreError::Diverged { .. }) => Ok(Trained {
            variant: variant.into(),
            params,
            losses: vec![f64::NAN],
        }),
        Err(e) => Err(e),
    }
}

fn base_stages(cfg: &RunConfig) -> Result<(StageConfig, StageConfig)> {
    let s2 = cfg
        .curriculum
        .stage2
        .clone()
        .ok_or_else(|| CoreError::config("curriculum.stage2", "ablation suites need a second stage"))?;
    Ok((cfg.curriculum.stage1.clone(), s2))
}

fn stage1_params(net: &FlowNet, cfg: &RunConfig, stage1: &StageConfig) -> Result<ParamSet<f32>> {
    let init = init_params(net, cfg.curriculum.seed);
    Ok(run_stage(net, cfg, "stage1", stage1, init, 1)?.params)
}

fn evaluate(net: &FlowNet, cfg: &RunConfig, models: Vec<Trained>, suite: Suite) -> Result<AblationOutcome> {
    let spec = cfg.dataset_spec(&cfg.eval_dataset)?;
    let mut rows = Vec::new();
    for m in models {
        let unstable = is_unstable(&m.losses);
        let final_loss = m.losses.last().copied().unwrap_or(f64::NAN);
        let reports = nfe_sweep(&m.variant, net, &m.params, spec, &SUITE_NFES, &cfg.eval);
        match reports {
            Ok(reports) => rows.extend(reports.into_iter().map(|report| AblationRow {
                variant: m.variant.clone(),
                unstable,
                final_loss,
                report,
            })),
            // Non-finite samples: record an unstable variant with infinite distances.
            Err(CoreError::NonFinite { .. }) => rows.extend(SUITE_NFES.iter().map(|&nfe| AblationRow {
                variant: m.variant.clone(),
                unstable: true,
                final_loss,
                report: EvalReport {
                    model_id: m.variant.clone(),
                    nfe,
                    seed: cfg.eval.seed,
                    sliced_w2: f64::INFINITY,
                    mmd: f64::INFINITY,
                    mode_coverage: vec![],
                    unassigned: 1.0,
                    cond_accuracy: 0.0,
                    wall_per_sample: 0.0,
                },
            })),
            Err(e) => return Err(e),
        }
    }
    Ok(AblationOutcome {
        suite,
        rows,
        checks: Vec::new(),
    })
}

fn check(name: &str, passed: bool, detail: String) -> TrendCheck {
    TrendCheck {
        name: name.into(),
        passed,
        detail,
    }
}

/// Train the suite's model grid, evaluate at NFE 1 and 25 and apply its
/// trend checks.
pub fn run_suite(suite: Suite, cfg: &RunConfig) -> Result<AblationOutcome> {
    cfg.validate()?;
    let net = FlowNet::new(cfg.model.clone())?;
    let (stage1, stage2) = base_stages(cfg)?;
    let s1 = stage1_params(&net, cfg, &stage1)?;
    let mut models = Vec::new();
    match suite {
        Suite::Curriculum => {
            let mut fm = stage2.clone();
            fm.objective = ObjectiveKind::FlowMatching;
            fm.guidance = GuidanceConfig::unguided(stage2.guidance.drop_prob);
            models.push(run_stage(&net, cfg, "fm_only", &fm, s1.clone(), 2)?);

            let mut scratch = stage2.clone();
            scratch.steps = stage1.steps + stage2.steps;
            scratch.warmup_steps = stage1.warmup_steps;
            scratch.init = StageInit::Fresh;
            let init = init_params(&net, cfg.curriculum.seed);
            models.push(run_stage(&net, cfg, "mf_scratch", &scratch, init, 2)?);

            models.push(run_stage(&net, cfg, "curriculum", &stage2, s1, 2)?);
        }
        Suite::Mixup => {
            for ratio in MIXUP_RATIOS {
                let mut s = stage2.clone();
                s.timestep.mixup_ratio = ratio;
                models.push(run_stage(&net, cfg, &format!("mixup_{ratio}"), &s, s1.clone(), 2)?);
            }
        }
        Suite::CfgScale => {
            for (scale, omega, kappa) in CFG_GRID {
                let mut s = stage2.clone();
                s.guidance.omega = omega;
                s.guidance.kappa = kappa;
                models.push(run_stage(&net, cfg, &format!("scale_{scale}"), &s, s1.clone(), 2)?);
            }
        }
    }
    let mut out = evaluate(&net, cfg, models, suite)?;
    out.checks = trend_checks(&out)?;
    Ok(out)
}

/// The suite's acceptance trends over already evaluated rows.
pub fn trend_checks(out: &AblationOutcome) -> Result<Vec<TrendCheck>> {
    let w2 = |v: &str, nfe: usize| out.row(v, nfe).map(|r| r.report.sliced_w2);
    let acc = |v: &str, nfe: usize| out.row(v, nfe).map(|r| r.report.cond_accuracy);
    Ok(match out.suite {
        Suite::Curriculum => {
            let (fm1, fm25) = (w2("fm_only", 1)?, w2("fm_only", 25)?);
            let (c1, c25) = (w2("curriculum", 1)?, w2("curriculum", 25)?);
            vec![
                check(
                    "fm_only_one_step_gap",
                    fm1 >= 5.0 * fm25,
                    format!("fm_only sliced_w2 {fm1:.4} at NFE 1 vs {fm25:.4} at NFE 25 (need >= 5x)"),
                ),
                check(
                    "curriculum_step_invariance",
                    c1 <= 1.5 * c25,
                    format!("curriculum sliced_w2 {c1:.4} at NFE 1 vs {c25:.4} at NFE 25 (need <= 1.5x)"),
                ),
                check(
                    "curriculum_beats_fm_one_step",
                    c1 <= 0.5 * fm1,
                    format!("curriculum {c1:.4} vs fm_only {fm1:.4} at NFE 1 (need <= 0.5x)"),
                ),
            ]
        }
        Suite::Mixup => {
            let names: Vec<String> = MIXUP_RATIOS.iter().map(|r| format!("mixup_{r}")).collect();
            let zero_unstable = out.row(&names[0], 1)?.unstable;
            let worse = SUITE_NFES
                .iter()
                .map(|&n| Ok(w2(&names[0], n)? > w2(&names[3], n)?))
                .collect::<Result<Vec<bool>>>()?;
            let mut inversions = Vec::new();
            for &nfe in &SUITE_NFES {
                for pair in names.windows(2) {
                    let (a, b) = (w2(&pair[0], nfe)?, w2(&pair[1], nfe)?);
                    if b > (1.0 + NOISE_BAND) * a {
                        inversions.push(format!("{} -> {} at NFE {nfe}", pair[0], pair[1]));
                    }
                }
            }
            vec![
                check(
                    "ratio0_unstable_or_worse",
                    zero_unstable || worse.iter().all(|&w| w),
                    format!("ratio 0 unstable: {zero_unstable}; worse than 0.75 at NFE 1/25: {worse:?}"),
                ),
                check(
                    "ratio_trend",
                    inversions.len() <= 1,
                    format!("inversions beyond the noise band: {inversions:?}"),
                ),
            ]
        }
        Suite::CfgScale => {
            let (a1, a3, a4) = (acc("scale_1", 1)?, acc("scale_3", 1)?, acc("scale_4", 1)?);
            vec![
                check(
                    "guidance_improves_accuracy",
                    a3 - a1 >= 0.10,
                    format!("cond_accuracy at NFE 1: scale 3 {a3:.4} vs scale 1 {a1:.4} (need +0.10)"),
                ),
                check(
                    "guidance_plateau",
                    a4 <= (1.0 + NOISE_BAND) * a3,
                    format!("cond_accuracy at NFE 1: scale 4 {a4:.4} vs scale 3 {a3:.4} (band {NOISE_BAND})"),
                ),
            ]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in [Suite::Curriculum, Suite::Mixup, Suite::CfgScale] {
            assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
        }
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn cfg_grid_scales() {
        for (scale, omega, kappa) in CFG_GRID {
            let g = GuidanceConfig { omega, kappa, drop_prob: 0.1 };
            assert_eq!(g.effective_scale(), scale);
        }
    }
}
