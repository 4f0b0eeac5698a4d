use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use meanflow_core::ablation::{run_suite, Suite};
use meanflow_core::config::RunConfig;
use meanflow_core::eval::{nfe_sweep, write_csv, write_jsonl};
use meanflow_core::net::{Condition, FlowNet};
use meanflow_core::sampler::{sample_records, write_records};
use meanflow_core::selftest::{format_table, parse_primitive, run_selftest, SelftestOptions};
use meanflow_core::train::{run_curriculum, Checkpoint, CurriculumInputs};
use meanflow_core::CoreError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const SEED_VAR: &str = "MEANFLOW_SEED";
const THREADS_VAR: &str = "MEANFLOW_THREADS";

#[derive(Parser)]
#[command(name = "meanflow", version, about = "Train, sample and evaluate mean-flow models on toy data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured curriculum and write checkpoints, metrics and a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a JSONL sample dump from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        label: usize,
        #[arg(long)]
        nfe: usize,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint at each NFE and write CSV and JSONL reports.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated NFE values, e.g. `1,2,5,25`.
        #[arg(long, allow_hyphen_values = true)]
        nfe_list: String,
    },
    /// Train and compare an ablation grid: curriculum, mixup or cfg_scale.
    Ablate {
        #[arg(long)]
        suite: String,
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the built-in oracle checks.
    Selftest {
        /// Scale one primitive's derivative rules by 1.5 (test hook).
        #[arg(long, hide = true)]
        corrupt_primitive: Option<String>,
    },
}

/// Message plus process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

/// Configuration and input problems exit 1; numeric failures exit 2.
impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        let code = match e {
            CoreError::Diverged { .. } | CoreError::NonFinite { .. } | CoreError::Autodiff(_) => 2,
            _ => 1,
        };
        Failure::new(code, e.to_string())
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn env_value(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.is_empty())
}

/// Config with the seed override applied, plus the logged environment.
fn load_config(path: &Path) -> std::result::Result<(RunConfig, serde_json::Value), Failure> {
    let mut cfg = RunConfig::load(path)?;
    let seed = env_value(SEED_VAR);
    if let Some(s) = &seed {
        cfg.curriculum.seed = s
            .parse()
            .map_err(|_| Failure::new(1, format!("{SEED_VAR}: `{s}` is not an unsigned integer")))?;
    }
    let threads = env_value(THREADS_VAR);
    if let Some(t) = &threads {
        t.parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Failure::new(1, format!("{THREADS_VAR}: `{t}` is not a positive integer")))?;
    }
    // All compute runs on one thread, so any thread count is serial.
    let env = json!({ SEED_VAR: seed, THREADS_VAR: threads });
    Ok((cfg, env))
}

fn write_file(path: &Path, text: &str) -> CmdResult {
    std::fs::write(path, text).map_err(|e| CoreError::io(path, e).into())
}

fn cmd_train(config: &Path) -> CmdResult {
    let (cfg, env) = load_config(config)?;
    let net = FlowNet::new(cfg.model.clone())?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| CoreError::io(out, e))?;
    write_file(&out.join("config.json"), &cfg.to_json()?)?;
    let resolve = |id: &str| cfg.dataset(id);
    let inputs = CurriculumInputs {
        net: &net,
        resolve: &resolve,
        out_dir: out,
        config_snapshot: serde_json::to_value(&cfg).map_err(CoreError::from)?,
        env,
    };
    let (_, manifest) = run_curriculum(&cfg.curriculum, &inputs)?;
    write_file(&out.join("manifest.json"), &manifest.to_json()?)?;
    for s in &manifest.stages {
        println!("{}: {} steps, final loss {:.6}, checkpoint {}", s.name, s.steps, s.final_loss, out.join(&s.checkpoint).display());
    }
    println!("manifest hash {}", manifest.hash()?);
    Ok(())
}

/// Sequence length of the dataset the checkpoint was evaluated against,
/// falling back to one frame when the stored config is not a run config.
fn checkpoint_seq_len(ck: &Checkpoint) -> usize {
    serde_json::from_value::<RunConfig>(ck.config.clone())
        .ok()
        .and_then(|c| c.dataset_spec(&c.eval_dataset).ok().map(|s| s.sample_shape()[0]))
        .unwrap_or(1)
}

fn cmd_sample(checkpoint: &Path, label: usize, nfe: usize, count: usize, seed: u64, out: &Path) -> CmdResult {
    let ck = Checkpoint::load(checkpoint)?;
    let net = FlowNet::new(ck.model.clone())?;
    ck.check_model(&net)?;
    let n_labels = net.config().n_labels;
    if label >= n_labels {
        return Err(Failure::new(1, format!("label {label} out of range 0..{n_labels}")));
    }
    if count == 0 {
        return Err(Failure::new(1, "count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = sample_records(
        &net,
        &ck.state.params,
        Condition::Label(label),
        checkpoint_seq_len(&ck),
        nfe,
        count,
        seed,
        &mut rng,
    )?;
    if records.iter().any(|r| r.values.iter().any(|v| !v.is_finite())) {
        return Err(Failure::new(2, "sampler produced non-finite values"));
    }
    write_records(out, &records)?;
    println!("wrote {} samples to {}", records.len(), out.display());
    Ok(())
}

fn parse_nfe_list(s: &str) -> std::result::Result<Vec<usize>, Failure> {
    let list: Vec<usize> = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<usize>()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| Failure::new(1, format!("nfe-list: `{p}` is not a positive integer")))
        })
        .collect::<std::result::Result<_, _>>()?;
    if list.is_empty() {
        return Err(Failure::new(1, "nfe-list is empty"));
    }
    Ok(list)
}

fn cmd_eval(checkpoint: &Path, config: &Path, nfe_list: &str) -> CmdResult {
    let nfes = parse_nfe_list(nfe_list)?;
    let (cfg, _) = load_config(config)?;
    let ck = Checkpoint::load(checkpoint)?;
    let net = FlowNet::new(ck.model.clone())?;
    ck.check_model(&net)?;
    let spec = cfg.dataset_spec(&cfg.eval_dataset)?;
    let model_id = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let reports = nfe_sweep(&model_id, &net, &ck.state.params, spec, &nfes, &cfg.eval)?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| CoreError::io(out, e))?;
    write_csv(&out.join(format!("eval_{model_id}.csv")), &reports)?;
    write_jsonl(&out.join(format!("eval_{model_id}.jsonl")), &reports)?;
    for r in &reports {
        println!("{}", r.csv_row());
    }
    if reports.iter().any(|r| !r.is_valid()) {
        return Err(Failure::new(2, "evaluation produced non-finite metrics"));
    }
    Ok(())
}

fn cmd_ablate(suite: &str, config: &Path) -> CmdResult {
    let suite = Suite::from_str(suite)?;
    let (cfg, _) = load_config(config)?;
    let outcome = run_suite(suite, &cfg)?;
    let dir = cfg.output_dir.join(format!("ablate_{suite}"));
    outcome.write(&dir)?;
    print!("{}", outcome.table_csv());
    for c in &outcome.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if !outcome.passed() {
        return Err(Failure::new(3, format!("trend check failed; table written to {}", dir.display())));
    }
    Ok(())
}

fn cmd_selftest(corrupt: Option<&str>) -> CmdResult {
    let opts = SelftestOptions {
        corrupt: corrupt.map(parse_primitive).transpose()?,
        ..SelftestOptions::default()
    };
    let results = run_selftest(&opts);
    print!("{}", format_table(&results));
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(2, format!("selftest failed: {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train { config } => cmd_train(config),
        Command::Sample {
            checkpoint,
            label,
            nfe,
            count,
            seed,
            out,
        } => cmd_sample(checkpoint, *label, *nfe, *count, *seed, out),
        Command::Eval {
            checkpoint,
            config,
            nfe_list,
        } => cmd_eval(checkpoint, config, nfe_list),
        Command::Ablate { suite, config } => cmd_ablate(suite, config),
        Command::Selftest { corrupt_primitive } => cmd_selftest(corrupt_primitive.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nfe_list_parsing() {
        assert_eq!(parse_nfe_list("1,2,5,25").unwrap(), vec![1, 2, 5, 25]);
        assert_eq!(parse_nfe_list("").unwrap_err().code, 1);
        assert_eq!(parse_nfe_list("1,0").unwrap_err().code, 1);
        assert_eq!(parse_nfe_list("1,x").unwrap_err().code, 1);
    }

    #[test]
    fn error_codes() {
        assert_eq!(Failure::from(CoreError::config("a", "b")).code, 1);
        let diverged = CoreError::Diverged {
            what: "loss".into(),
            step: 3,
            snapshot: None,
        };
        assert_eq!(Failure::from(diverged).code, 2);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
