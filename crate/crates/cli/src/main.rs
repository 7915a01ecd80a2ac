//! `cebmv`: data generation, training, probing, robustness, smoothness and
//! sweeps from one JSON run config.
//!
//! Precedence: command-line flags, then the config file, then defaults. When
//! a command takes a checkpoint and no `--config` is given, the
//! `config.resolved.json` written next to the checkpoint is used.
//!
//! Exit codes: 0 success, 1 other failure, 2 config error, 3 training
//! collapse, 4 numeric failure. Failures print one JSON object to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cebmv::checkpoint::{load_stack, save_stack, StackMeta};
use cebmv::config::{Overrides, RunConfig, RESOLVED_CONFIG_FILE};
use cebmv::data::{self, Dataset, Split};
use cebmv::encoders::EncoderStack;
use cebmv::evaluation::{self, extract_features, linear_probe, robustness_csv, robustness_eval};
use cebmv::experiments::{self, Axis, SweepSpec};
use cebmv::lipschitz::{self, Kappas, Perturbation};
use cebmv::losses::Variant;
use cebmv::training::{self, config_hash};
use cebmv::Error;

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Parser)]
#[command(name = "cebmv", version, about = "Compressed multiview self-supervised learning at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// JSON run config (sweep spec for `sweep`).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Sets every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// simclr, c_simclr, byol or c_byol.
    #[arg(long, value_name = "NAME")]
    variant: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_name = "REAL")]
    label_fraction: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/test JSONL files and dataset metadata.
    GenData(Common),
    /// Train an encoder stack and write a checkpoint and metrics.
    Train(Common),
    /// Fit a linear probe on checkpoint features.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Probe accuracy under every shift family and severity.
    Robustness {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Local smoothness report for one checkpoint, or a paired comparison of two.
    Lipschitz {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH", required = true, num_args = 1..=2)]
        checkpoint: Vec<PathBuf>,
    },
    /// Train and probe over a grid of one hyperparameter with paired seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// beta, area_lower_bound, kappa_e or kappa_b (when no spec file is given).
        #[arg(long)]
        axis: Option<String>,
        #[arg(long)]
        n_seeds: Option<usize>,
    },
}

/// Reported failure with its exit code.
struct Failure {
    code: u8,
    body: serde_json::Value,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Config(_) | Error::Json { .. } | Error::Domain(_) => (2, "config"),
            e if e.is_numeric() => (4, "numeric"),
            Error::Io { .. } => (1, "io"),
            Error::Checkpoint(_) => (1, "checkpoint"),
            _ => (1, "internal"),
        };
        let mut body = json!({ "error": kind, "message": e.to_string() });
        if let Error::Json { source, .. } = &e {
            body["line"] = json!(source.line());
            body["column"] = json!(source.column());
        }
        Failure { code, body }
    }
}

type Outcome = Result<serde_json::Value, Failure>;

fn overrides(c: &Common) -> Result<Overrides, Error> {
    Ok(Overrides {
        seed: c.seed,
        out_dir: c.out.clone(),
        variant: c.variant.as_deref().map(Variant::parse).transpose()?,
        beta: c.beta,
        label_fraction: c.label_fraction,
    })
}

/// Config from `--config`, else from next to `checkpoint`, else defaults.
fn load_config(c: &Common, checkpoint: Option<&Path>) -> Result<RunConfig, Error> {
    let base = match (&c.config, checkpoint) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(ck)) => {
            let beside = ck.parent().unwrap_or(Path::new(".")).join(RESOLVED_CONFIG_FILE);
            if beside.exists() {
                RunConfig::load(&beside)?
            } else {
                RunConfig::default()
            }
        }
        (None, None) => RunConfig::default(),
    };
    base.with_overrides(&overrides(c)?)
}

fn guard(dir: &Path, files: &[&str], force: bool) -> Result<(), Error> {
    if force {
        return Ok(());
    }
    match files.iter().map(|f| dir.join(f)).find(|p| p.exists()) {
        Some(p) => Err(Error::Config(format!("{} exists (use --force to overwrite)", p.display()))),
        None => Ok(()),
    }
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| io(d, e))?;
    }
    std::fs::write(path, text).map_err(|e| io(path, e))
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn pretty(v: &serde_json::Value) -> Result<String, Error> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Json { context: "output".into(), source: e })?;
    s.push('\n');
    Ok(s)
}

fn write_config(cfg: &RunConfig, path: &Path) -> Result<(), Error> {
    write(path, &cfg.to_json()?)
}

fn gen_data(c: &Common) -> Outcome {
    let cfg = load_config(c, None)?;
    guard(&cfg.out_dir, &[RESOLVED_CONFIG_FILE], c.force)?;
    data::write_dataset(&cfg.out_dir, &cfg.data, c.force)?;
    write_config(&cfg, &cfg.out_dir.join(RESOLVED_CONFIG_FILE))?;
    Ok(json!({
        "command": "gen-data",
        "out_dir": cfg.out_dir,
        "n_train": cfg.data.n_train,
        "n_test": cfg.data.n_test,
    }))
}

fn train(c: &Common) -> Outcome {
    let cfg = load_config(c, None)?;
    let out = &cfg.out_dir;
    guard(out, &[RESOLVED_CONFIG_FILE, CHECKPOINT_FILE, METRICS_FILE], c.force)?;
    write_config(&cfg, &out.join(RESOLVED_CONFIG_FILE))?;
    let ds = data::generate(&cfg.data, Split::Train)?;
    let outcome = training::train(&cfg.train, &ds)?;
    save_stack(&out.join(CHECKPOINT_FILE), &outcome.stack, &outcome.meta())?;
    write(&out.join(METRICS_FILE), &outcome.metrics_jsonl()?)?;
    let summary = json!({
        "command": "train",
        "checkpoint": out.join(CHECKPOINT_FILE),
        "variant": cfg.train.loss.variant,
        "steps": outcome.steps,
        "final_loss": outcome.metrics.last().map(|m| m.loss),
        "collapse": outcome.collapse,
        "config_hash": outcome.config_hash,
    });
    if outcome.collapse.is_some() {
        let mut body = summary;
        body["error"] = json!("collapse");
        return Err(Failure { code: 3, body });
    }
    Ok(summary)
}

/// Loads a checkpoint that must have been trained with `cfg`.
fn checkpoint_for(cfg: &RunConfig, path: &Path) -> Result<(EncoderStack, StackMeta), Error> {
    let (stack, meta) = load_stack(path)?;
    if meta.config_hash != config_hash(&cfg.train, &cfg.data)? {
        return Err(Error::Config(format!(
            "{} was trained with a different data/train config than the one given",
            path.display()
        )));
    }
    Ok((stack, meta))
}

struct Probed {
    stack: EncoderStack,
    train: Dataset,
    test: Dataset,
    probe: evaluation::LinearProbe,
    result: evaluation::ProbeResult,
    hash: String,
}

fn probe_checkpoint(cfg: &RunConfig, path: &Path) -> Result<Probed, Error> {
    let (stack, meta) = checkpoint_for(cfg, path)?;
    let (train, test) = experiments::datasets(cfg)?;
    let ftr = extract_features(&stack, &train.features()?)?;
    let fte = extract_features(&stack, &test.features()?)?;
    let (probe, result) =
        linear_probe(&ftr, &train.labels(), &fte, &test.labels(), cfg.eval.label_fraction, cfg.eval.seed)?;
    Ok(Probed { stack, train, test, probe, result, hash: meta.config_hash })
}

fn probe(c: &Common, checkpoint: &Path) -> Outcome {
    let cfg = load_config(c, Some(checkpoint))?;
    let stem = format!("probe-lf{}", cfg.eval.label_fraction);
    let (json_name, cfg_name) = (format!("{stem}.json"), format!("{stem}.config.json"));
    guard(&cfg.out_dir, &[&json_name, &cfg_name], c.force)?;
    let p = probe_checkpoint(&cfg, checkpoint)?;
    let body = json!({
        "command": "probe",
        "checkpoint": checkpoint,
        "config_hash": p.hash,
        "result": p.result,
    });
    write_config(&cfg, &cfg.out_dir.join(cfg_name))?;
    write(&cfg.out_dir.join(json_name), &pretty(&body)?)?;
    Ok(body)
}

fn robustness(c: &Common, checkpoint: &Path) -> Outcome {
    let cfg = load_config(c, Some(checkpoint))?;
    let files = ["robustness.csv", "robustness.json", "robustness.config.json"];
    guard(&cfg.out_dir, &files, c.force)?;
    let p = probe_checkpoint(&cfg, checkpoint)?;
    let sigma = p.train.feature_std();
    let rows = robustness_eval(&p.stack, &p.probe, &p.test, &sigma, &evaluation::all_suites(), cfg.eval.shift_seed)?;
    let body = json!({
        "command": "robustness",
        "checkpoint": checkpoint,
        "config_hash": p.hash,
        "probe": p.result,
        "rows": rows,
    });
    write_config(&cfg, &cfg.out_dir.join(files[2]))?;
    write(&cfg.out_dir.join(files[0]), &robustness_csv(&rows))?;
    write(&cfg.out_dir.join(files[1]), &pretty(&body)?)?;
    Ok(json!({ "command": "robustness", "rows": rows.len(), "clean_top1": rows[0].top1 }))
}

fn family_means(r: &lipschitz::SmoothnessReport) -> serde_json::Value {
    r.families.iter().map(|f| (f.family.name().to_string(), json!(f.mean))).collect::<serde_json::Map<_, _>>().into()
}

fn lipschitz_cmd(c: &Common, checkpoints: &[PathBuf]) -> Outcome {
    let cfg = load_config(c, checkpoints.first().map(PathBuf::as_path))?;
    let (train, test) = experiments::datasets(&cfg)?;
    let sigma = train.feature_std();
    let kappas = Kappas::from_loss(&cfg.train.loss);
    let mut stacks = Vec::new();
    for p in checkpoints {
        let (stack, meta) = load_stack(p)?;
        if meta.dims.input_dim != cfg.data.input_dim() {
            return Err(Error::Config(format!("{} expects {} features", p.display(), meta.dims.input_dim)).into());
        }
        stacks.push((p, stack));
    }
    let labels: &[&str] = if stacks.len() == 1 { &["lipschitz"] } else { &["lipschitz-a", "lipschitz-b"] };
    let mut files: Vec<String> = labels.iter().flat_map(|l| [format!("{l}.csv"), format!("{l}.json")]).collect();
    files.push("lipschitz.config.json".into());
    if stacks.len() == 2 {
        files.push("lipschitz-comparison.json".into());
    }
    guard(&cfg.out_dir, &files.iter().map(String::as_str).collect::<Vec<_>>(), c.force)?;
    write_config(&cfg, &cfg.out_dir.join("lipschitz.config.json"))?;
    let mut reports = Vec::new();
    for ((path, stack), label) in stacks.iter().zip(labels) {
        let rep = lipschitz::smoothness_report(stack, kappas, &test, &sigma, &Perturbation::ALL, &cfg.lipschitz)?;
        write(&cfg.out_dir.join(format!("{label}.csv")), &rep.csv())?;
        let summary = json!({ "checkpoint": path, "variant": stack.variant(), "families": rep.summary() });
        write(&cfg.out_dir.join(format!("{label}.json")), &pretty(&summary)?)?;
        reports.push(rep);
    }
    let mut body = json!({
        "command": "lipschitz",
        "means": reports.iter().map(family_means).collect::<Vec<_>>(),
    });
    if reports.len() == 2 {
        let cmp = lipschitz::compare(&reports[0], &reports[1])?;
        let doc = json!({
            "a": checkpoints[0],
            "b": checkpoints[1],
            "rows": cmp.rows.iter().map(|r| json!({
                "family": r.family,
                "a_mean": r.compressed_mean,
                "b_mean": r.uncompressed_mean,
                "a_not_above_b": r.compressed_smoother,
            })).collect::<Vec<_>>(),
            "fraction_a_not_above_b": cmp.fraction_smoother,
        });
        write(&cfg.out_dir.join("lipschitz-comparison.json"), &pretty(&doc)?)?;
        body["fraction_a_not_above_b"] = json!(cmp.fraction_smoother);
    }
    Ok(body)
}

fn sweep(c: &Common, axis: Option<&str>, n_seeds: Option<usize>) -> Outcome {
    let mut spec = match (&c.config, axis) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).map_err(|e| io(p, e))?;
            let mut s: SweepSpec =
                serde_json::from_str(&text).map_err(|e| Error::Json { context: "sweep spec".into(), source: e })?;
            if s.values.is_empty() {
                s.values = s.axis.default_values(s.base.train.loss.variant);
            }
            s
        }
        (None, Some(a)) => SweepSpec::new(Axis::parse(a)?, 3, RunConfig::default()),
        (None, None) => return Err(Error::Config("sweep needs --config or --axis".into()).into()),
    };
    if let Some(a) = axis {
        let a = Axis::parse(a)?;
        if a != spec.axis {
            spec.values = a.default_values(spec.base.train.loss.variant);
            spec.axis = a;
        }
    }
    if let Some(n) = n_seeds {
        spec.n_seeds = n;
    }
    spec.base = spec.base.with_overrides(&overrides(c)?)?;
    let out = spec.base.out_dir.clone();
    guard(&out, &["sweep.csv", "summary.json", "summary.md"], c.force)?;
    let table = experiments::run_sweep(&spec, &out)?;
    Ok(json!({
        "command": "sweep",
        "axis": spec.axis,
        "out_dir": out,
        "summary": table.summary,
    }))
}

fn run(cli: Cli) -> Outcome {
    experiments::init_thread_pool()?;
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => train(c),
        Command::Probe { common, checkpoint } => probe(common, checkpoint),
        Command::Robustness { common, checkpoint } => robustness(common, checkpoint),
        Command::Lipschitz { common, checkpoint } => lipschitz_cmd(common, checkpoint),
        Command::Sweep { common, axis, n_seeds } => sweep(common, axis.as_deref(), *n_seeds),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", f.body);
            ExitCode::from(f.code)
        }
    }
}
