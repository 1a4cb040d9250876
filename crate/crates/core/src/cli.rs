//! Command-line front end. Flags fill a JSON document, `--config` is merged
//! over it, and the result is deserialized into the subcommand's settings.

use std::io::Read;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::adaptation::{
    check_applicability, closed_form_target, fit_source_ols, nonparam_adapt,
    relative_missingness_from_rates, ClosedFormOptions, LinearModel, Method, OlsTrainer,
};
use crate::datagen::preprocess::{preprocess, PreprocessSpec};
use crate::datagen::{apply_mask, generate_clean, ScenarioKind, ScenarioParams, ScenarioSpec};
use crate::distributions::{
    corrupt_distribution, recover_clean, transport_source_to_target, DiscreteJoint, MissRates,
    RelMiss,
};
use crate::error::DamsError;
use crate::harness::{run_experiment, write_atomic, write_outputs, ExperimentConfig};
use crate::moments::{estimate_nonzero_rates, relative_missingness_bound, BoundReport};
use crate::table::{LabeledTable, UnlabeledTable};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_NOT_APPLICABLE: i32 = 4;
pub const EXIT_INVALID_DISTRIBUTION: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "dams", version, about = "Domain adaptation under missingness shift")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic dataset; optionally also a masked copy.
    Generate(GenerateArgs),
    /// Fit a target-domain linear model from labeled source and unlabeled target CSVs.
    Adapt(AdaptArgs),
    /// Run a repeated-trial experiment described by a JSON config.
    Experiment(ExperimentArgs),
    /// Corrupt, recover or transport a discrete joint distribution.
    Dist(DistArgs),
    /// Turn a raw mixed-type CSV into numeric covariates.
    Preprocess(PreprocessArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON file whose fields override the flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-feature missingness rates, comma separated.
    #[arg(long)]
    pub mask: Option<String>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long)]
    pub label: Option<String>,
    /// source | closed_form | nonparam
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct DistArgs {
    #[command(subcommand)]
    pub op: DistOp,
}

#[derive(Debug, Subcommand)]
pub enum DistOp {
    Corrupt(DistIo),
    Recover(DistIo),
    Transport(DistIo),
}

#[derive(Debug, Args)]
pub struct DistIo {
    /// Distribution JSON; `-` or absent reads stdin.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Missingness rates (corrupt, recover), comma separated.
    #[arg(long = "m")]
    pub m: Option<String>,
    /// Relative missingness (transport), comma separated.
    #[arg(long = "r")]
    pub r: Option<String>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Output CSV; defaults to `<out-dir>/preprocessed.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<DamsError> for CliError {
    fn from(e: DamsError) -> Self {
        let code = match &e {
            DamsError::Singular { .. } | DamsError::NeverObserved { .. } => EXIT_NUMERICAL,
            DamsError::NotApplicable { .. } => EXIT_NOT_APPLICABLE,
            DamsError::InvalidDistribution(_)
            | DamsError::NegativeMass { .. }
            | DamsError::NonInvertibleRates { .. } => EXIT_INVALID_DISTRIBUTION,
            _ => EXIT_USAGE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn parse_list(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| usage(format!("`{t}` is not a number")))
        })
        .collect()
}

/// Recursively overlays `top` on `base`.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, t) => *b = t,
    }
}

fn settings<T: for<'de> Deserialize<'de>>(flags: Map<String, Value>, config: Option<&Path>) -> CliResult<T> {
    let mut doc = Value::Object(flags);
    if let Some(path) = config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let overlay: Value = serde_json::from_str(&text)
            .map_err(|e| usage(format!("malformed config {}: {e}", path.display())))?;
        merge(&mut doc, overlay);
    }
    serde_json::from_value(doc).map_err(|e| usage(format!("invalid settings: {e}")))
}

fn put(map: &mut Map<String, Value>, key: &str, v: Option<Value>) {
    if let Some(v) = v {
        map.insert(key.to_string(), v);
    }
}

fn out_dir(common: &Common) -> PathBuf {
    common.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(DamsError::from)?;
    }
    write_atomic(path, bytes)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn json_bytes<T: Serialize>(v: &T) -> CliResult<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v).map_err(DamsError::from)?;
    out.push(b'\n');
    Ok(out)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateSettings {
    scenario: ScenarioKind,
    n: usize,
    seed: u64,
    #[serde(default)]
    params: ScenarioParams,
    #[serde(default)]
    mask: Option<Vec<f64>>,
}

fn cmd_generate(args: GenerateArgs) -> CliResult<()> {
    let mut flags = Map::new();
    put(&mut flags, "scenario", args.scenario.map(Value::from));
    put(&mut flags, "n", args.n.map(Value::from));
    put(&mut flags, "seed", args.seed.map(Value::from));
    if let Some(m) = &args.mask {
        flags.insert("mask".into(), json!(parse_list(m)?));
    }
    let s: GenerateSettings = settings(flags, args.common.config.as_deref())?;
    let clean = generate_clean(&ScenarioSpec {
        kind: s.scenario,
        params: s.params,
        n: s.n,
        seed: s.seed,
    })?;
    let dir = out_dir(&args.common);
    let mut buf = Vec::new();
    clean.write_csv(&mut buf)?;
    write_file(&dir.join("clean.csv"), &buf)?;
    if let Some(m) = s.mask {
        let m = MissRates::new(m)?;
        let corrupted = LabeledTable::new(
            apply_mask(&clean.x, &m, s.seed)?,
            clean.y.clone(),
            clean.label.clone(),
        )?;
        let mut buf = Vec::new();
        corrupted.write_csv(&mut buf)?;
        write_file(&dir.join("corrupted.csv"), &buf)?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdaptSettings {
    source: PathBuf,
    target: PathBuf,
    #[serde(default = "default_label")]
    label: String,
    #[serde(default = "default_method")]
    method: Method,
    #[serde(default = "default_delta")]
    delta: f64,
    #[serde(default)]
    alpha: Option<f64>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    intercept: bool,
    #[serde(default)]
    ridge_fallback: bool,
}

fn default_label() -> String {
    "y".into()
}

fn default_method() -> Method {
    Method::ClosedForm
}

fn default_delta() -> f64 {
    0.05
}

#[derive(Debug, Serialize)]
struct AdaptReport {
    method: Method,
    n_source: usize,
    n_target: usize,
    q_s: Vec<f64>,
    q_t: Vec<f64>,
    r_hat: Option<Vec<f64>>,
    bound: Option<BoundReport>,
    applicable: bool,
    dropped: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ridge: Option<f64>,
}

fn cmd_adapt(args: AdaptArgs) -> CliResult<()> {
    let mut flags = Map::new();
    put(&mut flags, "source", args.source.map(|p| json!(p)));
    put(&mut flags, "target", args.target.map(|p| json!(p)));
    put(&mut flags, "label", args.label.map(Value::from));
    put(&mut flags, "method", args.method.map(Value::from));
    put(&mut flags, "delta", args.delta.map(Value::from));
    put(&mut flags, "alpha", args.alpha.map(Value::from));
    put(&mut flags, "seed", args.seed.map(Value::from));
    let s: AdaptSettings = settings(flags, args.common.config.as_deref())?;
    if s.method == Method::Oracle {
        return Err(usage("--method must be one of source, closed_form, nonparam"));
    }
    let source = LabeledTable::read_csv(&s.source, &s.label)?;
    let target = UnlabeledTable::read_csv_ignoring(&s.target, &s.label)?;
    if source.x.names() != target.names() {
        return Err(usage("source and target CSVs must have the same covariate columns"));
    }
    let q_s = estimate_nonzero_rates(&source.x)?;
    let q_t = estimate_nonzero_rates(&target)?;
    let r_hat = relative_missingness_from_rates(&q_s, &q_t).ok();
    let bound = match &r_hat {
        Some(r) if q_s.iter().all(|&q| q > 0.0) => Some(relative_missingness_bound(
            &q_s,
            r,
            source.n_rows(),
            target.n_rows(),
            s.delta,
        )?),
        _ => None,
    };
    let applicable = r_hat.as_ref().is_some_and(check_applicability);

    let (model, alpha_s, ridge): (LinearModel, _, _) = match s.method {
        Method::Source => (fit_source_ols(&source, 0.0)?, None, None),
        Method::ClosedForm => {
            let fit = closed_form_target(
                &source,
                &target,
                &ClosedFormOptions {
                    alpha_override: s.alpha,
                    ridge_fallback: s.ridge_fallback,
                    intercept: s.intercept,
                },
            )?;
            (fit.model, Some(fit.alpha_s), fit.ridge)
        }
        Method::Nonparam => {
            let seed = s
                .seed
                .ok_or_else(|| usage("--seed is required for --method nonparam"))?;
            (
                nonparam_adapt(&source, &target, &OlsTrainer::default(), seed)?.model,
                None,
                None,
            )
        }
        Method::Oracle => unreachable!(),
    };
    let report = AdaptReport {
        method: s.method,
        n_source: source.n_rows(),
        n_target: target.n_rows(),
        q_s,
        q_t,
        r_hat: r_hat.map(Vec::from),
        bound,
        applicable,
        dropped: model.dropped.clone(),
        alpha_s,
        ridge,
    };
    let dir = out_dir(&args.common);
    write_file(&dir.join("model.json"), &json_bytes(&model)?)?;
    write_file(&dir.join("report.json"), &json_bytes(&report)?)?;
    Ok(())
}

fn cmd_experiment(args: ExperimentArgs) -> CliResult<()> {
    let mut flags = Map::new();
    if args.scenario.is_some() || args.n.is_some() {
        let mut data = Map::new();
        data.insert("type".into(), json!("scenario"));
        put(&mut data, "kind", args.scenario.map(Value::from));
        put(&mut data, "n", args.n.map(Value::from));
        flags.insert("data".into(), Value::Object(data));
        flags.insert("regime".into(), json!({"type": "epsilon_grid"}));
    }
    put(&mut flags, "seed", args.seed.map(Value::from));
    put(&mut flags, "alpha_override", args.alpha.map(Value::from));
    let cfg: ExperimentConfig = settings(flags, args.common.config.as_deref())?;
    cfg.validate()?;
    let result = run_experiment(&cfg)?;
    let dir = out_dir(&args.common);
    write_outputs(&result, &dir)?;
    eprintln!(
        "{} trials in {:.2} s; results in {}",
        result.trials.len(),
        result.wall_time_secs,
        dir.display()
    );
    Ok(())
}

fn read_distribution(input: Option<&Path>) -> CliResult<DiscreteJoint> {
    let text = match input {
        Some(p) if p != Path::new("-") => std::fs::read_to_string(p)
            .map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?,
        _ => {
            let mut s = String::new();
            std::io::stdin()
                .read_to_string(&mut s)
                .map_err(|e| usage(format!("cannot read stdin: {e}")))?;
            s
        }
    };
    serde_json::from_str(&text).map_err(|e| CliError {
        code: EXIT_INVALID_DISTRIBUTION,
        message: format!("invalid distribution: {e}"),
    })
}

fn cmd_dist(args: DistArgs) -> CliResult<()> {
    let (io, name) = match &args.op {
        DistOp::Corrupt(io) => (io, "corrupt"),
        DistOp::Recover(io) => (io, "recover"),
        DistOp::Transport(io) => (io, "transport"),
    };
    let mut flags = Map::new();
    if let Some(m) = &io.m {
        flags.insert("m".into(), json!(parse_list(m)?));
    }
    if let Some(r) = &io.r {
        flags.insert("r".into(), json!(parse_list(r)?));
    }
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct DistSettings {
        #[serde(default)]
        m: Option<Vec<f64>>,
        #[serde(default)]
        r: Option<Vec<f64>>,
    }
    let s: DistSettings = settings(flags, io.common.config.as_deref())?;
    let p = read_distribution(io.input.as_deref())?;
    let need = |v: Option<Vec<f64>>, flag: &str| {
        v.ok_or_else(|| usage(format!("`dist {name}` needs --{flag}")))
    };
    let out = match &args.op {
        DistOp::Corrupt(_) => {
            let m = MissRates::new(need(s.m, "m")?).map_err(usage_from)?;
            corrupt_distribution(&p, &m)?
        }
        DistOp::Recover(_) => {
            let m = MissRates::new(need(s.m, "m")?).map_err(usage_from)?;
            recover_clean(&p, &m)?
        }
        DistOp::Transport(_) => {
            let r = RelMiss::new(need(s.r, "r")?).map_err(usage_from)?;
            transport_source_to_target(&p, &r)?
        }
    };
    let bytes = json_bytes(&out)?;
    match &io.out {
        Some(path) => write_file(path, &bytes),
        None => {
            use std::io::Write;
            std::io::stdout()
                .write_all(&bytes)
                .map_err(|e| usage(format!("cannot write stdout: {e}")))
        }
    }
}

fn usage_from(e: DamsError) -> CliError {
    usage(e.to_string())
}

fn cmd_preprocess(args: PreprocessArgs) -> CliResult<()> {
    let spec: PreprocessSpec = settings(Map::new(), args.common.config.as_deref())?;
    let file = std::fs::File::open(&args.input)
        .map_err(|e| usage(format!("cannot read {}: {e}", args.input.display())))?;
    let (table, report) = preprocess(file, &spec)?;
    let out = args
        .out
        .unwrap_or_else(|| out_dir(&args.common).join("preprocessed.csv"));
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    write_file(&out, &buf)?;
    eprintln!(
        "kept {} columns; dropped {} rare binary and {} low-variance columns",
        report.kept.len(),
        report.dropped_rare_binary.len(),
        report.dropped_low_variance.len()
    );
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Dist(a) => cmd_dist(a),
        Command::Preprocess(a) => cmd_preprocess(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_overrides_nested_fields() {
        let mut base = json!({"a": 1, "data": {"kind": "redundant", "n": 10}});
        merge(&mut base, json!({"data": {"n": 20}, "b": true}));
        assert_eq!(base, json!({"a": 1, "b": true, "data": {"kind": "redundant", "n": 20}}));
    }

    #[test]
    fn error_codes() {
        let code = |e: DamsError| CliError::from(e).code;
        assert_eq!(code(DamsError::Singular { condition: 1e20 }), EXIT_NUMERICAL);
        assert_eq!(code(DamsError::NotApplicable { feature: 0, r: -0.5 }), EXIT_NOT_APPLICABLE);
        assert_eq!(code(DamsError::NonInvertibleRates { feature: 0 }), EXIT_INVALID_DISTRIBUTION);
        assert_eq!(code(DamsError::InvalidParameter("x".into())), EXIT_USAGE);
        assert!(parse_list("0.5, 1").is_ok());
        assert_eq!(parse_list("0.5,x").unwrap_err().code, EXIT_USAGE);
    }
}
