//! Repeated-trial experiments comparing the oracle, source, closed-form and
//! nonparametric predictors on a masked target test split.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{
    closed_form_target, fit_ols, fit_source_ols, nonparam_adapt, relative_missingness_from_rates,
    ClosedFormOptions, LinearModel, Method, OlsTrainer, APPLICABILITY_TOL,
};
use crate::datagen::{
    apply_mask_labeled, generate_clean, sample_regime, semi_synthetic_labels, split_4141,
    RegimeKind, RegimeSpec, ScenarioKind, ScenarioParams, ScenarioSpec,
};
use crate::distributions::MissRates;
use crate::error::{DamsError, Result};
use crate::moments::estimate_nonzero_rates;
use crate::rng::{self, derive_seed, Domain};
use crate::table::{LabeledTable, UnlabeledTable};

/// Mean squared error over the population variance of `y`.
pub fn mse_over_var(preds: &[f64], y: &[f64]) -> Result<f64> {
    if preds.len() != y.len() {
        return Err(DamsError::DimensionMismatch {
            expected: y.len(),
            found: preds.len(),
        });
    }
    if y.len() < 2 {
        return Err(DamsError::InvalidParameter(
            "need at least two labels".into(),
        ));
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(DamsError::InvalidParameter(
            "labels have zero variance".into(),
        ));
    }
    let mse = preds
        .iter()
        .zip(y)
        .map(|(p, v)| (v - p) * (v - p))
        .sum::<f64>()
        / n;
    Ok(mse / var)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Scenario {
        kind: ScenarioKind,
        #[serde(default)]
        params: ScenarioParams,
        n: usize,
    },
    /// Preprocessed numeric covariates; labels are regenerated per β draw.
    Dataset {
        path: PathBuf,
        /// Column in the file to ignore (e.g. the original outcome).
        #[serde(default)]
        label: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegimeConfig {
    /// `m_s = [1-ε, ε]`, `m_t = [ε, 1-ε]` for each ε (two features only).
    EpsilonGrid {
        #[serde(default = "default_epsilons")]
        epsilons: Vec<f64>,
    },
    Explicit {
        m_s: MissRates,
        m_t: MissRates,
    },
    Sampled {
        kind: RegimeKind,
    },
}

/// 0.05, 0.10, …, 0.95.
pub fn default_epsilons() -> Vec<f64> {
    (1..=19).map(|k| k as f64 / 20.0).collect()
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_trials() -> usize {
    50
}

fn default_beta_draws() -> usize {
    10
}

fn default_resamples() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub regime: RegimeConfig,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Per grid point, or number of regime draws when sampling.
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Label-coefficient draws for datasets; crossed with the regime draws.
    #[serde(default = "default_beta_draws")]
    pub beta_draws: usize,
    pub seed: u64,
    #[serde(default)]
    pub alpha_override: Option<f64>,
    #[serde(default)]
    pub intercept: bool,
    #[serde(default)]
    pub ridge_fallback: bool,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 || self.beta_draws == 0 || self.bootstrap_resamples == 0 {
            return Err(DamsError::InvalidParameter(
                "trials, beta_draws and bootstrap_resamples must be positive".into(),
            ));
        }
        if self.methods.is_empty() {
            return Err(DamsError::InvalidParameter("no methods selected".into()));
        }
        if let RegimeConfig::EpsilonGrid { epsilons } = &self.regime {
            if epsilons.is_empty() || epsilons.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
                return Err(DamsError::InvalidParameter(
                    "epsilon grid values must lie in (0, 1)".into(),
                ));
            }
        }
        if let DataSource::Scenario { n, .. } = &self.data {
            if *n < 10 {
                return Err(DamsError::InvalidParameter(format!(
                    "scenario n = {n} is too small for a 4:1:4:1 split"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    pub metric: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_draw: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regime_draw: Option<usize>,
    pub m_s: Vec<f64>,
    pub m_t: Vec<f64>,
    pub r_hat: Vec<f64>,
    pub outcomes: Vec<MethodOutcome>,
}

impl TrialRecord {
    pub fn metric(&self, method: Method) -> Option<f64> {
        self.outcomes
            .iter()
            .find(|o| o.method == method)
            .and_then(|o| o.metric)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub mean: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub n_trials: usize,
    pub n_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    /// How trials are pooled into the summaries.
    pub pooling: String,
    pub summaries: Vec<MethodSummary>,
    pub trials: Vec<TrialRecord>,
    /// Logged, not serialized, so output files stay reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl ExperimentResult {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub epsilon: f64,
    pub method: Method,
    pub metric: f64,
}

struct TrialPlan {
    index: usize,
    epsilon: Option<f64>,
    beta_draw: Option<usize>,
    regime_draw: Option<usize>,
    m_s: MissRates,
    m_t: MissRates,
}

fn epsilon_rates(eps: f64) -> Result<(MissRates, MissRates)> {
    Ok((
        MissRates::new(vec![1.0 - eps, eps])?,
        MissRates::new(vec![eps, 1.0 - eps])?,
    ))
}

fn plan_trials(cfg: &ExperimentConfig, d: usize) -> Result<Vec<TrialPlan>> {
    let is_dataset = matches!(cfg.data, DataSource::Dataset { .. });
    let mut plans = Vec::new();
    let mut push = |epsilon, beta_draw, regime_draw, (m_s, m_t): (MissRates, MissRates)| {
        if m_s.len() != d || m_t.len() != d {
            return Err(DamsError::DimensionMismatch {
                expected: d,
                found: m_s.len().max(m_t.len()),
            });
        }
        plans.push(TrialPlan {
            index: plans.len(),
            epsilon,
            beta_draw,
            regime_draw,
            m_s,
            m_t,
        });
        Ok(())
    };
    let beta_draws = if is_dataset { cfg.beta_draws } else { 1 };
    for b in 0..beta_draws {
        let beta_draw = is_dataset.then_some(b);
        match &cfg.regime {
            RegimeConfig::EpsilonGrid { epsilons } => {
                for &eps in epsilons {
                    for _ in 0..cfg.trials {
                        push(Some(eps), beta_draw, None, epsilon_rates(eps)?)?;
                    }
                }
            }
            RegimeConfig::Explicit { m_s, m_t } => {
                for _ in 0..cfg.trials {
                    push(None, beta_draw, None, (m_s.clone(), m_t.clone()))?;
                }
            }
            RegimeConfig::Sampled { kind } => {
                for g in 0..cfg.trials {
                    let spec = RegimeSpec {
                        kind: *kind,
                        d,
                        seed: derive_seed(cfg.seed, Domain::Regime, g as u64),
                    };
                    push(None, beta_draw, Some(g), sample_regime(&spec)?)?;
                }
            }
        }
    }
    Ok(plans)
}

fn outcome(method: Method, res: Result<f64>) -> MethodOutcome {
    match res {
        Ok(v) => MethodOutcome {
            method,
            metric: Some(v),
            skipped: None,
        },
        Err(e) => {
            if !matches!(e, DamsError::NotApplicable { .. }) {
                warn!("{method} skipped: {e}");
            }
            MethodOutcome {
                method,
                metric: None,
                skipped: Some(e.to_string()),
            }
        }
    }
}

fn evaluate(model: &LinearModel, test: &LabeledTable) -> Result<f64> {
    mse_over_var(&model.predict(&test.x)?, &test.y)
}

fn run_trial(
    cfg: &ExperimentConfig,
    covariates: Option<&UnlabeledTable>,
    plan: &TrialPlan,
) -> Result<TrialRecord> {
    let trial_seed = derive_seed(cfg.seed, Domain::Trial, plan.index as u64);
    let mut clean = match (&cfg.data, covariates) {
        (DataSource::Scenario { kind, params, n }, _) => generate_clean(&ScenarioSpec {
            kind: *kind,
            params: *params,
            n: *n,
            seed: trial_seed,
        })?,
        (DataSource::Dataset { .. }, Some(x)) => {
            let b = plan.beta_draw.unwrap_or(0) as u64;
            semi_synthetic_labels(x, derive_seed(cfg.seed, Domain::Coefficients, b))?.0
        }
        (DataSource::Dataset { .. }, None) => unreachable!("dataset covariates are loaded up front"),
    };
    let (mut m_s, mut m_t) = (plan.m_s.clone(), plan.m_t.clone());
    if cfg.intercept {
        clean.x = clean.x.with_constant_column();
        let extend = |m: &MissRates| {
            let mut v = m.as_slice().to_vec();
            v.push(0.0);
            MissRates::new(v)
        };
        m_s = extend(&m_s)?;
        m_t = extend(&m_t)?;
    }

    let split = split_4141(&clean, trial_seed)?;
    let src_train = apply_mask_labeled(&split.src_train, &m_s, derive_seed(trial_seed, Domain::Mask, 0))?;
    let tgt_train = apply_mask_labeled(&split.tgt_train, &m_t, derive_seed(trial_seed, Domain::Mask, 1))?;
    let tgt_test = apply_mask_labeled(&split.tgt_test, &m_t, derive_seed(trial_seed, Domain::Mask, 2))?;

    let q_s = estimate_nonzero_rates(&src_train.x)?;
    let q_t = estimate_nonzero_rates(&tgt_train.x)?;
    let r_hat = relative_missingness_from_rates(&q_s, &q_t)
        .map(Vec::from)
        .unwrap_or_else(|_| vec![f64::NAN; q_s.len()]);

    let opts = ClosedFormOptions {
        alpha_override: cfg.alpha_override,
        ridge_fallback: cfg.ridge_fallback,
        intercept: false,
    };
    let filter_seed = derive_seed(trial_seed, Domain::Filter, 0);
    let outcomes = cfg
        .methods
        .iter()
        .map(|&method| {
            let res = match method {
                Method::Oracle => fit_ols(&tgt_train, 0.0, Method::Oracle)
                    .and_then(|m| evaluate(&m, &tgt_test)),
                Method::Source => fit_source_ols(&src_train, 0.0).and_then(|m| evaluate(&m, &tgt_test)),
                Method::ClosedForm => closed_form_target(&src_train, &tgt_train.x, &opts)
                    .and_then(|f| evaluate(&f.model, &tgt_test)),
                Method::Nonparam => {
                    nonparam_adapt(&src_train, &tgt_train.x, &OlsTrainer::default(), filter_seed)
                        .and_then(|f| evaluate(&f.model, &tgt_test))
                }
            };
            outcome(method, res)
        })
        .collect();
    Ok(TrialRecord {
        index: plan.index,
        epsilon: plan.epsilon,
        beta_draw: plan.beta_draw,
        regime_draw: plan.regime_draw,
        m_s: plan.m_s.as_slice().to_vec(),
        m_t: plan.m_t.as_slice().to_vec(),
        r_hat,
        outcomes,
    })
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean and 95% percentile-bootstrap interval, clamped to contain the mean.
pub fn bootstrap_ci(values: &[f64], resamples: usize, seed: u64) -> Option<(f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = mean(&sorted);
    let mut g = rng::stream(seed, Domain::Bootstrap, 0);
    let n = sorted.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| sorted[g.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let lo = quantile(&means, 0.025).min(m);
    let hi = quantile(&means, 0.975).max(m);
    Some((m, lo, hi))
}

fn summarize(cfg: &ExperimentConfig, trials: &[TrialRecord]) -> Vec<MethodSummary> {
    cfg.methods
        .iter()
        .enumerate()
        .map(|(k, &method)| {
            let values: Vec<f64> = trials.iter().filter_map(|t| t.metric(method)).collect();
            let ci = bootstrap_ci(
                &values,
                cfg.bootstrap_resamples,
                derive_seed(cfg.seed, Domain::Bootstrap, k as u64),
            );
            MethodSummary {
                method,
                mean: ci.map(|c| c.0),
                ci_lo: ci.map(|c| c.1),
                ci_hi: ci.map(|c| c.2),
                n_trials: values.len(),
                n_skipped: trials.len() - values.len(),
            }
        })
        .collect()
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let start = Instant::now();
    let covariates = match &cfg.data {
        DataSource::Dataset { path, label } => Some(match label {
            Some(l) => UnlabeledTable::read_csv_ignoring(path, l)?,
            None => UnlabeledTable::read_csv(path)?,
        }),
        DataSource::Scenario { .. } => None,
    };
    let d = covariates.as_ref().map_or(2, UnlabeledTable::n_cols);
    if covariates.as_ref().is_some_and(|x| x.n_rows() < 10) {
        return Err(DamsError::InvalidParameter(
            "dataset is too small for a 4:1:4:1 split".into(),
        ));
    }
    let plans = plan_trials(cfg, d)?;
    let trials = plans
        .iter()
        .map(|p| run_trial(cfg, covariates.as_ref(), p))
        .collect::<Result<Vec<_>>>()?;
    let pooling = match cfg.regime {
        RegimeConfig::EpsilonGrid { .. } => "epsilon_grid",
        RegimeConfig::Explicit { .. } => "repeated_trials",
        RegimeConfig::Sampled { .. } => "regime_draws",
    };
    let result = ExperimentResult {
        summaries: summarize(cfg, &trials),
        config: cfg.clone(),
        pooling: pooling.to_string(),
        trials,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    info!(
        "{} trials finished in {:.2} s",
        result.trials.len(),
        result.wall_time_secs
    );
    Ok(result)
}

/// Per-ε mean metric of every method, ordered by ε then method.
pub fn sweep_series(result: &ExperimentResult) -> Vec<SweepPoint> {
    let mut acc: BTreeMap<(u64, Method), (f64, f64, usize)> = BTreeMap::new();
    for t in &result.trials {
        let Some(eps) = t.epsilon else { continue };
        for o in &t.outcomes {
            if let Some(v) = o.metric {
                // Positive finite floats order like their bit patterns.
                let e = acc.entry((eps.to_bits(), o.method)).or_insert((eps, 0.0, 0));
                e.1 += v;
                e.2 += 1;
            }
        }
    }
    acc.into_iter()
        .map(|((_, method), (epsilon, sum, n))| SweepPoint {
            epsilon,
            method,
            metric: sum / n as f64,
        })
        .collect()
}

pub fn epsilon_sweep(cfg: &ExperimentConfig) -> Result<(ExperimentResult, Vec<SweepPoint>)> {
    if !matches!(cfg.regime, RegimeConfig::EpsilonGrid { .. }) {
        return Err(DamsError::InvalidParameter(
            "an epsilon sweep needs an epsilon_grid regime".into(),
        ));
    }
    let result = run_experiment(cfg)?;
    let series = sweep_series(&result);
    Ok((result, series))
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| DamsError::Io(e.error))?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn results_csv(result: &ExperimentResult) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "mean", "ci_lo", "ci_hi", "n_trials"])?;
    for s in &result.summaries {
        w.write_record([
            s.method.as_str().to_string(),
            opt(s.mean),
            opt(s.ci_lo),
            opt(s.ci_hi),
            s.n_trials.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| DamsError::Io(e.into_error()))
}

pub fn sweep_csv(series: &[SweepPoint]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epsilon", "method", "metric"])?;
    for p in series {
        w.write_record([
            p.epsilon.to_string(),
            p.method.as_str().to_string(),
            p.metric.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| DamsError::Io(e.into_error()))
}

/// `results.json`, `results.csv`, and `sweep.csv` when trials carry an ε.
pub fn write_outputs(result: &ExperimentResult, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut json = serde_json::to_vec_pretty(result)?;
    json.push(b'\n');
    let p = out_dir.join("results.json");
    write_atomic(&p, &json)?;
    written.push(p);
    let p = out_dir.join("results.csv");
    write_atomic(&p, &results_csv(result)?)?;
    written.push(p);
    let series = sweep_series(result);
    if !series.is_empty() {
        let p = out_dir.join("sweep.csv");
        write_atomic(&p, &sweep_csv(&series)?)?;
        written.push(p);
    }
    Ok(written)
}

/// `true` iff nonparam must be skipped for relative rates `r_hat`.
pub fn nonparam_inapplicable(r_hat: &[f64]) -> bool {
    r_hat.iter().any(|&r| r < -APPLICABILITY_TOL)
}
