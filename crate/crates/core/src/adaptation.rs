//! Least-squares predictors for a missingness-shifted target domain.
//!
//! * [`fit_source_ols`] / [`fit_ols`]: plain OLS on whatever labeled data is given.
//! * [`closed_form_target`]: moment-transfer estimate of the optimal linear
//!   target predictor from labeled source and unlabeled target rows.
//! * [`nonparam_adapt`]: thin the source with the relative missingness rate so
//!   it follows the target law, then train any regressor on it.
//! * [`verify_dropout_identity`]: masked-and-rescaled squared loss versus clean
//!   loss plus its L2-type penalty.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{MissRates, RelMiss};
use crate::error::{DamsError, Result};
use crate::linalg::{solve_symmetric, submatrix};
use crate::moments::{
    combine_target_moment, estimate_labeled_moments, estimate_moments, source_weight,
    transfer_second_moment,
};
use crate::rng::{self, Domain};
use crate::table::{LabeledTable, UnlabeledTable};

/// Negative relative rates down to `-APPLICABILITY_TOL` count as sampling noise.
pub const APPLICABILITY_TOL: f64 = 1e-9;

/// Largest `d` for which masks are enumerated exactly.
pub const MAX_ENUM_DIM: usize = 20;

const RIDGE_FALLBACK_SCALE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Oracle,
    Source,
    ClosedForm,
    Nonparam,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Oracle,
        Method::Source,
        Method::ClosedForm,
        Method::Nonparam,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Oracle => "oracle",
            Method::Source => "source",
            Method::ClosedForm => "closed_form",
            Method::Nonparam => "nonparam",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = DamsError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| DamsError::InvalidParameter(format!("unknown method `{s}`")))
    }
}

/// `ŷ = x β`. When `intercept` is set the last coefficient multiplies an
/// implicit constant column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub beta: Vec<f64>,
    pub method: Method,
    pub dropped: Vec<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub intercept: bool,
}

impl LinearModel {
    pub fn n_features(&self) -> usize {
        self.beta.len() - usize::from(self.intercept)
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let d = self.n_features();
        let dot: f64 = x.iter().zip(&self.beta[..d]).map(|(a, b)| a * b).sum();
        if self.intercept {
            dot + self.beta[d]
        } else {
            dot
        }
    }

    pub fn predict(&self, x: &UnlabeledTable) -> Result<Vec<f64>> {
        if x.n_cols() != self.n_features() {
            return Err(DamsError::DimensionMismatch {
                expected: self.n_features(),
                found: x.n_cols(),
            });
        }
        Ok(x.rows().map(|r| self.predict_row(r)).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSpec {
    pub r: RelMiss,
    pub seed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ClosedFormOptions {
    /// Weight on the source-derived second moment; `n_s/(n_s+n_t)` if unset.
    pub alpha_override: Option<f64>,
    /// Retry a singular system with ridge `1e-8·trace(M̂)/d`.
    pub ridge_fallback: bool,
    /// Append an always-observed constant column to both domains.
    pub intercept: bool,
}

#[derive(Debug, Clone)]
pub struct ClosedFormFit {
    pub model: LinearModel,
    pub q_s: Vec<f64>,
    pub q_t: Vec<f64>,
    pub r_hat: RelMiss,
    pub alpha_s: f64,
    pub ridge: Option<f64>,
}

fn zero_columns(x: &UnlabeledTable) -> Vec<usize> {
    (0..x.n_cols())
        .filter(|&j| x.column(j).all(|v| v == 0.0))
        .collect()
}

fn complement(d: usize, dropped: &[usize]) -> Vec<usize> {
    (0..d).filter(|j| !dropped.contains(j)).collect()
}

fn expand(d: usize, keep: &[usize], beta: &DVector<f64>) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (k, &j) in keep.iter().enumerate() {
        out[j] = beta[k];
    }
    out
}

fn solve_with_fallback(
    m: &DMatrix<f64>,
    b: &DVector<f64>,
    fallback: bool,
) -> Result<(DVector<f64>, Option<f64>)> {
    match solve_symmetric(m, b) {
        Ok(x) => Ok((x, None)),
        Err(DamsError::Singular { condition }) if fallback && m.nrows() > 0 => {
            let lambda = RIDGE_FALLBACK_SCALE * m.trace().abs() / m.nrows() as f64;
            warn!(
                "normal matrix is singular (condition {condition:.3e}); retrying with ridge {lambda:.3e}"
            );
            let ridged = m + DMatrix::identity(m.nrows(), m.nrows()) * lambda;
            Ok((solve_symmetric(&ridged, b)?, Some(lambda)))
        }
        Err(e) => Err(e),
    }
}

/// OLS with ridge `ridge_eps·n` on the normal matrix; all-zero columns are
/// dropped and get coefficient 0.
pub fn fit_ols(data: &LabeledTable, ridge_eps: f64, method: Method) -> Result<LinearModel> {
    if !(ridge_eps >= 0.0 && ridge_eps.is_finite()) {
        return Err(DamsError::InvalidParameter(format!(
            "ridge_eps = {ridge_eps} must be finite and non-negative"
        )));
    }
    let d = data.n_cols();
    let dropped = zero_columns(&data.x);
    let keep = complement(d, &dropped);
    if data.n_rows() < keep.len() {
        return Err(DamsError::InvalidParameter(format!(
            "{} rows cannot determine {} coefficients",
            data.n_rows(),
            keep.len()
        )));
    }
    let mom = estimate_labeled_moments(data)?;
    let xty = mom.xty.expect("labeled moments carry xty");
    let mut m = submatrix(&mom.xtx, &keep);
    for i in 0..keep.len() {
        m[(i, i)] += ridge_eps;
    }
    let b = DVector::from_iterator(keep.len(), keep.iter().map(|&j| xty[j]));
    let beta = solve_symmetric(&m, &b)?;
    Ok(LinearModel {
        beta: expand(d, &keep, &beta),
        method,
        dropped,
        intercept: false,
    })
}

pub fn fit_source_ols(source: &LabeledTable, ridge_eps: f64) -> Result<LinearModel> {
    fit_ols(source, ridge_eps, Method::Source)
}

/// `true` iff every `r_j ≥ -APPLICABILITY_TOL`.
pub fn check_applicability(r: &RelMiss) -> bool {
    r.as_slice().iter().all(|&v| v >= -APPLICABILITY_TOL)
}

/// Applicable `r` with noise-level negatives clamped to 0.
pub fn clamp_applicable(r: &RelMiss) -> Result<RelMiss> {
    if let Some((feature, &r)) = r
        .as_slice()
        .iter()
        .enumerate()
        .find(|(_, v)| **v < -APPLICABILITY_TOL)
    {
        return Err(DamsError::NotApplicable { feature, r });
    }
    RelMiss::new(r.as_slice().iter().map(|v| v.max(0.0)).collect())
}

/// Relative missingness from nonzero rates. Features never observed in either
/// domain carry no information and get `r = 0`.
pub fn relative_missingness_from_rates(q_s: &[f64], q_t: &[f64]) -> Result<RelMiss> {
    if q_s.len() != q_t.len() {
        return Err(DamsError::DimensionMismatch {
            expected: q_s.len(),
            found: q_t.len(),
        });
    }
    let mut r = Vec::with_capacity(q_s.len());
    for (j, (&s, &t)) in q_s.iter().zip(q_t).enumerate() {
        if s > 0.0 {
            r.push(1.0 - t / s);
        } else if t == 0.0 {
            r.push(0.0);
        } else {
            return Err(DamsError::NeverObserved { feature: j });
        }
    }
    RelMiss::new(r)
}

/// Closed-form linear target predictor from labeled source and unlabeled
/// target covariates.
///
/// `β = M̂⁻¹ ((1 - r̂) ⊙ Ê[X̃ˢᵀYˢ])` with `M̂` the weighted average of the
/// target second moment and the source second moment transferred by `r̂`.
/// Columns that are all zero in the target are dropped first.
pub fn closed_form_target(
    source: &LabeledTable,
    target: &UnlabeledTable,
    opts: &ClosedFormOptions,
) -> Result<ClosedFormFit> {
    if source.n_cols() != target.n_cols() {
        return Err(DamsError::DimensionMismatch {
            expected: source.n_cols(),
            found: target.n_cols(),
        });
    }
    let (src_x, tgt_x);
    let (sx, tx) = if opts.intercept {
        src_x = source.x.with_constant_column();
        tgt_x = target.with_constant_column();
        (&src_x, &tgt_x)
    } else {
        (&source.x, target)
    };
    let d = sx.n_cols();

    let src_mom = estimate_labeled_moments(&LabeledTable::new(
        sx.clone(),
        source.y.clone(),
        source.label.clone(),
    )?)?;
    let tgt_mom = estimate_moments(tx)?;
    let dropped = zero_columns(tx);
    let keep = complement(d, &dropped);
    for &j in &keep {
        if src_mom.q[j] == 0.0 {
            return Err(DamsError::NeverObserved { feature: j });
        }
    }
    let r_hat = relative_missingness_from_rates(&src_mom.q, &tgt_mom.q)?;

    let transferred = transfer_second_moment(&src_mom.xtx, &r_hat)?;
    let alpha_s = source_weight(src_mom.n, tgt_mom.n, opts.alpha_override)?;
    let m_hat = combine_target_moment(
        &tgt_mom.xtx,
        &transferred,
        src_mom.n,
        tgt_mom.n,
        Some(alpha_s),
    )?;
    let xty = src_mom.xty.expect("labeled moments carry xty");
    let b = DVector::from_iterator(
        keep.len(),
        keep.iter().map(|&j| (1.0 - r_hat.as_slice()[j]) * xty[j]),
    );
    debug!("closed form: alpha_s = {alpha_s}, r_hat = {:?}", r_hat.as_slice());
    let (beta, ridge) = solve_with_fallback(&submatrix(&m_hat, &keep), &b, opts.ridge_fallback)?;
    Ok(ClosedFormFit {
        model: LinearModel {
            beta: expand(d, &keep, &beta),
            method: Method::ClosedForm,
            dropped,
            intercept: opts.intercept,
        },
        q_s: src_mom.q,
        q_t: tgt_mom.q,
        r_hat,
        alpha_s,
        ridge,
    })
}

/// Zeroes cell `(i, j)` with probability `r_j`, using the filter stream of row `i`.
pub fn apply_missingness_filter(source: &LabeledTable, spec: &FilterSpec) -> Result<LabeledTable> {
    if spec.r.len() != source.n_cols() {
        return Err(DamsError::DimensionMismatch {
            expected: source.n_cols(),
            found: spec.r.len(),
        });
    }
    let r = clamp_applicable(&spec.r)?;
    let r = r.as_slice();
    let mut out = source.clone();
    if r.iter().all(|&v| v == 0.0) {
        return Ok(out);
    }
    for (i, row) in out.x.rows_mut().enumerate() {
        let mut g = rng::stream(spec.seed, Domain::Filter, i as u64);
        for (v, &rj) in row.iter_mut().zip(r) {
            let u: f64 = g.random();
            if u < rj {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Anything that turns a labeled table into a fitted predictor.
pub trait Trainer {
    type Model;
    fn fit(&self, data: &LabeledTable) -> Result<Self::Model>;
}

impl<M, F> Trainer for F
where
    F: Fn(&LabeledTable) -> Result<M>,
{
    type Model = M;

    fn fit(&self, data: &LabeledTable) -> Result<M> {
        self(data)
    }
}

/// Ordinary least squares; the default trainer for [`nonparam_adapt`].
#[derive(Debug, Clone, Copy, Default)]
pub struct OlsTrainer {
    pub ridge_eps: f64,
}

impl Trainer for OlsTrainer {
    type Model = LinearModel;

    fn fit(&self, data: &LabeledTable) -> Result<LinearModel> {
        fit_ols(data, self.ridge_eps, Method::Nonparam)
    }
}

#[derive(Debug, Clone)]
pub struct NonparamFit<M> {
    pub model: M,
    pub r_hat: RelMiss,
    pub q_s: Vec<f64>,
    pub q_t: Vec<f64>,
}

/// Estimate `r̂`, reject it if negative beyond noise, filter the source once
/// and train on the result.
pub fn nonparam_adapt<T: Trainer>(
    source: &LabeledTable,
    target: &UnlabeledTable,
    trainer: &T,
    seed: u64,
) -> Result<NonparamFit<T::Model>> {
    if source.n_cols() != target.n_cols() {
        return Err(DamsError::DimensionMismatch {
            expected: source.n_cols(),
            found: target.n_cols(),
        });
    }
    let q_s = crate::moments::estimate_nonzero_rates(&source.x)?;
    let q_t = crate::moments::estimate_nonzero_rates(target)?;
    let r_hat = relative_missingness_from_rates(&q_s, &q_t)?;
    let r = clamp_applicable(&r_hat)?;
    let filtered = apply_missingness_filter(source, &FilterSpec { r, seed })?;
    Ok(NonparamFit {
        model: trainer.fit(&filtered)?,
        r_hat,
        q_s,
        q_t,
    })
}

fn penalty_weights(m: &MissRates) -> Result<Vec<f64>> {
    m.ensure_invertible()?;
    Ok(m.as_slice().iter().map(|m| m / (1.0 - m)).collect())
}

/// `R(β) = ½ Σ_i Σ_j m_j/(1-m_j) · x_ij² · β_j²`.
pub fn dropout_regularizer(beta: &[f64], m: &MissRates, data: &LabeledTable) -> Result<f64> {
    let d = data.n_cols();
    if beta.len() != d || m.len() != d {
        return Err(DamsError::DimensionMismatch {
            expected: d,
            found: if beta.len() != d { beta.len() } else { m.len() },
        });
    }
    let w = penalty_weights(m)?;
    let mut total = 0.0;
    for row in data.x.rows() {
        for j in 0..d {
            total += w[j] * row[j] * row[j] * beta[j] * beta[j];
        }
    }
    Ok(0.5 * total)
}

fn clean_loss(data: &LabeledTable, beta: &[f64]) -> f64 {
    data.x
        .rows()
        .zip(&data.y)
        .map(|(x, y)| {
            let e = y - x.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>();
            0.5 * e * e
        })
        .sum()
}

fn check_identity_args(data: &LabeledTable, beta: &[f64], m: &MissRates) -> Result<()> {
    let d = data.n_cols();
    for found in [beta.len(), m.len()] {
        if found != d {
            return Err(DamsError::DimensionMismatch { expected: d, found });
        }
    }
    m.ensure_invertible()
}

/// `(E_ξ Σ_i ½(y_i - (x_i ⊙ ξ/(1-m))·β)², Σ_i ½(y_i - x_i·β)² + R(β))`, the
/// expectation taken by enumerating every mask over the features with `m_j > 0`.
pub fn verify_dropout_identity(
    data: &LabeledTable,
    beta: &[f64],
    m: &MissRates,
) -> Result<(f64, f64)> {
    check_identity_args(data, beta, m)?;
    let ms = m.as_slice();
    let random: Vec<usize> = (0..ms.len()).filter(|&j| ms[j] > 0.0).collect();
    if random.len() > MAX_ENUM_DIM {
        return Err(DamsError::InvalidParameter(format!(
            "{} randomly masked features exceed the enumeration limit {MAX_ENUM_DIM}; use the Monte-Carlo variant",
            random.len()
        )));
    }
    let mut lhs = 0.0;
    for (x, &y) in data.x.rows().zip(&data.y) {
        // Contribution of the always-kept features is fixed.
        let base: f64 = (0..ms.len())
            .filter(|&j| ms[j] == 0.0)
            .map(|j| x[j] * beta[j])
            .sum();
        let terms: Vec<f64> = random
            .iter()
            .map(|&j| x[j] * beta[j] / (1.0 - ms[j]))
            .collect();
        for mask in 0u32..(1u32 << random.len()) {
            let mut w = 1.0;
            let mut pred = base;
            for (k, &j) in random.iter().enumerate() {
                if mask >> k & 1 == 1 {
                    w *= 1.0 - ms[j];
                    pred += terms[k];
                } else {
                    w *= ms[j];
                }
            }
            let e = y - pred;
            lhs += w * 0.5 * e * e;
        }
    }
    let rhs = clean_loss(data, beta) + dropout_regularizer(beta, m, data)?;
    Ok((lhs, rhs))
}

/// As [`verify_dropout_identity`], with the left side estimated from
/// `samples` masks per row.
pub fn verify_dropout_identity_mc(
    data: &LabeledTable,
    beta: &[f64],
    m: &MissRates,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    check_identity_args(data, beta, m)?;
    if samples == 0 {
        return Err(DamsError::InvalidParameter("samples must be positive".into()));
    }
    let ms = m.as_slice();
    let mut lhs = 0.0;
    for (i, (x, &y)) in data.x.rows().zip(&data.y).enumerate() {
        let mut g = rng::stream(seed, Domain::MonteCarlo, i as u64);
        let mut acc = 0.0;
        for _ in 0..samples {
            let mut pred = 0.0;
            for j in 0..ms.len() {
                let u: f64 = g.random();
                if u >= ms[j] {
                    pred += x[j] * beta[j] / (1.0 - ms[j]);
                }
            }
            let e = y - pred;
            acc += 0.5 * e * e;
        }
        lhs += acc / samples as f64;
    }
    let rhs = clean_loss(data, beta) + dropout_regularizer(beta, m, data)?;
    Ok((lhs, rhs))
}
