//! Synthetic data-generating processes, masking, missingness-regime samplers,
//! semi-synthetic labels and the 4:1:4:1 split.

pub mod preprocess;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distributions::MissRates;
use crate::error::{DamsError, Result};
use crate::rng::{self, Domain};
use crate::table::{default_names, LabeledTable, UnlabeledTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// `Z ~ Bernoulli(0.5)`, `X₁ = X₂ = Z`, `Y = Z + N(0, σ_y²)`.
    Redundant,
    /// `X₁ ~ Bernoulli(0.5)`, `X₂ = expit(2X₁ + N(0,1))`, `Y = X₁ - X₂ + N(0, σ_y²)`.
    Confounded,
    /// `Z ~ N(0, σ_z²)`, `X₁ = X₂ = Z`, `Y = Z + N(0, σ_y²)`.
    Example1,
    /// `X₁ ~ N(0,1)`, `X₂ = aX₁ + N(0,1)`, `Y = bX₁ + cX₂ + N(0,1)`.
    Example2,
}

impl std::str::FromStr for ScenarioKind {
    type Err = DamsError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| DamsError::InvalidParameter(format!("unknown scenario `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioParams {
    pub sigma_z: f64,
    pub sigma_y: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            sigma_z: 1.0,
            sigma_y: 1.0,
            a: 1.0,
            b: 2.0,
            c: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    #[serde(default)]
    pub params: ScenarioParams,
    pub n: usize,
    pub seed: u64,
}

fn expit(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `n` i.i.d. rows; row `i` depends only on `(seed, i)`.
pub fn generate_clean(spec: &ScenarioSpec) -> Result<LabeledTable> {
    if spec.n == 0 {
        return Err(DamsError::InvalidParameter("n must be at least 1".into()));
    }
    let p = spec.params;
    if !(p.sigma_z > 0.0 && p.sigma_y > 0.0) {
        return Err(DamsError::InvalidParameter(
            "sigma_z and sigma_y must be positive".into(),
        ));
    }
    let mut data = Vec::with_capacity(2 * spec.n);
    let mut y = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut g = rng::stream(spec.seed, Domain::Generate, i as u64);
        let (x1, x2, yi) = match spec.kind {
            ScenarioKind::Redundant => {
                let z = f64::from(u8::from(g.random::<f64>() < 0.5));
                let u: f64 = g.sample(StandardNormal);
                (z, z, z + p.sigma_y * u)
            }
            ScenarioKind::Confounded => {
                let x1 = f64::from(u8::from(g.random::<f64>() < 0.5));
                let u2: f64 = g.sample(StandardNormal);
                let u: f64 = g.sample(StandardNormal);
                let x2 = expit(2.0 * x1 + u2);
                (x1, x2, x1 - x2 + p.sigma_y * u)
            }
            ScenarioKind::Example1 => {
                let z = p.sigma_z * g.sample::<f64, _>(StandardNormal);
                let u: f64 = g.sample(StandardNormal);
                (z, z, z + p.sigma_y * u)
            }
            ScenarioKind::Example2 => {
                let v1: f64 = g.sample(StandardNormal);
                let v2: f64 = g.sample(StandardNormal);
                let vy: f64 = g.sample(StandardNormal);
                let x2 = p.a * v1 + v2;
                (v1, x2, p.b * v1 + p.c * x2 + vy)
            }
        };
        data.push(x1);
        data.push(x2);
        y.push(yi);
    }
    UnlabeledTable::new(default_names(2), data)?.with_labels(y, "y")
}

/// Zeroes cell `(i, j)` with probability `m_j`, using the mask stream of row `i`.
pub fn apply_mask(x: &UnlabeledTable, m: &MissRates, seed: u64) -> Result<UnlabeledTable> {
    if m.len() != x.n_cols() {
        return Err(DamsError::DimensionMismatch {
            expected: x.n_cols(),
            found: m.len(),
        });
    }
    let ms = m.as_slice();
    let mut out = x.clone();
    for (i, row) in out.rows_mut().enumerate() {
        let mut g = rng::stream(seed, Domain::Mask, i as u64);
        for (v, &mj) in row.iter_mut().zip(ms) {
            let u: f64 = g.random();
            if u < mj {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

pub fn apply_mask_labeled(data: &LabeledTable, m: &MissRates, seed: u64) -> Result<LabeledTable> {
    Ok(LabeledTable {
        x: apply_mask(&data.x, m, seed)?,
        y: data.y.clone(),
        label: data.label.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeKind {
    /// `m_s ~ U(0, 0.5)`, `m_t = m_s + (1 - m_s)·U(0, 0.5)`; guarantees `m_s ⪯ m_t`.
    Ordered,
    /// `m_s, m_t ~ U(0, 0.9)` independently.
    General,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub kind: RegimeKind,
    pub d: usize,
    pub seed: u64,
}

pub fn sample_regime(spec: &RegimeSpec) -> Result<(MissRates, MissRates)> {
    if spec.d == 0 {
        return Err(DamsError::InvalidParameter("d must be at least 1".into()));
    }
    let mut g = rng::stream(spec.seed, Domain::Regime, 0);
    let mut m_s = Vec::with_capacity(spec.d);
    let mut m_t = Vec::with_capacity(spec.d);
    for _ in 0..spec.d {
        match spec.kind {
            RegimeKind::Ordered => {
                let s = 0.5 * g.random::<f64>();
                let t = s + (1.0 - s) * 0.5 * g.random::<f64>();
                m_s.push(s);
                m_t.push(t);
            }
            RegimeKind::General => {
                m_s.push(0.9 * g.random::<f64>());
                m_t.push(0.9 * g.random::<f64>());
            }
        }
    }
    Ok((MissRates::new(m_s)?, MissRates::new(m_t)?))
}

/// `y = Xβ` with `β_j ~ U(0, 10)`; returns the table and `β`.
pub fn semi_synthetic_labels(x: &UnlabeledTable, seed: u64) -> Result<(LabeledTable, Vec<f64>)> {
    let mut g = rng::stream(seed, Domain::Coefficients, 0);
    let beta: Vec<f64> = (0..x.n_cols()).map(|_| 10.0 * g.random::<f64>()).collect();
    let y = x
        .rows()
        .map(|r| r.iter().zip(&beta).map(|(a, b)| a * b).sum())
        .collect();
    Ok((x.clone().with_labels(y, "y")?, beta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split4141 {
    pub src_train: LabeledTable,
    pub src_test: LabeledTable,
    pub tgt_train: LabeledTable,
    pub tgt_test: LabeledTable,
}

/// Part sizes `(src_train, src_test, tgt_train, tgt_test)`; the rounding
/// remainder goes to source training.
pub fn split_sizes(n: usize) -> (usize, usize, usize, usize) {
    let tenth = n / 10;
    let four = 4 * n / 10;
    (n - 2 * tenth - four, tenth, four, tenth)
}

/// Random disjoint partition in proportions 0.4/0.1/0.4/0.1. Rows keep their
/// original relative order within each part.
pub fn split_4141(data: &LabeledTable, seed: u64) -> Result<Split4141> {
    let n = data.n_rows();
    if n < 10 {
        return Err(DamsError::InvalidParameter(format!(
            "a 4:1:4:1 split needs at least 10 rows, got {n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, Domain::Split, 0));
    let (a, b, c, _) = split_sizes(n);
    let part = |range: std::ops::Range<usize>| {
        let mut idx = perm[range].to_vec();
        idx.sort_unstable();
        data.select_rows(&idx)
    };
    Ok(Split4141 {
        src_train: part(0..a),
        src_test: part(a..a + b),
        tgt_train: part(a + b..a + b + c),
        tgt_test: part(a + b + c..n),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example1Solution {
    pub beta_s: [f64; 2],
    pub beta_t: [f64; 2],
    pub excess_risk: f64,
}

/// Optimal source/target coefficients and the target excess risk of the
/// source predictor under `m_s = [1-ε, ε]`, `m_t = [ε, 1-ε]`.
pub fn example1_analytic(eps: f64, sigma_z: f64) -> Result<Example1Solution> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(DamsError::InvalidParameter(format!(
            "eps = {eps} must lie in (0, 1)"
        )));
    }
    let den = 1.0 - eps + eps * eps;
    let excess = sigma_z * sigma_z * (1.0 - 2.0 * eps).powi(2) * (1.0 - 2.0 * eps + 2.0 * eps * eps)
        / (den * den);
    Ok(Example1Solution {
        beta_s: [eps / den, (1.0 - eps) / den],
        beta_t: [(1.0 - eps) / den, eps / den],
        excess_risk: excess,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example2Solution {
    pub beta_s: [f64; 2],
    pub beta_t: [f64; 2],
    /// Target risk of the source predictor over `Var(Y)`.
    pub risk_ratio: f64,
}

/// Solution for `m_s = [0, 0]`, `m_t = [1, 0]`.
pub fn example2_analytic(a: f64, b: f64, c: f64) -> Example2Solution {
    Example2Solution {
        beta_s: [b, c],
        beta_t: [0.0, a * b / (a * a + 1.0) + c],
        risk_ratio: (b * b + 1.0) / (b * b + 2.0 * a * b * c + a * a * c * c + c * c + 1.0),
    }
}
