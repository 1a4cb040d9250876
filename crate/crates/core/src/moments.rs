//! Sample moments, relative-missingness estimation and the second-moment
//! algebra linking corrupted, clean, source and target domains.
//!
//! All second moments are uncentered (`E[X̃ᵀX̃]`, `E[X̃ᵀY]`).

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::distributions::{MissRates, RelMiss};
use crate::error::{DamsError, Result};
use crate::table::{LabeledTable, UnlabeledTable};

/// Source features observed nonzero fewer than this many times are flagged.
pub const MIN_RELIABLE_NONZEROS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSet {
    #[serde(with = "nested_rows")]
    pub xtx: DMatrix<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xty: Option<Vec<f64>>,
    pub q: Vec<f64>,
    pub n: usize,
}

impl MomentSet {
    pub fn dim(&self) -> usize {
        self.q.len()
    }
}

/// Per-feature high-probability bound on `|r̂ - r|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub r_hat: RelMiss,
    pub half_width: Vec<f64>,
    pub delta: f64,
    pub n_s: usize,
    pub n_t: usize,
    /// Features whose source nonzero count is below [`MIN_RELIABLE_NONZEROS`].
    pub unreliable: Vec<usize>,
}

pub(crate) mod nested_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(serde::de::Error::custom("matrix must be square"));
        }
        Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(DamsError::DimensionMismatch { expected, found })
    }
}

/// Fraction of rows in which each column is nonzero.
pub fn estimate_nonzero_rates(data: &UnlabeledTable) -> Result<Vec<f64>> {
    let n = data.n_rows();
    if n == 0 {
        return Err(DamsError::EmptyTable);
    }
    let mut counts = vec![0usize; data.n_cols()];
    for row in data.rows() {
        for (c, v) in counts.iter_mut().zip(row) {
            if *v != 0.0 {
                *c += 1;
            }
        }
    }
    Ok(counts.into_iter().map(|c| c as f64 / n as f64).collect())
}

/// `r̂_j = 1 - q̂ᵗ_j / q̂ˢ_j`.
pub fn estimate_relative_missingness(q_s: &[f64], q_t: &[f64]) -> Result<RelMiss> {
    check_dim(q_s.len(), q_t.len())?;
    if let Some(feature) = q_s.iter().position(|&q| q <= 0.0) {
        return Err(DamsError::NeverObserved { feature });
    }
    RelMiss::new(q_s.iter().zip(q_t).map(|(s, t)| 1.0 - t / s).collect())
}

/// Hoeffding-based half-widths for `r̂`, holding per feature with probability `1 - delta`.
///
/// The `(1 - r)` factor uses the plug-in `r̂`. Joint coverage over all `d` features
/// needs `delta / d`.
pub fn relative_missingness_bound(
    q_s_hat: &[f64],
    r_hat: &RelMiss,
    n_s: usize,
    n_t: usize,
    delta: f64,
) -> Result<BoundReport> {
    check_dim(q_s_hat.len(), r_hat.len())?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(DamsError::InvalidParameter(format!(
            "delta = {delta} must lie in (0, 1)"
        )));
    }
    if n_s == 0 || n_t == 0 {
        return Err(DamsError::EmptyTable);
    }
    if let Some(feature) = q_s_hat.iter().position(|&q| q <= 0.0) {
        return Err(DamsError::NeverObserved { feature });
    }
    let log_term = (4.0 / delta).ln();
    let eps_t = (log_term / (2.0 * n_t as f64)).sqrt();
    let eps_s = (log_term / (2.0 * n_s as f64)).sqrt();
    let half_width = q_s_hat
        .iter()
        .zip(r_hat.as_slice())
        .map(|(q, r)| (eps_t + (1.0 - r) * eps_s) / q)
        .collect();
    let unreliable: Vec<usize> = q_s_hat
        .iter()
        .enumerate()
        .filter(|(_, q)| **q * (n_s as f64) < MIN_RELIABLE_NONZEROS)
        .map(|(j, _)| j)
        .collect();
    if !unreliable.is_empty() {
        warn!("features {unreliable:?} are rarely nonzero in the source; relative missingness bounds are loose");
    }
    Ok(BoundReport {
        r_hat: r_hat.clone(),
        half_width,
        delta,
        n_s,
        n_t,
        unreliable,
    })
}

/// `(1/n) Σ x xᵀ` and nonzero rates, summed sequentially in row order.
pub fn estimate_moments(data: &UnlabeledTable) -> Result<MomentSet> {
    moments_impl(data, None)
}

/// As [`estimate_moments`], also estimating `(1/n) Σ x y`.
pub fn estimate_labeled_moments(data: &LabeledTable) -> Result<MomentSet> {
    moments_impl(&data.x, Some(&data.y))
}

fn moments_impl(x: &UnlabeledTable, y: Option<&[f64]>) -> Result<MomentSet> {
    let n = x.n_rows();
    if n == 0 {
        return Err(DamsError::EmptyTable);
    }
    let d = x.n_cols();
    let mut xtx = DMatrix::<f64>::zeros(d, d);
    let mut xty = y.map(|_| vec![0.0; d]);
    for (i, row) in x.rows().enumerate() {
        for a in 0..d {
            if row[a] == 0.0 {
                continue;
            }
            for b in a..d {
                xtx[(a, b)] += row[a] * row[b];
            }
        }
        if let (Some(acc), Some(y)) = (xty.as_mut(), y) {
            for (s, v) in acc.iter_mut().zip(row) {
                *s += v * y[i];
            }
        }
    }
    let inv = 1.0 / n as f64;
    for a in 0..d {
        for b in a..d {
            let v = xtx[(a, b)] * inv;
            xtx[(a, b)] = v;
            xtx[(b, a)] = v;
        }
    }
    if let Some(acc) = xty.as_mut() {
        acc.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(MomentSet {
        xtx,
        xty,
        q: estimate_nonzero_rates(x)?,
        n,
    })
}

/// Target-domain `E[X̃ᵀX̃]` from source moments: off-diagonals scale by
/// `(1-r_i)(1-r_j)`, diagonals by `(1-r_i)`.
pub fn transfer_second_moment(xtx_source: &DMatrix<f64>, r: &RelMiss) -> Result<DMatrix<f64>> {
    let d = r.len();
    check_dim(d, xtx_source.nrows())?;
    check_dim(d, xtx_source.ncols())?;
    let keep: Vec<f64> = r.as_slice().iter().map(|r| 1.0 - r).collect();
    Ok(DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            keep[i] * xtx_source[(i, i)]
        } else {
            keep[i] * keep[j] * xtx_source[(i, j)]
        }
    }))
}

/// Source-derived weight `α_s`; `n_s / (n_s + n_t)` unless overridden.
pub fn source_weight(n_s: usize, n_t: usize, alpha_override: Option<f64>) -> Result<f64> {
    if let Some(a) = alpha_override {
        if !(0.0..=1.0).contains(&a) {
            return Err(DamsError::InvalidParameter(format!(
                "alpha = {a} must lie in [0, 1]"
            )));
        }
        return Ok(a);
    }
    if n_s + n_t == 0 {
        return Err(DamsError::InvalidParameter(
            "cannot weight moments with n_s + n_t = 0".into(),
        ));
    }
    Ok(n_s as f64 / (n_s + n_t) as f64)
}

/// `α_s · from_source + (1 - α_s) · from_target`.
pub fn combine_target_moment(
    from_target: &DMatrix<f64>,
    from_source: &DMatrix<f64>,
    n_s: usize,
    n_t: usize,
    alpha_override: Option<f64>,
) -> Result<DMatrix<f64>> {
    check_dim(from_target.nrows(), from_source.nrows())?;
    check_dim(from_target.ncols(), from_source.ncols())?;
    let a_s = source_weight(n_s, n_t, alpha_override)?;
    if from_target == from_source {
        return Ok(from_target.clone());
    }
    Ok(from_source * a_s + from_target * (1.0 - a_s))
}

/// Clean `E[XᵀX]` and `E[XᵀY]` from corrupted moments with known `m ≺ 1`.
///
/// Off-diagonals divide by `(1-m_i)(1-m_j)`, diagonals by `(1-m_i)`, and the
/// cross moment by `(1-m)` componentwise.
pub fn clean_moments_from_corrupted(
    corrupted: &MomentSet,
    m: &MissRates,
) -> Result<(DMatrix<f64>, Option<Vec<f64>>)> {
    let d = corrupted.dim();
    check_dim(d, m.len())?;
    check_dim(d, corrupted.xtx.nrows())?;
    m.ensure_invertible()?;
    let keep: Vec<f64> = m.as_slice().iter().map(|m| 1.0 - m).collect();
    let xtx = DMatrix::from_fn(d, d, |i, j| {
        let v = corrupted.xtx[(i, j)];
        if i == j {
            v / keep[i]
        } else {
            v / (keep[i] * keep[j])
        }
    });
    let xty = corrupted
        .xty
        .as_ref()
        .map(|v| v.iter().zip(&keep).map(|(v, k)| v / k).collect());
    Ok((xtx, xty))
}

/// Population corrupted moments from clean ones:
/// `(1-m)(1-m)ᵀ ⊙ E[XᵀX] + diag(m(1-m)) diag(E[XᵀX])` and `(1-m) ⊙ E[XᵀY]`.
pub fn corrupted_moments_from_clean(
    xtx: &DMatrix<f64>,
    xty: Option<&[f64]>,
    m: &MissRates,
) -> Result<(DMatrix<f64>, Option<Vec<f64>>)> {
    let d = m.len();
    check_dim(d, xtx.nrows())?;
    let ms = m.as_slice();
    let out = DMatrix::from_fn(d, d, |i, j| {
        let base = (1.0 - ms[i]) * (1.0 - ms[j]) * xtx[(i, j)];
        if i == j {
            base + ms[i] * (1.0 - ms[i]) * xtx[(i, i)]
        } else {
            base
        }
    });
    let xty = xty.map(|v| v.iter().zip(ms).map(|(v, m)| (1.0 - m) * v).collect());
    Ok((out, xty))
}


#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn table(rows: &[Vec<f64>]) -> UnlabeledTable {
        UnlabeledTable::from_rows(rows).unwrap()
    }

    #[test]
    fn nonzero_rates_count_directly() {
        let t = table(&[
            vec![1.0, 0.0],
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 0.0],
        ]);
        assert_eq!(estimate_nonzero_rates(&t).unwrap(), vec![0.5, 0.0]);
    }

    #[test]
    fn relative_missingness_examples() {
        let r = estimate_relative_missingness(&[0.3, 0.7], &[0.3, 0.7]).unwrap();
        assert_eq!(r.as_slice(), &[0.0, 0.0]);
        let r = estimate_relative_missingness(&[0.5], &[0.25]).unwrap();
        assert_eq!(r.as_slice(), &[0.5]);
        let r = estimate_relative_missingness(&[0.754], &[0.938]).unwrap();
        assert_abs_diff_eq!(r.as_slice()[0], -0.244, epsilon = 5e-4);
        assert!(matches!(
            estimate_relative_missingness(&[0.5, 0.0], &[0.5, 0.1]),
            Err(DamsError::NeverObserved { feature: 1 })
        ));
    }

    #[test]
    fn bound_formula_values() {
        let r0 = RelMiss::zeros(1);
        let b = relative_missingness_bound(&[0.5], &r0, 10_000, 10_000, 0.05).unwrap();
        // 2 · 2 · sqrt(ln 80 / 20000)
        let term = (80f64.ln() / 20_000.0).sqrt();
        assert_abs_diff_eq!(term, 0.014802, epsilon = 1e-6);
        assert_abs_diff_eq!(b.half_width[0], 4.0 * term, epsilon = 1e-15);
        assert_abs_diff_eq!(b.half_width[0], 0.0592, epsilon = 1e-4);

        let b = relative_missingness_bound(&[1.0], &r0, 10_000, 1_000_000_000_000, 0.05).unwrap();
        assert_abs_diff_eq!(b.half_width[0], 0.01480, epsilon = 1e-5);

        let b = relative_missingness_bound(&[0.5], &r0, usize::MAX / 4, usize::MAX / 4, 0.05)
            .unwrap();
        assert!(b.half_width[0] < 1e-8);

        assert!(relative_missingness_bound(&[0.5], &r0, 10, 10, 1.0).is_err());
        assert!(relative_missingness_bound(&[0.0], &r0, 10, 10, 0.1).is_err());
    }

    #[test]
    fn bound_flags_rare_features() {
        let r = RelMiss::zeros(2);
        let b = relative_missingness_bound(&[0.5, 0.001], &r, 1000, 1000, 0.05).unwrap();
        assert_eq!(b.unreliable, vec![1]);
    }

    #[test]
    fn single_row_moments() {
        let t = table(&[vec![1.0, 2.0]]).with_labels(vec![3.0], "y").unwrap();
        let m = estimate_labeled_moments(&t).unwrap();
        assert_eq!(m.xtx, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]));
        assert_eq!(m.xty, Some(vec![3.0, 6.0]));
        assert_eq!(m.q, vec![1.0, 1.0]);
        assert!(estimate_moments(&UnlabeledTable::new(vec!["a".into()], vec![]).unwrap()).is_err());
    }

    #[test]
    fn transfer_examples() {
        let xtx = DMatrix::from_row_slice(2, 2, &[0.2, 0.16, 0.16, 0.8]);
        assert_eq!(transfer_second_moment(&xtx, &RelMiss::zeros(2)).unwrap(), xtx);
        // (1-r₁) = 0.8/0.2, (1-r₂) = 0.2/0.8
        let r = RelMiss::new(vec![-3.0, 0.75]).unwrap();
        let out = transfer_second_moment(&xtx, &r).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[0.8, 0.16, 0.16, 0.2]);
        assert!((out - want).amax() < 1e-15);

        let r = RelMiss::new(vec![1.0, 0.0]).unwrap();
        let out = transfer_second_moment(&xtx, &r).unwrap();
        assert_eq!(out[(0, 0)], 0.0);
        assert_eq!(out[(0, 1)], 0.0);
        assert_eq!(out[(1, 0)], 0.0);
        assert_eq!(out[(1, 1)], 0.8);
    }

    #[test]
    fn combination_weights() {
        let a = DMatrix::from_element(2, 2, 1.0);
        let b = DMatrix::from_element(2, 2, 3.0);
        assert_eq!(combine_target_moment(&a, &b, 0, 10, None).unwrap(), a);
        assert_eq!(
            combine_target_moment(&a, &b, 5, 5, None).unwrap(),
            DMatrix::from_element(2, 2, 2.0)
        );
        assert_eq!(
            combine_target_moment(&a, &b, 30, 10, None).unwrap(),
            DMatrix::from_element(2, 2, 0.75 * 3.0 + 0.25 * 1.0)
        );
        assert_eq!(
            combine_target_moment(&a, &b, 30, 10, Some(0.0)).unwrap(),
            a
        );
        assert_eq!(combine_target_moment(&b, &b, 7, 3, None).unwrap(), b);
        assert!(combine_target_moment(&a, &b, 0, 0, None).is_err());
        assert!(combine_target_moment(&a, &b, 1, 1, Some(1.5)).is_err());
    }

    #[test]
    fn clean_moments_identity_at_zero_rates() {
        let ms = MomentSet {
            xtx: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            xty: Some(vec![1.0, -1.0]),
            q: vec![1.0, 1.0],
            n: 10,
        };
        let (xtx, xty) = clean_moments_from_corrupted(&ms, &MissRates::zeros(2)).unwrap();
        assert_eq!(xtx, ms.xtx);
        assert_eq!(xty, ms.xty);
        assert!(clean_moments_from_corrupted(&ms, &MissRates::new(vec![1.0, 0.0]).unwrap()).is_err());
    }

    #[test]
    fn scalar_second_moment_matches_enumeration() {
        // x ∈ {1, -1} equally likely, so E[x²] = 1; masking at m = 0.5 gives
        // E[x̃²] = Σ_ξ P(ξ) (xξ)² = 0.5 by enumerating the two mask values.
        let m = 0.5;
        let corrupted: f64 = [1.0f64, -1.0]
            .iter()
            .flat_map(|x| [(1.0 - m, *x), (m, 0.0)].map(|(w, v)| 0.5 * w * v * v))
            .sum();
        assert_eq!(corrupted, 0.5);
        let ms = MomentSet {
            xtx: DMatrix::from_element(1, 1, corrupted),
            xty: None,
            q: vec![0.5],
            n: 1,
        };
        let (clean, _) = clean_moments_from_corrupted(&ms, &MissRates::new(vec![m]).unwrap()).unwrap();
        assert_abs_diff_eq!(clean[(0, 0)], 1.0, epsilon = 1e-15);

        // E[x̃²] = 1 at m = 0.5 maps back to E[x²] = 4 - 2 = 2.
        let ms = MomentSet {
            xtx: DMatrix::from_element(1, 1, 1.0),
            ..ms
        };
        let (clean, _) = clean_moments_from_corrupted(&ms, &MissRates::new(vec![m]).unwrap()).unwrap();
        assert_abs_diff_eq!(clean[(0, 0)], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn moment_json_layout() {
        let ms = MomentSet {
            xtx: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]),
            xty: Some(vec![3.0, 6.0]),
            q: vec![1.0, 0.5],
            n: 2,
        };
        let s = serde_json::to_string(&ms).unwrap();
        assert_eq!(
            s,
            r#"{"xtx":[[1.0,2.0],[2.0,4.0]],"xty":[3.0,6.0],"q":[1.0,0.5],"n":2}"#
        );
        let back: MomentSet = serde_json::from_str(&s).unwrap();
        assert_eq!(back, ms);
    }
}
