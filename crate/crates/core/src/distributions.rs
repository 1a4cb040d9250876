//! Exact finite-support identification under underreporting.
//!
//! A [`DiscreteJoint`] is a sparse list of `(x, y, p)` points. Masking sends
//! a clean point `z` to every `x` obtained by zeroing a subset of its nonzero
//! coordinates; [`corrupt_distribution`] pushes mass forward along those
//! edges, [`recover_clean`] inverts the map by solving points in order of
//! increasing zero count, and [`transport_source_to_target`] applies the same
//! forward kernel with relative rates (which may be negative).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{DamsError, Result};

/// Tolerance on the total mass of a validated distribution.
pub const MASS_TOL: f64 = 1e-12;
/// Input files are accepted when their mass is this close to one, then renormalized.
pub const INPUT_MASS_TOL: f64 = 1e-9;
/// Negative mass above `-NEG_TOL` is treated as rounding noise and clipped.
pub const NEG_TOL: f64 = 1e-8;
/// Upper limit on nonzero coordinates per support point (the kernel enumerates subsets).
pub const MAX_NONZEROS: usize = 24;

/// Per-feature missingness rates, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MissRates(Vec<f64>);

impl MissRates {
    pub fn new(m: Vec<f64>) -> Result<Self> {
        if let Some((j, v)) = m
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(DamsError::InvalidParameter(format!(
                "missingness rate m[{j}] = {v} is outside [0, 1]"
            )));
        }
        Ok(Self(m))
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Errors unless every rate is strictly below one.
    pub fn ensure_invertible(&self) -> Result<()> {
        match self.0.iter().position(|&v| v >= 1.0) {
            Some(feature) => Err(DamsError::NonInvertibleRates { feature }),
            None => Ok(()),
        }
    }
}

impl TryFrom<Vec<f64>> for MissRates {
    type Error = DamsError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MissRates> for Vec<f64> {
    fn from(m: MissRates) -> Self {
        m.0
    }
}

/// Relative missingness `r = 1 - (1 - m_t) / (1 - m_s)`, each component `<= 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RelMiss(Vec<f64>);

impl RelMiss {
    pub fn new(r: Vec<f64>) -> Result<Self> {
        if let Some((j, v)) = r
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v <= 1.0))
        {
            return Err(DamsError::InvalidParameter(format!(
                "relative missingness r[{j}] = {v} must be finite and at most 1"
            )));
        }
        Ok(Self(r))
    }

    /// Relative rates between two known regimes; needs `m_s < 1`.
    pub fn between(m_s: &MissRates, m_t: &MissRates) -> Result<Self> {
        check_dim(m_s.len(), m_t.len())?;
        m_s.ensure_invertible()?;
        Self::new(
            m_s.as_slice()
                .iter()
                .zip(m_t.as_slice())
                .map(|(s, t)| 1.0 - (1.0 - t) / (1.0 - s))
                .collect(),
        )
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for RelMiss {
    type Error = DamsError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RelMiss> for Vec<f64> {
    fn from(r: RelMiss) -> Self {
        r.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportPoint {
    pub x: Vec<f64>,
    pub y: f64,
    pub p: f64,
}

/// Bit pattern of a point with `-0.0` folded into `+0.0`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct PointKey {
    x: Vec<u64>,
    y: u64,
}

impl PointKey {
    fn of(x: &[f64], y: f64) -> Self {
        Self {
            x: x.iter().map(|&v| canonical_bits(v)).collect(),
            y: canonical_bits(y),
        }
    }
}

fn canonical_bits(v: f64) -> u64 {
    if v == 0.0 {
        0.0f64.to_bits()
    } else {
        v.to_bits()
    }
}

/// Finite-support joint law over `(x, y)` pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "JointDoc", into = "JointDoc")]
pub struct DiscreteJoint {
    d: usize,
    points: Vec<SupportPoint>,
    index: HashMap<PointKey, usize>,
}

#[derive(Serialize, Deserialize)]
struct JointDoc {
    d: usize,
    points: Vec<SupportPoint>,
}

impl TryFrom<JointDoc> for DiscreteJoint {
    type Error = DamsError;
    fn try_from(doc: JointDoc) -> Result<Self> {
        let joint = Self::new(doc.points)?;
        if joint.d != doc.d {
            return Err(DamsError::InvalidDistribution(format!(
                "declared d = {} but points have {} coordinates",
                doc.d, joint.d
            )));
        }
        Ok(joint)
    }
}

impl From<DiscreteJoint> for JointDoc {
    fn from(j: DiscreteJoint) -> Self {
        JointDoc {
            d: j.d,
            points: j.points,
        }
    }
}

impl PartialEq for DiscreteJoint {
    fn eq(&self, other: &Self) -> bool {
        self.d == other.d && self.points == other.points
    }
}

impl DiscreteJoint {
    /// Validates and renormalizes a list of points.
    pub fn new(points: Vec<SupportPoint>) -> Result<Self> {
        let d = points
            .first()
            .map(|p| p.x.len())
            .ok_or_else(|| DamsError::InvalidDistribution("empty support".into()))?;
        let mut index = HashMap::with_capacity(points.len());
        let mut total = 0.0;
        for (i, pt) in points.iter().enumerate() {
            if pt.x.len() != d {
                return Err(DamsError::InvalidDistribution(format!(
                    "point {i} has {} coordinates, expected {d}",
                    pt.x.len()
                )));
            }
            if !pt.x.iter().all(|v| v.is_finite()) || !pt.y.is_finite() {
                return Err(DamsError::InvalidDistribution(format!(
                    "point {i} has a non-finite coordinate; only finite discrete supports are supported"
                )));
            }
            if !pt.p.is_finite() || pt.p < -MASS_TOL {
                return Err(DamsError::InvalidDistribution(format!(
                    "point {i} has invalid probability {}",
                    pt.p
                )));
            }
            if index.insert(PointKey::of(&pt.x, pt.y), i).is_some() {
                return Err(DamsError::InvalidDistribution(format!(
                    "point {i} duplicates an earlier support point"
                )));
            }
            total += pt.p.max(0.0);
        }
        if (total - 1.0).abs() > INPUT_MASS_TOL {
            return Err(DamsError::InvalidDistribution(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        let points = points
            .into_iter()
            .map(|mut pt| {
                pt.p = pt.p.max(0.0) / total;
                pt.x.iter_mut().for_each(|v| *v = fold_zero(*v));
                pt.y = fold_zero(pt.y);
                pt
            })
            .collect();
        Ok(Self { d, points, index })
    }

    /// Law of a single feature with `P(x = 1) = p1`, label fixed at 0.
    pub fn bernoulli(p1: f64) -> Result<Self> {
        Self::new(vec![
            SupportPoint { x: vec![1.0], y: 0.0, p: p1 },
            SupportPoint { x: vec![0.0], y: 0.0, p: 1.0 - p1 },
        ])
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn points(&self) -> &[SupportPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Probability of `(x, y)`; zero off the support.
    pub fn prob(&self, x: &[f64], y: f64) -> f64 {
        self.index
            .get(&PointKey::of(x, y))
            .map_or(0.0, |&i| self.points[i].p)
    }

    pub fn total_mass(&self) -> f64 {
        self.points.iter().map(|p| p.p).sum()
    }

    /// Largest pointwise probability gap over the union of both supports.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let a = self
            .points
            .iter()
            .map(|pt| (pt.p - other.prob(&pt.x, pt.y)).abs());
        let b = other
            .points
            .iter()
            .map(|pt| (pt.p - self.prob(&pt.x, pt.y)).abs());
        a.chain(b).fold(0.0, f64::max)
    }

    /// Support augmented with every zeroing of every point (new points get mass 0).
    fn closure(&self) -> Result<Vec<SupportPoint>> {
        let mut out = self.points.clone();
        let mut seen: HashMap<PointKey, usize> = self.index.clone();
        for pt in &self.points {
            for_each_zeroing(&pt.x, |x, _| {
                let key = PointKey::of(x, pt.y);
                if !seen.contains_key(&key) {
                    seen.insert(key, out.len());
                    out.push(SupportPoint {
                        x: x.to_vec(),
                        y: pt.y,
                        p: 0.0,
                    });
                }
            })?;
        }
        Ok(out)
    }
}

fn fold_zero(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v
    }
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(DamsError::DimensionMismatch { expected, found })
    }
}

fn nonzero_positions(x: &[f64]) -> Vec<usize> {
    x.iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(j, _)| j)
        .collect()
}

/// Calls `f(x, kept)` for every `x` reachable from `z`, where `kept` is a bitmask
/// over the nonzero positions of `z` (bit set = coordinate survives).
fn for_each_zeroing(z: &[f64], mut f: impl FnMut(&[f64], u32)) -> Result<()> {
    let nz = nonzero_positions(z);
    if nz.len() > MAX_NONZEROS {
        return Err(DamsError::InvalidParameter(format!(
            "support point has {} nonzero coordinates; at most {MAX_NONZEROS} are supported",
            nz.len()
        )));
    }
    let mut x = z.to_vec();
    for kept in 0..(1u32 << nz.len()) {
        for (bit, &j) in nz.iter().enumerate() {
            x[j] = if kept >> bit & 1 == 1 { z[j] } else { 0.0 };
        }
        f(&x, kept);
    }
    Ok(())
}

/// `a ⤳ b`: `b` is `a` with some coordinates zeroed.
pub fn m_reachable(a: &[f64], b: &[f64]) -> Result<bool> {
    check_dim(a.len(), b.len())?;
    Ok(reachable(a, b))
}

fn reachable(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(&ai, &bi)| bi == 0.0 || ai == bi)
}

/// Weight of the edge `z → x` under per-feature rates `rates` (`x` reachable from `z`).
fn edge_weight(z: &[f64], x: &[f64], rates: &[f64]) -> f64 {
    let mut w = 1.0;
    for ((&zj, &xj), &rj) in z.iter().zip(x).zip(rates) {
        if xj != 0.0 {
            w *= 1.0 - rj;
        } else if zj != 0.0 {
            w *= rj;
        }
    }
    w
}

/// Pushes mass through the zeroing kernel with the given per-feature rates.
fn push_forward(p: &DiscreteJoint, rates: &[f64]) -> Result<Vec<SupportPoint>> {
    let mut out: Vec<SupportPoint> = Vec::new();
    let mut index: HashMap<PointKey, usize> = HashMap::new();
    for pt in &p.points {
        let nz = nonzero_positions(&pt.x);
        for_each_zeroing(&pt.x, |x, kept| {
            let mut w = pt.p;
            for (bit, &j) in nz.iter().enumerate() {
                w *= if kept >> bit & 1 == 1 { 1.0 - rates[j] } else { rates[j] };
            }
            let key = PointKey::of(x, pt.y);
            match index.get(&key) {
                Some(&i) => out[i].p += w,
                None => {
                    index.insert(key, out.len());
                    out.push(SupportPoint {
                        x: x.to_vec(),
                        y: pt.y,
                        p: w,
                    });
                }
            }
        })?;
    }
    Ok(out)
}

/// Clips rounding-level negatives, rejects real ones, renormalizes.
fn finalize(mut points: Vec<SupportPoint>) -> Result<DiscreteJoint> {
    for (index, pt) in points.iter_mut().enumerate() {
        if pt.p < -NEG_TOL {
            return Err(DamsError::NegativeMass {
                index,
                value: pt.p,
            });
        }
        pt.p = pt.p.max(0.0);
    }
    let total: f64 = points.iter().map(|p| p.p).sum();
    if (total - 1.0).abs() > NEG_TOL {
        return Err(DamsError::InvalidDistribution(format!(
            "resulting mass {total} differs from 1"
        )));
    }
    DiscreteJoint::new(points)
}

/// Law of `(X ⊙ ξ, Y)` when `X ~ p` and `ξ_j ~ Bernoulli(1 - m_j)`.
pub fn corrupt_distribution(p: &DiscreteJoint, m: &MissRates) -> Result<DiscreteJoint> {
    check_dim(p.dim(), m.len())?;
    finalize(push_forward(p, m.as_slice())?)
}

/// Inverts [`corrupt_distribution`] for known `m ≺ 1`.
///
/// Points are solved in order of increasing zero count: a point's corrupted mass
/// is its own clean mass times `∏(1 - m_j)` over its nonzero coordinates, plus
/// contributions from strictly less-zeroed points that are already solved.
pub fn recover_clean(p_tilde: &DiscreteJoint, m: &MissRates) -> Result<DiscreteJoint> {
    check_dim(p_tilde.dim(), m.len())?;
    m.ensure_invertible()?;
    let rates = m.as_slice();
    let points = p_tilde.closure()?;

    let mut by_label: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, pt) in points.iter().enumerate() {
        by_label.entry(canonical_bits(pt.y)).or_default().push(i);
    }

    let mut clean = vec![0.0; points.len()];
    for members in by_label.values() {
        let mut order = members.clone();
        order.sort_by_key(|&i| points[i].x.iter().filter(|v| **v == 0.0).count());
        let mut solved: Vec<usize> = Vec::with_capacity(order.len());
        for &i in &order {
            let x = &points[i].x;
            let mut residual = points[i].p;
            for &b in &solved {
                let zb = &points[b].x;
                if reachable(zb, x) {
                    residual -= clean[b] * edge_weight(zb, x, rates);
                }
            }
            let keep: f64 = x
                .iter()
                .zip(rates)
                .filter(|(v, _)| **v != 0.0)
                .map(|(_, m)| 1.0 - m)
                .product();
            clean[i] = residual / keep;
            solved.push(i);
        }
    }

    finalize(
        points
            .into_iter()
            .zip(clean)
            .map(|(pt, p)| SupportPoint { p, ..pt })
            .collect(),
    )
}

/// Target law from the source law and relative rates, without passing through
/// the clean law. Negative components of `r` give signed kernel weights; the
/// result must still be a distribution or `(p_s, r)` is rejected as inconsistent.
pub fn transport_source_to_target(p_s: &DiscreteJoint, r: &RelMiss) -> Result<DiscreteJoint> {
    check_dim(p_s.dim(), r.len())?;
    finalize(push_forward(p_s, r.as_slice())?)
}
