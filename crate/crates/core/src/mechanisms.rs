//! Laplace noise, the finite exponential mechanism, classic propose-test-release
//! and an exact (eps, delta) checker for mechanisms with finite output sets.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, HptrError, Result};

pub type OutcomeId = i64;

/// Outcome id reserved for the abort symbol.
pub const BOTTOM: OutcomeId = -1;

fn sum_tolerance(len: usize) -> f64 {
    1e-12 + len as f64 * 1e-16
}

/// Finite output law. Atoms are kept sorted by id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPmf")]
pub struct DiscretePmf {
    atoms: Vec<(OutcomeId, f64)>,
}

#[derive(Deserialize)]
struct RawPmf {
    atoms: Vec<(OutcomeId, f64)>,
}

impl TryFrom<RawPmf> for DiscretePmf {
    type Error = HptrError;
    fn try_from(raw: RawPmf) -> Result<Self> {
        DiscretePmf::new(raw.atoms)
    }
}

impl DiscretePmf {
    pub fn new(mut atoms: Vec<(OutcomeId, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(HptrError::Schema("pmf has no atoms".into()));
        }
        atoms.sort_by_key(|a| a.0);
        if atoms.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(HptrError::Schema("duplicate outcome id".into()));
        }
        if atoms.iter().any(|a| !(a.1 >= 0.0) || a.1 > 1.0 + 1e-12) {
            return Err(HptrError::Schema("probability outside [0, 1]".into()));
        }
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        if (total - 1.0).abs() > sum_tolerance(atoms.len()) {
            return Err(HptrError::Schema(format!("probabilities sum to {total}")));
        }
        Ok(DiscretePmf { atoms })
    }

    pub fn point(id: OutcomeId) -> Self {
        DiscretePmf {
            atoms: vec![(id, 1.0)],
        }
    }

    /// Point mass on `id` that still lists every id of `universe` (with zero mass).
    pub fn point_in(id: OutcomeId, universe: &[OutcomeId]) -> Result<Self> {
        let mut atoms: Vec<(OutcomeId, f64)> = universe.iter().map(|&u| (u, 0.0)).collect();
        match atoms.iter_mut().find(|a| a.0 == id) {
            Some(a) => a.1 = 1.0,
            None => atoms.push((id, 1.0)),
        }
        Self::new(atoms)
    }

    pub fn atoms(&self) -> &[(OutcomeId, f64)] {
        &self.atoms
    }

    pub fn prob(&self, id: OutcomeId) -> f64 {
        self.atoms
            .binary_search_by_key(&id, |a| a.0)
            .map(|i| self.atoms[i].1)
            .unwrap_or(0.0)
    }

    pub fn ids(&self) -> impl Iterator<Item = OutcomeId> + '_ {
        self.atoms.iter().map(|a| a.0)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.atoms
            .iter()
            .filter(|a| a.1 > 0.0)
            .map(|a| -a.1 * a.1.ln())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborPair {
    pub left: usize,
    pub right: usize,
    pub hamming: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpReport {
    pub pass: bool,
    pub eps: f64,
    pub delta: f64,
    pub worst_delta: f64,
    pub worst_pair: Option<NeighborPair>,
}

/// Uniform draw in the open interval (0, 1) from 53 random bits.
pub(crate) fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

pub(crate) fn laplace<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    let u = open_unit(rng) - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

pub fn sample_laplace<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> Result<f64> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(invalid(format!("laplace scale must be positive, got {scale}")));
    }
    Ok(laplace(scale, rng))
}

/// P(Lap(scale) >= x).
pub fn laplace_upper_tail(x: f64, scale: f64) -> f64 {
    if x >= 0.0 {
        0.5 * (-x / scale).exp()
    } else {
        1.0 - 0.5 * (x / scale).exp()
    }
}

/// Smallest delta for which p is (eps, delta)-indistinguishable from q, in that direction.
pub fn hockey_stick_delta(p: &DiscretePmf, q: &DiscretePmf, eps: f64) -> Result<f64> {
    if !(eps >= 0.0) {
        return Err(invalid(format!("eps must be non-negative, got {eps}")));
    }
    if p.atoms.len() != q.atoms.len() || p.ids().zip(q.ids()).any(|(a, b)| a != b) {
        return Err(HptrError::Schema("pmfs have different outcome universes".into()));
    }
    let scale = eps.exp();
    let mut total = 0.0;
    for (&(_, pp), &(_, qq)) in p.atoms.iter().zip(&q.atoms) {
        let bound = if qq == 0.0 { 0.0 } else { scale * qq };
        if pp > bound {
            total += pp - bound;
        }
    }
    Ok(total.clamp(0.0, 1.0))
}

fn hamming<R: PartialEq>(a: &[R], b: &[R]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Exact check over every neighbor pair of a finite universe, both orders.
pub fn verify_dp<R, F>(mechanism: F, universe: &[Vec<R>], eps: f64, delta: f64) -> Result<DpReport>
where
    R: PartialEq + Sync,
    F: Fn(&[R]) -> Result<DiscretePmf> + Sync,
{
    if universe.is_empty() {
        return Err(invalid("empty universe"));
    }
    let pmfs = universe
        .par_iter()
        .map(|s| mechanism(s))
        .collect::<Result<Vec<_>>>()?;
    verify_dp_pmfs(&pmfs, universe, eps, delta)
}

/// Same as [`verify_dp`] with the output laws already computed.
pub fn verify_dp_pmfs<R>(
    pmfs: &[DiscretePmf],
    universe: &[Vec<R>],
    eps: f64,
    delta: f64,
) -> Result<DpReport>
where
    R: PartialEq + Sync,
{
    if universe.is_empty() {
        return Err(invalid("empty universe"));
    }
    if pmfs.len() != universe.len() {
        return Err(HptrError::Schema("one pmf per dataset required".into()));
    }
    let per_left = (0..universe.len())
        .into_par_iter()
        .map(|i| {
            let mut best: Option<(f64, NeighborPair)> = None;
            for j in 0..universe.len() {
                if i == j
                    || universe[i].len() != universe[j].len()
                    || hamming(&universe[i], &universe[j]) != 1
                {
                    continue;
                }
                let d = hockey_stick_delta(&pmfs[i], &pmfs[j], eps)?;
                if best.as_ref().is_none_or(|b| d > b.0) {
                    let pair = NeighborPair { left: i, right: j, hamming: 1 };
                    best = Some((d, pair));
                }
            }
            Ok(best)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut worst: Option<(f64, NeighborPair)> = None;
    for b in per_left.into_iter().flatten() {
        if worst.as_ref().is_none_or(|w| b.0 > w.0) {
            worst = Some(b);
        }
    }
    let worst_delta = worst.as_ref().map_or(0.0, |w| w.0);
    Ok(DpReport {
        pass: worst_delta <= delta,
        eps,
        delta,
        worst_delta,
        worst_pair: worst.map(|w| w.1),
    })
}

/// Output law of the exponential mechanism: P(i) proportional to exp(-coefficient * score_i).
/// Infinite scores get zero mass.
pub fn softmin_pmf(scores: &[f64], coefficient: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(invalid("empty candidate set"));
    }
    if !(coefficient >= 0.0) {
        return Err(invalid(format!("coefficient must be non-negative, got {coefficient}")));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan() || *s == f64::NEG_INFINITY) {
        return Err(HptrError::InvalidScore(format!("score {i} is {}", scores[i])));
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(HptrError::InvalidScore("every score is infinite".into()));
    }
    let logits: Vec<f64> = scores
        .iter()
        .map(|&s| {
            if s.is_infinite() {
                f64::NEG_INFINITY
            } else if coefficient == 0.0 {
                0.0
            } else {
                -coefficient * (s - min)
            }
        })
        .collect();
    let weights: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Inverse-cdf draw of an index from a normalized pmf.
pub fn sample_index<R: Rng + ?Sized>(pmf: &[f64], rng: &mut R) -> usize {
    let u = open_unit(rng);
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in pmf.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

pub fn exp_mech_index<R: Rng + ?Sized>(scores: &[f64], coefficient: f64, rng: &mut R) -> Result<usize> {
    let pmf = softmin_pmf(scores, coefficient)?;
    Ok(sample_index(&pmf, rng))
}

pub fn exp_mech_finite<'a, C, R: Rng + ?Sized>(
    candidates: &'a [C],
    scores: &[f64],
    coefficient: f64,
    rng: &mut R,
) -> Result<&'a C> {
    if candidates.is_empty() {
        return Err(invalid("empty candidate set"));
    }
    if candidates.len() != scores.len() {
        return Err(invalid("one score per candidate required"));
    }
    Ok(&candidates[exp_mech_index(scores, coefficient, rng)?])
}

/// Classic propose-test-release for a scalar statistic. `None` is the abort symbol.
pub fn classic_ptr<D: ?Sized, F, M, R>(
    f: F,
    s: &D,
    sensitivity: f64,
    margin_oracle: M,
    eps: f64,
    delta: f64,
    rng: &mut R,
) -> Result<Option<f64>>
where
    F: Fn(&D) -> f64,
    M: Fn(&D) -> u64,
    R: Rng + ?Sized,
{
    if !(sensitivity > 0.0) {
        return Err(invalid("sensitivity must be positive"));
    }
    if !(eps > 0.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(invalid("need eps > 0 and delta in (0, 1)"));
    }
    let noisy = margin_oracle(s) as f64 + laplace(2.0 / eps, rng);
    if noisy < (2.0 / eps) * (1.0 / delta).ln() {
        return Ok(None);
    }
    Ok(Some(f(s) + laplace(2.0 * sensitivity / eps, rng)))
}
