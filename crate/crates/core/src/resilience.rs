//! Empirical resilience certificates, corrupt-good dataset construction and a runtime check of
//! the assumptions behind the utility guarantee.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{dot, Dataset, Provenance};
use crate::datagen::{generate, FamilySpec};
use crate::error::{invalid, HptrError, Result};
use crate::hptr::{family_rho, Calibration, Engine, MechanismConfig, ResilienceFamily};
use crate::linalg::{self, flatten, isserlis_operator, to_mat};
use crate::net::{DirectionNet, NetKind};
use crate::robust1d::{combinations, tail_count, trimmed_moments, TWO_SIDED_TAIL_FRACTION};
use crate::scores::{true_distance, Reference, Task};

// Guards floor(alpha * n) against products landing just below an integer.
const ROUNDING_SLACK: f64 = 1e-9;
pub const EXHAUSTIVE_MAX_N: usize = 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SubsetMode {
    /// Every complement of size at most floor(alpha n).
    Exhaustive,
    /// `count` seeded subsets, sizes uniform over the admissible range. A lower bound.
    Sampled { count: usize, seed: u64 },
    /// Removing the j smallest or j largest feature values, which is exact per direction.
    Extremal,
}

/// Removal set and direction attaining one slot of the certificate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub slot: usize,
    pub direction: usize,
    pub removed: Vec<usize>,
    pub deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResilienceCertificate {
    pub task: Task,
    pub alpha: f64,
    pub rho1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho3: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho4: Option<f64>,
    pub reference: Reference,
    pub net_seed: u64,
    pub net_size: usize,
    pub subset_mode: SubsetMode,
    pub lower_bound: bool,
    pub witnesses: Vec<Witness>,
}

impl ResilienceCertificate {
    pub fn rho(&self) -> Vec<f64> {
        let mut out = vec![self.rho1];
        out.extend([self.rho2, self.rho3, self.rho4].into_iter().flatten());
        out
    }
}

/// One defining ratio: per-record values, their reference value and the normalizing scale.
#[derive(Clone, Debug)]
pub(crate) struct Feature {
    pub values: Vec<f64>,
    pub target: f64,
    pub scale: f64,
}

impl Feature {
    pub(crate) fn deviation(&self, sum: f64, count: usize) -> f64 {
        (sum / count as f64 - self.target).abs() / self.scale
    }
}

fn reference_matrix(rows: &[Vec<f64>], d: usize) -> Result<DMatrix<f64>> {
    let m = to_mat(rows)?;
    if m.nrows() != d || m.ncols() != d {
        return Err(HptrError::Shape(format!("reference matrix is not {d} x {d}")));
    }
    if !linalg::is_positive_definite(&m) {
        return Err(HptrError::Domain("reference covariance is not positive definite".into()));
    }
    Ok(m)
}

fn quad(m: &DMatrix<f64>, v: &[f64]) -> f64 {
    dot(v, &linalg::matvec(m, v))
}

fn check_vector_len(v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(HptrError::Shape(format!("reference vector of length {} for dimension {d}", v.len())));
    }
    Ok(())
}

/// Features per slot, one entry per net direction.
pub(crate) fn features(ds: &Dataset, reference: &Reference, net: &DirectionNet) -> Result<Vec<Vec<Feature>>> {
    let d = ds.d;
    let want = reference.task().net_kind();
    if net.kind() != want || net.dim() != d {
        return Err(invalid("net does not match the reference task and dimension"));
    }
    let dirs = net.elements();
    let per_dir = |f: &dyn Fn(&[f64]) -> Result<Feature>| dirs.iter().map(|v| f(v)).collect::<Result<Vec<_>>>();
    Ok(match reference {
        Reference::Mean { mu, sigma } => {
            check_vector_len(mu, d)?;
            let s = reference_matrix(sigma, d)?;
            let loc = per_dir(&|v| {
                Ok(Feature { values: ds.project(v), target: dot(v, mu), scale: quad(&s, v).sqrt() })
            })?;
            let spread = per_dir(&|v| {
                let c = dot(v, mu);
                let var = quad(&s, v);
                Ok(Feature { values: ds.project(v).into_iter().map(|z| (z - c).powi(2)).collect(), target: var, scale: var })
            })?;
            vec![loc, spread]
        }
        Reference::EuclideanMean { mu } => {
            check_vector_len(mu, d)?;
            vec![per_dir(&|v| Ok(Feature { values: ds.project(v), target: dot(v, mu), scale: 1.0 }))?]
        }
        Reference::Regression { beta, sigma, gamma } => {
            check_vector_len(beta, d)?;
            if !(*gamma > 0.0) {
                return Err(HptrError::Domain("gamma must be positive".into()));
            }
            let s = reference_matrix(sigma, d)?;
            let y = ds.labels_required()?;
            let r: Vec<f64> = (0..ds.n).map(|i| y[i] - dot(ds.row(i), beta)).collect();
            let grad = per_dir(&|v| {
                let sv = quad(&s, v).sqrt();
                let vals = ds.project(v).iter().zip(&r).map(|(a, ri)| a * ri).collect();
                Ok(Feature { values: vals, target: 0.0, scale: sv * gamma })
            })?;
            let second = per_dir(&|v| {
                let var = quad(&s, v);
                Ok(Feature { values: ds.project(v).into_iter().map(|a| a * a).collect(), target: var, scale: var })
            })?;
            let first = per_dir(&|v| Ok(Feature { values: ds.project(v), target: 0.0, scale: quad(&s, v).sqrt() }))?;
            let g2 = gamma * gamma;
            let noise = vec![Feature { values: r.iter().map(|x| x * x).collect(), target: g2, scale: g2 }];
            vec![grad, second, first, noise]
        }
        Reference::Covariance { sigma, psi } => {
            let s = reference_matrix(sigma, d)?;
            let psi = match psi {
                Some(p) => {
                    let m = to_mat(p)?;
                    if m.nrows() != d * d || m.ncols() != d * d {
                        return Err(HptrError::Shape("psi must be d^2 x d^2".into()));
                    }
                    m
                }
                None => isserlis_operator(&s),
            };
            let sflat = flatten(&s);
            let outer: Vec<Vec<f64>> = (0..ds.n)
                .map(|i| {
                    let x = ds.row(i);
                    (0..d * d).map(|k| x[k / d] * x[k % d]).collect()
                })
                .collect();
            let mut loc = Vec::new();
            let mut spread = Vec::new();
            for v in dirs {
                let psi_v = quad(&psi, v);
                if !(psi_v > 0.0) {
                    return Err(HptrError::Domain("psi is not positive on a net direction".into()));
                }
                let target = dot(v, &sflat);
                let vals: Vec<f64> = outer.iter().map(|o| dot(v, o)).collect();
                spread.push(Feature { values: vals.iter().map(|f| (f - target).powi(2)).collect(), target: psi_v, scale: psi_v });
                loc.push(Feature { values: vals, target, scale: psi_v.sqrt() });
            }
            vec![loc, spread]
        }
        Reference::Pca { sigma } => {
            let s = reference_matrix(sigma, d)?;
            let first = per_dir(&|v| Ok(Feature { values: ds.project(v), target: 0.0, scale: quad(&s, v).sqrt() }))?;
            let second = per_dir(&|v| {
                let var = quad(&s, v);
                Ok(Feature { values: ds.project(v).into_iter().map(|a| a * a).collect(), target: var, scale: var })
            })?;
            vec![first, second]
        }
    })
}

pub fn removal_count(n: usize, alpha: f64) -> usize {
    (alpha * n as f64 + ROUNDING_SLACK).floor() as usize
}

/// Removal sets for the enumerating modes, in a fixed order.
fn removal_sets(n: usize, r: usize, mode: &SubsetMode) -> Result<Vec<Vec<usize>>> {
    match mode {
        SubsetMode::Exhaustive => {
            if n > EXHAUSTIVE_MAX_N {
                return Err(invalid(format!("exhaustive certification needs n <= {EXHAUSTIVE_MAX_N}, got {n}")));
            }
            Ok((0..=r).flat_map(|k| combinations(n, k)).collect())
        }
        SubsetMode::Sampled { count, seed } => {
            let mut rng = ChaCha20Rng::seed_from_u64(*seed);
            let mut out = vec![Vec::new()];
            for _ in 0..*count {
                let k = rng.random_range(0..=r);
                let mut s = sample(&mut rng, n, k).into_vec();
                s.sort_unstable();
                out.push(s);
            }
            Ok(out)
        }
        SubsetMode::Extremal => unreachable!("extremal mode does not enumerate"),
    }
}

fn best_for_slot(feats: &[Feature], sets: &[Vec<usize>], n: usize) -> (f64, usize, usize) {
    // (deviation, set index, direction), first maximum in (set, direction) order
    let per_set: Vec<(f64, usize)> = sets
        .par_iter()
        .map(|set| {
            let mut best = (f64::NEG_INFINITY, 0);
            for (k, f) in feats.iter().enumerate() {
                let total: f64 = f.values.iter().sum::<f64>() - set.iter().map(|&i| f.values[i]).sum::<f64>();
                let dev = f.deviation(total, n - set.len());
                if dev > best.0 {
                    best = (dev, k);
                }
            }
            best
        })
        .collect();
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for (s, (dev, k)) in per_set.into_iter().enumerate() {
        if dev > best.0 {
            best = (dev, s, k);
        }
    }
    best
}

fn extremal_for_slot(feats: &[Feature], r: usize) -> (f64, Vec<usize>, usize) {
    let per_dir: Vec<(f64, Vec<usize>)> = feats
        .par_iter()
        .map(|f| {
            let n = f.values.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| f.values[a].total_cmp(&f.values[b]).then(a.cmp(&b)));
            let total: f64 = f.values.iter().sum();
            let mut best = (f.deviation(total, n), 0usize, false);
            let (mut low, mut high) = (0.0, 0.0);
            for j in 1..=r {
                low += f.values[order[j - 1]];
                high += f.values[order[n - j]];
                let from_low = f.deviation(total - low, n - j);
                let from_high = f.deviation(total - high, n - j);
                if from_low > best.0 {
                    best = (from_low, j, false);
                }
                if from_high > best.0 {
                    best = (from_high, j, true);
                }
            }
            let (dev, j, top) = best;
            let mut removed: Vec<usize> = if top { order[n - j..].to_vec() } else { order[..j].to_vec() };
            removed.sort_unstable();
            (dev, removed)
        })
        .collect();
    let mut best = (f64::NEG_INFINITY, Vec::new(), 0);
    for (k, (dev, removed)) in per_dir.into_iter().enumerate() {
        if dev > best.0 {
            best = (dev, removed, k);
        }
    }
    best
}

pub fn certify_resilience(
    ds: &Dataset,
    alpha: f64,
    reference: &Reference,
    net: &DirectionNet,
    mode: &SubsetMode,
) -> Result<ResilienceCertificate> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(invalid(format!("alpha must lie in [0, 1), got {alpha}")));
    }
    let r = removal_count(ds.n, alpha);
    if r >= ds.n {
        return Err(HptrError::InsufficientData { needed: r + 1, got: ds.n });
    }
    let slots = features(ds, reference, net)?;
    let mut rho = Vec::with_capacity(slots.len());
    let mut witnesses = Vec::with_capacity(slots.len());
    let sets = match mode {
        SubsetMode::Extremal => None,
        _ => Some(removal_sets(ds.n, r, mode)?),
    };
    for (slot, feats) in slots.iter().enumerate() {
        let (dev, removed, direction) = match &sets {
            None => extremal_for_slot(feats, r),
            Some(sets) => {
                let (dev, s, k) = best_for_slot(feats, sets, ds.n);
                (dev, sets[s].clone(), k)
            }
        };
        rho.push(dev.max(0.0));
        witnesses.push(Witness { slot: slot + 1, direction, removed, deviation: dev });
    }
    let at = |i: usize| rho.get(i).copied();
    Ok(ResilienceCertificate {
        task: reference.task(),
        alpha,
        rho1: rho[0],
        rho2: at(1),
        rho3: at(2),
        rho4: at(3),
        reference: reference.clone(),
        net_seed: net.spec().seed,
        net_size: net.len(),
        subset_mode: mode.clone(),
        lower_bound: matches!(mode, SubsetMode::Sampled { .. }),
        witnesses,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Adversary {
    Identity,
    MeanShift { direction: Vec<f64>, magnitude: f64 },
    VarianceInflate { factor: f64 },
    TailPlant { direction: Vec<f64> },
    GreedyScore { budget: usize },
}

impl Adversary {
    pub fn name(&self) -> &'static str {
        match self {
            Adversary::Identity => "identity",
            Adversary::MeanShift { .. } => "mean-shift",
            Adversary::VarianceInflate { .. } => "variance-inflate",
            Adversary::TailPlant { .. } => "tail-plant",
            Adversary::GreedyScore { .. } => "greedy-score",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub fraction: f64,
    pub adversary: Adversary,
    pub seed: u64,
}

fn column(ds: &Dataset, j: usize) -> Vec<f64> {
    (0..ds.n).map(|i| ds.row(i)[j]).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    let n = v.len();
    let (_, m, _) = v.select_nth_unstable_by(n / 2, f64::total_cmp);
    *m
}

/// Per-axis trimmed means and deviations.
fn robust_center(ds: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let tail = tail_count(ds.n, 0.1, TWO_SIDED_TAIL_FRACTION);
    (0..ds.d)
        .map(|j| {
            let (m, v) = trimmed_moments(&mut column(ds, j), tail);
            (m, v.sqrt())
        })
        .unzip()
}

fn unit_direction(v: &[f64], d: usize) -> Result<Vec<f64>> {
    if v.len() != d {
        return Err(HptrError::Shape(format!("direction of length {} for dimension {d}", v.len())));
    }
    let norm = dot(v, v).sqrt();
    if !(norm > 0.0) {
        return Err(invalid("direction must be non-zero"));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Indices of the `count` records with the smallest projection on v, skipping `taken`.
fn lowest_on(ds: &Dataset, v: &[f64], count: usize, taken: &[bool]) -> Vec<usize> {
    let proj = ds.project(v);
    let mut idx: Vec<usize> = (0..ds.n).filter(|&i| !taken[i]).collect();
    idx.sort_by(|&a, &b| proj[a].total_cmp(&proj[b]).then(a.cmp(&b)));
    idx.truncate(count);
    idx
}

type ScoreFn<'a> = &'a (dyn Fn(&Dataset) -> f64 + Sync);

/// Replaces floor(fraction n) records according to the adversary. The greedy adversary needs
/// `score_fn`, which it maximizes.
pub fn corrupt_dataset(ds: &Dataset, spec: &CorruptionSpec, score_fn: Option<ScoreFn>) -> Result<Dataset> {
    if !(0.0..0.5).contains(&spec.fraction) {
        return Err(invalid(format!("corruption fraction must lie in [0, 1/2), got {}", spec.fraction)));
    }
    let count = removal_count(ds.n, spec.fraction);
    let mut out = ds.clone();
    out.provenance = Provenance::Corrupted { fraction: spec.fraction, adversary: spec.adversary.name().into() };
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    match &spec.adversary {
        Adversary::Identity => {}
        Adversary::MeanShift { direction, magnitude } => {
            let v = unit_direction(direction, ds.d)?;
            let center: Vec<f64> = (0..ds.d).map(|j| median(column(ds, j))).collect();
            for i in sample(&mut rng, ds.n, count) {
                for (j, x) in out.row_mut(i).iter_mut().enumerate() {
                    *x = center[j] + magnitude * v[j];
                }
            }
        }
        Adversary::VarianceInflate { factor } => {
            if !(factor.is_finite()) || *factor == 1.0 {
                return Err(invalid("inflation factor must be finite and differ from 1"));
            }
            let (center, _) = robust_center(ds);
            for i in sample(&mut rng, ds.n, count) {
                for (j, x) in out.row_mut(i).iter_mut().enumerate() {
                    *x = center[j] + factor * (*x - center[j]);
                }
            }
        }
        Adversary::TailPlant { direction } => {
            let v = unit_direction(direction, ds.d)?;
            let (center, _) = robust_center(ds);
            let proj = ds.project(&v);
            let mut sorted = proj.clone();
            sorted.sort_unstable_by(f64::total_cmp);
            let tail = tail_count(ds.n, spec.fraction.max(1e-12) * 5.5, TWO_SIDED_TAIL_FRACTION);
            let edge = sorted[ds.n - 1 - tail.min(ds.n - 1)];
            let shift = edge - dot(&v, &center);
            for i in lowest_on(ds, &v, count, &vec![false; ds.n]) {
                for (j, x) in out.row_mut(i).iter_mut().enumerate() {
                    *x = center[j] + shift * v[j];
                }
            }
        }
        Adversary::GreedyScore { budget } => {
            let score = score_fn.ok_or_else(|| invalid("greedy adversary needs a score function"))?;
            if *budget == 0 {
                return Err(invalid("greedy budget must be positive"));
            }
            greedy(&mut out, ds, count, *budget, spec.seed, score)?;
        }
    }
    Ok(out)
}

struct PoolPoint {
    direction: Vec<f64>,
    x: Vec<f64>,
    y: Option<f64>,
}

fn greedy(out: &mut Dataset, ds: &Dataset, count: usize, budget: usize, seed: u64, score: ScoreFn) -> Result<()> {
    let (center, sd) = robust_center(ds);
    let net = DirectionNet::vectors(ds.d, 16, seed)?;
    let tail = tail_count(ds.n, 0.1, TWO_SIDED_TAIL_FRACTION);
    let y_sd = ds.labels.as_ref().map(|y| trimmed_moments(&mut y.clone(), tail).1.sqrt());
    let mut pool = Vec::new();
    for v in net.elements() {
        let sv: f64 = v.iter().zip(&sd).map(|(a, s)| (a * s).powi(2)).sum::<f64>().sqrt();
        for c in [1.0, 3.0, 10.0] {
            let x: Vec<f64> = center.iter().zip(v).map(|(m, a)| m + c * sv * a).collect();
            match y_sd {
                Some(s) => {
                    for sign in [1.0, -1.0] {
                        pool.push(PoolPoint { direction: v.clone(), x: x.clone(), y: Some(sign * c * s) });
                    }
                }
                None => pool.push(PoolPoint { direction: v.clone(), x, y: None }),
            }
        }
    }
    let mut taken = vec![false; ds.n];
    let mut left = count;
    for round in 0..budget {
        let batch = left.div_ceil(budget - round);
        if batch == 0 {
            break;
        }
        let trials: Vec<(f64, Vec<usize>)> = pool
            .par_iter()
            .map(|p| {
                let idx = lowest_on(out, &p.direction, batch, &taken);
                let mut trial = out.clone();
                apply(&mut trial, &idx, p);
                (score(&trial), idx)
            })
            .collect();
        let mut best = 0;
        for (k, t) in trials.iter().enumerate() {
            if t.0 > trials[best].0 {
                best = k;
            }
        }
        let idx = &trials[best].1;
        apply(out, idx, &pool[best]);
        for &i in idx {
            taken[i] = true;
        }
        left -= idx.len();
    }
    Ok(())
}

fn apply(ds: &mut Dataset, idx: &[usize], p: &PoolPoint) {
    for &i in idx {
        ds.row_mut(i).copy_from_slice(&p.x);
        if let (Some(y), Some(labels)) = (p.y, ds.labels.as_mut()) {
            labels[i] = y;
        }
    }
}

/// Constants of the utility theorem.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityConstants {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for UtilityConstants {
    fn default() -> Self {
        UtilityConstants { c0: 31.8, c1: 10.2, c2: 2.0 }
    }
}

/// Sample sizes for the Monte Carlo parts of the check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarlo {
    pub datasets: usize,
    pub thetas: usize,
    pub seed: u64,
}

impl Default for MonteCarlo {
    fn default() -> Self {
        MonteCarlo { datasets: 8, thetas: 64, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AssumptionMeasurements {
    pub outer_count: usize,
    pub inner_count: usize,
    pub truth_outer_count: usize,
    pub truth_inner_count: usize,
    pub volume_bound: f64,
    pub max_swap_change: f64,
    pub sensitivity_bound: f64,
    pub max_robust_gap: f64,
    pub sampled_thetas: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub a: bool,
    pub b: bool,
    pub c: bool,
    pub d: bool,
    pub measurements: AssumptionMeasurements,
    pub reasons: Vec<String>,
}

fn sample_indices(pool: &[usize], k: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    if pool.len() <= k {
        return pool.to_vec();
    }
    sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
}

/// Random record near the bulk of S, used to build nearby datasets.
fn random_record(center: &[f64], sd: &[f64], y_scale: Option<(f64, f64)>, rng: &mut ChaCha20Rng) -> (Vec<f64>, Option<f64>) {
    let x = center
        .iter()
        .zip(sd)
        .map(|(m, s)| {
            let g: f64 = StandardNormal.sample(rng);
            m + 3.0 * s * g
        })
        .collect();
    let y = y_scale.map(|(m, s)| {
        let g: f64 = StandardNormal.sample(rng);
        m + 3.0 * s * g
    });
    (x, y)
}

fn replace(ds: &mut Dataset, i: usize, rec: &(Vec<f64>, Option<f64>)) {
    ds.row_mut(i).copy_from_slice(&rec.0);
    if let (Some(y), Some(labels)) = (rec.1, ds.labels.as_mut()) {
        labels[i] = y;
    }
}

/// Checks the four assumptions of the utility theorem for one dataset and config. (a), (b) and
/// (d) are evaluated on the candidate grid and by Monte Carlo; (c) is the closed-form inequality.
pub fn check_utility_assumptions(
    ds: &Dataset,
    cfg: &MechanismConfig,
    reference: &Reference,
    constants: &UtilityConstants,
    rho: f64,
    mc: &MonteCarlo,
) -> Result<AssumptionReport> {
    cfg.validate()?;
    let tau = cfg.tau.ok_or_else(|| invalid("the utility assumptions need a threshold tau"))?;
    if reference.task() != cfg.task && !(cfg.task == Task::EuclideanMean && reference.task() == Task::Mean) {
        return Err(invalid("reference task does not match the config"));
    }
    if !(rho > 0.0) {
        return Err(invalid("rho must be positive"));
    }
    let UtilityConstants { c0, c1, c2 } = *constants;
    let p = cfg.task.param_dim(cfg.net.dim) as f64;
    let ks = cfg.k_star as f64;
    let delta_s = cfg.sensitivity;
    let mut m = AssumptionMeasurements::default();
    let mut reasons = Vec::new();

    let cands = cfg.candidates()?;
    let engine = Engine::new(ds, cfg)?;
    let scores = engine.scores(&cands);
    let truth: Vec<f64> = (0..cands.len())
        .into_par_iter()
        .map(|i| {
            if !cands.feasible[i] {
                return Ok(f64::INFINITY);
            }
            true_distance(&cands.parameter(i), reference).map(|t| t.value)
        })
        .collect::<Result<_>>()?;
    let count = |v: &[f64], r: f64| v.iter().filter(|s| **s <= r).count();

    // (a) bounded volume
    m.volume_bound = (c2 * p).exp();
    let inner_radius = 0.875 * tau - (ks + 1.0) * delta_s;
    let a = if inner_radius <= 0.0 {
        reasons.push("empty inner set".into());
        false
    } else {
        m.outer_count = count(&scores, tau + (ks + 1.0) * delta_s + c1 * rho);
        m.inner_count = count(&scores, inner_radius - c1 * rho);
        m.truth_outer_count = count(&truth, (c0 + 2.0 * c1) * rho);
        m.truth_inner_count = count(&truth, c1 * rho);
        if m.inner_count == 0 || m.truth_inner_count == 0 {
            return Err(HptrError::Resolution("no grid point falls inside the inner set".into()));
        }
        let ok_score = (m.outer_count as f64) <= m.volume_bound * m.inner_count as f64;
        let ok_truth = (m.truth_outer_count as f64) <= m.volume_bound * m.truth_inner_count as f64;
        if !ok_score {
            reasons.push("score-ball count ratio exceeds the volume bound".into());
        }
        if !ok_truth {
            reasons.push("truth-ball count ratio exceeds the volume bound".into());
        }
        ok_score && ok_truth
    };

    // (b) local sensitivity on datasets within k* swaps
    let mut rng = ChaCha20Rng::seed_from_u64(mc.seed);
    let ball: Vec<usize> = (0..cands.len()).filter(|&i| scores[i] <= tau + (ks + 3.0) * delta_s).collect();
    let thetas = sample_indices(&ball, mc.thetas, &mut rng);
    m.sampled_thetas = thetas.len();
    let (center, sd) = robust_center(ds);
    let tail = tail_count(ds.n, 0.1, TWO_SIDED_TAIL_FRACTION);
    let y_scale = ds.labels.as_ref().map(|y| {
        let (mm, v) = trimmed_moments(&mut y.clone(), tail);
        (mm, v.sqrt())
    });
    let mut worst: f64 = 0.0;
    for _ in 0..mc.datasets {
        let k = rng.random_range(0..=cfg.k_star as usize).min(ds.n - 1);
        let mut s1 = ds.clone();
        let idx = sample(&mut rng, ds.n, k + 1).into_vec();
        for &i in &idx[..k] {
            let rec = random_record(&center, &sd, y_scale, &mut rng);
            replace(&mut s1, i, &rec);
        }
        let mut s2 = s1.clone();
        let rec = random_record(&center, &sd, y_scale, &mut rng);
        replace(&mut s2, idx[k], &rec);
        let e1 = Engine::new(&s1, cfg)?;
        let e2 = Engine::new(&s2, cfg)?;
        for &t in &thetas {
            let (d1, d2) = (e1.score_point(&cands.points[t]), e2.score_point(&cands.points[t]));
            let change = if d1 == d2 { 0.0 } else { (d1 - d2).abs() };
            worst = worst.max(if change.is_nan() { f64::INFINITY } else { change });
        }
    }
    m.max_swap_change = worst;
    let b = worst <= delta_s;
    if !b {
        reasons.push(format!("one-swap score change {worst} exceeds Delta {delta_s}"));
    }

    // (c) bounded sensitivity
    m.sensitivity_bound =
        (c0 - 3.0 * c1) * rho * cfg.eps / (32.0 * (c2 * p + cfg.eps / 2.0 + (16.0 / (cfg.delta * cfg.zeta)).ln()));
    let c = delta_s <= m.sensitivity_bound;
    if !c {
        reasons.push(format!("Delta {delta_s} exceeds {}", m.sensitivity_bound));
    }

    // (d) robustness on B_tau
    let inside: Vec<usize> = (0..cands.len()).filter(|&i| scores[i] <= tau).collect();
    let probe = sample_indices(&inside, mc.thetas.max(1) * 4, &mut rng);
    m.max_robust_gap = probe.iter().map(|&i| (truth[i] - scores[i]).abs()).fold(0.0, f64::max);
    let d = !probe.is_empty() && m.max_robust_gap <= c1 * rho;
    if probe.is_empty() {
        reasons.push("no grid point inside B_tau".into());
    } else if !d {
        reasons.push(format!("|D_truth - D_S| reaches {}", m.max_robust_gap));
    }

    Ok(AssumptionReport { a, b, c, d, measurements: m, reasons })
}

/// Estimates the multiplier in front of the family rate: the largest ratio of the certified
/// rho1 (Extremal mode) to the unit-constant rate over `trials` clean draws.
pub fn estimate_calibration(
    spec: &FamilySpec,
    task: Task,
    family: &ResilienceFamily,
    alpha: f64,
    n: usize,
    net: &DirectionNet,
    trials: usize,
    seed: u64,
) -> Result<Calibration> {
    let unit = Calibration::default();
    let (rate, _) = family_rho(family, alpha, &unit)?;
    let reference = spec.reference(task)?;
    if net.kind() != task.net_kind() {
        return Err(invalid("net kind does not match the task"));
    }
    let worst = (0..trials as u64)
        .map(|t| {
            let ds = generate(spec, n, seed.wrapping_add(t))?;
            let cert = certify_resilience(&ds, alpha, &reference, net, &SubsetMode::Extremal)?;
            Ok(cert.rho1)
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(Calibration { c: worst / rate, zeta: unit.zeta })
}

pub fn net_for(task: Task, d: usize, size: usize, seed: u64) -> Result<DirectionNet> {
    match task.net_kind() {
        NetKind::Vector => DirectionNet::vectors(d, size, seed),
        NetKind::SymmetricMatrix => DirectionNet::symmetric(d, size, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hptr::{propose_params, GridSpec};
    use crate::net::NetSpec;
    use crate::scores::MeanScorer;

    fn std_mean(d: usize) -> Reference {
        let sigma = (0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        Reference::Mean { mu: vec![0.0; d], sigma }
    }

    fn gaussian(d: usize, n: usize, seed: u64) -> Dataset {
        let sigma = (0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        generate(&FamilySpec::Gaussian { mu: vec![0.0; d], sigma }, n, seed).unwrap()
    }

    #[test]
    fn hand_examples() {
        let ds = Dataset::new(1, vec![-1.0, 1.0], None).unwrap();
        let net = DirectionNet::vectors(1, 2, 0).unwrap();
        let c = certify_resilience(&ds, 0.0, &std_mean(1), &net, &SubsetMode::Exhaustive).unwrap();
        assert_eq!((c.rho1, c.rho2), (0.0, Some(0.0)));
        let c = certify_resilience(&ds, 0.5, &std_mean(1), &net, &SubsetMode::Exhaustive).unwrap();
        assert_eq!((c.rho1, c.rho2), (1.0, Some(0.0)));
        assert_eq!(c.witnesses[0].removed.len(), 1);
        assert!(!c.lower_bound);
    }

    #[test]
    fn bad_reference_is_a_domain_error() {
        let ds = gaussian(2, 10, 0);
        let net = DirectionNet::vectors(2, 8, 0).unwrap();
        let r = Reference::Mean { mu: vec![0.0; 2], sigma: vec![vec![1.0, 2.0], vec![2.0, 1.0]] };
        assert!(matches!(certify_resilience(&ds, 0.1, &r, &net, &SubsetMode::Extremal), Err(HptrError::Domain(_))));
        let r = Reference::Regression { beta: vec![0.0; 2], sigma: vec![vec![1.0, 0.0], vec![0.0, 1.0]], gamma: 0.0 };
        assert!(matches!(certify_resilience(&ds, 0.1, &r, &net, &SubsetMode::Extremal), Err(HptrError::Domain(_))));
    }

    #[test]
    fn sampled_is_a_lower_bound_and_extremal_is_exact() {
        let net = DirectionNet::vectors(2, 8, 1).unwrap();
        for seed in 0..50 {
            let ds = gaussian(2, 10, seed);
            let ex = certify_resilience(&ds, 0.3, &std_mean(2), &net, &SubsetMode::Exhaustive).unwrap();
            let sa = certify_resilience(&ds, 0.3, &std_mean(2), &net, &SubsetMode::Sampled { count: 10_000, seed }).unwrap();
            let xt = certify_resilience(&ds, 0.3, &std_mean(2), &net, &SubsetMode::Extremal).unwrap();
            assert!(sa.lower_bound);
            for ((e, s), x) in ex.rho().iter().zip(sa.rho()).zip(xt.rho()) {
                assert!(s <= *e + 1e-12);
                assert!((x - e).abs() < 1e-12, "{x} vs {e}");
            }
        }
    }

    #[test]
    fn witnesses_replay() {
        let ds = gaussian(2, 12, 3);
        let net = DirectionNet::vectors(2, 8, 1).unwrap();
        let cert = certify_resilience(&ds, 0.25, &std_mean(2), &net, &SubsetMode::Exhaustive).unwrap();
        let feats = features(&ds, &cert.reference, &net).unwrap();
        for w in &cert.witnesses {
            let f = &feats[w.slot - 1][w.direction];
            let kept: Vec<usize> = (0..ds.n).filter(|i| !w.removed.contains(i)).collect();
            let sum: f64 = kept.iter().map(|&i| f.values[i]).sum();
            let want = cert.rho()[w.slot - 1];
            assert!((f.deviation(sum, kept.len()) - want).abs() <= 1e-12 * want.max(1.0));
        }
    }

    #[test]
    fn monotone_in_alpha_and_net() {
        let ds = gaussian(2, 500, 4);
        let small = DirectionNet::vectors(2, 16, 0).unwrap();
        let big = DirectionNet::vectors(2, 64, 0).unwrap();
        let mut last = vec![0.0; 2];
        for alpha in [0.0, 0.01, 0.05, 0.1, 0.2] {
            let c = certify_resilience(&ds, alpha, &std_mean(2), &small, &SubsetMode::Extremal).unwrap();
            let cb = certify_resilience(&ds, alpha, &std_mean(2), &big, &SubsetMode::Extremal).unwrap();
            for (j, r) in c.rho().into_iter().enumerate() {
                assert!(r >= last[j]);
                assert!(r <= cb.rho()[j] + 1e-15);
                last[j] = r;
            }
        }
    }

    #[test]
    fn every_task_certifies() {
        let net = DirectionNet::vectors(2, 8, 0).unwrap();
        let lr = FamilySpec::LinearModel {
            beta: vec![1.0, 2.0],
            sigma_x: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            noise: crate::datagen::NoiseSpec::Gaussian { gamma: 1.0 },
        };
        let ds = generate(&lr, 300, 2).unwrap();
        let c = certify_resilience(&ds, 0.1, &lr.reference(Task::Regression).unwrap(), &net, &SubsetMode::Extremal).unwrap();
        assert!(c.rho4.is_some() && c.rho1 > 0.0);
        let g = FamilySpec::Gaussian { mu: vec![0.0, 0.0], sigma: vec![vec![2.0, 0.5], vec![0.5, 1.0]] };
        let ds = generate(&g, 300, 2).unwrap();
        let sym = DirectionNet::symmetric(2, 10, 0).unwrap();
        let c = certify_resilience(&ds, 0.1, &g.reference(Task::Covariance).unwrap(), &sym, &SubsetMode::Extremal).unwrap();
        assert!(c.rho2.is_some() && c.rho3.is_none());
        let c = certify_resilience(&ds, 0.1, &g.reference(Task::Pca).unwrap(), &net, &SubsetMode::Extremal).unwrap();
        assert!(c.rho1 > 0.0);
        let c = certify_resilience(&ds, 0.1, &g.reference(Task::EuclideanMean).unwrap(), &net, &SubsetMode::Extremal).unwrap();
        assert!(c.rho2.is_none());
    }

    #[test]
    fn tail_bound_from_certified_rho() {
        let net = DirectionNet::vectors(1, 2, 0).unwrap();
        for seed in 0..5 {
            let ds = gaussian(1, 12, seed);
            let alpha = 0.25;
            let cert = certify_resilience(&ds, alpha, &std_mean(1), &net, &SubsetMode::Exhaustive).unwrap();
            let feats = features(&ds, &cert.reference, &net).unwrap();
            let rho = cert.rho();
            for size in 1..=ds.n {
                let a_t = (size as f64 / ds.n as f64).min(alpha);
                for t in combinations(ds.n, size) {
                    for (slot, fs) in feats.iter().enumerate() {
                        for f in fs {
                            let dev = f.deviation(t.iter().map(|&i| f.values[i]).sum(), size);
                            assert!(dev <= (2.0 - a_t) / a_t * rho[slot] + 1e-12, "slot {slot} |T| = {size}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn trimmed_statistics_on_corrupt_good_sets() {
        let alpha = 0.02;
        let n = 20_000;
        let ds = gaussian(2, n, 8);
        let net = DirectionNet::vectors(2, 16, 0).unwrap();
        let cert = certify_resilience(&ds, alpha, &std_mean(2), &net, &SubsetMode::Extremal).unwrap();
        let tail = tail_count(n, alpha, TWO_SIDED_TAIL_FRACTION);
        let score = |s: &Dataset| MeanScorer::new(s, alpha, &net, true).unwrap().score(&[0.0, 0.0]);
        let advs = [
            Adversary::MeanShift { direction: vec![1.0, 0.0], magnitude: 20.0 },
            Adversary::VarianceInflate { factor: 50.0 },
            Adversary::TailPlant { direction: vec![1.0, 1.0] },
            Adversary::GreedyScore { budget: 2 },
        ];
        for adv in advs {
            let spec = CorruptionSpec { fraction: alpha / 5.5, adversary: adv, seed: 1 };
            let bad = corrupt_dataset(&ds, &spec, Some(&score)).unwrap();
            for v in net.elements() {
                let (m, var) = trimmed_moments(&mut bad.project(v), tail);
                assert!(m.abs() <= 6.0 * cert.rho1, "{m} vs {}", cert.rho1);
                assert!((0.9..=1.1).contains(&var.sqrt()), "{}", var.sqrt());
            }
        }
    }

    #[test]
    fn corruption_accounting() {
        let ds = gaussian(2, 100, 5);
        let score = |s: &Dataset| s.x.iter().sum::<f64>();
        let advs = [
            Adversary::MeanShift { direction: vec![1.0, 0.0], magnitude: 10.0 },
            Adversary::VarianceInflate { factor: 3.0 },
            Adversary::TailPlant { direction: vec![0.0, 1.0] },
            Adversary::GreedyScore { budget: 3 },
        ];
        for adv in advs {
            for fraction in [0.0, 0.05, 0.1, 0.13] {
                let spec = CorruptionSpec { fraction, adversary: adv.clone(), seed: 2 };
                let bad = corrupt_dataset(&ds, &spec, Some(&score)).unwrap();
                assert_eq!(ds.hamming(&bad), removal_count(100, fraction), "{adv:?} {fraction}");
            }
        }
        let spec = CorruptionSpec { fraction: 0.1, adversary: Adversary::MeanShift { direction: vec![1.0, 0.0], magnitude: 10.0 }, seed: 0 };
        let bad = corrupt_dataset(&ds, &spec, None).unwrap();
        let shifted = (0..100).filter(|&i| bad.row(i) != ds.row(i)).collect::<Vec<_>>();
        let first = bad.row(shifted[0]).to_vec();
        assert!(shifted.iter().all(|&i| bad.row(i) == first.as_slice()));
        let same = corrupt_dataset(&ds, &CorruptionSpec { fraction: 0.2, adversary: Adversary::Identity, seed: 0 }, None).unwrap();
        assert_eq!(same.x, ds.x);
        let greedy = CorruptionSpec { fraction: 0.1, adversary: Adversary::GreedyScore { budget: 1 }, seed: 0 };
        assert!(matches!(corrupt_dataset(&ds, &greedy, None), Err(HptrError::InvalidParameter(_))));
    }

    #[test]
    fn greedy_beats_mean_shift() {
        let net = DirectionNet::vectors(2, 16, 0).unwrap();
        let alpha = 0.1;
        let score = |s: &Dataset| MeanScorer::new(s, alpha, &net, true).unwrap().score(&[0.0, 0.0]);
        let mut wins = 0;
        for seed in 0..50 {
            let ds = gaussian(2, 400, 100 + seed);
            let frac = alpha / 5.5 * 4.0;
            let shift = CorruptionSpec { fraction: frac, adversary: Adversary::MeanShift { direction: vec![1.0, 0.0], magnitude: 10.0 }, seed };
            let greedy = CorruptionSpec { fraction: frac, adversary: Adversary::GreedyScore { budget: 2 }, seed };
            let a = score(&corrupt_dataset(&ds, &greedy, Some(&score)).unwrap());
            let b = score(&corrupt_dataset(&ds, &shift, None).unwrap());
            wins += usize::from(a >= b);
        }
        assert!(wins >= 40, "{wins}");
    }

    fn mean_cfg(ds: &Dataset, eps: f64, rho: f64, alpha: f64, ppa: usize) -> MechanismConfig {
        let p = propose_params(Task::Mean, &ResilienceFamily::SubGaussian, alpha, ds.n, &Calibration { c: rho / (alpha * (1.0 / alpha).ln().sqrt()), zeta: 0.05 }).unwrap();
        let grid = GridSpec::new(vec![0.0; ds.d], vec![10.0; ds.d], ppa).unwrap();
        let net = NetSpec { kind: NetKind::Vector, dim: ds.d, seed: 0, size: 16 };
        MechanismConfig::new(Task::Mean, eps, 1e-6, 0.05, p.sensitivity, p.tau, alpha, Some(grid), net, 0).unwrap()
    }

    #[test]
    fn utility_assumptions() {
        let ds = gaussian(2, 20_000, 11);
        let net = DirectionNet::vectors(2, 16, 0).unwrap();
        let alpha = 0.1;
        let cert = certify_resilience(&ds, alpha, &std_mean(2), &net, &SubsetMode::Extremal).unwrap();
        let rho = cert.rho1;
        let cfg = mean_cfg(&ds, 4.0, rho, alpha, 161);
        let r = check_utility_assumptions(&ds, &cfg, &std_mean(2), &UtilityConstants::default(), rho, &MonteCarlo::default()).unwrap();
        assert!(r.d, "{r:?}");
        assert!(r.b, "{r:?}");
        // the closed form alone, at a larger n
        let big = propose_params(Task::Mean, &ResilienceFamily::SubGaussian, alpha, 10_000_000, &Calibration::default()).unwrap();
        let mut cfg_big = cfg.clone();
        cfg_big.sensitivity = big.sensitivity;
        let k = UtilityConstants::default();
        let bound = (k.c0 - 3.0 * k.c1) * big.rho * cfg.eps
            / (32.0 * (k.c2 * 2.0 + cfg.eps / 2.0 + (16.0 / (cfg.delta * cfg.zeta)).ln()));
        assert!(big.sensitivity <= bound);
        // tiny tau: empty inner set
        let mut tiny = cfg.clone();
        tiny.tau = Some(cfg.sensitivity);
        let r = check_utility_assumptions(&ds, &tiny, &std_mean(2), &UtilityConstants::default(), rho, &MonteCarlo::default()).unwrap();
        assert!(!r.a && r.reasons.iter().any(|s| s == "empty inner set"));
    }

    #[test]
    fn calibration_constant_is_positive() {
        let g = FamilySpec::Gaussian { mu: vec![0.0], sigma: vec![vec![1.0]] };
        let net = DirectionNet::vectors(1, 2, 0).unwrap();
        let c = estimate_calibration(&g, Task::Mean, &ResilienceFamily::SubGaussian, 0.1, 2000, &net, 4, 0).unwrap();
        assert!(c.c > 0.1 && c.c < 3.0, "{c:?}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(48))]
        #[test]
        fn corruption_touches_at_most_the_budget(
            n in 10usize..200,
            fraction in 0.0f64..0.49,
            seed in 0u64..1000,
            kind in 0usize..4,
        ) {
            let ds = gaussian(2, n, seed);
            let adversary = match kind {
                0 => Adversary::MeanShift { direction: vec![1.0, -1.0], magnitude: 5.0 },
                1 => Adversary::VarianceInflate { factor: 4.0 },
                2 => Adversary::TailPlant { direction: vec![0.0, 1.0] },
                _ => Adversary::Identity,
            };
            let spec = CorruptionSpec { fraction, adversary, seed };
            let out = corrupt_dataset(&ds, &spec, None).unwrap();
            proptest::prop_assert_eq!(out.n, ds.n);
            proptest::prop_assert!(out.hamming(&ds) <= removal_count(n, fraction));
            proptest::prop_assert_eq!(&out, &corrupt_dataset(&ds, &spec, None).unwrap());
        }
    }
}
