//! Safety margins: exact breadth-first search over tiny universes, and a certified lower
//! bound from order-statistic intervals.
//!
//! Certified mode checks, for each level K, that every S' within Hamming distance K of S is
//! safe: the one-swap change of the score is at most Delta on every candidate that can lie in
//! the support of S' or its neighbors, and the band {tau - Delta < D <= tau} carries at most
//! e^{-eps/2} delta / 8 of the release mass at levels K and K + 1. Those two facts bound the
//! hockey-stick divergence between neighboring release laws by delta / 2 at eps / 2.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Candidates, Engine, MechanismConfig, ReleaseLaw, Scorer};
use crate::data::{dot, Dataset};
use crate::error::{invalid, HptrError, Result};
use crate::mechanisms::{hockey_stick_delta, DiscretePmf};
use crate::scores::{LocationScorer, LrScorer, PcaScorer, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginKind {
    Exact,
    Certified,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum MarginMode {
    /// Search over datasets built from `alphabet` records. Each record has width d, or d + 1
    /// with the label last for regression. `budget` caps the number of release laws evaluated.
    Exact { alphabet: Vec<Vec<f64>>, cap: u64, budget: usize },
    Certified,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginResult {
    pub value: u64,
    pub mode: MarginKind,
    pub cap: u64,
    /// Records of the nearest unsafe dataset found (exact mode).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witness: Option<Vec<Vec<f64>>>,
}

type Key = Vec<u32>;

/// Exact margin search with release laws cached across calls, keyed by record multiset.
pub struct ExactMarginOracle<'c> {
    cfg: &'c MechanismConfig,
    cands: Candidates,
    width: usize,
    alphabet_len: usize,
    table: Vec<Vec<f64>>,
    cap: u64,
    budget: usize,
    laws: HashMap<Key, DiscretePmf>,
    verdicts: HashMap<Key, bool>,
}

impl<'c> ExactMarginOracle<'c> {
    pub fn new(cfg: &'c MechanismConfig, alphabet: &[Vec<f64>], cap: u64, budget: usize) -> Result<Self> {
        cfg.validate()?;
        let width = cfg.net.dim + usize::from(cfg.task == Task::Regression);
        if alphabet.is_empty() || alphabet.iter().any(|r| r.len() != width) {
            return Err(invalid(format!("alphabet records must be non-empty with width {width}")));
        }
        let mut table: Vec<Vec<f64>> = Vec::new();
        for r in alphabet {
            if !table.iter().any(|t| same_record(t, r)) {
                table.push(r.clone());
            }
        }
        Ok(ExactMarginOracle {
            cfg,
            cands: cfg.candidates()?,
            width,
            alphabet_len: table.len(),
            table,
            cap,
            budget,
            laws: HashMap::new(),
            verdicts: HashMap::new(),
        })
    }

    pub fn laws_evaluated(&self) -> usize {
        self.laws.len()
    }

    fn record_id(&mut self, r: &[f64]) -> u32 {
        if let Some(i) = self.table.iter().position(|t| same_record(t, r)) {
            return i as u32;
        }
        self.table.push(r.to_vec());
        (self.table.len() - 1) as u32
    }

    fn key_of(&mut self, ds: &Dataset) -> Result<Key> {
        if ds.d != self.cfg.net.dim {
            return Err(HptrError::Shape("dataset dimension does not match the config".into()));
        }
        let mut key = Vec::with_capacity(ds.n);
        for i in 0..ds.n {
            let mut r = ds.row(i).to_vec();
            if self.width > ds.d {
                r.push(ds.labels_required()?[i]);
            }
            key.push(self.record_id(&r));
        }
        key.sort_unstable();
        Ok(key)
    }

    fn dataset(&self, key: &Key) -> Result<Dataset> {
        let d = self.cfg.net.dim;
        let mut x = Vec::with_capacity(key.len() * d);
        let mut y = Vec::new();
        for &id in key {
            let r = &self.table[id as usize];
            x.extend_from_slice(&r[..d]);
            if self.width > d {
                y.push(r[d]);
            }
        }
        Dataset::new(d, x, if self.width > d { Some(y) } else { None })
    }

    fn neighbors(&self, key: &Key) -> Vec<Key> {
        let mut out = Vec::new();
        for (i, &id) in key.iter().enumerate() {
            if i > 0 && key[i - 1] == id {
                continue;
            }
            for a in 0..self.alphabet_len as u32 {
                if a != id {
                    let mut k = key.clone();
                    k[i] = a;
                    k.sort_unstable();
                    out.push(k);
                }
            }
        }
        out.sort();
        out.dedup();
        out
    }

    fn ensure_laws(&mut self, keys: &[Key], radius: u64) -> Result<()> {
        let mut missing: Vec<&Key> = keys.iter().filter(|k| !self.laws.contains_key(*k)).collect();
        missing.sort();
        missing.dedup();
        if self.laws.len() + missing.len() > self.budget {
            return Err(HptrError::Resource { reached: radius as usize });
        }
        let computed: Vec<(Key, DiscretePmf)> = missing
            .par_iter()
            .map(|k| {
                let ds = self.dataset(k)?;
                let engine = Engine::new(&ds, self.cfg)?;
                let law = ReleaseLaw::from_scores(engine.scores(&self.cands), self.cfg.tau, self.cfg.coefficient())?;
                Ok(((*k).clone(), law.pmf()))
            })
            .collect::<Result<_>>()?;
        self.laws.extend(computed);
        Ok(())
    }

    /// Whether some neighbor's release law differs from this one by more than delta/2 at eps/2.
    fn is_unsafe(&mut self, key: &Key) -> Result<bool> {
        if let Some(&v) = self.verdicts.get(key) {
            return Ok(v);
        }
        let (eps, half) = (self.cfg.eps / 2.0, self.cfg.delta / 2.0);
        let p = &self.laws[key];
        let mut verdict = false;
        for nb in self.neighbors(key) {
            let q = &self.laws[&nb];
            if hockey_stick_delta(p, q, eps)? > half || hockey_stick_delta(q, p, eps)? > half {
                verdict = true;
                break;
            }
        }
        self.verdicts.insert(key.clone(), verdict);
        Ok(verdict)
    }

    pub fn margin(&mut self, ds: &Dataset) -> Result<MarginResult> {
        let start = self.key_of(ds)?;
        let mut seen: HashSet<Key> = HashSet::from([start.clone()]);
        let mut frontier = vec![start];
        for radius in 0..self.cap {
            let mut needed: Vec<Key> = frontier.clone();
            for k in &frontier {
                needed.extend(self.neighbors(k));
            }
            self.ensure_laws(&needed, radius)?;
            for k in &frontier {
                if self.is_unsafe(k)? {
                    let witness = k.iter().map(|&id| self.table[id as usize].clone()).collect();
                    return Ok(MarginResult { value: radius, mode: MarginKind::Exact, cap: self.cap, witness: Some(witness) });
                }
            }
            let mut next: Vec<Key> = Vec::new();
            for k in &frontier {
                for nb in self.neighbors(k) {
                    if seen.insert(nb.clone()) {
                        next.push(nb);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            next.sort();
            frontier = next;
        }
        Ok(MarginResult { value: self.cap, mode: MarginKind::Exact, cap: self.cap, witness: None })
    }
}

fn same_record(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn margin_exact(ds: &Dataset, cfg: &MechanismConfig, mode: &MarginMode) -> Result<MarginResult> {
    match mode {
        MarginMode::Exact { alphabet, cap, budget } => ExactMarginOracle::new(cfg, alphabet, *cap, *budget)?.margin(ds),
        MarginMode::Certified => Err(invalid("margin_exact needs the exact mode")),
    }
}

/// Sorted values with padded access: positions below 1 read `lo`, above n read `hi`.
/// Prefix sums are taken about `c`.
struct Order {
    z: Vec<f64>,
    c: f64,
    lo: f64,
    hi: f64,
    p1: Vec<f64>,
    p2: Vec<f64>,
}

fn pad(count: i64, v: f64) -> f64 {
    if count <= 0 {
        0.0
    } else {
        count as f64 * v
    }
}

impl Order {
    fn new(mut z: Vec<f64>, c: f64, lo: f64, hi: f64) -> Self {
        z.sort_unstable_by(f64::total_cmp);
        let mut p1 = Vec::with_capacity(z.len() + 1);
        let mut p2 = Vec::with_capacity(z.len() + 1);
        let (mut s1, mut s2) = (0.0, 0.0);
        p1.push(0.0);
        p2.push(0.0);
        for v in &z {
            s1 += v - c;
            s2 += (v - c) * (v - c);
            p1.push(s1);
            p2.push(s2);
        }
        Order { z, c, lo, hi, p1, p2 }
    }

    fn n(&self) -> i64 {
        self.z.len() as i64
    }

    fn at(&self, i: i64) -> f64 {
        if i < 1 {
            self.lo
        } else if i > self.n() {
            self.hi
        } else {
            self.z[(i - 1) as usize]
        }
    }

    /// Centered (sum, sum of squares) over in-range positions [a, b].
    fn sums(&self, a: i64, b: i64) -> (f64, f64) {
        if a > b {
            return (0.0, 0.0);
        }
        let (a, b) = ((a - 1) as usize, b as usize);
        (self.p1[b] - self.p1[a], self.p2[b] - self.p2[a])
    }

    /// Raw sum over padded positions [a, b].
    fn window_sum(&self, a: i64, b: i64) -> f64 {
        let n = self.n();
        let below = b.min(0) - a + 1;
        let above = b - a.max(n + 1) + 1;
        let (ia, ib) = (a.max(1), b.min(n));
        let inner = if ia <= ib { self.sums(ia, ib).0 + (ib - ia + 1) as f64 * self.c } else { 0.0 };
        inner + pad(below, self.lo) + pad(above, self.hi)
    }

    /// Minimum over contiguous windows of `len` in-range positions inside [a, b].
    fn min_window(&self, a: i64, b: i64, len: i64, cost: impl Fn(f64, f64) -> f64) -> f64 {
        if len <= 0 {
            return cost(0.0, 0.0);
        }
        let mut best = f64::INFINITY;
        let mut s = a;
        while s + len - 1 <= b {
            let (s1, s2) = self.sums(s, s + len - 1);
            best = best.min(cost(s1, s2));
            s += 1;
        }
        best
    }
}

/// Per-direction trimmed statistics at each level.
#[derive(Clone, Copy, Debug, Default)]
struct Level {
    mean_lo: f64,
    mean_hi: f64,
    /// Bounds on the trimmed variance (location) or trimmed second moment (regression).
    var_lo: f64,
    var_hi: f64,
    /// One-swap change bounds from a dataset at this level.
    d_mean: f64,
    d_var: f64,
}

/// Intervals for the trimmed mean and spread of every dataset within K swaps, for K < levels.
/// `about_zero` switches the spread to the second moment about zero.
fn levels_for(order: &Order, tail: i64, levels: usize, about_zero: bool) -> Vec<Level> {
    let n = order.n();
    let m = n - 2 * tail;
    let mf = m as f64;
    let c = order.c;
    (0..levels as i64)
        .map(|k| {
            let mean_lo = order.window_sum(tail + 1 - k, n - tail - k) / mf;
            let mean_hi = order.window_sum(tail + 1 + k, n - tail + k) / mf;
            let (wa, wb) = ((tail + 1 - k).max(1), (n - tail + k).min(n));
            let keep = m - k;
            let (ea, eb) = (order.at(tail + 1 - k), order.at(n - tail + k));
            let (var_lo, var_hi) = if keep <= 0 {
                (0.0, f64::INFINITY)
            } else {
                let drop = (wb - wa + 1) - keep;
                let t2 = order.sums(wa, wb).1;
                let low_sq = order.min_window(wa, wb, drop, |_, s2| s2);
                if about_zero {
                    // c = 0 here, so centered sums are raw
                    let smallest = order.min_window(wa, wb, keep, |_, s2| s2);
                    let min_sq = if ea <= 0.0 && eb >= 0.0 { 0.0 } else { (ea * ea).min(eb * eb) };
                    let max_sq = (ea * ea).max(eb * eb);
                    ((smallest + pad(k, min_sq)) / mf, (t2 - low_sq + pad(k, max_sq)) / mf)
                } else {
                    let kept = keep as f64;
                    let min_var = order.min_window(wa, wb, keep, |s1, s2| (s2 / kept - (s1 / kept).powi(2)).max(0.0));
                    let ext = (ea - c).powi(2).max((eb - c).powi(2));
                    (kept / mf * min_var, (t2 - low_sq + pad(k, ext)) / mf)
                }
            };
            let (top, bottom) = (order.at(n - tail + 1 + k), order.at(tail - k));
            let range = top - bottom;
            let d_var = if about_zero {
                bottom.powi(2).max(top.powi(2)) / mf
            } else {
                let h = (top - mean_lo).max(mean_hi - bottom);
                (h * h + range * range / mf) / mf
            };
            Level { mean_lo, mean_hi, var_lo, var_hi, d_mean: range / mf, d_var }
        })
        .collect()
}

/// Bounds of num / den for num in [nlo, nhi] and den in [dlo, dhi] with dhi >= dlo >= 0.
fn ratio_bounds(nlo: f64, nhi: f64, dlo: f64, dhi: f64) -> (f64, f64) {
    let div = |x: f64, d: f64| {
        if d > 0.0 {
            x / d
        } else if x > 0.0 {
            f64::INFINITY
        } else if x < 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    };
    let lo = if nlo >= 0.0 { div(nlo, dhi) } else { div(nlo, dlo) };
    let hi = if nhi >= 0.0 { div(nhi, dlo) } else { div(nhi, dhi) };
    (if lo.is_nan() { f64::NEG_INFINITY } else { lo }, if hi.is_nan() { f64::INFINITY } else { hi })
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + (-(a - b).abs()).exp().ln_1p()
}

struct Acc {
    violated: Vec<bool>,
    ln_band: Vec<f64>,
    ln_inner: Vec<f64>,
    dl: Vec<f64>,
    du: Vec<f64>,
    sens: Vec<f64>,
}

impl Acc {
    fn new(levels: usize) -> Self {
        Acc {
            violated: vec![false; levels],
            ln_band: vec![f64::NEG_INFINITY; levels],
            ln_inner: vec![f64::NEG_INFINITY; levels],
            dl: vec![0.0; levels],
            du: vec![0.0; levels],
            sens: vec![0.0; levels],
        }
    }

    fn merge(mut self, o: Acc) -> Acc {
        for j in 0..self.violated.len() {
            self.violated[j] |= o.violated[j];
            self.ln_band[j] = log_add(self.ln_band[j], o.ln_band[j]);
            self.ln_inner[j] = log_add(self.ln_inner[j], o.ln_inner[j]);
        }
        self
    }
}

struct Thresholds {
    tau: f64,
    delta_s: f64,
    coef: f64,
    ln_budget: f64,
}

/// Scan over candidates. `fill(i, dl, du, sens)` writes, for each level j, lower and upper
/// score bounds over datasets within j swaps and the one-swap sensitivity bound from level j.
fn scan_grid<F>(cands: &Candidates, levels: usize, th: &Thresholds, fill: F) -> u64
where
    F: Fn(usize, &mut [f64], &mut [f64], &mut [f64]) + Sync,
{
    let acc = (0..cands.len())
        .into_par_iter()
        .filter(|&i| cands.feasible[i])
        .fold(
            || Acc::new(levels),
            |mut acc, i| {
                let Acc { dl, du, sens, .. } = &mut acc;
                fill(i, dl, du, sens);
                for j in 0..levels {
                    let (lo, hi) = (acc.dl[j], acc.du[j]);
                    if j + 1 < levels && acc.dl[j + 1] <= th.tau && !(acc.sens[j] <= th.delta_s) {
                        acc.violated[j] = true;
                    }
                    if lo <= th.tau && !(hi <= th.tau - th.delta_s) {
                        let w = -th.coef * lo.max(th.tau - th.delta_s);
                        acc.ln_band[j] = log_add(acc.ln_band[j], w);
                    }
                    if hi <= th.tau {
                        acc.ln_inner[j] = log_add(acc.ln_inner[j], -th.coef * hi);
                    }
                }
                acc
            },
        )
        .reduce(|| Acc::new(levels), Acc::merge);
    let weight_ok = |j: usize| {
        acc.ln_inner[j] > f64::NEG_INFINITY
            && (acc.ln_band[j] == f64::NEG_INFINITY || acc.ln_band[j] - acc.ln_inner[j] <= th.ln_budget)
    };
    let mut value = 0;
    while value + 1 < levels && !acc.violated[value] && weight_ok(value) && weight_ok(value + 1) {
        value += 1;
    }
    value as u64
}

fn coordinate_bounds(v: &[f64], bounds: Option<[f64; 2]>) -> (f64, f64) {
    match bounds {
        Some([lo, hi]) => v.iter().fold((0.0, 0.0), |(a, b), &w| (a + (w * lo).min(w * hi), b + (w * lo).max(w * hi))),
        None => (f64::NEG_INFINITY, f64::INFINITY),
    }
}

fn location_margin(
    s: &LocationScorer,
    task: Task,
    cands: &Candidates,
    cfg: &MechanismConfig,
    d: usize,
    levels: usize,
    th: &Thresholds,
) -> u64 {
    let tail = s.tail as i64;
    let tables: Vec<Vec<Level>> = s
        .projections
        .par_iter()
        .enumerate()
        .map(|(k, z)| {
            let (lo, hi) = match (task, cfg.record_bounds) {
                (Task::Covariance, Some([lo, hi])) => {
                    let m = lo.abs().max(hi.abs());
                    (-(d as f64) * m * m, d as f64 * m * m)
                }
                _ => coordinate_bounds(&s.dirs[k], cfg.record_bounds),
            };
            levels_for(&Order::new(z.clone(), s.center[k], lo, hi), tail, levels, false)
        })
        .collect();
    let normalized = s.normalized;
    scan_grid(cands, levels, th, |i, dl, du, sens| {
        let theta = &cands.points[i];
        dl.fill(f64::NEG_INFINITY);
        du.fill(f64::NEG_INFINITY);
        sens.fill(0.0);
        for (k, v) in s.dirs.iter().enumerate() {
            let a = dot(v, theta);
            let tab = &tables[k];
            for j in 0..levels {
                let l = &tab[j];
                let (slo, shi) = if normalized { (l.var_lo.sqrt(), l.var_hi.sqrt()) } else { (1.0, 1.0) };
                let (flo, fhi) = ratio_bounds(a - l.mean_hi, a - l.mean_lo, slo, shi);
                dl[j] = dl[j].max(flo);
                du[j] = du[j].max(fhi);
                if j + 1 < levels {
                    let term = if normalized {
                        let s2 = tab[j + 1].var_lo.sqrt();
                        let spread = (a - l.mean_lo).abs().max((a - l.mean_hi).abs());
                        l.d_mean / s2 + spread * l.d_var / (slo * s2 * (slo + s2))
                    } else {
                        l.d_mean
                    };
                    sens[j] = if term.is_nan() { f64::INFINITY } else { sens[j].max(term) };
                }
            }
        }
    })
}

/// Sorted g values with only the extreme bands materialized.
struct Banded {
    n: i64,
    small: Vec<f64>,
    large: Vec<f64>,
    small_prefix: Vec<f64>,
    large_prefix: Vec<f64>,
    total: f64,
    lo: f64,
    hi: f64,
}

impl Banded {
    fn new(buf: &mut [f64], band: usize, lo: f64, hi: f64) -> Self {
        let n = buf.len();
        let total = buf.iter().sum();
        let (small, large) = if 2 * band >= n {
            buf.sort_unstable_by(f64::total_cmp);
            (buf.to_vec(), buf.iter().rev().copied().collect::<Vec<_>>())
        } else {
            buf.select_nth_unstable_by(band, f64::total_cmp);
            let mut small = buf[..band].to_vec();
            small.sort_unstable_by(f64::total_cmp);
            buf.select_nth_unstable_by(n - band - 1, f64::total_cmp);
            let mut large = buf[n - band..].to_vec();
            large.sort_unstable_by(|a, b| b.total_cmp(a));
            (small, large)
        };
        let prefix = |v: &[f64]| {
            let mut p = vec![0.0];
            let mut s = 0.0;
            for x in v {
                s += x;
                p.push(s);
            }
            p
        };
        Banded {
            n: n as i64,
            small_prefix: prefix(&small),
            large_prefix: prefix(&large),
            small,
            large,
            total,
            lo,
            hi,
        }
    }

    fn at(&self, i: i64) -> f64 {
        if i < 1 {
            self.lo
        } else if i > self.n {
            self.hi
        } else if (i as usize) <= self.small.len() {
            self.small[(i - 1) as usize]
        } else {
            self.large[(self.n - i) as usize]
        }
    }

    /// Raw sum over padded positions [a, b], with a - 1 and n - b inside the bands.
    fn window_sum(&self, a: i64, b: i64) -> f64 {
        let n = self.n;
        let below = b.min(0) - a + 1;
        let above = b - a.max(n + 1) + 1;
        let (first, last) = (a.max(1), b.min(n));
        let inner = if first > last {
            0.0
        } else {
            self.total - self.small_prefix[(first - 1) as usize] - self.large_prefix[(n - last) as usize]
        };
        inner + pad(below, self.lo) + pad(above, self.hi)
    }
}

fn regression_margin(s: &LrScorer, cands: &Candidates, cfg: &MechanismConfig, levels: usize, th: &Thresholds) -> u64 {
    let tail = s.tail as i64;
    let n = s.inputs.first().map_or(0, |a| a.len()) as i64;
    let m = (n - 2 * tail) as f64;
    let moments: Vec<Vec<Level>> = s
        .inputs
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let (lo, hi) = coordinate_bounds(&s.dirs[k], cfg.record_bounds);
            levels_for(&Order::new(a.clone(), 0.0, lo, hi), tail, levels, true)
        })
        .collect();
    let band = (tail as usize + levels + 2).min(n as usize);
    let gamma = s.gamma_hat;
    scan_grid(cands, levels, th, |i, dl, du, sens| {
        let beta = &cands.points[i];
        let r = s.residuals(beta);
        let mut buf = vec![0.0; r.len()];
        dl.fill(f64::NEG_INFINITY);
        du.fill(f64::NEG_INFINITY);
        sens.fill(0.0);
        let big = cfg.record_bounds.map(|[lo, hi]| lo.abs().max(hi.abs()));
        let beta_l1: f64 = beta.iter().map(|b| b.abs()).sum();
        for k in 0..s.dirs.len() {
            s.gradient_values(k, &r, &mut buf);
            let gmax = match big {
                Some(b) => {
                    let ax: f64 = s.dirs[k].iter().map(|v| v.abs()).sum::<f64>() * b;
                    ax * (b + beta_l1 * b)
                }
                None => f64::INFINITY,
            };
            let g = Banded::new(&mut buf, band, -gmax, gmax);
            let tab = &moments[k];
            for j in 0..levels as i64 {
                let ju = j as usize;
                let t_lo = g.window_sum(tail + 1 - j, n - tail - j) / m;
                let t_hi = g.window_sum(tail + 1 + j, n - tail + j) / m;
                let (slo, shi) = (tab[ju].var_lo.sqrt() * gamma, tab[ju].var_hi.sqrt() * gamma);
                let (flo, fhi) = ratio_bounds(t_lo, t_hi, slo, shi);
                dl[ju] = dl[ju].max(flo);
                du[ju] = du[ju].max(fhi);
                if ju + 1 < levels {
                    let range = g.at(n - tail + 1 + j) - g.at(tail - j);
                    let s1 = tab[ju].var_lo.sqrt();
                    let s2 = tab[ju + 1].var_lo.sqrt();
                    let t_abs = t_lo.abs().max(t_hi.abs());
                    let term = (range / m) / (s2 * gamma) + t_abs * tab[ju].d_var / (s1 * s2 * (s1 + s2) * gamma);
                    sens[ju] = if term.is_nan() { f64::INFINITY } else { sens[ju].max(term) };
                }
            }
        }
    })
}

fn pca_margin(s: &PcaScorer, ds: &Dataset, cfg: &MechanismConfig, levels: usize) -> u64 {
    let keep = s.keep as i64;
    let kf = keep as f64;
    // per direction: (q_lo, q_hi, dq) at each level
    let tables: Vec<Vec<(f64, f64, f64)>> = s
        .dirs
        .par_iter()
        .map(|v| {
            let w: Vec<f64> = ds.project(v).into_iter().map(|p| p * p).collect();
            let hi = cfg.record_bounds.map_or(f64::INFINITY, |[lo, hi]| {
                let l1: f64 = v.iter().map(|x| x.abs()).sum();
                (l1 * lo.abs().max(hi.abs())).powi(2)
            });
            let o = Order::new(w, 0.0, 0.0, hi);
            (0..levels as i64)
                .map(|j| {
                    let q_lo = if keep > j { o.window_sum(1, keep - j) / kf } else { 0.0 };
                    let q_hi = o.window_sum(1 + j, keep + j) / kf;
                    (q_lo, q_hi, o.at(keep + j + 1) / kf)
                })
                .collect()
        })
        .collect();
    let q_floor: Vec<f64> = (0..levels).map(|j| tables.iter().map(|t| t[j].0).fold(0.0, f64::max)).collect();
    let dq_max: Vec<f64> = (0..levels).map(|j| tables.iter().map(|t| t[j].2).fold(0.0, f64::max)).collect();
    let mut value = 0;
    while value + 1 < levels {
        let j = value;
        if !(q_floor[j] > 0.0 && q_floor[j + 1] > 0.0) {
            break;
        }
        let ok = tables.iter().all(|t| {
            let bound = t[j].2 / q_floor[j] + t[j + 1].1 * dq_max[j] / (q_floor[j] * q_floor[j + 1]);
            bound <= cfg.sensitivity
        });
        if !ok {
            break;
        }
        value += 1;
    }
    value as u64
}

/// Certified lower bound on the exact margin, capped at `cfg.margin_cap()`.
pub fn margin_certified(ds: &Dataset, cfg: &MechanismConfig) -> Result<MarginResult> {
    cfg.validate()?;
    let cap = cfg.margin_cap();
    let engine = Engine::new(ds, cfg)?;
    let levels = cap as usize + 2;
    let th = Thresholds {
        tau: cfg.tau.unwrap_or(f64::INFINITY),
        delta_s: cfg.sensitivity,
        coef: cfg.coefficient(),
        ln_budget: (cfg.delta / 8.0).ln() - cfg.eps / 2.0,
    };
    let value = match &engine.scorer {
        Scorer::Degenerate => 0,
        Scorer::Location(s) => location_margin(&s.0, cfg.task, &cfg.candidates()?, cfg, ds.d, levels, &th),
        Scorer::Cov(s) => location_margin(&s.0, cfg.task, &cfg.candidates()?, cfg, ds.d, levels, &th),
        Scorer::Lr(s) => regression_margin(s, &cfg.candidates()?, cfg, levels, &th),
        Scorer::Pca(s) => pca_margin(s, ds, cfg, levels),
    };
    Ok(MarginResult { value: value.min(cap), mode: MarginKind::Certified, cap, witness: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, FamilySpec};
    use crate::hptr::{k_star, propose_params, Calibration, GridSpec, ResilienceFamily};
    use crate::net::{NetKind, NetSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn tiny_cfg(task: Task, eps: f64, delta: f64, sens: f64, tau: f64) -> MechanismConfig {
        let grid = GridSpec::new(vec![0.0], vec![1.5], 7).unwrap();
        let net = NetSpec { kind: NetKind::Vector, dim: 1, seed: 0, size: 2 };
        let mut cfg = MechanismConfig::new(task, eps, delta, 0.05, sens, Some(tau), 0.1, Some(grid), net, 0).unwrap();
        cfg.record_bounds = Some([-1.0, 1.0]);
        cfg.margin_cap = Some(6);
        cfg
    }

    fn exact_mode(cap: u64) -> MarginMode {
        MarginMode::Exact { alphabet: vec![vec![-1.0], vec![0.0], vec![1.0]], cap, budget: 10_000 }
    }

    fn all_datasets(n: usize) -> Vec<Dataset> {
        let vals = [-1.0, 0.0, 1.0];
        (0..3usize.pow(n as u32))
            .map(|mut c| {
                let mut x = Vec::new();
                for _ in 0..n {
                    x.push(vals[c % 3]);
                    c /= 3;
                }
                Dataset::new(1, x, None).unwrap()
            })
            .collect()
    }

    #[test]
    fn single_record_alphabet_gives_cap() {
        let cfg = tiny_cfg(Task::EuclideanMean, 1.0, 0.1, 0.1, 1.0);
        let ds = Dataset::new(1, vec![0.0; 4], None).unwrap();
        let mode = MarginMode::Exact { alphabet: vec![vec![0.0]], cap: 5, budget: 100 };
        let r = margin_exact(&ds, &cfg, &mode).unwrap();
        assert_eq!((r.value, r.witness), (5, None));
    }

    #[test]
    fn budget_exhaustion_reports_radius() {
        let cfg = tiny_cfg(Task::EuclideanMean, 1.0, 0.1, 10.0, 100.0);
        let ds = Dataset::new(1, vec![0.0; 4], None).unwrap();
        // multisets: {0000} and its two neighbors fit, radius one does not
        let mode = MarginMode::Exact { alphabet: vec![vec![-1.0], vec![0.0], vec![1.0]], cap: 5, budget: 4 };
        assert!(matches!(margin_exact(&ds, &cfg, &mode), Err(HptrError::Resource { reached: 1 })));
        let mode = MarginMode::Exact { alphabet: vec![vec![-1.0], vec![0.0], vec![1.0]], cap: 5, budget: 2 };
        assert!(matches!(margin_exact(&ds, &cfg, &mode), Err(HptrError::Resource { reached: 0 })));
    }

    #[test]
    fn flipping_records_empties_support() {
        // tau = 0.3 around the centre; moving the mean to 0.5 or beyond empties one atom with
        // large mass, so the nearest unsafe set sits a couple of flips away from all zeros.
        let cfg = tiny_cfg(Task::EuclideanMean, 1.0, 0.01, 0.25, 0.3);
        let ds = Dataset::new(1, vec![0.0; 4], None).unwrap();
        let r = margin_exact(&ds, &cfg, &exact_mode(6)).unwrap();
        assert!(r.value < 6, "{r:?}");
        let w = r.witness.unwrap();
        let moved = w.iter().filter(|x| x[0] != 0.0).count() as u64;
        assert!(moved >= r.value);
    }

    #[test]
    fn certified_never_exceeds_exact_and_both_are_lipschitz() {
        let configs = [
            tiny_cfg(Task::EuclideanMean, 1.0, 0.2, 0.5, 10.0),
            tiny_cfg(Task::EuclideanMean, 2.0, 0.1, 0.5, 1.0),
            tiny_cfg(Task::Mean, 2.0, 0.2, 3.0, 3.0),
            tiny_cfg(Task::EuclideanMean, 1.0, 0.01, 0.25, 0.3),
        ];
        let universe = all_datasets(4);
        let mut positive = 0;
        for cfg in &configs {
            let mode = exact_mode(cfg.margin_cap());
            let MarginMode::Exact { alphabet, cap, budget } = &mode else { unreachable!() };
            let mut oracle = ExactMarginOracle::new(cfg, alphabet, *cap, *budget).unwrap();
            let exact: Vec<u64> = universe.iter().map(|s| oracle.margin(s).unwrap().value).collect();
            let cert: Vec<u64> = universe.iter().map(|s| margin_certified(s, cfg).unwrap().value).collect();
            for i in 0..universe.len() {
                assert!(cert[i] <= exact[i], "certified {} > exact {} on {:?}", cert[i], exact[i], universe[i].x);
                positive += usize::from(cert[i] > 0);
                // neighbors: change one coordinate
                for j in 0..universe.len() {
                    let diff = universe[i].x.iter().zip(&universe[j].x).filter(|(a, b)| a != b).count();
                    if diff == 1 {
                        assert!(exact[i].abs_diff(exact[j]) <= 1);
                        assert!(cert[i].abs_diff(cert[j]) <= 1);
                    }
                }
            }
        }
        assert!(positive > 0);
    }

    #[test]
    fn regression_certified_never_exceeds_exact_on_tiny_data() {
        let mut cfg = tiny_cfg(Task::Regression, 2.0, 0.1, 2.0, 3.0);
        cfg.gamma_hat = Some(1.0);
        let alphabet = vec![vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 0.5]];
        let mut oracle = ExactMarginOracle::new(&cfg, &alphabet, cfg.margin_cap(), 10_000).unwrap();
        for c in 0..81usize {
            let picks: Vec<&Vec<f64>> = (0..4).map(|k| &alphabet[c / 3usize.pow(k) % 3]).collect();
            let x: Vec<f64> = picks.iter().map(|r| r[0]).collect();
            let y: Vec<f64> = picks.iter().map(|r| r[1]).collect();
            let ds = Dataset::new(1, x, Some(y)).unwrap();
            let exact = oracle.margin(&ds).unwrap().value;
            assert!(margin_certified(&ds, &cfg).unwrap().value <= exact);
        }
    }

    fn gaussian_mean_cfg(n: usize, eps: f64, delta: f64, seed: u64) -> (Dataset, MechanismConfig) {
        let ds = generate(&FamilySpec::Gaussian { mu: vec![0.0], sigma: vec![vec![1.0]] }, n, seed).unwrap();
        let alpha = 0.1;
        let p = propose_params(Task::Mean, &ResilienceFamily::SubGaussian, alpha, n, &Calibration::default()).unwrap();
        let grid = GridSpec::new(vec![0.0], vec![8.0], 801).unwrap();
        let net = NetSpec { kind: NetKind::Vector, dim: 1, seed: 0, size: 2 };
        let cfg = MechanismConfig::new(Task::Mean, eps, delta, 0.05, p.sensitivity, p.tau, alpha, Some(grid), net, seed).unwrap();
        (ds, cfg)
    }

    #[test]
    fn clean_gaussian_reaches_k_star() {
        let (ds, cfg) = gaussian_mean_cfg(2000, 1.0, 1e-6, 3);
        let r = margin_certified(&ds, &cfg).unwrap();
        assert!(r.value >= k_star(1.0, 1e-6, 0.05), "{r:?} k* = {}", cfg.k_star);
    }

    #[test]
    fn planted_gap_gives_zero() {
        let (mut ds, cfg) = gaussian_mean_cfg(2000, 1.0, 1e-6, 3);
        // tight core with two clusters at +-1 that survive the trim: wide gaps inside the
        // middle block against a small spread
        for (i, x) in ds.x.iter_mut().enumerate() {
            *x = match i % 27 {
                0 => -1.0,
                1 => 1.0,
                _ => *x * 1e-6,
            };
        }
        assert_eq!(margin_certified(&ds, &cfg).unwrap().value, 0);
    }

    #[test]
    fn certified_is_lipschitz_on_gaussian_neighbors() {
        let (ds, cfg) = gaussian_mean_cfg(1000, 2.0, 1e-4, 9);
        let base = margin_certified(&ds, &cfg).unwrap().value;
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..10 {
            let mut nb = ds.clone();
            let i = rng.random_range(0..nb.n);
            nb.x[i] = rng.random_range(-6.0..6.0);
            let v = margin_certified(&nb, &cfg).unwrap().value;
            assert!(base.abs_diff(v) <= 1, "{base} vs {v}");
        }
    }

    #[test]
    fn pca_certified_margin_on_clean_data() {
        let ds = generate(&FamilySpec::Gaussian { mu: vec![0.0, 0.0], sigma: vec![vec![4.0, 0.0], vec![0.0, 1.0]] }, 2000, 4).unwrap();
        let p = propose_params(Task::Pca, &ResilienceFamily::SubGaussian, 0.1, 2000, &Calibration::default()).unwrap();
        let net = NetSpec { kind: NetKind::Vector, dim: 2, seed: 0, size: 64 };
        let cfg = MechanismConfig::new(Task::Pca, 1.0, 1e-6, 0.05, p.sensitivity, None, 0.1, None, net, 0).unwrap();
        let r = margin_certified(&ds, &cfg).unwrap();
        assert!(r.value >= cfg.k_star, "{r:?}");
    }

    #[test]
    fn regression_certified_margin_on_clean_data() {
        use crate::datagen::NoiseSpec;
        let spec = FamilySpec::LinearModel {
            beta: vec![1.0, -0.5],
            sigma_x: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            noise: NoiseSpec::Gaussian { gamma: 1.0 },
        };
        let ds = generate(&spec, 2000, 6).unwrap();
        let p = propose_params(Task::Regression, &ResilienceFamily::SubGaussian, 0.1, 2000, &Calibration::default()).unwrap();
        let grid = GridSpec::new(vec![1.0, -0.5], vec![0.6, 0.6], 31).unwrap();
        let net = NetSpec { kind: NetKind::Vector, dim: 2, seed: 0, size: 16 };
        let mut cfg =
            MechanismConfig::new(Task::Regression, 2.0, 1e-6, 0.05, p.sensitivity, p.tau, 0.1, Some(grid), net, 0).unwrap();
        cfg.gamma_hat = Some(1.0);
        let r = margin_certified(&ds, &cfg).unwrap();
        assert!(r.value >= cfg.k_star, "{r:?}");
    }
}
