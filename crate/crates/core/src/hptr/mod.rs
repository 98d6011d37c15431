//! Propose, test and release over a finite candidate set.

mod margin;

pub use margin::{margin_certified, margin_exact, ExactMarginOracle, MarginKind, MarginMode, MarginResult};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, HptrError, Result};
use crate::linalg::{self, sharpen};
use crate::mechanisms::{laplace, laplace_upper_tail, sample_index, softmin_pmf, DiscretePmf, OutcomeId, BOTTOM};
use crate::net::{DirectionNet, NetSpec};
use crate::robust1d::{tail_count, trimmed_moments, NoiseScale, TWO_SIDED_TAIL_FRACTION};
use crate::scores::{CovScorer, LrScorer, MeanScorer, PcaScorer, Task, TaskParameter};

pub const DEFAULT_GRID_CAP: usize = 2_000_000;
/// Location tasks: Delta = 110 rho1 / (alpha n), tau = 42 rho1.
pub const LOCATION_SENSITIVITY: f64 = 110.0;
pub const LOCATION_THRESHOLD: f64 = 42.0;
/// PCA: Delta = 80 rho2 / (alpha n).
pub const PCA_SENSITIVITY: f64 = 80.0;
pub const DEFAULT_ZETA: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ResilienceFamily {
    SubGaussian,
    Hypercontractive { k: f64, kappa: f64 },
    CovBounded,
}

/// Multiplier in front of the family resilience rate, plus the failure probability used by
/// the hypercontractive rates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub c: f64,
    pub zeta: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration { c: 1.0, zeta: DEFAULT_ZETA }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub sensitivity: f64,
    pub tau: Option<f64>,
    pub rho: f64,
}

/// (rho1, rho2) for a family at corruption level alpha.
pub fn family_rho(family: &ResilienceFamily, alpha: f64, cal: &Calibration) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(invalid(format!("alpha must lie in (0, 1/2), got {alpha}")));
    }
    if !(cal.c > 0.0) || !(cal.zeta > 0.0 && cal.zeta < 1.0) {
        return Err(invalid("calibration constant must be positive and zeta in (0, 1)"));
    }
    let c = cal.c;
    Ok(match family {
        ResilienceFamily::SubGaussian => {
            let l = (1.0 / alpha).ln();
            (c * alpha * l.sqrt(), c * alpha * l)
        }
        ResilienceFamily::Hypercontractive { k, kappa } => {
            if !(*k > 2.0) || !(*kappa > 0.0) {
                return Err(invalid("hypercontractive family needs k > 2 and kappa > 0"));
            }
            let z = cal.zeta;
            (
                c * k * kappa * alpha.powf(1.0 - 1.0 / k) * z.powf(-1.0 / k),
                c * k * k * kappa * kappa * alpha.powf(1.0 - 2.0 / k) * z.powf(-2.0 / k),
            )
        }
        ResilienceFamily::CovBounded => (c * alpha.sqrt(), f64::NAN),
    })
}

pub fn propose_params(
    task: Task,
    family: &ResilienceFamily,
    alpha: f64,
    n: usize,
    cal: &Calibration,
) -> Result<Proposal> {
    let (rho1, rho2) = family_rho(family, alpha, cal)?;
    if n == 0 {
        return Err(invalid("n must be positive"));
    }
    let an = alpha * n as f64;
    let unsupported = || invalid(format!("task {} is not supported for this family", task.name()));
    match (task, family) {
        (Task::EuclideanMean, ResilienceFamily::CovBounded) | (Task::Mean | Task::Regression | Task::Covariance, ResilienceFamily::SubGaussian | ResilienceFamily::Hypercontractive { .. }) => Ok(Proposal {
            sensitivity: LOCATION_SENSITIVITY * rho1 / an,
            tau: Some(LOCATION_THRESHOLD * rho1),
            rho: rho1,
        }),
        (Task::Pca, ResilienceFamily::SubGaussian | ResilienceFamily::Hypercontractive { .. }) => {
            Ok(Proposal { sensitivity: PCA_SENSITIVITY * rho2 / an, tau: None, rho: rho2 })
        }
        _ => Err(unsupported()),
    }
}

pub fn k_star(eps: f64, delta: f64, zeta: f64) -> u64 {
    ((2.0 / eps) * (4.0 / (delta * zeta)).ln()).ceil() as u64
}

/// Axis-aligned lattice of candidate parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub center: Vec<f64>,
    pub half_widths: Vec<f64>,
    pub points_per_axis: usize,
    #[serde(default = "default_cap")]
    pub cap: usize,
}

fn default_cap() -> usize {
    DEFAULT_GRID_CAP
}

impl GridSpec {
    pub fn new(center: Vec<f64>, half_widths: Vec<f64>, points_per_axis: usize) -> Result<Self> {
        let g = GridSpec { center, half_widths, points_per_axis, cap: DEFAULT_GRID_CAP };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.center.is_empty() || self.center.len() != self.half_widths.len() {
            return Err(HptrError::Shape("grid center and half widths differ in length".into()));
        }
        if self.points_per_axis == 0 || self.half_widths.iter().any(|h| !(*h >= 0.0) || !h.is_finite()) {
            return Err(invalid("grid needs at least one point per axis and finite half widths"));
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err(invalid("grid center must be finite"));
        }
        let total = (self.points_per_axis as f64).powi(self.center.len() as i32);
        if total > self.cap as f64 {
            return Err(invalid(format!("grid has {total} points, above the cap of {}", self.cap)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points_per_axis.pow(self.center.len() as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn axis_value(&self, axis: usize, i: usize) -> f64 {
        if self.points_per_axis == 1 {
            return self.center[axis];
        }
        let t = -1.0 + 2.0 * i as f64 / (self.points_per_axis - 1) as f64;
        self.center[axis] + self.half_widths[axis] * t
    }

    /// Point `index`, last axis varying fastest.
    pub fn point(&self, mut index: usize) -> Vec<f64> {
        let p = self.center.len();
        let m = self.points_per_axis;
        let mut out = vec![0.0; p];
        for axis in (0..p).rev() {
            out[axis] = self.axis_value(axis, index % m);
            index /= m;
        }
        out
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Euclidean diameter of one grid cell.
    pub fn cell_diameter(&self) -> f64 {
        if self.points_per_axis < 2 {
            return 0.0;
        }
        let m = (self.points_per_axis - 1) as f64;
        self.half_widths.iter().map(|h| (2.0 * h / m).powi(2)).sum::<f64>().sqrt()
    }
}

/// Trimmed location and spread of one coordinate-like feature.
fn trimmed_axis(values: &mut [f64], tail: usize, about_zero: bool) -> (f64, f64) {
    let (m, v) = trimmed_moments(values, tail);
    if about_zero {
        (m, (v + m * m).sqrt())
    } else {
        (m, v.sqrt())
    }
}

/// Data-centred grid: per-axis trimmed mean plus or minus `scale` trimmed deviations for the
/// location tasks, and the trimmed least-squares fit plus or minus `scale` gamma_hat over the
/// per-axis input spread for regression. Covariance grids live on the upper triangle.
pub fn grid_from_data(
    task: Task,
    ds: &Dataset,
    alpha: f64,
    points_per_axis: usize,
    scale: f64,
    noise: Option<&NoiseScale>,
) -> Result<GridSpec> {
    let tail = tail_count(ds.n, alpha, TWO_SIDED_TAIL_FRACTION);
    if ds.n < 2 * tail + 1 {
        return Err(HptrError::InsufficientData { needed: 2 * tail + 1, got: ds.n });
    }
    let d = ds.d;
    let column = |f: &dyn Fn(&[f64]) -> f64| -> Vec<f64> { (0..ds.n).map(|i| f(ds.row(i))).collect() };
    let (center, half) = match task {
        Task::Mean | Task::EuclideanMean => {
            let mut c = Vec::with_capacity(d);
            let mut h = Vec::with_capacity(d);
            for j in 0..d {
                let (m, s) = trimmed_axis(&mut column(&|r| r[j]), tail, false);
                c.push(m);
                h.push(scale * s);
            }
            (c, h)
        }
        Task::Covariance => {
            let mut c = Vec::new();
            let mut h = Vec::new();
            for a in 0..d {
                for b in a..d {
                    let (m, s) = trimmed_axis(&mut column(&|r| r[a] * r[b]), tail, false);
                    c.push(m);
                    h.push(scale * s);
                }
            }
            (c, h)
        }
        Task::Regression => {
            let noise = noise.ok_or_else(|| invalid("regression grid needs a noise scale"))?;
            let mut h = Vec::with_capacity(d);
            for j in 0..d {
                let (_, s) = trimmed_axis(&mut column(&|r| r[j]), tail, true);
                if !(s > 0.0) {
                    return Err(HptrError::DegenerateDesign);
                }
                h.push(scale * noise.gamma_hat / s);
            }
            (noise.beta_bar.clone(), h)
        }
        Task::Pca => return Err(invalid("pca candidates come from the direction net, not a grid")),
    };
    GridSpec::new(center, half, points_per_axis)
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismConfig {
    pub task: Task,
    pub eps: f64,
    pub delta: f64,
    #[serde(default = "default_zeta")]
    pub zeta: f64,
    /// Proposed sensitivity bound.
    #[serde(rename = "Delta")]
    pub sensitivity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub k_star: u64,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    pub net: NetSpec,
    pub seed: u64,
    /// Public noise scale for the regression score.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_hat: Option<f64>,
    /// Public per-coordinate bounds [lo, hi] on every record, used by the certified margin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_bounds: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin_cap: Option<u64>,
    /// Whether the regression grid is re-centred on each dataset; only meaningful to callers.
    #[serde(default = "default_true", skip_serializing_if = "Clone::clone")]
    pub data_grid: bool,
}

fn default_zeta() -> f64 {
    DEFAULT_ZETA
}

impl MechanismConfig {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        task: Task,
        eps: f64,
        delta: f64,
        zeta: f64,
        sensitivity: f64,
        tau: Option<f64>,
        alpha: f64,
        grid: Option<GridSpec>,
        net: NetSpec,
        seed: u64,
    ) -> Result<Self> {
        let cfg = MechanismConfig {
            task,
            eps,
            delta,
            zeta,
            sensitivity,
            tau,
            k_star: if eps > 0.0 && delta > 0.0 && zeta > 0.0 { k_star(eps, delta, zeta) } else { 0 },
            alpha,
            grid,
            net,
            seed,
            gamma_hat: None,
            record_bounds: None,
            margin_cap: None,
            data_grid: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(invalid("eps must be positive and finite"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) || !(self.zeta > 0.0 && self.zeta < 1.0) {
            return Err(invalid("delta and zeta must lie in (0, 1)"));
        }
        if !(self.sensitivity > 0.0) {
            return Err(invalid("Delta must be positive"));
        }
        if !(0.0..0.5).contains(&self.alpha) {
            return Err(invalid("alpha must lie in [0, 1/2)"));
        }
        if self.k_star != k_star(self.eps, self.delta, self.zeta) {
            return Err(invalid(format!(
                "k_star is {} but the formula gives {}",
                self.k_star,
                k_star(self.eps, self.delta, self.zeta)
            )));
        }
        if self.net.kind != self.task.net_kind() {
            return Err(invalid("net kind does not match the task"));
        }
        match (self.task, self.tau, &self.grid) {
            (Task::Pca, None, None) => {}
            (Task::Pca, _, _) => return Err(invalid("pca takes neither tau nor a grid")),
            (_, Some(t), Some(g)) if t > 0.0 => {
                g.validate()?;
                if g.center.len() != self.task.param_dim(self.net.dim) {
                    return Err(HptrError::Shape("grid dimension does not match the task".into()));
                }
            }
            _ => return Err(invalid("tau > 0 and a grid are required for this task")),
        }
        if let Some(g) = self.gamma_hat {
            if !(g > 0.0) {
                return Err(HptrError::DegenerateNoise);
            }
        }
        if let Some([lo, hi]) = self.record_bounds {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(invalid("record bounds must be finite with lo <= hi"));
            }
        }
        Ok(())
    }

    /// Release coefficient eps / (4 Delta).
    pub fn coefficient(&self) -> f64 {
        self.eps / (4.0 * self.sensitivity)
    }

    pub fn margin_cap(&self) -> u64 {
        self.margin_cap.unwrap_or(4 * self.k_star)
    }

    pub fn threshold(&self) -> f64 {
        test_threshold(self.eps, self.delta)
    }

    pub fn direction_net(&self) -> Result<DirectionNet> {
        DirectionNet::from_spec(&self.net)
    }

    pub fn candidates(&self) -> Result<Candidates> {
        Candidates::new(self)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HptrError::Schema(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: MechanismConfig = toml::from_str(text).map_err(|e| HptrError::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The finite support of the release step, in the parameterization each score consumes.
#[derive(Clone, Debug)]
pub struct Candidates {
    pub task: Task,
    /// Mean / regression / PCA: the vector itself. Covariance: the flattened d x d matrix.
    pub points: Vec<Vec<f64>>,
    /// False for covariance candidates that are not positive definite.
    pub feasible: Vec<bool>,
}

impl Candidates {
    pub fn new(cfg: &MechanismConfig) -> Result<Self> {
        let task = cfg.task;
        if task == Task::Pca {
            let net = cfg.direction_net()?;
            let points = net.elements().to_vec();
            let feasible = vec![true; points.len()];
            return Ok(Candidates { task, points, feasible });
        }
        let grid = cfg.grid.as_ref().ok_or_else(|| invalid("grid required"))?;
        let d = cfg.net.dim;
        let raw = grid.points();
        if task != Task::Covariance {
            let feasible = vec![true; raw.len()];
            return Ok(Candidates { task, points: raw, feasible });
        }
        let (points, feasible): (Vec<_>, Vec<_>) = raw
            .into_par_iter()
            .map(|coords| {
                let m = upper_to_full(&coords, d);
                let pd = linalg::is_positive_definite(&sharpen(&m).expect("square"));
                (m, pd)
            })
            .unzip();
        Ok(Candidates { task, points, feasible })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn parameter(&self, i: usize) -> TaskParameter {
        let p = self.points[i].clone();
        match self.task {
            Task::Mean => TaskParameter::Mean(p),
            Task::EuclideanMean => TaskParameter::EuclideanMean(p),
            Task::Regression => TaskParameter::Regression(p),
            Task::Pca => TaskParameter::Pca(p),
            Task::Covariance => TaskParameter::Covariance(linalg::from_mat(&sharpen(&p).expect("square"))),
        }
    }
}

/// Upper-triangular coordinates (row-major, i <= j) to a flattened symmetric matrix.
pub fn upper_to_full(coords: &[f64], d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    let mut k = 0;
    for i in 0..d {
        for j in i..d {
            m[d * i + j] = coords[k];
            m[d * j + i] = coords[k];
            k += 1;
        }
    }
    m
}

pub(crate) enum Scorer {
    Location(MeanScorer),
    Cov(CovScorer),
    Lr(LrScorer),
    Pca(PcaScorer),
    /// Some net direction has zero robust spread: every candidate scores +inf.
    Degenerate,
}

/// Task score bound to one dataset.
pub struct Engine<'a> {
    pub ds: &'a Dataset,
    pub task: Task,
    pub tail: usize,
    pub(crate) scorer: Scorer,
    pub(crate) net: DirectionNet,
}

fn degenerate_ok<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(HptrError::DegenerateDirection { .. } | HptrError::DegenerateData(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

impl<'a> Engine<'a> {
    pub fn new(ds: &'a Dataset, cfg: &MechanismConfig) -> Result<Self> {
        if ds.d != cfg.net.dim {
            return Err(HptrError::Shape(format!("dataset has dimension {}, config {}", ds.d, cfg.net.dim)));
        }
        let net = cfg.direction_net()?;
        let tail = tail_count(ds.n, cfg.alpha, TWO_SIDED_TAIL_FRACTION);
        let scorer = match cfg.task {
            Task::Mean | Task::EuclideanMean => {
                degenerate_ok(MeanScorer::with_tail(ds, tail, &net, cfg.task == Task::Mean))?.map(Scorer::Location)
            }
            Task::Covariance => degenerate_ok(CovScorer::with_tail(ds, tail, &net))?.map(Scorer::Cov),
            Task::Regression => {
                let g = cfg.gamma_hat.ok_or(HptrError::DegenerateNoise)?;
                degenerate_ok(LrScorer::with_tail(ds, tail, g, &net))?.map(Scorer::Lr)
            }
            Task::Pca => degenerate_ok(PcaScorer::new(ds, cfg.alpha, &net))?.map(Scorer::Pca),
        };
        Ok(Engine { ds, task: cfg.task, tail, scorer: scorer.unwrap_or(Scorer::Degenerate), net })
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self.scorer, Scorer::Degenerate)
    }

    pub fn net(&self) -> &DirectionNet {
        &self.net
    }

    /// Score of every candidate; +inf marks infeasible candidates and degenerate data.
    pub fn scores(&self, cands: &Candidates) -> Vec<f64> {
        (0..cands.len())
            .into_par_iter()
            .map(|i| if cands.feasible[i] { self.score_point(&cands.points[i]) } else { f64::INFINITY })
            .collect()
    }

    pub fn score_point(&self, p: &[f64]) -> f64 {
        match &self.scorer {
            Scorer::Location(s) => s.score(p),
            Scorer::Cov(s) => s.0.score(p),
            Scorer::Lr(s) => s.score(p),
            Scorer::Pca(s) => s.score(p),
            Scorer::Degenerate => f64::INFINITY,
        }
    }
}

/// Output law of the release step over the candidate ids, with BOTTOM listed so every law
/// shares one outcome universe.
#[derive(Clone, Debug)]
pub struct ReleaseLaw {
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
    pub empty: bool,
}

impl ReleaseLaw {
    pub fn from_scores(scores: Vec<f64>, tau: Option<f64>, coefficient: f64) -> Result<Self> {
        let masked: Vec<f64> = scores
            .iter()
            .map(|&s| match tau {
                Some(t) if !(s <= t) => f64::INFINITY,
                _ if s.is_nan() => f64::INFINITY,
                _ => s,
            })
            .collect();
        if masked.iter().all(|s| s.is_infinite()) {
            let probs = vec![0.0; scores.len()];
            return Ok(ReleaseLaw { scores, probs, empty: true });
        }
        let probs = softmin_pmf(&masked, coefficient)?;
        Ok(ReleaseLaw { scores, probs, empty: false })
    }

    pub fn pmf(&self) -> DiscretePmf {
        let mut atoms: Vec<(OutcomeId, f64)> = Vec::with_capacity(self.probs.len() + 1);
        atoms.push((BOTTOM, if self.empty { 1.0 } else { 0.0 }));
        atoms.extend(self.probs.iter().enumerate().map(|(i, &p)| (i as OutcomeId, p)));
        DiscretePmf::new(atoms).expect("release law is a valid pmf")
    }

    /// Release law mixed with the abort atom: the whole mechanism given the pass probability.
    pub fn mixed_pmf(&self, pass: f64) -> DiscretePmf {
        let bottom = if self.empty { 1.0 } else { 1.0 - pass };
        let mut atoms: Vec<(OutcomeId, f64)> = Vec::with_capacity(self.probs.len() + 1);
        atoms.push((BOTTOM, bottom));
        atoms.extend(self.probs.iter().enumerate().map(|(i, &p)| (i as OutcomeId, pass * p)));
        DiscretePmf::new(atoms).expect("mixture is a valid pmf")
    }

    pub fn entropy(&self) -> f64 {
        self.probs.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum()
    }
}

pub fn release_law(ds: &Dataset, cfg: &MechanismConfig, cands: &Candidates) -> Result<ReleaseLaw> {
    let engine = Engine::new(ds, cfg)?;
    ReleaseLaw::from_scores(engine.scores(cands), cfg.tau, cfg.coefficient())
}

pub fn release_sample<R: Rng + ?Sized>(ds: &Dataset, cfg: &MechanismConfig, rng: &mut R) -> Result<TaskParameter> {
    cfg.validate()?;
    let cands = cfg.candidates()?;
    let law = release_law(ds, cfg, &cands)?;
    if law.empty {
        return Err(HptrError::EmptySupport);
    }
    Ok(cands.parameter(sample_index(&law.probs, rng)))
}

/// (2 / eps) ln(2 / delta).
pub fn test_threshold(eps: f64, delta: f64) -> f64 {
    (2.0 / eps) * (2.0 / delta).ln()
}

/// Noisy margin and the pass bit.
pub fn safety_test<R: Rng + ?Sized>(margin: u64, eps: f64, delta: f64, rng: &mut R) -> Result<(f64, bool)> {
    if !(eps > 0.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(invalid("need eps > 0 and delta in (0, 1)"));
    }
    let noisy = margin as f64 + laplace(2.0 / eps, rng);
    Ok((noisy, noisy >= test_threshold(eps, delta)))
}

pub fn pass_probability(margin: u64, eps: f64, delta: f64) -> f64 {
    laplace_upper_tail(test_threshold(eps, delta) - margin as f64, 2.0 / eps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub margin: u64,
    pub noisy_margin: f64,
    pub pass: bool,
    pub output: Option<TaskParameter>,
    pub pmf_entropy: Option<f64>,
    pub seed: u64,
}

/// Full pipeline. `None` in the output is the abort symbol.
pub fn run<R: Rng + ?Sized>(
    ds: &Dataset,
    cfg: &MechanismConfig,
    mode: &MarginMode,
    rng: &mut R,
) -> Result<Transcript> {
    cfg.validate()?;
    let margin = match mode {
        MarginMode::Certified => margin_certified(ds, cfg)?,
        MarginMode::Exact { .. } => margin_exact(ds, cfg, mode)?,
    };
    let (noisy, pass) = safety_test(margin.value, cfg.eps, cfg.delta, rng)?;
    let mut t = Transcript { margin: margin.value, noisy_margin: noisy, pass, output: None, pmf_entropy: None, seed: cfg.seed };
    if !pass {
        return Ok(t);
    }
    let cands = cfg.candidates()?;
    let law = release_law(ds, cfg, &cands)?;
    if law.empty {
        t.pass = false;
        return Ok(t);
    }
    t.pmf_entropy = Some(law.entropy());
    t.output = Some(cands.parameter(sample_index(&law.probs, rng)));
    Ok(t)
}

/// Exact output law of the whole mechanism on one dataset.
pub fn output_pmf(ds: &Dataset, cfg: &MechanismConfig, mode: &MarginMode) -> Result<DiscretePmf> {
    let margin = match mode {
        MarginMode::Certified => margin_certified(ds, cfg)?,
        MarginMode::Exact { .. } => margin_exact(ds, cfg, mode)?,
    };
    mechanism_pmf(ds, cfg, margin.value)
}

/// Output law of the whole mechanism given an already computed margin.
pub fn mechanism_pmf(ds: &Dataset, cfg: &MechanismConfig, margin: u64) -> Result<DiscretePmf> {
    let cands = cfg.candidates()?;
    let law = release_law(ds, cfg, &cands)?;
    Ok(law.mixed_pmf(pass_probability(margin, cfg.eps, cfg.delta)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn vnet(d: usize) -> NetSpec {
        NetSpec { kind: NetKind::Vector, dim: d, seed: 1, size: 8 }
    }

    #[test]
    fn proposal_arithmetic() {
        let cal = Calibration::default();
        let p = propose_params(Task::Mean, &ResilienceFamily::SubGaussian, 0.1, 1000, &cal).unwrap();
        let rho1 = 0.1 * 10f64.ln().sqrt();
        assert!((p.rho - rho1).abs() < 1e-15);
        assert!((rho1 - 0.151_742_7).abs() < 1e-6);
        assert!((p.sensitivity - 110.0 * rho1 / 100.0).abs() < 1e-15);
        assert!((p.tau.unwrap() - 42.0 * rho1).abs() < 1e-15);
        let q = propose_params(Task::Pca, &ResilienceFamily::SubGaussian, 0.1, 1000, &cal).unwrap();
        assert!(q.tau.is_none());
        assert!((q.sensitivity - 80.0 * 0.1 * 10f64.ln() / 100.0).abs() < 1e-15);
        assert!(propose_params(Task::Mean, &ResilienceFamily::CovBounded, 0.1, 1000, &cal).is_err());
        assert!(propose_params(Task::Pca, &ResilienceFamily::CovBounded, 0.1, 1000, &cal).is_err());
        assert!(propose_params(Task::EuclideanMean, &ResilienceFamily::CovBounded, 0.1, 1000, &cal).is_ok());
    }

    #[test]
    fn hand_constants() {
        // rho1 = 0.02, alpha = 0.1, n = 1000
        assert!((LOCATION_SENSITIVITY * 0.02 / 100.0 - 0.022).abs() < 1e-15);
        assert!((LOCATION_THRESHOLD * 0.02 - 0.84).abs() < 1e-15);
        assert!((PCA_SENSITIVITY * 0.05 / 100.0 - 0.04).abs() < 1e-15);
        assert_eq!(k_star(1.0, 1e-6, 0.05), ((2.0f64) * (4.0 / 5e-8f64).ln()).ceil() as u64);
    }

    #[test]
    fn grid_layout() {
        let g = GridSpec::new(vec![0.0, 10.0], vec![1.0, 2.0], 3).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g.point(0), vec![-1.0, 8.0]);
        assert_eq!(g.point(1), vec![-1.0, 10.0]);
        assert_eq!(g.point(8), vec![1.0, 12.0]);
        assert!((g.cell_diameter() - 5f64.sqrt()).abs() < 1e-15);
        let mut big = g.clone();
        big.points_per_axis = 2000;
        assert!(big.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let grid = GridSpec::new(vec![0.0], vec![1.0], 7).unwrap();
        let mut cfg = MechanismConfig::new(Task::Mean, 1.0, 1e-3, 0.05, 0.5, Some(2.0), 0.1, Some(grid), vnet(1), 3).unwrap();
        cfg.record_bounds = Some([-1.0, 1.0]);
        let text = cfg.to_toml().unwrap();
        assert!(text.contains("Delta = 0.5"));
        assert_eq!(MechanismConfig::from_toml(&text).unwrap(), cfg);
        let bad = text.replace(&format!("k_star = {}", cfg.k_star), "k_star = 1");
        assert!(MechanismConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn release_law_masks_and_normalizes() {
        let law = ReleaseLaw::from_scores(vec![0.0, 1.0, 5.0], Some(2.0), 1.0).unwrap();
        let z = 1.0 + (-1f64).exp();
        assert!((law.probs[0] - 1.0 / z).abs() < 1e-12);
        assert_eq!(law.probs[2], 0.0);
        let empty = ReleaseLaw::from_scores(vec![3.0, 4.0], Some(2.0), 1.0).unwrap();
        assert!(empty.empty);
        assert_eq!(empty.pmf().prob(BOTTOM), 1.0);
        let mixed = law.mixed_pmf(0.25);
        assert!((mixed.prob(BOTTOM) - 0.75).abs() < 1e-15);
        // coefficient 0: uniform over the feasible set
        let flat = ReleaseLaw::from_scores(vec![0.0, 1.5, 9.0], Some(2.0), 0.0).unwrap();
        assert_eq!(flat.probs, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn release_mass_ratio() {
        // best atom vs one at best + 4 Delta ln(R) / eps
        let (eps, delta_s, r) = (1.0, 0.3, 50.0);
        let c = eps / (4.0 * delta_s);
        let law = ReleaseLaw::from_scores(vec![0.1, 0.1 + 4.0 * delta_s * f64::ln(r) / eps], None, c).unwrap();
        assert!(law.probs[0] / law.probs[1] >= r * (1.0 - 1e-12));
    }

    #[test]
    fn safety_test_limits() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        assert!((pass_probability(0, 1.0, 1e-3) - 1e-3 / 4.0).abs() < 1e-15);
        let (noisy, pass) = safety_test(100, 1e9, 1e-3, &mut rng).unwrap();
        assert!(pass && (noisy - 100.0).abs() < 1e-6);
        let (_, pass) = safety_test(0, 1e9, 1e-3, &mut rng).unwrap();
        assert!(!pass);
    }

    #[test]
    fn upper_triangle_layout() {
        assert_eq!(upper_to_full(&[1.0, 2.0, 3.0], 2), vec![1.0, 2.0, 2.0, 3.0]);
    }
}
