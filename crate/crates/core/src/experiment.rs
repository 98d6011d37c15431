//! Seeded sweeps over (n, alpha, eps), CSV rows per trial and quantile summaries.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::datagen::{block_seed, generate, FamilySpec};
use crate::error::{invalid, HptrError, Result};
use crate::hptr::{
    grid_from_data, propose_params, run, Calibration, MarginMode, MechanismConfig, ResilienceFamily, Transcript,
    DEFAULT_ZETA,
};
use crate::linalg::{self, to_mat};
use crate::net::{DirectionNet, NetSpec};
use crate::resilience::{corrupt_dataset, Adversary, CorruptionSpec};
use crate::robust1d::{robust_noise_scale, NoiseMode};
use crate::scores::{true_distance, CovScorer, LrScorer, MeanScorer, PcaScorer, Reference, Task};

pub const THREADS_ENV: &str = "HPTR_THREADS";
pub const CSV_HEADER: &str = "task,family,n,d,alpha,eps,delta,trial,passed,error,margin,runtime_ms,seed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionPlan {
    pub fraction: f64,
    pub adversary: Adversary,
}

/// Data-centred candidate grid: points per axis and half-width in trimmed deviations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPlan {
    pub points_per_axis: usize,
    pub scale: f64,
}

impl Default for GridPlan {
    fn default() -> Self {
        GridPlan { points_per_axis: 81, scale: 8.0 }
    }
}

fn default_zeta() -> f64 {
    DEFAULT_ZETA
}

fn default_net_size() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub task: Task,
    pub family: FamilySpec,
    pub resilience: ResilienceFamily,
    #[serde(default)]
    pub calibration: Calibration,
    pub n: Vec<usize>,
    pub alpha: Vec<f64>,
    pub eps: Vec<f64>,
    pub delta: f64,
    #[serde(default = "default_zeta")]
    pub zeta: f64,
    pub trials: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption: Option<CorruptionPlan>,
    #[serde(default)]
    pub grid: GridPlan,
    #[serde(default = "default_net_size")]
    pub net_size: usize,
    #[serde(default)]
    pub net_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin_cap: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_bounds: Option<[f64; 2]>,
    /// Record wall-clock time per trial; off by default so reruns are byte-identical.
    #[serde(default)]
    pub timing: bool,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(invalid("trials must be at least 1"));
        }
        if self.n.is_empty() || self.alpha.is_empty() || self.eps.is_empty() {
            return Err(invalid("sweep grid over (n, alpha, eps) must be non-empty"));
        }
        if self.grid.points_per_axis == 0 || !(self.grid.scale > 0.0) || self.net_size == 0 {
            return Err(invalid("grid plan and net size must be positive"));
        }
        if let Some(c) = &self.corruption {
            if !(0.0..0.5).contains(&c.fraction) {
                return Err(invalid("corruption fraction must lie in [0, 1/2)"));
            }
        }
        self.family.validate()?;
        self.family.reference(self.task)?;
        Ok(())
    }

    pub fn cells(&self) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::new();
        for &n in &self.n {
            for &a in &self.alpha {
                for &e in &self.eps {
                    out.push((n, a, e));
                }
            }
        }
        out
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: SweepSpec = toml::from_str(text).map_err(|e| HptrError::Schema(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HptrError::Schema(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub family: String,
    pub n: usize,
    pub d: usize,
    pub alpha: f64,
    pub eps: f64,
    pub delta: f64,
    pub trial: usize,
    pub passed: bool,
    pub error: Option<f64>,
    pub margin: u64,
    pub runtime_ms: u64,
    pub seed: u64,
}

pub fn trial_seed(sweep_seed: u64, cell: usize, trial: usize) -> u64 {
    block_seed(block_seed(sweep_seed, cell), trial)
}

/// Task score at the true parameter, maximized by the greedy adversary.
pub fn score_at_truth(task: Task, ds: &Dataset, alpha: f64, gamma: f64, net: &DirectionNet, truth: &Reference) -> f64 {
    let r = match (task, truth) {
        (Task::Mean, Reference::Mean { mu, .. }) => MeanScorer::new(ds, alpha, net, true).map(|s| s.score(mu)),
        (Task::EuclideanMean, Reference::EuclideanMean { mu }) => {
            MeanScorer::new(ds, alpha, net, false).map(|s| s.score(mu))
        }
        (Task::Regression, Reference::Regression { beta, .. }) => {
            LrScorer::new(ds, alpha, gamma, net).map(|s| s.score(beta))
        }
        (Task::Covariance, Reference::Covariance { sigma, .. }) => {
            to_mat(sigma).and_then(|m| CovScorer::new(ds, alpha, net)?.score(&m))
        }
        (Task::Pca, Reference::Pca { sigma }) => to_mat(sigma).and_then(|m| {
            let (_, u) = linalg::max_eigen(&m);
            let u: Vec<f64> = u.iter().copied().collect();
            PcaScorer::new(ds, alpha, net).map(|s| s.score(&u))
        }),
        _ => return f64::NAN,
    };
    r.unwrap_or(f64::INFINITY)
}

/// Everything one trial produces.
#[derive(Clone, Debug)]
pub struct TrialOutcome {
    pub config: MechanismConfig,
    pub transcript: Transcript,
    pub error: Option<f64>,
}

/// Dataset (possibly corrupted), mechanism config and ground truth of one sweep trial.
#[derive(Clone, Debug)]
pub struct PreparedTrial {
    pub data: Dataset,
    pub config: MechanismConfig,
    pub reference: Reference,
}

/// Rng consumed by the safety test and the release for a config seed.
pub fn mechanism_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn prepare_trial(spec: &SweepSpec, n: usize, alpha: f64, eps: f64, seed: u64) -> Result<PreparedTrial> {
    let task = spec.task;
    let reference = spec.family.reference(task)?;
    let d = spec.family.dim();
    let mut ds = generate(&spec.family, n, seed)?;
    let net = NetSpec { kind: task.net_kind(), dim: d, seed: spec.net_seed, size: spec.net_size };
    let dnet = DirectionNet::from_spec(&net)?;
    if let Some(plan) = &spec.corruption {
        let gamma = match &reference {
            Reference::Regression { gamma, .. } => *gamma,
            _ => 1.0,
        };
        let score = |s: &Dataset| score_at_truth(task, s, alpha, gamma, &dnet, &reference);
        let cs = CorruptionSpec { fraction: plan.fraction, adversary: plan.adversary.clone(), seed: block_seed(seed, 1) };
        ds = corrupt_dataset(&ds, &cs, Some(&score))?;
    }
    let proposal = propose_params(task, &spec.resilience, alpha, n, &spec.calibration)?;
    let noise = match task {
        Task::Regression => {
            let mut rng = ChaCha20Rng::seed_from_u64(block_seed(seed, 3));
            Some(robust_noise_scale(&ds, alpha, NoiseMode::Heuristic, &mut rng)?)
        }
        _ => None,
    };
    let grid = match task {
        Task::Pca => None,
        _ => Some(grid_from_data(task, &ds, alpha, spec.grid.points_per_axis, spec.grid.scale, noise.as_ref())?),
    };
    let mut cfg =
        MechanismConfig::new(task, eps, spec.delta, spec.zeta, proposal.sensitivity, proposal.tau, alpha, grid, net, seed)?;
    cfg.gamma_hat = noise.as_ref().map(|s| s.gamma_hat);
    cfg.margin_cap = spec.margin_cap;
    cfg.record_bounds = spec.record_bounds;
    cfg.validate()?;
    Ok(PreparedTrial { data: ds, config: cfg, reference })
}

/// Prepares one trial and runs the mechanism with certified margins.
pub fn run_trial(spec: &SweepSpec, n: usize, alpha: f64, eps: f64, seed: u64) -> Result<TrialOutcome> {
    let p = prepare_trial(spec, n, alpha, eps, seed)?;
    let transcript = run(&p.data, &p.config, &MarginMode::Certified, &mut mechanism_rng(p.config.seed))?;
    let error = match &transcript.output {
        Some(out) => Some(true_distance(out, &p.reference)?.value),
        None => None,
    };
    Ok(TrialOutcome { config: p.config, transcript, error })
}

/// Worker cap from the environment, if set.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(k) if k > 0 => Ok(Some(k)),
            _ => Err(invalid(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Sizes the global rayon pool from the environment. Call once, before any parallel work.
pub fn configure_threads() -> Result<()> {
    if let Some(k) = threads_from_env()? {
        // fails only if the pool was already built, which leaves the earlier size in place
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    }
    Ok(())
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(k) = threads_from_env()? {
        b = b.num_threads(k);
    }
    b.build().map_err(|e| HptrError::Io(std::io::Error::other(e.to_string())))
}

/// One row per (cell, trial) in cell-major order. Trial failures become passed=false rows.
pub fn run_experiment(spec: &SweepSpec) -> Result<Vec<ReportRow>> {
    spec.validate()?;
    let d = spec.family.dim();
    let jobs: Vec<(usize, (usize, f64, f64), usize)> = spec
        .cells()
        .into_iter()
        .enumerate()
        .flat_map(|(c, cell)| (0..spec.trials).map(move |t| (c, cell, t)))
        .collect();
    let rows: Vec<ReportRow> = thread_pool()?.install(|| {
        jobs.par_iter()
            .map(|&(c, (n, alpha, eps), t)| {
                let seed = trial_seed(spec.seed, c, t);
                let start = Instant::now();
                let outcome = run_trial(spec, n, alpha, eps, seed);
                let runtime_ms = if spec.timing { start.elapsed().as_millis() as u64 } else { 0 };
                let (passed, error, margin) = match outcome {
                    Ok(o) => (o.transcript.output.is_some(), o.error, o.transcript.margin),
                    Err(_) => (false, None, 0),
                };
                ReportRow {
                    task: spec.task.name().into(),
                    family: spec.family.name().into(),
                    n,
                    d,
                    alpha,
                    eps,
                    delta: spec.delta,
                    trial: t,
                    passed,
                    error,
                    margin,
                    runtime_ms,
                    seed,
                }
            })
            .collect()
    });
    if let Some(path) = &spec.output {
        write_rows(File::create(path)?, &rows)?;
    }
    Ok(rows)
}

pub fn write_rows<W: Write>(w: W, rows: &[ReportRow]) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    let io = |e: csv::Error| HptrError::Io(std::io::Error::other(e.to_string()));
    wr.write_record(CSV_HEADER.split(',')).map_err(io)?;
    for r in rows {
        wr.serialize(r).map_err(io)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_rows<R: Read>(r: R) -> Result<Vec<ReportRow>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
    let mut records = rd.records();
    let parse_err = |line: u64, msg: String| HptrError::Parse { line: line as usize, msg };
    match records.next() {
        None => return Err(parse_err(1, "missing header".into())),
        Some(h) => {
            let h = h.map_err(|e| parse_err(1, e.to_string()))?;
            if h.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
                return Err(parse_err(1, format!("header must be `{CSV_HEADER}`")));
            }
        }
    }
    let header = csv::StringRecord::from(CSV_HEADER.split(',').collect::<Vec<_>>());
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: ReportRow = rec.deserialize(Some(&header)).map_err(|e| parse_err(line, e.to_string()))?;
        if row.passed != row.error.is_some() {
            return Err(parse_err(line, "error must be present exactly when passed".into()));
        }
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub task: String,
    pub family: String,
    pub n: usize,
    pub d: usize,
    pub alpha: f64,
    pub eps: f64,
    pub delta: f64,
    pub trials: usize,
    pub passes: usize,
    pub pass_rate: f64,
    pub median_error: Option<f64>,
    pub q10_error: Option<f64>,
    pub q90_error: Option<f64>,
    pub median_margin: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub cells: Vec<CellSummary>,
}

/// Nearest-rank quantile of sorted values: the ceil(q N)-th smallest, and the minimum at q = 0.
pub fn nearest_rank<T: Copy>(sorted: &[T], q: f64) -> Option<T> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

pub fn summarize(rows: &[ReportRow]) -> Summary {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<&ReportRow>> = HashMap::new();
    for r in rows {
        let key = format!("{}|{}|{}|{}|{}|{}|{}", r.task, r.family, r.n, r.d, r.alpha, r.eps, r.delta);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    let cells = order
        .iter()
        .map(|k| {
            let g = &groups[k];
            let first = g[0];
            let mut errs: Vec<f64> = g.iter().filter_map(|r| r.error).collect();
            errs.sort_by(f64::total_cmp);
            let mut margins: Vec<u64> = g.iter().map(|r| r.margin).collect();
            margins.sort_unstable();
            let passes = g.iter().filter(|r| r.passed).count();
            CellSummary {
                task: first.task.clone(),
                family: first.family.clone(),
                n: first.n,
                d: first.d,
                alpha: first.alpha,
                eps: first.eps,
                delta: first.delta,
                trials: g.len(),
                passes,
                pass_rate: passes as f64 / g.len() as f64,
                median_error: nearest_rank(&errs, 0.5),
                q10_error: nearest_rank(&errs, 0.1),
                q90_error: nearest_rank(&errs, 0.9),
                median_margin: nearest_rank(&margins, 0.5).unwrap_or(0),
            }
        })
        .collect();
    Summary { cells }
}

/// Whitespace-separated table with a commented header; missing values print as NaN.
pub fn gnuplot_table(s: &Summary) -> String {
    let mut out = String::from("# task family n d alpha eps delta trials passes pass_rate median_error q10_error q90_error median_margin\n");
    let f = |v: Option<f64>| v.map_or("NaN".to_string(), |x| x.to_string());
    for c in &s.cells {
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {}\n",
            c.task,
            c.family,
            c.n,
            c.d,
            c.alpha,
            c.eps,
            c.delta,
            c.trials,
            c.passes,
            c.pass_rate,
            f(c.median_error),
            f(c.q10_error),
            f(c.q90_error),
            c.median_margin
        ));
    }
    out
}

pub fn emit_report(csv_path: &Path) -> Result<Summary> {
    Ok(summarize(&read_rows(File::open(csv_path)?)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hptr::Calibration;

    fn tiny_spec() -> SweepSpec {
        SweepSpec {
            task: Task::Mean,
            family: FamilySpec::Gaussian { mu: vec![0.0], sigma: vec![vec![1.0]] },
            resilience: ResilienceFamily::SubGaussian,
            calibration: Calibration::default(),
            n: vec![300, 600],
            alpha: vec![0.1],
            eps: vec![4.0, 8.0],
            delta: 1e-3,
            zeta: 0.05,
            trials: 3,
            seed: 7,
            output: None,
            corruption: None,
            grid: GridPlan { points_per_axis: 101, scale: 8.0 },
            net_size: 2,
            net_seed: 0,
            margin_cap: None,
            record_bounds: None,
            timing: false,
        }
    }

    fn row(n: usize, trial: usize, error: Option<f64>) -> ReportRow {
        ReportRow {
            task: "mean".into(),
            family: "gaussian".into(),
            n,
            d: 2,
            alpha: 0.1,
            eps: 2.0,
            delta: 1e-6,
            trial,
            passed: error.is_some(),
            error,
            margin: 40,
            runtime_ms: 0,
            seed: trial as u64,
        }
    }

    #[test]
    fn counts_rows_and_is_deterministic() {
        let spec = tiny_spec();
        let a = run_experiment(&spec).unwrap();
        assert_eq!(a.len(), 12);
        let b = run_experiment(&spec).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        write_rows(&mut x, &a).unwrap();
        write_rows(&mut y, &b).unwrap();
        assert_eq!(x, y);
        assert!(String::from_utf8(x).unwrap().starts_with(CSV_HEADER));
        for r in &a {
            assert_eq!(r.passed, r.error.is_some());
        }
        let spec0 = tiny_spec();
        let o = run_trial(&spec0, 600, 0.1, 8.0, 1).unwrap();
        assert!(o.transcript.margin > 0, "{:?}", o.transcript);
        assert!(a.iter().filter(|r| r.passed).count() >= 6, "{a:?}");
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let mut spec = tiny_spec();
        spec.corruption = Some(CorruptionPlan { fraction: 0.02, adversary: Adversary::GreedyScore { budget: 2 } });
        let text = spec.to_toml().unwrap();
        assert_eq!(SweepSpec::from_toml(&text).unwrap(), spec);
        let mut bad = spec.clone();
        bad.trials = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn csv_round_trip_and_parse_errors() {
        let rows = vec![row(500, 0, Some(0.25)), row(500, 1, None)];
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows).unwrap();
        assert_eq!(read_rows(buf.as_slice()).unwrap(), rows);
        let text = String::from_utf8(buf).unwrap();
        let broken = text.replacen("0.25", "abc", 1);
        match read_rows(broken.as_bytes()) {
            Err(HptrError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let inconsistent = text.replacen("true", "false", 1);
        assert!(matches!(read_rows(inconsistent.as_bytes()), Err(HptrError::Parse { line: 2, .. })));
        assert!(matches!(read_rows("a,b\n".as_bytes()), Err(HptrError::Parse { line: 1, .. })));
    }

    #[test]
    fn summaries() {
        let empty = summarize(&read_rows(format!("{CSV_HEADER}\n").as_bytes()).unwrap());
        assert!(empty.cells.is_empty());
        let one = summarize(&[row(500, 0, Some(0.3))]);
        assert_eq!(one.cells[0].median_error, Some(0.3));
        // 12-row fixture: two cells of six
        let mut rows = Vec::new();
        let errs_a = [Some(0.5), Some(0.1), None, Some(0.4), Some(0.2), Some(0.3)];
        let errs_b = [Some(1.0), None, None, Some(3.0), Some(2.0), Some(4.0)];
        for (t, e) in errs_a.iter().enumerate() {
            rows.push(row(500, t, *e));
        }
        for (t, e) in errs_b.iter().enumerate() {
            rows.push(row(2000, t, *e));
        }
        let s = summarize(&rows);
        assert_eq!(s.cells.len(), 2);
        // sorted a: .1 .2 .3 .4 .5 -> rank ceil(2.5) = 3
        assert_eq!(s.cells[0].median_error, Some(0.3));
        assert_eq!(s.cells[0].q10_error, Some(0.1));
        assert_eq!(s.cells[0].q90_error, Some(0.5));
        // sorted b: 1 2 3 4 -> rank 2
        assert_eq!(s.cells[1].median_error, Some(2.0));
        assert_eq!(s.cells[1].passes, 4);
        assert!((s.cells[1].pass_rate - 4.0 / 6.0).abs() < 1e-15);
        let table = gnuplot_table(&s);
        assert_eq!(table.lines().count(), 3);
    }

    #[test]
    fn nearest_rank_rule() {
        let v = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];
        assert_eq!(nearest_rank(&v, 0.0), Some(1));
        assert_eq!(nearest_rank(&v, 0.5), Some(5));
        assert_eq!(nearest_rank(&v, 0.95), Some(10));
        assert_eq!(nearest_rank::<i32>(&[], 0.5), None);
    }
}
