use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hptr_core::datagen::{generate, FamilySpec, Sidecar};
use hptr_core::experiment::{
    configure_threads, emit_report, gnuplot_table, mechanism_rng, prepare_trial, run_experiment, SweepSpec,
};
use hptr_core::hptr::{
    k_star, margin_certified, margin_exact, output_pmf, run, Engine, MarginMode, MechanismConfig,
};
use hptr_core::mechanisms::verify_dp;
use hptr_core::resilience::{certify_resilience, net_for, SubsetMode};
use hptr_core::scores::{true_distance, Task};
use hptr_core::{Dataset, HptrError, Result};

#[derive(Parser)]
#[command(name = "hptr", version, about = "Private robust estimation by propose-test-release")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample a synthetic dataset to CSV, with a JSON sidecar next to it.
    Gen(GenArgs),
    /// Certify resilience of a dataset against the population reference of a family.
    Certify(CertifyArgs),
    /// Evaluate the task score on the candidate grid or at one point.
    Score(ScoreArgs),
    /// Compute the safety margin.
    Margin(MarginArgs),
    /// Run the full mechanism and print the transcript.
    Run(RunArgs),
    /// Check the mechanism exactly over every n-record dataset from an alphabet.
    VerifyDp(VerifyArgs),
    /// Run a parameter sweep and write one CSV row per trial.
    Sweep(SweepArgs),
    /// Summarize a sweep CSV per cell.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Family spec file (TOML or JSON).
    #[arg(long)]
    family: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subsets {
    Exhaustive,
    Sampled,
    Extremal,
}

#[derive(Args)]
struct CertifyArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_task)]
    task: Task,
    #[arg(long)]
    alpha: f64,
    /// Family spec whose population parameters serve as the reference.
    #[arg(long)]
    family: PathBuf,
    #[arg(long, default_value_t = 32)]
    net_size: usize,
    #[arg(long, default_value_t = 0)]
    net_seed: u64,
    #[arg(long, value_enum, default_value_t = Subsets::Extremal)]
    subsets: Subsets,
    /// Number of subsets in sampled mode.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Flags that override fields of a config file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    zeta: Option<f64>,
    #[arg(long, alias = "Delta")]
    sensitivity: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gamma_hat: Option<f64>,
    #[arg(long)]
    margin_cap: Option<u64>,
}

impl Overrides {
    fn apply(&self, mut cfg: MechanismConfig) -> Result<MechanismConfig> {
        if let Some(v) = self.eps {
            cfg.eps = v;
        }
        if let Some(v) = self.delta {
            cfg.delta = v;
        }
        if let Some(v) = self.zeta {
            cfg.zeta = v;
        }
        if let Some(v) = self.sensitivity {
            cfg.sensitivity = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = Some(v);
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.gamma_hat {
            cfg.gamma_hat = Some(v);
        }
        if let Some(v) = self.margin_cap {
            cfg.margin_cap = Some(v);
        }
        if self.eps.is_some() || self.delta.is_some() || self.zeta.is_some() {
            cfg.k_star = k_star(cfg.eps, cfg.delta, cfg.zeta);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct ExactArgs {
    /// Use the exact margin oracle over this record alphabet (JSON list of records).
    #[arg(long)]
    alphabet: Option<PathBuf>,
    /// Search radius cap for the exact oracle; defaults to the config margin cap.
    #[arg(long)]
    cap: Option<u64>,
    /// Maximum number of output laws the exact oracle may evaluate.
    #[arg(long, default_value_t = 200_000)]
    budget: usize,
}

impl ExactArgs {
    fn mode(&self, cfg: &MechanismConfig) -> Result<MarginMode> {
        match &self.alphabet {
            None => Ok(MarginMode::Certified),
            Some(p) => Ok(MarginMode::Exact {
                alphabet: read_json(p)?,
                cap: self.cap.unwrap_or_else(|| cfg.margin_cap()),
                budget: self.budget,
            }),
        }
    }
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated parameter (flattened row-major for covariance).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    point: Option<Vec<f64>>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct MarginArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    exact: ExactArgs,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, required_unless_present = "sweep")]
    data: Option<PathBuf>,
    #[arg(long, required_unless_present = "sweep")]
    config: Option<PathBuf>,
    /// Replay one sweep trial instead: needs --n, --alpha, --eps and --seed.
    #[arg(long, conflicts_with_all = ["data", "config"], requires_all = ["n", "alpha", "eps", "seed"])]
    sweep: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[command(flatten)]
    exact: ExactArgs,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    config: PathBuf,
    /// JSON list of records; the universe is every ordered n-tuple of them.
    #[arg(long)]
    alphabet: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    cap: Option<u64>,
    #[arg(long, default_value_t = 200_000)]
    budget: usize,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Output CSV; overrides the output path in the sweep file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    csv: PathBuf,
    /// Write the JSON summary here instead of stdout.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Also write a gnuplot table.
    #[arg(long)]
    table: Option<PathBuf>,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        format!("unknown task {s:?}; expected mean, euclidean-mean, lr, cov or pca")
    })
}

fn read_text(p: &Path) -> Result<String> {
    Ok(fs::read_to_string(p)?)
}

fn read_json<T: serde::de::DeserializeOwned>(p: &Path) -> Result<T> {
    serde_json::from_str(&read_text(p)?).map_err(|e| HptrError::Schema(format!("{}: {e}", p.display())))
}

/// JSON when the file says so, TOML otherwise.
fn read_structured<T: serde::de::DeserializeOwned>(p: &Path) -> Result<T> {
    if p.extension().is_some_and(|e| e == "json") {
        return read_json(p);
    }
    toml::from_str(&read_text(p)?).map_err(|e| HptrError::Schema(format!("{}: {e}", p.display())))
}

fn read_data(p: &Path) -> Result<Dataset> {
    Dataset::read_csv(fs::File::open(p)?)
}

fn read_config(p: &Path, o: &Overrides) -> Result<MechanismConfig> {
    let cfg: MechanismConfig =
        toml::from_str(&read_text(p)?).map_err(|e| HptrError::Schema(format!("{}: {e}", p.display())))?;
    o.apply(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| HptrError::Schema(e.to_string()))?;
    match writeln!(std::io::stdout(), "{s}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let spec: FamilySpec = read_structured(&a.family)?;
    let ds = generate(&spec, a.n, a.seed)?;
    ds.write_csv(fs::File::create(&a.out)?)?;
    let sidecar = Sidecar { spec, seed: a.seed, n: ds.n, d: ds.d };
    let mut side = a.out.clone().into_os_string();
    side.push(".json");
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| HptrError::Schema(e.to_string()))?;
    fs::write(side, text)?;
    Ok(())
}

fn cmd_certify(a: &CertifyArgs) -> Result<()> {
    let ds = read_data(&a.data)?;
    let family: FamilySpec = read_structured(&a.family)?;
    let reference = family.reference(a.task)?;
    let net = net_for(a.task, ds.d, a.net_size, a.net_seed)?;
    let mode = match a.subsets {
        Subsets::Exhaustive => SubsetMode::Exhaustive,
        Subsets::Sampled => SubsetMode::Sampled { count: a.samples, seed: a.seed },
        Subsets::Extremal => SubsetMode::Extremal,
    };
    print_json(&certify_resilience(&ds, a.alpha, &reference, &net, &mode)?)
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let ds = read_data(&a.data)?;
    let cfg = read_config(&a.config, &a.overrides)?;
    let engine = Engine::new(&ds, &cfg)?;
    match &a.point {
        Some(p) => {
            let want = cfg.task.param_dim(ds.d);
            if p.len() != want {
                return Err(HptrError::Shape(format!("point has {} coordinates, task needs {want}", p.len())));
            }
            print_json(&serde_json::json!({ "score": engine.score_point(p) }))
        }
        None => {
            let cands = cfg.candidates()?;
            let scores = engine.scores(&cands);
            let best = (0..scores.len()).min_by(|&i, &j| scores[i].total_cmp(&scores[j]));
            let support = cfg.tau.map(|t| scores.iter().filter(|&&s| s <= t).count());
            print_json(&serde_json::json!({
                "candidates": scores.len(),
                "min_score": best.map(|i| scores[i]),
                "argmin": best.map(|i| cands.parameter(i)),
                "support": support,
            }))
        }
    }
}

fn cmd_margin(a: &MarginArgs) -> Result<()> {
    let ds = read_data(&a.data)?;
    let cfg = read_config(&a.config, &a.overrides)?;
    let r = match a.exact.mode(&cfg)? {
        MarginMode::Certified => margin_certified(&ds, &cfg)?,
        mode => margin_exact(&ds, &cfg, &mode)?,
    };
    print_json(&r)
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    if let Some(path) = &a.sweep {
        let spec = SweepSpec::from_toml(&read_text(path)?)?;
        let o = &a.overrides;
        let (n, alpha, eps, seed) = (a.n.unwrap(), o.alpha.unwrap(), o.eps.unwrap(), o.seed.unwrap());
        let p = prepare_trial(&spec, n, alpha, eps, seed)?;
        let mode = a.exact.mode(&p.config)?;
        let t = run(&p.data, &p.config, &mode, &mut mechanism_rng(p.config.seed))?;
        let error = match &t.output {
            Some(out) => Some(true_distance(out, &p.reference)?.value),
            None => None,
        };
        return print_json(&serde_json::json!({ "transcript": t, "error": error }));
    }
    let ds = read_data(a.data.as_deref().expect("clap enforces --data"))?;
    let cfg = read_config(a.config.as_deref().expect("clap enforces --config"), &a.overrides)?;
    let mode = a.exact.mode(&cfg)?;
    print_json(&run(&ds, &cfg, &mode, &mut mechanism_rng(cfg.seed))?)
}

fn tuples(alphabet: &[Vec<f64>], n: usize) -> Vec<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<Vec<f64>>> = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                alphabet.iter().map(move |r| {
                    let mut next = prefix.clone();
                    next.push(r.clone());
                    next
                })
            })
            .collect();
    }
    out
}

/// Splits alphabet records into a dataset, treating the last coordinate as the label for regression.
fn dataset_of(records: &[Vec<f64>], task: Task) -> Result<Dataset> {
    if task != Task::Regression {
        return Dataset::from_rows(records);
    }
    let xs: Vec<Vec<f64>> = records.iter().map(|r| r[..r.len() - 1].to_vec()).collect();
    let ys: Vec<f64> = records.iter().map(|r| r[r.len() - 1]).collect();
    Dataset::from_rows(&xs)?.with_labels(ys)
}

fn cmd_verify(a: &VerifyArgs) -> Result<()> {
    let cfg = read_config(&a.config, &a.overrides)?;
    let alphabet: Vec<Vec<f64>> = read_json(&a.alphabet)?;
    if alphabet.is_empty() || a.n == 0 {
        return Err(HptrError::InvalidParameter("alphabet and n must be non-empty".into()));
    }
    let universe = tuples(&alphabet, a.n);
    let mode = MarginMode::Exact { alphabet, cap: a.cap.unwrap_or_else(|| cfg.margin_cap()), budget: a.budget };
    let report = verify_dp(|s: &[Vec<f64>]| output_pmf(&dataset_of(s, cfg.task)?, &cfg, &mode), &universe, cfg.eps, cfg.delta)?;
    print_json(&report)
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let mut spec = SweepSpec::from_toml(&read_text(&a.spec)?)?;
    if let Some(o) = &a.out {
        spec.output = Some(o.clone());
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(t) = a.trials {
        spec.trials = t;
    }
    if spec.output.is_none() {
        return Err(HptrError::InvalidParameter("no output path: pass --out or set output in the sweep file".into()));
    }
    let rows = run_experiment(&spec)?;
    let passes = rows.iter().filter(|r| r.passed).count();
    eprintln!("{} rows, {passes} passed", rows.len());
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let summary = emit_report(&a.csv)?;
    if let Some(t) = &a.table {
        fs::write(t, gnuplot_table(&summary))?;
    }
    match &a.json {
        Some(p) => {
            let s = serde_json::to_string_pretty(&summary).map_err(|e| HptrError::Schema(e.to_string()))?;
            fs::write(p, s)?;
            Ok(())
        }
        None => print_json(&summary),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = configure_threads().and_then(|_| match &cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Certify(a) => cmd_certify(a),
        Cmd::Score(a) => cmd_score(a),
        Cmd::Margin(a) => cmd_margin(a),
        Cmd::Run(a) => cmd_run(a),
        Cmd::VerifyDp(a) => cmd_verify(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Report(a) => cmd_report(a),
    });
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
