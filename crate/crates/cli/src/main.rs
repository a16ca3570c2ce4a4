use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use picmatch::caliper::{self, CaliperOptions};
use picmatch::effect::{self, WeightScheme};
use picmatch::index_model::{FitReport, ScoreFamily};
use picmatch::matcher::{self, MatchMethod, Objective};
use picmatch::pipeline::{self, PipelineConfig};
use picmatch::simlab::{self, CovariateFamily, DgpConfig, PRule, RateConfig};
use picmatch::{CovEstimator, Error, PolicyKind, Sample, Schema};

#[derive(Parser, Debug)]
#[command(name = "picmatch", version, about = "Index-score matching within PIC SE calipers")]
struct Cli {
    /// Cap on worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Log more (-v info, -vv debug); RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// TOML file with default option values; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the index model and write fit_report.json.
    Fit(DataArgs),
    /// Fit and compute the caliper quantities (caliper_report.json).
    Caliper(DataArgs),
    /// Fit, build the eligibility graph and match (matches.csv).
    Match(DataArgs),
    /// Estimate the matched treatment effect (effect_report.json).
    Estimate(EstimateArgs),
    /// Generate a simulated dataset, or run a rate study with --grid.
    Simulate(SimulateArgs),
    /// Run the verification battery; exits 1 if any check fails.
    Verify(VerifyArgs),
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// CSV data file with a header row.
    #[arg(long)]
    input: PathBuf,
    /// TOML schema naming the treatment, covariate, outcome and stratum columns.
    #[arg(long)]
    schema: PathBuf,
    /// logistic or linear
    #[arg(long)]
    family: Option<String>,
    /// info or sandwich
    #[arg(long)]
    cov: Option<String>,
    /// picse-fixed, picse-narrowed, hard66, rr02, euclidean or none
    #[arg(long)]
    policy: Option<String>,
    /// PIC multiplier; defaults to z* at min(n0, n1)
    #[arg(long)]
    cn: Option<f64>,
    /// optimal (pair matching) or nn (nearest neighbor with replacement)
    #[arg(long)]
    method: Option<String>,
    /// total or max: what optimal pair matching minimizes
    #[arg(long)]
    objective: Option<String>,
    /// Use the intrinsic dimension in place of p - 1 in the nominal supremum.
    #[arg(long)]
    intrinsic_divisor: bool,
    /// Output directory (default: current directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// uniform or att
    #[arg(long)]
    weights: Option<String>,
    /// Match CSV from a previous `match` run; otherwise matching is rerun.
    #[arg(long)]
    matches: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 5)]
    p: usize,
    /// gaussian, correlated or t
    #[arg(long, default_value = "gaussian")]
    covariates: String,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    #[arg(long, default_value_t = 4.0)]
    df: f64,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated n values; runs a rate study instead of writing one dataset.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<usize>,
    /// Exponent a in p = ceil(n^a) for the rate study; --p is used when absent.
    #[arg(long)]
    p_power: Option<f64>,
    #[arg(long, default_value_t = 50)]
    reps: usize,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Reduced replicate counts.
    #[arg(long)]
    quick: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Defaults read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    family: Option<String>,
    cov: Option<String>,
    policy: Option<String>,
    cn: Option<f64>,
    method: Option<String>,
    objective: Option<String>,
    weights: Option<String>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    threads: Option<usize>,
}

enum Failure {
    Error(Error),
    Verdict(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verdict(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            toml::from_str(&text).map_err(|e| Error::Schema(format!("config {}: {e}", path.display())))?
        }
        None => ConfigFile::default(),
    };
    if let Some(k) = cli.threads.or(cfg.threads) {
        // fails only if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k.max(1)).build_global();
    }
    match cli.command {
        Command::Fit(a) => cmd_fit(&a, &cfg),
        Command::Caliper(a) => cmd_caliper(&a, &cfg),
        Command::Match(a) => cmd_match(&a, &cfg),
        Command::Estimate(a) => cmd_estimate(&a, &cfg),
        Command::Simulate(a) => cmd_simulate(&a, &cfg),
        Command::Verify(a) => cmd_verify(&a, &cfg),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn out_dir(flag: &Option<PathBuf>, cfg: &ConfigFile) -> Result<PathBuf, Error> {
    let dir = flag.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), Error> {
    let path = dir.join(name);
    let body = serde_json::to_string_pretty(value)? + "\n";
    fs::write(&path, body).map_err(|e| io_err(&path, e))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Error> {
    let path = dir.join(name);
    File::create(&path).map(BufWriter::new).map_err(|e| io_err(&path, e))
}

fn pick<'a>(flag: &'a Option<String>, file: &'a Option<String>, default: &'a str) -> &'a str {
    flag.as_deref().or(file.as_deref()).unwrap_or(default)
}

fn parse_family(s: &str) -> Result<ScoreFamily, Error> {
    match s {
        "logistic" => Ok(ScoreFamily::logistic()),
        "linear" => Ok(ScoreFamily::linear()),
        other => Err(Error::Invalid {
            module: "cli",
            message: format!("unknown family `{other}` (logistic or linear)"),
        }),
    }
}

fn parse_cov(s: &str) -> Result<CovEstimator, Error> {
    match s {
        "info" => Ok(CovEstimator::InverseInformation),
        "sandwich" => Ok(CovEstimator::Sandwich),
        other => Err(Error::Invalid {
            module: "cli",
            message: format!("unknown covariance estimator `{other}` (info or sandwich)"),
        }),
    }
}

fn parse_objective(s: &str) -> Result<Objective, Error> {
    match s {
        "total" => Ok(Objective::TotalCost),
        "max" => Ok(Objective::MaxCost),
        other => Err(Error::Invalid {
            module: "cli",
            message: format!("unknown objective `{other}` (total or max)"),
        }),
    }
}

fn pipeline_config(a: &DataArgs, cfg: &ConfigFile) -> Result<PipelineConfig, Error> {
    Ok(PipelineConfig {
        family: parse_family(pick(&a.family, &cfg.family, "logistic"))?,
        cov: parse_cov(pick(&a.cov, &cfg.cov, "info"))?,
        caliper: CaliperOptions {
            policy: pick(&a.policy, &cfg.policy, "picse-narrowed").parse()?,
            multiplier: a.cn.or(cfg.cn),
            intrinsic_divisor: a.intrinsic_divisor,
        },
        method: pick(&a.method, &cfg.method, "optimal").parse()?,
        objective: parse_objective(pick(&a.objective, &cfg.objective, "total"))?,
        ..PipelineConfig::default()
    })
}

fn load(a: &DataArgs) -> Result<Sample, Error> {
    let schema = Schema::load(&a.schema)?;
    picmatch::load_csv(&a.input, &schema)
}

fn cmd_fit(a: &DataArgs, cfg: &ConfigFile) -> Outcome {
    let pc = pipeline_config(a, cfg)?;
    let sample = load(a)?;
    let (centered, fit, _) = pipeline::fit_only(&sample, &pc)?;
    let dir = out_dir(&a.out, cfg)?;
    write_json(&dir, "fit_report.json", &FitReport::new(&fit, &centered, pc.cov))?;
    Ok(())
}

#[derive(Serialize)]
struct CaliperReport<'a> {
    policy: &'a picmatch::CaliperPolicy,
    eligible_edges: usize,
    evaluated_pairs: usize,
    exclusions: matcher::ExclusionCounts,
}

fn cmd_caliper(a: &DataArgs, cfg: &ConfigFile) -> Outcome {
    let pc = pipeline_config(a, cfg)?;
    let sample = load(a)?;
    let (centered, fit, c_hat) = pipeline::fit_only(&sample, &pc)?;
    let (_, policy) = caliper::caliper_policy(&centered, &fit, &c_hat, &pc.caliper)?;
    let graph = matcher::build_graph(&centered, &fit, &c_hat, &policy)?;
    let dir = out_dir(&a.out, cfg)?;
    write_json(&dir, "fit_report.json", &FitReport::new(&fit, &centered, pc.cov))?;
    write_json(
        &dir,
        "caliper_report.json",
        &CaliperReport {
            policy: &policy,
            eligible_edges: graph.edges.len(),
            evaluated_pairs: graph.evaluated,
            exclusions: graph.exclusions,
        },
    )?;
    Ok(())
}

fn cmd_match(a: &DataArgs, cfg: &ConfigFile) -> Outcome {
    let pc = pipeline_config(a, cfg)?;
    let sample = load(a)?;
    let out = pipeline::run(&sample, &pc)?;
    let dir = out_dir(&a.out, cfg)?;
    write_json(&dir, "fit_report.json", &FitReport::new(&out.fit, &out.sample, pc.cov))?;
    write_json(
        &dir,
        "caliper_report.json",
        &CaliperReport {
            policy: &out.policy,
            eligible_edges: out.graph.edges.len(),
            evaluated_pairs: out.graph.evaluated,
            exclusions: out.graph.exclusions,
        },
    )?;
    out.matched.write_csv(create(&dir, "matches.csv")?)?;
    let diag = matcher::match_diagnostics(&out.matched, &out.sample, &out.fit, None);
    write_json(&dir, "match_report.json", &diag)?;
    Ok(())
}

#[derive(Serialize)]
struct EffectReport {
    scheme: WeightScheme,
    tau_hat: f64,
    denominator: f64,
    n_strata: usize,
    informative_strata: usize,
}

fn cmd_estimate(a: &EstimateArgs, cfg: &ConfigFile) -> Outcome {
    let scheme: WeightScheme = pick(&a.weights, &cfg.weights, "uniform").parse()?;
    let sample = load(&a.data)?;
    let dir = out_dir(&a.data.out, cfg)?;
    let strata = match &a.matches {
        Some(path) => {
            let f = File::open(path).map_err(|e| io_err(path, e))?;
            let pairs = matcher::read_pairs_csv(f)?;
            matcher::strata_from_pairs(sample.n(), &pairs, sample.z())?
        }
        None => {
            let pc = pipeline_config(&a.data, cfg)?;
            let out = pipeline::run(&sample, &pc)?;
            out.matched.write_csv(create(&dir, "matches.csv")?)?;
            out.matched.strata()
        }
    };
    let y = effect::outcome_vector(&sample)?;
    let est = effect::tau_hat(&strata, &y, sample.z(), scheme)?;
    write_json(
        &dir,
        "effect_report.json",
        &EffectReport {
            scheme,
            tau_hat: est.tau_hat,
            denominator: est.denominator,
            n_strata: est.n_strata,
            informative_strata: est.informative_strata,
        },
    )?;
    est.write_strata_csv(create(&dir, "effect_strata.csv")?)?;
    Ok(())
}

fn covariate_family(a: &SimulateArgs) -> Result<CovariateFamily, Error> {
    match a.covariates.as_str() {
        "gaussian" => Ok(CovariateFamily::GaussianIid),
        "correlated" => Ok(CovariateFamily::GaussianCorrelated { rho: a.rho }),
        "t" => Ok(CovariateFamily::ScaledT { df: a.df }),
        other => Err(Error::Invalid {
            module: "cli",
            message: format!("unknown covariate family `{other}` (gaussian, correlated or t)"),
        }),
    }
}

fn cmd_simulate(a: &SimulateArgs, cfg: &ConfigFile) -> Outcome {
    let seed = a.seed.or(cfg.seed).unwrap_or(0);
    let dir = out_dir(&a.out, cfg)?;
    let base = DgpConfig {
        family: covariate_family(a)?,
        tau: a.tau,
        seed,
        ..DgpConfig::new(a.n, a.p)
    };
    if a.grid.is_empty() {
        let (sample, truth) = simlab::generate(&base, 0)?;
        write_dataset(&dir, &sample)?;
        write_json(
            &dir,
            "truth.json",
            &serde_json::json!({
                "beta_true": truth.beta_true.iter().copied().collect::<Vec<f64>>(),
                "intercept": truth.intercept,
                "tau": truth.tau,
                "config": base,
            }),
        )?;
        return Ok(());
    }
    let rc = RateConfig {
        base,
        p_rule: match a.p_power {
            Some(e) => PRule::Power(e),
            None => PRule::Fixed(a.p),
        },
        n_grid: a.grid.clone(),
        reps: a.reps,
        policy: pick(&a.policy, &cfg.policy, "picse-narrowed").parse::<PolicyKind>()?,
        method: pick(&a.method, &cfg.method, "nn").parse::<MatchMethod>()?,
    };
    let study = simlab::studies::rate_study(&rc, seed)?;
    let mut w = csv::Writer::from_writer(create(&dir, "rate_replicates.csv")?);
    for r in &study.rows {
        w.serialize(r).map_err(Error::from)?;
    }
    w.flush().map_err(|e| Error::Output(e.to_string()))?;
    let mut w = csv::Writer::from_writer(create(&dir, "rate_summary.csv")?);
    for p in &study.points {
        w.serialize(p).map_err(Error::from)?;
    }
    w.flush().map_err(|e| Error::Output(e.to_string()))?;
    write_json(&dir, "rate_study.json", &study)?;
    Ok(())
}

fn write_dataset(dir: &Path, s: &Sample) -> Result<(), Error> {
    let mut w = csv::Writer::from_writer(create(dir, "data.csv")?);
    let mut header = vec!["z".to_string()];
    header.extend(s.covariate_names().iter().cloned());
    header.push("y".to_string());
    w.write_record(&header)?;
    let y = s.y();
    for i in 0..s.n() {
        let mut rec = vec![u8::from(s.z()[i]).to_string()];
        rec.extend((0..s.p()).map(|j| s.x()[(i, j)].to_string()));
        rec.push(
            y.and_then(|v| v[i])
                .map(|v| v.to_string())
                .unwrap_or_else(|| "NA".to_string()),
        );
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::Output(e.to_string()))?;
    let schema = format!(
        "treatment = \"z\"\noutcome = \"y\"\ncovariates = [{}]\n",
        s.covariate_names()
            .iter()
            .map(|c| format!("\"{c}\""))
            .collect::<Vec<_>>()
            .join(", ")
    );
    let path = dir.join("schema.toml");
    fs::write(&path, schema).map_err(|e| io_err(&path, e))
}

fn cmd_verify(a: &VerifyArgs, cfg: &ConfigFile) -> Outcome {
    let seed = a.seed.or(cfg.seed).unwrap_or(20240601);
    let out = simlab::run_battery(seed, a.quick)?;
    let dir = out_dir(&a.out, cfg)?;
    out.write_to(&dir)?;
    for c in &out.report.checks {
        println!(
            "{} {} ({:.6} {} {:.6})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.statistic,
            c.relation,
            c.threshold
        );
    }
    if out.report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = out
            .report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        Err(Failure::Verdict(failed.join(", ")))
    }
}
