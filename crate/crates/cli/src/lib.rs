//! Command-line front end: argument parsing, report writing and exit codes.
//!
//! Every report carries a [`RunManifest`] with the resolved configuration,
//! the seed and a SHA-256 digest of each input file, which together are
//! enough to rerun the command bit-identically.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use unpci::clustering::{CiVariant, ClusterMethod};
use unpci::data::{read_labels_csv, DataMatrix};
use unpci::kde::critical_bandwidth;
use unpci::simulate::{run_table, write_rep_csv, Scenario, ScenarioSpec};
use unpci::theory::{tci_gauss, tci_mix, tci_null_mixture, MixtureSpec};
use unpci::unpci::{run_unpci, CovarianceChoice, UnpciConfig, UnpciResult};

/// Environment variable overriding the worker thread count.
pub const THREADS_ENV: &str = "UNPCI_THREADS";
/// Significant digits kept for every number in JSON output.
pub const JSON_DIGITS: usize = 12;

pub const EXIT_OK: i32 = 0;
pub const EXIT_STATISTICAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "unpci", version, about = "Cluster significance test against a unimodal null")]
pub struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Test whether a two-way clustering of a CSV data set is significant.
    Test(TestArgs),
    /// Run replicates of a built-in simulation scenario.
    Simulate(SimulateArgs),
    /// Critical (smallest unimodal) KDE bandwidth of CSV features.
    Critbw(CritbwArgs),
    /// Theoretical cluster indices of Gaussian data and a two-component mixture.
    Tci(TciArgs),
}

#[derive(Debug, Args)]
pub struct TestArgs {
    /// CSV file: header of feature ids, one row per observation.
    pub input: PathBuf,
    /// CSV with a header and one column of two distinct cluster labels.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Number of null replicates.
    #[arg(long = "b", default_value_t = unpci::unpci::DEFAULT_REPLICATES, value_parser = at_least_one)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// kmeans, single or ward.
    #[arg(long, default_value = "kmeans")]
    pub method: ClusterMethod,
    /// Screen features with a Welch t-test before testing.
    #[arg(long)]
    pub reduce: bool,
    #[arg(long, default_value_t = unpci::covariance::DEFAULT_RHO, value_parser = non_negative)]
    pub rho: f64,
    #[arg(long, default_value_t = unpci::unpci::DEFAULT_ALPHA_SCREEN, value_parser = screening_level)]
    pub alpha_screen: f64,
    /// auto (sample if n > p, else glasso), sample or glasso.
    #[arg(long = "cov", default_value = "auto")]
    pub covariance: CovarianceChoice,
    /// squared_l2, l2 or l1.
    #[arg(long, default_value = "squared_l2")]
    pub ci_variant: CiVariant,
    /// 2-means restarts per clustering.
    #[arg(long, default_value_t = unpci::clustering::DEFAULT_RESTARTS, value_parser = at_least_one)]
    pub restarts: usize,
    /// Use (#{CI_b <= CI_data} + 1) / (B + 1).
    #[arg(long)]
    pub add_one: bool,
    /// Cluster the centered data without scaling features to unit variance.
    #[arg(long)]
    pub no_scale: bool,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
    /// Write the JSON report here instead of stdout.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Write the B null cluster indices as CSV.
    #[arg(long)]
    pub dump_null: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scenario: Scenario,
    #[arg(long, default_value_t = 10, value_parser = at_least_one)]
    pub reps: usize,
    #[arg(long = "b", default_value_t = unpci::unpci::DEFAULT_REPLICATES, value_parser = at_least_one)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    pub scale_n: f64,
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    pub scale_p: f64,
    /// Override the scenario's clustering method.
    #[arg(long)]
    pub method: Option<ClusterMethod>,
    #[arg(long, default_value_t = unpci::covariance::DEFAULT_RHO, value_parser = non_negative)]
    pub rho: f64,
    #[arg(long, default_value_t = unpci::unpci::DEFAULT_ALPHA_SCREEN, value_parser = screening_level)]
    pub alpha_screen: f64,
    /// Per-replicate CSV rows.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Write the JSON summary here instead of stdout.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CritbwArgs {
    pub input: PathBuf,
    /// Feature id; repeat for several. All features when omitted.
    #[arg(long)]
    pub feature: Vec<String>,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TciArgs {
    /// Per-feature variances, largest first.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub lambdas: Vec<f64>,
    /// Mean shift of the second component.
    #[arg(long, requires = "eta")]
    pub a: Option<f64>,
    /// Mixing proportion.
    #[arg(long, requires = "a")]
    pub eta: Option<f64>,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

fn at_least_one(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v),
        Ok(_) => Err("must be at least 1".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        Ok(_) => Err("must be a finite number >= 0".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        Ok(_) => Err("must be a finite number > 0".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn screening_level(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v <= 1.0 => Ok(v),
        Ok(_) => Err("must lie in (0, 1]".into()),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] unpci::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_statistical() => EXIT_STATISTICAL,
            CliError::Core(unpci::Error::Io(_) | unpci::Error::Csv(_)) | CliError::Io { .. } => EXIT_IO,
            CliError::Core(_) | CliError::Usage(_) => EXIT_USAGE,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Value,
    pub seed: Option<u64>,
    /// `sha256:<hex>` per input file, keyed by role.
    pub inputs: Vec<InputDigest>,
    pub version: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

impl RunManifest {
    fn new(subcommand: &str, config: Value, seed: Option<u64>) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            config,
            seed,
            inputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    fn add_input(&mut self, role: &str, path: &Path, bytes: &[u8]) {
        self.inputs.push(InputDigest {
            role: role.to_string(),
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Rounds `x` to [`JSON_DIGITS`] significant digits.
pub fn round_significant(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", JSON_DIGITS - 1, x).parse().unwrap_or(x)
}

/// Rounds every float to [`JSON_DIGITS`] significant digits, writes
/// integral values as integers and non-finite values as `null`.
pub fn normalize_numbers(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = round_significant(n.as_f64().unwrap_or(f64::NAN));
            if !x.is_finite() {
                Value::Null
            } else if x.fract() == 0.0 && x.abs() < 9.0e15 {
                Value::from(x as i64)
            } else {
                serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
            }
        }
        Value::Array(a) => Value::Array(a.into_iter().map(normalize_numbers).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, normalize_numbers(v))).collect()),
        other => other,
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(io_err(path))
}

fn delimiter_byte(c: char) -> Result<u8, CliError> {
    u8::try_from(c)
        .ok()
        .filter(u8::is_ascii)
        .ok_or_else(|| CliError::Usage(format!("delimiter '{c}' is not a single ASCII character")))
}

fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if v.trim().is_empty() => Ok(None),
        Ok(v) => at_least_one(v.trim())
            .map(Some)
            .map_err(|e| CliError::Usage(format!("{THREADS_ENV}='{v}': {e}"))),
        Err(_) => Ok(None),
    }
}

fn emit(value: Value, output: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(&normalize_numbers(value)).expect("serializable");
    match output {
        Some(path) => {
            let mut f = File::create(path).map_err(io_err(path))?;
            writeln!(f, "{text}").map_err(io_err(path))
        }
        None => {
            let mut out = io::stdout().lock();
            writeln!(out, "{text}").map_err(io_err(Path::new("<stdout>")))
        }
    }
}

fn manifest_comment(manifest: &RunManifest) -> String {
    let v = normalize_numbers(serde_json::to_value(manifest).expect("serializable"));
    format!("# manifest: {}", serde_json::to_string(&v).expect("serializable"))
}

/// Writes the null cluster indices as `replicate,ci` rows under a
/// manifest comment line.
pub fn write_null_csv<W: Write>(mut w: W, manifest: &RunManifest, null_cis: &[f64]) -> io::Result<()> {
    writeln!(w, "{}", manifest_comment(manifest))?;
    writeln!(w, "replicate,ci")?;
    for (b, ci) in null_cis.iter().enumerate() {
        writeln!(w, "{b},{}", round_significant(*ci))?;
    }
    w.flush()
}

pub fn test_config(args: &TestArgs) -> Result<UnpciConfig, CliError> {
    let cfg = UnpciConfig {
        replicates: args.replicates,
        alpha_screen: args.alpha_screen,
        rho: args.rho,
        cluster_method: args.method,
        dimension_reduction: args.reduce,
        seed: args.seed,
        ci_variant: args.ci_variant,
        covariance: args.covariance,
        restarts: args.restarts,
        add_one: args.add_one,
        threads: threads_from_env()?,
        scale_before_clustering: !args.no_scale,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

/// The JSON report of one test run.
pub fn test_report(result: &UnpciResult, manifest: &RunManifest) -> Value {
    json!({
        "ci_data": result.ci_data,
        "p_perm": result.p_perm,
        "z": result.z,
        "p_normal": result.p_normal,
        "mu_ci": result.mu_ci,
        "sigma_ci": result.sigma_ci,
        "replicates": result.null_cis.len(),
        "n_selected": result.selected_features.len(),
        "selected_features": result.selected_features,
        "labels": result.labels,
        "screening_fallback": result.screening_fallback,
        "singleton_cluster": result.singleton_cluster,
        "covariance": result.covariance_method,
        "bandwidths": result.bandwidths,
        "manifest": manifest,
    })
}

fn run_test(args: &TestArgs) -> Result<(), CliError> {
    let cfg = test_config(args)?;
    let delimiter = delimiter_byte(args.delimiter)?;
    let mut manifest = RunManifest::new("test", serde_json::to_value(&cfg).expect("serializable"), Some(cfg.seed));

    let bytes = read_bytes(&args.input)?;
    manifest.add_input("data", &args.input, &bytes);
    let x = DataMatrix::from_csv_reader(bytes.as_slice(), delimiter)?;
    let labels = match &args.labels {
        Some(path) => {
            let lb = read_bytes(path)?;
            manifest.add_input("labels", path, &lb);
            Some(read_labels_csv(lb.as_slice())?)
        }
        None => None,
    };
    log::info!(
        "{}: {} observations, {} features, B = {}",
        args.input.display(),
        x.n(),
        x.p(),
        cfg.replicates
    );

    let result = run_unpci(&x, labels.as_deref(), &cfg)?;
    if let Some(path) = &args.dump_null {
        let f = File::create(path).map_err(io_err(path))?;
        write_null_csv(BufWriter::new(f), &manifest, &result.null_cis).map_err(io_err(path))?;
    }
    emit(test_report(&result, &manifest), args.output.as_deref())
}

fn run_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let mut spec = ScenarioSpec::new(args.scenario).scaled(args.scale_n, args.scale_p);
    if let Some(m) = args.method {
        spec.cluster_method = m;
    }
    let cfg = UnpciConfig {
        replicates: args.replicates,
        alpha_screen: args.alpha_screen,
        rho: args.rho,
        seed: args.seed,
        threads: threads_from_env()?,
        ..UnpciConfig::default()
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let manifest = RunManifest::new(
        "simulate",
        json!({ "scenario": spec, "reps": args.reps, "unpci": cfg }),
        Some(cfg.seed),
    );
    log::info!("{}: {}x{}, {} reps, B = {}", spec.scenario, spec.n, spec.p, args.reps, cfg.replicates);

    let table = run_table(std::slice::from_ref(&spec), args.reps, &cfg)?;
    if let Some(path) = &args.csv {
        let mut f = BufWriter::new(File::create(path).map_err(io_err(path))?);
        writeln!(f, "{}", manifest_comment(&manifest)).map_err(io_err(path))?;
        write_rep_csv(&table, &mut f)?;
    }
    let row = &table[0];
    emit(
        json!({
            "scenario": row.scenario,
            "n": row.n,
            "p": row.p,
            "reps": row.reps,
            "significant": row.significant,
            "fraction_significant": row.significant as f64 / row.reps as f64,
            "mean_selected": row.mean_selected,
            "manifest": manifest,
        }),
        args.output.as_deref(),
    )
}

fn run_critbw(args: &CritbwArgs) -> Result<(), CliError> {
    let delimiter = delimiter_byte(args.delimiter)?;
    let mut manifest = RunManifest::new("critbw", json!({ "features": args.feature }), None);
    let bytes = read_bytes(&args.input)?;
    manifest.add_input("data", &args.input, &bytes);
    let x = DataMatrix::from_csv_reader(bytes.as_slice(), delimiter)?;
    let ids: Vec<String> = if args.feature.is_empty() {
        x.feature_ids().to_vec()
    } else {
        args.feature.clone()
    };
    let mut out = Vec::with_capacity(ids.len());
    for id in &ids {
        let j = x
            .feature_index(id)
            .ok_or_else(|| CliError::Usage(format!("unknown feature '{id}'")))?;
        let cb = critical_bandwidth(&x.column(j).to_vec()).map_err(|e| match e {
            unpci::Error::DegenerateFeature(_) => unpci::Error::DegenerateFeature(id.clone()),
            other => other,
        })?;
        out.push(json!({
            "feature": id,
            "h1": cb.h1,
            "mode_location": cb.mode_location,
            "search_tolerance": cb.search_tolerance,
        }));
    }
    emit(json!({ "features": out, "manifest": manifest }), args.output.as_deref())
}

fn run_tci(args: &TciArgs) -> Result<(), CliError> {
    let gauss = tci_gauss(&args.lambdas).map_err(|e| CliError::Usage(e.to_string()))?;
    let (null_mixture, mix) = match (args.a, args.eta) {
        (Some(a), Some(eta)) => {
            let spec = MixtureSpec::new(args.lambdas.clone(), a, eta).map_err(|e| CliError::Usage(e.to_string()))?;
            (Some(tci_null_mixture(&spec)), Some(tci_mix(&spec)))
        }
        _ => (None, None),
    };
    let manifest = RunManifest::new(
        "tci",
        json!({ "lambdas": args.lambdas, "a": args.a, "eta": args.eta }),
        None,
    );
    emit(
        json!({
            "tci_gauss": gauss,
            "tci_null_mixture": null_mixture,
            "tci_mix": mix,
            "manifest": manifest,
        }),
        args.output.as_deref(),
    )
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Test(a) => run_test(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Critbw(a) => run_critbw(a),
        Command::Tci(a) => run_tci(a),
    }
}

pub fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(cli.verbose);
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
