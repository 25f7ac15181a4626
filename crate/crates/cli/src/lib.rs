//! Command-line front end for the `dfsense` simulator.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dfsense::association::{detect_ghosts, EPS_GEO};
use dfsense::config::{Config, ConfigError, ExperimentKind};
use dfsense::harness::{match_estimates, run_experiment};
use dfsense::localization::{ml_localize, GaussNewtonConfig, SigmaMatrix, RESULTS_CSV_HEADER};
use dfsense::ofdm::{demodulate, make_symbol, transmit_through_channel, Dft};
use dfsense::ranging::{
    estimate_range_set, range_sets_from_csv, range_sets_to_csv, RangeSet, SensingOperator,
};
use dfsense::scenario::{build_ground_truth_taps, ChannelSet, Scenario};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_ASSERTION: i32 = 4;

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "DFSENSE_WORKERS";

#[derive(Parser, Debug)]
#[command(name = "dfsense", version, about = "Device-free multi-target localization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate range sets for one scenario from simulated OFDM echoes.
    Range(Common),
    /// Localize targets from a range-set CSV.
    Localize {
        #[command(flatten)]
        common: Common,
        /// Range sets as `bs_id,rank,range_m`.
        #[arg(long)]
        ranges: PathBuf,
    },
    /// Enumerate every target configuration consistent with the ranges.
    Ghosts {
        #[command(flatten)]
        common: Common,
        /// Range sets to test instead of the exact ranges of the scenario.
        #[arg(long)]
        ranges: Option<PathBuf>,
    },
    /// Run a Monte Carlo experiment.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_kind)]
        kind: Option<ExperimentKind>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Check a config file and report every problem found.
    Validate {
        /// Config file; `--config` works too.
        path: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML config file.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set ofdm.max_paths=150`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

fn parse_kind(s: &str) -> Result<ExperimentKind, String> {
    ExperimentKind::parse(s).ok_or_else(|| {
        let names: Vec<_> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown experiment kind '{s}', expected one of {}", names.join(", "))
    })
}

enum Failure {
    Config(String),
    Assertion(String),
    Other(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Range(common) => cmd_range(&common, out, err),
        Command::Localize { common, ranges } => cmd_localize(&common, &ranges, out),
        Command::Ghosts { common, ranges } => cmd_ghosts(&common, ranges.as_deref(), out),
        Command::Experiment {
            common,
            kind,
            trials,
        } => cmd_experiment(&common, kind, trials, out, err),
        Command::Validate { path, common } => cmd_validate(path.as_deref(), &common, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Config(m) => (EXIT_CONFIG, format!("config error: {m}")),
                Failure::Assertion(m) => (EXIT_ASSERTION, format!("assertion failed: {m}")),
                Failure::Other(m) => (EXIT_FAILURE, format!("error: {m}")),
            };
            let _ = writeln!(err, "{msg}");
            code
        }
    }
}

fn load_config(common: &Common, kind: Option<ExperimentKind>) -> Result<Config, Failure> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("experiment.seed={seed}"));
    }
    if let Some(k) = kind {
        overrides.push(format!("experiment.kind=\"{}\"", k.name()));
    }
    if !overrides.iter().any(|o| o.trim_start().starts_with("experiment.workers")) {
        if let Some(n) = std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
            if n > 0 {
                overrides.push(format!("experiment.workers={n}"));
            }
        }
    }
    let cfg = match &common.config {
        Some(path) => Config::from_file(path, &overrides, kind).map_err(|e| in_file(path, e))?,
        None => Config::from_toml_str("", &overrides, kind)?,
    };
    Ok(cfg)
}

fn in_file(path: &Path, e: ConfigError) -> Failure {
    match e {
        ConfigError::Io { .. } => Failure::Config(e.to_string()),
        ConfigError::Invalid(_) => Failure::Config(format!("{}\n{e}", path.display())),
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Other(format!("{}: {e}", path.display()))
}

/// Writes `contents` to `dir/name` through a temporary file and a rename, so
/// readers never see a partial file.
pub fn write_atomic(dir: &Path, name: &str, contents: &str) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let target = dir.join(name);
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, &target)?;
    Ok(target)
}

fn write_outputs(dir: &Path, files: &[(&str, &str)]) -> Result<(), Failure> {
    for (name, contents) in files {
        write_atomic(dir, name, contents).map_err(|e| io_failure(&dir.join(name), e))?;
    }
    Ok(())
}

fn scenario_for(cfg: &Config, rng: &mut ChaCha8Rng) -> Result<Scenario, Failure> {
    match cfg.fixed_scenario().map_err(Failure::Config)? {
        Some(sc) => Ok(sc),
        None => {
            let k = cfg.experiment.k_min;
            Scenario::random(cfg.region(), cfg.num_bs(), k, rng)
                .map(|(sc, _)| sc)
                .map_err(|e| Failure::Other(e.to_string()))
        }
    }
}

fn cmd_range(common: &Common, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let cfg = load_config(common, None)?;
    let seed = cfg.experiment.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sc = scenario_for(&cfg, &mut rng)?;
    let power = cfg.ofdm.tx_powers[0];
    let params = cfg.ofdm_params(power, cfg.allocation(seed));
    let dft = Dft::new(params.n_subcarriers);
    let gain = cfg.gain_model(power, params.allocation.set(0).len());
    let own = build_ground_truth_taps(&sc, &params, &gain, &mut rng)
        .map_err(|e| Failure::Other(e.to_string()))?;
    let mut channels = ChannelSet::monostatic(own);
    if cfg.ofdm.cross_paths {
        channels.add_cross_paths(&sc, &params, &gain, &mut rng);
    }
    let symbols: Vec<_> = (0..sc.num_bs())
        .map(|m| make_symbol(&params, m, &dft, &mut rng))
        .collect();
    let received = transmit_through_channel(&symbols, &channels, &params, &dft, &mut rng);
    let ranging = cfg.ranging_config();
    let mut sets = Vec::with_capacity(sc.num_bs());
    for (m, rx) in received.iter().enumerate() {
        let obs = demodulate(rx, m, &symbols[m], &params, &dft);
        let op = SensingOperator::for_bs(&params, m);
        let outcome = estimate_range_set(&obs, &op, &params, &ranging)
            .map_err(|e| Failure::Other(e.to_string()))?;
        if common.verbose > 0 {
            let _ = writeln!(
                err,
                "bs {}: {} taps, lambda={:.3e}, iterations={}, converged={}",
                m + 1,
                outcome.support.len(),
                outcome.lambda,
                outcome.iterations,
                outcome.converged
            );
        }
        sets.push(outcome.range_set);
    }
    let csv = range_sets_to_csv(&sets);
    write!(out, "{csv}").map_err(|e| Failure::Other(e.to_string()))?;
    if let Some(dir) = &common.out {
        write_outputs(
            dir,
            &[
                ("ranges.csv", &csv),
                ("scenario.txt", &sc.to_kv()),
                ("config.toml", &cfg.to_toml()),
            ],
        )?;
    }
    Ok(())
}

fn read_range_sets(path: &Path) -> Result<Vec<RangeSet>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    range_sets_from_csv(&text).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))
}

fn cmd_localize(common: &Common, ranges: &Path, out: &mut dyn Write) -> CmdResult {
    let cfg = load_config(common, None)?;
    let sets = read_range_sets(ranges)?;
    let (bs, truth) = match cfg.fixed_scenario().map_err(Failure::Config)? {
        Some(sc) => (sc.bs().to_vec(), sc.targets().to_vec()),
        None => (
            cfg.fixed_bs()
                .map_err(Failure::Config)?
                .ok_or_else(|| Failure::Config("localize needs BS coordinates in [scenario]".into()))?,
            Vec::new(),
        ),
    };
    if sets.len() != bs.len() {
        return Err(Failure::Other(format!(
            "{} range sets for {} BSs",
            sets.len(),
            bs.len()
        )));
    }
    let k = sets[0].len();
    let l = &cfg.localization;
    let dd = cfg.range_resolution();
    let sigma = l.sigma.unwrap_or(dd / 3f64.sqrt());
    let delta0 = l.delta0.unwrap_or(2.0 * dd + 6.0 * sigma);
    let result = ml_localize(
        &sets,
        &bs,
        &SigmaMatrix::uniform(bs.len(), k, sigma),
        delta0,
        &GaussNewtonConfig::default(),
    )
    .map_err(|e| Failure::Other(e.to_string()))?;
    // Rows follow the estimates; list each with the true target matched to it.
    let mut matched = Vec::new();
    if truth.len() == result.coords.len() {
        matched = truth.clone();
        for (k, j) in match_estimates(&result.coords, &truth).into_iter().enumerate() {
            matched[j] = truth[k];
        }
    }
    let csv = format!("{RESULTS_CSV_HEADER}\n{}", result.to_csv_rows(0, &matched));
    write!(out, "{csv}").map_err(|e| Failure::Other(e.to_string()))?;
    if let Some(dir) = &common.out {
        write_outputs(dir, &[("results.csv", &csv), ("config.toml", &cfg.to_toml())])?;
    }
    Ok(())
}

fn cmd_ghosts(common: &Common, ranges: Option<&Path>, out: &mut dyn Write) -> CmdResult {
    let cfg = load_config(common, None)?;
    let (bs, sets) = match ranges {
        Some(path) => {
            let bs = cfg
                .fixed_bs()
                .map_err(Failure::Config)?
                .ok_or_else(|| Failure::Config("ghosts needs BS coordinates in [scenario]".into()))?;
            (bs, read_range_sets(path)?)
        }
        None => {
            let sc = cfg
                .fixed_scenario()
                .map_err(Failure::Config)?
                .ok_or_else(|| Failure::Config("ghosts needs a fixed scenario in [scenario]".into()))?;
            let sets = (0..sc.num_bs())
                .map(|m| {
                    let d: Vec<f64> = (0..sc.num_targets()).map(|k| sc.distance(m, k)).collect();
                    RangeSet::from_ranges(&d)
                })
                .collect();
            (sc.bs().to_vec(), sets)
        }
    };
    let report = detect_ghosts(&sets, &bs, EPS_GEO).map_err(|e| Failure::Other(e.to_string()))?;
    let mut text = if report.has_ghost() {
        format!("ghost detected, tau={}\n", report.tau)
    } else {
        format!("no ghost, tau={}\n", report.tau)
    };
    for (s, sol) in report.solutions.iter().enumerate() {
        let coords: Vec<String> = sol
            .coords
            .iter()
            .map(|p| format!("({}, {})", fmt_coord(p.x), fmt_coord(p.y)))
            .collect();
        text.push_str(&format!("solution {}: {}\n", s + 1, coords.join(" ")));
    }
    write!(out, "{text}").map_err(|e| Failure::Other(e.to_string()))?;
    if let Some(dir) = &common.out {
        write_outputs(dir, &[("ghosts.csv", &report.to_csv()), ("config.toml", &cfg.to_toml())])?;
    }
    Ok(())
}

/// Six decimals, without a negative sign on zero.
fn fmt_coord(v: f64) -> String {
    let s = format!("{v:.6}");
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

fn cmd_experiment(
    common: &Common,
    kind: Option<ExperimentKind>,
    trials: Option<usize>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CmdResult {
    let mut common = common.clone();
    if let Some(t) = trials {
        common.overrides.push(format!("experiment.trials={t}"));
    }
    let cfg = load_config(&common, kind)?;
    let report = run_experiment(&cfg).map_err(|e| Failure::Other(e.to_string()))?;
    let dir = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("out").join(cfg.experiment.kind.name()));
    let failures = report.failures_text();
    let mut files = vec![
        ("report.csv", report.to_csv()),
        ("plot.csv", report.to_plot_csv()),
        ("config.toml", report.config_echo.clone()),
    ];
    if !failures.is_empty() {
        files.push(("failures.txt", failures));
    }
    let borrowed: Vec<(&str, &str)> = files.iter().map(|(n, c)| (*n, c.as_str())).collect();
    write_outputs(&dir, &borrowed)?;
    let summary = report.summary();
    if common.verbose > 0 {
        let _ = write!(err, "{summary}");
    } else {
        let _ = write!(err, "{}", summary.lines().next().unwrap_or_default());
        let _ = writeln!(err);
    }
    write!(out, "{}", report.to_csv()).map_err(|e| Failure::Other(e.to_string()))?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Assertion(format!(
            "{} trial(s) violated the expected property; scenarios written to {}",
            report.failures.len(),
            dir.join("failures.txt").display()
        )))
    }
}

fn cmd_validate(path: Option<&Path>, common: &Common, out: &mut dyn Write) -> CmdResult {
    let path = path
        .map(Path::to_path_buf)
        .or_else(|| common.config.clone())
        .ok_or_else(|| Failure::Config("validate needs a config file".into()))?;
    let cfg = Config::from_file(&path, &common.overrides, None).map_err(|e| in_file(&path, e))?;
    // Scenario files are only opened on use; check them here too.
    cfg.fixed_scenario()
        .map_err(|m| Failure::Config(format!("{}: {m}", path.display())))?;
    writeln!(out, "{}: valid ({})", path.display(), cfg.experiment.kind)
        .map_err(|e| Failure::Other(e.to_string()))?;
    Ok(())
}
