//! Experiment configuration: a sectioned TOML file, per-kind presets,
//! `section.key=value` overrides and line-level validation.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ranging::{range_resolution_for_bandwidth, LambdaRule, RangingConfig};
use crate::scenario::{
    find_collinear_triple, thermal_noise_power, Allocation, GainModel, OfdmParams, Point, Region,
    Scenario,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    #[default]
    RangeError,
    LocalizationError,
    Theorem1,
    Theorem2,
    Lemma1,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::RangeError,
        ExperimentKind::LocalizationError,
        ExperimentKind::Theorem1,
        ExperimentKind::Theorem2,
        ExperimentKind::Lemma1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::RangeError => "range-error",
            ExperimentKind::LocalizationError => "localization-error",
            ExperimentKind::Theorem1 => "theorem1",
            ExperimentKind::Theorem2 => "theorem2",
            ExperimentKind::Lemma1 => "lemma1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    pub trials: usize,
    pub seed: u64,
    pub k_min: usize,
    pub k_max: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::RangeError,
            trials: 1000,
            seed: 1,
            k_min: 2,
            k_max: 8,
            workers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    /// Side of the centered square region, meters.
    pub region: f64,
    pub num_bs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bs: Option<Vec<[f64; 2]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<[f64; 2]>>,
    /// Scenario file (key-value text, or CSV when the name ends in `.csv`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            region: 200.0,
            num_bs: 4,
            bs: None,
            targets: None,
            file: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AllocationScheme {
    #[default]
    Random,
    Interleaved,
    Contiguous,
    /// Half-open index ranges from `subcarrier_ranges`.
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfdmSection {
    pub n_subcarriers: usize,
    pub subcarrier_spacing: f64,
    pub cp_length: usize,
    pub max_paths: usize,
    pub tx_powers: Vec<f64>,
    /// Watts; thermal floor over the bandwidth when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_power: Option<f64>,
    pub noise_figure_db: f64,
    pub allocation: AllocationScheme,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subcarrier_ranges: Option<Vec<[usize; 2]>>,
    pub noiseless: bool,
    pub cross_paths: bool,
}

impl Default for OfdmSection {
    fn default() -> Self {
        Self {
            n_subcarriers: 3300,
            subcarrier_spacing: 30e3,
            cp_length: 232,
            max_paths: 200,
            tx_powers: vec![6.0, 8.0],
            noise_power: None,
            noise_figure_db: 9.0,
            allocation: AllocationScheme::Random,
            subcarrier_ranges: None,
            noiseless: false,
            cross_paths: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GainKind {
    #[default]
    Radar,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSection {
    pub model: GainKind,
    /// Radar reflectivity; derived from the link budget below when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reflectivity: Option<f64>,
    /// Fixed amplitude; required for `model = "fixed"` unless `snr_db` is set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    pub carrier_hz: f64,
    pub antenna_gain_dbi: f64,
    pub rcs_m2: f64,
}

impl Default for ChannelSection {
    fn default() -> Self {
        Self {
            model: GainKind::Radar,
            reflectivity: None,
            amplitude: None,
            snr_db: None,
            carrier_hz: 3.5e9,
            antenna_gain_dbi: 10.0,
            rcs_m2: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RangingSection {
    /// Fixed λ; the universal threshold from the estimated noise when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    /// Absolute support floor in per-tap noise standard deviations.
    pub floor_sigmas: f64,
    /// Relative support floor as a fraction of the largest tap.
    pub rel: f64,
}

impl Default for RangingSection {
    fn default() -> Self {
        Self {
            lambda: None,
            tol: 1e-8,
            max_iter: 5000,
            floor_sigmas: 3.0,
            rel: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RangeModelKind {
    /// Tap-midpoint ranges only.
    True,
    /// Gaussian ranges only, one curve per variance.
    Gaussian,
    /// Both, side by side.
    #[default]
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizationSection {
    pub bandwidth_hz: f64,
    /// Error radius r, meters.
    pub radius: f64,
    pub range_model: RangeModelKind,
    /// σ used by the search for tap-midpoint ranges; `Δd/√3` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Variances σ² of the Gaussian range curves.
    pub gaussian_variances: Vec<f64>,
    /// Pruning margin; `2Δd + 6σ` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta0: Option<f64>,
    /// Margin doublings tried when no three-BS association survives.
    pub max_retries: usize,
}

impl Default for LocalizationSection {
    fn default() -> Self {
        Self {
            bandwidth_hz: 100e6,
            radius: 2.5,
            range_model: RangeModelKind::Both,
            sigma: None,
            gaussian_variances: vec![0.2025, 0.25],
            delta0: None,
            max_retries: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub experiment: ExperimentSection,
    pub scenario: ScenarioSection,
    pub ofdm: OfdmSection,
    pub channel: ChannelSection,
    pub ranging: RangingSection,
    pub localization: LocalizationSection,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}", format_diagnostics(.0))]
    Invalid(Vec<Diagnostic>),
}

/// One problem found in a config, with the line it refers to when known.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub line: Option<usize>,
    pub key: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}: {}", self.key, self.message),
            None => write!(f, "{}: {}", self.key, self.message),
        }
    }
}

fn format_diagnostics(d: &[Diagnostic]) -> String {
    d.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n")
}

impl Config {
    /// Full-size defaults for `kind`.
    pub fn preset(kind: ExperimentKind) -> Self {
        let mut c = Config::default();
        c.experiment.kind = kind;
        match kind {
            ExperimentKind::RangeError => {}
            ExperimentKind::LocalizationError => {
                c.experiment.k_min = 2;
                c.experiment.k_max = 7;
                c.scenario.region = 240.0;
            }
            ExperimentKind::Theorem1 => {
                c.experiment.k_min = 1;
                c.experiment.k_max = 3;
                c.experiment.trials = 10_000;
            }
            ExperimentKind::Theorem2 => {
                c.experiment.k_min = 2;
                c.experiment.k_max = 5;
                c.experiment.trials = 10_000;
            }
            ExperimentKind::Lemma1 => {
                c.experiment.k_min = 2;
                c.experiment.k_max = 2;
                c.experiment.trials = 100;
            }
        }
        c
    }

    /// Parses `text`, layering it over the preset of the kind it names (or
    /// `default_kind`), then applies overrides.
    pub fn from_toml_str(
        text: &str,
        overrides: &[String],
        default_kind: Option<ExperimentKind>,
    ) -> Result<Self, ConfigError> {
        // First pass over the raw text keeps the parser's spans for messages.
        let raw: Config = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
        let file_table: toml::Table = toml::from_str(text).map_err(|e| toml_error(text, &e))?;

        let mut override_table = toml::Table::new();
        let mut diags = Vec::new();
        for o in overrides {
            if let Err(d) = apply_override(&mut override_table, o) {
                diags.push(d);
            }
        }
        if !diags.is_empty() {
            return Err(ConfigError::Invalid(diags));
        }

        let kind = lookup_kind(&override_table)
            .or_else(|| file_table.get("experiment").and_then(|e| e.get("kind")).map(|_| raw.experiment.kind))
            .or(default_kind)
            .unwrap_or_default();
        let mut merged = toml::Table::try_from(Config::preset(kind)).expect("config serializes");
        merge(&mut merged, file_table);
        coerce_to_schema(&merged, &mut override_table);
        merge(&mut merged, override_table);
        let cfg: Config = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| {
            ConfigError::Invalid(vec![Diagnostic {
                line: None,
                key: "override".into(),
                message: e.message().to_string(),
            }])
        })?;
        let diags = cfg.validate(text);
        if diags.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError::Invalid(diags))
        }
    }

    pub fn from_file(
        path: &Path,
        overrides: &[String],
        default_kind: Option<ExperimentKind>,
    ) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text, overrides, default_kind)?;
        // Relative scenario files resolve against the config's directory.
        if let (Some(f), Some(dir)) = (cfg.scenario.file.as_mut(), path.parent()) {
            if Path::new(f).is_relative() && !dir.as_os_str().is_empty() {
                *f = dir.join(&*f).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    /// Serialized effective config; parses back to an identical value.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Schema-independent invariant checks; `source` is only used to find
    /// line numbers.
    pub fn validate(&self, source: &str) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut bad = |section: &str, key: &str, message: String| {
            out.push(Diagnostic {
                line: locate(source, section, key),
                key: format!("{section}.{key}"),
                message,
            });
        };
        let e = &self.experiment;
        if e.trials == 0 {
            bad("experiment", "trials", "must be >= 1".into());
        }
        if e.k_min == 0 {
            bad("experiment", "k_min", "must be >= 1".into());
        }
        if e.k_min > e.k_max {
            bad("experiment", "k_max", format!("must be >= k_min = {}", e.k_min));
        }
        if e.workers == Some(0) {
            bad("experiment", "workers", "must be >= 1".into());
        }
        let s = &self.scenario;
        if !(s.region > 0.0 && s.region.is_finite()) {
            bad("scenario", "region", "must be positive".into());
        }
        if s.num_bs < 3 {
            bad("scenario", "num_bs", format!("M must be >= 3, got {}", s.num_bs));
        }
        if let Some(bs) = &s.bs {
            let pts: Vec<Point> = bs.iter().map(|p| Point::new(p[0], p[1])).collect();
            if pts.len() < 3 {
                bad("scenario", "bs", format!("M must be >= 3, got {}", pts.len()));
            }
            if let Some((i, j, k)) = find_collinear_triple(&pts) {
                bad(
                    "scenario",
                    "bs",
                    format!("base stations {}, {} and {} are collinear", i + 1, j + 1, k + 1),
                );
            }
            let region = Region::new(s.region);
            if let Some(i) = pts.iter().position(|p| !region.contains(*p)) {
                bad("scenario", "bs", format!("base station {} lies outside the region", i + 1));
            }
        }
        if let Some(t) = &s.targets {
            let region = Region::new(s.region);
            if t.is_empty() {
                bad("scenario", "targets", "K must be >= 1".into());
            }
            if let Some(i) = t.iter().position(|p| !region.contains(Point::new(p[0], p[1]))) {
                bad("scenario", "targets", format!("target {} lies outside the region", i + 1));
            }
        }
        let o = &self.ofdm;
        if o.max_paths >= o.cp_length {
            bad(
                "ofdm",
                "max_paths",
                format!("L must be < Q (L = {}, Q = {})", o.max_paths, o.cp_length),
            );
        }
        if o.cp_length >= o.n_subcarriers {
            bad(
                "ofdm",
                "cp_length",
                format!("Q must be < N (Q = {}, N = {})", o.cp_length, o.n_subcarriers),
            );
        }
        if o.max_paths == 0 {
            bad("ofdm", "max_paths", "L must be >= 1".into());
        }
        if !(o.subcarrier_spacing > 0.0) {
            bad("ofdm", "subcarrier_spacing", "must be positive".into());
        }
        if o.tx_powers.is_empty() || o.tx_powers.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
            bad("ofdm", "tx_powers", "need at least one positive power".into());
        }
        if o.noise_power.is_some_and(|n| !(n >= 0.0 && n.is_finite())) {
            bad("ofdm", "noise_power", "must be finite and non-negative".into());
        }
        let num_bs = self.num_bs();
        match (o.allocation, &o.subcarrier_ranges) {
            (AllocationScheme::Explicit, None) => bad(
                "ofdm",
                "subcarrier_ranges",
                "required when allocation = \"explicit\"".into(),
            ),
            (AllocationScheme::Explicit, Some(r)) => {
                if r.len() != num_bs {
                    bad(
                        "ofdm",
                        "subcarrier_ranges",
                        format!("{} ranges for {} BSs", r.len(), num_bs),
                    );
                }
                if let Err(msg) = explicit_allocation(r).validate(o.n_subcarriers) {
                    bad("ofdm", "subcarrier_ranges", msg);
                }
            }
            _ => {}
        }
        let c = &self.channel;
        if c.model == GainKind::Fixed && c.amplitude.is_none() && c.snr_db.is_none() {
            bad("channel", "amplitude", "fixed gain needs amplitude or snr_db".into());
        }
        let r = &self.ranging;
        if r.lambda.is_some_and(|l| !(l >= 0.0 && l.is_finite())) {
            bad("ranging", "lambda", "must be finite and non-negative".into());
        }
        if !(r.tol > 0.0) {
            bad("ranging", "tol", "must be positive".into());
        }
        if r.max_iter == 0 {
            bad("ranging", "max_iter", "must be >= 1".into());
        }
        if !(0.0..1.0).contains(&r.rel) {
            bad("ranging", "rel", "must lie in [0, 1)".into());
        }
        let l = &self.localization;
        if self.experiment.kind == ExperimentKind::LocalizationError && !(l.radius > 0.0) {
            bad("localization", "radius", "r must be > 0".into());
        }
        if !(l.bandwidth_hz > 0.0) {
            bad("localization", "bandwidth_hz", "must be positive".into());
        }
        if l.sigma.is_some_and(|s| !(s > 0.0)) {
            bad("localization", "sigma", "must be positive".into());
        }
        if l.gaussian_variances.iter().any(|v| !(*v > 0.0)) {
            bad("localization", "gaussian_variances", "variances must be positive".into());
        }
        if l.delta0.is_some_and(|d| !(d >= 0.0)) {
            bad("localization", "delta0", "must be non-negative".into());
        }
        out
    }

    /// Number of BSs: the fixed list if given, else `num_bs`.
    pub fn num_bs(&self) -> usize {
        self.scenario.bs.as_ref().map_or(self.scenario.num_bs, Vec::len)
    }

    pub fn region(&self) -> Region {
        Region::new(self.scenario.region)
    }

    pub fn bandwidth(&self) -> f64 {
        self.ofdm.n_subcarriers as f64 * self.ofdm.subcarrier_spacing
    }

    pub fn noise_power(&self) -> f64 {
        if self.ofdm.noiseless {
            return 0.0;
        }
        self.ofdm
            .noise_power
            .unwrap_or_else(|| thermal_noise_power(self.bandwidth(), self.ofdm.noise_figure_db))
    }

    /// Sub-carrier allocation; the random scheme draws from `seed`.
    pub fn allocation(&self, seed: u64) -> Allocation {
        let n = self.ofdm.n_subcarriers;
        let m = self.num_bs();
        match self.ofdm.allocation {
            AllocationScheme::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(u64::MAX);
                Allocation::random_disjoint(n, m, &mut rng)
            }
            AllocationScheme::Interleaved => Allocation::interleaved(n, m),
            AllocationScheme::Contiguous => Allocation::contiguous(n, m),
            AllocationScheme::Explicit => {
                explicit_allocation(self.ofdm.subcarrier_ranges.as_deref().unwrap_or(&[]))
            }
        }
    }

    pub fn ofdm_params(&self, tx_power: f64, allocation: Allocation) -> OfdmParams {
        OfdmParams {
            n_subcarriers: self.ofdm.n_subcarriers,
            subcarrier_spacing: self.ofdm.subcarrier_spacing,
            cp_length: self.ofdm.cp_length,
            max_paths: self.ofdm.max_paths,
            tx_power,
            noise_power: self.noise_power(),
            allocation,
        }
    }

    pub fn gain_model(&self, tx_power: f64, per_bs: usize) -> GainModel {
        let c = &self.channel;
        match c.model {
            GainKind::Radar => match c.reflectivity {
                Some(reflectivity) => GainModel::Radar { reflectivity },
                None => GainModel::radar_from_link_budget(c.carrier_hz, c.antenna_gain_dbi, c.rcs_m2),
            },
            GainKind::Fixed => match (c.amplitude, c.snr_db) {
                (Some(amplitude), _) => GainModel::Fixed { amplitude },
                (None, Some(snr)) => {
                    GainModel::fixed_for_snr(snr, tx_power, per_bs, self.noise_power().max(1e-300))
                }
                (None, None) => GainModel::Fixed { amplitude: 1.0 },
            },
        }
    }

    pub fn ranging_config(&self) -> RangingConfig {
        let r = &self.ranging;
        if self.ofdm.noiseless {
            return RangingConfig {
                lambda: LambdaRule::Fixed(r.lambda.unwrap_or(0.0)),
                tol: r.tol,
                max_iter: r.max_iter,
                floor_sigmas: 0.0,
                rel: 1e-9,
            };
        }
        RangingConfig {
            lambda: r.lambda.map_or(LambdaRule::Universal, LambdaRule::Fixed),
            tol: r.tol,
            max_iter: r.max_iter,
            floor_sigmas: r.floor_sigmas,
            rel: r.rel,
        }
    }

    /// Worst-case midpoint error `Δd` of the localization bandwidth.
    pub fn range_resolution(&self) -> f64 {
        range_resolution_for_bandwidth(self.localization.bandwidth_hz)
    }

    /// Fixed scenario from the file or the inline lists, if any.
    pub fn fixed_scenario(&self) -> Result<Option<Scenario>, String> {
        let region = self.region();
        if let Some(file) = &self.scenario.file {
            let text = std::fs::read_to_string(file)
                .map_err(|e| format!("cannot read scenario file {file}: {e}"))?;
            let sc = if file.ends_with(".csv") {
                Scenario::from_csv(&text, region)
            } else {
                Scenario::from_kv(&text)
            };
            return sc.map(Some).map_err(|e| format!("{file}: {e}"));
        }
        match (&self.scenario.bs, &self.scenario.targets) {
            (Some(bs), Some(t)) => Scenario::new(to_points(bs), to_points(t), region)
                .map(Some)
                .map_err(|e| e.to_string()),
            _ => Ok(None),
        }
    }

    /// Fixed BS coordinates from the file or the inline list, if any.
    pub fn fixed_bs(&self) -> Result<Option<Vec<Point>>, String> {
        if self.scenario.file.is_some() {
            return Ok(self.fixed_scenario()?.map(|s| s.bs().to_vec()));
        }
        Ok(self.scenario.bs.as_deref().map(to_points))
    }
}

fn to_points(v: &[[f64; 2]]) -> Vec<Point> {
    v.iter().map(|p| Point::new(p[0], p[1])).collect()
}

fn explicit_allocation(ranges: &[[usize; 2]]) -> Allocation {
    Allocation::new(ranges.iter().map(|r| (r[0]..r[1]).collect()).collect())
}

fn lookup_kind(t: &toml::Table) -> Option<ExperimentKind> {
    t.get("experiment")?
        .get("kind")?
        .as_str()
        .and_then(ExperimentKind::parse)
}

fn toml_error(text: &str, e: &toml::de::Error) -> ConfigError {
    let line = e
        .span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
    ConfigError::Invalid(vec![Diagnostic {
        line,
        key: "syntax".into(),
        message: e.message().to_string(),
    }])
}

/// `section.key=value`; the value is parsed as TOML and falls back to a
/// bare string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), Diagnostic> {
    let diag = |message: String| Diagnostic {
        line: None,
        key: spec.to_string(),
        message,
    };
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| diag("override must look like section.key=value".into()))?;
    let (section, field) = key
        .trim()
        .split_once('.')
        .ok_or_else(|| diag("override key must be section.key".into()))?;
    let value = value.trim();
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let entry = table
        .entry(section.trim().to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match entry {
        toml::Value::Table(t) => {
            t.insert(field.trim().to_string(), parsed);
            Ok(())
        }
        _ => Err(diag("not a section".into())),
    }
}

/// Overrides are parsed as TOML literals, so `key=true` arrives as a bool
/// even where the schema holds a string; turn those back into strings.
fn coerce_to_schema(base: &toml::Table, over: &mut toml::Table) {
    for (k, v) in over.iter_mut() {
        match (base.get(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => coerce_to_schema(b, o),
            (Some(toml::Value::String(_)), v) if !v.is_str() && !v.is_table() && !v.is_array() => {
                *v = toml::Value::String(v.to_string());
            }
            _ => {}
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// 1-based line of `key` inside `[section]`.
fn locate(source: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in source.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = name.trim().to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = t.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn string_override_that_looks_like_bool() {
        let cfg = Config::from_toml_str(
            "",
            &["localization.range_model=true".to_string()],
            Some(ExperimentKind::LocalizationError),
        )
        .unwrap();
        assert_eq!(cfg.localization.range_model, RangeModelKind::True);
    }

    const RANGE_ERROR: &str = r#"
[experiment]
kind = "range-error"
trials = 1000

[ofdm]
n_subcarriers = 3300
subcarrier_spacing = 30e3
cp_length = 232
max_paths = 200

[scenario]
num_bs = 4
region = 200.0
"#;

    fn invalid(text: &str) -> Vec<Diagnostic> {
        match Config::from_toml_str(text, &[], None) {
            Err(ConfigError::Invalid(d)) => d,
            other => panic!("expected diagnostics, got {other:?}"),
        }
    }

    #[test]
    fn range_error_config_is_valid() {
        let c = Config::from_toml_str(RANGE_ERROR, &[], None).unwrap();
        assert_eq!(c.ofdm.max_paths, 200);
        assert_eq!(c.num_bs(), 4);
        assert!((c.bandwidth() - 99e6).abs() < 1.0);
    }

    #[test]
    fn l_equal_q_is_rejected_with_line() {
        let text = RANGE_ERROR.replace("max_paths = 200", "max_paths = 232");
        let d = invalid(&text);
        assert!(d[0].message.contains("L must be < Q"), "{:?}", d);
        assert_eq!(d[0].line, Some(10));
    }

    #[test]
    fn overlapping_allocations_are_rejected() {
        let text = "[ofdm]\nallocation = \"explicit\"\n\
                    subcarrier_ranges = [[0, 825], [800, 1650], [1650, 2475], [2475, 3300]]\n";
        let d = invalid(text);
        assert!(d.iter().any(|d| d.message.contains("overlap")), "{:?}", d);
        assert_eq!(d[0].line, Some(3));
    }

    #[test]
    fn unknown_keys_and_bad_types_are_rejected() {
        let d = invalid("[ofdm]\nmax_pathz = 3\n");
        assert_eq!(d[0].line, Some(2));
        let d = invalid("[ofdm]\nmax_paths = \"many\"\n");
        assert_eq!(d[0].line, Some(2));
    }

    #[test]
    fn collinear_fixed_bs_rejected() {
        let d = invalid("[scenario]\nbs = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]\n");
        assert!(d[0].message.contains("collinear"));
        assert_eq!(d[0].line, Some(2));
    }

    #[test]
    fn overrides_win_and_are_type_checked() {
        let c = Config::from_toml_str(RANGE_ERROR, &["experiment.trials=5".into(), "ofdm.tx_powers=[7.0]".into()], None)
            .unwrap();
        assert_eq!(c.experiment.trials, 5);
        assert_eq!(c.ofdm.tx_powers, vec![7.0]);
        assert!(Config::from_toml_str(RANGE_ERROR, &["experiment.trials=many".into()], None).is_err());
        assert!(Config::from_toml_str(RANGE_ERROR, &["experiment.nope=1".into()], None).is_err());
        assert!(Config::from_toml_str(RANGE_ERROR, &["trials".into()], None).is_err());
    }

    #[test]
    fn kind_selects_preset() {
        let c = Config::from_toml_str("[experiment]\nkind = \"localization-error\"\n", &[], None).unwrap();
        assert_eq!(c.scenario.region, 240.0);
        assert_eq!(c.experiment.k_max, 7);
        let c = Config::from_toml_str("", &["experiment.kind=theorem2".into()], None).unwrap();
        assert_eq!(c.experiment.kind, ExperimentKind::Theorem2);
        assert_eq!(c.experiment.k_max, 5);
    }

    #[test]
    fn echo_round_trips() {
        for kind in ExperimentKind::ALL {
            let mut c = Config::preset(kind);
            c.ofdm.noise_power = Some(1.5e-12);
            c.scenario.bs = Some(vec![[0.0, 3.0], [5.0, 0.0], [0.0, -4.0]]);
            let back = Config::from_toml_str(&c.to_toml(), &[], None).unwrap();
            assert_eq!(back, c);
        }
    }
}
