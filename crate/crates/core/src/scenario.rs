//! Network geometry, OFDM numerology and ground-truth channel synthesis.
//!
//! Base stations (BSs) and passive targets live in a 2-D plane. Each target
//! acts as a point scatterer, so the channel from a BS transmit antenna back
//! to its own sensing receive antenna is a sparse tap vector with one
//! non-zero entry per target.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Propagation speed used for every delay/range conversion (m/s).
pub const SPEED_OF_LIGHT: f64 = 3.0e8;

/// Normalized triangle area below which three points count as collinear.
pub const COLLINEAR_EPS: f64 = 1e-6;

/// Thermal noise floor in dBm/Hz.
pub const THERMAL_NOISE_DBM_PER_HZ: f64 = -174.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("need at least 3 base stations, got {0}")]
    TooFewBaseStations(usize),
    #[error("need at least 1 target")]
    NoTargets,
    #[error("base stations {0}, {1} and {2} are collinear")]
    CollinearBaseStations(usize, usize, usize),
    #[error("{what} {index} at ({x}, {y}) lies outside the {side} m region")]
    OutsideRegion {
        what: &'static str,
        index: usize,
        x: f64,
        y: f64,
        side: f64,
    },
    #[error("range {0} m is not a positive finite distance")]
    InvalidRange(f64),
    #[error("range {range} m maps to tap {tap}, beyond the {max_paths} resolvable paths")]
    TapOutOfRange {
        range: f64,
        tap: usize,
        max_paths: usize,
    },
    #[error("targets {first} and {second} share tap {tap} at base station {bs}")]
    ResolvabilityViolation {
        bs: usize,
        tap: usize,
        first: usize,
        second: usize,
    },
    #[error("invalid OFDM parameters: {0}")]
    InvalidOfdm(String),
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance_to(self, other: Point) -> f64 {
        distance(self, other)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6})", self.x, self.y)
    }
}

impl From<(f64, f64)> for Point {
    fn from((x, y): (f64, f64)) -> Self {
        Self { x, y }
    }
}

/// Euclidean distance between two points in meters.
pub fn distance(a: Point, b: Point) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Twice the triangle area divided by the squared longest side.
///
/// Scale invariant; zero for collinear points.
pub fn collinearity_measure(a: Point, b: Point, c: Point) -> f64 {
    let cross = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    let longest = [distance(a, b), distance(b, c), distance(a, c)]
        .into_iter()
        .fold(0.0_f64, f64::max);
    if longest == 0.0 {
        return 0.0;
    }
    cross.abs() / (longest * longest)
}

pub fn are_collinear(a: Point, b: Point, c: Point) -> bool {
    collinearity_measure(a, b, c) < COLLINEAR_EPS
}

/// First collinear triple (in lexicographic index order), if any.
pub fn find_collinear_triple(points: &[Point]) -> Option<(usize, usize, usize)> {
    let n = points.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                if are_collinear(points[i], points[j], points[k]) {
                    return Some((i, j, k));
                }
            }
        }
    }
    None
}

/// Axis-aligned square centred on the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub side: f64,
}

impl Region {
    pub fn new(side: f64) -> Self {
        Self { side }
    }

    pub fn half(&self) -> f64 {
        self.side / 2.0
    }

    pub fn contains(&self, p: Point) -> bool {
        let h = self.half() * (1.0 + 1e-12);
        p.x.abs() <= h && p.y.abs() <= h
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        let h = self.half();
        Point::new(rng.gen_range(-h..=h), rng.gen_range(-h..=h))
    }
}

/// BS and target placement; ground truth for every experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    bs: Vec<Point>,
    targets: Vec<Point>,
    region: Region,
}

impl Scenario {
    pub fn new(bs: Vec<Point>, targets: Vec<Point>, region: Region) -> Result<Self, ScenarioError> {
        if bs.len() < 3 {
            return Err(ScenarioError::TooFewBaseStations(bs.len()));
        }
        if targets.is_empty() {
            return Err(ScenarioError::NoTargets);
        }
        for (what, pts) in [("base station", &bs), ("target", &targets)] {
            for (index, p) in pts.iter().enumerate() {
                if !p.is_finite() || !region.contains(*p) {
                    return Err(ScenarioError::OutsideRegion {
                        what,
                        index,
                        x: p.x,
                        y: p.y,
                        side: region.side,
                    });
                }
            }
        }
        if let Some((i, j, k)) = find_collinear_triple(&bs) {
            return Err(ScenarioError::CollinearBaseStations(i, j, k));
        }
        Ok(Self {
            bs,
            targets,
            region,
        })
    }

    /// Uniform random placement of `num_bs` BSs and `num_targets` targets.
    ///
    /// BS layouts with a collinear triple are redrawn. Returns the scenario
    /// and the number of redraws.
    pub fn random<R: Rng + ?Sized>(
        region: Region,
        num_bs: usize,
        num_targets: usize,
        rng: &mut R,
    ) -> Result<(Self, usize), ScenarioError> {
        if num_bs < 3 {
            return Err(ScenarioError::TooFewBaseStations(num_bs));
        }
        if num_targets == 0 {
            return Err(ScenarioError::NoTargets);
        }
        let mut rejections = 0;
        let bs = loop {
            let bs: Vec<Point> = (0..num_bs).map(|_| region.sample(rng)).collect();
            if find_collinear_triple(&bs).is_none() {
                break bs;
            }
            rejections += 1;
        };
        let targets = (0..num_targets).map(|_| region.sample(rng)).collect();
        Ok((
            Self {
                bs,
                targets,
                region,
            },
            rejections,
        ))
    }

    /// Same BSs, freshly drawn targets.
    pub fn redraw_targets<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let region = self.region;
        for t in &mut self.targets {
            *t = region.sample(rng);
        }
    }

    pub fn bs(&self) -> &[Point] {
        &self.bs
    }

    pub fn targets(&self) -> &[Point] {
        &self.targets
    }

    pub fn region(&self) -> Region {
        self.region
    }

    pub fn num_bs(&self) -> usize {
        self.bs.len()
    }

    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }

    /// Distance between BS `m` and target `k`.
    pub fn distance(&self, m: usize, k: usize) -> f64 {
        distance(self.bs[m], self.targets[k])
    }

    /// Distance between BSs `m` and `u`.
    pub fn bs_distance(&self, m: usize, u: usize) -> f64 {
        distance(self.bs[m], self.bs[u])
    }

    /// Flat key-value form: `region`, `m`, `k`, `bs`, `targets`.
    ///
    /// Coordinates are written with full round-trip precision.
    pub fn to_kv(&self) -> String {
        fn list(points: &[Point]) -> String {
            points
                .iter()
                .map(|p| format!("{:?},{:?}", p.x, p.y))
                .collect::<Vec<_>>()
                .join("; ")
        }
        format!(
            "region = {:?}\nm = {}\nk = {}\nbs = {}\ntargets = {}\n",
            self.region.side,
            self.num_bs(),
            self.num_targets(),
            list(&self.bs),
            list(&self.targets)
        )
    }

    pub fn from_kv(text: &str) -> Result<Self, ScenarioError> {
        let mut region = None;
        let mut m = None;
        let mut k = None;
        let mut bs = None;
        let mut targets = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ScenarioError::Parse {
                line: line_no,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let value = value.trim();
            let parse_err = |message: String| ScenarioError::Parse {
                line: line_no,
                message,
            };
            match key.trim() {
                "region" => {
                    region = Some(value.parse::<f64>().map_err(|e| parse_err(e.to_string()))?)
                }
                "m" => m = Some(value.parse::<usize>().map_err(|e| parse_err(e.to_string()))?),
                "k" => k = Some(value.parse::<usize>().map_err(|e| parse_err(e.to_string()))?),
                "bs" => bs = Some(parse_point_list(value).map_err(parse_err)?),
                "targets" => targets = Some(parse_point_list(value).map_err(parse_err)?),
                other => return Err(parse_err(format!("unknown key `{other}`"))),
            }
        }
        let missing = |name: &str| ScenarioError::Parse {
            line: 0,
            message: format!("missing key `{name}`"),
        };
        let region = region.ok_or_else(|| missing("region"))?;
        let bs = bs.ok_or_else(|| missing("bs"))?;
        let targets = targets.ok_or_else(|| missing("targets"))?;
        if m.is_some_and(|m| m != bs.len()) || k.is_some_and(|k| k != targets.len()) {
            return Err(ScenarioError::Parse {
                line: 0,
                message: "declared counts `m`/`k` disagree with the coordinate lists".into(),
            });
        }
        Scenario::new(bs, targets, Region::new(region))
    }

    /// CSV with header `role,index,x,y`; `role` is `bs` or `target`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("role,index,x,y\n");
        for (i, p) in self.bs.iter().enumerate() {
            out.push_str(&format!("bs,{i},{:?},{:?}\n", p.x, p.y));
        }
        for (i, p) in self.targets.iter().enumerate() {
            out.push_str(&format!("target,{i},{:?},{:?}\n", p.x, p.y));
        }
        out
    }

    pub fn from_csv(text: &str, region: Region) -> Result<Self, ScenarioError> {
        let (bs, targets) = parse_role_csv(text)?;
        Scenario::new(bs, targets, region)
    }
}

/// Parses `x,y; x,y; ...`.
fn parse_point_list(value: &str) -> Result<Vec<Point>, String> {
    value
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|pair| {
            let (x, y) = pair
                .split_once(',')
                .ok_or_else(|| format!("expected `x,y`, got `{pair}`"))?;
            let x = x.trim().parse::<f64>().map_err(|e| e.to_string())?;
            let y = y.trim().parse::<f64>().map_err(|e| e.to_string())?;
            Ok(Point::new(x, y))
        })
        .collect()
}

/// Reads the `role,index,x,y` coordinate CSV into (BS, target) lists.
pub fn parse_role_csv(text: &str) -> Result<(Vec<Point>, Vec<Point>), ScenarioError> {
    let mut bs: Vec<(usize, Point)> = Vec::new();
    let mut targets: Vec<(usize, Point)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || (idx == 0 && line.starts_with("role")) {
            continue;
        }
        let err = |message: String| ScenarioError::Parse {
            line: idx + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, got {}", fields.len())));
        }
        let index = fields[1].parse::<usize>().map_err(|e| err(e.to_string()))?;
        let x = fields[2].parse::<f64>().map_err(|e| err(e.to_string()))?;
        let y = fields[3].parse::<f64>().map_err(|e| err(e.to_string()))?;
        match fields[0] {
            "bs" => bs.push((index, Point::new(x, y))),
            "target" => targets.push((index, Point::new(x, y))),
            other => return Err(err(format!("unknown role `{other}`"))),
        }
    }
    bs.sort_by_key(|(i, _)| *i);
    targets.sort_by_key(|(i, _)| *i);
    Ok((
        bs.into_iter().map(|(_, p)| p).collect(),
        targets.into_iter().map(|(_, p)| p).collect(),
    ))
}

/// Per-BS sub-carrier index sets (0-based, ascending).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    sets: Vec<Vec<usize>>,
}

impl Allocation {
    pub fn new(mut sets: Vec<Vec<usize>>) -> Self {
        for s in &mut sets {
            s.sort_unstable();
            s.dedup();
        }
        Self { sets }
    }

    /// Random split of `n` sub-carriers into `num_bs` disjoint sets of `n / num_bs`.
    pub fn random_disjoint<R: Rng + ?Sized>(n: usize, num_bs: usize, rng: &mut R) -> Self {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let per = n / num_bs.max(1);
        let sets = (0..num_bs)
            .map(|m| idx[m * per..(m + 1) * per].to_vec())
            .collect();
        Self::new(sets)
    }

    /// Sub-carrier `n` goes to BS `n mod num_bs` (remainder unused).
    pub fn interleaved(n: usize, num_bs: usize) -> Self {
        let per = n / num_bs.max(1);
        let sets = (0..num_bs)
            .map(|m| (0..per).map(|i| i * num_bs + m).collect())
            .collect();
        Self::new(sets)
    }

    pub fn contiguous(n: usize, num_bs: usize) -> Self {
        let per = n / num_bs.max(1);
        let sets = (0..num_bs).map(|m| (m * per..(m + 1) * per).collect()).collect();
        Self::new(sets)
    }

    pub fn num_bs(&self) -> usize {
        self.sets.len()
    }

    pub fn set(&self, bs: usize) -> &[usize] {
        &self.sets[bs]
    }

    /// BSs other than `bs` reusing exactly the same sub-carrier set.
    pub fn interference_set(&self, bs: usize) -> Vec<usize> {
        (0..self.sets.len())
            .filter(|&u| u != bs && self.sets[u] == self.sets[bs])
            .collect()
    }

    /// Checks index bounds and that sets are either identical (reuse) or disjoint.
    pub fn validate(&self, n: usize) -> Result<(), String> {
        for (m, s) in self.sets.iter().enumerate() {
            if let Some(&bad) = s.iter().find(|&&i| i >= n) {
                return Err(format!("BS {m} allocation contains sub-carrier {bad} >= N = {n}"));
            }
        }
        for m in 0..self.sets.len() {
            let a: BTreeSet<usize> = self.sets[m].iter().copied().collect();
            for u in m + 1..self.sets.len() {
                if self.sets[u] == self.sets[m] {
                    continue;
                }
                if self.sets[u].iter().any(|i| a.contains(i)) {
                    return Err(format!(
                        "sub-carrier allocations of BS {m} and BS {u} overlap"
                    ));
                }
            }
        }
        Ok(())
    }
}

/// OFDM numerology shared by all BSs.
#[derive(Debug, Clone, PartialEq)]
pub struct OfdmParams {
    /// N
    pub n_subcarriers: usize,
    /// Δf in Hz
    pub subcarrier_spacing: f64,
    /// Q in samples
    pub cp_length: usize,
    /// L in samples
    pub max_paths: usize,
    /// p in watts
    pub tx_power: f64,
    /// σ_z² in watts
    pub noise_power: f64,
    pub allocation: Allocation,
}

impl OfdmParams {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::InvalidOfdm(m));
        if self.max_paths == 0 {
            return bad("L must be >= 1".into());
        }
        if self.max_paths >= self.cp_length {
            return bad(format!(
                "L must be < Q (L = {}, Q = {})",
                self.max_paths, self.cp_length
            ));
        }
        if self.cp_length >= self.n_subcarriers {
            return bad(format!(
                "Q must be < N (Q = {}, N = {})",
                self.cp_length, self.n_subcarriers
            ));
        }
        if !(self.subcarrier_spacing > 0.0 && self.subcarrier_spacing.is_finite()) {
            return bad("sub-carrier spacing must be positive".into());
        }
        if !(self.tx_power >= 0.0 && self.tx_power.is_finite()) {
            return bad("transmit power must be non-negative".into());
        }
        if !(self.noise_power >= 0.0 && self.noise_power.is_finite()) {
            return bad("noise power must be non-negative".into());
        }
        self.allocation
            .validate(self.n_subcarriers)
            .or_else(|m| bad(m))
    }

    /// B = N·Δf
    pub fn bandwidth(&self) -> f64 {
        self.n_subcarriers as f64 * self.subcarrier_spacing
    }

    /// Width of one delay bin in range: c₀ / (2NΔf).
    pub fn tap_width(&self) -> f64 {
        tap_width_for_bandwidth(self.bandwidth())
    }

    /// Worst-case range error of the midpoint estimator: c₀ / (4NΔf).
    pub fn range_resolution(&self) -> f64 {
        self.tap_width() / 2.0
    }
}

pub fn tap_width_for_bandwidth(bandwidth: f64) -> f64 {
    SPEED_OF_LIGHT / (2.0 * bandwidth)
}

/// Noise power (W) of a receiver with the given noise figure over `bandwidth` Hz.
pub fn thermal_noise_power(bandwidth: f64, noise_figure_db: f64) -> f64 {
    10f64.powf((THERMAL_NOISE_DBM_PER_HZ + noise_figure_db - 30.0) / 10.0) * bandwidth
}

/// Tap index `l >= 1` with `(l-1)·w < d <= l·w`, without an upper bound.
///
/// Values that sit on a bin edge up to floating-point rounding are assigned
/// to the lower bin, so the right edge stays inclusive.
pub fn tap_index_for_width(d: f64, width: f64) -> Result<usize, ScenarioError> {
    if !(d > 0.0 && d.is_finite()) {
        return Err(ScenarioError::InvalidRange(d));
    }
    let x = d / width;
    let r = x.round();
    let l = if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r
    } else {
        x.ceil()
    };
    Ok((l as usize).max(1))
}

/// Tap index of a target at range `d` (right-inclusive delay bins).
pub fn delay_tap(d: f64, params: &OfdmParams) -> Result<usize, ScenarioError> {
    let tap = tap_index_for_width(d, params.tap_width())?;
    if tap > params.max_paths {
        return Err(ScenarioError::TapOutOfRange {
            range: d,
            tap,
            max_paths: params.max_paths,
        });
    }
    Ok(tap)
}

/// Complex channel taps `h_1 ..= h_L`, addressed by 1-based tap index.
#[derive(Debug, Clone, PartialEq)]
pub struct TapVector {
    taps: Vec<Complex64>,
}

impl TapVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            taps: vec![Complex64::new(0.0, 0.0); len],
        }
    }

    pub fn from_vec(taps: Vec<Complex64>) -> Self {
        Self { taps }
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Gain at tap `l` (1-based).
    pub fn tap(&self, l: usize) -> Complex64 {
        self.taps[l - 1]
    }

    pub fn set_tap(&mut self, l: usize, value: Complex64) {
        self.taps[l - 1] = value;
    }

    pub fn add_to_tap(&mut self, l: usize, value: Complex64) {
        self.taps[l - 1] += value;
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.taps
    }

    /// 1-based indices of exactly non-zero taps.
    pub fn support(&self) -> Vec<usize> {
        self.taps
            .iter()
            .enumerate()
            .filter(|(_, h)| h.norm_sqr() > 0.0)
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.taps.iter().map(|h| h.norm()).fold(0.0, f64::max)
    }
}

/// Amplitude law for the synthesized reflections.
///
/// Estimation never sees this model; it only shapes the simulated channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum GainModel {
    /// `|h| = reflectivity / (d_tx · d_rx)`: received power falls as d⁻⁴ for a
    /// monostatic path.
    Radar { reflectivity: f64 },
    /// Same magnitude on every path.
    Fixed { amplitude: f64 },
}

impl GainModel {
    /// Radar-equation reflectivity `sqrt(G_t·G_r·λ²·σ / (4π)³)`.
    pub fn radar_from_link_budget(carrier_hz: f64, antenna_gain_dbi: f64, rcs_m2: f64) -> Self {
        let wavelength = SPEED_OF_LIGHT / carrier_hz;
        let gain = 10f64.powf(antenna_gain_dbi / 10.0);
        let reflectivity =
            (gain * gain * wavelength * wavelength * rcs_m2 / (4.0 * PI).powi(3)).sqrt();
        GainModel::Radar { reflectivity }
    }

    /// Fixed amplitude giving post-correlation SNR `p·|h|²·|N_m| / σ_z²`.
    pub fn fixed_for_snr(snr_db: f64, tx_power: f64, num_subcarriers: usize, noise_power: f64) -> Self {
        let snr = 10f64.powf(snr_db / 10.0);
        let amplitude = (snr * noise_power / (tx_power * num_subcarriers as f64)).sqrt();
        GainModel::Fixed { amplitude }
    }

    /// Path amplitude for transmit leg `d_tx` and receive leg `d_rx`.
    pub fn amplitude(&self, d_tx: f64, d_rx: f64) -> f64 {
        match *self {
            GainModel::Radar { reflectivity } => reflectivity / (d_tx * d_rx),
            GainModel::Fixed { amplitude } => amplitude,
        }
    }
}

fn random_phase<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    Complex64::from_polar(1.0, rng.gen_range(0.0..2.0 * PI))
}

/// True delay taps `L_m` of every BS, one per target (target order).
pub fn true_taps(scenario: &Scenario, params: &OfdmParams) -> Result<Vec<Vec<usize>>, ScenarioError> {
    (0..scenario.num_bs())
        .map(|m| {
            (0..scenario.num_targets())
                .map(|k| delay_tap(scenario.distance(m, k), params))
                .collect()
        })
        .collect()
}

/// Checks that no two targets fall into the same delay bin of width `width`
/// at any BS.
pub fn check_resolvable(scenario: &Scenario, width: f64) -> Result<(), ScenarioError> {
    for m in 0..scenario.num_bs() {
        let mut seen: Vec<(usize, usize)> = Vec::with_capacity(scenario.num_targets());
        for k in 0..scenario.num_targets() {
            let tap = tap_index_for_width(scenario.distance(m, k), width)?;
            if let Some(&(_, first)) = seen.iter().find(|(t, _)| *t == tap) {
                return Err(ScenarioError::ResolvabilityViolation {
                    bs: m,
                    tap,
                    first,
                    second: k,
                });
            }
            seen.push((tap, k));
        }
    }
    Ok(())
}

/// Monostatic channel `h_{m,m}` of every BS: one random-phase reflection per target.
pub fn build_ground_truth_taps<R: Rng + ?Sized>(
    scenario: &Scenario,
    params: &OfdmParams,
    gain: &GainModel,
    rng: &mut R,
) -> Result<Vec<TapVector>, ScenarioError> {
    let taps = true_taps(scenario, params)?;
    check_resolvable(scenario, params.tap_width())?;
    let mut out = Vec::with_capacity(scenario.num_bs());
    for (m, bs_taps) in taps.iter().enumerate() {
        let mut h = TapVector::zeros(params.max_paths);
        for (k, &l) in bs_taps.iter().enumerate() {
            let d = scenario.distance(m, k);
            h.set_tap(l, random_phase(rng) * gain.amplitude(d, d));
        }
        out.push(h);
    }
    Ok(out)
}

/// All transmitter/receiver channel pairs `h_{u,m}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    num_bs: usize,
    taps: Vec<TapVector>,
}

impl ChannelSet {
    /// Monostatic channels only; every cross pair is zero.
    pub fn monostatic(own: Vec<TapVector>) -> Self {
        let num_bs = own.len();
        let len = own.first().map_or(0, TapVector::len);
        let mut taps = vec![TapVector::zeros(len); num_bs * num_bs];
        for (m, h) in own.into_iter().enumerate() {
            taps[m * num_bs + m] = h;
        }
        Self { num_bs, taps }
    }

    pub fn num_bs(&self) -> usize {
        self.num_bs
    }

    /// Channel from transmitter `u` to receiver `m`.
    pub fn pair(&self, u: usize, m: usize) -> &TapVector {
        &self.taps[u * self.num_bs + m]
    }

    pub fn pair_mut(&mut self, u: usize, m: usize) -> &mut TapVector {
        &mut self.taps[u * self.num_bs + m]
    }

    /// Adds the bistatic reflections `u -> target -> m` for `u != m`.
    ///
    /// A bistatic path maps to the tap of half its total length; paths whose
    /// delay exceeds L are dropped, and paths landing on the same tap add up.
    pub fn add_cross_paths<R: Rng + ?Sized>(
        &mut self,
        scenario: &Scenario,
        params: &OfdmParams,
        gain: &GainModel,
        rng: &mut R,
    ) {
        for u in 0..self.num_bs {
            for m in 0..self.num_bs {
                if u == m {
                    continue;
                }
                for k in 0..scenario.num_targets() {
                    let (d_tx, d_rx) = (scenario.distance(u, k), scenario.distance(m, k));
                    let phase = random_phase(rng);
                    if let Ok(l) = delay_tap((d_tx + d_rx) / 2.0, params) {
                        self.pair_mut(u, m)
                            .add_to_tap(l, phase * gain.amplitude(d_tx, d_rx));
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reference_params() -> OfdmParams {
        OfdmParams {
            n_subcarriers: 3300,
            subcarrier_spacing: 30e3,
            cp_length: 232,
            max_paths: 200,
            tx_power: 6.0,
            noise_power: 1e-12,
            allocation: Allocation::interleaved(3300, 4),
        }
    }

    #[test]
    fn distances_from_example_geometry() {
        let d = distance(Point::new(0.0, 3.0), Point::new(2.0, -2.0));
        assert!((d - 29f64.sqrt()).abs() < 1e-12);
        assert_eq!(distance(Point::new(0.0, 0.0), Point::new(0.0, 0.0)), 0.0);
        let d = distance(Point::new(0.0, -4.0), Point::new(-2.0, 2.0));
        assert!((d - 2.0 * 10f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn delay_tap_examples() {
        let p = reference_params();
        assert!((p.tap_width() - 1.515_151_515_151_515).abs() < 1e-12);
        assert_eq!(delay_tap(1.0, &p).unwrap(), 1);
        assert_eq!(delay_tap(100.0, &p).unwrap(), 66);
        for l in [1usize, 2, 17, 66, 200] {
            assert_eq!(delay_tap(l as f64 * p.tap_width(), &p).unwrap(), l);
        }
        assert!(matches!(
            delay_tap(400.0, &p),
            Err(ScenarioError::TapOutOfRange { .. })
        ));
        assert!(delay_tap(0.0, &p).is_err());
    }

    #[test]
    fn ground_truth_support_matches_targets() {
        let p = reference_params();
        let region = Region::new(200.0);
        let bs = vec![
            Point::new(-50.0, -50.0),
            Point::new(50.0, -40.0),
            Point::new(0.0, 60.0),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one = Scenario::new(bs.clone(), vec![Point::new(-50.0, -43.0)], region).unwrap();
        let taps = build_ground_truth_taps(&one, &p, &GainModel::Fixed { amplitude: 1.0 }, &mut rng)
            .unwrap();
        assert_eq!(taps[0].support(), vec![5]);

        let two = Scenario::new(
            bs,
            vec![Point::new(10.0, 10.0), Point::new(-30.0, 20.0)],
            region,
        )
        .unwrap();
        let taps = build_ground_truth_taps(&two, &p, &GainModel::Fixed { amplitude: 1.0 }, &mut rng)
            .unwrap();
        for h in &taps {
            assert_eq!(h.support().len(), 2);
        }
    }

    #[test]
    fn colliding_targets_are_rejected() {
        let p = reference_params();
        let bs = vec![
            Point::new(0.0, 0.0),
            Point::new(50.0, 0.0),
            Point::new(0.0, 50.0),
        ];
        // Same range from BS 0.
        let s = Scenario::new(
            bs,
            vec![Point::new(30.0, 40.0), Point::new(-40.0, -30.0)],
            Region::new(200.0),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let err = build_ground_truth_taps(&s, &p, &GainModel::Fixed { amplitude: 1.0 }, &mut rng)
            .unwrap_err();
        assert!(matches!(err, ScenarioError::ResolvabilityViolation { bs: 0, .. }));
    }

    #[test]
    fn radar_gain_power_scales_with_fourth_power_of_range() {
        let g = GainModel::Radar { reflectivity: 0.02 };
        let ratio = g.amplitude(10.0, 10.0) / g.amplitude(20.0, 20.0);
        assert!((ratio * ratio - 16.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_layout_is_rejected() {
        let bs = vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 1.0),
            Point::new(2.0, 2.0 + 1e-9),
        ];
        let err = Scenario::new(bs, vec![Point::new(0.0, 1.0)], Region::new(10.0)).unwrap_err();
        assert_eq!(err, ScenarioError::CollinearBaseStations(0, 1, 2));
    }

    #[test]
    fn kv_and_csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (s, _) = Scenario::random(Region::new(240.0), 4, 5, &mut rng).unwrap();
        assert_eq!(Scenario::from_kv(&s.to_kv()).unwrap(), s);
        assert_eq!(Scenario::from_csv(&s.to_csv(), s.region()).unwrap(), s);
        assert!(Scenario::from_kv("region = 10\nbogus = 1\n").is_err());
    }

    #[test]
    fn allocation_validation() {
        assert!(Allocation::interleaved(3300, 4).validate(3300).is_ok());
        let overlapping = Allocation::new(vec![vec![0, 1, 2], vec![2, 3]]);
        assert!(overlapping.validate(10).is_err());
        let reuse = Allocation::new(vec![vec![0, 1], vec![2, 3], vec![0, 1]]);
        assert!(reuse.validate(10).is_ok());
        assert_eq!(reuse.interference_set(0), vec![2]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = Allocation::random_disjoint(3300, 4, &mut rng);
        assert!(r.validate(3300).is_ok());
        assert_eq!(r.set(3).len(), 825);
    }

    #[test]
    fn thermal_noise_default() {
        // -174 dBm/Hz + 9 dB over 100 MHz is -85 dBm.
        let p = thermal_noise_power(100e6, 9.0);
        assert!((10.0 * (p * 1e3).log10() + 85.0).abs() < 1e-9);
    }

    #[test]
    fn resolvability_rejection_terminates() {
        // Redraws needed to get a resolvable K = 8 layout stay bounded.
        let p = reference_params();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut total = 0usize;
        for _ in 0..200 {
            let (mut s, _) = Scenario::random(Region::new(200.0), 4, 8, &mut rng).unwrap();
            let mut tries = 0;
            while check_resolvable(&s, p.tap_width()).is_err() {
                s.redraw_targets(&mut rng);
                tries += 1;
                assert!(tries < 1000);
            }
            total += tries;
        }
        assert!(total < 200 * 20, "mean redraws {}", total as f64 / 200.0);
    }
}
