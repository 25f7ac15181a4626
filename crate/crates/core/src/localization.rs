//! Phase II under imperfect ranges: Gaussian range model, weighted
//! Gauss-Newton, Hungarian matching and the candidate search over
//! three-BS associations.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::association::{feasible_associations_3bs, Association, AssociationError};
use crate::ranging::RangeSet;
use crate::scenario::{distance, Point, Scenario};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocalizationError {
    #[error("need at least 3 anchors, got {0}")]
    TooFewAnchors(usize),
    #[error("anchors are collinear")]
    CollinearAnchors,
    #[error("Gauss-Newton stopped after {iterations} iterations (gradient norm {gradient_norm:e})")]
    NonConvergence {
        iterations: usize,
        gradient_norm: f64,
        best: GnResult,
    },
    #[error("no feasible three-BS association within margin {delta0}")]
    EmptyFeasibleSet { delta0: f64 },
    #[error("{0}")]
    SizeMismatch(String),
    #[error("standard deviations must be positive and finite")]
    InvalidSigma,
    #[error(transparent)]
    Association(#[from] AssociationError),
}

/// Standard deviations `σ_{m,k}`, row-major `M × K`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaMatrix {
    num_bs: usize,
    num_targets: usize,
    values: Vec<f64>,
}

impl SigmaMatrix {
    pub fn uniform(num_bs: usize, num_targets: usize, sigma: f64) -> Self {
        Self {
            num_bs,
            num_targets,
            values: vec![sigma; num_bs * num_targets],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, LocalizationError> {
        let num_bs = rows.len();
        let num_targets = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != num_targets) {
            return Err(LocalizationError::SizeMismatch("ragged sigma matrix".into()));
        }
        let values: Vec<f64> = rows.into_iter().flatten().collect();
        if values.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(LocalizationError::InvalidSigma);
        }
        Ok(Self {
            num_bs,
            num_targets,
            values,
        })
    }

    pub fn get(&self, m: usize, k: usize) -> f64 {
        self.values[m * self.num_targets + k]
    }

    pub fn weight(&self, m: usize, k: usize) -> f64 {
        let s = self.get(m, k);
        1.0 / (s * s)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn num_bs(&self) -> usize {
        self.num_bs
    }

    pub fn num_targets(&self) -> usize {
        self.num_targets
    }
}

/// Where ranges come from.
#[derive(Debug, Clone, PartialEq)]
pub enum NoisyRangeModel {
    /// `d̄ = d + N(0, σ²)`.
    Gaussian(SigmaMatrix),
    /// Ranges produced elsewhere (Phase I or a file) are used as they are.
    PassThrough,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyRanges {
    pub range_sets: Vec<RangeSet>,
    /// Number of draws that came out negative and were clamped to zero.
    pub clamped: usize,
}

/// Draws `d̄_{m,k} = d_{m,k} + ε_{m,k}` with real Gaussian `ε` and hands each
/// BS its ranges without labels.
pub fn sample_noisy_ranges<R: Rng + ?Sized>(
    scenario: &Scenario,
    sigma: &SigmaMatrix,
    rng: &mut R,
) -> NoisyRanges {
    let mut clamped = 0;
    let range_sets = (0..scenario.num_bs())
        .map(|m| {
            let ranges: Vec<f64> = (0..scenario.num_targets())
                .map(|k| {
                    let s = sigma.get(m, k);
                    let noise = if s > 0.0 {
                        Normal::new(0.0, s).expect("finite sigma").sample(rng)
                    } else {
                        0.0
                    };
                    let d = scenario.distance(m, k) + noise;
                    if d < 0.0 {
                        clamped += 1;
                        0.0
                    } else {
                        d
                    }
                })
                .collect();
            RangeSet::from_ranges(&ranges)
        })
        .collect();
    NoisyRanges {
        range_sets,
        clamped,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussNewtonConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for GaussNewtonConfig {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 100,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnResult {
    pub point: Point,
    pub objective: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
}

/// `Σ_m w_m (r_m − ‖p − a_m‖)²`
pub fn weighted_objective(p: Point, anchors: &[Point], ranges: &[f64], weights: &[f64]) -> f64 {
    anchors
        .iter()
        .zip(ranges)
        .zip(weights)
        .map(|((a, r), w)| {
            let e = distance(p, *a) - r;
            w * e * e
        })
        .sum()
}

/// Analytic gradient of [`weighted_objective`].
pub fn weighted_gradient(p: Point, anchors: &[Point], ranges: &[f64], weights: &[f64]) -> [f64; 2] {
    let mut g = [0.0; 2];
    for ((a, r), w) in anchors.iter().zip(ranges).zip(weights) {
        let dx = p.x - a.x;
        let dy = p.y - a.y;
        let d = dx.hypot(dy);
        if d == 0.0 {
            continue;
        }
        let e = d - r;
        g[0] += 2.0 * w * e * dx / d;
        g[1] += 2.0 * w * e * dy / d;
    }
    g
}

fn check_inputs(anchors: &[Point], ranges: &[f64], weights: &[f64]) -> Result<(), LocalizationError> {
    if anchors.len() < 3 {
        return Err(LocalizationError::TooFewAnchors(anchors.len()));
    }
    if ranges.len() != anchors.len() || weights.len() != anchors.len() {
        return Err(LocalizationError::SizeMismatch(
            "anchors, ranges and weights differ in length".into(),
        ));
    }
    Ok(())
}

/// Damped Gauss-Newton from `init`. Always returns the best point found;
/// `converged` is false when the iteration budget ran out.
pub fn gauss_newton(
    anchors: &[Point],
    ranges: &[f64],
    weights: &[f64],
    init: Point,
    cfg: &GaussNewtonConfig,
) -> GnResult {
    let mut p = init;
    let mut f = weighted_objective(p, anchors, ranges, weights);
    let mut grad_norm = f64::INFINITY;
    for iter in 0..=cfg.max_iter {
        // An iterate sitting on an anchor has no Jacobian row there.
        if anchors.iter().any(|a| distance(p, *a) < 1e-12) {
            p = Point::new(p.x + 1e-6, p.y + 0.7e-6);
            f = weighted_objective(p, anchors, ranges, weights);
        }
        let g = weighted_gradient(p, anchors, ranges, weights);
        grad_norm = g[0].hypot(g[1]);
        if grad_norm < cfg.tol {
            return GnResult {
                point: p,
                objective: f,
                iterations: iter,
                gradient_norm: grad_norm,
                converged: true,
            };
        }
        if iter == cfg.max_iter {
            break;
        }
        // Normal equations JᵀWJ δ = −JᵀWe (the gradient carries a factor 2).
        let (mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0);
        for (a, w) in anchors.iter().zip(weights) {
            let dx = p.x - a.x;
            let dy = p.y - a.y;
            let d = dx.hypot(dy);
            let (jx, jy) = (dx / d, dy / d);
            h00 += w * jx * jx;
            h01 += w * jx * jy;
            h11 += w * jy * jy;
        }
        let ridge = 1e-12 * (h00 + h11);
        h00 += ridge;
        h11 += ridge;
        let det = h00 * h11 - h01 * h01;
        let (sx, sy) = if det > 0.0 {
            let bx = -0.5 * g[0];
            let by = -0.5 * g[1];
            ((h11 * bx - h01 * by) / det, (h00 * by - h01 * bx) / det)
        } else {
            let scale = (h00 + h11).max(f64::MIN_POSITIVE);
            (-0.5 * g[0] / scale, -0.5 * g[1] / scale)
        };
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..=cfg.max_halvings {
            let q = Point::new(p.x + step * sx, p.y + step * sy);
            let fq = weighted_objective(q, anchors, ranges, weights);
            if fq < f {
                p = q;
                f = fq;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            // No descent along the Gauss-Newton direction at machine precision.
            return GnResult {
                point: p,
                objective: f,
                iterations: iter,
                gradient_norm: grad_norm,
                converged: true,
            };
        }
    }
    GnResult {
        point: p,
        objective: f,
        iterations: cfg.max_iter,
        gradient_norm: grad_norm,
        converged: false,
    }
}

/// Checked wrapper around [`gauss_newton`].
pub fn gauss_newton_localize(
    anchors: &[Point],
    ranges: &[f64],
    weights: &[f64],
    init: Point,
    cfg: &GaussNewtonConfig,
) -> Result<GnResult, LocalizationError> {
    check_inputs(anchors, ranges, weights)?;
    if !init.is_finite() {
        return Err(LocalizationError::SizeMismatch("initial point is not finite".into()));
    }
    let r = gauss_newton(anchors, ranges, weights, init, cfg);
    if r.converged {
        Ok(r)
    } else {
        Err(LocalizationError::NonConvergence {
            iterations: r.iterations,
            gradient_norm: r.gradient_norm,
            best: r,
        })
    }
}

/// Least-squares solution of the differenced squared-range equations
/// `2(a_m − a_1)·p = r_1² − r_m² + ‖a_m‖² − ‖a_1‖²`.
pub fn linear_init(anchors: &[Point], ranges: &[f64]) -> Result<Point, LocalizationError> {
    if anchors.len() < 3 {
        return Err(LocalizationError::TooFewAnchors(anchors.len()));
    }
    if ranges.len() != anchors.len() {
        return Err(LocalizationError::SizeMismatch("anchors and ranges differ in length".into()));
    }
    // Work relative to the first anchor for conditioning.
    let o = anchors[0];
    let r0 = ranges[0];
    let (mut a00, mut a01, mut a11, mut b0, mut b1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut scale: f64 = 0.0;
    for (a, r) in anchors.iter().zip(ranges).skip(1) {
        let ux = a.x - o.x;
        let uy = a.y - o.y;
        let rhs = 0.5 * (r0 * r0 - r * r + ux * ux + uy * uy);
        a00 += ux * ux;
        a01 += ux * uy;
        a11 += uy * uy;
        b0 += ux * rhs;
        b1 += uy * rhs;
        scale = scale.max(ux * ux + uy * uy);
    }
    let det = a00 * a11 - a01 * a01;
    if det <= 1e-12 * scale * scale {
        return Err(LocalizationError::CollinearAnchors);
    }
    let x = (a11 * b0 - a01 * b1) / det;
    let y = (a00 * b1 - a01 * b0) / det;
    Ok(Point::new(o.x + x, o.y + y))
}

/// Optimal assignment for a square cost matrix. Returns `perm` with row `k`
/// matched to column `perm[k]`, and the total cost.
pub fn hungarian_assign(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    assert!(cost.iter().all(|r| r.len() == n), "cost matrix must be square");
    let flat: Vec<f64> = cost.iter().flatten().copied().collect();
    let mut scratch = HungarianScratch::default();
    let mut perm = vec![0; n];
    let total = scratch.solve(&flat, n, &mut perm);
    (perm, total)
}

/// Reusable buffers for repeated assignments of the same size.
#[derive(Default)]
pub(crate) struct HungarianScratch {
    u: Vec<f64>,
    v: Vec<f64>,
    owner: Vec<usize>,
    way: Vec<usize>,
    minv: Vec<f64>,
    used: Vec<bool>,
}

impl HungarianScratch {
    /// Minimum-cost assignment for the row-major `n × n` matrix `cost`;
    /// writes the column of each row into `perm` and returns the total.
    pub(crate) fn solve(&mut self, cost: &[f64], n: usize, perm: &mut [usize]) -> f64 {
        if n == 0 {
            return 0.0;
        }
        // Rows whose minima sit in distinct columns already meet the
        // row-minimum lower bound.
        self.used.clear();
        self.used.resize(n, false);
        let mut distinct = true;
        for (r, slot) in perm.iter_mut().enumerate().take(n) {
            let row = &cost[r * n..(r + 1) * n];
            let mut c_min = 0;
            for c in 1..n {
                if row[c] < row[c_min] {
                    c_min = c;
                }
            }
            if self.used[c_min] {
                distinct = false;
                break;
            }
            self.used[c_min] = true;
            *slot = c_min;
        }
        if distinct {
            return perm.iter().enumerate().map(|(k, &c)| cost[k * n + c]).sum();
        }
        // Shortest augmenting path with row/column potentials, 1-based sentinels.
        let inf = f64::INFINITY;
        for buf in [&mut self.u, &mut self.v] {
            buf.clear();
            buf.resize(n + 1, 0.0);
        }
        for buf in [&mut self.owner, &mut self.way] {
            buf.clear();
            buf.resize(n + 1, 0);
        }
        let (u, v, owner, way) = (&mut self.u, &mut self.v, &mut self.owner, &mut self.way);
        for row in 1..=n {
            owner[0] = row;
            let mut col0 = 0;
            self.minv.clear();
            self.minv.resize(n + 1, inf);
            self.used.clear();
            self.used.resize(n + 1, false);
            let (minv, used) = (&mut self.minv, &mut self.used);
            loop {
                used[col0] = true;
                let r = owner[col0];
                let mut delta = inf;
                let mut col1 = 0;
                for c in 1..=n {
                    if !used[c] {
                        let cur = cost[(r - 1) * n + c - 1] - u[r] - v[c];
                        if cur < minv[c] {
                            minv[c] = cur;
                            way[c] = col0;
                        }
                        if minv[c] < delta {
                            delta = minv[c];
                            col1 = c;
                        }
                    }
                }
                for c in 0..=n {
                    if used[c] {
                        u[owner[c]] += delta;
                        v[c] -= delta;
                    } else {
                        minv[c] -= delta;
                    }
                }
                col0 = col1;
                if owner[col0] == 0 {
                    break;
                }
            }
            loop {
                let prev = way[col0];
                owner[col0] = owner[prev];
                col0 = prev;
                if col0 == 0 {
                    break;
                }
            }
        }
        for c in 1..=n {
            perm[owner[c] - 1] = c - 1;
        }
        perm.iter().enumerate().map(|(k, &c)| cost[k * n + c]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub coords: Vec<Point>,
    pub association: Association,
    pub objective: f64,
    /// Weighted squared residual of each target, summed over BSs.
    pub per_target_residuals: Vec<f64>,
    /// Candidates evaluated by the search.
    pub candidates: usize,
}

impl LocalizationResult {
    /// Objective recomputed from the coordinates and the association.
    pub fn recompute_objective(
        &self,
        range_sets: &[RangeSet],
        bs: &[Point],
        sigma: &SigmaMatrix,
    ) -> f64 {
        association_objective(&self.coords, &self.association, range_sets, bs, sigma)
    }

    /// CSV rows `trial,target,x_true,y_true,x_est,y_est,objective,association`.
    /// Estimates are listed in target order; `truth` is matched by index.
    pub fn to_csv_rows(&self, trial: usize, truth: &[Point]) -> String {
        let assoc = self.association.row_string();
        let mut out = String::new();
        for (k, p) in self.coords.iter().enumerate() {
            let t = truth.get(k).copied().unwrap_or(Point::new(f64::NAN, f64::NAN));
            out.push_str(&format!(
                "{trial},{},{:?},{:?},{:?},{:?},{:?},{assoc}\n",
                k + 1,
                t.x,
                t.y,
                p.x,
                p.y,
                self.objective
            ));
        }
        out
    }
}

pub const RESULTS_CSV_HEADER: &str = "trial,target,x_true,y_true,x_est,y_est,objective,association";

/// `Σ_k Σ_m (D_m(g_{m,k}) − ‖p_k − a_m‖)² / σ²_{m,k}`
pub fn association_objective(
    coords: &[Point],
    association: &Association,
    range_sets: &[RangeSet],
    bs: &[Point],
    sigma: &SigmaMatrix,
) -> f64 {
    coords
        .iter()
        .enumerate()
        .map(|(k, p)| {
            (0..bs.len())
                .map(|m| {
                    let e = range_sets[m].get(association.get(m, k)) - distance(*p, bs[m]);
                    e * e * sigma.weight(m, k)
                })
                .sum::<f64>()
        })
        .sum()
}

fn validate_inputs(
    range_sets: &[RangeSet],
    bs: &[Point],
    sigma: &SigmaMatrix,
) -> Result<usize, LocalizationError> {
    if bs.len() < 3 {
        return Err(LocalizationError::TooFewAnchors(bs.len()));
    }
    if range_sets.len() != bs.len() {
        return Err(LocalizationError::SizeMismatch(format!(
            "{} range sets for {} BSs",
            range_sets.len(),
            bs.len()
        )));
    }
    let k = range_sets[0].len();
    if range_sets.iter().any(|d| d.len() != k) {
        return Err(LocalizationError::SizeMismatch(
            "every BS must report the same number of ranges".into(),
        ));
    }
    if sigma.num_bs() != bs.len() || sigma.num_targets() != k {
        return Err(LocalizationError::SizeMismatch(format!(
            "sigma matrix is {}x{}, expected {}x{}",
            sigma.num_bs(),
            sigma.num_targets(),
            bs.len(),
            k
        )));
    }
    Ok(k)
}

/// Three-BS fit for target `k` from ranks `(k, g2, g3)`: linear start, then
/// weighted Gauss-Newton.
pub(crate) fn three_bs_fit(
    bs: &[Point],
    ranges: [f64; 3],
    weights: [f64; 3],
    cfg: &GaussNewtonConfig,
) -> GnResult {
    let anchors = &bs[..3];
    let init = linear_init(anchors, &ranges).unwrap_or_else(|_| centroid(anchors));
    gauss_newton(anchors, &ranges, &weights, init, cfg)
}

pub(crate) fn centroid(points: &[Point]) -> Point {
    let n = points.len() as f64;
    Point::new(
        points.iter().map(|p| p.x).sum::<f64>() / n,
        points.iter().map(|p| p.y).sum::<f64>() / n,
    )
}

/// Search over three-BS associations with per-BS Hungarian completion.
///
/// For every candidate in the margin-`delta0` feasible set: fit each target
/// to BSs 1–3, match every further BS's ranges to those fits by minimum total
/// absolute range mismatch, refit with all BSs, and score the sum of weighted
/// squared residuals. The first candidate with the smallest score wins.
pub fn ml_localize(
    range_sets: &[RangeSet],
    bs: &[Point],
    sigma: &SigmaMatrix,
    delta0: f64,
    cfg: &GaussNewtonConfig,
) -> Result<LocalizationResult, LocalizationError> {
    let k_count = validate_inputs(range_sets, bs, sigma)?;
    let m_count = bs.len();
    let candidates = feasible_associations_3bs(&range_sets[..3], &bs[..3], delta0)?;
    if candidates.is_empty() {
        return Err(LocalizationError::EmptyFeasibleSet { delta0 });
    }

    // Fits are pure functions of their rank keys, so they are memoized in
    // flat tables indexed by the ranks.
    let k2 = k_count * k_count;
    let mut three_cache: Vec<Option<GnResult>> = vec![None; k_count * k2];
    let full_key_space = (k_count as u128).pow(m_count as u32);
    let mut full_dense: Vec<Option<GnResult>> = if full_key_space <= 1 << 22 {
        vec![None; full_key_space as usize]
    } else {
        Vec::new()
    };
    let mut full_sparse: HashMap<u128, GnResult> = HashMap::new();
    let mut hungarian = HungarianScratch::default();
    let mut cost = vec![0.0; k2];
    let mut perm = vec![0; k_count];
    let mut fits3: Vec<GnResult> = Vec::with_capacity(k_count);
    let mut fits: Vec<GnResult> = Vec::with_capacity(k_count);
    let mut rows: Vec<Vec<usize>> = vec![vec![0; k_count]; m_count];
    let mut best: Option<(f64, Vec<GnResult>, Vec<Vec<usize>>)> = None;

    'candidates: for cand in &candidates {
        for m in 0..3 {
            rows[m].copy_from_slice(cand.row(m));
        }
        fits3.clear();
        for k in 0..k_count {
            let (g2, g3) = (rows[1][k], rows[2][k]);
            let slot = &mut three_cache[k * k2 + (g2 - 1) * k_count + (g3 - 1)];
            let fit = *slot.get_or_insert_with(|| {
                three_bs_fit(
                    bs,
                    [range_sets[0].get(k + 1), range_sets[1].get(g2), range_sets[2].get(g3)],
                    [sigma.weight(0, k), sigma.weight(1, k), sigma.weight(2, k)],
                    cfg,
                )
            });
            fits3.push(fit);
        }

        for m in 3..m_count {
            for (k, fit) in fits3.iter().enumerate() {
                let d = distance(fit.point, bs[m]);
                for g in 0..k_count {
                    cost[k * k_count + g] = (range_sets[m].get(g + 1) - d).abs();
                }
            }
            hungarian.solve(&cost, k_count, &mut perm);
            for (r, &c) in rows[m].iter_mut().zip(&perm) {
                *r = c + 1;
            }
        }

        // Γ sums non-negative terms, so a partial sum at or above the best
        // cannot produce a strictly smaller total.
        let bound = best.as_ref().map_or(f64::INFINITY, |(g, _, _)| *g);
        let mut gamma = 0.0;
        fits.clear();
        for k in 0..k_count {
            let fit = if m_count == 3 {
                fits3[k]
            } else {
                let mut key = k as u128;
                for row in &rows[1..] {
                    key = key * k_count as u128 + (row[k] - 1) as u128;
                }
                let compute = || full_fit(range_sets, bs, sigma, &rows, k, fits3[k].point, cfg);
                if full_dense.is_empty() {
                    *full_sparse.entry(key).or_insert_with(compute)
                } else {
                    *full_dense[(key % full_key_space) as usize].get_or_insert_with(compute)
                }
            };
            gamma += fit.objective;
            if !(gamma < bound) {
                continue 'candidates;
            }
            fits.push(fit);
        }
        match &mut best {
            Some((g, f, r)) => {
                *g = gamma;
                f.clone_from(&fits);
                r.clone_from(&rows);
            }
            None => best = Some((gamma, fits.clone(), rows.clone())),
        }
    }

    let (objective, fits, rows) = best.expect("non-empty candidate set");
    let association = Association::from_rows_unchecked(rows);
    Ok(LocalizationResult {
        coords: fits.iter().map(|f| f.point).collect(),
        association,
        objective,
        per_target_residuals: fits.iter().map(|f| f.objective).collect(),
        candidates: candidates.len(),
    })
}

/// All-BS fit of target `k` under the given rank rows, started at `init`.
pub(crate) fn full_fit(
    range_sets: &[RangeSet],
    bs: &[Point],
    sigma: &SigmaMatrix,
    rows: &[Vec<usize>],
    k: usize,
    init: Point,
    cfg: &GaussNewtonConfig,
) -> GnResult {
    let ranges: Vec<f64> = (0..bs.len()).map(|m| range_sets[m].get(rows[m][k])).collect();
    let weights: Vec<f64> = (0..bs.len()).map(|m| sigma.weight(m, k)).collect();
    gauss_newton(bs, &ranges, &weights, init, cfg)
}
