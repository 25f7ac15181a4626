//! Phase II foundations: exact trilateration, feasible three-BS associations
//! under triangle-inequality pruning, ghost detection with perfect ranges, and
//! the exhaustive-search reference solver.

use std::collections::HashMap;

use thiserror::Error;

use crate::localization::{
    full_fit, gauss_newton, linear_init, three_bs_fit, GaussNewtonConfig, GnResult,
    LocalizationError, LocalizationResult, SigmaMatrix,
};
use crate::ranging::RangeSet;
use crate::scenario::{are_collinear, distance, Point};

/// Default geometric tolerance in meters.
pub const EPS_GEO: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssociationError {
    #[error("anchors are collinear")]
    CollinearAnchors,
    #[error("no association reproduces the observed ranges")]
    NoFeasibleSolution,
    #[error("exhaustive search limited to K <= 4 and M <= 5, got K = {k}, M = {m}")]
    ComplexityGuard { k: usize, m: usize },
    #[error("{0}")]
    SizeMismatch(String),
    #[error("invalid association: {0}")]
    Invalid(String),
}

/// Rank matrix `g_{m,k}` (1-based). Row 1 is the identity and every row is a
/// permutation of `1..=K`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Association {
    rows: Vec<Vec<usize>>,
}

impl Association {
    pub fn new(rows: Vec<Vec<usize>>) -> Result<Self, AssociationError> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.first().is_some_and(|r| r.iter().enumerate().any(|(i, &g)| g != i + 1)) {
            return Err(AssociationError::Invalid("first row must be the identity".into()));
        }
        for (m, row) in rows.iter().enumerate() {
            let mut sorted = row.clone();
            sorted.sort_unstable();
            if sorted != (1..=k).collect::<Vec<_>>() {
                return Err(AssociationError::Invalid(format!(
                    "row {} is not a permutation of 1..={k}",
                    m + 1
                )));
            }
        }
        Ok(Self { rows })
    }

    pub(crate) fn from_rows_unchecked(rows: Vec<Vec<usize>>) -> Self {
        debug_assert!(Self::new(rows.clone()).is_ok());
        Self { rows }
    }

    pub fn num_bs(&self) -> usize {
        self.rows.len()
    }

    pub fn num_targets(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Rank of target `k` (0-based) at BS `m` (0-based).
    pub fn get(&self, m: usize, k: usize) -> usize {
        self.rows[m][k]
    }

    pub fn row(&self, m: usize) -> &[usize] {
        &self.rows[m]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    /// Rows joined as `1 2 3|2 3 1|...`.
    pub fn row_string(&self) -> String {
        self.rows
            .iter()
            .map(|r| r.iter().map(usize::to_string).collect::<Vec<_>>().join(" "))
            .collect::<Vec<_>>()
            .join("|")
    }
}

/// The common point of three circles, if one exists within `eps` meters.
pub fn trilaterate_exact(
    anchors: [Point; 3],
    ranges: [f64; 3],
    eps: f64,
) -> Result<Option<Point>, AssociationError> {
    if are_collinear(anchors[0], anchors[1], anchors[2]) {
        return Err(AssociationError::CollinearAnchors);
    }
    let p0 = linear_init(&anchors, &ranges).map_err(|_| AssociationError::CollinearAnchors)?;
    let residual =
        |p: Point| (0..3).map(|m| (distance(p, anchors[m]) - ranges[m]).abs()).fold(0.0, f64::max);
    let res0 = residual(p0);
    // The linear solve loses accuracy as the anchors approach a line, and
    // the reflection of the answer across that line then fits nearly as
    // well, sometimes within `eps`; refine from both sides and keep the
    // closer fit.
    let cfg = GaussNewtonConfig {
        max_iter: 50,
        ..Default::default()
    };
    let best = [p0, reflect_across_fit_line(&anchors, p0)]
        .into_iter()
        .map(|start| gauss_newton(&anchors, &ranges, &[1.0; 3], start, &cfg).point)
        .map(|p| (residual(p), p))
        .fold((res0, p0), |a, b| if b.0 < a.0 { b } else { a });
    Ok((best.0 <= eps).then_some(best.1))
}

/// Mirror image of `p` across the least-squares line through `anchors`.
fn reflect_across_fit_line(anchors: &[Point; 3], p: Point) -> Point {
    let cx = anchors.iter().map(|a| a.x).sum::<f64>() / 3.0;
    let cy = anchors.iter().map(|a| a.y).sum::<f64>() / 3.0;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for a in anchors {
        let (dx, dy) = (a.x - cx, a.y - cy);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let (uy, ux) = theta.sin_cos();
    let (dx, dy) = (p.x - cx, p.y - cy);
    let along = dx * ux + dy * uy;
    Point::new(cx + 2.0 * along * ux - dx, cy + 2.0 * along * uy - dy)
}

fn pair_ok(r1: f64, r2: f64, d: f64, delta0: f64) -> bool {
    let slack = delta0 + 1e-9 * d.max(r1).max(r2).max(1.0);
    (r1 - r2).abs() <= d + slack && r1 + r2 >= d - slack
}

/// Three-row associations whose every target passes the pairwise triangle
/// checks with margin `delta0`, in lexicographic order of (row 2, row 3).
pub fn feasible_associations_3bs(
    range_sets: &[RangeSet],
    bs: &[Point],
    delta0: f64,
) -> Result<Vec<Association>, AssociationError> {
    if range_sets.len() != 3 || bs.len() != 3 {
        return Err(AssociationError::SizeMismatch(
            "exactly three range sets and BSs are required".into(),
        ));
    }
    let k = range_sets[0].len();
    if range_sets.iter().any(|d| d.len() != k) {
        return Err(AssociationError::SizeMismatch(
            "range sets must have equal size".into(),
        ));
    }
    // table[(a, b)][i][j]: rank i at BS a and rank j at BS b can share a target.
    let table = |a: usize, b: usize| -> Vec<Vec<bool>> {
        let d = distance(bs[a], bs[b]);
        (1..=k)
            .map(|i| {
                (1..=k)
                    .map(|j| pair_ok(range_sets[a].get(i), range_sets[b].get(j), d, delta0))
                    .collect()
            })
            .collect()
    };
    let t12 = table(0, 1);
    let t13 = table(0, 2);
    let t23 = table(1, 2);

    let mut out = Vec::new();
    let mut row2 = Vec::with_capacity(k);
    let mut used2 = vec![false; k];
    enumerate_row2(k, &t12, &t13, &t23, &mut row2, &mut used2, &mut out);
    Ok(out)
}

fn enumerate_row2(
    k: usize,
    t12: &[Vec<bool>],
    t13: &[Vec<bool>],
    t23: &[Vec<bool>],
    row2: &mut Vec<usize>,
    used2: &mut [bool],
    out: &mut Vec<Association>,
) {
    let pos = row2.len();
    if pos == k {
        let mut row3 = Vec::with_capacity(k);
        let mut used3 = vec![false; k];
        enumerate_row3(k, t13, t23, row2, &mut row3, &mut used3, out);
        return;
    }
    for g in 0..k {
        if !used2[g] && t12[pos][g] {
            used2[g] = true;
            row2.push(g);
            enumerate_row2(k, t12, t13, t23, row2, used2, out);
            row2.pop();
            used2[g] = false;
        }
    }
}

fn enumerate_row3(
    k: usize,
    t13: &[Vec<bool>],
    t23: &[Vec<bool>],
    row2: &[usize],
    row3: &mut Vec<usize>,
    used3: &mut [bool],
    out: &mut Vec<Association>,
) {
    let pos = row3.len();
    if pos == k {
        out.push(Association::from_rows_unchecked(vec![
            (1..=k).collect(),
            row2.iter().map(|g| g + 1).collect(),
            row3.iter().map(|g| g + 1).collect(),
        ]));
        return;
    }
    for g in 0..k {
        if !used3[g] && t13[pos][g] && t23[row2[pos]][g] {
            used3[g] = true;
            row3.push(g);
            enumerate_row3(k, t13, t23, row2, row3, used3, out);
            row3.pop();
            used3[g] = false;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GhostSolution {
    pub coords: Vec<Point>,
    pub association: Association,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GhostReport {
    /// Number of distinct target configurations consistent with all ranges.
    pub tau: usize,
    pub solutions: Vec<GhostSolution>,
}

impl GhostReport {
    pub fn has_ghost(&self) -> bool {
        self.tau > 1
    }

    /// CSV with header `solution,target,x,y`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("solution,target,x,y\n");
        for (s, sol) in self.solutions.iter().enumerate() {
            for (k, p) in sol.coords.iter().enumerate() {
                out.push_str(&format!("{},{},{:?},{:?}\n", s + 1, k + 1, p.x, p.y));
            }
        }
        out
    }
}

fn same_configuration(a: &[Point], b: &[Point], eps: f64) -> bool {
    let mut used = vec![false; b.len()];
    a.len() == b.len()
        && a.iter().all(|p| {
            match (0..b.len()).find(|&j| !used[j] && distance(*p, b[j]) <= eps) {
                Some(j) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
}

/// Ghost check with perfect ranges.
///
/// Every association of BSs 1–3 that passes the exact triangle checks is
/// trilaterated target by target; a candidate counts when all `K` points
/// exist and reproduce the range set of every further BS. Candidates giving
/// the same point set count once.
pub fn detect_ghosts(
    range_sets: &[RangeSet],
    bs: &[Point],
    eps: f64,
) -> Result<GhostReport, AssociationError> {
    if bs.len() < 3 || range_sets.len() != bs.len() {
        return Err(AssociationError::SizeMismatch(format!(
            "need one range set per BS and at least 3 BSs (got {} sets, {} BSs)",
            range_sets.len(),
            bs.len()
        )));
    }
    let k = range_sets[0].len();
    if range_sets.iter().any(|d| d.len() != k) {
        return Err(AssociationError::SizeMismatch(
            "every BS must report the same number of ranges".into(),
        ));
    }
    let anchors = [bs[0], bs[1], bs[2]];
    if are_collinear(anchors[0], anchors[1], anchors[2]) {
        return Err(AssociationError::CollinearAnchors);
    }
    let candidates = feasible_associations_3bs(&range_sets[..3], &bs[..3], 0.0)?;
    let mut cache: HashMap<(usize, usize, usize), Option<Point>> = HashMap::new();
    let mut solutions: Vec<GhostSolution> = Vec::new();

    'candidates: for cand in candidates {
        let mut coords = Vec::with_capacity(k);
        for t in 0..k {
            let key = (t + 1, cand.get(1, t), cand.get(2, t));
            let point = match cache.get(&key) {
                Some(p) => *p,
                None => {
                    let p = trilaterate_exact(
                        anchors,
                        [
                            range_sets[0].get(key.0),
                            range_sets[1].get(key.1),
                            range_sets[2].get(key.2),
                        ],
                        eps,
                    )?;
                    cache.insert(key, p);
                    p
                }
            };
            match point {
                Some(p) => coords.push(p),
                None => continue 'candidates,
            }
        }
        let mut rows = cand.rows().to_vec();
        for (m, set) in range_sets.iter().enumerate().skip(3) {
            match match_ranks(&coords, bs[m], set, eps) {
                Some(row) => rows.push(row),
                None => continue 'candidates,
            }
        }
        if solutions.iter().all(|s| !same_configuration(&s.coords, &coords, eps)) {
            solutions.push(GhostSolution {
                coords,
                association: Association::from_rows_unchecked(rows),
            });
        }
    }
    if solutions.is_empty() {
        return Err(AssociationError::NoFeasibleSolution);
    }
    Ok(GhostReport {
        tau: solutions.len(),
        solutions,
    })
}

/// Checks that the distances from `coords` to `anchor` equal `set` as
/// multisets and returns the rank of each point.
fn match_ranks(coords: &[Point], anchor: Point, set: &RangeSet, eps: f64) -> Option<Vec<usize>> {
    let mut predicted: Vec<(f64, usize)> = coords
        .iter()
        .enumerate()
        .map(|(k, p)| (distance(*p, anchor), k))
        .collect();
    predicted.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut row = vec![0; coords.len()];
    for (g, (d, k)) in predicted.into_iter().enumerate() {
        if (d - set.get(g + 1)).abs() > eps {
            return None;
        }
        row[k] = g + 1;
    }
    Some(row)
}

/// Minimum of the summed weighted objective over all `(K!)^(M−1)`
/// associations.
///
/// Each target under each rank tuple is fitted from two starts, the linear
/// estimate over all BSs and the three-BS fit used by
/// [`crate::localization::ml_localize`], keeping the lower objective.
pub fn exhaustive_ml_oracle(
    range_sets: &[RangeSet],
    bs: &[Point],
    sigma: &SigmaMatrix,
    cfg: &GaussNewtonConfig,
) -> Result<LocalizationResult, LocalizationError> {
    let m_count = bs.len();
    let k_count = range_sets.first().map_or(0, RangeSet::len);
    if k_count > 4 || m_count > 5 {
        return Err(AssociationError::ComplexityGuard {
            k: k_count,
            m: m_count,
        }
        .into());
    }
    if m_count < 3 || range_sets.len() != m_count || range_sets.iter().any(|d| d.len() != k_count) {
        return Err(LocalizationError::SizeMismatch(
            "need one range set of size K per BS and at least 3 BSs".into(),
        ));
    }
    if sigma.num_bs() != m_count || sigma.num_targets() != k_count {
        return Err(LocalizationError::SizeMismatch("sigma matrix shape".into()));
    }

    let mut fits: HashMap<(usize, Vec<usize>), GnResult> = HashMap::new();
    let mut fit = |k: usize, rows: &[Vec<usize>]| -> GnResult {
        let key: Vec<usize> = rows[1..].iter().map(|r| r[k]).collect();
        *fits.entry((k, key)).or_insert_with(|| {
            let ranges: Vec<f64> = (0..m_count).map(|m| range_sets[m].get(rows[m][k])).collect();
            let w3 = [sigma.weight(0, k), sigma.weight(1, k), sigma.weight(2, k)];
            let start3 = three_bs_fit(bs, [ranges[0], ranges[1], ranges[2]], w3, cfg);
            let via_three = if m_count == 3 {
                start3
            } else {
                full_fit(range_sets, bs, sigma, rows, k, start3.point, cfg)
            };
            let direct = match linear_init(bs, &ranges) {
                Ok(init) => full_fit(range_sets, bs, sigma, rows, k, init, cfg),
                Err(_) => via_three,
            };
            if direct.objective < via_three.objective {
                direct
            } else {
                via_three
            }
        })
    };

    let perms = permutations(k_count);
    let mut best: Option<(f64, Vec<GnResult>, Vec<Vec<usize>>)> = None;
    let mut count = 0usize;
    let mut idx = vec![0usize; m_count - 1];
    loop {
        let mut rows: Vec<Vec<usize>> = vec![(1..=k_count).collect()];
        rows.extend(idx.iter().map(|&i| perms[i].clone()));
        let per: Vec<GnResult> = (0..k_count).map(|k| fit(k, &rows)).collect();
        let total: f64 = per.iter().map(|f| f.objective).sum();
        count += 1;
        if best.as_ref().map_or(true, |(b, _, _)| total < *b) {
            best = Some((total, per, rows));
        }
        // Odometer over the (M−1)-tuple of permutation indices.
        let mut pos = idx.len();
        loop {
            if pos == 0 {
                let (objective, per, rows) = best.expect("at least one association");
                return Ok(LocalizationResult {
                    coords: per.iter().map(|f| f.point).collect(),
                    association: Association::from_rows_unchecked(rows),
                    objective,
                    per_target_residuals: per.iter().map(|f| f.objective).collect(),
                    candidates: count,
                });
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < perms.len() {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// Permutations of `1..=k` in lexicographic order.
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(k: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for g in 1..=k {
            if !used[g - 1] {
                used[g - 1] = true;
                cur.push(g);
                rec(k, cur, used, out);
                cur.pop();
                used[g - 1] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(k, &mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearly_collinear_leading_bss_keep_the_true_solution() {
        let sc = crate::scenario::Scenario::from_kv(
            "region = 200.0\nm = 4\nk = 5\n\
             bs = 19.576883045675856,-52.83338700870325; -47.460372740812524,39.7749422110989; -78.99785882300802,83.36934820323978; 83.75897753619552,23.52678159358524\n\
             targets = -65.73136146934034,-2.629077800686659; -63.03889319301764,65.53624525296007; 54.96233359326729,-50.99010647118372; 55.84400197536209,-82.51193277039398; 7.083678742186791,-36.25818133051919\n",
        )
        .unwrap();
        let sets: Vec<RangeSet> = (0..4)
            .map(|m| RangeSet::from_ranges(&(0..5).map(|k| sc.distance(m, k)).collect::<Vec<_>>()))
            .collect();
        let report = detect_ghosts(&sets, sc.bs(), EPS_GEO).unwrap();
        assert_eq!(report.tau, 1);
        for t in sc.targets() {
            assert!(report.solutions[0].coords.iter().any(|p| distance(*p, *t) < 1e-6));
        }
    }
    use crate::localization::ml_localize;

    fn pts(v: &[(f64, f64)]) -> Vec<Point> {
        v.iter().map(|&p| p.into()).collect()
    }

    fn perfect(bs: &[Point], targets: &[Point]) -> Vec<RangeSet> {
        bs.iter()
            .map(|a| {
                RangeSet::from_ranges(&targets.iter().map(|t| distance(*a, *t)).collect::<Vec<_>>())
            })
            .collect()
    }

    fn example1_bs() -> [Point; 3] {
        [Point::new(0.0, 3.0), Point::new(5.0, 0.0), Point::new(0.0, -4.0)]
    }

    #[test]
    fn trilateration_examples() {
        let a = example1_bs();
        let p = trilaterate_exact(a, [29f64.sqrt(), 13f64.sqrt(), 8f64.sqrt()], EPS_GEO)
            .unwrap()
            .unwrap();
        assert!(distance(p, Point::new(2.0, -2.0)) < 1e-9);
        let g = trilaterate_exact(a, [29f64.sqrt(), 53f64.sqrt(), 8f64.sqrt()], EPS_GEO)
            .unwrap()
            .unwrap();
        assert!(distance(g, Point::new(-2.0, -2.0)) < 1e-9);
        let far = [Point::new(0.0, 0.0), Point::new(100.0, 0.0), Point::new(0.0, 100.0)];
        assert_eq!(trilaterate_exact(far, [1.0, 1.0, 1.0], EPS_GEO).unwrap(), None);
        let line = [Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(2.0, 0.0)];
        assert_eq!(
            trilaterate_exact(line, [1.0, 1.0, 1.0], EPS_GEO),
            Err(AssociationError::CollinearAnchors)
        );
    }

    #[test]
    fn example1_feasible_associations() {
        let bs = example1_bs();
        let sets = perfect(&bs, &pts(&[(2.0, -2.0), (-2.0, 2.0)]));
        // √5 + 2√2 < 7 = |BS1 BS3|, so pairing those two ranges is pruned.
        let h = feasible_associations_3bs(&sets, &bs, 0.0).unwrap();
        let rows: Vec<String> = h.iter().map(Association::row_string).collect();
        assert_eq!(rows, vec!["1 2|1 2|2 1", "1 2|2 1|2 1"]);
        let all = feasible_associations_3bs(&sets, &bs, f64::INFINITY).unwrap();
        let rows: Vec<String> = all.iter().map(Association::row_string).collect();
        assert_eq!(rows, vec!["1 2|1 2|1 2", "1 2|1 2|2 1", "1 2|2 1|1 2", "1 2|2 1|2 1"]);
    }

    #[test]
    fn unbounded_margin_keeps_all_associations() {
        let bs = example1_bs();
        let sets = perfect(&bs, &pts(&[(2.0, -2.0), (-2.0, 2.0), (1.0, 1.0)]));
        assert_eq!(feasible_associations_3bs(&sets, &bs, f64::INFINITY).unwrap().len(), 36);
        let one = perfect(&bs, &pts(&[(1.0, 1.0)]));
        let h = feasible_associations_3bs(&one, &bs, 0.0).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].row_string(), "1|1|1");
    }

    #[test]
    fn example1_has_ghost() {
        let bs = example1_bs();
        let sets = perfect(&bs, &pts(&[(2.0, -2.0), (-2.0, 2.0)]));
        let report = detect_ghosts(&sets, &bs, EPS_GEO).unwrap();
        assert_eq!(report.tau, 2);
        assert!(report.has_ghost());
        let configs = [pts(&[(2.0, -2.0), (-2.0, 2.0)]), pts(&[(-2.0, -2.0), (2.0, 2.0)])];
        for c in &configs {
            assert!(report.solutions.iter().any(|s| same_configuration(&s.coords, c, 1e-6)));
        }
        assert!(report.to_csv().starts_with("solution,target,x,y\n1,1,"));
    }

    #[test]
    fn example2_has_no_ghost() {
        let bs = example1_bs();
        let targets = pts(&[(-1.0, 2.0), (2.0, -1.0)]);
        let report = detect_ghosts(&perfect(&bs, &targets), &bs, EPS_GEO).unwrap();
        assert_eq!(report.tau, 1);
        assert!(same_configuration(&report.solutions[0].coords, &targets, 1e-6));
    }

    #[test]
    fn inconsistent_fourth_bs_gives_no_solution() {
        let bs = pts(&[(0.0, 3.0), (5.0, 0.0), (0.0, -4.0), (7.0, 7.0)]);
        let mut sets = perfect(&bs, &pts(&[(1.0, 1.0)]));
        sets[3] = RangeSet::from_ranges(&[1.0]);
        assert_eq!(detect_ghosts(&sets, &bs, EPS_GEO), Err(AssociationError::NoFeasibleSolution));
    }

    #[test]
    fn association_validation() {
        assert!(Association::new(vec![vec![1, 2], vec![2, 1]]).is_ok());
        assert!(Association::new(vec![vec![2, 1], vec![2, 1]]).is_err());
        assert!(Association::new(vec![vec![1, 2], vec![1, 1]]).is_err());
    }

    #[test]
    fn oracle_examples() {
        let bs = example1_bs().to_vec();
        let targets = pts(&[(-1.0, 2.0), (2.0, -1.0)]);
        let sets = perfect(&bs, &targets);
        let sigma = SigmaMatrix::uniform(3, 2, 0.45);
        let res = exhaustive_ml_oracle(&sets, &bs, &sigma, &Default::default()).unwrap();
        assert!(res.objective < 1e-12);
        assert!(same_configuration(&res.coords, &targets, 1e-6));
        assert_eq!(res.candidates, 4);

        let big = vec![RangeSet::from_ranges(&[1.0; 5]); 3];
        assert!(matches!(
            exhaustive_ml_oracle(&big, &bs, &SigmaMatrix::uniform(3, 5, 1.0), &Default::default()),
            Err(LocalizationError::Association(AssociationError::ComplexityGuard { .. }))
        ));
    }

    #[test]
    fn oracle_single_target_matches_search() {
        let bs = pts(&[(0.0, 3.0), (5.0, 0.0), (0.0, -4.0), (-6.0, 1.0)]);
        let sets: Vec<RangeSet> = [3.1, 4.9, 5.2, 7.0].iter().map(|&d| RangeSet::from_ranges(&[d])).collect();
        let sigma = SigmaMatrix::uniform(4, 1, 0.5);
        let a = exhaustive_ml_oracle(&sets, &bs, &sigma, &Default::default()).unwrap();
        let b = ml_localize(&sets, &bs, &sigma, f64::INFINITY, &Default::default()).unwrap();
        assert!(a.objective <= b.objective);
        assert!(distance(a.coords[0], b.coords[0]) < 1e-6);
    }

    #[test]
    fn permutations_are_lexicographic() {
        assert_eq!(
            permutations(3),
            vec![vec![1, 2, 3], vec![1, 3, 2], vec![2, 1, 3], vec![2, 3, 1], vec![3, 1, 2], vec![3, 2, 1]]
        );
    }
}
