//! Phase I: sparse channel estimation and range-set extraction.
//!
//! Each BS solves a complex LASSO
//!
//! ```text
//! minimize ½‖ỹ − A h‖₂² + λ‖h‖₁,   A = √p diag(s̃) G̃
//! ```
//!
//! over its `L` delay taps, thresholds the estimate into a support, and maps
//! each supported tap to the midpoint of its delay bin.
//!
//! The solver never forms `A`. With sub-carrier weights `w_n = |s_n|²` the
//! Gram matrix `AᴴA` is Hermitian Toeplitz, `(AᴴA)_{l,l'} = p Σ_n w_n e^{j2πn(l−l')/N}`,
//! so it is applied through a circulant embedding and `Aᴴỹ` is a single
//! length-`N` FFT.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::ofdm::Observation;
use crate::scenario::{tap_width_for_bandwidth, OfdmParams, TapVector};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RangingError {
    #[error("LASSO stopped after {iterations} iterations with KKT residual {kkt_residual:e}")]
    NonConvergence {
        iterations: usize,
        kkt_residual: f64,
        estimate: Box<LassoSolution>,
    },
    #[error("regularization weight must be finite and non-negative, got {0}")]
    InvalidLambda(f64),
    #[error("sensing matrix is rank deficient")]
    Degenerate,
    #[error("observation does not match the sensing operator: {0}")]
    Mismatch(String),
    #[error("range-set CSV line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Fast `AᴴA` / `Aᴴy` for one BS's sub-carrier set.
#[derive(Clone)]
pub struct SensingOperator {
    max_paths: usize,
    n_subcarriers: usize,
    tx_power: f64,
    subcarriers: Vec<usize>,
    /// First column of the Toeplitz Gram, `t_k = (AᴴA)_{k+1,1}`.
    gram_column: Vec<Complex64>,
    embed_spectrum: Vec<Complex64>,
    embed_fwd: Arc<dyn Fft<f64>>,
    embed_inv: Arc<dyn Fft<f64>>,
    corr_inv: Arc<dyn Fft<f64>>,
    cholesky: Option<Cholesky<Complex64, Dyn>>,
    lipschitz: f64,
}

impl std::fmt::Debug for SensingOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SensingOperator")
            .field("max_paths", &self.max_paths)
            .field("subcarriers", &self.subcarriers.len())
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl SensingOperator {
    /// Operator for sub-carriers `subcarriers` with per-sub-carrier pilot
    /// power `weights` (all ones for unit-modulus pilots).
    pub fn new(
        n_subcarriers: usize,
        max_paths: usize,
        tx_power: f64,
        subcarriers: &[usize],
        weights: &[f64],
    ) -> Self {
        assert_eq!(subcarriers.len(), weights.len());
        let n = n_subcarriers;
        let roots: Vec<Complex64> = (0..n)
            .map(|j| Complex64::from_polar(1.0, 2.0 * PI * j as f64 / n as f64))
            .collect();
        let gram_column: Vec<Complex64> = (0..max_paths)
            .map(|k| {
                let s: Complex64 = subcarriers
                    .iter()
                    .zip(weights)
                    .map(|(&sc, &w)| roots[(sc * k) % n] * w)
                    .sum();
                s * tx_power
            })
            .collect();

        let size = (2 * max_paths).next_power_of_two().max(2);
        let mut planner = FftPlanner::new();
        let embed_fwd = planner.plan_fft_forward(size);
        let embed_inv = planner.plan_fft_inverse(size);
        let mut embed = vec![ZERO; size];
        embed[..max_paths].copy_from_slice(&gram_column);
        for k in 1..max_paths {
            embed[size - k] = gram_column[k].conj();
        }
        embed_fwd.process(&mut embed);
        let scale = 1.0 / size as f64;
        embed.iter_mut().for_each(|v| *v *= scale);

        let mut op = Self {
            max_paths,
            n_subcarriers,
            tx_power,
            subcarriers: subcarriers.to_vec(),
            gram_column,
            embed_spectrum: embed,
            embed_fwd,
            embed_inv,
            corr_inv: planner.plan_fft_inverse(n),
            cholesky: None,
            lipschitz: 0.0,
        };
        op.cholesky = Cholesky::new(op.gram_dense());
        op.lipschitz = op.estimate_lipschitz();
        op
    }

    /// Operator matching `obs` (uses its pilot magnitudes).
    pub fn for_observation(obs: &Observation) -> Self {
        let weights: Vec<f64> = obs.pilots.iter().map(|s| s.norm_sqr()).collect();
        Self::new(
            obs.n_subcarriers,
            obs.max_paths,
            obs.tx_power,
            &obs.subcarriers,
            &weights,
        )
    }

    /// Operator for BS `bs` with unit-modulus pilots.
    pub fn for_bs(params: &OfdmParams, bs: usize) -> Self {
        let set = params.allocation.set(bs);
        Self::new(
            params.n_subcarriers,
            params.max_paths,
            params.tx_power,
            set,
            &vec![1.0; set.len()],
        )
    }

    /// True when `obs` was produced with this operator's sub-carriers,
    /// power and unit-modulus pilots.
    pub fn matches(&self, obs: &Observation) -> bool {
        obs.subcarriers == self.subcarriers
            && obs.max_paths == self.max_paths
            && obs.n_subcarriers == self.n_subcarriers
            && (obs.tx_power - self.tx_power).abs() <= 1e-12 * self.tx_power.abs()
            && obs.pilots.iter().all(|s| (s.norm_sqr() - 1.0).abs() < 1e-9)
    }

    pub fn max_paths(&self) -> usize {
        self.max_paths
    }

    pub fn num_measurements(&self) -> usize {
        self.subcarriers.len()
    }

    /// Upper bound on the largest eigenvalue of `AᴴA`.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// `‖a_l‖²`, identical for every column.
    pub fn column_norm_sqr(&self) -> f64 {
        self.gram_column.first().map_or(0.0, |t| t.re)
    }

    pub fn gram_dense(&self) -> DMatrix<Complex64> {
        let t = &self.gram_column;
        DMatrix::from_fn(self.max_paths, self.max_paths, |i, j| {
            if i >= j {
                t[i - j]
            } else {
                t[j - i].conj()
            }
        })
    }

    /// `out = AᴴA x`
    pub fn gram_apply(&self, x: &[Complex64], out: &mut [Complex64]) {
        let size = self.embed_spectrum.len();
        let mut buf = vec![ZERO; size];
        buf[..self.max_paths].copy_from_slice(x);
        self.embed_fwd.process(&mut buf);
        buf.iter_mut()
            .zip(&self.embed_spectrum)
            .for_each(|(v, c)| *v *= c);
        self.embed_inv.process(&mut buf);
        out.copy_from_slice(&buf[..self.max_paths]);
    }

    /// `Aᴴ ỹ`
    pub fn correlate(&self, obs: &Observation) -> Vec<Complex64> {
        let mut v = vec![ZERO; self.n_subcarriers];
        for ((&sc, y), s) in obs.subcarriers.iter().zip(&obs.y_tilde).zip(&obs.pilots) {
            v[sc] = s.conj() * y;
        }
        self.corr_inv.process(&mut v);
        let amp = obs.tx_power.sqrt();
        v.truncate(self.max_paths);
        v.iter_mut().for_each(|x| *x *= amp);
        v
    }

    /// Least-squares solution of `AᴴA h = b`.
    pub fn solve_normal(&self, b: &[Complex64]) -> Option<Vec<Complex64>> {
        let chol = self.cholesky.as_ref()?;
        Some(chol.solve(&DVector::from_column_slice(b)).as_slice().to_vec())
    }

    fn estimate_lipschitz(&self) -> f64 {
        // Power iteration; the 5% head-room absorbs the remaining gap and
        // backtracking covers any underestimate.
        let l = self.max_paths;
        if l == 0 {
            return 0.0;
        }
        let mut x: Vec<Complex64> = (0..l)
            .map(|i| Complex64::from_polar(1.0, 0.7 * i as f64))
            .collect();
        let mut y = vec![ZERO; l];
        let mut eig = 0.0;
        for _ in 0..60 {
            let norm = x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            x.iter_mut().for_each(|v| *v /= norm);
            self.gram_apply(&x, &mut y);
            eig = y.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            std::mem::swap(&mut x, &mut y);
        }
        eig * 1.05
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoConfig {
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            tol: 1e-8,
            max_iter: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoSolution {
    pub estimate: TapVector,
    pub iterations: usize,
    pub objective: f64,
    /// Largest KKT violation divided by `‖Aᴴỹ‖∞`.
    pub kkt_residual: f64,
    /// Objective of the accepted iterate after every iteration.
    pub objective_trace: Vec<f64>,
}

/// LASSO problem data in Gram form.
pub struct LassoProblem<'a> {
    op: &'a SensingOperator,
    correlation: Vec<Complex64>,
    y_norm_sqr: f64,
}

impl<'a> LassoProblem<'a> {
    pub fn new(obs: &Observation, op: &'a SensingOperator) -> Self {
        Self {
            op,
            correlation: op.correlate(obs),
            y_norm_sqr: obs.y_tilde.iter().map(|v| v.norm_sqr()).sum(),
        }
    }

    pub fn correlation(&self) -> &[Complex64] {
        &self.correlation
    }

    /// `½‖ỹ − Ah‖²` given `gh = AᴴA h`.
    fn smooth(&self, h: &[Complex64], gh: &[Complex64]) -> f64 {
        let mut cross = 0.0;
        let mut quad = 0.0;
        for ((hv, b), g) in h.iter().zip(&self.correlation).zip(gh) {
            cross += (hv.conj() * b).re;
            quad += (hv.conj() * g).re;
        }
        (0.5 * self.y_norm_sqr - cross + 0.5 * quad).max(0.0)
    }

    /// Full objective `½‖ỹ − Ah‖² + λ‖h‖₁`.
    pub fn objective(&self, h: &[Complex64], lambda: f64) -> f64 {
        let mut gh = vec![ZERO; h.len()];
        self.op.gram_apply(h, &mut gh);
        self.smooth(h, &gh) + lambda * l1(h)
    }

    /// Normalized KKT residual of `h`, given `gh = AᴴA h`.
    fn kkt(&self, h: &[Complex64], gh: &[Complex64], lambda: f64) -> f64 {
        let scale = self
            .correlation
            .iter()
            .map(|b| b.norm())
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        let worst = h
            .iter()
            .zip(&self.correlation)
            .zip(gh)
            .map(|((hv, b), g)| {
                let c = b - g;
                let mag = hv.norm();
                if mag > 0.0 {
                    (c - hv * (lambda / mag)).norm()
                } else {
                    (c.norm() - lambda).max(0.0)
                }
            })
            .fold(0.0, f64::max);
        worst / scale
    }

    /// Normalized KKT residual of an arbitrary point.
    pub fn kkt_residual(&self, h: &[Complex64], lambda: f64) -> f64 {
        let mut gh = vec![ZERO; h.len()];
        self.op.gram_apply(h, &mut gh);
        self.kkt(h, &gh, lambda)
    }

    /// Monotone FISTA with backtracking.
    pub fn solve(&self, cfg: &LassoConfig) -> Result<LassoSolution, RangingError> {
        let lambda = cfg.lambda;
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(RangingError::InvalidLambda(lambda));
        }
        let l = self.op.max_paths;
        let mut x = vec![ZERO; l];
        let mut gx = vec![ZERO; l];
        let mut fx = self.smooth(&x, &gx) + lambda * l1(&x);
        let f_start = fx;
        let mut trace = vec![fx];
        let mut kkt = self.kkt(&x, &gx, lambda);
        if kkt <= cfg.tol {
            return Ok(self.finish(x, 0, fx, kkt, trace));
        }

        let mut y = x.clone();
        let mut gy = gx.clone();
        let mut t = 1.0_f64;
        let mut lip = self.op.lipschitz.max(f64::MIN_POSITIVE);
        let mut z = vec![ZERO; l];
        let mut gz = vec![ZERO; l];
        let mut grad = vec![ZERO; l];

        for iter in 1..=cfg.max_iter {
            for ((g, a), b) in grad.iter_mut().zip(&gy).zip(&self.correlation) {
                *g = a - b;
            }
            let mut fy = self.smooth(&y, &gy);
            let mut fz;
            let mut refreshed = false;
            loop {
                let thresh = lambda / lip;
                for ((zv, yv), g) in z.iter_mut().zip(&y).zip(&grad) {
                    *zv = soft_threshold(yv - g / lip, thresh);
                }
                self.op.gram_apply(&z, &mut gz);
                fz = self.smooth(&z, &gz);
                let mut lin = 0.0;
                let mut dist = 0.0;
                for ((zv, yv), g) in z.iter().zip(&y).zip(&grad) {
                    let d = zv - yv;
                    lin += (g.conj() * d).re;
                    dist += d.norm_sqr();
                }
                let bound = fy + lin + 0.5 * lip * dist;
                if fz <= bound + 1e-12 * bound.abs().max(1e-300) {
                    break;
                }
                if !refreshed {
                    // The extrapolated Gram product drifts; rebuild it before
                    // blaming the step size.
                    refreshed = true;
                    self.op.gram_apply(&y, &mut gy);
                    for ((g, a), b) in grad.iter_mut().zip(&gy).zip(&self.correlation) {
                        *g = a - b;
                    }
                    fy = self.smooth(&y, &gy);
                    continue;
                }
                lip *= 2.0;
                if !lip.is_finite() {
                    z.copy_from_slice(&x);
                    gz.copy_from_slice(&gx);
                    fz = self.smooth(&x, &gx);
                    break;
                }
            }
            let fz_total = fz + lambda * l1(&z);
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let fx_prev = fx;
            let accept = fz_total <= fx;
            // y = x_new + (t/t_next)(z - x_new) + ((t-1)/t_next)(x_new - x_old)
            if accept {
                for i in 0..l {
                    let x_new = z[i];
                    y[i] = x_new + (x_new - x[i]) * ((t - 1.0) / t_next);
                    gy[i] = gz[i] + (gz[i] - gx[i]) * ((t - 1.0) / t_next);
                }
                x.copy_from_slice(&z);
                gx.copy_from_slice(&gz);
                fx = fz_total;
            } else {
                for i in 0..l {
                    y[i] = x[i] + (z[i] - x[i]) * (t / t_next);
                    gy[i] = gx[i] + (gz[i] - gx[i]) * (t / t_next);
                }
            }
            t = t_next;
            trace.push(fx);
            kkt = self.kkt(&x, &gx, lambda);
            // An exact fit drives the objective to zero, so the change is
            // measured against a floor tied to the starting objective.
            let rel_change = (fx_prev - fx).abs() / fx.abs().max(1e-6 * f_start).max(f64::MIN_POSITIVE);
            if kkt <= cfg.tol && rel_change <= cfg.tol {
                let (x, fx, kkt) = self.polish(x, fx, kkt, lambda);
                if trace.last().is_some_and(|&f| fx < f) {
                    trace.push(fx);
                }
                return Ok(self.finish(x, iter, fx, kkt, trace));
            }
            if iter % 200 == 0 {
                // Slow progress usually means an ill-conditioned operator; an
                // exact solve on the current support can finish the job.
                let (px, pf, pk) = self.polish(x.clone(), fx, kkt, lambda);
                if px != x {
                    x = px;
                    fx = pf;
                    kkt = pk;
                    t = 1.0;
                    trace.push(fx);
                    self.op.gram_apply(&x, &mut gx);
                    y.copy_from_slice(&x);
                    gy.copy_from_slice(&gx);
                } else {
                    // Resynchronize the extrapolated Gram product with a fresh one.
                    self.op.gram_apply(&y, &mut gy);
                    self.op.gram_apply(&x, &mut gx);
                }
            }
        }
        let solution = self.finish(x, cfg.max_iter, fx, kkt, trace);
        Err(RangingError::NonConvergence {
            iterations: cfg.max_iter,
            kkt_residual: kkt,
            estimate: Box::new(solution),
        })
    }

    /// Solves the optimality conditions exactly on the current support with
    /// the phases frozen, `G_SS h_S = b_S − λ h_S/|h_S|`. The refined point
    /// is kept only if it keeps the phases, lowers the objective and
    /// tightens the KKT residual.
    fn polish(
        &self,
        mut x: Vec<Complex64>,
        mut fx: f64,
        mut kkt: f64,
        lambda: f64,
    ) -> (Vec<Complex64>, f64, f64) {
        let l = x.len();
        let gram = self.op.gram_dense();
        for _ in 0..3 {
            let support: Vec<usize> = (0..l).filter(|&i| x[i].norm() > 0.0).collect();
            if support.is_empty() {
                break;
            }
            let s = support.len();
            let sub = DMatrix::from_fn(s, s, |i, j| gram[(support[i], support[j])]);
            let Some(chol) = Cholesky::new(sub) else {
                break;
            };
            let rhs = DVector::from_fn(s, |i, _| {
                let k = support[i];
                self.correlation[k] - x[k] * (lambda / x[k].norm())
            });
            let z = chol.solve(&rhs);
            if lambda > 0.0
                && support
                .iter()
                .zip(z.iter())
                .any(|(&k, zk)| (x[k].conj() * zk).re <= 0.0)
            {
                break;
            }
            let mut cand = vec![ZERO; l];
            for (&k, zk) in support.iter().zip(z.iter()) {
                cand[k] = *zk;
            }
            let mut gc = vec![ZERO; l];
            self.op.gram_apply(&cand, &mut gc);
            let fc = self.smooth(&cand, &gc) + lambda * l1(&cand);
            let kc = self.kkt(&cand, &gc, lambda);
            if fc <= fx && kc <= kkt {
                x = cand;
                fx = fc;
                kkt = kc;
            } else {
                break;
            }
        }
        (x, fx, kkt)
    }

    fn finish(
        &self,
        x: Vec<Complex64>,
        iterations: usize,
        objective: f64,
        kkt_residual: f64,
        objective_trace: Vec<f64>,
    ) -> LassoSolution {
        LassoSolution {
            estimate: TapVector::from_vec(x),
            iterations,
            objective,
            kkt_residual,
            objective_trace,
        }
    }
}

fn l1(h: &[Complex64]) -> f64 {
    h.iter().map(|v| v.norm()).sum()
}

/// Complex soft-thresholding: shrinks the magnitude, keeps the phase.
pub fn soft_threshold(v: Complex64, t: f64) -> Complex64 {
    let mag = v.norm();
    if mag <= t {
        ZERO
    } else {
        v * ((mag - t) / mag)
    }
}

/// Solves the LASSO for one observation.
pub fn lasso_estimate(
    obs: &Observation,
    op: &SensingOperator,
    cfg: &LassoConfig,
) -> Result<LassoSolution, RangingError> {
    if obs.subcarriers != op.subcarriers || obs.max_paths != op.max_paths {
        return Err(RangingError::Mismatch(
            "sub-carrier set or tap count differs".into(),
        ));
    }
    LassoProblem::new(obs, op).solve(cfg)
}

/// Closed-form least-squares taps `(AᴴA)⁻¹Aᴴỹ`.
pub fn least_squares_estimate(
    obs: &Observation,
    op: &SensingOperator,
) -> Result<TapVector, RangingError> {
    let b = op.correlate(obs);
    op.solve_normal(&b)
        .map(TapVector::from_vec)
        .ok_or(RangingError::Degenerate)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseEstimate {
    /// Estimated `σ_z²`.
    pub noise_power: f64,
    /// Standard deviation of one entry of `Aᴴz̃`.
    pub correlation_std: f64,
    /// Approximate standard deviation of one estimated tap, `σ_z / ‖a_l‖`.
    pub tap_std: f64,
}

/// Noise level of an observation.
///
/// Over-determined systems (`|N_m| > L`) use the least-squares residual
/// `‖ỹ‖² − Re(bᴴĥ_LS)` over `|N_m| − L` degrees of freedom. Otherwise the
/// median correlation magnitude is used, assuming most taps are empty.
pub fn estimate_noise(obs: &Observation, op: &SensingOperator) -> NoiseEstimate {
    let b = op.correlate(obs);
    let col = op.column_norm_sqr().max(f64::MIN_POSITIVE);
    let rows = obs.y_tilde.len();
    let noise_power = match (rows > op.max_paths).then(|| op.solve_normal(&b)).flatten() {
        Some(h) => {
            let y2: f64 = obs.y_tilde.iter().map(|v| v.norm_sqr()).sum();
            let explained: f64 = b.iter().zip(&h).map(|(bv, hv)| (bv.conj() * hv).re).sum();
            ((y2 - explained) / (rows - op.max_paths) as f64).max(0.0)
        }
        None => {
            let mut mags: Vec<f64> = b.iter().map(|v| v.norm()).collect();
            mags.sort_by(f64::total_cmp);
            let median = mags.get(mags.len() / 2).copied().unwrap_or(0.0);
            median * median / std::f64::consts::LN_2 / col
        }
    };
    NoiseEstimate {
        noise_power,
        correlation_std: (noise_power * col).sqrt(),
        tap_std: (noise_power / col).sqrt(),
    }
}

/// Universal threshold `σ_b √(2 ln L)` on the correlation scale.
pub fn default_lambda(noise: &NoiseEstimate, max_paths: usize) -> f64 {
    noise.correlation_std * (2.0 * (max_paths.max(2) as f64).ln()).sqrt()
}

/// Support rule `|ĥ_l| > max(abs_floor, rel · max|ĥ|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub abs_floor: f64,
    pub rel: f64,
}

/// 1-based taps whose magnitude exceeds the threshold.
pub fn detect_support(h_hat: &TapVector, rule: Threshold) -> Vec<usize> {
    let tau = rule.abs_floor.max(rule.rel * h_hat.max_abs());
    h_hat
        .as_slice()
        .iter()
        .enumerate()
        .filter(|(_, v)| v.norm() > tau)
        .map(|(i, _)| i + 1)
        .collect()
}

/// Midpoint of delay bin `l`: `(l − 1)c₀/(2NΔf) + c₀/(4NΔf)`.
pub fn range_midpoint(l: usize, params: &OfdmParams) -> f64 {
    midpoint_for_width(l, params.tap_width())
}

pub fn midpoint_for_width(l: usize, width: f64) -> f64 {
    assert!(l >= 1, "taps are 1-based");
    (l as f64 - 0.5) * width
}

/// Worst-case error `c₀/(4B)` of the midpoint estimator at bandwidth `B`.
pub fn range_resolution_for_bandwidth(bandwidth: f64) -> f64 {
    tap_width_for_bandwidth(bandwidth) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeEntry {
    pub range: f64,
    /// Tap that produced this range, when it came from Phase I.
    pub tap: Option<usize>,
}

/// Unlabelled ranges seen by one BS, addressable by descending rank.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RangeSet {
    entries: Vec<RangeEntry>,
}

impl RangeSet {
    fn from_entries(mut entries: Vec<RangeEntry>) -> Self {
        entries.sort_by(|a, b| {
            b.range
                .total_cmp(&a.range)
                .then_with(|| a.tap.cmp(&b.tap))
        });
        Self { entries }
    }

    /// Free-valued ranges (external mode).
    pub fn from_ranges(ranges: &[f64]) -> Self {
        Self::from_entries(
            ranges
                .iter()
                .map(|&range| RangeEntry { range, tap: None })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `D(g)`: the `g`-th largest range, `g` 1-based.
    pub fn get(&self, g: usize) -> f64 {
        self.entries[g - 1].range
    }

    pub fn entries(&self) -> &[RangeEntry] {
        &self.entries
    }

    /// Ranges in descending order.
    pub fn ranges(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.range).collect()
    }

    pub fn taps(&self) -> Vec<usize> {
        self.entries.iter().filter_map(|e| e.tap).collect()
    }
}

/// One midpoint range per supported tap.
pub fn extract_range_set(support: &[usize], params: &OfdmParams) -> RangeSet {
    RangeSet::from_entries(
        support
            .iter()
            .map(|&l| RangeEntry {
                range: range_midpoint(l, params),
                tap: Some(l),
            })
            .collect(),
    )
}

/// CSV with header `bs_id,rank,range_m`; BS ids and ranks start at 1.
pub fn range_sets_to_csv(sets: &[RangeSet]) -> String {
    let mut out = String::from("bs_id,rank,range_m\n");
    for (m, set) in sets.iter().enumerate() {
        for (g, e) in set.entries.iter().enumerate() {
            out.push_str(&format!("{},{},{:?}\n", m + 1, g + 1, e.range));
        }
    }
    out
}

pub fn range_sets_from_csv(text: &str) -> Result<Vec<RangeSet>, RangingError> {
    let mut rows: Vec<(usize, usize, f64)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || (idx == 0 && line.starts_with("bs_id")) {
            continue;
        }
        let err = |message: String| RangingError::Parse {
            line: idx + 1,
            message,
        };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(err(format!("expected 3 fields, got {}", f.len())));
        }
        let m = f[0].parse::<usize>().map_err(|e| err(e.to_string()))?;
        let g = f[1].parse::<usize>().map_err(|e| err(e.to_string()))?;
        let r = f[2].parse::<f64>().map_err(|e| err(e.to_string()))?;
        if !(r >= 0.0 && r.is_finite()) || g == 0 || m == 0 {
            return Err(err("ids must be >= 1 and ranges finite, non-negative".into()));
        }
        rows.push((m - 1, g, r));
    }
    let num_bs = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let mut sets = vec![Vec::new(); num_bs];
    for (m, _, r) in rows {
        sets[m].push(r);
    }
    Ok(sets.iter().map(|r| RangeSet::from_ranges(r)).collect())
}

/// How λ is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaRule {
    /// `σ_b √(2 ln L)` from the estimated noise.
    Universal,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangingConfig {
    pub lambda: LambdaRule,
    pub tol: f64,
    pub max_iter: usize,
    /// Absolute floor in units of the estimated per-tap noise std.
    pub floor_sigmas: f64,
    /// Relative floor as a fraction of the largest tap.
    pub rel: f64,
}

impl Default for RangingConfig {
    fn default() -> Self {
        Self {
            lambda: LambdaRule::Universal,
            tol: 1e-8,
            max_iter: 5000,
            floor_sigmas: 3.0,
            rel: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangingOutcome {
    pub estimate: TapVector,
    pub support: Vec<usize>,
    pub range_set: RangeSet,
    pub noise: NoiseEstimate,
    pub lambda: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Phase I for one BS: noise estimate, LASSO, support, range set.
///
/// A solver that runs out of iterations still yields its last iterate;
/// `converged` reports it.
pub fn estimate_range_set(
    obs: &Observation,
    op: &SensingOperator,
    params: &OfdmParams,
    cfg: &RangingConfig,
) -> Result<RangingOutcome, RangingError> {
    let noise = estimate_noise(obs, op);
    let lambda = match cfg.lambda {
        LambdaRule::Universal => default_lambda(&noise, op.max_paths),
        LambdaRule::Fixed(l) => l,
    };
    let lasso = LassoConfig {
        lambda,
        tol: cfg.tol,
        max_iter: cfg.max_iter,
    };
    let (solution, converged) = match lasso_estimate(obs, op, &lasso) {
        Ok(s) => (s, true),
        Err(RangingError::NonConvergence { estimate, .. }) => (*estimate, false),
        Err(e) => return Err(e),
    };
    let support = detect_support(
        &solution.estimate,
        Threshold {
            abs_floor: cfg.floor_sigmas * noise.tap_std,
            rel: cfg.rel,
        },
    );
    let range_set = extract_range_set(&support, params);
    Ok(RangingOutcome {
        estimate: solution.estimate,
        support,
        range_set,
        noise,
        lambda,
        converged,
        iterations: solution.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ofdm::{demodulate, make_symbol, transmit_through_channel, Dft};
    use crate::scenario::{Allocation, ChannelSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(n: usize, l: usize, num_bs: usize, noise: f64, rng: &mut ChaCha8Rng) -> OfdmParams {
        OfdmParams {
            n_subcarriers: n,
            subcarrier_spacing: 30e3,
            cp_length: l + 8,
            max_paths: l,
            tx_power: 6.0,
            noise_power: noise,
            allocation: Allocation::random_disjoint(n, num_bs, rng),
        }
    }

    fn observe(
        p: &OfdmParams,
        h: &TapVector,
        rng: &mut ChaCha8Rng,
    ) -> Observation {
        let dft = Dft::new(p.n_subcarriers);
        let s = make_symbol(p, 0, &dft, rng);
        let ch = ChannelSet::monostatic(
            (0..p.allocation.num_bs())
                .map(|m| if m == 0 { h.clone() } else { TapVector::zeros(p.max_paths) })
                .collect(),
        );
        let mut symbols = vec![s];
        for m in 1..p.allocation.num_bs() {
            symbols.push(make_symbol(p, m, &dft, rng));
        }
        let y = transmit_through_channel(&symbols, &ch, p, &dft, rng);
        demodulate(&y[0], 0, &symbols[0], p, &dft)
    }

    fn sparse(l: usize, taps: &[(usize, Complex64)]) -> TapVector {
        let mut h = TapVector::zeros(l);
        for &(i, v) in taps {
            h.set_tap(i, v);
        }
        h
    }

    #[test]
    fn gram_and_correlation_match_dense_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = params(256, 20, 4, 0.01, &mut rng);
        let h = sparse(20, &[(3, Complex64::new(1.0, 0.5))]);
        let obs = observe(&p, &h, &mut rng);
        let op = SensingOperator::for_observation(&obs);
        let a = obs.sensing_matrix();
        let gram = a.adjoint() * &a;
        assert!((gram.clone() - op.gram_dense()).iter().map(|v| v.norm()).fold(0.0, f64::max) < 1e-9);
        let x: Vec<Complex64> = (0..20).map(|_| Complex64::new(rng.gen(), rng.gen())).collect();
        let mut gx = vec![ZERO; 20];
        op.gram_apply(&x, &mut gx);
        let dense = &gram * DVector::from_vec(x);
        for (u, v) in gx.iter().zip(dense.iter()) {
            assert!((u - v).norm() < 1e-9 * dense.camax());
        }
        let b = a.adjoint() * DVector::from_vec(obs.y_tilde.clone());
        for (u, v) in op.correlate(&obs).iter().zip(b.iter()) {
            assert!((u - v).norm() < 1e-9 * b.camax());
        }
        let eig = gram.symmetric_eigenvalues().amax();
        assert!(op.lipschitz() >= eig * 0.999 && op.lipschitz() <= eig * 1.2);
    }

    #[test]
    fn lambda_zero_recovers_single_tap_and_matches_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = params(3300, 200, 4, 0.0, &mut rng);
        let h = sparse(200, &[(37, Complex64::new(0.02, -0.01))]);
        let obs = observe(&p, &h, &mut rng);
        let op = SensingOperator::for_bs(&p, 0);
        assert!(op.matches(&obs));
        let sol = lasso_estimate(&obs, &op, &LassoConfig::default()).unwrap();
        let err = sol
            .estimate
            .as_slice()
            .iter()
            .zip(h.as_slice())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
        let ls = least_squares_estimate(&obs, &op).unwrap();
        let rel = ls
            .as_slice()
            .iter()
            .zip(sol.estimate.as_slice())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
            / ls.max_abs();
        assert!(rel < 1e-8, "{rel}");
    }

    #[test]
    fn least_squares_matches_dense_qr_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = params(512, 32, 4, 0.05, &mut rng);
        let h = sparse(32, &[(2, Complex64::new(1.0, 0.0)), (17, Complex64::new(0.0, -0.4))]);
        let obs = observe(&p, &h, &mut rng);
        let op = SensingOperator::for_observation(&obs);
        let a = obs.sensing_matrix();
        let oracle = a
            .clone()
            .svd(true, true)
            .solve(&DVector::from_vec(obs.y_tilde.clone()), 1e-12)
            .unwrap();
        let ls = least_squares_estimate(&obs, &op).unwrap();
        for (u, v) in ls.as_slice().iter().zip(oracle.iter()) {
            assert!((u - v).norm() < 1e-8 * oracle.camax());
        }
        // FISTA at λ = 0 lands on the same point.
        let sol = lasso_estimate(&obs, &op, &LassoConfig::default()).unwrap();
        for (u, v) in sol.estimate.as_slice().iter().zip(oracle.iter()) {
            assert!((u - v).norm() < 1e-7 * oracle.camax());
        }
    }

    #[test]
    fn zero_observation_gives_zero_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = params(256, 16, 2, 0.0, &mut rng);
        let obs = observe(&p, &TapVector::zeros(16), &mut rng);
        let op = SensingOperator::for_observation(&obs);
        let sol = lasso_estimate(
            &obs,
            &op,
            &LassoConfig {
                lambda: 1.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(sol.iterations, 0);
        assert!(sol.estimate.support().is_empty());
    }

    #[test]
    fn kkt_holds_and_objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = params(1024, 64, 4, 1e-3, &mut rng);
        let h = sparse(
            64,
            &[(5, Complex64::new(0.05, 0.02)), (40, Complex64::new(-0.01, 0.03))],
        );
        let obs = observe(&p, &h, &mut rng);
        let op = SensingOperator::for_observation(&obs);
        let noise = estimate_noise(&obs, &op);
        let lambda = default_lambda(&noise, 64);
        let cfg = LassoConfig {
            lambda,
            ..Default::default()
        };
        let sol = lasso_estimate(&obs, &op, &cfg).unwrap();
        assert!(sol.kkt_residual <= cfg.tol);
        for w in sol.objective_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
        // Direct KKT check through the dense matrix.
        let a = obs.sensing_matrix();
        let x = DVector::from_vec(sol.estimate.as_slice().to_vec());
        let c = a.adjoint() * (DVector::from_vec(obs.y_tilde.clone()) - &a * &x);
        let scale = (a.adjoint() * DVector::from_vec(obs.y_tilde.clone())).camax();
        for (cl, hl) in c.iter().zip(x.iter()) {
            assert!(cl.norm() <= lambda + 1e-6 * scale);
            if hl.norm() > 0.0 {
                assert!((cl.norm() - lambda).abs() <= 1e-6 * scale);
            }
        }
        assert_eq!(sol.estimate.support(), vec![5, 40]);
    }

    #[test]
    fn noise_estimate_is_close_to_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = params(3300, 200, 4, 2e-3, &mut rng);
        let h = sparse(200, &[(10, Complex64::new(1.0, 0.0))]);
        let obs = observe(&p, &h, &mut rng);
        let op = SensingOperator::for_observation(&obs);
        let est = estimate_noise(&obs, &op);
        assert!((est.noise_power / 2e-3 - 1.0).abs() < 0.15, "{:?}", est);
    }

    #[test]
    fn support_rule_examples() {
        let exact = sparse(8, &[(2, Complex64::new(1.0, 0.0)), (6, Complex64::new(0.0, 0.01))]);
        assert_eq!(
            detect_support(&exact, Threshold { abs_floor: 0.0, rel: 1e-3 }),
            vec![2, 6]
        );
        assert!(detect_support(&TapVector::zeros(5), Threshold { abs_floor: 0.0, rel: 0.05 })
            .is_empty());
        let v = TapVector::from_vec(vec![
            Complex64::new(1.0, 0.0),
            Complex64::new(0.004, 0.0),
            ZERO,
        ]);
        assert_eq!(detect_support(&v, Threshold { abs_floor: 0.0, rel: 0.01 }), vec![1]);
    }

    #[test]
    fn midpoint_examples() {
        assert!((range_resolution_for_bandwidth(100e6) - 0.75).abs() < 1e-12);
        assert!((range_resolution_for_bandwidth(400e6) - 0.1875).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = params(3300, 200, 4, 0.0, &mut rng);
        assert!((range_midpoint(1, &p) - 0.757_575_757_575_757_6).abs() < 1e-12);
        for l in 1..=200 {
            let d = range_midpoint(l, &p);
            assert_eq!(crate::scenario::delay_tap(d, &p).unwrap(), l);
        }
    }

    #[test]
    fn range_set_rank_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = params(3300, 200, 4, 0.0, &mut rng);
        let set = extract_range_set(&[5, 12], &p);
        assert_eq!(set.get(1), range_midpoint(12, &p));
        assert_eq!(set.get(2), range_midpoint(5, &p));
        assert!(extract_range_set(&[], &p).is_empty());

        let d1 = RangeSet::from_ranges(&[5f64.sqrt(), 29f64.sqrt()]);
        assert_eq!(d1.get(1), 29f64.sqrt());
        assert_eq!(d1.get(2), 5f64.sqrt());
    }

    #[test]
    fn range_csv_round_trip() {
        let sets = vec![
            RangeSet::from_ranges(&[1.5, 7.25]),
            RangeSet::from_ranges(&[3.0, 0.1]),
            RangeSet::from_ranges(&[2.0, 2.0]),
        ];
        let back = range_sets_from_csv(&range_sets_to_csv(&sets)).unwrap();
        assert_eq!(back, sets);
        assert!(range_sets_from_csv("bs_id,rank,range_m\n0,1,abc\n").is_err());
    }
}
