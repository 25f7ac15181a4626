//! OFDM symbol synthesis, the circulant multipath channel and per-BS
//! demodulation onto allocated sub-carriers.
//!
//! All transforms use the unitary DFT `W` (`W Wᴴ = I`), realised with an
//! FFT. Tap `l` of a channel vector multiplies column `l` of
//! `G_{n,l} = exp(-j2π n (l-1) / N)` in the frequency domain.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{Fft, FftPlanner};

use crate::scenario::{ChannelSet, OfdmParams, TapVector};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Unitary DFT of a fixed length.
#[derive(Clone)]
pub struct Dft {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl std::fmt::Debug for Dft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dft").field("n", &self.n).finish()
    }
}

impl Dft {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
            scale: 1.0 / (n as f64).sqrt(),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// `x <- W x`
    pub fn forward(&self, x: &mut [Complex64]) {
        self.forward.process(x);
        x.iter_mut().for_each(|v| *v *= self.scale);
    }

    /// `x <- Wᴴ x`
    pub fn inverse(&self, x: &mut [Complex64]) {
        self.inverse.process(x);
        x.iter_mut().for_each(|v| *v *= self.scale);
    }
}

/// Dense unitary DFT matrix, `W_{n,k} = exp(-j2π nk/N) / √N`.
pub fn dft_matrix(n: usize) -> DMatrix<Complex64> {
    let scale = 1.0 / (n as f64).sqrt();
    DMatrix::from_fn(n, n, |r, c| {
        let phase = -2.0 * PI * ((r * c) % n) as f64 / n as f64;
        Complex64::from_polar(scale, phase)
    })
}

/// Frequency symbol `s_m` and time symbol `χ_m = √p Wᴴ s_m` of one BS.
#[derive(Debug, Clone, PartialEq)]
pub struct OfdmSymbol {
    pub freq: Vec<Complex64>,
    pub time: Vec<Complex64>,
}

impl OfdmSymbol {
    pub fn energy(&self) -> f64 {
        self.freq.iter().map(|s| s.norm_sqr()).sum()
    }
}

fn qpsk<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re = if rng.gen::<bool>() { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
    let im = if rng.gen::<bool>() { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
    Complex64::new(re, im)
}

/// Random QPSK symbol on BS `bs`'s sub-carriers, zero elsewhere.
pub fn make_symbol<R: Rng + ?Sized>(
    params: &OfdmParams,
    bs: usize,
    dft: &Dft,
    rng: &mut R,
) -> OfdmSymbol {
    let mut freq = vec![ZERO; params.n_subcarriers];
    for &n in params.allocation.set(bs) {
        freq[n] = qpsk(rng);
    }
    let mut time = freq.clone();
    dft.inverse(&mut time);
    let amp = params.tx_power.sqrt();
    time.iter_mut().for_each(|v| *v *= amp);
    OfdmSymbol { freq, time }
}

/// Frequency response `G h` of a tap vector on all `n` sub-carriers.
pub fn frequency_response(h: &TapVector, dft: &Dft) -> Vec<Complex64> {
    let n = dft.len();
    let mut c = vec![ZERO; n];
    c[..h.len()].copy_from_slice(h.as_slice());
    dft.forward(&mut c);
    let gain = (n as f64).sqrt();
    c.iter_mut().for_each(|v| *v *= gain);
    c
}

/// Dense `N×N` circulant channel whose first row is `[h_1, 0, …, 0, h_L, …, h_2]`.
pub fn circulant_matrix(h: &TapVector, n: usize) -> DMatrix<Complex64> {
    let mut first_row = vec![ZERO; n];
    first_row[0] = h.tap(1);
    for l in 2..=h.len() {
        first_row[n - l + 1] = h.tap(l);
    }
    DMatrix::from_fn(n, n, |i, j| first_row[(j + n - i) % n])
}

/// Circular convolution `H x` through the FFT, equal to `circulant_matrix(h) * x`.
pub fn apply_channel(h: &TapVector, x: &[Complex64], dft: &Dft) -> Vec<Complex64> {
    let response = frequency_response(h, dft);
    let mut buf = x.to_vec();
    dft.forward(&mut buf);
    buf.iter_mut().zip(&response).for_each(|(v, g)| *v *= g);
    dft.inverse(&mut buf);
    buf
}

/// Draws `CN(0, σ²)` samples: real and imaginary parts each carry σ²/2.
pub fn complex_noise<R: Rng + ?Sized>(len: usize, noise_power: f64, rng: &mut R) -> Vec<Complex64> {
    let std = (noise_power / 2.0).sqrt();
    (0..len)
        .map(|_| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            Complex64::new(re * std, im * std)
        })
        .collect()
}

/// Received time-domain vectors `y_m = Σ_u H_{u,m} χ_u + z_m` for every BS.
pub fn transmit_through_channel<R: Rng + ?Sized>(
    symbols: &[OfdmSymbol],
    channels: &ChannelSet,
    params: &OfdmParams,
    dft: &Dft,
    rng: &mut R,
) -> Vec<Vec<Complex64>> {
    let n = params.n_subcarriers;
    let num_bs = symbols.len();
    assert_eq!(channels.num_bs(), num_bs, "one channel row per transmitter");
    let spectra: Vec<Vec<Complex64>> = symbols
        .iter()
        .map(|s| {
            let mut x = s.time.clone();
            dft.forward(&mut x);
            x
        })
        .collect();
    (0..num_bs)
        .map(|m| {
            let mut acc = vec![ZERO; n];
            for (u, spectrum) in spectra.iter().enumerate() {
                let h = channels.pair(u, m);
                if h.support().is_empty() {
                    continue;
                }
                let response = frequency_response(h, dft);
                for ((a, x), g) in acc.iter_mut().zip(spectrum).zip(&response) {
                    *a += x * g;
                }
            }
            dft.inverse(&mut acc);
            if params.noise_power > 0.0 {
                let z = complex_noise(n, params.noise_power, rng);
                acc.iter_mut().zip(z).for_each(|(a, z)| *a += z);
            }
            acc
        })
        .collect()
}

/// Prepends the last `q` samples as a cyclic prefix.
pub fn insert_cyclic_prefix(x: &[Complex64], q: usize) -> Vec<Complex64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + q);
    out.extend_from_slice(&x[n - q..]);
    out.extend_from_slice(x);
    out
}

/// Linear multipath channel acting on a CP-extended block, with tap `l`
/// delaying by `l - 1` samples, followed by CP removal.
///
/// For `L <= Q` this equals the circulant model exactly; it is the
/// validation path for [`apply_channel`].
pub fn linear_channel_with_cp(h: &TapVector, x: &[Complex64], q: usize) -> Vec<Complex64> {
    let n = x.len();
    let extended = insert_cyclic_prefix(x, q);
    (0..n)
        .map(|i| {
            let t = i + q;
            (1..=h.len())
                .filter(|&l| l - 1 <= t)
                .map(|l| h.tap(l) * extended[t - (l - 1)])
                .sum()
        })
        .collect()
}

/// Frequency-domain samples of one BS on its own sub-carriers, together
/// with its known pilots.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub bs: usize,
    /// `N_m` (0-based, ascending)
    pub subcarriers: Vec<usize>,
    /// `ỹ_m`
    pub y_tilde: Vec<Complex64>,
    /// `s̃_m`
    pub pilots: Vec<Complex64>,
    pub n_subcarriers: usize,
    pub max_paths: usize,
    pub tx_power: f64,
}

impl Observation {
    /// Dense `|N_m| × L` sensing matrix `√p diag(s̃_m) G̃_m`.
    pub fn sensing_matrix(&self) -> DMatrix<Complex64> {
        let n = self.n_subcarriers;
        let amp = self.tx_power.sqrt();
        DMatrix::from_fn(self.subcarriers.len(), self.max_paths, |r, l| {
            let k = self.subcarriers[r];
            let phase = -2.0 * PI * ((k * l) % n) as f64 / n as f64;
            self.pilots[r] * Complex64::from_polar(amp, phase)
        })
    }

    /// Debug dump with header `index,re,im`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,re,im\n");
        for (k, y) in self.subcarriers.iter().zip(&self.y_tilde) {
            out.push_str(&format!("{k},{:e},{:e}\n", y.re, y.im));
        }
        out
    }
}

/// `ỹ_m`: rows `N_m` of `W y_m`.
pub fn demodulate(
    y: &[Complex64],
    bs: usize,
    symbol: &OfdmSymbol,
    params: &OfdmParams,
    dft: &Dft,
) -> Observation {
    assert_eq!(y.len(), params.n_subcarriers, "received vector must have length N");
    let mut spectrum = y.to_vec();
    dft.forward(&mut spectrum);
    let subcarriers = params.allocation.set(bs).to_vec();
    Observation {
        bs,
        y_tilde: subcarriers.iter().map(|&n| spectrum[n]).collect(),
        pilots: subcarriers.iter().map(|&n| symbol.freq[n]).collect(),
        subcarriers,
        n_subcarriers: params.n_subcarriers,
        max_paths: params.max_paths,
        tx_power: params.tx_power,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Allocation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(n: usize, l: usize, q: usize, num_bs: usize, noise: f64) -> OfdmParams {
        OfdmParams {
            n_subcarriers: n,
            subcarrier_spacing: 30e3,
            cp_length: q,
            max_paths: l,
            tx_power: 2.0,
            noise_power: noise,
            allocation: Allocation::interleaved(n, num_bs),
        }
    }

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
        (0..n)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    fn max_err(a: &[Complex64], b: &[Complex64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn dft_degenerate_and_impulse() {
        let w = dft_matrix(1);
        assert!((w[(0, 0)] - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        let dft = Dft::new(4);
        let mut e1 = vec![ZERO; 4];
        e1[0] = Complex64::new(1.0, 0.0);
        dft.forward(&mut e1);
        for v in e1 {
            assert!((v.norm() - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn dft_is_unitary() {
        for n in [1usize, 7, 64, 100] {
            let w = dft_matrix(n);
            let prod = &w * w.adjoint();
            let err = (prod - DMatrix::<Complex64>::identity(n, n))
                .iter()
                .map(|v| v.norm())
                .fold(0.0, f64::max);
            assert!(err < 1e-10, "n = {n}: {err}");
        }
    }

    #[test]
    fn fft_round_trip_and_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dft = Dft::new(256);
        let x = random_vec(256, &mut rng);
        let mut y = x.clone();
        dft.forward(&mut y);
        let dense = dft_matrix(256) * nalgebra::DVector::from_vec(x.clone());
        assert!(max_err(&y, dense.as_slice()) < 1e-10);
        dft.inverse(&mut y);
        assert!(max_err(&y, &x) < 1e-10);
    }

    #[test]
    fn symbol_occupies_allocation_only() {
        let p = OfdmParams {
            allocation: Allocation::interleaved(3300, 4),
            ..params(3300, 200, 232, 4, 0.0)
        };
        let dft = Dft::new(3300);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = make_symbol(&p, 2, &dft, &mut rng);
        let nonzero = s.freq.iter().filter(|v| v.norm() > 0.0).count();
        assert_eq!(nonzero, 825);
        assert!(s
            .freq
            .iter()
            .filter(|v| v.norm() > 0.0)
            .all(|v| (v.norm() - 1.0).abs() < 1e-12));
        assert!((s.energy() - 825.0).abs() < 1e-9);
        // ‖χ‖² = p‖s‖² by unitarity.
        let time_energy: f64 = s.time.iter().map(|v| v.norm_sqr()).sum();
        assert!((time_energy - 2.0 * 825.0).abs() < 1e-8);

        let empty = OfdmParams {
            allocation: Allocation::new(vec![vec![]]),
            ..params(16, 2, 4, 1, 0.0)
        };
        let s = make_symbol(&empty, 0, &Dft::new(16), &mut rng);
        assert!(s.time.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn single_first_tap_is_identity_channel() {
        let dft = Dft::new(8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_vec(8, &mut rng);
        let mut h = TapVector::zeros(3);
        h.set_tap(1, Complex64::new(1.0, 0.0));
        let y = circulant_matrix(&h, 8) * nalgebra::DVector::from_vec(x.clone());
        assert!(max_err(y.as_slice(), &x) < 1e-15);
        assert!(max_err(&apply_channel(&h, &x, &dft), &x) < 1e-12);
    }

    #[test]
    fn circulant_fft_and_cp_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 32;
        let dft = Dft::new(n);
        let h = TapVector::from_vec(random_vec(5, &mut rng));
        let x = random_vec(n, &mut rng);
        let dense = circulant_matrix(&h, n) * nalgebra::DVector::from_vec(x.clone());
        let fast = apply_channel(&h, &x, &dft);
        let cp = linear_channel_with_cp(&h, &x, 8);
        assert!(max_err(dense.as_slice(), &fast) < 1e-12);
        assert!(max_err(dense.as_slice(), &cp) < 1e-12);
    }

    #[test]
    fn zero_channel_noiseless_gives_zero() {
        let p = params(64, 4, 8, 2, 0.0);
        let dft = Dft::new(64);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let symbols: Vec<_> = (0..2).map(|m| make_symbol(&p, m, &dft, &mut rng)).collect();
        let channels = ChannelSet::monostatic(vec![TapVector::zeros(4), TapVector::zeros(4)]);
        let y = transmit_through_channel(&symbols, &channels, &p, &dft, &mut rng);
        assert!(y.iter().flatten().all(|v| v.norm() == 0.0));
        let obs = demodulate(&y[0], 0, &symbols[0], &p, &dft);
        assert!(obs.y_tilde.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn noise_variance_matches_sigma2() {
        let sigma2 = 0.37;
        let p = params(4096, 4, 8, 1, sigma2);
        let dft = Dft::new(4096);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let symbols = vec![make_symbol(&p, 0, &dft, &mut rng)];
        let channels = ChannelSet::monostatic(vec![TapVector::zeros(4)]);
        let y = transmit_through_channel(&symbols, &channels, &p, &dft, &mut rng);
        let var: f64 = y[0].iter().map(|v| v.norm_sqr()).sum::<f64>() / 4096.0;
        assert!((var / sigma2 - 1.0).abs() < 0.05, "{var}");
        // W z keeps the per-component variance.
        let mut f = y[0].clone();
        dft.forward(&mut f);
        let var_f: f64 = f.iter().map(|v| v.norm_sqr()).sum::<f64>() / 4096.0;
        assert!((var_f - var).abs() < 1e-9 * var);
    }

    #[test]
    fn noiseless_observation_is_sensing_matrix_times_taps() {
        let p = params(512, 24, 32, 4, 0.0);
        let dft = Dft::new(512);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let symbols: Vec<_> = (0..4).map(|m| make_symbol(&p, m, &dft, &mut rng)).collect();
        let own: Vec<TapVector> = (0..4)
            .map(|_| {
                let mut h = TapVector::zeros(24);
                for l in [2usize, 9, 24] {
                    h.set_tap(l, Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
                }
                h
            })
            .collect();
        let mut channels = ChannelSet::monostatic(own.clone());
        let y_alone = transmit_through_channel(&symbols, &channels, &p, &dft, &mut rng);
        // Add cross paths between every BS pair: must not leak into ỹ_m.
        for u in 0..4 {
            for m in 0..4 {
                if u != m {
                    channels.pair_mut(u, m).set_tap(5 + u + m, Complex64::new(0.3, -0.7));
                }
            }
        }
        let y_all = transmit_through_channel(&symbols, &channels, &p, &dft, &mut rng);
        for m in 0..4 {
            let obs = demodulate(&y_alone[m], m, &symbols[m], &p, &dft);
            let model = obs.sensing_matrix() * nalgebra::DVector::from_vec(own[m].as_slice().to_vec());
            let scale = model.iter().map(|v| v.norm()).fold(0.0, f64::max);
            assert!(max_err(&obs.y_tilde, model.as_slice()) < 1e-9 * scale);
            let obs_all = demodulate(&y_all[m], m, &symbols[m], &p, &dft);
            assert!(max_err(&obs_all.y_tilde, &obs.y_tilde) < 1e-9 * scale);
        }
    }
}
