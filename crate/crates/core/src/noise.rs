//! Colored complex Gaussian noise with a prescribed two-time correlation
//! `M[z_t z_s^*] = alpha(t - s)` and `M[z_t z_s] = 0`.
//!
//! The main sampler diagonalizes the circulant extension of the sampled
//! correlation function with an FFT. A per-mode Ornstein-Uhlenbeck recursion
//! is kept as an independent cross-check for real-weight modes.

use std::io::{self, Read, Write};
use std::sync::Arc;

use num_complex::Complex64 as C64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::bath::{ExponentialBath, ExponentialMode};
use crate::rng::{stream_rng, Domain};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("site {site}, mode {mode}: circulant spectrum is negative ({value:.3e}); the sampled correlation is not positive semidefinite")]
    NotPositive { site: usize, mode: usize, value: f64 },
    #[error("mode weight must be real and positive for the Ornstein-Uhlenbeck sampler, got {0}")]
    ComplexWeight(C64),
    #[error("time step must be positive and finite")]
    BadStep,
    #[error(transparent)]
    Bath(#[from] crate::bath::BathError),
}

/// Noise samples on a uniform grid `t_k = k dt`, `k = 0..=n_steps`, one row per site.
/// An empty row means the site is not coupled and its noise is identically zero.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseTrajectory {
    pub dt: f64,
    pub n_steps: usize,
    pub values: Vec<Vec<C64>>,
}

impl NoiseTrajectory {
    pub fn zeros(n_sites: usize, dt: f64, n_steps: usize) -> Self {
        Self {
            dt,
            n_steps,
            values: vec![Vec::new(); n_sites],
        }
    }

    pub fn n_sites(&self) -> usize {
        self.values.len()
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    /// `z_site(t)`, linearly interpolated between grid points.
    pub fn at(&self, site: usize, t: f64) -> C64 {
        let row = &self.values[site];
        if row.is_empty() {
            return C64::new(0.0, 0.0);
        }
        let x = t / self.dt;
        let k = x.round();
        if (x - k).abs() < 1e-9 {
            return row[(k as usize).min(self.n_steps)];
        }
        let i = (x.floor() as usize).min(self.n_steps - 1);
        let f = x - i as f64;
        row[i] * (1.0 - f) + row[i + 1] * f
    }

    /// Fills `out[n] = z_n(t)^*` for every site.
    pub fn conj_into(&self, t: f64, out: &mut [C64]) {
        for (n, o) in out.iter_mut().enumerate() {
            *o = self.at(n, t).conj();
        }
    }

    /// Binary dump: `f64 dt`, `u64 n_steps`, `u64 n_sites`, then for every site
    /// `n_steps + 1` interleaved `(re, im)` doubles, little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(&self.dt.to_le_bytes())?;
        w.write_all(&(self.n_steps as u64).to_le_bytes())?;
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for row in &self.values {
            for k in 0..=self.n_steps {
                let z = row.get(k).copied().unwrap_or_default();
                w.write_all(&z.re.to_le_bytes())?;
                w.write_all(&z.im.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> io::Result<Self> {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let dt = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let n_steps = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let n_sites = u64::from_le_bytes(b8) as usize;
        let mut values = Vec::with_capacity(n_sites);
        for _ in 0..n_sites {
            let mut row = Vec::with_capacity(n_steps + 1);
            for _ in 0..=n_steps {
                r.read_exact(&mut b8)?;
                let re = f64::from_le_bytes(b8);
                r.read_exact(&mut b8)?;
                row.push(C64::new(re, f64::from_le_bytes(b8)));
            }
            values.push(row);
        }
        Ok(Self {
            dt,
            n_steps,
            values,
        })
    }
}

/// Standard complex Gaussian: real and imaginary parts each `N(0, 1/2)`.
fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let n = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).unwrap();
    C64::new(n.sample(rng), n.sample(rng))
}

const DECAY_E_FOLDS: f64 = 30.0;
const MAX_FFT: usize = 1 << 24;

/// Circulant-embedding sampler for a fixed bath, step and length.
/// Construction does the spectral factorization once; `generate` then costs one
/// FFT per coupled site.
pub struct SpectralNoiseGenerator {
    dt: f64,
    n_steps: usize,
    n_fft: usize,
    amplitudes: Vec<Option<Vec<f64>>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for SpectralNoiseGenerator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralNoiseGenerator")
            .field("dt", &self.dt)
            .field("n_steps", &self.n_steps)
            .field("n_fft", &self.n_fft)
            .finish()
    }
}

impl SpectralNoiseGenerator {
    pub fn new(bath: &ExponentialBath, dt: f64, n_steps: usize) -> Result<Self, NoiseError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(NoiseError::BadStep);
        }
        bath.validate()?;
        // The embedding must also outlast the correlation decay, otherwise the
        // wrapped correlation is generally not positive semidefinite.
        let slowest = bath
            .modes
            .iter()
            .flatten()
            .map(|m| m.w.re)
            .fold(f64::INFINITY, f64::min);
        let decay_steps = if slowest.is_finite() {
            ((DECAY_E_FOLDS / slowest / dt).ceil() as usize).min(MAX_FFT / 2)
        } else {
            0
        };
        let n_fft = (4 * (n_steps + 1)).max(2 * decay_steps).next_power_of_two();
        let mut planner = FftPlanner::new();
        let inverse = planner.plan_fft_inverse(n_fft);
        let fft = planner.plan_fft_forward(n_fft);

        let mut amplitudes = Vec::with_capacity(bath.n_sites());
        for (site, modes) in bath.modes.iter().enumerate() {
            if modes.is_empty() {
                amplitudes.push(None);
                continue;
            }
            let per_mode: Vec<Vec<f64>> = modes
                .iter()
                .map(|m| circulant_spectrum(&[*m], dt, n_fft, &*inverse))
                .collect();
            let total: Vec<f64> = (0..n_fft)
                .map(|k| per_mode.iter().map(|s| s[k]).sum())
                .collect();
            let scale = total.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
            let tol = 1e-10 * scale;
            let mut amp = Vec::with_capacity(n_fft);
            for (k, &lam) in total.iter().enumerate() {
                if lam < -tol {
                    let (mode, value) = per_mode
                        .iter()
                        .enumerate()
                        .map(|(j, s)| (j, s[k]))
                        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
                    return Err(NoiseError::NotPositive { site, mode, value });
                }
                amp.push(lam.max(0.0).sqrt());
            }
            amplitudes.push(Some(amp));
        }
        Ok(Self {
            dt,
            n_steps,
            n_fft,
            amplitudes,
            fft,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    /// Noise for trajectory `trajectory`; each site draws from its own stream.
    pub fn generate(&self, seed: u64, trajectory: u64) -> NoiseTrajectory {
        let mut values = Vec::with_capacity(self.amplitudes.len());
        for (site, amp) in self.amplitudes.iter().enumerate() {
            let Some(amp) = amp else {
                values.push(Vec::new());
                continue;
            };
            let mut rng = stream_rng(seed, trajectory, site as u64, Domain::Noise);
            let mut buf: Vec<C64> = amp.iter().map(|a| complex_normal(&mut rng) * *a).collect();
            self.fft.process(&mut buf);
            buf.truncate(self.n_steps + 1);
            values.push(buf);
        }
        NoiseTrajectory {
            dt: self.dt,
            n_steps: self.n_steps,
            values,
        }
    }
}

/// Eigenvalues of the Hermitian circulant matrix whose first column is the
/// sampled correlation `c_m = alpha(m dt)` for `m <= N/2` and
/// `alpha((N - m) dt)^*` beyond.
fn circulant_spectrum(modes: &[ExponentialMode], dt: f64, n: usize, inverse: &dyn Fft<f64>) -> Vec<f64> {
    let alpha = |t: f64| -> C64 { modes.iter().map(|m| m.at(t)).sum() };
    let mut c: Vec<C64> = (0..n)
        .map(|m| {
            if m <= n / 2 {
                alpha(m as f64 * dt)
            } else {
                alpha((n - m) as f64 * dt).conj()
            }
        })
        .collect();
    c[n / 2] = C64::new(c[n / 2].re, 0.0);
    inverse.process(&mut c);
    c.iter().map(|v| v.re / n as f64).collect()
}

/// Convenience wrapper building a generator for a single trajectory.
pub fn generate_noise(
    bath: &ExponentialBath,
    dt: f64,
    n_steps: usize,
    seed: u64,
    trajectory: u64,
) -> Result<NoiseTrajectory, NoiseError> {
    Ok(SpectralNoiseGenerator::new(bath, dt, n_steps)?.generate(seed, trajectory))
}

/// Exact discretization of the Ornstein-Uhlenbeck process with correlation
/// `p exp(-w t)`, stationary start. Requires real `p > 0`.
pub fn ornstein_uhlenbeck_noise(
    mode: &ExponentialMode,
    dt: f64,
    n_steps: usize,
    seed: u64,
    trajectory: u64,
) -> Result<Vec<C64>, NoiseError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(NoiseError::BadStep);
    }
    if mode.p.im.abs() > 1e-14 * mode.p.norm() || mode.p.re <= 0.0 {
        return Err(NoiseError::ComplexWeight(mode.p));
    }
    let p = mode.p.re;
    let decay = (-mode.w * dt).exp();
    let kick = (p * (1.0 - (-2.0 * mode.w.re * dt).exp())).sqrt();
    let mut rng = stream_rng(seed, trajectory, 0, Domain::OrnsteinUhlenbeck);
    let mut out = Vec::with_capacity(n_steps + 1);
    let mut z = complex_normal(&mut rng) * p.sqrt();
    out.push(z);
    for _ in 0..n_steps {
        z = z * decay + complex_normal(&mut rng) * kick;
        out.push(z);
    }
    Ok(out)
}

/// Ensemble estimate of lagged second moments with standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalCovariance {
    pub dt: f64,
    /// `M[z_a(t + lag) z_b(t)^*]`.
    pub cov: Vec<C64>,
    pub cov_se: Vec<f64>,
    /// `M[z_a(t + lag) z_b(t)]`.
    pub pseudo: Vec<C64>,
    pub pseudo_se: Vec<f64>,
    pub n_samples: usize,
}

impl EmpiricalCovariance {
    pub fn lag_time(&self, lag: usize) -> f64 {
        lag as f64 * self.dt
    }

    /// Whether `target` lies within `k` standard errors of the estimate at `lag`.
    pub fn cov_within(&self, lag: usize, target: C64, k: f64) -> bool {
        (self.cov[lag] - target).norm() <= k * self.cov_se[lag]
    }

    pub fn pseudo_within(&self, lag: usize, target: C64, k: f64) -> bool {
        (self.pseudo[lag] - target).norm() <= k * self.pseudo_se[lag]
    }
}

/// Lagged moments of two noise rows over an ensemble of samples.
///
/// Every sample contributes its time-averaged lag products; the ensemble mean
/// and the delete-one jackknife standard error of the mean are reported. For a
/// mean the jackknife reduces to `sqrt(sum |x_i - mean|^2 / (n (n - 1)))`.
pub fn empirical_covariance(rows_a: &[&[C64]], rows_b: &[&[C64]], dt: f64, max_lag: usize) -> EmpiricalCovariance {
    assert_eq!(rows_a.len(), rows_b.len());
    assert!(rows_a.len() >= 2, "need at least two samples");
    let n = rows_a.len();
    let mut per_cov = vec![vec![C64::new(0.0, 0.0); n]; max_lag + 1];
    let mut per_pseudo = per_cov.clone();
    for (s, (a, b)) in rows_a.iter().zip(rows_b).enumerate() {
        let len = a.len().min(b.len());
        assert!(len > max_lag, "noise rows shorter than the requested lag");
        for lag in 0..=max_lag {
            let mut c = C64::new(0.0, 0.0);
            let mut q = C64::new(0.0, 0.0);
            for t in 0..len - lag {
                c += a[t + lag] * b[t].conj();
                q += a[t + lag] * b[t];
            }
            let m = (len - lag) as f64;
            per_cov[lag][s] = c / m;
            per_pseudo[lag][s] = q / m;
        }
    }
    let reduce = |xs: &[C64]| -> (C64, f64) {
        let mean = xs.iter().sum::<C64>() / n as f64;
        let var: f64 = xs.iter().map(|x| (x - mean).norm_sqr()).sum();
        (mean, (var / (n as f64 * (n as f64 - 1.0))).sqrt())
    };
    let (cov, cov_se) = per_cov.iter().map(|x| reduce(x)).unzip();
    let (pseudo, pseudo_se) = per_pseudo.iter().map(|x| reduce(x)).unzip();
    EmpiricalCovariance {
        dt,
        cov,
        cov_se,
        pseudo,
        pseudo_se,
        n_samples: n,
    }
}
