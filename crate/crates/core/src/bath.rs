//! Bath correlation functions as finite sums of damped complex exponentials,
//! plus a quadrature route from a spectral density for validation.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BathError {
    #[error("site {site}, mode {mode}: rate must have positive real part, got {w}")]
    NonDecaying { site: usize, mode: usize, w: C64 },
    #[error("site {site}, mode {mode}: non-finite parameter")]
    NonFinite { site: usize, mode: usize },
    #[error("site index {index} out of range for {n_sites} sites")]
    SiteOutOfRange { index: usize, n_sites: usize },
    #[error("spectral density grid needs at least 3 points with matching values")]
    BadGrid,
    #[error("spectral density is negative ({value}) at omega = {omega}")]
    NegativeDensity { omega: f64, value: f64 },
    #[error("non-finite correlation integrand at omega = {omega} (thermal factor pole)")]
    NonFiniteIntegrand { omega: f64 },
}

/// One term `p exp(-w t)` of a correlation function, `w = gamma + i Omega`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentialMode {
    pub p: C64,
    pub w: C64,
}

impl ExponentialMode {
    pub fn new(p: C64, w: C64) -> Self {
        Self { p, w }
    }

    /// Underdamped vibration at zero temperature: `p exp(-(gamma + i omega) t)`.
    pub fn damped_vibration(p: f64, gamma: f64, omega: f64) -> Self {
        Self {
            p: C64::new(p, 0.0),
            w: C64::new(gamma, omega),
        }
    }

    pub fn at(&self, t: f64) -> C64 {
        self.p * (-self.w * t).exp()
    }

    /// Fourier transform of the Hermitian extension,
    /// `int dt e^{i omega t} a(t)` with `a(-t) = a(t)^*`.
    pub fn spectrum(&self, omega: f64) -> f64 {
        2.0 * (self.p / (self.w - C64::new(0.0, omega))).re
    }
}

/// Per-site exponential decomposition of the bath correlation functions.
/// A site with an empty list is not coupled to any bath.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentialBath {
    pub modes: Vec<Vec<ExponentialMode>>,
}

impl ExponentialBath {
    pub fn new(modes: Vec<Vec<ExponentialMode>>) -> Result<Self, BathError> {
        let bath = Self { modes };
        bath.validate()?;
        Ok(bath)
    }

    /// Same single mode on every site.
    pub fn uniform(n_sites: usize, mode: ExponentialMode) -> Self {
        Self {
            modes: vec![vec![mode]; n_sites],
        }
    }

    pub fn uncoupled(n_sites: usize) -> Self {
        Self {
            modes: vec![Vec::new(); n_sites],
        }
    }

    pub fn validate(&self) -> Result<(), BathError> {
        for (site, list) in self.modes.iter().enumerate() {
            for (mode, m) in list.iter().enumerate() {
                let finite = m.p.re.is_finite()
                    && m.p.im.is_finite()
                    && m.w.re.is_finite()
                    && m.w.im.is_finite();
                if !finite {
                    return Err(BathError::NonFinite { site, mode });
                }
                if m.w.re <= 0.0 {
                    return Err(BathError::NonDecaying { site, mode, w: m.w });
                }
            }
        }
        Ok(())
    }

    pub fn n_sites(&self) -> usize {
        self.modes.len()
    }

    pub fn modes_per_site(&self) -> Vec<usize> {
        self.modes.iter().map(Vec::len).collect()
    }

    pub fn n_modes(&self) -> usize {
        self.modes.iter().map(Vec::len).sum()
    }

    /// All modes flattened site by site, paired with their site index.
    pub fn flattened(&self) -> Vec<(usize, ExponentialMode)> {
        self.modes
            .iter()
            .enumerate()
            .flat_map(|(n, list)| list.iter().map(move |m| (n, *m)))
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.modes
            .iter()
            .flatten()
            .all(|m| m.p == C64::new(0.0, 0.0))
    }

    /// `alpha_n(t) = sum_j p_nj exp(-w_nj t)` for `t >= 0`.
    pub fn alpha_at(&self, site: usize, t: f64) -> Result<C64, BathError> {
        let list = self.modes.get(site).ok_or(BathError::SiteOutOfRange {
            index: site,
            n_sites: self.modes.len(),
        })?;
        Ok(list.iter().map(|m| m.at(t)).sum())
    }

    /// Correlation function on the whole real axis via `alpha(-t) = alpha(t)^*`.
    pub fn alpha(&self, site: usize, t: f64) -> Result<C64, BathError> {
        if t >= 0.0 {
            self.alpha_at(site, t)
        } else {
            Ok(self.alpha_at(site, -t)?.conj())
        }
    }

    /// Fourier transform of the Hermitian-extended correlation function of `site`.
    pub fn spectrum(&self, site: usize, omega: f64) -> f64 {
        self.modes[site].iter().map(|m| m.spectrum(omega)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Temperature {
    Zero,
    /// Inverse temperature `beta`, in units of the inverse energy unit.
    Inverse(f64),
}

/// A spectral density sampled on a frequency grid (not necessarily uniform).
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralDensity {
    pub omega: Vec<f64>,
    pub values: Vec<f64>,
}

impl SpectralDensity {
    pub fn tabulated(omega: Vec<f64>, values: Vec<f64>) -> Result<Self, BathError> {
        if omega.len() < 3 || omega.len() != values.len() {
            return Err(BathError::BadGrid);
        }
        if omega.windows(2).any(|w| w[1] <= w[0]) {
            return Err(BathError::BadGrid);
        }
        if let Some((o, v)) = omega.iter().zip(&values).find(|(_, v)| **v < 0.0) {
            return Err(BathError::NegativeDensity {
                omega: *o,
                value: *v,
            });
        }
        Ok(Self { omega, values })
    }

    /// `(p / pi) gamma / ((omega - center)^2 + gamma^2)` sampled on `omega`.
    pub fn lorentzian(p: f64, gamma: f64, center: f64, omega: Vec<f64>) -> Result<Self, BathError> {
        let values = omega
            .iter()
            .map(|w| p / std::f64::consts::PI * gamma / ((w - center).powi(2) + gamma * gamma))
            .collect();
        Self::tabulated(omega, values)
    }

    pub fn uniform_grid(start: f64, stop: f64, n: usize) -> Vec<f64> {
        let h = (stop - start) / (n - 1) as f64;
        (0..n).map(|i| start + h * i as f64).collect()
    }
}

/// Quadrature result with a per-time error estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationEstimate {
    pub t: Vec<f64>,
    pub values: Vec<C64>,
    /// `|I_h - I_2h| / 3` from the trapezoid rule on the full and the
    /// every-other-point grid.
    pub error: Vec<f64>,
}

/// `alpha(t) = int d omega J(omega) [coth(beta omega / 2) cos(omega t) - i sin(omega t)]`
/// by the trapezoid rule on the grid of `density`.
///
/// At zero temperature the kernel is `exp(-i omega t)` on the whole tabulated
/// support, so a density tabulated on negative frequencies is treated as part
/// of a two-sided bath spectrum.
pub fn correlation_from_spectral_density(
    density: &SpectralDensity,
    temperature: Temperature,
    t_grid: &[f64],
) -> Result<CorrelationEstimate, BathError> {
    let weights: Vec<f64> = match temperature {
        Temperature::Zero => density.values.clone(),
        Temperature::Inverse(beta) => density
            .omega
            .iter()
            .zip(&density.values)
            .map(|(&w, &j)| {
                let f = j / (beta * w / 2.0).tanh();
                if f.is_finite() {
                    Ok(f)
                } else {
                    Err(BathError::NonFiniteIntegrand { omega: w })
                }
            })
            .collect::<Result<_, _>>()?,
    };
    let kernel = |w: f64, t: f64, thermal_j: f64, j: f64| -> C64 {
        let (s, c) = (w * t).sin_cos();
        C64::new(thermal_j * c, -j * s)
    };

    let trapz = |stride: usize, t: f64| -> C64 {
        let idx: Vec<usize> = (0..density.omega.len()).step_by(stride).collect();
        let mut acc = C64::new(0.0, 0.0);
        for pair in idx.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let h = density.omega[b] - density.omega[a];
            let fa = kernel(density.omega[a], t, weights[a], density.values[a]);
            let fb = kernel(density.omega[b], t, weights[b], density.values[b]);
            acc += (fa + fb) * (0.5 * h);
        }
        acc
    };

    let mut values = Vec::with_capacity(t_grid.len());
    let mut error = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let fine = trapz(1, t);
        let coarse = trapz(2, t);
        values.push(fine);
        error.push((fine - coarse).norm() / 3.0);
    }
    Ok(CorrelationEstimate {
        t: t_grid.to_vec(),
        values,
        error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn paper_mode(p: f64) -> ExponentialMode {
        ExponentialMode::damped_vibration(p, 0.25, 1.0)
    }

    #[test]
    fn alpha_values() {
        let bath = ExponentialBath::uniform(2, paper_mode(0.5));
        assert_eq!(bath.alpha_at(0, 0.0).unwrap(), C64::new(0.5, 0.0));
        assert!(bath.alpha_at(1, 500.0).unwrap().norm() < 1e-50);
        let strong = ExponentialBath::uniform(1, paper_mode(1.8));
        let expect = 1.8 * (-0.25f64).exp() * C64::new(0.0, -1.0).exp();
        assert!((strong.alpha_at(0, 1.0).unwrap() - expect).norm() < 1e-15);
        assert!(matches!(
            bath.alpha_at(2, 0.0),
            Err(BathError::SiteOutOfRange { index: 2, .. })
        ));
    }

    #[test]
    fn validation() {
        let bad = ExponentialMode::new(C64::new(1.0, 0.0), C64::new(-0.1, 1.0));
        assert!(matches!(
            ExponentialBath::new(vec![vec![bad]]),
            Err(BathError::NonDecaying { site: 0, mode: 0, .. })
        ));
        let nan = ExponentialMode::new(C64::new(f64::NAN, 0.0), C64::new(0.1, 1.0));
        assert!(ExponentialBath::new(vec![vec![], vec![nan]]).is_err());
    }

    #[test]
    fn lorentzian_quadrature_matches_single_exponential() {
        let (p, gamma, center) = (0.5, 0.25, 1.0);
        let grid = SpectralDensity::uniform_grid(-400.0, 400.0, 160_001);
        let j = SpectralDensity::lorentzian(p, gamma, center, grid).unwrap();
        let ts = [0.0, 0.5, 1.0, 2.0, 5.0];
        let est = correlation_from_spectral_density(&j, Temperature::Zero, &ts).unwrap();
        let mode = ExponentialMode::damped_vibration(p, gamma, center);
        // Truncating the Lorentzian tails at |omega| = 400 loses about
        // 2 p gamma / (pi 400) of spectral weight.
        let tail = 2.0 * p * gamma / (std::f64::consts::PI * 400.0);
        for (i, &t) in ts.iter().enumerate() {
            let diff = (est.values[i] - mode.at(t)).norm();
            assert!(diff < tail + 10.0 * est.error[i] + 1e-6, "t={t} diff={diff}");
        }
    }

    #[test]
    fn narrow_peak_gives_undamped_oscillation() {
        let (p, center) = (0.7, 2.0);
        let gamma = 1e-3;
        let grid = SpectralDensity::uniform_grid(center - 20.0, center + 20.0, 400_001);
        let j = SpectralDensity::lorentzian(p, gamma, center, grid).unwrap();
        let est = correlation_from_spectral_density(&j, Temperature::Zero, &[0.0, 0.3, 1.0]).unwrap();
        for (i, t) in [0.0, 0.3, 1.0].iter().enumerate() {
            let expect = p * C64::new(0.0, -center * t).exp();
            assert!((est.values[i] - expect).norm() < 2e-3, "t={t}");
        }
    }

    #[test]
    fn thermal_alpha_at_zero_is_real_integral() {
        // Ohmic density with exponential cutoff on omega > 0.
        let omega = SpectralDensity::uniform_grid(1e-3, 30.0, 30_001);
        let values: Vec<f64> = omega.iter().map(|w| 0.2 * w * (-w / 2.0).exp()).collect();
        let j = SpectralDensity::tabulated(omega.clone(), values.clone()).unwrap();
        let beta = 1.5;
        let est = correlation_from_spectral_density(&j, Temperature::Inverse(beta), &[0.0]).unwrap();
        assert_eq!(est.values[0].im, 0.0);
        let direct: f64 = omega
            .windows(2)
            .zip(values.windows(2))
            .map(|(w, v)| {
                let f0 = v[0] / (beta * w[0] / 2.0).tanh();
                let f1 = v[1] / (beta * w[1] / 2.0).tanh();
                0.5 * (w[1] - w[0]) * (f0 + f1)
            })
            .sum();
        assert!((est.values[0].re - direct).abs() < 1e-12 * direct);
    }

    #[test]
    fn thermal_pole_is_diagnosed() {
        let omega = vec![0.0, 0.5, 1.0, 1.5];
        let j = SpectralDensity::tabulated(omega, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            correlation_from_spectral_density(&j, Temperature::Inverse(1.0), &[0.0]),
            Err(BathError::NonFiniteIntegrand { omega }) if omega == 0.0
        ));
    }

    #[test]
    fn negative_density_rejected() {
        assert!(matches!(
            SpectralDensity::tabulated(vec![0.0, 1.0, 2.0], vec![0.0, -1.0, 0.0]),
            Err(BathError::NegativeDensity { .. })
        ));
    }

    #[test]
    fn mode_spectrum_is_lorentzian() {
        let m = paper_mode(0.5);
        for w in [-3.0, 0.0, 1.0, 2.5] {
            let expect = 2.0 * 0.5 * 0.25 / (0.25f64.powi(2) + (w - 1.0f64).powi(2));
            assert!((m.spectrum(w) - expect).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn hermitian_extension(p in 0.0f64..3.0, g in 0.01f64..2.0, om in -3.0f64..3.0, t in 0.0f64..20.0) {
            let bath = ExponentialBath::uniform(1, ExponentialMode::damped_vibration(p, g, om));
            let a = bath.alpha(0, t).unwrap();
            let b = bath.alpha(0, -t).unwrap();
            prop_assert_eq!(a.conj(), b);
            prop_assert!(bath.alpha(0, 0.0).unwrap().re >= 0.0);
        }
    }
}
