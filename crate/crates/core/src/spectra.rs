//! Half-axis Fourier transforms of response grids and signal assembly.
//!
//! ```text
//! S_l^(+-)(w_tau, T, w_t) = Re int_0^inf int_0^inf r_l(tau, T, t) exp(+-i w_tau tau) exp(i w_t t)
//! ```
//!
//! evaluated with the trapezoid rule on the sampled half axes and zero padding.

use ndarray::{Array2, Axis};
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;
use thiserror::Error;

use crate::grid::UniformGrid;
use crate::response::{Pathway, ResponseGrid};
pub use crate::response::Sign;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectrumError {
    #[error("zero padding factor must be at least 2, got {0}")]
    Padding(usize),
    #[error("apodization time must be positive and finite")]
    Apodization,
    #[error("response grid is empty")]
    Empty,
    #[error("spectra do not share grids or waiting time")]
    GridMismatch,
    #[error("missing response for pathway {0}")]
    MissingPathway(Pathway),
    #[error("non-finite value in spectrum")]
    NonFinite,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectrumOptions {
    /// Transform length is `padding * samples`, rounded up to even.
    pub padding: usize,
    /// Time constant of the `exp(-(tau + t)/T_apo)` window.
    pub apodization: Option<f64>,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        Self {
            padding: 4,
            apodization: None,
        }
    }
}

impl SpectrumOptions {
    /// Apodized settings used for plotted spectra, `T_apo = t_max / 2`.
    pub fn for_plots(t_max: f64) -> Self {
        Self {
            padding: 4,
            apodization: Some(t_max / 2.0),
        }
    }

    fn validate(&self) -> Result<(), SpectrumError> {
        if self.padding < 2 {
            return Err(SpectrumError::Padding(self.padding));
        }
        if let Some(a) = self.apodization {
            if !(a > 0.0 && a.is_finite()) {
                return Err(SpectrumError::Apodization);
            }
        }
        Ok(())
    }

    fn fft_len(&self, n: usize) -> usize {
        let m = self.padding * n;
        m + (m & 1)
    }
}

/// Ascending angular frequencies of an fft-shifted transform of length `n`.
pub fn frequency_axis(n: usize, step: f64) -> Vec<f64> {
    let dw = 2.0 * PI / (n as f64 * step);
    let half = (n / 2) as isize;
    (0..n as isize).map(|j| (j - half) as f64 * dw).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum2D {
    pub omega_tau: Vec<f64>,
    pub omega_t: Vec<f64>,
    /// Rows follow `omega_tau`, columns `omega_t`.
    pub values: Array2<f64>,
    pub waiting: f64,
    pub label: String,
    /// Largest absolute value, used for max-normalized plots.
    pub peak: f64,
}

impl Spectrum2D {
    pub fn new(omega_tau: Vec<f64>, omega_t: Vec<f64>, values: Array2<f64>, waiting: f64, label: impl Into<String>) -> Result<Self, SpectrumError> {
        if values.dim() != (omega_tau.len(), omega_t.len()) {
            return Err(SpectrumError::GridMismatch);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SpectrumError::NonFinite);
        }
        let peak = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        Ok(Self {
            omega_tau,
            omega_t,
            values,
            waiting,
            label: label.into(),
            peak,
        })
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.omega_tau == other.omega_tau && self.omega_t == other.omega_t && self.waiting == other.waiting
    }

    /// `(omega_tau, omega_t)` of the largest absolute value.
    pub fn peak_position(&self) -> (f64, f64) {
        let mut best = (0, 0, -1.0);
        for ((i, k), v) in self.values.indexed_iter() {
            if v.abs() > best.2 {
                best = (i, k, v.abs());
            }
        }
        (self.omega_tau[best.0], self.omega_t[best.1])
    }

    fn combine(&self, other: &Self, sign: f64, label: &str) -> Result<Self, SpectrumError> {
        if !self.same_grid(other) {
            return Err(SpectrumError::GridMismatch);
        }
        Self::new(
            self.omega_tau.clone(),
            self.omega_t.clone(),
            (&self.values + &other.values) * sign,
            self.waiting,
            label,
        )
    }
}

/// Complex double transform before taking the real part.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    pub omega_tau: Vec<f64>,
    pub omega_t: Vec<f64>,
    pub values: Array2<C64>,
}

fn trapezoid_weights(n: usize) -> Vec<f64> {
    let mut w = vec![1.0; n];
    if n > 1 {
        w[0] = 0.5;
        w[n - 1] = 0.5;
    }
    w
}

fn fftshift<T: Copy>(v: &mut [T]) {
    let n = v.len();
    v.rotate_left(n - n / 2);
}

/// One-sided transforms of columns, reused across grids of the same shape.
struct Transformer {
    n_tau: usize,
    n_t: usize,
    tau_fft: Arc<dyn Fft<f64>>,
    t_fft: Arc<dyn Fft<f64>>,
}

impl Transformer {
    fn new(len_tau: usize, len_t: usize, sign: Sign, opts: &SpectrumOptions) -> Self {
        let (n_tau, n_t) = (opts.fft_len(len_tau), opts.fft_len(len_t));
        let mut planner = FftPlanner::new();
        // rustfft's inverse transform carries exp(+i w x).
        let tau_fft = match sign {
            Sign::Plus => planner.plan_fft_inverse(n_tau),
            Sign::Minus => planner.plan_fft_forward(n_tau),
        };
        Self {
            n_tau,
            n_t,
            tau_fft,
            t_fft: planner.plan_fft_inverse(n_t),
        }
    }

    fn apply(&self, r: &Array2<C64>, tau: &UniformGrid, t: &UniformGrid, apodization: Option<f64>) -> Array2<C64> {
        let (len_tau, len_t) = r.dim();
        let (w_tau, w_t) = (trapezoid_weights(len_tau), trapezoid_weights(len_t));
        let mut buf = Array2::<C64>::zeros((self.n_tau, self.n_t));
        for i in 0..len_tau {
            for k in 0..len_t {
                let mut w = w_tau[i] * w_t[k] * tau.step * t.step;
                if let Some(a) = apodization {
                    w *= (-(tau.value(i) + t.value(k)) / a).exp();
                }
                buf[[i, k]] = r[[i, k]] * w;
            }
        }
        let mut scratch = vec![C64::new(0.0, 0.0); self.t_fft.get_inplace_scratch_len().max(self.tau_fft.get_inplace_scratch_len())];
        for mut row in buf.axis_iter_mut(Axis(0)).take(len_tau) {
            let s = row.as_slice_mut().expect("standard layout");
            self.t_fft.process_with_scratch(s, &mut scratch);
            fftshift(s);
        }
        let mut col = vec![C64::new(0.0, 0.0); self.n_tau];
        for k in 0..self.n_t {
            for i in 0..self.n_tau {
                col[i] = buf[[i, k]];
            }
            self.tau_fft.process_with_scratch(&mut col, &mut scratch);
            fftshift(&mut col);
            for i in 0..self.n_tau {
                buf[[i, k]] = col[i];
            }
        }
        buf
    }
}

pub fn complex_spectrum(
    r: &Array2<C64>,
    tau: &UniformGrid,
    t: &UniformGrid,
    sign: Sign,
    opts: &SpectrumOptions,
) -> Result<ComplexSpectrum, SpectrumError> {
    opts.validate()?;
    if r.is_empty() {
        return Err(SpectrumError::Empty);
    }
    if r.dim() != (tau.len, t.len) {
        return Err(SpectrumError::GridMismatch);
    }
    let tr = Transformer::new(tau.len, t.len, sign, opts);
    Ok(ComplexSpectrum {
        omega_tau: frequency_axis(tr.n_tau, tau.step),
        omega_t: frequency_axis(tr.n_t, t.step),
        values: tr.apply(r, tau, t, opts.apodization),
    })
}

pub fn spectrum_pm(r: &ResponseGrid, sign: Sign, opts: &SpectrumOptions) -> Result<Spectrum2D, SpectrumError> {
    let c = complex_spectrum(&r.mean, &r.tau, &r.t, sign, opts)?;
    let label = format!("S{}{}", &r.pathway.label()[1..], if sign == Sign::Plus { "+" } else { "-" });
    Spectrum2D::new(c.omega_tau, c.omega_t, c.values.mapv(|z| z.re), r.waiting, label)
}

/// Pathway spectra transformed with the sign each one enters the signals with.
pub fn pathway_spectra(responses: &[&ResponseGrid], opts: &SpectrumOptions) -> Result<Vec<(Pathway, Spectrum2D)>, SpectrumError> {
    responses
        .par_iter()
        .map(|r| Ok((r.pathway, spectrum_pm(r, r.pathway.spectrum_sign(), opts)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Signals {
    pub gsb: Spectrum2D,
    pub se: Spectrum2D,
    pub esa: Spectrum2D,
}

impl Signals {
    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Spectrum2D)> {
        [("gsb", &self.gsb), ("se", &self.se), ("esa", &self.esa)].into_iter()
    }
}

/// `GSB = S3- + S4+`, `SE = S2- + S1+`, `ESA = -(S5- + S6+)`.
pub fn assemble_signals(spectra: &[(Pathway, Spectrum2D)]) -> Result<Signals, SpectrumError> {
    let get = |p: Pathway| {
        spectra
            .iter()
            .find(|(q, _)| *q == p)
            .map(|(_, s)| s)
            .ok_or(SpectrumError::MissingPathway(p))
    };
    let first = &spectra.first().ok_or(SpectrumError::Empty)?.1;
    if spectra.iter().any(|(_, s)| !s.same_grid(first)) {
        return Err(SpectrumError::GridMismatch);
    }
    Ok(Signals {
        gsb: get(Pathway::R3)?.combine(get(Pathway::R4)?, 1.0, "GSB")?,
        se: get(Pathway::R2)?.combine(get(Pathway::R1)?, 1.0, "SE")?,
        esa: get(Pathway::R5)?.combine(get(Pathway::R6)?, -1.0, "ESA")?,
    })
}

/// Transforms all six pathway responses at one waiting time and assembles the signals.
pub fn signals_from_responses(responses: &[&ResponseGrid], opts: &SpectrumOptions) -> Result<Signals, SpectrumError> {
    assemble_signals(&pathway_spectra(responses, opts)?)
}

/// `A(w) = Re int_0^inf R(t) exp(i w t) dt`.
pub fn absorption_spectrum(r: &[C64], t: &UniformGrid, opts: &SpectrumOptions) -> Result<(Vec<f64>, Vec<f64>), SpectrumError> {
    opts.validate()?;
    if r.is_empty() {
        return Err(SpectrumError::Empty);
    }
    if r.len() != t.len {
        return Err(SpectrumError::GridMismatch);
    }
    let n = opts.fft_len(r.len());
    let w = trapezoid_weights(r.len());
    let mut buf = vec![C64::new(0.0, 0.0); n];
    for (k, (x, wk)) in r.iter().zip(&w).enumerate() {
        let apo = opts.apodization.map_or(1.0, |a| (-t.value(k) / a).exp());
        buf[k] = x * (wk * t.step * apo);
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
    fftshift(&mut buf);
    Ok((frequency_axis(n, t.step), buf.iter().map(|z| z.re).collect()))
}

/// Rectangular frequency window `[tau.0, tau.1] x [t.0, t.1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyWindow {
    pub omega_tau: (f64, f64),
    pub omega_t: (f64, f64),
}

impl FrequencyWindow {
    pub fn square(min: f64, max: f64) -> Self {
        Self {
            omega_tau: (min, max),
            omega_t: (min, max),
        }
    }

    pub fn contains(&self, w_tau: f64, w_t: f64) -> bool {
        (self.omega_tau.0..=self.omega_tau.1).contains(&w_tau) && (self.omega_t.0..=self.omega_t.1).contains(&w_t)
    }

    /// Smallest box holding every point where some spectrum exceeds
    /// `threshold` times its own peak.
    pub fn auto(spectra: &[&Spectrum2D], threshold: f64) -> Option<Self> {
        let mut win: Option<Self> = None;
        for s in spectra {
            if s.peak == 0.0 {
                continue;
            }
            for ((i, k), v) in s.values.indexed_iter() {
                if v.abs() >= threshold * s.peak {
                    let (a, b) = (s.omega_tau[i], s.omega_t[k]);
                    let w = win.get_or_insert(Self {
                        omega_tau: (a, a),
                        omega_t: (b, b),
                    });
                    w.omega_tau = (w.omega_tau.0.min(a), w.omega_tau.1.max(a));
                    w.omega_t = (w.omega_t.0.min(b), w.omega_t.1.max(b));
                }
            }
        }
        win
    }
}
