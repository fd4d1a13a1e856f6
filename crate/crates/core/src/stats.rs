//! Spectrum normalization, the integrated difference and bootstrap error curves.

use ndarray::Array2;
use num_complex::{Complex32, Complex64 as C64};
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::response::{Pathway, ResponseGrid, ThirdOrderGrids, TrajectoryRecord};
use crate::rng::{stream_rng, Domain};
use crate::spectra::{FrequencyWindow, Signals, Spectrum2D, SpectrumError, SpectrumOptions, signals_from_responses};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("spectra do not share grids")]
    GridMismatch,
    #[error("window {0:?} is not inside the frequency grid")]
    WindowOutside(FrequencyWindow),
    #[error("window contains no grid points")]
    EmptyWindow,
    #[error("spectrum integrates to zero over the window")]
    ZeroIntegral,
    #[error("trajectory pool is empty")]
    EmptyPool,
    #[error("record layout does not match the pool")]
    Layout,
    #[error("requested {requested} distinct trajectories from a pool of {pool}")]
    PoolTooSmall { requested: usize, pool: usize },
    #[error("need at least {0} points for a slope fit")]
    TooFewPoints(usize),
    #[error("reference has {got} waiting times, pool has {expected}")]
    ReferenceCount { expected: usize, got: usize },
    #[error(transparent)]
    Spectrum(#[from] SpectrumError),
}

/// Index range and trapezoid weights of the window along one axis.
fn axis_weights(axis: &[f64], range: (f64, f64)) -> Result<(usize, Vec<f64>), StatsError> {
    let tol = 1e-9 * (axis[axis.len() - 1] - axis[0]).abs().max(1.0);
    let lo = axis.iter().position(|&w| w >= range.0 - tol);
    let hi = axis.iter().rposition(|&w| w <= range.1 + tol);
    let (lo, hi) = match (lo, hi) {
        (Some(a), Some(b)) if a <= b => (a, b),
        _ => return Err(StatsError::EmptyWindow),
    };
    let step = if axis.len() > 1 { axis[1] - axis[0] } else { 1.0 };
    let n = hi - lo + 1;
    let mut w = vec![step; n];
    if n > 1 {
        w[0] *= 0.5;
        w[n - 1] *= 0.5;
    }
    Ok((lo, w))
}

fn check_window(s: &Spectrum2D, window: &FrequencyWindow) -> Result<(), StatsError> {
    let inside = |axis: &[f64], r: (f64, f64)| {
        let tol = 1e-9 * (axis[axis.len() - 1] - axis[0]).abs().max(1.0);
        r.0 <= r.1 && r.0 >= axis[0] - tol && r.1 <= axis[axis.len() - 1] + tol
    };
    if s.omega_tau.is_empty() || s.omega_t.is_empty() || !inside(&s.omega_tau, window.omega_tau) || !inside(&s.omega_t, window.omega_t) {
        return Err(StatsError::WindowOutside(*window));
    }
    Ok(())
}

/// Windowed 2D trapezoid of `f(S(w_tau, w_t))`.
fn windowed_integral(s: &Spectrum2D, window: &FrequencyWindow, f: impl Fn(usize, usize, f64) -> f64) -> Result<f64, StatsError> {
    check_window(s, window)?;
    let (i0, wi) = axis_weights(&s.omega_tau, window.omega_tau)?;
    let (k0, wk) = axis_weights(&s.omega_t, window.omega_t)?;
    let mut acc = 0.0;
    for (di, a) in wi.iter().enumerate() {
        for (dk, b) in wk.iter().enumerate() {
            let (i, k) = (i0 + di, k0 + dk);
            acc += a * b * f(i, k, s.values[[i, k]]);
        }
    }
    Ok(acc)
}

/// Windowed L1 integral `int int |S|`.
pub fn l1_integral(s: &Spectrum2D, window: &FrequencyWindow) -> Result<f64, StatsError> {
    windowed_integral(s, window, |_, _, v| v.abs())
}

/// Divides `s` by its windowed L1 integral.
pub fn normalize_spectrum(s: &Spectrum2D, window: &FrequencyWindow) -> Result<Spectrum2D, StatsError> {
    let norm = l1_integral(s, window)?;
    if norm == 0.0 || !norm.is_finite() {
        return Err(StatsError::ZeroIntegral);
    }
    Ok(Spectrum2D::new(
        s.omega_tau.clone(),
        s.omega_t.clone(),
        &s.values / norm,
        s.waiting,
        s.label.clone(),
    )?)
}

/// `E = int int |S1/|S1| - S2/|S2||` over the window.
pub fn integrated_difference(a: &Spectrum2D, b: &Spectrum2D, window: &FrequencyWindow) -> Result<f64, StatsError> {
    if a.omega_tau != b.omega_tau || a.omega_t != b.omega_t {
        return Err(StatsError::GridMismatch);
    }
    let (na, nb) = (normalize_spectrum(a, window)?, normalize_spectrum(b, window)?);
    windowed_integral(&na, window, |i, k, v| (v - nb.values[[i, k]]).abs())
}

/// `[E_GSB, E_SE, E_ESA]`.
pub fn signal_differences(a: &Signals, b: &Signals, window: &FrequencyWindow) -> Result<[f64; 3], StatsError> {
    Ok([
        integrated_difference(&a.gsb, &b.gsb, window)?,
        integrated_difference(&a.se, &b.se, window)?,
        integrated_difference(&a.esa, &b.esa, window)?,
    ])
}

/// Per-trajectory response grids kept in single precision for resampling.
#[derive(Clone, Debug)]
pub struct TrajectoryPool {
    pathways: Vec<Pathway>,
    grids: ThirdOrderGrids,
    data: Vec<Complex32>,
    indices: Vec<u64>,
}

impl TrajectoryPool {
    pub fn new(pathways: Vec<Pathway>, grids: ThirdOrderGrids) -> Self {
        Self {
            pathways,
            grids,
            data: Vec::new(),
            indices: Vec::new(),
        }
    }

    pub fn with_capacity(pathways: Vec<Pathway>, grids: ThirdOrderGrids, n: usize) -> Self {
        let mut p = Self::new(pathways, grids);
        p.data.reserve_exact(n * p.stride());
        p
    }

    fn block(&self) -> usize {
        self.grids.tau.len * self.grids.t.len
    }

    fn stride(&self) -> usize {
        self.pathways.len() * self.grids.waiting.len() * self.block()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn pathways(&self) -> &[Pathway] {
        &self.pathways
    }

    pub fn grids(&self) -> &ThirdOrderGrids {
        &self.grids
    }

    /// Trajectory indices in pool order.
    pub fn trajectory_indices(&self) -> &[u64] {
        &self.indices
    }

    /// Adds a successful trajectory; failed records are skipped.
    pub fn push(&mut self, rec: &TrajectoryRecord) -> Result<bool, StatsError> {
        if !rec.ok {
            return Ok(false);
        }
        if rec.grids.len() * self.block() != self.stride() || rec.grids.iter().any(|g| g.len() != self.block()) {
            return Err(StatsError::Layout);
        }
        for g in &rec.grids {
            self.data.extend(g.iter().map(|z| Complex32::new(z.re as f32, z.im as f32)));
        }
        self.indices.push(rec.index);
        Ok(true)
    }

    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            pathways: self.pathways.clone(),
            grids: self.grids.clone(),
            data: self.data[..n * self.stride()].to_vec(),
            indices: self.indices[..n].to_vec(),
        }
    }

    fn trajectory(&self, j: usize) -> &[Complex32] {
        let s = self.stride();
        &self.data[j * s..(j + 1) * s]
    }

    /// Mean over the given pool positions (repeats allowed).
    pub fn mean_of(&self, picks: impl IntoIterator<Item = usize>) -> Vec<C64> {
        let mut acc = vec![C64::new(0.0, 0.0); self.stride()];
        let mut n = 0usize;
        for j in picks {
            for (a, v) in acc.iter_mut().zip(self.trajectory(j)) {
                *a += C64::new(v.re as f64, v.im as f64);
            }
            n += 1;
        }
        let inv = 1.0 / n.max(1) as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        acc
    }

    /// Response grids for every pathway and waiting time from a flat mean.
    pub fn response_grids(&self, flat: &[C64], n_traj: usize) -> Vec<Vec<ResponseGrid>> {
        let n_w = self.grids.waiting.len();
        let shape = (self.grids.tau.len, self.grids.t.len);
        (0..n_w)
            .map(|iw| {
                self.pathways
                    .iter()
                    .enumerate()
                    .map(|(ip, &p)| {
                        let off = (ip * n_w + iw) * self.block();
                        ResponseGrid {
                            pathway: p,
                            waiting: self.grids.waiting[iw],
                            tau: self.grids.tau,
                            t: self.grids.t,
                            mean: Array2::from_shape_vec(shape, flat[off..off + self.block()].to_vec()).expect("block shape"),
                            std_err: Array2::zeros(shape),
                            n_traj,
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Signals of a flat mean, one entry per waiting time.
    pub fn signals_of(&self, flat: &[C64], n_traj: usize, opts: &SpectrumOptions) -> Result<Vec<Signals>, StatsError> {
        self.response_grids(flat, n_traj)
            .iter()
            .map(|rs| Ok(signals_from_responses(&rs.iter().collect::<Vec<_>>(), opts)?))
            .collect()
    }

    pub fn mean_signals(&self, opts: &SpectrumOptions) -> Result<Vec<Signals>, StatsError> {
        if self.is_empty() {
            return Err(StatsError::EmptyPool);
        }
        self.signals_of(&self.mean_of(0..self.len()), self.len(), opts)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    #[default]
    WithReplacement,
    WithoutReplacement,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub n_boot: usize,
    pub seed: u64,
    pub resampling: Resampling,
    pub window: FrequencyWindow,
    pub spectrum: SpectrumOptions,
}

/// Mean integrated difference versus ensemble size at one waiting time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurve {
    pub waiting: f64,
    pub n_traj: Vec<usize>,
    /// `[E_GSB, E_SE, E_ESA]` per ensemble size.
    pub errors: Vec<[f64; 3]>,
    pub n_boot: usize,
    pub window: FrequencyWindow,
}

impl ErrorCurve {
    pub fn signal(&self, s: usize) -> Vec<f64> {
        self.errors.iter().map(|e| e[s]).collect()
    }

    /// Least-squares slope of `log E` against `log N` for each signal.
    pub fn slopes(&self) -> Result<[f64; 3], StatsError> {
        Ok([
            loglog_slope(&self.n_traj, &self.signal(0))?,
            loglog_slope(&self.n_traj, &self.signal(1))?,
            loglog_slope(&self.n_traj, &self.signal(2))?,
        ])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("n_traj,E_GSB,E_SE,E_ESA\n");
        for (n, e) in self.n_traj.iter().zip(&self.errors) {
            s.push_str(&format!("{n},{:.12e},{:.12e},{:.12e}\n", e[0], e[1], e[2]));
        }
        s
    }
}

pub fn loglog_slope(n: &[usize], e: &[f64]) -> Result<f64, StatsError> {
    let pts: Vec<(f64, f64)> = n
        .iter()
        .zip(e)
        .filter(|(&n, &e)| n > 0 && e > 0.0)
        .map(|(&n, &e)| ((n as f64).ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(StatsError::TooFewPoints(2));
    }
    let m = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / m, a.1 + p.1 / m));
    let (sxy, sxx) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + (p.0 - mx) * (p.1 - my), a.1 + (p.0 - mx).powi(2)));
    if sxx == 0.0 {
        return Err(StatsError::TooFewPoints(2));
    }
    Ok(sxy / sxx)
}

fn draw<R: Rng>(rng: &mut R, pool: usize, n: usize, mode: Resampling) -> Vec<usize> {
    match mode {
        Resampling::WithReplacement => (0..n).map(|_| rng.random_range(0..pool)).collect(),
        Resampling::WithoutReplacement => {
            let mut v = index::sample(rng, pool, n).into_vec();
            v.sort_unstable();
            v
        }
    }
}

/// Bootstrap error curves, one per waiting time of the pool. `reference`
/// holds the signals every resampled ensemble is compared with.
pub fn bootstrap_error(
    pool: &TrajectoryPool,
    reference: &[Signals],
    n_traj_list: &[usize],
    opts: &BootstrapOptions,
) -> Result<Vec<ErrorCurve>, StatsError> {
    if pool.is_empty() {
        return Err(StatsError::EmptyPool);
    }
    let n_w = pool.grids.waiting.len();
    if reference.len() != n_w {
        return Err(StatsError::ReferenceCount {
            expected: n_w,
            got: reference.len(),
        });
    }
    let mut per_n = Vec::with_capacity(n_traj_list.len());
    for &n in n_traj_list {
        if n > pool.len() {
            match opts.resampling {
                Resampling::WithReplacement => log::warn!("resampling {n} trajectories from a pool of {}", pool.len()),
                Resampling::WithoutReplacement => {
                    return Err(StatsError::PoolTooSmall {
                        requested: n,
                        pool: pool.len(),
                    })
                }
            }
        }
        let samples: Vec<Vec<[f64; 3]>> = (0..opts.n_boot)
            .into_par_iter()
            .map(|b| {
                let mut rng = stream_rng(opts.seed, b as u64, n as u64, Domain::Bootstrap);
                let picks = draw(&mut rng, pool.len(), n, opts.resampling);
                let signals = pool.signals_of(&pool.mean_of(picks), n, &opts.spectrum)?;
                signals
                    .iter()
                    .zip(reference)
                    .map(|(s, r)| signal_differences(s, r, &opts.window))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<_, _>>()?;
        let mut mean = vec![[0.0; 3]; n_w];
        for s in &samples {
            for (m, e) in mean.iter_mut().zip(s) {
                for c in 0..3 {
                    m[c] += e[c] / opts.n_boot as f64;
                }
            }
        }
        per_n.push(mean);
    }
    Ok((0..n_w)
        .map(|iw| ErrorCurve {
            waiting: pool.grids.waiting[iw],
            n_traj: n_traj_list.to_vec(),
            errors: per_n.iter().map(|m| m[iw]).collect(),
            n_boot: opts.n_boot,
            window: opts.window,
        })
        .collect())
}

/// Logarithmically spaced ensemble sizes from `lo` to `hi` inclusive.
pub fn log_spaced(lo: usize, hi: usize, count: usize) -> Vec<usize> {
    if count < 2 || lo >= hi {
        return vec![hi];
    }
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    let mut v: Vec<usize> = (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp().round() as usize)
        .collect();
    v.dedup();
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(values: Array2<f64>) -> Spectrum2D {
        let n = values.nrows();
        let m = values.ncols();
        let ax = |n: usize| (0..n).map(|i| i as f64 * 0.5 - 1.0).collect::<Vec<_>>();
        Spectrum2D::new(ax(n), ax(m), values, 0.0, "x").unwrap()
    }

    #[test]
    fn slope_of_power_law() {
        let n = [100, 1000, 10000];
        let e: Vec<f64> = n.iter().map(|&n| 3.0 / (n as f64).sqrt()).collect();
        assert!((loglog_slope(&n, &e).unwrap() + 0.5).abs() < 1e-12);
        assert!(loglog_slope(&[5], &[1.0]).is_err());
    }

    #[test]
    fn normalization_is_scale_free() {
        let a = spec(Array2::from_shape_fn((5, 5), |(i, k)| (i as f64 - k as f64).sin()));
        let w = FrequencyWindow::square(-1.0, 1.0);
        let na = normalize_spectrum(&a, &w).unwrap();
        assert!((l1_integral(&na, &w).unwrap() - 1.0).abs() < 1e-12);
        let b = spec(&a.values * 7.0);
        assert!(integrated_difference(&a, &b, &w).unwrap() < 1e-14);
        let nn = normalize_spectrum(&na, &w).unwrap();
        assert!((&nn.values - &na.values).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn window_errors() {
        let a = spec(Array2::zeros((3, 3)));
        let w = FrequencyWindow::square(-1.0, 0.0);
        assert_eq!(normalize_spectrum(&a, &w), Err(StatsError::ZeroIntegral));
        assert!(matches!(normalize_spectrum(&a, &FrequencyWindow::square(-5.0, 0.0)), Err(StatsError::WindowOutside(_))));
    }

    #[test]
    fn log_spacing() {
        assert_eq!(log_spaced(100, 10000, 3), vec![100, 1000, 10000]);
        assert_eq!(log_spaced(10, 10, 4), vec![10]);
    }
}
