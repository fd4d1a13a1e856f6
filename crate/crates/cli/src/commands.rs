//! Subcommand implementations. Each writes into an [`OutputDir`] and returns
//! a small summary that is also stored as a JSON report.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use dyadhops::heom::HeomEngine;
use dyadhops::noise::{empirical_covariance, SpectralNoiseGenerator};
use dyadhops::response::{
    linear_response_ensemble, response_ensemble, EnsembleOptions, LinearMethod, Pathway, ResponseEngine, ResponseGrid,
    ThirdOrderGrids,
};
use dyadhops::spectra::{
    absorption_spectrum, pathway_spectra, signals_from_responses, FrequencyWindow, Signals, Spectrum2D, SpectrumOptions,
};
use dyadhops::stats::{bootstrap_error, normalize_spectrum, signal_differences, BootstrapOptions, TrajectoryPool};
use dyadhops::C64;
use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{ReferenceKind, RunConfig};
use crate::format::{open_trajectories, read_array_file, OutputDir, TrajectoryShape};

const SIGNALS: [&str; 3] = ["gsb", "se", "esa"];

/// Runtime switches that are not part of the configuration file.
#[derive(Clone, Debug, Default)]
pub struct RunFlags {
    pub deterministic: bool,
}

fn ensemble_options(cfg: &RunConfig, flags: &RunFlags) -> EnsembleOptions {
    EnsembleOptions {
        n_traj: cfg.sampling.n_traj,
        seed: cfg.sampling.seed,
        first_trajectory: cfg.sampling.first_trajectory,
        deterministic: flags.deterministic,
    }
}

fn engine(cfg: &RunConfig) -> Result<ResponseEngine> {
    Ok(ResponseEngine::new(cfg.model()?, cfg.bath()?, cfg.hops)?)
}

fn has_all_pathways(pathways: &[Pathway]) -> bool {
    Pathway::ALL.iter().all(|p| pathways.contains(p))
}

/// Response grids, per-pathway spectra and (when all six pathways are
/// present) the three signals for every waiting time.
fn write_third_order(
    out: &OutputDir,
    pathways: &[Pathway],
    grids: &ThirdOrderGrids,
    responses: &[ResponseGrid],
    opts: &SpectrumOptions,
) -> Result<Vec<Option<Signals>>> {
    let tau = grids.tau.points();
    let t = grids.t.points();
    let mut all = Vec::new();
    for (iw, &w) in grids.waiting.iter().enumerate() {
        let at_w: Vec<&ResponseGrid> = responses.iter().filter(|r| r.waiting == w).collect();
        for r in &at_w {
            let meta = json!({ "quantity": "response", "pathway": r.pathway.label(), "waiting": w, "n_traj": r.n_traj });
            out.complex2(&format!("{}_T{iw}", r.pathway.label()), &r.mean, [("tau", &tau), ("t", &t)], meta.clone())?;
            if r.n_traj > 0 {
                out.real2(&format!("{}_T{iw}_se", r.pathway.label()), &r.std_err, [("tau", &tau), ("t", &t)], meta)?;
            }
        }
        for (p, s) in pathway_spectra(&at_w, opts)? {
            write_spectrum(out, &format!("S_{}_T{iw}", p.label()), &s, json!({ "pathway": p.label() }))?;
        }
        let signals = if has_all_pathways(pathways) {
            let s = signals_from_responses(&at_w, opts)?;
            for (name, spec) in s.iter() {
                write_spectrum(out, &format!("S_{name}_T{iw}"), spec, json!({ "signal": name }))?;
            }
            Some(s)
        } else {
            None
        };
        all.push(signals);
    }
    Ok(all)
}

fn write_spectrum(out: &OutputDir, name: &str, s: &Spectrum2D, extra: serde_json::Value) -> Result<()> {
    let mut meta = json!({ "quantity": "spectrum", "waiting": s.waiting, "label": s.label, "peak": s.peak });
    if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
        m.extend(e);
    }
    out.real2(name, &s.values, [("omega_tau", &s.omega_tau), ("omega_t", &s.omega_t)], meta)
}

/// Spectrum written by [`write_spectrum`], axes taken from its sidecar.
pub fn read_spectrum(dir: &Path, name: &str) -> Result<Spectrum2D> {
    let values = read_array_file(&dir.join(format!("{name}.bin")))?.real()?;
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{name}.json")))?)?;
    let axis = |k: &str| -> Result<Vec<f64>> {
        serde_json::from_value(side["axes"][k].clone()).with_context(|| format!("axis {k} of {name}"))
    };
    let values = values.into_dimensionality::<ndarray::Ix2>()?;
    let waiting = side["waiting"].as_f64().unwrap_or(0.0);
    Ok(Spectrum2D::new(axis("omega_tau")?, axis("omega_t")?, values, waiting, name)?)
}

fn window_for(cfg: &RunConfig, reference: &[Signals]) -> Result<FrequencyWindow> {
    if let Some(w) = cfg.fixed_window() {
        return Ok(w);
    }
    let all: Vec<&Spectrum2D> = reference.iter().flat_map(|s| s.iter().map(|(_, x)| x)).collect();
    FrequencyWindow::auto(&all, cfg.spectra.window_threshold).context("reference spectra vanish; set spectra.window")
}

#[derive(Debug, Serialize)]
pub struct TwoDSummary {
    pub n_traj: usize,
    pub failed: Vec<u64>,
    pub failure_rate: f64,
}

pub fn two_d(cfg: &RunConfig, flags: &RunFlags, out: &OutputDir) -> Result<TwoDSummary> {
    let engine = engine(cfg)?;
    let pathways = cfg.pathway_list()?;
    let grids = cfg.third_order_grids()?;
    let opts = ensemble_options(cfg, flags);
    let shape = TrajectoryShape {
        n_pathways: pathways.len(),
        n_waiting: grids.waiting.len(),
        n_tau: grids.tau.len,
        n_t: grids.t.len,
    };
    let mut writer = if cfg.sampling.store_trajectories {
        Some(out.trajectory_writer(shape)?)
    } else {
        None
    };
    let mut io_err = None;
    let ens = response_ensemble(&engine, &pathways, &grids, &opts, |rec| {
        if let Some(w) = writer.as_mut() {
            if let Err(e) = w.append(rec) {
                io_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing trajectories");
    }
    if let Some(w) = writer {
        w.finish()?;
    }
    write_third_order(out, &pathways, &grids, &ens.responses, &cfg.spectrum_options())?;
    let summary = TwoDSummary {
        n_traj: ens.n_traj,
        failure_rate: ens.failure_rate(),
        failed: ens.failed,
    };
    out.report("summary", &summary)?;
    Ok(summary)
}

#[derive(Debug, Serialize)]
pub struct ConvergenceEntry {
    pub waiting: f64,
    /// Integrated difference of GSB, SE and ESA.
    pub errors: [f64; 3],
}

#[derive(Debug, Serialize)]
pub struct HeomSummary {
    pub depth: usize,
    pub n_auxiliaries: usize,
    pub trace_drift: f64,
    pub convergence: Option<Vec<ConvergenceEntry>>,
    pub comparison: Option<Vec<ConvergenceEntry>>,
    pub window: Option<FrequencyWindow>,
}

fn heom_signals(cfg: &RunConfig, depth: usize) -> Result<(HeomEngine, Vec<ResponseGrid>, f64)> {
    let mut settings = cfg.heom;
    settings.depth = depth;
    let heom = HeomEngine::new(&cfg.model()?, &cfg.bath()?, settings)?;
    let grids = cfg.third_order_grids()?;
    let runs = heom.third_order_all(&cfg.pathway_list()?, &grids)?;
    let drift = runs.iter().map(|r| r.trace_drift).fold(0.0, f64::max);
    let responses = runs.iter().flat_map(|r| r.response_grids(&grids)).collect();
    Ok((heom, responses, drift))
}

fn signals_at(responses: &[ResponseGrid], grids: &ThirdOrderGrids, opts: &SpectrumOptions) -> Result<Vec<Signals>> {
    grids
        .waiting
        .iter()
        .map(|&w| {
            let at: Vec<&ResponseGrid> = responses.iter().filter(|r| r.waiting == w).collect();
            Ok(signals_from_responses(&at, opts)?)
        })
        .collect()
}

/// Reference spectra, optionally checked against depth + 2 and compared
/// with the signals of a stochastic run in `compare`.
pub fn heom_reference(cfg: &RunConfig, out: &OutputDir, convergence: bool, compare: Option<&Path>) -> Result<HeomSummary> {
    let pathways = cfg.pathway_list()?;
    let grids = cfg.third_order_grids()?;
    let opts = cfg.spectrum_options();
    let (heom, responses, drift) = heom_signals(cfg, cfg.heom.depth)?;
    let signals = write_third_order(out, &pathways, &grids, &responses, &opts)?;
    let mut summary = HeomSummary {
        depth: cfg.heom.depth,
        n_auxiliaries: heom.n_auxiliaries(),
        trace_drift: drift,
        convergence: None,
        comparison: None,
        window: None,
    };
    let needs_signals = convergence || compare.is_some();
    if !needs_signals {
        out.report("convergence", &summary)?;
        return Ok(summary);
    }
    ensure!(has_all_pathways(&pathways), "convergence and comparison need all six pathways");
    let signals: Vec<Signals> = signals.into_iter().flatten().collect();
    let window = window_for(cfg, &signals)?;
    summary.window = Some(window);
    if convergence {
        let (_, deeper, _) = heom_signals(cfg, cfg.heom.depth + 2)?;
        let deeper = signals_at(&deeper, &grids, &opts)?;
        summary.convergence = Some(
            signals
                .iter()
                .zip(&deeper)
                .map(|(a, b)| Ok(ConvergenceEntry { waiting: a.gsb.waiting, errors: signal_differences(a, b, &window)? }))
                .collect::<Result<_>>()?,
        );
    }
    if let Some(dir) = compare {
        let mut entries = Vec::new();
        for (iw, h) in signals.iter().enumerate() {
            let mut errors = [0.0; 3];
            for (k, (name, hs)) in h.iter().enumerate() {
                let other = read_spectrum(dir, &format!("S_{name}_T{iw}"))?;
                ensure!(other.same_grid(hs), "spectrum S_{name}_T{iw} in {} has a different grid", dir.display());
                let a = normalize_spectrum(hs, &window)?;
                let b = normalize_spectrum(&other, &window)?;
                let diff: Array2<f64> = &b.values - &a.values;
                let meta = json!({ "quantity": "difference", "signal": name, "waiting": hs.waiting, "window": window });
                out.real2(&format!("D_{name}_T{iw}"), &diff, [("omega_tau", &hs.omega_tau), ("omega_t", &hs.omega_t)], meta)?;
                errors[k] = dyadhops::stats::integrated_difference(&other, hs, &window)?;
            }
            entries.push(ConvergenceEntry { waiting: h.gsb.waiting, errors });
        }
        summary.comparison = Some(entries);
    }
    out.report("convergence", &summary)?;
    Ok(summary)
}

#[derive(Debug, Serialize)]
pub struct LinearSummary {
    pub n_traj: usize,
    /// Largest deviation between the two estimators in combined standard errors.
    pub max_deviation_sigma: f64,
    pub failed: Vec<u64>,
}

pub fn linear(cfg: &RunConfig, flags: &RunFlags, out: &OutputDir) -> Result<LinearSummary> {
    let engine = engine(cfg)?;
    let t = cfg.linear_grid()?;
    let tp = t.points();
    let opts = ensemble_options(cfg, flags);
    let sopts = cfg.linear_spectrum_options();
    let mut results = Vec::new();
    for method in [LinearMethod::Dyadic, LinearMethod::Decomposition] {
        let r = linear_response_ensemble(&engine, method, &t, &opts)?;
        let name = match method {
            LinearMethod::Dyadic => "dyadic",
            LinearMethod::Decomposition => "decomposition",
        };
        let meta = json!({ "quantity": "linear_response", "estimator": name, "n_traj": r.n_traj });
        out.complex1(&format!("linear_{name}"), &r.mean, ("t", &tp), meta.clone())?;
        out.real1(&format!("linear_{name}_se"), &r.std_err, ("t", &tp), meta)?;
        let (omega, abs) = absorption_spectrum(&r.mean, &t, &sopts)?;
        out.real1(&format!("absorption_{name}"), &abs, ("omega", &omega), json!({ "quantity": "absorption", "estimator": name }))?;
        results.push(r);
    }
    let (a, b) = (&results[0], &results[1]);
    let max_dev = a
        .mean
        .iter()
        .zip(&b.mean)
        .zip(a.std_err.iter().zip(&b.std_err))
        .map(|((x, y), (sx, sy))| {
            let se = (sx * sx + sy * sy).sqrt();
            if se > 0.0 {
                (x - y).norm() / se
            } else if (x - y).norm() < 1e-12 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max);
    let mut failed = a.failed.clone();
    failed.extend(&b.failed);
    let summary = LinearSummary {
        n_traj: a.n_traj.min(b.n_traj),
        max_deviation_sigma: max_dev,
        failed,
    };
    out.report("summary", &summary)?;
    Ok(summary)
}

#[derive(Debug, Serialize)]
pub struct NoiseSite {
    pub site: usize,
    pub pass: bool,
    /// Largest deviation of `M[z z*]` from the target in standard errors.
    pub worst_cov_sigma: f64,
    /// Largest deviation of `M[z z]` from zero in standard errors.
    pub worst_pseudo_sigma: f64,
}

#[derive(Debug, Serialize)]
pub struct NoiseReport {
    pub pass: bool,
    pub n_traj: usize,
    pub sigma: f64,
    pub sites: Vec<NoiseSite>,
}

fn sigma_of(d: f64, se: f64) -> f64 {
    if se > 0.0 {
        d / se
    } else if d == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

pub fn noise_check(cfg: &RunConfig, out: &OutputDir) -> Result<NoiseReport> {
    let nc = &cfg.noise_check;
    let bath = cfg.bath()?;
    let dt = cfg.hops.noise_dt;
    ensure!(nc.n_traj >= 2, "noise_check.n_traj must be at least 2");
    ensure!(nc.duration > nc.max_lag && nc.max_lag >= 0.0, "noise_check.duration must exceed max_lag");
    let n_steps = (nc.duration / dt).ceil() as usize;
    let max_lag = (nc.max_lag / dt).round() as usize;
    let gen = SpectralNoiseGenerator::new(&bath, dt, n_steps)?;
    let samples: Vec<_> = (0..nc.n_traj as u64).into_par_iter().map(|j| gen.generate(cfg.sampling.seed, j)).collect();
    let target = cfg.noise_target()?;
    // Sites without modes carry no noise rows.
    let silent = vec![C64::new(0.0, 0.0); n_steps + 1];
    let mut sites = Vec::new();
    for site in 0..bath.n_sites() {
        let rows: Vec<&[C64]> = samples
            .iter()
            .map(|s| if s.values[site].is_empty() { silent.as_slice() } else { s.values[site].as_slice() })
            .collect();
        let est = empirical_covariance(&rows, &rows, dt, max_lag);
        let alpha = |t: f64| -> Result<C64> {
            Ok(match &target {
                Some(modes) => modes.iter().map(|m| m.at(t)).sum(),
                None => bath.alpha(site, t)?,
            })
        };
        let mut csv = String::from("lag,cov_re,cov_im,cov_se,alpha_re,alpha_im,pseudo_re,pseudo_im,pseudo_se\n");
        let (mut wc, mut wp) = (0.0f64, 0.0f64);
        for k in 0..=max_lag {
            let t = est.lag_time(k);
            let a = alpha(t)?;
            wc = wc.max(sigma_of((est.cov[k] - a).norm(), est.cov_se[k]));
            wp = wp.max(sigma_of(est.pseudo[k].norm(), est.pseudo_se[k]));
            csv.push_str(&format!(
                "{t},{},{},{},{},{},{},{},{}\n",
                est.cov[k].re, est.cov[k].im, est.cov_se[k], a.re, a.im, est.pseudo[k].re, est.pseudo[k].im, est.pseudo_se[k]
            ));
        }
        out.csv(&format!("noise_site{site}"), &csv, json!({ "quantity": "noise_covariance", "site": site }))?;
        sites.push(NoiseSite {
            site,
            pass: wc <= nc.sigma && wp <= nc.sigma,
            worst_cov_sigma: wc,
            worst_pseudo_sigma: wp,
        });
    }
    let report = NoiseReport {
        pass: sites.iter().all(|s| s.pass),
        n_traj: nc.n_traj,
        sigma: nc.sigma,
        sites,
    };
    out.report("noise_check", &report)?;
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct ErrorSummary {
    pub pool: usize,
    pub window: FrequencyWindow,
    pub curves: Vec<CurveSummary>,
}

#[derive(Debug, Serialize)]
pub struct CurveSummary {
    pub waiting: f64,
    pub n_traj: Vec<usize>,
    pub errors: Vec<[f64; 3]>,
    /// Log-log slopes of GSB, SE and ESA.
    pub slopes: [f64; 3],
}

/// Trajectory pool from an existing container, or from a fresh run.
fn load_pool(cfg: &RunConfig, flags: &RunFlags, from: Option<&Path>) -> Result<TrajectoryPool> {
    let pathways = cfg.pathway_list()?;
    let grids = cfg.third_order_grids()?;
    let mut pool = TrajectoryPool::with_capacity(pathways.clone(), grids.clone(), cfg.sampling.n_traj);
    if let Some(path) = from {
        let mut r = open_trajectories(path)?;
        let want = TrajectoryShape {
            n_pathways: pathways.len(),
            n_waiting: grids.waiting.len(),
            n_tau: grids.tau.len,
            n_t: grids.t.len,
        };
        ensure!(r.shape == want, "container layout {:?} does not match the configuration {:?}", r.shape, want);
        while let Some(rec) = r.next_record()? {
            pool.push(&rec)?;
        }
        return Ok(pool);
    }
    let engine = engine(cfg)?;
    let mut err = None;
    response_ensemble(&engine, &pathways, &grids, &ensemble_options(cfg, flags), |rec| {
        if let Err(e) = pool.push(rec) {
            err.get_or_insert(e);
        }
    })?;
    if let Some(e) = err {
        return Err(e.into());
    }
    Ok(pool)
}

pub fn error_analysis(cfg: &RunConfig, flags: &RunFlags, out: &OutputDir, trajectories: Option<&Path>) -> Result<ErrorSummary> {
    let grids = cfg.third_order_grids()?;
    let pathways = cfg.pathway_list()?;
    ensure!(has_all_pathways(&pathways), "error analysis needs all six pathways");
    let pool = load_pool(cfg, flags, trajectories)?;
    if pool.is_empty() {
        bail!("no successful trajectories in the pool");
    }
    let opts = cfg.spectrum_options();
    let reference = match cfg.error.reference {
        ReferenceKind::Heom => {
            let (_, responses, _) = heom_signals(cfg, cfg.heom.depth)?;
            signals_at(&responses, &grids, &opts)?
        }
        ReferenceKind::Pool => pool.mean_signals(&opts)?,
    };
    let window = window_for(cfg, &reference)?;
    let bopts = BootstrapOptions {
        n_boot: cfg.error.n_boot,
        seed: cfg.sampling.seed,
        resampling: cfg.error.resampling,
        window,
        spectrum: opts,
    };
    let curves = bootstrap_error(&pool, &reference, &cfg.error.n_traj, &bopts)?;
    let mut summaries = Vec::new();
    for (iw, c) in curves.iter().enumerate() {
        let slopes = if c.n_traj.len() >= 2 { c.slopes()? } else { [f64::NAN; 3] };
        out.csv(
            &format!("error_T{iw}"),
            &c.to_csv(),
            json!({
                "quantity": "error_curve",
                "waiting": c.waiting,
                "n_boot": c.n_boot,
                "window": c.window,
                "pool": pool.len(),
                "reference": cfg.error.reference,
                "resampling": cfg.error.resampling,
                "signals": SIGNALS,
            }),
        )?;
        summaries.push(CurveSummary {
            waiting: c.waiting,
            n_traj: c.n_traj.clone(),
            errors: c.errors.clone(),
            slopes,
        });
    }
    let summary = ErrorSummary {
        pool: pool.len(),
        window,
        curves: summaries,
    };
    out.report("errors", &summary)?;
    Ok(summary)
}
