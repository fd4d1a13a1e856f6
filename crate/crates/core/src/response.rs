//! Perturbative response functions from dyadic hierarchy trajectories.
//!
//! A response of order `M` is built from a sequence of one-sided interactions
//! `(v_K, v_B)` acting on the dyad `(phi_B, phi_K)` and a final observable.
//! For the nonlinear equation every trajectory is weighted by the norm ratios
//!
//! ```text
//! I_j = |V_j psi(t_j)|^2 / |psi(t_{j+1})|^2,   R(z) = (prod_j I_j) <psi|F|psi>
//! ```
//!
//! where `t_{M+1}` is the detection time. For the linear equation the
//! unnormalized dyad already averages to the reduced operator and all `I_j`
//! are one.
//!
//! Third-order trajectories branch: the state after the first interaction is
//! propagated once along the coherence time axis and copied at every grid
//! point, so all grid points of one trajectory share the same noise.

use std::sync::Arc;

use nalgebra::DMatrix;
use ndarray::Array2;
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bath::ExponentialBath;
use crate::grid::{steps_of, GridError, UniformGrid};
use crate::hops::{Equation, HopsError, HopsGenerator, LaneState};
use crate::model::{
    build_coupling_operators, build_dipole_operators, build_exciton_hamiltonian, build_state_space,
    sample_disorder, DyadicOperator, ExcitonModel, ModelError, StateSpace, SystemOperator,
};
use crate::noise::{NoiseError, NoiseTrajectory, SpectralNoiseGenerator};
use crate::rng::{stream_rng, Domain};

/// Trajectories propagated together in one SIMD batch.
pub const LANES: usize = 8;
const ZERO: C64 = C64::new(0.0, 0.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResponseError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Hops(#[from] HopsError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("interaction {0} must have exactly one non-identity operator")]
    NotOneSided(usize),
    #[error("pulse sequence needs one interval per interaction and at least one interaction")]
    IntervalCount,
    #[error("interval {0} must be finite, non-negative and match the readout grid")]
    BadInterval(usize),
    #[error("waiting times must be non-negative and strictly increasing")]
    BadWaiting,
    #[error("bath has {bath} sites, model has {model}")]
    SiteCount { model: usize, bath: usize },
    #[error("trajectory failed: non-finite state at t = {0}")]
    TrajectoryFailed(f64),
    #[error("all {0} trajectories failed")]
    AllFailed(usize),
    #[error("ensemble needs at least one trajectory")]
    NoTrajectories,
    #[error("deterministic reference calculations do not support static disorder")]
    DisorderUnsupported,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorTag {
    Identity,
    DipolePlus,
    DipoleMinus,
    /// `-mu_+`, the interaction with a unit positive-frequency field.
    FieldPlus,
    /// `-mu_-`.
    FieldMinus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionPair {
    pub ket: OperatorTag,
    pub bra: OperatorTag,
}

impl InteractionPair {
    pub const fn ket(op: OperatorTag) -> Self {
        Self {
            ket: op,
            bra: OperatorTag::Identity,
        }
    }

    pub const fn bra(op: OperatorTag) -> Self {
        Self {
            ket: OperatorTag::Identity,
            bra: op,
        }
    }
}

/// Ordered one-sided interactions, the time after each one, and the
/// observable. The last interval is the detection window.
#[derive(Clone, Debug, PartialEq)]
pub struct PulseSequence {
    interactions: Vec<InteractionPair>,
    intervals: Vec<f64>,
    observable: OperatorTag,
}

impl PulseSequence {
    pub fn new(interactions: Vec<InteractionPair>, intervals: Vec<f64>, observable: OperatorTag) -> Result<Self, ResponseError> {
        if interactions.is_empty() || interactions.len() != intervals.len() {
            return Err(ResponseError::IntervalCount);
        }
        for (j, pair) in interactions.iter().enumerate() {
            let id = OperatorTag::Identity;
            if (pair.ket == id) == (pair.bra == id) {
                return Err(ResponseError::NotOneSided(j));
            }
        }
        if let Some(j) = intervals.iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(ResponseError::BadInterval(j));
        }
        Ok(Self {
            interactions,
            intervals,
            observable,
        })
    }

    pub fn order(&self) -> usize {
        self.interactions.len()
    }

    pub fn interactions(&self) -> &[InteractionPair] {
        &self.interactions
    }

    pub fn intervals(&self) -> &[f64] {
        &self.intervals
    }

    pub fn observable(&self) -> OperatorTag {
        self.observable
    }

    /// Linear absorption: `mu_+` on the ket, then `mu_-` is measured.
    pub fn linear(t_max: f64) -> Self {
        Self::new(
            vec![InteractionPair::ket(OperatorTag::DipolePlus)],
            vec![t_max],
            OperatorTag::DipoleMinus,
        )
        .expect("valid by construction")
    }

    pub fn third_order(pathway: Pathway, tau: f64, waiting: f64, t: f64) -> Self {
        Self::new(pathway.interactions().to_vec(), vec![tau, waiting, t], OperatorTag::DipoleMinus)
            .expect("valid by construction")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sign {
    Plus,
    Minus,
}

/// The six third-order Liouville pathways of a three-level exciton ladder in
/// the rotating-wave approximation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pathway {
    R1,
    R2,
    R3,
    R4,
    R5,
    R6,
}

impl Pathway {
    pub const ALL: [Pathway; 6] = [
        Pathway::R1,
        Pathway::R2,
        Pathway::R3,
        Pathway::R4,
        Pathway::R5,
        Pathway::R6,
    ];

    pub fn interactions(self) -> [InteractionPair; 3] {
        use OperatorTag::{FieldMinus as M, FieldPlus as P};
        let (k, b) = (InteractionPair::ket, InteractionPair::bra);
        match self {
            Pathway::R1 => [k(P), b(P), b(M)],
            Pathway::R2 => [b(P), k(P), b(M)],
            Pathway::R3 => [b(P), b(M), k(P)],
            Pathway::R4 => [k(P), k(M), k(P)],
            Pathway::R5 => [b(P), k(P), k(P)],
            Pathway::R6 => [k(P), b(P), k(P)],
        }
    }

    /// Sign of the coherence-time kernel in the spectrum this pathway enters.
    pub fn spectrum_sign(self) -> Sign {
        match self {
            Pathway::R1 | Pathway::R4 | Pathway::R6 => Sign::Plus,
            Pathway::R2 | Pathway::R3 | Pathway::R5 => Sign::Minus,
        }
    }

    pub fn is_excited_state_absorption(self) -> bool {
        matches!(self, Pathway::R5 | Pathway::R6)
    }

    pub fn label(self) -> &'static str {
        match self {
            Pathway::R1 => "r1",
            Pathway::R2 => "r2",
            Pathway::R3 => "r3",
            Pathway::R4 => "r4",
            Pathway::R5 => "r5",
            Pathway::R6 => "r6",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.label().eq_ignore_ascii_case(s))
    }
}

impl std::fmt::Display for Pathway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// System operators of a model on its state space.
#[derive(Clone, Debug)]
pub struct SystemOperators {
    pub space: StateSpace,
    pub hamiltonian: SystemOperator,
    pub couplings: Vec<SystemOperator>,
    pub mu_plus: SystemOperator,
    pub mu_minus: SystemOperator,
}

impl SystemOperators {
    pub fn new(model: &ExcitonModel) -> Result<Self, ModelError> {
        model.validate()?;
        let space = build_state_space(model);
        let (mu_plus, mu_minus) = build_dipole_operators(model, &space)?;
        Ok(Self {
            hamiltonian: build_exciton_hamiltonian(model, &space)?,
            couplings: build_coupling_operators(model, &space)?,
            mu_plus,
            mu_minus,
            space,
        })
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn get(&self, tag: OperatorTag) -> SystemOperator {
        let minus_one = C64::new(-1.0, 0.0);
        match tag {
            OperatorTag::Identity => SystemOperator::identity(self.dim()),
            OperatorTag::DipolePlus => self.mu_plus.clone(),
            OperatorTag::DipoleMinus => self.mu_minus.clone(),
            OperatorTag::FieldPlus => self.mu_plus.scaled(minus_one),
            OperatorTag::FieldMinus => self.mu_minus.scaled(minus_one),
        }
    }

    pub fn interaction(&self, pair: InteractionPair) -> DyadicOperator {
        DyadicOperator::lift(self.get(pair.bra), self.get(pair.ket)).expect("same space")
    }

    pub fn observable(&self, tag: OperatorTag) -> DyadicOperator {
        DyadicOperator::observable(self.get(tag))
    }

    /// `(|g>, |g>)` on the doubled space.
    pub fn ground_dyad(&self) -> Vec<C64> {
        let g = self.space.ground_vector();
        g.iter().chain(&g).copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HopsSettings {
    /// Hierarchy depth for ground-state bleach and stimulated emission.
    pub depth: usize,
    /// Hierarchy depth for excited-state absorption pathways.
    pub depth_esa: usize,
    pub dt: f64,
    pub noise_dt: f64,
    pub equation: Equation,
}

impl Default for HopsSettings {
    fn default() -> Self {
        Self {
            depth: 10,
            depth_esa: 11,
            dt: 0.01,
            noise_dt: 0.05,
            equation: Equation::Nonlinear,
        }
    }
}

impl HopsSettings {
    pub fn depth_for(&self, pathway: Pathway) -> usize {
        if pathway.is_excited_state_absorption() {
            self.depth_esa
        } else {
            self.depth
        }
    }
}

/// Waiting-time list and the two coherence grids of a third-order calculation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThirdOrderGrids {
    pub tau: UniformGrid,
    pub t: UniformGrid,
    pub waiting: Vec<f64>,
}

impl ThirdOrderGrids {
    pub fn new(tau: UniformGrid, t: UniformGrid, waiting: Vec<f64>) -> Result<Self, ResponseError> {
        if waiting.is_empty() || waiting[0] < 0.0 || waiting.windows(2).any(|w| w[1] <= w[0]) || waiting.iter().any(|w| !w.is_finite()) {
            return Err(ResponseError::BadWaiting);
        }
        Ok(Self { tau, t, waiting })
    }

    pub fn duration(&self) -> f64 {
        self.tau.max() + self.waiting.last().copied().unwrap_or(0.0) + self.t.max()
    }

    fn steps(&self, dt: f64) -> Result<(usize, usize, Vec<usize>), ResponseError> {
        let st_tau = self.tau.steps_per_point(dt, "coherence-time step")?;
        let st_t = self.t.steps_per_point(dt, "detection-time step")?;
        let mut prev = 0;
        let mut deltas = Vec::with_capacity(self.waiting.len());
        for &w in &self.waiting {
            let s = steps_of(w, dt, "waiting time")?;
            deltas.push(s - prev);
            prev = s;
        }
        Ok((st_tau, st_t, deltas))
    }
}

/// Ensemble-averaged response on a `(tau, t)` grid at one waiting time.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseGrid {
    pub pathway: Pathway,
    pub waiting: f64,
    pub tau: UniformGrid,
    pub t: UniformGrid,
    pub mean: Array2<C64>,
    pub std_err: Array2<f64>,
    pub n_traj: usize,
}

#[derive(Clone, Debug)]
struct Generators {
    dyadic: Vec<(usize, HopsGenerator)>,
    single: HopsGenerator,
}

impl Generators {
    fn dyadic(&self, depth: usize) -> &HopsGenerator {
        &self.dyadic.iter().find(|(d, _)| *d == depth).expect("built for every depth").1
    }

    fn with_hamiltonian(&self, h: &SystemOperator) -> Result<Self, HopsError> {
        Ok(Self {
            dyadic: self
                .dyadic
                .iter()
                .map(|(d, g)| Ok((*d, g.with_hamiltonian(h)?)))
                .collect::<Result<_, HopsError>>()?,
            single: self.single.with_hamiltonian(h)?,
        })
    }
}

type LaneOutcome<T> = Result<T, f64>;

/// Stochastic response engine for one model, bath and set of numerical settings.
#[derive(Clone, Debug)]
pub struct ResponseEngine {
    model: ExcitonModel,
    bath: ExponentialBath,
    settings: HopsSettings,
    ops: SystemOperators,
    generators: Arc<Generators>,
}

impl ResponseEngine {
    pub fn new(model: ExcitonModel, bath: ExponentialBath, settings: HopsSettings) -> Result<Self, ResponseError> {
        bath.validate().map_err(NoiseError::from)?;
        if bath.n_sites() != model.n_sites() {
            return Err(ResponseError::SiteCount {
                model: model.n_sites(),
                bath: bath.n_sites(),
            });
        }
        let ops = SystemOperators::new(&model)?;
        let mut depths = vec![settings.depth, settings.depth_esa];
        depths.dedup();
        let dyadic = depths
            .into_iter()
            .map(|d| {
                HopsGenerator::dyadic(&ops.hamiltonian, &ops.couplings, &bath, d, settings.dt, settings.equation).map(|g| (d, g))
            })
            .collect::<Result<_, _>>()?;
        let single = HopsGenerator::new(&ops.hamiltonian, &ops.couplings, &bath, settings.depth, settings.dt, settings.equation)?
            .with_implicit_norm(1.0);
        Ok(Self {
            model,
            bath,
            settings,
            ops,
            generators: Arc::new(Generators { dyadic, single }),
        })
    }

    pub fn model(&self) -> &ExcitonModel {
        &self.model
    }

    pub fn bath(&self) -> &ExponentialBath {
        &self.bath
    }

    pub fn settings(&self) -> &HopsSettings {
        &self.settings
    }

    pub fn operators(&self) -> &SystemOperators {
        &self.ops
    }

    /// Noise sampler covering `[0, duration]`.
    pub fn noise_generator(&self, duration: f64) -> Result<SpectralNoiseGenerator, ResponseError> {
        let n_steps = (duration / self.settings.noise_dt - 1e-9).ceil().max(1.0) as usize;
        Ok(SpectralNoiseGenerator::new(&self.bath, self.settings.noise_dt, n_steps)?)
    }

    fn has_disorder(&self) -> bool {
        self.model.disorder_sigma.is_some_and(|s| s > 0.0)
    }

    fn generators_for(&self, seed: u64, trajectory: u64) -> Result<Arc<Generators>, ResponseError> {
        if !self.has_disorder() {
            return Ok(Arc::clone(&self.generators));
        }
        let mut rng = stream_rng(seed, trajectory, 0, Domain::Disorder);
        let sample = sample_disorder(&self.model, &mut rng);
        let h = build_exciton_hamiltonian(&sample, &self.ops.space)?;
        Ok(Arc::new(self.generators.with_hamiltonian(&h)?))
    }

    fn factor(&self, after: f64, before: f64) -> f64 {
        if self.settings.equation == Equation::Linear {
            1.0
        } else if after == 0.0 || before == 0.0 {
            0.0
        } else {
            after / before
        }
    }

    /// Third-order response of one trajectory on all grid points, one matrix
    /// `r(tau_i, t_k)` per waiting time.
    pub fn third_order_trajectory(
        &self,
        pathway: Pathway,
        grids: &ThirdOrderGrids,
        noise: &NoiseTrajectory,
    ) -> Result<Vec<Array2<C64>>, ResponseError> {
        let out = self.third_order_lanes::<1>(&self.generators, pathway, grids, &[noise])?;
        out.into_iter().next().unwrap().map_err(ResponseError::TrajectoryFailed)
    }

    fn third_order_lanes<const L: usize>(
        &self,
        gens: &Generators,
        pathway: Pathway,
        grids: &ThirdOrderGrids,
        noise: &[&NoiseTrajectory],
    ) -> Result<Vec<LaneOutcome<Vec<Array2<C64>>>>, ResponseError> {
        let g = gens.dyadic(self.settings.depth_for(pathway));
        let (st_tau, st_t, wait_steps) = grids.steps(self.settings.dt)?;
        let [p1, p2, p3] = pathway.interactions();
        let v1 = self.ops.interaction(p1).to_matrix();
        let v2 = self.ops.interaction(p2).to_matrix();
        let v3 = self.ops.interaction(p3).to_matrix();
        let f = self.ops.observable(OperatorTag::DipoleMinus).to_matrix();

        let (n_tau, n_t) = (grids.tau.len, grids.t.len);
        let mut out = vec![vec![Array2::<C64>::zeros((n_tau, n_t)); wait_steps.len()]; L];
        let mut failed = [None; L];

        let start: LaneState<L> = g.lanes_from_initial(&self.ops.ground_dyad(), 0.0)?;
        let (mut backbone, _, a1) = g.interact(&start, &v1)?;
        for i in 0..n_tau {
            if i > 0 {
                g.advance(&mut backbone, st_tau, noise)?;
            }
            let (mut branch, b2, a2) = g.interact(&backbone, &v2)?;
            for (iw, &dw) in wait_steps.iter().enumerate() {
                g.advance(&mut branch, dw, noise)?;
                let (mut det, b3, a3) = g.interact(&branch, &v3)?;
                let head: [f64; L] = std::array::from_fn(|l| self.factor(a1[l], b2[l]) * self.factor(a2[l], b3[l]));
                for k in 0..n_t {
                    if k > 0 {
                        g.advance(&mut det, st_t, noise)?;
                    }
                    let fv = det.bilinear(&f);
                    let nrm = det.norm_sq();
                    for l in 0..L {
                        out[l][iw][[i, k]] = fv[l] * (head[l] * self.factor(a3[l], nrm[l]));
                    }
                }
                merge_failures(&mut failed, det.failed());
            }
            merge_failures(&mut failed, branch.failed());
        }
        merge_failures(&mut failed, backbone.failed());
        Ok(out
            .into_iter()
            .zip(failed)
            .map(|(r, f)| match f {
                None => Ok(r),
                Some(t) => Err(t),
            })
            .collect())
    }

    /// Straight-line evaluation of an arbitrary-order sequence, read out on
    /// `readout` inside the last interval.
    pub fn sequence_trajectory(
        &self,
        sequence: &PulseSequence,
        readout: &UniformGrid,
        noise: &NoiseTrajectory,
    ) -> Result<Vec<C64>, ResponseError> {
        let g = self.generators.dyadic(self.settings.depth);
        let out = self.sequence_lanes::<1>(g, sequence, readout, &[noise])?;
        out.into_iter().next().unwrap().map_err(ResponseError::TrajectoryFailed)
    }

    fn sequence_lanes<const L: usize>(
        &self,
        g: &HopsGenerator,
        sequence: &PulseSequence,
        readout: &UniformGrid,
        noise: &[&NoiseTrajectory],
    ) -> Result<Vec<LaneOutcome<Vec<C64>>>, ResponseError> {
        let m = sequence.order();
        let last = sequence.intervals[m - 1];
        if (readout.max() - last).abs() > 1e-9 * last.max(1.0) {
            return Err(ResponseError::BadInterval(m - 1));
        }
        let st = readout.steps_per_point(self.settings.dt, "readout step")?;
        let f = self.ops.observable(sequence.observable).to_matrix();

        let mut ls: LaneState<L> = g.lanes_from_initial(&self.ops.ground_dyad(), 0.0)?;
        let mut weight = [1.0; L];
        let mut prev_after = [1.0; L];
        let mut failed = [None; L];
        for (j, pair) in sequence.interactions.iter().enumerate() {
            let (next, before, after) = g.interact(&ls, &self.ops.interaction(*pair).to_matrix())?;
            if j > 0 {
                for l in 0..L {
                    weight[l] *= self.factor(prev_after[l], before[l]);
                }
            }
            prev_after = after;
            ls = next;
            if j + 1 < m {
                g.advance(&mut ls, steps_of(sequence.intervals[j], self.settings.dt, "interval")?, noise)?;
            }
        }
        let mut out = vec![vec![ZERO; readout.len]; L];
        for k in 0..readout.len {
            if k > 0 {
                g.advance(&mut ls, st, noise)?;
            }
            let fv = ls.bilinear(&f);
            let nrm = ls.norm_sq();
            for l in 0..L {
                out[l][k] = fv[l] * (weight[l] * self.factor(prev_after[l], nrm[l]));
            }
        }
        merge_failures(&mut failed, ls.failed());
        Ok(out
            .into_iter()
            .zip(failed)
            .map(|(r, f)| f.map_or(Ok(r), Err))
            .collect())
    }

    /// Linear response from the dyadic propagation of `(|g>, mu_+|g>)`.
    pub fn linear_dyadic_trajectory(&self, t: &UniformGrid, noise: &NoiseTrajectory) -> Result<Vec<C64>, ResponseError> {
        self.sequence_trajectory(&PulseSequence::linear(t.max()), t, noise)
    }

    /// Linear response from a single normalized excited state
    /// `psi_ex = mu_+|g> / mu_eff`, using `mu_eff^2 <psi_ex|chi> / ((|chi|^2 + 1) / 2)`.
    pub fn linear_decomposition_trajectory(&self, t: &UniformGrid, noise: &NoiseTrajectory) -> Result<Vec<C64>, ResponseError> {
        let out = self.decomposition_lanes::<1>(&self.generators.single, t, &[noise])?;
        out.into_iter().next().unwrap().map_err(ResponseError::TrajectoryFailed)
    }

    fn excited_state(&self) -> Vec<C64> {
        let mu = self.model.mu_eff();
        self.ops
            .mu_plus
            .apply(&self.ops.space.ground_vector())
            .into_iter()
            .map(|c| c / mu)
            .collect()
    }

    fn decomposition_lanes<const L: usize>(
        &self,
        g: &HopsGenerator,
        t: &UniformGrid,
        noise: &[&NoiseTrajectory],
    ) -> Result<Vec<LaneOutcome<Vec<C64>>>, ResponseError> {
        let st = t.steps_per_point(self.settings.dt, "readout step")?;
        let psi_ex = self.excited_state();
        let mu2 = self.model.mu_eff_sq();
        let mut ls: LaneState<L> = g.lanes_from_initial(&psi_ex, 0.0)?;
        let mut out = vec![vec![ZERO; t.len]; L];
        for k in 0..t.len {
            if k > 0 {
                g.advance(&mut ls, st, noise)?;
            }
            let ov = ls.overlap(&psi_ex);
            let nrm = ls.norm_sq();
            for l in 0..L {
                let w = if self.settings.equation == Equation::Linear {
                    1.0
                } else {
                    2.0 / (nrm[l] + 1.0)
                };
                out[l][k] = ov[l] * (mu2 * w);
            }
        }
        let failed = *ls.failed();
        Ok(out.into_iter().zip(failed).map(|(r, f)| f.map_or(Ok(r), Err)).collect())
    }
}

fn merge_failures<const L: usize>(acc: &mut [Option<f64>; L], new: &[Option<f64>; L]) {
    for (a, n) in acc.iter_mut().zip(new) {
        if let Some(t) = n {
            *a = Some(a.map_or(*t, |x: f64| x.min(*t)));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOptions {
    pub n_traj: usize,
    pub seed: u64,
    /// Index of the first trajectory; lets a run be split into chunks.
    pub first_trajectory: u64,
    /// Merge partial sums strictly in trajectory order. Without it, partial
    /// sums of parallel batches are merged pairwise.
    pub deterministic: bool,
}

impl EnsembleOptions {
    pub fn new(n_traj: usize, seed: u64) -> Self {
        Self {
            n_traj,
            seed,
            first_trajectory: 0,
            deterministic: true,
        }
    }
}

/// Running mean and sum of squared deviations (complex Welford update).
#[derive(Clone, Debug, PartialEq)]
struct Moments {
    n: usize,
    mean: Vec<C64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Self {
            n: 0,
            mean: vec![ZERO; len],
            m2: vec![0.0; len],
        }
    }

    fn push(&mut self, x: &[C64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += (d.conj() * (v - *m)).re;
        }
    }

    fn merge(mut self, other: Self) -> Self {
        if other.n == 0 {
            return self;
        }
        if self.n == 0 {
            return other;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * (nb / n);
            self.m2[i] += other.m2[i] + d.norm_sqr() * na * nb / n;
        }
        self.n += other.n;
        self
    }

    fn std_err(&self) -> Vec<f64> {
        if self.n < 2 {
            return vec![0.0; self.mean.len()];
        }
        let n = self.n as f64;
        self.m2.iter().map(|s| (s.max(0.0) / (n * (n - 1.0))).sqrt()).collect()
    }
}

/// Per-trajectory third-order output: one grid per (pathway, waiting time),
/// stored at `pathway_index * n_waiting + waiting_index`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub index: u64,
    pub ok: bool,
    pub grids: Vec<Array2<C64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThirdOrderEnsemble {
    pub pathways: Vec<Pathway>,
    pub grids: ThirdOrderGrids,
    /// Indexed like [`TrajectoryRecord::grids`].
    pub responses: Vec<ResponseGrid>,
    pub n_traj: usize,
    pub failed: Vec<u64>,
}

impl ThirdOrderEnsemble {
    pub fn get(&self, pathway: Pathway, waiting_index: usize) -> Option<&ResponseGrid> {
        let p = self.pathways.iter().position(|q| *q == pathway)?;
        self.responses.get(p * self.grids.waiting.len() + waiting_index)
    }

    pub fn failure_rate(&self) -> f64 {
        self.failed.len() as f64 / (self.n_traj + self.failed.len()).max(1) as f64
    }
}

/// Runs trajectories in lane batches, hands every outcome to `consume` in
/// trajectory order and returns the merged moments of the successful ones.
fn run_batched<T, B>(
    engine: &ResponseEngine,
    opts: &EnsembleOptions,
    duration: f64,
    flatten: impl Fn(&T) -> Vec<C64> + Sync,
    run_batch: B,
    mut consume: impl FnMut(u64, &LaneOutcome<T>),
) -> Result<(Moments, Vec<u64>), ResponseError>
where
    T: Send,
    B: Fn(&Generators, &[&NoiseTrajectory], usize) -> Result<Vec<LaneOutcome<T>>, ResponseError> + Sync,
{
    if opts.n_traj == 0 {
        return Err(ResponseError::NoTrajectories);
    }
    let noise_gen = engine.noise_generator(duration)?;
    let lanes = if engine.has_disorder() { 1 } else { LANES };
    let per_chunk = lanes * (2 * rayon::current_num_threads()).max(1);
    let mut moments: Option<Moments> = None;
    let mut failed = Vec::new();

    let mut start = 0usize;
    while start < opts.n_traj {
        let end = (start + per_chunk).min(opts.n_traj);
        let batches: Vec<(usize, usize)> = (start..end).step_by(lanes).map(|b| (b, (b + lanes).min(end))).collect();
        let results: Vec<Result<Vec<(u64, LaneOutcome<T>)>, ResponseError>> = batches
            .par_iter()
            .map(|&(b, e)| {
                let idx: Vec<u64> = (b..e).map(|i| opts.first_trajectory + i as u64).collect();
                let noise: Vec<NoiseTrajectory> = idx.iter().map(|&i| noise_gen.generate(opts.seed, i)).collect();
                let gens = engine.generators_for(opts.seed, idx[0])?;
                let mut refs: Vec<&NoiseTrajectory> = noise.iter().collect();
                while refs.len() < lanes {
                    refs.push(&noise[0]);
                }
                let out = run_batch(&gens, &refs, lanes)?;
                Ok(idx.into_iter().zip(out).collect())
            })
            .collect();

        let mut partials = Vec::new();
        for batch in results {
            let batch = batch?;
            let mut m: Option<Moments> = None;
            for (i, outcome) in &batch {
                consume(*i, outcome);
                match outcome {
                    Ok(v) => {
                        let flat = flatten(v);
                        m.get_or_insert_with(|| Moments::new(flat.len())).push(&flat);
                    }
                    Err(_) => failed.push(*i),
                }
            }
            partials.extend(m);
        }
        let chunk = if opts.deterministic {
            partials.into_iter().reduce(Moments::merge)
        } else {
            partials.into_par_iter().reduce_with(Moments::merge)
        };
        if let Some(c) = chunk {
            moments = Some(match moments {
                None => c,
                Some(m) => m.merge(c),
            });
        }
        start = end;
    }
    match moments {
        Some(m) => Ok((m, failed)),
        None => Err(ResponseError::AllFailed(opts.n_traj)),
    }
}

/// Ensemble average of third-order responses. Every trajectory is passed to
/// `sink` (in trajectory order) before it is folded into the mean.
pub fn response_ensemble(
    engine: &ResponseEngine,
    pathways: &[Pathway],
    grids: &ThirdOrderGrids,
    opts: &EnsembleOptions,
    mut sink: impl FnMut(&TrajectoryRecord),
) -> Result<ThirdOrderEnsemble, ResponseError> {
    let n_w = grids.waiting.len();
    let shape = (grids.tau.len, grids.t.len);
    let run_batch = |gens: &Generators, noise: &[&NoiseTrajectory], lanes: usize| {
        let mut per_lane: Vec<LaneOutcome<Vec<Array2<C64>>>> = (0..noise.len()).map(|_| Ok(Vec::new())).collect();
        for &p in pathways {
            let out = if lanes == 1 {
                engine.third_order_lanes::<1>(gens, p, grids, noise)?
            } else {
                engine.third_order_lanes::<LANES>(gens, p, grids, noise)?
            };
            for (acc, o) in per_lane.iter_mut().zip(out) {
                match (acc.as_mut(), o) {
                    (Ok(v), Ok(mut r)) => v.append(&mut r),
                    (Ok(_), Err(t)) => *acc = Err(t),
                    (Err(_), _) => {}
                }
            }
        }
        Ok(per_lane)
    };
    let flatten = |v: &Vec<Array2<C64>>| v.iter().flat_map(|a| a.iter().copied()).collect::<Vec<_>>();
    let blank = vec![Array2::<C64>::zeros(shape); pathways.len() * n_w];
    let (moments, failed) = run_batched(engine, opts, grids.duration(), flatten, run_batch, |i, o| {
        let rec = match o {
            Ok(g) => TrajectoryRecord {
                index: i,
                ok: true,
                grids: g.clone(),
            },
            Err(_) => TrajectoryRecord {
                index: i,
                ok: false,
                grids: blank.clone(),
            },
        };
        sink(&rec);
    })?;

    let se = moments.std_err();
    let block = shape.0 * shape.1;
    let mut responses = Vec::with_capacity(pathways.len() * n_w);
    for (ip, &p) in pathways.iter().enumerate() {
        for (iw, &w) in grids.waiting.iter().enumerate() {
            let off = (ip * n_w + iw) * block;
            responses.push(ResponseGrid {
                pathway: p,
                waiting: w,
                tau: grids.tau,
                t: grids.t,
                mean: Array2::from_shape_vec(shape, moments.mean[off..off + block].to_vec()).unwrap(),
                std_err: Array2::from_shape_vec(shape, se[off..off + block].to_vec()).unwrap(),
                n_traj: moments.n,
            });
        }
    }
    Ok(ThirdOrderEnsemble {
        pathways: pathways.to_vec(),
        grids: grids.clone(),
        responses,
        n_traj: moments.n,
        failed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinearMethod {
    Dyadic,
    Decomposition,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearResponse {
    pub t: UniformGrid,
    pub mean: Vec<C64>,
    pub std_err: Vec<f64>,
    pub n_traj: usize,
    pub failed: Vec<u64>,
}

pub fn linear_response_ensemble(
    engine: &ResponseEngine,
    method: LinearMethod,
    t: &UniformGrid,
    opts: &EnsembleOptions,
) -> Result<LinearResponse, ResponseError> {
    let seq = PulseSequence::linear(t.max());
    let run_batch = |gens: &Generators, noise: &[&NoiseTrajectory], lanes: usize| match (method, lanes) {
        (LinearMethod::Dyadic, 1) => engine.sequence_lanes::<1>(gens.dyadic(engine.settings.depth), &seq, t, noise),
        (LinearMethod::Dyadic, _) => engine.sequence_lanes::<LANES>(gens.dyadic(engine.settings.depth), &seq, t, noise),
        (LinearMethod::Decomposition, 1) => engine.decomposition_lanes::<1>(&gens.single, t, noise),
        (LinearMethod::Decomposition, _) => engine.decomposition_lanes::<LANES>(&gens.single, t, noise),
    };
    let (m, failed) = run_batched(engine, opts, t.max(), |v: &Vec<C64>| v.clone(), run_batch, |_, _| {})?;
    Ok(LinearResponse {
        t: *t,
        std_err: m.std_err(),
        mean: m.mean,
        n_traj: m.n,
        failed,
    })
}

/// Exact bath-free responses from dense density-matrix algebra:
/// `rho -> v_K rho v_B^dagger` at interactions and `U rho U^dagger` between them.
pub mod dense {
    use super::*;

    fn propagator(h: &SystemOperator) -> impl Fn(f64) -> DMatrix<C64> {
        let real = h.matrix().map(|c| c.re);
        let eig = real.symmetric_eigen();
        let v = eig.eigenvectors.map(|x| C64::new(x, 0.0));
        let lambda = eig.eigenvalues.clone();
        move |t: f64| {
            let d = DMatrix::from_diagonal(&lambda.map(|l| C64::new(0.0, -l * t).exp()));
            &v * d * v.adjoint()
        }
    }

    fn evolve(u: &DMatrix<C64>, rho: &DMatrix<C64>) -> DMatrix<C64> {
        u * rho * u.adjoint()
    }

    fn interact(ops: &SystemOperators, pair: InteractionPair, rho: &DMatrix<C64>) -> DMatrix<C64> {
        ops.get(pair.ket).matrix() * rho * ops.get(pair.bra).matrix().adjoint()
    }

    fn ground_density(ops: &SystemOperators) -> DMatrix<C64> {
        let g = DMatrix::from_column_slice(ops.dim(), 1, &ops.space.ground_vector());
        &g * g.adjoint()
    }

    fn trace_with(f: &DMatrix<C64>, rho: &DMatrix<C64>) -> C64 {
        (f * rho).trace()
    }

    pub fn third_order(model: &ExcitonModel, pathway: Pathway, grids: &ThirdOrderGrids) -> Result<Vec<Array2<C64>>, ResponseError> {
        let ops = SystemOperators::new(model)?;
        let u = propagator(&ops.hamiltonian);
        let f = ops.get(OperatorTag::DipoleMinus).into_matrix();
        let [p1, p2, p3] = pathway.interactions();
        let rho1 = interact(&ops, p1, &ground_density(&ops));
        let (u_tau, u_t) = (u(grids.tau.step), u(grids.t.step));
        let mut out = vec![Array2::zeros((grids.tau.len, grids.t.len)); grids.waiting.len()];
        let mut r1 = rho1;
        for i in 0..grids.tau.len {
            if i > 0 {
                r1 = evolve(&u_tau, &r1);
            }
            let rho2 = interact(&ops, p2, &r1);
            for (iw, &w) in grids.waiting.iter().enumerate() {
                let mut r3 = interact(&ops, p3, &evolve(&u(w), &rho2));
                for k in 0..grids.t.len {
                    if k > 0 {
                        r3 = evolve(&u_t, &r3);
                    }
                    out[iw][[i, k]] = trace_with(&f, &r3);
                }
            }
        }
        Ok(out)
    }

    pub fn sequence(model: &ExcitonModel, sequence: &PulseSequence, readout: &UniformGrid) -> Result<Vec<C64>, ResponseError> {
        let ops = SystemOperators::new(model)?;
        let u = propagator(&ops.hamiltonian);
        let f = ops.get(sequence.observable()).into_matrix();
        let mut rho = ground_density(&ops);
        let m = sequence.order();
        for (j, pair) in sequence.interactions().iter().enumerate() {
            rho = interact(&ops, *pair, &rho);
            if j + 1 < m {
                rho = evolve(&u(sequence.intervals()[j]), &rho);
            }
        }
        Ok(readout
            .points()
            .iter()
            .map(|&t| trace_with(&f, &evolve(&u(t), &rho)))
            .collect())
    }

    pub fn linear(model: &ExcitonModel, t: &UniformGrid) -> Result<Vec<C64>, ResponseError> {
        sequence(model, &PulseSequence::linear(t.max()), t)
    }
}
