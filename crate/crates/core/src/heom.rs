//! Hierarchical equations of motion for `alpha(t) = sum_j p_j exp(-w_j t)`.
//!
//! Every bath term contributes two hierarchy modes, `(nu = w, c = p, c~ = 0)`
//! and `(nu = w*, c = 0, c~ = p*)`. With `e_k` the unit index of mode `k`
//! acting on site coupling `L_k`:
//!
//! ```text
//! d/dt rho_m = -i[H, rho_m] - (m . nu) rho_m
//!              - i sum_k [L_k, rho_{m+e_k}]
//!              - i sum_k m_k (c_k L_k rho_{m-e_k} - c~_k rho_{m-e_k} L_k)
//! ```
//!
//! `H` and the `L_k` conserve the number of excitations, so an operator that
//! starts in one (ket manifold, bra manifold) block stays there and only that
//! block is propagated.
//!
//! The detection interval can be handled by the transposed generator: with
//! the entrywise pairing `<Y, X> = sum_m sum_ij Y_m,ij X_m,ij`, the readout
//! `Tr(F rho_0(t))` equals `<Y(t), X(0)>` where `Y(0) = F^T` on the physical
//! level and `Y' = L^T Y`. RK4 is a polynomial in the generator, so the
//! discrete transposed propagation reproduces the forward readout exactly.

use std::sync::Arc;

use nalgebra::DMatrix;
use ndarray::Array2;
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bath::{ExponentialBath, ExponentialMode};
use crate::grid::{steps_of, GridError, UniformGrid};
use crate::hops::{build_hierarchy, HierarchyIndexSet, HopsError};
use crate::model::{ExcitonModel, ModelError};
use crate::response::{InteractionPair, OperatorTag, Pathway, PulseSequence, ResponseGrid, SystemOperators, ThirdOrderGrids};

const ZERO: C64 = C64::new(0.0, 0.0);
const MINUS_I: C64 = C64::new(0.0, -1.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeomError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Hierarchy(#[from] HopsError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("bath: {0}")]
    Bath(String),
    #[error("bath has {bath} sites, model has {model}")]
    SiteCount { model: usize, bath: usize },
    #[error("the hierarchy reference does not sample static disorder")]
    DisorderUnsupported,
    #[error("time step must be positive and finite")]
    BadStep,
    #[error("non-finite hierarchy state at t = {0}")]
    NonFinite(f64),
    #[error("readout grid must end at the last interval")]
    ReadoutMismatch,
}

/// How the detection interval is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    /// One transposed propagation of the observable per pathway.
    #[default]
    Adjoint,
    /// Forward propagation of every `(tau, T)` branch.
    Branching,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeomSettings {
    pub depth: usize,
    pub dt: f64,
    pub readout: Readout,
}

impl Default for HeomSettings {
    fn default() -> Self {
        Self {
            depth: 25,
            dt: 0.05,
            readout: Readout::Adjoint,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ExtendedMode {
    site: usize,
    nu: C64,
    c: C64,
    c_tilde: C64,
}

fn extended_modes(bath: &ExponentialBath) -> Vec<Vec<ExtendedMode>> {
    bath.modes
        .iter()
        .enumerate()
        .map(|(site, list)| {
            list.iter()
                .flat_map(|m| {
                    [
                        ExtendedMode {
                            site,
                            nu: m.w,
                            c: m.p,
                            c_tilde: ZERO,
                        },
                        ExtendedMode {
                            site,
                            nu: m.w.conj(),
                            c: ZERO,
                            c_tilde: m.p.conj(),
                        },
                    ]
                })
                .collect()
        })
        .collect()
}

/// Closed-form lineshape function `g(t) = int_0^t ds int_0^s du p exp(-w u)`.
pub fn lineshape(mode: &ExponentialMode, t: f64) -> C64 {
    let (p, w) = (mode.p, mode.w);
    p * t / w - p * (1.0 - (-w * t).exp()) / (w * w)
}

/// Basis indices of one (ket, bra) excitation block.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Block {
    rows: Vec<usize>,
    cols: Vec<usize>,
}

impl Block {
    fn size(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    fn is_empty(&self) -> bool {
        self.size() == 0
    }
}

/// Generator restricted to one block.
struct BlockGenerator<'a> {
    hier: &'a HierarchyIndexSet,
    damping: &'a [C64],
    nr: usize,
    nc: usize,
    h_rows: DMatrix<C64>,
    h_cols: DMatrix<C64>,
    /// `-i (l_i - l_j)` per mode.
    raise: Vec<Vec<C64>>,
    /// `-i (c l_i - c~ l_j)` per mode, `None` when identically zero.
    lower: Vec<Option<Vec<C64>>>,
}

impl BlockGenerator<'_> {
    fn len(&self) -> usize {
        self.hier.len() * self.nr * self.nc
    }

    fn apply(&self, x: &[C64], out: &mut [C64], adjoint: bool) {
        let bs = self.nr * self.nc;
        let (nr, nc) = (self.nr, self.nc);
        out.par_chunks_mut(bs.max(1) * 64).enumerate().for_each(|(chunk, o_chunk)| {
            let first = chunk * 64;
            for (off, o) in o_chunk.chunks_mut(bs).enumerate() {
                let a = first + off;
                let xa = &x[a * bs..(a + 1) * bs];
                let damp = self.damping[a];
                for i in 0..nr {
                    for j in 0..nc {
                        let mut acc = ZERO;
                        for l in 0..nr {
                            let h = if adjoint { self.h_rows[(l, i)] } else { self.h_rows[(i, l)] };
                            acc += h * xa[l * nc + j];
                        }
                        for l in 0..nc {
                            let h = if adjoint { self.h_cols[(j, l)] } else { self.h_cols[(l, j)] };
                            acc -= xa[i * nc + l] * h;
                        }
                        o[i * nc + j] = MINUS_I * acc - damp * xa[i * nc + j];
                    }
                }
                let idx = self.hier.index(a);
                for k in 0..self.raise.len() {
                    let (up, down) = (self.hier.raise(a, k), self.hier.lower(a, k));
                    // Forward: raising reads m+e_k, lowering reads m-e_k with factor m_k.
                    // Transposed: raising reads m-e_k, lowering reads m+e_k with factor m_k+1.
                    let (r_src, l_src, l_fac) = if adjoint {
                        (down, up, idx[k] as f64 + 1.0)
                    } else {
                        (up, down, idx[k] as f64)
                    };
                    if let Some(b) = r_src {
                        let xb = &x[b * bs..(b + 1) * bs];
                        for ((o, c), v) in o.iter_mut().zip(&self.raise[k]).zip(xb) {
                            *o += c * v;
                        }
                    }
                    if let (Some(b), Some(coef)) = (l_src, &self.lower[k]) {
                        let xb = &x[b * bs..(b + 1) * bs];
                        for ((o, c), v) in o.iter_mut().zip(coef).zip(xb) {
                            *o += c * v * l_fac;
                        }
                    }
                }
            }
        });
    }
}

/// Fixed-step RK4 workspace.
struct Rk4 {
    k: [Vec<C64>; 4],
    tmp: Vec<C64>,
}

impl Rk4 {
    fn new(n: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![ZERO; n]),
            tmp: vec![ZERO; n],
        }
    }

    fn step(&mut self, g: &BlockGenerator<'_>, x: &mut [C64], dt: f64, adjoint: bool) {
        let [k1, k2, k3, k4] = &mut self.k;
        g.apply(x, k1, adjoint);
        axpy(&mut self.tmp, x, k1, 0.5 * dt);
        g.apply(&self.tmp, k2, adjoint);
        axpy(&mut self.tmp, x, k2, 0.5 * dt);
        g.apply(&self.tmp, k3, adjoint);
        axpy(&mut self.tmp, x, k3, dt);
        g.apply(&self.tmp, k4, adjoint);
        let s = dt / 6.0;
        x.par_iter_mut().enumerate().for_each(|(i, v)| {
            *v += (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * s;
        });
    }
}

fn axpy(out: &mut [C64], x: &[C64], k: &[C64], h: f64) {
    out.par_iter_mut().zip(x.par_iter().zip(k)).for_each(|(o, (a, b))| *o = a + b * h);
}

/// Hierarchy state of one block.
#[derive(Clone, Debug)]
struct BlockState {
    block: Block,
    x: Vec<C64>,
}

impl BlockState {
    fn physical(&self) -> &[C64] {
        &self.x[..self.block.size()]
    }

    fn trace(&self) -> Option<C64> {
        if self.block.rows != self.block.cols {
            return None;
        }
        let n = self.block.rows.len();
        Some((0..n).map(|i| self.x[i * n + i]).sum())
    }
}

/// Third-order output of one pathway: one `(tau, t)` matrix per waiting time.
#[derive(Clone, Debug, PartialEq)]
pub struct HeomThirdOrder {
    pub pathway: Pathway,
    pub grids: Vec<Array2<C64>>,
    /// Largest relative change of `Tr rho_0` over waiting-time propagations of
    /// population blocks.
    pub trace_drift: f64,
}

impl HeomThirdOrder {
    pub fn response_grids(&self, grids: &ThirdOrderGrids) -> Vec<ResponseGrid> {
        self.grids
            .iter()
            .zip(&grids.waiting)
            .map(|(g, &w)| ResponseGrid {
                pathway: self.pathway,
                waiting: w,
                tau: grids.tau,
                t: grids.t,
                mean: g.clone(),
                std_err: Array2::zeros(g.dim()),
                n_traj: 0,
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct HeomEngine {
    ops: SystemOperators,
    settings: HeomSettings,
    modes: Vec<ExtendedMode>,
    hier: Arc<HierarchyIndexSet>,
    damping: Arc<Vec<C64>>,
    couplings: Vec<Vec<f64>>,
    manifolds: Vec<Vec<usize>>,
}

impl HeomEngine {
    pub fn new(model: &ExcitonModel, bath: &ExponentialBath, settings: HeomSettings) -> Result<Self, HeomError> {
        if !(settings.dt > 0.0 && settings.dt.is_finite()) {
            return Err(HeomError::BadStep);
        }
        bath.validate().map_err(|e| HeomError::Bath(e.to_string()))?;
        if bath.n_sites() != model.n_sites() {
            return Err(HeomError::SiteCount {
                model: model.n_sites(),
                bath: bath.n_sites(),
            });
        }
        if model.disorder_sigma.is_some_and(|s| s > 0.0) {
            return Err(HeomError::DisorderUnsupported);
        }
        let ops = SystemOperators::new(model)?;
        let ext = extended_modes(bath);
        let hier = build_hierarchy(&ext.iter().map(Vec::len).collect::<Vec<_>>(), settings.depth)?;
        let modes: Vec<ExtendedMode> = ext.into_iter().flatten().collect();
        let damping = (0..hier.len())
            .map(|a| hier.index(a).iter().zip(&modes).map(|(&m, md)| md.nu * m as f64).sum())
            .collect();
        let couplings = ops
            .couplings
            .iter()
            .map(|l| (0..ops.dim()).map(|i| l.get(i, i).re).collect())
            .collect();
        let mut manifolds = vec![Vec::new(); 3];
        for (i, c) in ops.space.basis().iter().enumerate() {
            manifolds[c.excitations()].push(i);
        }
        Ok(Self {
            ops,
            settings,
            modes,
            damping: Arc::new(damping),
            hier: Arc::new(hier),
            couplings,
            manifolds,
        })
    }

    pub fn settings(&self) -> &HeomSettings {
        &self.settings
    }

    pub fn n_auxiliaries(&self) -> usize {
        self.hier.len()
    }

    pub fn operators(&self) -> &SystemOperators {
        &self.ops
    }

    fn generator(&self, block: &Block) -> BlockGenerator<'_> {
        let h = self.ops.hamiltonian.matrix();
        let sub = |idx: &[usize]| DMatrix::from_fn(idx.len(), idx.len(), |i, j| h[(idx[i], idx[j])]);
        let mut raise = Vec::with_capacity(self.modes.len());
        let mut lower = Vec::with_capacity(self.modes.len());
        for m in &self.modes {
            let l = &self.couplings[m.site];
            let mut r = Vec::with_capacity(block.size());
            let mut lo = Vec::with_capacity(block.size());
            for &i in &block.rows {
                for &j in &block.cols {
                    r.push(MINUS_I * (l[i] - l[j]));
                    lo.push(MINUS_I * (m.c * l[i] - m.c_tilde * l[j]));
                }
            }
            raise.push(r);
            lower.push(lo.iter().any(|c| *c != ZERO).then_some(lo));
        }
        BlockGenerator {
            hier: &self.hier,
            damping: &self.damping,
            nr: block.rows.len(),
            nc: block.cols.len(),
            h_rows: sub(&block.rows),
            h_cols: sub(&block.cols),
            raise,
            lower,
        }
    }

    fn manifold(&self, n: isize) -> Vec<usize> {
        if n < 0 {
            Vec::new()
        } else {
            self.manifolds.get(n as usize).cloned().unwrap_or_default()
        }
    }

    fn level_of(&self, idx: &[usize]) -> isize {
        idx.first()
            .map_or(-1, |&i| self.ops.space.configuration(i).excitations() as isize)
    }

    fn ground(&self) -> BlockState {
        let block = Block {
            rows: self.manifolds[0].clone(),
            cols: self.manifolds[0].clone(),
        };
        let mut x = vec![ZERO; self.hier.len()];
        x[0] = C64::new(1.0, 0.0);
        BlockState { block, x }
    }

    fn shift(tag: OperatorTag) -> isize {
        match tag {
            OperatorTag::Identity => 0,
            OperatorTag::DipolePlus | OperatorTag::FieldPlus => 1,
            OperatorTag::DipoleMinus | OperatorTag::FieldMinus => -1,
        }
    }

    fn target_block(&self, block: &Block, pair: InteractionPair) -> Block {
        let side = |idx: &[usize], tag| {
            if idx.is_empty() {
                Vec::new()
            } else {
                self.manifold(self.level_of(idx) + Self::shift(tag))
            }
        };
        Block {
            rows: side(&block.rows, pair.ket),
            cols: side(&block.cols, pair.bra),
        }
    }

    /// `X -> v_K X v_B^dagger` on every auxiliary.
    fn interact(&self, s: &BlockState, pair: InteractionPair) -> BlockState {
        let block = self.target_block(&s.block, pair);
        let n_aux = self.hier.len();
        if block.is_empty() || s.block.is_empty() {
            return BlockState {
                x: Vec::new(),
                block: Block {
                    rows: Vec::new(),
                    cols: Vec::new(),
                },
            };
        }
        let vk = self.ops.get(pair.ket).into_matrix();
        let vb = self.ops.get(pair.bra).into_matrix().adjoint();
        let a = DMatrix::from_fn(block.rows.len(), s.block.rows.len(), |i, l| vk[(block.rows[i], s.block.rows[l])]);
        let b = DMatrix::from_fn(s.block.cols.len(), block.cols.len(), |l, j| vb[(s.block.cols[l], block.cols[j])]);
        let (bs_in, bs_out) = (s.block.size(), block.size());
        let (nr_in, nc_in) = (s.block.rows.len(), s.block.cols.len());
        let mut x = vec![ZERO; n_aux * bs_out];
        x.par_chunks_mut(bs_out).enumerate().for_each(|(aux, out)| {
            let xin = DMatrix::from_row_slice(nr_in, nc_in, &s.x[aux * bs_in..(aux + 1) * bs_in]);
            let y = &a * xin * &b;
            for i in 0..y.nrows() {
                for j in 0..y.ncols() {
                    out[i * y.ncols() + j] = y[(i, j)];
                }
            }
        });
        BlockState { block, x }
    }

    fn propagate(&self, s: &mut BlockState, n_steps: usize, t0: f64) -> Result<(), HeomError> {
        if s.block.is_empty() || n_steps == 0 {
            return Ok(());
        }
        let g = self.generator(&s.block);
        let mut rk = Rk4::new(g.len());
        for n in 0..n_steps {
            rk.step(&g, &mut s.x, self.settings.dt, false);
            if n % 64 == 63 || n + 1 == n_steps {
                check_finite(s.physical(), t0 + (n + 1) as f64 * self.settings.dt)?;
            }
        }
        Ok(())
    }

    /// `Tr(F rho_0)` with `F = mu_-`.
    fn readout(&self, s: &BlockState, f: &DMatrix<C64>) -> C64 {
        let nc = s.block.cols.len();
        let mut acc = ZERO;
        for (i, &r) in s.block.rows.iter().enumerate() {
            for (j, &c) in s.block.cols.iter().enumerate() {
                acc += f[(c, r)] * s.x[i * nc + j];
            }
        }
        acc
    }

    /// Transposed propagation of `F^T` on `block`, sampled at every point of `t`.
    fn adjoint_observable(&self, block: &Block, f: &DMatrix<C64>, t: &UniformGrid) -> Result<Vec<Vec<C64>>, HeomError> {
        let st = t.steps_per_point(self.settings.dt, "detection-time step")?;
        let g = self.generator(block);
        let nc = block.cols.len();
        let mut y = vec![ZERO; g.len()];
        for (i, &r) in block.rows.iter().enumerate() {
            for (j, &c) in block.cols.iter().enumerate() {
                y[i * nc + j] = f[(c, r)];
            }
        }
        let mut rk = Rk4::new(g.len());
        let mut out = Vec::with_capacity(t.len);
        for k in 0..t.len {
            if k > 0 {
                for _ in 0..st {
                    rk.step(&g, &mut y, self.settings.dt, true);
                }
                check_finite(&y[..block.size()], t.value(k))?;
            }
            out.push(y.clone());
        }
        Ok(out)
    }

    pub fn third_order(&self, pathway: Pathway, grids: &ThirdOrderGrids) -> Result<HeomThirdOrder, HeomError> {
        let dt = self.settings.dt;
        let st_tau = grids.tau.steps_per_point(dt, "coherence-time step")?;
        let st_t = grids.t.steps_per_point(dt, "detection-time step")?;
        let mut wait_steps = Vec::with_capacity(grids.waiting.len());
        let mut prev = 0;
        for &w in &grids.waiting {
            let s = steps_of(w, dt, "waiting time")?;
            wait_steps.push(s - prev);
            prev = s;
        }
        let [p1, p2, p3] = pathway.interactions();
        let f = self.ops.get(OperatorTag::DipoleMinus).into_matrix();
        let n_w = grids.waiting.len();
        let (n_tau, n_t) = (grids.tau.len, grids.t.len);

        let mut backbone = self.interact(&self.ground(), p1);
        let mut branch_points = Vec::with_capacity(n_tau);
        for i in 0..n_tau {
            if i > 0 {
                self.propagate(&mut backbone, st_tau, grids.tau.value(i - 1))?;
            }
            branch_points.push(self.interact(&backbone, p2));
        }

        // The detection block is fixed by the pathway.
        let detection = self.target_block(&branch_points[0].block, p3);
        let adjoint = match self.settings.readout {
            Readout::Adjoint if !detection.is_empty() => Some(self.adjoint_observable(&detection, &f, &grids.t)?),
            _ => None,
        };

        let rows: Vec<(Vec<Vec<C64>>, f64)> = branch_points
            .into_par_iter()
            .map(|mut branch| -> Result<(Vec<Vec<C64>>, f64), HeomError> {
                let mut per_w = vec![vec![ZERO; n_t]; n_w];
                let mut drift: f64 = 0.0;
                let mut t0 = 0.0;
                for (iw, &dw) in wait_steps.iter().enumerate() {
                    let before = branch.trace();
                    self.propagate(&mut branch, dw, t0)?;
                    t0 = grids.waiting[iw];
                    if let (Some(a), Some(b)) = (before, branch.trace()) {
                        drift = drift.max((b - a).norm() / a.norm().max(1e-300));
                    }
                    let det = self.interact(&branch, p3);
                    if det.block.is_empty() {
                        continue;
                    }
                    match &adjoint {
                        Some(ys) => {
                            for (k, y) in ys.iter().enumerate() {
                                per_w[iw][k] = pair(y, &det.x);
                            }
                        }
                        None => {
                            let mut det = det;
                            for k in 0..n_t {
                                if k > 0 {
                                    self.propagate(&mut det, st_t, grids.t.value(k - 1))?;
                                }
                                per_w[iw][k] = self.readout(&det, &f);
                            }
                        }
                    }
                }
                Ok((per_w, drift))
            })
            .collect::<Result<_, _>>()?;

        let mut out = vec![Array2::zeros((n_tau, n_t)); n_w];
        let mut trace_drift: f64 = 0.0;
        for (i, (per_w, drift)) in rows.into_iter().enumerate() {
            trace_drift = trace_drift.max(drift);
            for (iw, row) in per_w.into_iter().enumerate() {
                for (k, v) in row.into_iter().enumerate() {
                    out[iw][[i, k]] = v;
                }
            }
        }
        Ok(HeomThirdOrder {
            pathway,
            grids: out,
            trace_drift,
        })
    }

    pub fn third_order_all(&self, pathways: &[Pathway], grids: &ThirdOrderGrids) -> Result<Vec<HeomThirdOrder>, HeomError> {
        pathways.iter().map(|&p| self.third_order(p, grids)).collect()
    }

    /// Straight-line forward evaluation of an arbitrary-order sequence.
    pub fn sequence(&self, sequence: &PulseSequence, readout: &UniformGrid) -> Result<Vec<C64>, HeomError> {
        let m = sequence.order();
        let last = sequence.intervals()[m - 1];
        if (readout.max() - last).abs() > 1e-9 * last.max(1.0) {
            return Err(HeomError::ReadoutMismatch);
        }
        let dt = self.settings.dt;
        let st = readout.steps_per_point(dt, "readout step")?;
        let f = self.ops.get(sequence.observable()).into_matrix();
        let mut s = self.ground();
        let mut t0 = 0.0;
        for (j, pair) in sequence.interactions().iter().enumerate() {
            s = self.interact(&s, *pair);
            if j + 1 < m {
                let n = steps_of(sequence.intervals()[j], dt, "interval")?;
                self.propagate(&mut s, n, t0)?;
                t0 += sequence.intervals()[j];
            }
        }
        let mut out = Vec::with_capacity(readout.len);
        for k in 0..readout.len {
            if k > 0 {
                self.propagate(&mut s, st, t0 + readout.value(k - 1))?;
            }
            out.push(if s.block.is_empty() { ZERO } else { self.readout(&s, &f) });
        }
        Ok(out)
    }

    pub fn linear(&self, t: &UniformGrid) -> Result<Vec<C64>, HeomError> {
        self.sequence(&PulseSequence::linear(t.max()), t)
    }

    /// Physical density operator `rho_0` on the full space sampled on `t`,
    /// starting from `rho` with all auxiliaries zero.
    pub fn evolve_density(&self, rho: &DMatrix<C64>, t: &UniformGrid) -> Result<Vec<DMatrix<C64>>, HeomError> {
        let d = self.ops.dim();
        let all: Vec<usize> = (0..d).collect();
        let mut x = vec![ZERO; self.hier.len() * d * d];
        for i in 0..d {
            for j in 0..d {
                x[i * d + j] = rho[(i, j)];
            }
        }
        let mut s = BlockState {
            block: Block {
                rows: all.clone(),
                cols: all,
            },
            x,
        };
        let st = t.steps_per_point(self.settings.dt, "sampling step")?;
        let mut out = Vec::with_capacity(t.len);
        for k in 0..t.len {
            if k > 0 {
                self.propagate(&mut s, st, t.value(k - 1))?;
            }
            out.push(DMatrix::from_row_slice(d, d, s.physical()));
        }
        Ok(out)
    }
}

fn pair(y: &[C64], x: &[C64]) -> C64 {
    y.iter().zip(x).fold(ZERO, |acc, (a, b)| acc + a * b)
}

fn check_finite(v: &[C64], t: f64) -> Result<(), HeomError> {
    if v.iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
        Ok(())
    } else {
        Err(HeomError::NonFinite(t))
    }
}
