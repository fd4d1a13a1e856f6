//! Hierarchy of pure states for exponential bath correlation functions, in
//! its linear and nonlinear forms, on a single or a doubled (dyadic) system
//! space.
//!
//! For every multi-index `k` over the bath modes the auxiliary vector obeys
//!
//! ```text
//! d/dt psi(k) = (-i H - k.w + sum_n L_n zeta_n(t)) psi(k)
//!             + sum_nj k_nj p_nj L_n psi(k - e_nj)
//!             - sum_n (L_n - <L_n>_t) sum_j psi(k + e_nj)
//! ```
//!
//! with `zeta_n(t) = z_n(t)^* + sum_j eta_nj(t)` and
//! `d/dt eta_nj = -w_nj^* eta_nj + p_nj^* <L_n>_t`. The linear form drops both
//! `<L_n>` and `eta`. Coupling operators are real diagonal and Hermitian, so
//! `L_n^dagger = L_n`.
//!
//! Propagation works on a compact copy of the state restricted to the
//! smallest set of basis states that is invariant under `H` and contains every
//! nonzero entry. Operators in an exciton aggregate preserve the excitation
//! number, so between interactions only one or two manifolds are ever touched.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bath::ExponentialBath;
use crate::model::{DyadicOperator, SystemOperator};
use crate::noise::NoiseTrajectory;

const ABSENT: u32 = u32::MAX;
/// Guard against accidental combinatorial explosions.
pub const MAX_AUXILIARIES: u128 = 50_000_000;
const ZERO: C64 = C64::new(0.0, 0.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HopsError {
    #[error("hierarchy with {0} auxiliaries exceeds the limit of {MAX_AUXILIARIES}")]
    TooManyAuxiliaries(u128),
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("noise covers t <= {available}, propagation needs t = {needed}")]
    NoiseTooShort { needed: f64, available: f64 },
    #[error("duration {duration} is not an integer multiple of dt = {dt}")]
    StepMismatch { duration: f64, dt: f64 },
    #[error("coupling operator of site {0} is not real diagonal")]
    NonDiagonalCoupling(usize),
    #[error("expected {expected} coupling operators, got {got}")]
    CouplingCount { expected: usize, got: usize },
    #[error("time step must be positive and finite")]
    BadStep,
}

/// Triangular set of multi-indices `|k| <= depth` with neighbour tables.
#[derive(Clone, Debug)]
pub struct HierarchyIndexSet {
    n_modes: usize,
    depth: usize,
    indices: Vec<u16>,
    raise: Vec<u32>,
    lower: Vec<u32>,
}

/// `C(depth + n_modes, n_modes)` without overflow.
pub fn hierarchy_size(n_modes: usize, depth: usize) -> u128 {
    let mut c: u128 = 1;
    for i in 1..=n_modes as u128 {
        c = c * (depth as u128 + i) / i;
        if c > MAX_AUXILIARIES * 1000 {
            return u128::MAX;
        }
    }
    c
}

pub fn build_hierarchy(modes_per_site: &[usize], depth: usize) -> Result<HierarchyIndexSet, HopsError> {
    let n_modes: usize = modes_per_site.iter().sum();
    let count = hierarchy_size(n_modes, depth);
    if count > MAX_AUXILIARIES || depth > u16::MAX as usize {
        return Err(HopsError::TooManyAuxiliaries(count));
    }
    let mut indices: Vec<u16> = Vec::with_capacity(count as usize * n_modes);
    let mut current = vec![0u16; n_modes];
    for level in 0..=depth {
        push_compositions(&mut indices, &mut current, 0, level);
    }

    let len = if n_modes == 0 { 1 } else { indices.len() / n_modes };
    let mut lookup: HashMap<&[u16], u32> = HashMap::with_capacity(len);
    if n_modes > 0 {
        for (a, k) in indices.chunks_exact(n_modes).enumerate() {
            lookup.insert(k, a as u32);
        }
    }
    let mut raise = vec![ABSENT; len * n_modes];
    let mut lower = vec![ABSENT; len * n_modes];
    let mut probe = vec![0u16; n_modes];
    for a in 0..len {
        let k = &indices[a * n_modes..(a + 1) * n_modes];
        for m in 0..n_modes {
            probe.copy_from_slice(k);
            probe[m] += 1;
            if let Some(&b) = lookup.get(probe.as_slice()) {
                raise[a * n_modes + m] = b;
            }
            if k[m] > 0 {
                probe[m] -= 2;
                lower[a * n_modes + m] = lookup[probe.as_slice()];
            }
        }
    }
    Ok(HierarchyIndexSet {
        n_modes,
        depth,
        indices,
        raise,
        lower,
    })
}

/// All multi-indices with entries from position `pos` on summing to `left`, in
/// lexicographically descending order.
fn push_compositions(out: &mut Vec<u16>, current: &mut [u16], pos: usize, left: usize) {
    let n = current.len();
    if n == 0 {
        return;
    }
    if pos == n - 1 {
        current[pos] = left as u16;
        out.extend_from_slice(current);
        current[pos] = 0;
        return;
    }
    for v in (0..=left).rev() {
        current[pos] = v as u16;
        push_compositions(out, current, pos + 1, left - v);
    }
    current[pos] = 0;
}

impl HierarchyIndexSet {
    pub fn len(&self) -> usize {
        if self.n_modes == 0 {
            1
        } else {
            self.indices.len() / self.n_modes
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Multi-index of auxiliary `a`; auxiliary 0 is the physical one.
    pub fn index(&self, a: usize) -> &[u16] {
        &self.indices[a * self.n_modes..(a + 1) * self.n_modes]
    }

    pub fn level(&self, a: usize) -> usize {
        self.index(a).iter().map(|&v| v as usize).sum()
    }

    pub fn raise(&self, a: usize, mode: usize) -> Option<usize> {
        match self.raise[a * self.n_modes + mode] {
            ABSENT => None,
            b => Some(b as usize),
        }
    }

    pub fn lower(&self, a: usize, mode: usize) -> Option<usize> {
        match self.lower[a * self.n_modes + mode] {
            ABSENT => None,
            b => Some(b as usize),
        }
    }

    pub fn position(&self, k: &[u16]) -> Option<usize> {
        if k.len() != self.n_modes {
            return None;
        }
        (0..self.len()).find(|&a| self.index(a) == k)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Equation {
    Linear,
    #[default]
    Nonlinear,
}

/// Full hierarchy state: auxiliary `a` occupies `psi[a * dim..(a + 1) * dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HopsState {
    pub dim: usize,
    pub psi: Vec<C64>,
    pub shift: Vec<C64>,
    pub t: f64,
}

impl HopsState {
    pub fn zeroth(&self) -> &[C64] {
        &self.psi[..self.dim]
    }

    pub fn aux(&self, a: usize) -> &[C64] {
        &self.psi[a * self.dim..(a + 1) * self.dim]
    }

    pub fn n_aux(&self) -> usize {
        self.psi.len() / self.dim
    }

    pub fn norm_sq(&self) -> f64 {
        self.zeroth().iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Operator applied at an interaction time.
#[derive(Clone, Copy, Debug)]
pub enum Interaction<'a> {
    System(&'a SystemOperator),
    Dyadic(&'a DyadicOperator),
}

impl Interaction<'_> {
    fn dim(&self) -> usize {
        match self {
            Interaction::System(op) => op.dim(),
            Interaction::Dyadic(op) => 2 * op.block_dim(),
        }
    }

    fn apply(&self, v: &[C64]) -> Vec<C64> {
        match self {
            Interaction::System(op) => op.apply(v),
            Interaction::Dyadic(op) => op.apply(v),
        }
    }
}

/// Multiplies every auxiliary by the operator; the shift accumulators are left
/// alone. Returns the squared norms of the zeroth auxiliary before and after.
pub fn apply_interaction(state: &mut HopsState, op: Interaction<'_>) -> Result<(f64, f64), HopsError> {
    if op.dim() != state.dim {
        return Err(HopsError::DimensionMismatch {
            expected: state.dim,
            got: op.dim(),
        });
    }
    let before = state.norm_sq();
    for chunk in state.psi.chunks_exact_mut(state.dim) {
        if chunk.iter().all(|c| *c == ZERO) {
            continue;
        }
        let out = op.apply(chunk);
        chunk.copy_from_slice(&out);
    }
    Ok((before, state.norm_sq()))
}

#[derive(Clone, Copy, Debug)]
struct ModeTerm {
    site: usize,
    p: C64,
    w: C64,
}

/// Support-independent coefficient tables of the hierarchy couplings.
#[derive(Debug)]
struct Tables {
    /// `sum_m k_m w_m` per auxiliary.
    damping: Vec<C64>,
    lower_start: Vec<usize>,
    /// `(source auxiliary, site, k_m p_m)`.
    lower: Vec<(u32, u32, C64)>,
    raise_start: Vec<usize>,
    /// `(source auxiliary, site)`.
    raise: Vec<(u32, u32)>,
}

/// `L` complex numbers stored as separate real and imaginary lanes, one lane
/// per trajectory. Every lane sees exactly the same sequence of floating-point
/// operations, so a trajectory's result does not depend on its batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lanes<const L: usize> {
    pub re: [f64; L],
    pub im: [f64; L],
}

impl<const L: usize> Lanes<L> {
    pub const ZERO: Self = Self {
        re: [0.0; L],
        im: [0.0; L],
    };

    pub fn splat(c: C64) -> Self {
        Self {
            re: [c.re; L],
            im: [c.im; L],
        }
    }

    pub fn get(&self, lane: usize) -> C64 {
        C64::new(self.re[lane], self.im[lane])
    }

    pub fn set(&mut self, lane: usize, c: C64) {
        self.re[lane] = c.re;
        self.im[lane] = c.im;
    }

    #[inline(always)]
    fn is_zero(&self) -> bool {
        self.re.iter().chain(&self.im).all(|v| *v == 0.0)
    }

    /// `self += c x` with a lane-independent coefficient.
    #[inline(always)]
    fn add_scaled(&mut self, c: C64, x: &Self) {
        for l in 0..L {
            self.re[l] += c.re * x.re[l] - c.im * x.im[l];
            self.im[l] += c.re * x.im[l] + c.im * x.re[l];
        }
    }

    /// `self = d x` lane by lane.
    #[inline(always)]
    fn set_lane_mul(&mut self, d: &Self, x: &Self) {
        for l in 0..L {
            self.re[l] = d.re[l] * x.re[l] - d.im[l] * x.im[l];
            self.im[l] = d.re[l] * x.im[l] + d.im[l] * x.re[l];
        }
    }

    /// `self -= s x` with real per-lane factors.
    #[inline(always)]
    fn sub_real_mul(&mut self, s: &[f64; L], x: &Self) {
        for l in 0..L {
            self.re[l] -= s[l] * x.re[l];
            self.im[l] -= s[l] * x.im[l];
        }
    }

    #[inline(always)]
    fn add_norm_sqr(&self, acc: &mut [f64; L]) {
        for l in 0..L {
            acc[l] += self.re[l] * self.re[l] + self.im[l] * self.im[l];
        }
    }
}

fn axpy<const L: usize>(y: &mut [Lanes<L>], a: f64, x: &[Lanes<L>]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        for l in 0..L {
            yi.re[l] += a * xi.re[l];
            yi.im[l] += a * xi.im[l];
        }
    }
}

fn axpy_into<const L: usize>(out: &mut [Lanes<L>], y: &[Lanes<L>], a: f64, x: &[Lanes<L>]) {
    for ((o, yi), xi) in out.iter_mut().zip(y).zip(x) {
        for l in 0..L {
            o.re[l] = yi.re[l] + a * xi.re[l];
            o.im[l] = yi.im[l] + a * xi.im[l];
        }
    }
}

/// System-space part of the generator restricted to a support.
#[derive(Debug)]
struct Kernel {
    support: Vec<usize>,
    /// `-i H_ii`.
    diag: Vec<C64>,
    /// `(i, j, -i H_ij)` for the nonzero off-diagonal entries.
    offdiag: Vec<(usize, usize, C64)>,
    /// Diagonal of `L_n` restricted to the support, per site.
    l: Vec<Vec<f64>>,
}

/// A batch of `L` trajectories sharing one support and one hierarchy, each in
/// its own lane.
#[derive(Clone, Debug)]
pub struct LaneState<const L: usize> {
    kernel: Arc<Kernel>,
    psi: Vec<Lanes<L>>,
    shift: Vec<Lanes<L>>,
    t: f64,
    failed: [Option<f64>; L],
}

impl<const L: usize> LaneState<L> {
    pub fn support(&self) -> &[usize] {
        &self.kernel.support
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    /// Time at which each lane blew up, if it did. Failed lanes are zeroed.
    pub fn failed(&self) -> &[Option<f64>; L] {
        &self.failed
    }

    pub fn norm_sq(&self) -> [f64; L] {
        let mut acc = [0.0; L];
        for x in &self.psi[..self.kernel.support.len()] {
            x.add_norm_sqr(&mut acc);
        }
        acc
    }

    /// Zeroth auxiliary of one lane on the full space of dimension `dim`.
    pub fn zeroth_full(&self, lane: usize, dim: usize) -> Vec<C64> {
        let mut out = vec![ZERO; dim];
        for (c, &i) in self.kernel.support.iter().enumerate() {
            out[i] = self.psi[c].get(lane);
        }
        out
    }

    /// `<v|psi0>` per lane for a full-space vector `v`.
    pub fn overlap(&self, v: &[C64]) -> [C64; L] {
        let mut acc = [ZERO; L];
        for (c, &i) in self.kernel.support.iter().enumerate() {
            if v[i] == ZERO {
                continue;
            }
            for (l, a) in acc.iter_mut().enumerate() {
                *a += v[i].conj() * self.psi[c].get(l);
            }
        }
        acc
    }

    /// `<psi0| A |psi0>` per lane for a full-space matrix `A`.
    pub fn bilinear(&self, a: &DMatrix<C64>) -> [C64; L] {
        let s = &self.kernel.support;
        let mut acc = [ZERO; L];
        for (ci, &i) in s.iter().enumerate() {
            for (cj, &j) in s.iter().enumerate() {
                let aij = a[(i, j)];
                if aij == ZERO {
                    continue;
                }
                let (x, y) = (&self.psi[ci], &self.psi[cj]);
                for (l, v) in acc.iter_mut().enumerate() {
                    *v += x.get(l).conj() * aij * y.get(l);
                }
            }
        }
        acc
    }
}

/// Equation of motion for one system space (single or dyadic) and bath.
#[derive(Clone, Debug)]
pub struct HopsGenerator {
    dim: usize,
    hamiltonian: DMatrix<C64>,
    couplings: Vec<Vec<f64>>,
    modes: Vec<ModeTerm>,
    hierarchy: Arc<HierarchyIndexSet>,
    tables: Arc<Tables>,
    equation: Equation,
    implicit_norm: f64,
    dt: f64,
    dyadic: bool,
}

impl HopsGenerator {
    /// Single-space generator; `couplings[n]` is `L_n`.
    pub fn new(
        hamiltonian: &SystemOperator,
        couplings: &[SystemOperator],
        bath: &ExponentialBath,
        depth: usize,
        dt: f64,
        equation: Equation,
    ) -> Result<Self, HopsError> {
        let dim = hamiltonian.dim();
        let diags = coupling_diagonals(couplings, bath, dim)?;
        Self::assemble(hamiltonian.matrix().clone(), diags, bath, depth, dt, equation, false)
    }

    /// Generator on the doubled space `(phi_B, phi_K)` with `H` and every `L_n`
    /// lifted block-diagonally.
    pub fn dyadic(
        hamiltonian: &SystemOperator,
        couplings: &[SystemOperator],
        bath: &ExponentialBath,
        depth: usize,
        dt: f64,
        equation: Equation,
    ) -> Result<Self, HopsError> {
        let d = hamiltonian.dim();
        let diags = coupling_diagonals(couplings, bath, d)?
            .into_iter()
            .map(|l| l.iter().chain(l.iter()).copied().collect())
            .collect();
        Self::assemble(lift_block_diagonal(hamiltonian), diags, bath, depth, dt, equation, true)
    }

    fn assemble(
        hamiltonian: DMatrix<C64>,
        couplings: Vec<Vec<f64>>,
        bath: &ExponentialBath,
        depth: usize,
        dt: f64,
        equation: Equation,
        dyadic: bool,
    ) -> Result<Self, HopsError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(HopsError::BadStep);
        }
        let modes: Vec<ModeTerm> = bath
            .flattened()
            .into_iter()
            .map(|(site, m)| ModeTerm { site, p: m.p, w: m.w })
            .collect();
        let hierarchy = Arc::new(build_hierarchy(&bath.modes_per_site(), depth)?);
        let tables = Arc::new(build_tables(&hierarchy, &modes));
        Ok(Self {
            dim: hamiltonian.nrows(),
            hamiltonian,
            couplings,
            modes,
            hierarchy,
            tables,
            equation,
            implicit_norm: 0.0,
            dt,
            dyadic,
        })
    }

    /// Same bath and hierarchy with a different system Hamiltonian (lifted to
    /// the doubled space for dyadic generators).
    pub fn with_hamiltonian(&self, hamiltonian: &SystemOperator) -> Result<Self, HopsError> {
        let h = if self.dyadic {
            lift_block_diagonal(hamiltonian)
        } else {
            hamiltonian.matrix().clone()
        };
        if h.nrows() != self.dim {
            return Err(HopsError::DimensionMismatch {
                expected: self.dim,
                got: h.nrows(),
            });
        }
        Ok(Self {
            hamiltonian: h,
            ..self.clone()
        })
    }

    pub fn is_dyadic(&self) -> bool {
        self.dyadic
    }

    /// Adds `c` to the squared norm in the denominator of `<L_n>`, standing in
    /// for a component of the state that is not propagated explicitly.
    pub fn with_implicit_norm(mut self, c: f64) -> Self {
        self.implicit_norm = c;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn equation(&self) -> Equation {
        self.equation
    }

    pub fn hierarchy(&self) -> &HierarchyIndexSet {
        &self.hierarchy
    }

    /// Hierarchy state with `initial` in the zeroth auxiliary and zeros elsewhere.
    pub fn initial_state(&self, initial: &[C64], t0: f64) -> Result<HopsState, HopsError> {
        self.check_dim(initial.len())?;
        let mut psi = vec![ZERO; self.hierarchy.len() * self.dim];
        psi[..self.dim].copy_from_slice(initial);
        Ok(HopsState {
            dim: self.dim,
            psi,
            shift: vec![ZERO; self.modes.len()],
            t: t0,
        })
    }

    fn check_dim(&self, got: usize) -> Result<(), HopsError> {
        if got != self.dim {
            return Err(HopsError::DimensionMismatch {
                expected: self.dim,
                got,
            });
        }
        Ok(())
    }

    /// `<L_n>` from a zeroth auxiliary, zero for every site in the linear form.
    pub fn expectations(&self, zeroth: &[C64]) -> Vec<f64> {
        if self.equation == Equation::Linear {
            return vec![0.0; self.couplings.len()];
        }
        let norm: f64 = zeroth.iter().map(|c| c.norm_sqr()).sum::<f64>() + self.implicit_norm;
        self.couplings
            .iter()
            .map(|l| {
                if norm == 0.0 {
                    return 0.0;
                }
                l.iter().zip(zeroth).map(|(li, c)| li * c.norm_sqr()).sum::<f64>() / norm
            })
            .collect()
    }

    /// Smallest `H`-invariant index set containing `seed`.
    fn closure(&self, mut mark: Vec<bool>) -> Vec<usize> {
        let mut stack: Vec<usize> = (0..self.dim).filter(|&i| mark[i]).collect();
        while let Some(i) = stack.pop() {
            for j in 0..self.dim {
                if !mark[j] && (self.hamiltonian[(i, j)] != ZERO || self.hamiltonian[(j, i)] != ZERO) {
                    mark[j] = true;
                    stack.push(j);
                }
            }
        }
        (0..self.dim).filter(|&i| mark[i]).collect()
    }

    /// Smallest `H`-invariant index set containing every nonzero entry.
    pub fn support_of(&self, state: &HopsState) -> Vec<usize> {
        let mut mark = vec![false; self.dim];
        for chunk in state.psi.chunks_exact(self.dim) {
            for (i, c) in chunk.iter().enumerate() {
                if *c != ZERO {
                    mark[i] = true;
                }
            }
        }
        self.closure(mark)
    }

    fn kernel(&self, support: Vec<usize>) -> Arc<Kernel> {
        let minus_i = C64::new(0.0, -1.0);
        let diag = support.iter().map(|&i| minus_i * self.hamiltonian[(i, i)]).collect();
        let mut offdiag = Vec::new();
        for (ci, &i) in support.iter().enumerate() {
            for (cj, &j) in support.iter().enumerate() {
                if ci != cj && self.hamiltonian[(i, j)] != ZERO {
                    offdiag.push((ci, cj, minus_i * self.hamiltonian[(i, j)]));
                }
            }
        }
        let l = self
            .couplings
            .iter()
            .map(|diag| support.iter().map(|&i| diag[i]).collect())
            .collect();
        Arc::new(Kernel {
            support,
            diag,
            offdiag,
            l,
        })
    }

    /// Batch with the same zeroth auxiliary `initial` in every lane.
    pub fn lanes_from_initial<const L: usize>(&self, initial: &[C64], t0: f64) -> Result<LaneState<L>, HopsError> {
        self.check_dim(initial.len())?;
        let kernel = self.kernel(self.closure(initial.iter().map(|c| *c != ZERO).collect()));
        let ds = kernel.support.len();
        let mut psi = vec![Lanes::ZERO; self.hierarchy.len() * ds];
        for (c, &i) in kernel.support.iter().enumerate() {
            psi[c] = Lanes::splat(initial[i]);
        }
        Ok(LaneState {
            kernel,
            psi,
            shift: vec![Lanes::ZERO; self.modes.len()],
            t: t0,
            failed: [None; L],
        })
    }

    /// Packs full states (all at the same time) into lanes on their joint support.
    pub fn pack<const L: usize>(&self, states: &[&HopsState; L]) -> Result<LaneState<L>, HopsError> {
        let mut mark = vec![false; self.dim];
        for s in states {
            self.check_dim(s.dim)?;
            for m in self.support_of(s) {
                mark[m] = true;
            }
        }
        let kernel = self.kernel(self.closure(mark));
        let ds = kernel.support.len();
        let n_aux = self.hierarchy.len();
        let mut psi = vec![Lanes::ZERO; n_aux * ds];
        let mut shift = vec![Lanes::ZERO; self.modes.len()];
        for (lane, s) in states.iter().enumerate() {
            for a in 0..n_aux {
                for (c, &i) in kernel.support.iter().enumerate() {
                    psi[a * ds + c].set(lane, s.psi[a * self.dim + i]);
                }
            }
            for (m, v) in s.shift.iter().enumerate() {
                shift[m].set(lane, *v);
            }
        }
        Ok(LaneState {
            kernel,
            psi,
            shift,
            t: states[0].t,
            failed: [None; L],
        })
    }

    pub fn unpack<const L: usize>(&self, ls: &LaneState<L>) -> Vec<HopsState> {
        let ds = ls.kernel.support.len();
        let n_aux = self.hierarchy.len();
        (0..L)
            .map(|lane| {
                let mut psi = vec![ZERO; n_aux * self.dim];
                for a in 0..n_aux {
                    for (c, &i) in ls.kernel.support.iter().enumerate() {
                        psi[a * self.dim + i] = ls.psi[a * ds + c].get(lane);
                    }
                }
                HopsState {
                    dim: self.dim,
                    psi,
                    shift: ls.shift.iter().map(|s| s.get(lane)).collect(),
                    t: ls.t,
                }
            })
            .collect()
    }

    /// Applies `op` (full-space matrix) to every auxiliary of every lane.
    /// Returns the new batch on the image support and the squared norms of
    /// the zeroth auxiliary before and after, per lane.
    pub fn interact<const L: usize>(
        &self,
        ls: &LaneState<L>,
        op: &DMatrix<C64>,
    ) -> Result<(LaneState<L>, [f64; L], [f64; L]), HopsError> {
        self.check_dim(op.nrows())?;
        let old = &ls.kernel.support;
        let mut mark = vec![false; self.dim];
        for i in 0..self.dim {
            mark[i] = old.iter().any(|&j| op[(i, j)] != ZERO);
        }
        let kernel = self.kernel(self.closure(mark));
        let mut entries = Vec::new();
        for (ci, &i) in kernel.support.iter().enumerate() {
            for (cj, &j) in old.iter().enumerate() {
                if op[(i, j)] != ZERO {
                    entries.push((ci, cj, op[(i, j)]));
                }
            }
        }
        let (ds_old, ds) = (old.len(), kernel.support.len());
        let n_aux = self.hierarchy.len();
        let mut psi = vec![Lanes::ZERO; n_aux * ds];
        for a in 0..n_aux {
            let src = &ls.psi[a * ds_old..(a + 1) * ds_old];
            if src.iter().all(Lanes::is_zero) {
                continue;
            }
            let dst = &mut psi[a * ds..(a + 1) * ds];
            for &(ci, cj, c) in &entries {
                dst[ci].add_scaled(c, &src[cj]);
            }
        }
        let out = LaneState {
            kernel,
            psi,
            shift: ls.shift.clone(),
            t: ls.t,
            failed: ls.failed,
        };
        let (before, after) = (ls.norm_sq(), out.norm_sq());
        Ok((out, before, after))
    }

    /// Time derivative of every auxiliary and shift accumulator of a full state.
    pub fn rhs(&self, state: &HopsState, noise: &NoiseTrajectory) -> (Vec<C64>, Vec<C64>) {
        let kernel = self.kernel((0..self.dim).collect());
        let psi: Vec<Lanes<1>> = state.psi.iter().map(|c| Lanes::splat(*c)).collect();
        let shift: Vec<Lanes<1>> = state.shift.iter().map(|c| Lanes::splat(*c)).collect();
        let mut ws = Workspace::<1>::new(self, &kernel, psi.len(), shift.len());
        let mut dpsi = vec![Lanes::ZERO; psi.len()];
        let mut dshift = vec![Lanes::ZERO; shift.len()];
        self.eval::<1, 0>(&kernel, state.t, &psi, &shift, &[noise], &mut ws, &mut dpsi, &mut dshift);
        (
            dpsi.iter().map(|v| v.get(0)).collect(),
            dshift.iter().map(|v| v.get(0)).collect(),
        )
    }

    pub fn steps_for(&self, duration: f64) -> Result<usize, HopsError> {
        let n = (duration / self.dt).round();
        if duration < 0.0 || (n * self.dt - duration).abs() > 1e-9 * duration.max(1.0) {
            return Err(HopsError::StepMismatch {
                duration,
                dt: self.dt,
            });
        }
        Ok(n as usize)
    }

    /// Propagates a full state by `duration` (an integer multiple of `dt`).
    pub fn propagate(&self, state: &mut HopsState, duration: f64, noise: &NoiseTrajectory) -> Result<(), HopsError> {
        let n = self.steps_for(duration)?;
        if n == 0 {
            return Ok(());
        }
        let mut ls = self.pack::<1>(&[state])?;
        self.advance(&mut ls, n, &[noise])?;
        if let Some(t) = ls.failed[0] {
            return Err(HopsError::NonFinite { t });
        }
        *state = self.unpack(&ls).pop().unwrap();
        Ok(())
    }

    /// Advances every lane by `n_steps` RK4 steps, lane `l` driven by
    /// `noise[l]`. A lane whose zeroth auxiliary stops being finite is zeroed
    /// and flagged in [`LaneState::failed`].
    pub fn advance<const L: usize>(
        &self,
        ls: &mut LaneState<L>,
        n_steps: usize,
        noise: &[&NoiseTrajectory],
    ) -> Result<(), HopsError> {
        assert_eq!(noise.len(), L, "one noise trajectory per lane");
        if n_steps == 0 {
            return Ok(());
        }
        let t_end = ls.t + n_steps as f64 * self.dt;
        for z in noise {
            if z.values.iter().any(|r| !r.is_empty()) && t_end > z.duration() + 1e-9 {
                return Err(HopsError::NoiseTooShort {
                    needed: t_end,
                    available: z.duration(),
                });
            }
        }
        let mut ws = Workspace::new(self, &ls.kernel, ls.psi.len(), ls.shift.len());
        let t0 = ls.t;
        let step_fn = match ls.kernel.support.len() {
            1 => Self::rk4_step::<L, 1>,
            2 => Self::rk4_step::<L, 2>,
            3 => Self::rk4_step::<L, 3>,
            4 => Self::rk4_step::<L, 4>,
            5 => Self::rk4_step::<L, 5>,
            6 => Self::rk4_step::<L, 6>,
            8 => Self::rk4_step::<L, 8>,
            _ => Self::rk4_step::<L, 0>,
        };
        for step in 0..n_steps {
            let t = t0 + step as f64 * self.dt;
            step_fn(self, ls, t, noise, &mut ws);
            let norm = ls.norm_sq();
            for (lane, nrm) in norm.iter().enumerate() {
                if !nrm.is_finite() && ls.failed[lane].is_none() {
                    ls.failed[lane] = Some(t + self.dt);
                }
                if ls.failed[lane].is_some() {
                    for v in ls.psi.iter_mut().chain(ls.shift.iter_mut()) {
                        v.set(lane, ZERO);
                    }
                }
            }
        }
        ls.t = t_end;
        Ok(())
    }

    /// One RK4 step. `D` is the support size when known at compile time, 0 otherwise.
    fn rk4_step<const L: usize, const D: usize>(&self, ls: &mut LaneState<L>, t: f64, noise: &[&NoiseTrajectory], ws: &mut Workspace<L>) {
        let h = self.dt;
        let mut k = std::mem::take(&mut ws.k);
        let mut ks = std::mem::take(&mut ws.ks);
        let mut acc = std::mem::take(&mut ws.acc);
        let mut accs = std::mem::take(&mut ws.accs);
        let mut tmp = std::mem::take(&mut ws.tmp);
        let mut tmps = std::mem::take(&mut ws.tmps);
        let kern = Arc::clone(&ls.kernel);

        self.eval::<L, D>(&kern, t, &ls.psi, &ls.shift, noise, ws, &mut k, &mut ks);
        acc.copy_from_slice(&k);
        accs.copy_from_slice(&ks);
        axpy_into(&mut tmp, &ls.psi, 0.5 * h, &k);
        axpy_into(&mut tmps, &ls.shift, 0.5 * h, &ks);

        self.eval::<L, D>(&kern, t + 0.5 * h, &tmp, &tmps, noise, ws, &mut k, &mut ks);
        axpy(&mut acc, 2.0, &k);
        axpy(&mut accs, 2.0, &ks);
        axpy_into(&mut tmp, &ls.psi, 0.5 * h, &k);
        axpy_into(&mut tmps, &ls.shift, 0.5 * h, &ks);

        self.eval::<L, D>(&kern, t + 0.5 * h, &tmp, &tmps, noise, ws, &mut k, &mut ks);
        axpy(&mut acc, 2.0, &k);
        axpy(&mut accs, 2.0, &ks);
        axpy_into(&mut tmp, &ls.psi, h, &k);
        axpy_into(&mut tmps, &ls.shift, h, &ks);

        self.eval::<L, D>(&kern, t + h, &tmp, &tmps, noise, ws, &mut k, &mut ks);
        axpy(&mut acc, 1.0, &k);
        axpy(&mut accs, 1.0, &ks);

        axpy(&mut ls.psi, h / 6.0, &acc);
        axpy(&mut ls.shift, h / 6.0, &accs);

        ws.k = k;
        ws.ks = ks;
        ws.acc = acc;
        ws.accs = accs;
        ws.tmp = tmp;
        ws.tmps = tmps;
    }

    #[allow(clippy::too_many_arguments)]
    fn eval<const L: usize, const D: usize>(
        &self,
        kern: &Kernel,
        t: f64,
        psi: &[Lanes<L>],
        shift: &[Lanes<L>],
        noise: &[&NoiseTrajectory],
        ws: &mut Workspace<L>,
        dpsi: &mut [Lanes<L>],
        dshift: &mut [Lanes<L>],
    ) {
        let ds = if D == 0 { kern.support.len() } else { D };
        let n_sites = self.couplings.len();
        let nonlinear = self.equation == Equation::Nonlinear;

        for (n, zeta) in ws.zeta.iter_mut().enumerate() {
            for (lane, z) in noise.iter().enumerate() {
                zeta.set(lane, z.at(n, t).conj());
            }
        }
        if nonlinear {
            for (m, mode) in self.modes.iter().enumerate() {
                let z = &mut ws.zeta[mode.site];
                for l in 0..L {
                    z.re[l] += shift[m].re[l];
                    z.im[l] += shift[m].im[l];
                }
            }
            let mut norm = [self.implicit_norm; L];
            for x in &psi[..ds] {
                x.add_norm_sqr(&mut norm);
            }
            for n in 0..n_sites {
                let mut e = [0.0; L];
                for (i, x) in psi[..ds].iter().enumerate() {
                    let li = kern.l[n][i];
                    for l in 0..L {
                        e[l] += li * (x.re[l] * x.re[l] + x.im[l] * x.im[l]);
                    }
                }
                for l in 0..L {
                    ws.expect[n][l] = if norm[l] == 0.0 { 0.0 } else { e[l] / norm[l] };
                }
            }
        }
        for i in 0..ds {
            let mut d = Lanes::splat(kern.diag[i]);
            for n in 0..n_sites {
                let li = kern.l[n][i];
                for l in 0..L {
                    d.re[l] += li * ws.zeta[n].re[l];
                    d.im[l] += li * ws.zeta[n].im[l];
                }
            }
            ws.drift[i] = d;
        }
        for n in 0..n_sites {
            for i in 0..ds {
                let li = kern.l[n][i];
                let s = &mut ws.shifted[n * ds + i];
                for l in 0..L {
                    s[l] = li - ws.expect[n][l];
                }
            }
        }

        let tab = &*self.tables;
        for a in 0..self.hierarchy.len() {
            let x = &psi[a * ds..(a + 1) * ds];
            let out = &mut dpsi[a * ds..(a + 1) * ds];
            let damp = tab.damping[a];
            for i in 0..ds {
                let mut d = ws.drift[i];
                for l in 0..L {
                    d.re[l] -= damp.re;
                    d.im[l] -= damp.im;
                }
                out[i].set_lane_mul(&d, &x[i]);
            }
            for &(i, j, c) in &kern.offdiag {
                out[i].add_scaled(c, &x[j]);
            }
            for &(src, site, coef) in &tab.lower[tab.lower_start[a]..tab.lower_start[a + 1]] {
                let y = &psi[src as usize * ds..(src as usize + 1) * ds];
                let l = &kern.l[site as usize];
                for i in 0..ds {
                    out[i].add_scaled(coef * l[i], &y[i]);
                }
            }
            for &(src, site) in &tab.raise[tab.raise_start[a]..tab.raise_start[a + 1]] {
                let y = &psi[src as usize * ds..(src as usize + 1) * ds];
                let s = &ws.shifted[site as usize * ds..(site as usize + 1) * ds];
                for i in 0..ds {
                    out[i].sub_real_mul(&s[i], &y[i]);
                }
            }
        }

        for (m, mode) in self.modes.iter().enumerate() {
            let mut d = Lanes::ZERO;
            if nonlinear {
                d.add_scaled(-mode.w.conj(), &shift[m]);
                let pc = mode.p.conj();
                for l in 0..L {
                    d.re[l] += pc.re * ws.expect[mode.site][l];
                    d.im[l] += pc.im * ws.expect[mode.site][l];
                }
            }
            dshift[m] = d;
        }
    }
}

fn lift_block_diagonal(op: &SystemOperator) -> DMatrix<C64> {
    let d = op.dim();
    let mut h = DMatrix::zeros(2 * d, 2 * d);
    h.view_mut((0, 0), (d, d)).copy_from(op.matrix());
    h.view_mut((d, d), (d, d)).copy_from(op.matrix());
    h
}

fn coupling_diagonals(couplings: &[SystemOperator], bath: &ExponentialBath, dim: usize) -> Result<Vec<Vec<f64>>, HopsError> {
    if couplings.len() != bath.n_sites() {
        return Err(HopsError::CouplingCount {
            expected: bath.n_sites(),
            got: couplings.len(),
        });
    }
    couplings
        .iter()
        .enumerate()
        .map(|(n, l)| {
            if l.dim() != dim {
                return Err(HopsError::DimensionMismatch {
                    expected: dim,
                    got: l.dim(),
                });
            }
            l.real_diagonal().ok_or(HopsError::NonDiagonalCoupling(n))
        })
        .collect()
}

fn build_tables(hierarchy: &HierarchyIndexSet, modes: &[ModeTerm]) -> Tables {
    let n_aux = hierarchy.len();
    let mut damping = Vec::with_capacity(n_aux);
    let mut lower_start = vec![0];
    let mut lower = Vec::new();
    let mut raise_start = vec![0];
    let mut raise = Vec::new();
    for a in 0..n_aux {
        let k = if modes.is_empty() { &[][..] } else { hierarchy.index(a) };
        damping.push(k.iter().zip(modes).map(|(&km, m)| m.w * km as f64).sum());
        for (m, mode) in modes.iter().enumerate() {
            if let Some(b) = hierarchy.lower(a, m) {
                lower.push((b as u32, mode.site as u32, mode.p * k[m] as f64));
            }
            if let Some(b) = hierarchy.raise(a, m) {
                raise.push((b as u32, mode.site as u32));
            }
        }
        lower_start.push(lower.len());
        raise_start.push(raise.len());
    }
    Tables {
        damping,
        lower_start,
        lower,
        raise_start,
        raise,
    }
}

struct Workspace<const L: usize> {
    zeta: Vec<Lanes<L>>,
    expect: Vec<[f64; L]>,
    drift: Vec<Lanes<L>>,
    shifted: Vec<[f64; L]>,
    k: Vec<Lanes<L>>,
    ks: Vec<Lanes<L>>,
    acc: Vec<Lanes<L>>,
    accs: Vec<Lanes<L>>,
    tmp: Vec<Lanes<L>>,
    tmps: Vec<Lanes<L>>,
}

impl<const L: usize> Workspace<L> {
    fn new(g: &HopsGenerator, kernel: &Kernel, np: usize, nm: usize) -> Self {
        let n_sites = g.couplings.len();
        let ds = kernel.support.len();
        Self {
            zeta: vec![Lanes::ZERO; n_sites],
            expect: vec![[0.0; L]; n_sites],
            drift: vec![Lanes::ZERO; ds],
            shifted: vec![[0.0; L]; n_sites * ds],
            k: vec![Lanes::ZERO; np],
            ks: vec![Lanes::ZERO; nm],
            acc: vec![Lanes::ZERO; np],
            accs: vec![Lanes::ZERO; nm],
            tmp: vec![Lanes::ZERO; np],
            tmps: vec![Lanes::ZERO; nm],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::ExponentialMode;
    use crate::model::*;
    use proptest::prelude::*;

    #[test]
    fn hierarchy_sizes() {
        assert_eq!(build_hierarchy(&[1, 1], 10).unwrap().len(), 66);
        assert_eq!(build_hierarchy(&[1, 1], 11).unwrap().len(), 78);
        assert_eq!(build_hierarchy(&[1, 1], 0).unwrap().len(), 1);
        assert_eq!(build_hierarchy(&[], 5).unwrap().len(), 1);
        assert_eq!(build_hierarchy(&[2, 1, 0], 4).unwrap().len(), 35);
        assert!(matches!(
            build_hierarchy(&[1; 40], 40),
            Err(HopsError::TooManyAuxiliaries(_))
        ));
    }

    #[test]
    fn hierarchy_ordering_and_truncation() {
        let h = build_hierarchy(&[1, 1], 3).unwrap();
        assert_eq!(h.index(0), &[0, 0]);
        assert_eq!(h.level(1), 1);
        for a in 0..h.len() {
            for m in 0..2 {
                if h.level(a) == 3 {
                    assert_eq!(h.raise(a, m), None);
                }
                if h.index(a)[m] == 0 {
                    assert_eq!(h.lower(a, m), None);
                }
            }
        }
        assert_eq!(h.position(&[1, 2]).map(|a| h.level(a)), Some(3));
        assert_eq!(h.position(&[2, 2]), None);
    }

    proptest! {
        #[test]
        fn hierarchy_size_and_neighbours(modes in proptest::collection::vec(0usize..3, 1..4), depth in 0usize..6) {
            let h = build_hierarchy(&modes, depth).unwrap();
            let m: usize = modes.iter().sum();
            prop_assert_eq!(h.len() as u128, hierarchy_size(m, depth));
            for a in 0..h.len() {
                for mode in 0..m {
                    if let Some(b) = h.raise(a, mode) {
                        prop_assert_eq!(h.lower(b, mode), Some(a));
                        prop_assert_eq!(h.level(b), h.level(a) + 1);
                    }
                    if let Some(b) = h.lower(a, mode) {
                        prop_assert_eq!(h.raise(b, mode), Some(a));
                    }
                }
            }
        }
    }

    fn dimer() -> (ExcitonModel, StateSpace, SystemOperator, Vec<SystemOperator>) {
        let model = ExcitonModel::homodimer(0.0, 0.3, 1.0);
        let space = build_state_space(&model);
        let h = build_exciton_hamiltonian(&model, &space).unwrap();
        let l = build_coupling_operators(&model, &space).unwrap();
        (model, space, h, l)
    }

    #[test]
    fn ground_dyad_has_zero_coupling_expectation() {
        let (_, space, h, l) = dimer();
        let bath = ExponentialBath::uniform(2, ExponentialMode::damped_vibration(0.5, 0.25, 1.0));
        let g = HopsGenerator::dyadic(&h, &l, &bath, 3, 0.1, Equation::Nonlinear).unwrap();
        let mut v = space.ground_vector();
        v.extend(space.ground_vector());
        assert_eq!(g.expectations(&v), vec![0.0, 0.0]);
    }

    #[test]
    fn interaction_norms() {
        let (model, space, h, l) = dimer();
        let bath = ExponentialBath::uniform(2, ExponentialMode::damped_vibration(0.5, 0.25, 1.0));
        let g = HopsGenerator::dyadic(&h, &l, &bath, 2, 0.1, Equation::Nonlinear).unwrap();
        let mut v = space.ground_vector();
        v.extend(space.ground_vector());
        let mut s = g.initial_state(&v, 0.0).unwrap();
        let (plus, minus) = build_dipole_operators(&model, &space).unwrap();
        let id = SystemOperator::identity(space.dim());
        let v1 = DyadicOperator::lift(id.clone(), plus.clone()).unwrap();
        assert_eq!(apply_interaction(&mut s, Interaction::Dyadic(&v1)).unwrap(), (2.0, 3.0));

        let unit = DyadicOperator::lift(id.clone(), id.clone()).unwrap();
        let before = s.clone();
        let (a, b) = apply_interaction(&mut s, Interaction::Dyadic(&unit)).unwrap();
        assert_eq!(a, b);
        assert_eq!(s, before);

        let mut single = HopsGenerator::new(&h, &l, &bath, 2, 0.1, Equation::Linear)
            .unwrap()
            .initial_state(&plus.apply(&space.ground_vector()), 0.0)
            .unwrap();
        apply_interaction(&mut single, Interaction::System(&minus)).unwrap();
        let (_, after) = apply_interaction(&mut single, Interaction::System(&minus)).unwrap();
        assert_eq!(after, 0.0);
        assert!(apply_interaction(&mut single, Interaction::Dyadic(&v1)).is_err());
    }

    #[test]
    fn support_is_manifold_closure() {
        let (_, space, h, l) = dimer();
        let bath = ExponentialBath::uniform(2, ExponentialMode::damped_vibration(0.5, 0.25, 1.0));
        let g = HopsGenerator::new(&h, &l, &bath, 2, 0.1, Equation::Nonlinear).unwrap();
        let mut v = vec![ZERO; space.dim()];
        v[1] = C64::new(1.0, 0.0);
        let s = g.initial_state(&v, 0.0).unwrap();
        assert_eq!(g.support_of(&s), vec![1, 2]);
        let packed = g.pack::<1>(&[&s]).unwrap();
        assert_eq!(packed.support(), &[1, 2]);
        assert_eq!(g.unpack(&packed), vec![s]);
    }

    #[test]
    fn zero_duration_is_identity() {
        let (_, space, h, l) = dimer();
        let bath = ExponentialBath::uniform(2, ExponentialMode::damped_vibration(0.5, 0.25, 1.0));
        let g = HopsGenerator::new(&h, &l, &bath, 2, 0.1, Equation::Nonlinear).unwrap();
        let noise = NoiseTrajectory::zeros(2, 0.05, 10);
        let mut s = g.initial_state(&space.ground_vector(), 0.0).unwrap();
        let before = s.clone();
        g.propagate(&mut s, 0.0, &noise).unwrap();
        assert_eq!(s, before);
        assert!(matches!(
            g.propagate(&mut s, 0.15, &noise),
            Err(HopsError::StepMismatch { .. })
        ));
    }

    #[test]
    fn noise_coverage_is_checked() {
        let (_, space, h, l) = dimer();
        let bath = ExponentialBath::uniform(2, ExponentialMode::damped_vibration(0.5, 0.25, 1.0));
        let g = HopsGenerator::new(&h, &l, &bath, 2, 0.1, Equation::Nonlinear).unwrap();
        let noise = crate::noise::generate_noise(&bath, 0.05, 10, 0, 0).unwrap();
        let mut s = g.initial_state(&space.ground_vector(), 0.0).unwrap();
        assert!(matches!(
            g.propagate(&mut s, 1.0, &noise),
            Err(HopsError::NoiseTooShort { .. })
        ));
    }
}
