//! Frenkel exciton aggregate: the ground / one-exciton / two-exciton state
//! space and the system operators acting on it.
//!
//! Sites are indexed from zero. The basis is ordered as
//! `[g, |0>, |1>, ..., |N-1>, |01>, |02>, ..., |N-2 N-1>]`, i.e. ground state
//! first, singles by site index, doubles in lexicographic order. Every matrix
//! produced here uses that ordering.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("aggregate must contain at least one site")]
    NoSites,
    #[error("expected {expected} {what}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("coupling matrix is not symmetric at ({0}, {1})")]
    Asymmetric(usize, usize),
    #[error("coupling matrix has nonzero diagonal entry at site {0}")]
    NonzeroDiagonal(usize),
    #[error("non-finite parameter: {0}")]
    NonFinite(&'static str),
    #[error("site index {index} out of range for {n_sites} sites")]
    SiteOutOfRange { index: usize, n_sites: usize },
    #[error("operator dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("disorder width must be non-negative, got {0}")]
    NegativeDisorder(f64),
}

/// Site energies, excitonic couplings and field-projected transition dipoles
/// of an aggregate of two-level molecules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcitonModel {
    pub epsilon: Vec<f64>,
    pub coupling: Vec<Vec<f64>>,
    pub dipole: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disorder_sigma: Option<f64>,
}

impl ExcitonModel {
    pub fn new(
        epsilon: Vec<f64>,
        coupling: Vec<Vec<f64>>,
        dipole: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let model = Self {
            epsilon,
            coupling,
            dipole,
            disorder_sigma: None,
        };
        model.validate()?;
        Ok(model)
    }

    /// Homodimer with site energy `epsilon`, coupling `v` and identical dipoles `mu`.
    pub fn homodimer(epsilon: f64, v: f64, mu: f64) -> Self {
        Self {
            epsilon: vec![epsilon, epsilon],
            coupling: vec![vec![0.0, v], vec![v, 0.0]],
            dipole: vec![mu, mu],
            disorder_sigma: None,
        }
    }

    pub fn monomer(epsilon: f64, mu: f64) -> Self {
        Self {
            epsilon: vec![epsilon],
            coupling: vec![vec![0.0]],
            dipole: vec![mu],
            disorder_sigma: None,
        }
    }

    pub fn with_disorder(mut self, sigma: f64) -> Self {
        self.disorder_sigma = Some(sigma);
        self
    }

    pub fn n_sites(&self) -> usize {
        self.epsilon.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.epsilon.len();
        if n == 0 {
            return Err(ModelError::NoSites);
        }
        if self.dipole.len() != n {
            return Err(ModelError::Length {
                what: "dipoles",
                expected: n,
                got: self.dipole.len(),
            });
        }
        if self.coupling.len() != n {
            return Err(ModelError::Length {
                what: "coupling rows",
                expected: n,
                got: self.coupling.len(),
            });
        }
        for row in &self.coupling {
            if row.len() != n {
                return Err(ModelError::Length {
                    what: "coupling columns",
                    expected: n,
                    got: row.len(),
                });
            }
        }
        if self.epsilon.iter().any(|e| !e.is_finite()) {
            return Err(ModelError::NonFinite("site energy"));
        }
        if self.dipole.iter().any(|m| !m.is_finite()) {
            return Err(ModelError::NonFinite("dipole"));
        }
        for i in 0..n {
            if self.coupling[i].iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite("coupling"));
            }
            if self.coupling[i][i] != 0.0 {
                return Err(ModelError::NonzeroDiagonal(i));
            }
            for j in 0..i {
                if self.coupling[i][j] != self.coupling[j][i] {
                    return Err(ModelError::Asymmetric(i, j));
                }
            }
        }
        if let Some(s) = self.disorder_sigma {
            if !s.is_finite() {
                return Err(ModelError::NonFinite("disorder width"));
            }
            if s < 0.0 {
                return Err(ModelError::NegativeDisorder(s));
            }
        }
        Ok(())
    }

    /// Sum of squared field-projected dipoles.
    pub fn mu_eff_sq(&self) -> f64 {
        self.dipole.iter().map(|m| m * m).sum()
    }

    pub fn mu_eff(&self) -> f64 {
        self.mu_eff_sq().sqrt()
    }
}

/// One configuration of the excitonic basis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Configuration {
    Ground,
    Single(usize),
    /// Doubly excited, `n < m`.
    Double(usize, usize),
}

impl Configuration {
    pub fn excitations(&self) -> usize {
        match self {
            Configuration::Ground => 0,
            Configuration::Single(_) => 1,
            Configuration::Double(..) => 2,
        }
    }

    pub fn is_excited(&self, site: usize) -> bool {
        match *self {
            Configuration::Ground => false,
            Configuration::Single(n) => n == site,
            Configuration::Double(n, m) => n == site || m == site,
        }
    }

    fn mask(&self) -> u64 {
        match *self {
            Configuration::Ground => 0,
            Configuration::Single(n) => 1 << n,
            Configuration::Double(n, m) => (1 << n) | (1 << m),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateSpace {
    n_sites: usize,
    basis: Vec<Configuration>,
}

impl StateSpace {
    pub fn new(n_sites: usize) -> Self {
        assert!(n_sites >= 1, "state space needs at least one site");
        assert!(n_sites <= 64, "site masks are 64 bits wide");
        let mut basis = Vec::with_capacity(1 + n_sites + n_sites * (n_sites - 1) / 2);
        basis.push(Configuration::Ground);
        basis.extend((0..n_sites).map(Configuration::Single));
        for n in 0..n_sites {
            for m in n + 1..n_sites {
                basis.push(Configuration::Double(n, m));
            }
        }
        Self { n_sites, basis }
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn basis(&self) -> &[Configuration] {
        &self.basis
    }

    pub fn configuration(&self, index: usize) -> Configuration {
        self.basis[index]
    }

    pub fn index_of(&self, conf: Configuration) -> Option<usize> {
        self.basis.iter().position(|c| *c == conf)
    }

    fn index_of_mask(&self, mask: u64) -> Option<usize> {
        self.basis.iter().position(|c| c.mask() == mask)
    }

    /// Unit vector of the common ground state.
    pub fn ground_vector(&self) -> Vec<C64> {
        let mut v = vec![C64::new(0.0, 0.0); self.dim()];
        v[0] = C64::new(1.0, 0.0);
        v
    }
}

pub fn build_state_space(model: &ExcitonModel) -> StateSpace {
    StateSpace::new(model.n_sites())
}

/// A `d x d` complex matrix in the basis of a [`StateSpace`].
#[derive(Clone, Debug, PartialEq)]
pub struct SystemOperator(DMatrix<C64>);

impl SystemOperator {
    pub fn from_matrix(m: DMatrix<C64>) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "system operators are square");
        Self(m)
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DMatrix::zeros(dim, dim))
    }

    pub fn from_real_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self(DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                C64::new(diag[i], 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        }))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.0[(i, j)]
    }

    pub fn adjoint(&self) -> Self {
        Self(self.0.adjoint())
    }

    pub fn scaled(&self, s: C64) -> Self {
        Self(&self.0 * s)
    }

    pub fn mul(&self, rhs: &SystemOperator) -> Self {
        Self(&self.0 * &rhs.0)
    }

    pub fn apply(&self, v: &[C64]) -> Vec<C64> {
        let d = self.dim();
        assert_eq!(v.len(), d);
        (0..d)
            .map(|i| (0..d).map(|j| self.0[(i, j)] * v[j]).sum())
            .collect()
    }

    pub fn is_identity(&self) -> bool {
        let d = self.dim();
        (0..d).all(|i| {
            (0..d).all(|j| {
                let expect = if i == j { 1.0 } else { 0.0 };
                self.0[(i, j)] == C64::new(expect, 0.0)
            })
        })
    }

    /// The real diagonal, if the operator is diagonal with real entries.
    pub fn real_diagonal(&self) -> Option<Vec<f64>> {
        let d = self.dim();
        for i in 0..d {
            for j in 0..d {
                let x = self.0[(i, j)];
                if (i != j && x != C64::new(0.0, 0.0)) || (i == j && x.im != 0.0) {
                    return None;
                }
            }
        }
        Some((0..d).map(|i| self.0[(i, i)].re).collect())
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        (&self.0 - self.0.adjoint()).iter().all(|x| x.norm() <= tol)
    }
}

/// Builds `sum_ab coef(a, b) sigma_a^dagger sigma_b` by acting on occupation masks.
fn hopping_operator(space: &StateSpace, coef: impl Fn(usize, usize) -> f64) -> DMatrix<C64> {
    let d = space.dim();
    let n = space.n_sites();
    let mut m = DMatrix::<C64>::zeros(d, d);
    for (col, conf) in space.basis().iter().enumerate() {
        let mask = conf.mask();
        for b in 0..n {
            if mask & (1 << b) == 0 {
                continue;
            }
            for a in 0..n {
                let c = coef(a, b);
                if c == 0.0 {
                    continue;
                }
                if a != b && mask & (1 << a) != 0 {
                    continue;
                }
                let target = (mask & !(1 << b)) | (1 << a);
                if let Some(row) = space.index_of_mask(target) {
                    m[(row, col)] += C64::new(c, 0.0);
                }
            }
        }
    }
    m
}

fn check_space(model: &ExcitonModel, space: &StateSpace) -> Result<(), ModelError> {
    if model.n_sites() != space.n_sites() {
        return Err(ModelError::DimensionMismatch(model.n_sites(), space.n_sites()));
    }
    Ok(())
}

/// `sum_n eps_n s_n^+ s_n + sum_nm V_nm s_n^+ s_m`, ground energy zero.
pub fn build_exciton_hamiltonian(
    model: &ExcitonModel,
    space: &StateSpace,
) -> Result<SystemOperator, ModelError> {
    check_space(model, space)?;
    let m = hopping_operator(space, |a, b| {
        if a == b {
            model.epsilon[a]
        } else {
            model.coupling[a][b]
        }
    });
    Ok(SystemOperator(m))
}

/// Projector onto configurations in which `site` is excited.
pub fn build_coupling_operator(
    model: &ExcitonModel,
    space: &StateSpace,
    site: usize,
) -> Result<SystemOperator, ModelError> {
    check_space(model, space)?;
    if site >= model.n_sites() {
        return Err(ModelError::SiteOutOfRange {
            index: site,
            n_sites: model.n_sites(),
        });
    }
    let diag: Vec<f64> = space
        .basis()
        .iter()
        .map(|c| if c.is_excited(site) { 1.0 } else { 0.0 })
        .collect();
    Ok(SystemOperator::from_real_diagonal(&diag))
}

pub fn build_coupling_operators(
    model: &ExcitonModel,
    space: &StateSpace,
) -> Result<Vec<SystemOperator>, ModelError> {
    (0..model.n_sites())
        .map(|n| build_coupling_operator(model, space, n))
        .collect()
}

/// `(mu_plus, mu_minus)` with `mu_plus = sum_n mu_n s_n^+`, truncated to the
/// two-exciton space, and `mu_minus = mu_plus^dagger`.
pub fn build_dipole_operators(
    model: &ExcitonModel,
    space: &StateSpace,
) -> Result<(SystemOperator, SystemOperator), ModelError> {
    check_space(model, space)?;
    let d = space.dim();
    let mut plus = DMatrix::<C64>::zeros(d, d);
    for (col, conf) in space.basis().iter().enumerate() {
        let mask = conf.mask();
        for (n, &mu) in model.dipole.iter().enumerate() {
            if mask & (1 << n) != 0 {
                continue;
            }
            if let Some(row) = space.index_of_mask(mask | (1 << n)) {
                plus[(row, col)] += C64::new(mu, 0.0);
            }
        }
    }
    let minus = plus.adjoint();
    Ok((SystemOperator(plus), SystemOperator(minus)))
}

/// Copy of `model` with independent Gaussian offsets on every site energy.
pub fn sample_disorder<R: Rng + ?Sized>(model: &ExcitonModel, rng: &mut R) -> ExcitonModel {
    let sigma = model.disorder_sigma.unwrap_or(0.0);
    let mut out = model.clone();
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("validated disorder width");
        for e in out.epsilon.iter_mut() {
            *e += normal.sample(rng);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DyadicLayout {
    /// `diag(bra, ket)`: propagation generators and interactions.
    BlockDiagonal,
    /// `[[0, F], [0, 0]]`: observables, so `<psi|F~|psi> = <phi_B|F|phi_K>`.
    UpperOffDiagonal,
}

/// Operator on the doubled system space. Dyadic vectors are stored bra block
/// first, ket block second.
#[derive(Clone, Debug, PartialEq)]
pub struct DyadicOperator {
    pub bra: SystemOperator,
    pub ket: SystemOperator,
    pub layout: DyadicLayout,
}

impl DyadicOperator {
    pub fn lift(bra: SystemOperator, ket: SystemOperator) -> Result<Self, ModelError> {
        if bra.dim() != ket.dim() {
            return Err(ModelError::DimensionMismatch(bra.dim(), ket.dim()));
        }
        Ok(Self {
            bra,
            ket,
            layout: DyadicLayout::BlockDiagonal,
        })
    }

    pub fn observable(f: SystemOperator) -> Self {
        let d = f.dim();
        Self {
            bra: SystemOperator::zeros(d),
            ket: f,
            layout: DyadicLayout::UpperOffDiagonal,
        }
    }

    /// Dimension of one block.
    pub fn block_dim(&self) -> usize {
        self.ket.dim()
    }

    pub fn to_matrix(&self) -> DMatrix<C64> {
        let d = self.block_dim();
        let mut m = DMatrix::<C64>::zeros(2 * d, 2 * d);
        match self.layout {
            DyadicLayout::BlockDiagonal => {
                m.view_mut((0, 0), (d, d)).copy_from(self.bra.matrix());
                m.view_mut((d, d), (d, d)).copy_from(self.ket.matrix());
            }
            DyadicLayout::UpperOffDiagonal => {
                m.view_mut((0, d), (d, d)).copy_from(self.ket.matrix());
            }
        }
        m
    }

    pub fn apply(&self, v: &[C64]) -> Vec<C64> {
        let d = self.block_dim();
        assert_eq!(v.len(), 2 * d, "dyadic vector has wrong length");
        let (b, k) = v.split_at(d);
        match self.layout {
            DyadicLayout::BlockDiagonal => {
                let mut out = self.bra.apply(b);
                out.extend(self.ket.apply(k));
                out
            }
            DyadicLayout::UpperOffDiagonal => {
                let mut out = self.ket.apply(k);
                out.extend(std::iter::repeat(C64::new(0.0, 0.0)).take(d));
                out
            }
        }
    }

    /// `<v|O|v>`.
    pub fn expectation(&self, v: &[C64]) -> C64 {
        let ov = self.apply(v);
        v.iter().zip(&ov).map(|(a, b)| a.conj() * b).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    fn diag(op: &SystemOperator) -> Vec<f64> {
        op.real_diagonal().expect("diagonal")
    }

    #[test]
    fn state_space_dimensions_and_order() {
        let s = StateSpace::new(2);
        assert_eq!(s.dim(), 4);
        assert_eq!(
            s.basis(),
            &[
                Configuration::Ground,
                Configuration::Single(0),
                Configuration::Single(1),
                Configuration::Double(0, 1)
            ]
        );
        assert_eq!(StateSpace::new(1).dim(), 2);
        assert_eq!(StateSpace::new(3).dim(), 7);
        assert_eq!(
            StateSpace::new(3).basis()[4..],
            [
                Configuration::Double(0, 1),
                Configuration::Double(0, 2),
                Configuration::Double(1, 2)
            ]
        );
    }

    #[test]
    fn dimer_hamiltonian() {
        let m = ExcitonModel::homodimer(0.0, 0.3, 1.0);
        let s = build_state_space(&m);
        let h = build_exciton_hamiltonian(&m, &s).unwrap();
        assert!(h.is_hermitian(0.0));
        assert_eq!(h.get(0, 0), c(0.0));
        assert_eq!(h.get(1, 2), c(0.3));
        assert_eq!(h.get(3, 3), c(0.0));
        let single = nalgebra::Matrix2::new(h.get(1, 1).re, h.get(1, 2).re, h.get(2, 1).re, h.get(2, 2).re);
        let mut ev: Vec<f64> = single.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        assert!((ev[0] + 0.3).abs() < 1e-14 && (ev[1] - 0.3).abs() < 1e-14);
    }

    #[test]
    fn uncoupled_hamiltonian_is_diagonal() {
        let m = ExcitonModel::new(
            vec![1.0, 2.5, -0.5],
            vec![vec![0.0; 3]; 3],
            vec![1.0, 1.0, 1.0],
        )
        .unwrap();
        let s = build_state_space(&m);
        let h = build_exciton_hamiltonian(&m, &s).unwrap();
        assert_eq!(diag(&h), vec![0.0, 1.0, 2.5, -0.5, 3.5, 0.5, 2.0]);
    }

    #[test]
    fn trimer_double_block_hops_between_shared_site_pairs() {
        let v = vec![vec![0.0, 0.1, 0.2], vec![0.1, 0.0, 0.3], vec![0.2, 0.3, 0.0]];
        let m = ExcitonModel::new(vec![0.0; 3], v, vec![1.0; 3]).unwrap();
        let s = build_state_space(&m);
        let h = build_exciton_hamiltonian(&m, &s).unwrap();
        let i01 = s.index_of(Configuration::Double(0, 1)).unwrap();
        let i02 = s.index_of(Configuration::Double(0, 2)).unwrap();
        let i12 = s.index_of(Configuration::Double(1, 2)).unwrap();
        // |01> -> |02> moves the excitation 1 -> 2.
        assert_eq!(h.get(i02, i01), c(0.3));
        assert_eq!(h.get(i12, i01), c(0.2));
        assert_eq!(h.get(i12, i02), c(0.1));
        assert!(h.is_hermitian(0.0));
    }

    #[test]
    fn coupling_operators() {
        let m = ExcitonModel::homodimer(0.0, 0.3, 1.0);
        let s = build_state_space(&m);
        assert_eq!(diag(&build_coupling_operator(&m, &s, 0).unwrap()), vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(diag(&build_coupling_operator(&m, &s, 1).unwrap()), vec![0.0, 0.0, 1.0, 1.0]);
        assert!(matches!(
            build_coupling_operator(&m, &s, 2),
            Err(ModelError::SiteOutOfRange { index: 2, n_sites: 2 })
        ));
        let mono = ExcitonModel::monomer(0.0, 1.0);
        let s1 = build_state_space(&mono);
        assert_eq!(diag(&build_coupling_operator(&mono, &s1, 0).unwrap()), vec![0.0, 1.0]);
    }

    #[test]
    fn coupling_operator_sums() {
        let m = ExcitonModel::new(vec![0.0; 4], vec![vec![0.0; 4]; 4], vec![1.0; 4]).unwrap();
        let s = build_state_space(&m);
        let ls = build_coupling_operators(&m, &s).unwrap();
        let total: Vec<f64> = (0..s.dim())
            .map(|i| ls.iter().map(|l| l.get(i, i).re).sum())
            .collect();
        for (i, conf) in s.basis().iter().enumerate() {
            assert_eq!(total[i], conf.excitations() as f64);
        }
        for l in &ls {
            assert_eq!(l.mul(l), *l);
        }
    }

    #[test]
    fn dipole_operators() {
        let m = ExcitonModel::homodimer(0.0, 0.3, 1.0);
        let s = build_state_space(&m);
        let (plus, minus) = build_dipole_operators(&m, &s).unwrap();
        assert_eq!(minus, plus.adjoint());
        let g = s.ground_vector();
        let mm = minus.mul(&plus);
        assert_eq!(mm.get(0, 0), c(2.0));
        assert_eq!(plus.apply(&g), vec![c(0.0), c(1.0), c(1.0), c(0.0)]);
        let one = vec![c(0.0), c(1.0), c(0.0), c(0.0)];
        assert_eq!(plus.apply(&one), vec![c(0.0), c(0.0), c(0.0), c(1.0)]);
        assert!(minus.apply(&g).iter().all(|x| *x == c(0.0)));
        // Singles are annihilated by two lowering steps.
        assert!(minus.apply(&minus.apply(&one)).iter().all(|x| *x == c(0.0)));
    }

    #[test]
    fn dyadic_lifts() {
        let m = ExcitonModel::homodimer(0.0, 0.3, 1.0);
        let s = build_state_space(&m);
        let (plus, minus) = build_dipole_operators(&m, &s).unwrap();
        let id = SystemOperator::identity(4);
        let mut gg = s.ground_vector();
        gg.extend(s.ground_vector());

        let v1 = DyadicOperator::lift(id.clone(), plus.clone()).unwrap();
        let out = v1.apply(&gg);
        assert_eq!(&out[..4], &s.ground_vector()[..]);
        assert_eq!(&out[4..], &plus.apply(&s.ground_vector())[..]);

        let f = DyadicOperator::observable(minus.mul(&plus));
        assert_eq!(f.expectation(&gg), c(2.0));

        let idd = DyadicOperator::lift(id.clone(), id).unwrap();
        assert_eq!(idd.to_matrix(), DMatrix::identity(8, 8));
        let fm = f.to_matrix();
        assert!(fm.view((0, 0), (4, 4)).iter().all(|x| *x == c(0.0)));
        assert!(fm.view((4, 4), (4, 4)).iter().all(|x| *x == c(0.0)));
        assert!(matches!(
            DyadicOperator::lift(SystemOperator::identity(2), SystemOperator::identity(4)),
            Err(ModelError::DimensionMismatch(2, 4))
        ));
    }

    #[test]
    fn validation_rejects_bad_models() {
        assert!(ExcitonModel::new(vec![], vec![], vec![]).is_err());
        assert!(matches!(
            ExcitonModel::new(vec![0.0; 2], vec![vec![0.0, 0.1], vec![0.2, 0.0]], vec![1.0; 2]),
            Err(ModelError::Asymmetric(1, 0))
        ));
        assert!(matches!(
            ExcitonModel::new(vec![0.0; 2], vec![vec![0.1, 0.0], vec![0.0, 0.0]], vec![1.0; 2]),
            Err(ModelError::NonzeroDiagonal(0))
        ));
        assert!(ExcitonModel::new(vec![0.0, f64::NAN], vec![vec![0.0; 2]; 2], vec![1.0; 2]).is_err());
        assert!(ExcitonModel::homodimer(0.0, 0.3, 1.0).with_disorder(-1.0).validate().is_err());
    }

    #[test]
    fn disorder_sampling() {
        let m = ExcitonModel::homodimer(0.0, 0.3, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(sample_disorder(&m.clone().with_disorder(0.0), &mut rng).epsilon, m.epsilon);

        let sigma = 0.2;
        let md = m.clone().with_disorder(sigma);
        let draws = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..draws {
            let s = sample_disorder(&md, &mut rng);
            assert_eq!(s.coupling, md.coupling);
            assert_eq!(s.dipole, md.dipole);
            let off = s.epsilon[0];
            sum += off;
            sum_sq += off * off;
        }
        let n = draws as f64;
        let mean = sum / n;
        let var = (sum_sq - n * mean * mean) / (n - 1.0);
        assert!(mean.abs() < 4.0 * sigma / n.sqrt(), "mean {mean}");
        // Var of the sample variance for a Gaussian is 2 sigma^4 / (n - 1).
        let se_var = (2.0 * sigma.powi(4) / (n - 1.0)).sqrt();
        assert!((var - sigma * sigma).abs() < 5.0 * se_var, "var {var}");
    }
}
