//! Brute-force oracle: H materialized on the subspace reachable from a set of
//! basis configurations, diagonalized densely.

use std::collections::{HashMap, VecDeque};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use super::{group_levels, CMatrix, SiteAverager, SingleSiteState};
use crate::error::{Error, Result};
use crate::hca::LocalHamiltonian;
use crate::rtm::Configuration;

/// Default cap on the reachable dimension.
pub const DEFAULT_DIM_LIMIT: usize = 4096;

/// Closure of `seeds` under U and U†, in BFS order.
pub fn reachable(
    h: &LocalHamiltonian,
    seeds: &[Configuration],
    limit: usize,
) -> Result<Vec<Configuration>> {
    let mut index: HashMap<Configuration, usize> = HashMap::new();
    let mut basis = Vec::new();
    let mut queue = VecDeque::new();
    for s in seeds {
        if !index.contains_key(s) {
            index.insert(s.clone(), basis.len());
            basis.push(s.clone());
            queue.push_back(s.clone());
        }
    }
    while let Some(c) = queue.pop_front() {
        let mut next = h.apply_u_terms(&c);
        next.extend(h.apply_u_dagger_terms(&c));
        for n in next {
            if !index.contains_key(&n) {
                if basis.len() >= limit {
                    return Err(Error::DimensionGuard {
                        what: "reachable dimension",
                        value: basis.len() as u128 + 1,
                        limit: limit as u128,
                    });
                }
                index.insert(n.clone(), basis.len());
                basis.push(n.clone());
                queue.push_back(n);
            }
        }
    }
    Ok(basis)
}

pub struct DenseSystem {
    pub basis: Vec<Configuration>,
    pub index: HashMap<Configuration, usize>,
    pub h: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
    pub avg: SiteAverager,
}

impl DenseSystem {
    pub fn new(h: &LocalHamiltonian, seeds: &[Configuration], limit: usize) -> Result<Self> {
        let basis = reachable(h, seeds, limit)?;
        let index: HashMap<Configuration, usize> =
            basis.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        let n = basis.len();
        let mut hm = DMatrix::<f64>::zeros(n, n);
        for (a, c) in basis.iter().enumerate() {
            for t in h.apply_u_terms(c) {
                let b = index[&t];
                hm[(b, a)] += 1.0;
                hm[(a, b)] += 1.0;
            }
        }
        let eig = SymmetricEigen::new(hm.clone());
        let avg = SiteAverager::new(h.spec(), &basis);
        Ok(DenseSystem {
            basis,
            index,
            h: hm,
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
            avg,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn basis_vector(&self, c: &Configuration) -> Option<DVector<Complex64>> {
        let i = *self.index.get(c)?;
        let mut v = DVector::zeros(self.dim());
        v[i] = Complex64::new(1.0, 0.0);
        Some(v)
    }

    /// e^{-iHt} as a dense matrix.
    pub fn propagator(&self, t: f64) -> CMatrix {
        let n = self.dim();
        let v = self.eigenvectors.map(|x| Complex64::new(x, 0.0));
        let mut vd = v.clone();
        for k in 0..n {
            let ph = Complex64::from_polar(1.0, -self.eigenvalues[k] * t);
            for r in 0..n {
                vd[(r, k)] *= ph;
            }
        }
        vd * v.transpose()
    }

    pub fn evolve(&self, psi: &DVector<Complex64>, t: f64) -> DVector<Complex64> {
        let vt = self.eigenvectors.transpose().map(|x| Complex64::new(x, 0.0));
        let mut c = vt * psi;
        for k in 0..self.dim() {
            c[k] *= Complex64::from_polar(1.0, -self.eigenvalues[k] * t);
        }
        self.eigenvectors.map(|x| Complex64::new(x, 0.0)) * c
    }

    pub fn site_average_pure(&self, psi: &DVector<Complex64>, d: usize) -> SingleSiteState {
        let mut out = CMatrix::zeros(d, d);
        self.avg.add_pure(psi.as_slice(), 1.0, &mut out);
        SingleSiteState { m: out }
    }

    pub fn site_average_mixed(&self, rho: &CMatrix, d: usize) -> SingleSiteState {
        let mut out = CMatrix::zeros(d, d);
        self.avg.add_density(|a, b| rho[(a, b)], 1.0, &mut out);
        SingleSiteState { m: out }
    }

    /// Infinite-time average Σ_λ P_λ |ψ><ψ| P_λ, eigenvalues merged within
    /// 1e-9.
    pub fn infinite_time_average(&self, psi: &DVector<Complex64>) -> CMatrix {
        let n = self.dim();
        let ev: Vec<f64> = self.eigenvalues.iter().copied().collect();
        let v = self.eigenvectors.map(|x| Complex64::new(x, 0.0));
        let coeff = v.transpose() * psi;
        let mut out = CMatrix::zeros(n, n);
        for g in group_levels(&ev, 1e-9) {
            let mut p = DVector::<Complex64>::zeros(n);
            for &k in &g {
                p += v.column(k) * coeff[k];
            }
            out += &p * p.adjoint();
        }
        out
    }
}

/// Sparse single-site operator: entries (row, col, value) on site-value
/// indices.
pub type SiteOp = Vec<(usize, usize, Complex64)>;

/// max over `ts` of |<x'| e^{iHt} B^{(L)} e^{-iHt} |x>| with B^{(L)} the
/// space average of B.
pub fn dephasing_check(
    h: &LocalHamiltonian,
    x: &Configuration,
    xp: &Configuration,
    b: &SiteOp,
    ts: &[f64],
    limit: usize,
) -> Result<f64> {
    let sys = DenseSystem::new(h, &[x.clone(), xp.clone()], limit)?;
    let sp = h.spec();
    let psi0 = sys.basis_vector(x).unwrap();
    let phi0 = sys.basis_vector(xp).unwrap();
    let sites = x.len();
    let mut worst = 0.0f64;
    for &t in ts {
        let psi = sys.evolve(&psi0, t);
        let phi = sys.evolve(&phi0, t);
        let mut acc = Complex64::new(0.0, 0.0);
        for (a, ca) in sys.basis.iter().enumerate() {
            if psi[a].norm() == 0.0 {
                continue;
            }
            for i in 0..sites {
                let here = sp.site_index(ca.sites[i]);
                for &(row, col, val) in b {
                    if col != here {
                        continue;
                    }
                    let mut target = ca.clone();
                    target.sites[i] = sp.site_from_index(row);
                    if let Some(&bi) = sys.index.get(&target) {
                        acc += phi[bi].conj() * val * psi[a];
                    }
                }
            }
        }
        worst = worst.max(acc.norm() / sites as f64);
    }
    Ok(worst)
}
