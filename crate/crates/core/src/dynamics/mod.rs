//! Orbit dynamics: spectral evolution, the time-average law, space-averaged
//! single-site states and trace distances.

pub mod dense;

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_bigint::BigInt;
use num_complex::Complex64;
use num_rational::Ratio;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hca::{orbit_kind, spectrum_for};
use crate::rtm::stats::count_symbol;
use crate::rtm::{run_orbit, Cell, Configuration, Machine, MachineSpec, Orbit, Site, WalkEvent, Walker};

pub type CMatrix = DMatrix<Complex64>;

/// e^{-iHt}|1> on an orbit of `j` states, in the orbit basis.
pub fn evolve_len(j: usize, cycle: bool, t: f64) -> Vec<Complex64> {
    let mut amps = vec![Complex64::new(0.0, 0.0); j];
    if cycle {
        for k in 0..j {
            let w = 2.0 * PI * k as f64 / j as f64;
            let ph = Complex64::from_polar(1.0 / j as f64, -2.0 * w.cos() * t);
            for (x, a) in amps.iter_mut().enumerate() {
                *a += ph * Complex64::from_polar(1.0, w * x as f64);
            }
        }
    } else {
        let th = PI / (j as f64 + 1.0);
        let c = 2.0 / (j as f64 + 1.0);
        for k in 1..=j {
            let kt = k as f64 * th;
            let ph = Complex64::from_polar(c * kt.sin(), -2.0 * kt.cos() * t);
            for (x, a) in amps.iter_mut().enumerate() {
                *a += ph * ((x + 1) as f64 * kt).sin();
            }
        }
    }
    amps
}

#[derive(Clone, Debug)]
pub struct OrbitAmplitudes {
    pub t: f64,
    pub amps: Vec<Complex64>,
}

pub fn evolve_spectral(orbit: &Orbit, t: f64) -> Result<OrbitAmplitudes> {
    let (j, cycle) = orbit_kind(orbit)?;
    Ok(OrbitAmplitudes {
        t,
        amps: evolve_len(j, cycle, t),
    })
}

/// Σ_k sin²(kθ) sin(jkθ) sin(j'kθ), θ = π/(J+1), in closed form.
pub fn trig_kernel(big_j: usize, j: usize, jp: usize) -> Ratio<i64> {
    assert!(j >= 1 && jp >= 1 && j <= big_j && jp <= big_j);
    let n = big_j as i64 + 1;
    if big_j == 1 {
        return Ratio::from_integer(1);
    }
    if j == jp {
        if j == 1 || j == big_j {
            Ratio::new(3 * n, 8)
        } else {
            Ratio::new(n, 4)
        }
    } else if j.abs_diff(jp) == 2 {
        Ratio::new(-n, 8)
    } else {
        Ratio::from_integer(0)
    }
}

/// Long-time occupation of step j for an orbit started at step 1.
pub fn time_avg_probs(big_j: usize) -> Vec<Ratio<i64>> {
    if big_j <= 1 {
        return vec![Ratio::from_integer(1); big_j];
    }
    let n = big_j as i64 + 1;
    (1..=big_j)
        .map(|j| Ratio::new(4, n * n) * trig_kernel(big_j, j, j))
        .collect()
}

/// Exact infinite-time average of |ψ(t)><ψ(t)| in the orbit basis, as a
/// sparse list `(j, j', value)` (0-based, j <= j').
pub fn longterm_orbit_density(big_j: usize, cycle: bool) -> Vec<(usize, usize, Complex64)> {
    let mut out = Vec::new();
    if !cycle {
        let n = big_j as f64 + 1.0;
        for j in 1..=big_j {
            for jp in [j, j + 2] {
                if jp > big_j {
                    continue;
                }
                let v = *trig_kernel(big_j, j, jp).numer() as f64
                    / *trig_kernel(big_j, j, jp).denom() as f64
                    * 4.0
                    / (n * n);
                if v != 0.0 {
                    out.push((j - 1, jp - 1, Complex64::new(v, 0.0)));
                }
            }
        }
        return out;
    }
    // Cycle: λ_k = λ_{J-k}; project |1> onto each eigenspace.
    let sp = spectrum_for(big_j, true);
    let groups = group_levels(&sp.eigenvalues, 1e-9);
    let mut dense = vec![Complex64::new(0.0, 0.0); big_j * big_j];
    for g in groups {
        let mut p = vec![Complex64::new(0.0, 0.0); big_j];
        for &k in &g {
            let c0 = sp.vectors[k][0].conj();
            for (x, px) in p.iter_mut().enumerate() {
                *px += sp.vectors[k][x] * c0;
            }
        }
        for a in 0..big_j {
            for b in a..big_j {
                dense[a * big_j + b] += p[a] * p[b].conj();
            }
        }
    }
    for a in 0..big_j {
        for b in a..big_j {
            let v = dense[a * big_j + b];
            if v.norm() > 1e-15 {
                out.push((a, b, v));
            }
        }
    }
    out
}

/// Indices grouped by eigenvalue (sorted, merged within `tol`).
pub fn group_levels(eigs: &[f64], tol: f64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..eigs.len()).collect();
    idx.sort_by(|&a, &b| eigs[a].partial_cmp(&eigs[b]).unwrap());
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut last = f64::NEG_INFINITY;
    for i in idx {
        if eigs[i] - last > tol || groups.is_empty() {
            groups.push(vec![i]);
        } else {
            groups.last_mut().unwrap().push(i);
        }
        last = eigs[i];
    }
    groups
}

/// Space-averaged single-site density matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleSiteState {
    pub m: CMatrix,
}

impl SingleSiteState {
    pub fn zeros(d: usize) -> Self {
        SingleSiteState {
            m: CMatrix::zeros(d, d),
        }
    }
    pub fn basis(d: usize, k: usize) -> Self {
        let mut s = Self::zeros(d);
        s.m[(k, k)] = Complex64::new(1.0, 0.0);
        s
    }
    pub fn from_diag(p: &[f64]) -> Self {
        let mut s = Self::zeros(p.len());
        for (k, &x) in p.iter().enumerate() {
            s.m[(k, k)] = Complex64::new(x, 0.0);
        }
        s
    }
    pub fn dim(&self) -> usize {
        self.m.nrows()
    }
    pub fn entry(&self, row: usize, col: usize) -> Complex64 {
        self.m[(row, col)]
    }
    pub fn trace(&self) -> Complex64 {
        self.m.trace()
    }

    /// Checks the density-matrix invariants within the given tolerances.
    pub fn validate(&self, herm_tol: f64, trace_tol: f64, eig_tol: f64) -> Result<()> {
        let h = (&self.m - self.m.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max);
        if h > herm_tol {
            return Err(Error::InvalidState(format!("not Hermitian ({h:e})")));
        }
        let tr = self.trace();
        if (tr.re - 1.0).abs() > trace_tol || tr.im.abs() > trace_tol {
            return Err(Error::InvalidState(format!("trace {tr}")));
        }
        let min = hermitian_eigenvalues(&self.m)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        if min < -eig_tol {
            return Err(Error::InvalidState(format!("negative eigenvalue {min:e}")));
        }
        Ok(())
    }

    pub fn mix(parts: &[(f64, &SingleSiteState)]) -> SingleSiteState {
        let d = parts[0].1.dim();
        let mut m = CMatrix::zeros(d, d);
        for (w, s) in parts {
            m += &s.m * Complex64::new(*w, 0.0);
        }
        SingleSiteState { m }
    }
}

fn is_diagonal(m: &CMatrix) -> bool {
    let n = m.nrows();
    (0..n).all(|i| (0..n).all(|j| i == j || m[(i, j)] == Complex64::new(0.0, 0.0)))
}

pub fn hermitian_eigenvalues(m: &CMatrix) -> Vec<f64> {
    if is_diagonal(m) {
        return (0..m.nrows()).map(|i| m[(i, i)].re).collect();
    }
    let herm = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
    nalgebra::SymmetricEigen::new(herm).eigenvalues.iter().copied().collect()
}

/// Unhalved trace norm ‖a − b‖₁.
pub fn trace_distance(a: &SingleSiteState, b: &SingleSiteState) -> f64 {
    trace_norm(&(&a.m - &b.m))
}

pub fn trace_norm(m: &CMatrix) -> f64 {
    hermitian_eigenvalues(m).iter().map(|x| x.abs()).sum()
}

/// Site-value histograms and one-site coherences of a list of
/// configurations (an orbit or a dense basis).
#[derive(Clone, Debug)]
pub struct SiteAverager {
    pub sites: usize,
    /// Per configuration, (site value index, multiplicity).
    pub hist: Vec<Vec<(u32, u32)>>,
    /// (a, b, value at the differing site in a, in b) for configurations that
    /// differ at exactly one site; a < b.
    pub pairs: Vec<(u32, u32, u32, u32)>,
}

impl SiteAverager {
    pub fn new(spec: &MachineSpec, configs: &[Configuration]) -> SiteAverager {
        let sites = configs.first().map_or(0, |c| c.len());
        let idx: Vec<Vec<u32>> = configs
            .iter()
            .map(|c| c.sites.iter().map(|&s| spec.site_index(s) as u32).collect())
            .collect();
        let hist = idx
            .iter()
            .map(|v| {
                let mut h: HashMap<u32, u32> = HashMap::new();
                for &x in v {
                    *h.entry(x).or_default() += 1;
                }
                let mut h: Vec<(u32, u32)> = h.into_iter().collect();
                h.sort();
                h
            })
            .collect();
        // Additive hashing: the hash with site i masked is full - h(i, x_i).
        let mix = |i: usize, x: u32| -> u64 {
            let mut z = (i as u64) << 32 | x as u64;
            z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        };
        let full: Vec<u64> = idx
            .iter()
            .map(|v| {
                v.iter()
                    .enumerate()
                    .fold(0u64, |acc, (i, &x)| acc.wrapping_add(mix(i, x)))
            })
            .collect();
        let mut pairs = Vec::new();
        for i in 0..sites {
            let mut groups: HashMap<u64, Vec<u32>> = HashMap::new();
            for (a, v) in idx.iter().enumerate() {
                groups
                    .entry(full[a].wrapping_sub(mix(i, v[i])))
                    .or_default()
                    .push(a as u32);
            }
            for g in groups.values() {
                for (ka, &a) in g.iter().enumerate() {
                    for &b in &g[ka + 1..] {
                        let (va, vb) = (&idx[a as usize], &idx[b as usize]);
                        if va[i] != vb[i]
                            && va.iter().zip(vb).enumerate().all(|(k, (x, y))| k == i || x == y)
                        {
                            pairs.push((a, b, va[i], vb[i]));
                        }
                    }
                }
            }
        }
        pairs.sort();
        SiteAverager { sites, hist, pairs }
    }

    /// Adds `w` times the space-averaged state of the pure state `amps`.
    pub fn add_pure(&self, amps: &[Complex64], w: f64, out: &mut CMatrix) {
        let s = w / self.sites as f64;
        for (a, h) in self.hist.iter().enumerate() {
            let p = amps[a].norm_sqr() * s;
            if p == 0.0 {
                continue;
            }
            for &(x, n) in h {
                out[(x as usize, x as usize)] += Complex64::new(p * n as f64, 0.0);
            }
        }
        for &(a, b, x, y) in &self.pairs {
            let c = amps[a as usize] * amps[b as usize].conj() * s;
            out[(x as usize, y as usize)] += c;
            out[(y as usize, x as usize)] += c.conj();
        }
    }

    /// Adds `w` times the space-averaged state of a density matrix given by
    /// its entries on this basis (`rho(a, b)`).
    pub fn add_density(&self, rho: impl Fn(usize, usize) -> Complex64, w: f64, out: &mut CMatrix) {
        let s = w / self.sites as f64;
        for (a, h) in self.hist.iter().enumerate() {
            let p = rho(a, a).re * s;
            for &(x, n) in h {
                out[(x as usize, x as usize)] += Complex64::new(p * n as f64, 0.0);
            }
        }
        for &(a, b, x, y) in &self.pairs {
            let c = rho(a as usize, b as usize) * s;
            out[(x as usize, y as usize)] += c;
            out[(y as usize, x as usize)] += c.conj();
        }
    }
}

/// Where an ensemble came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Anchored,
    Iid,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct EnsembleMeta {
    pub n: usize,
    pub alpha: f64,
    pub l: Option<usize>,
    pub eps1: Option<f64>,
    pub lattice: usize,
    /// Parameter constraints that were overridden.
    pub violations: Vec<String>,
}

/// The dephased initial state: a weighted list of classical configurations.
#[derive(Clone, Debug)]
pub struct InitialEnsemble {
    pub members: Vec<(Configuration, f64)>,
    /// Exact weights, when the ensemble was enumerated.
    pub exact: Option<Vec<Ratio<BigInt>>>,
    pub provenance: Provenance,
    pub meta: EnsembleMeta,
}

impl InitialEnsemble {
    pub fn single(c: Configuration, provenance: Provenance) -> Self {
        InitialEnsemble {
            members: vec![(c, 1.0)],
            exact: Some(vec![Ratio::from_integer(BigInt::from(1))]),
            provenance,
            meta: EnsembleMeta::default(),
        }
    }
    pub fn total_weight(&self) -> f64 {
        self.members.iter().map(|(_, w)| w).sum()
    }
}

/// One block of a member configuration, with its materialized orbit.
#[derive(Clone, Debug)]
pub struct BlockOrbit {
    pub len: usize,
    pub cycle: bool,
    pub avg: SiteAverager,
}

/// Orbit data of one ensemble member: a block per control site, plus the
/// histogram of cells outside any block.
#[derive(Clone, Debug)]
pub struct MemberOrbits {
    pub sites: usize,
    pub blocks: Vec<BlockOrbit>,
    pub static_hist: Vec<(u32, u32)>,
}

impl MemberOrbits {
    pub fn new(m: &Machine, c: &Configuration, max_steps: usize) -> Result<MemberOrbits> {
        let ctrls = c.control_positions();
        let mut blocks = Vec::new();
        let mut covered = 0;
        let parts: Vec<Configuration> = if ctrls.len() == 1 {
            vec![c.clone()]
        } else {
            c.blocks().into_iter().map(|(_, b)| b).collect()
        };
        for part in parts {
            covered += part.len();
            let o = run_orbit(m, &part, max_steps)?;
            let (len, cycle) = orbit_kind(&o)?;
            blocks.push(BlockOrbit {
                len,
                cycle,
                avg: SiteAverager::new(&m.spec, &o.states),
            });
        }
        let mut static_hist: HashMap<u32, u32> = HashMap::new();
        let first = ctrls.first().copied().unwrap_or(c.len());
        if covered < c.len() {
            for s in &c.sites[..first] {
                *static_hist.entry(m.spec.site_index(*s) as u32).or_default() += 1;
            }
        }
        let mut static_hist: Vec<_> = static_hist.into_iter().collect();
        static_hist.sort();
        Ok(MemberOrbits {
            sites: c.len(),
            blocks,
            static_hist,
        })
    }

    fn add_static(&self, w: f64, out: &mut CMatrix) {
        for &(x, n) in &self.static_hist {
            out[(x as usize, x as usize)] += Complex64::new(w * n as f64 / self.sites as f64, 0.0);
        }
    }

    /// Adds `w` times ρ̄(t) of this member.
    pub fn add_at(&self, t: f64, w: f64, out: &mut CMatrix) {
        for b in &self.blocks {
            let amps = evolve_len(b.len, b.cycle, t);
            b.avg.add_pure(&amps, w * b.avg.sites as f64 / self.sites as f64, out);
        }
        self.add_static(w, out);
    }

    /// Adds `w` times the exact infinite-time average.
    pub fn add_longterm_exact(&self, w: f64, out: &mut CMatrix) {
        for b in &self.blocks {
            let dens = longterm_orbit_density(b.len, b.cycle);
            let mut map: HashMap<(usize, usize), Complex64> = HashMap::new();
            for (a, c, v) in dens {
                map.insert((a, c), v);
                map.insert((c, a), v.conj());
            }
            let zero = Complex64::new(0.0, 0.0);
            b.avg.add_density(
                |a, c| *map.get(&(a, c)).unwrap_or(&zero),
                w * b.avg.sites as f64 / self.sites as f64,
                out,
            );
        }
        self.add_static(w, out);
    }

    /// Adds `w` times the uniform-weight average (1/J) Σ_j ρ̄(|j>).
    pub fn add_longterm_uniform(&self, w: f64, out: &mut CMatrix) {
        for b in &self.blocks {
            let u = 1.0 / b.len as f64;
            b.avg.add_density(
                |a, c| {
                    if a == c {
                        Complex64::new(u, 0.0)
                    } else {
                        Complex64::new(0.0, 0.0)
                    }
                },
                w * b.avg.sites as f64 / self.sites as f64,
                out,
            );
        }
        self.add_static(w, out);
    }

    pub fn min_len(&self) -> Option<usize> {
        self.blocks.iter().map(|b| b.len).min()
    }
}

/// ρ̄(t) of an ensemble via per-member orbits.
pub fn site_average_at(
    m: &Machine,
    ens: &InitialEnsemble,
    t: f64,
    max_steps: usize,
) -> Result<SingleSiteState> {
    let d = m.spec.site_dim();
    let mut out = CMatrix::zeros(d, d);
    for (c, w) in &ens.members {
        MemberOrbits::new(m, c, max_steps)?.add_at(t, *w, &mut out);
    }
    Ok(SingleSiteState { m: out })
}

/// Space average of a single classical configuration.
pub fn site_average_config(spec: &MachineSpec, c: &Configuration) -> SingleSiteState {
    let d = spec.site_dim();
    let mut p = vec![0.0; d];
    for &s in &c.sites {
        p[spec.site_index(s)] += 1.0 / c.len() as f64;
    }
    SingleSiteState::from_diag(&p)
}

/// Long-term space average with the uniform 1/J law, plus its error radius
/// 2/L + 2/J_min. Orbits are streamed, so L can be large.
#[derive(Clone, Debug)]
pub struct LongTerm {
    /// Diagonal of the averaged state (the uniform law has no coherences).
    pub diag: Vec<f64>,
    pub radius: f64,
    pub min_len: usize,
}

impl LongTerm {
    pub fn state(&self) -> SingleSiteState {
        SingleSiteState::from_diag(&self.diag)
    }
}

pub fn longterm_site_average(
    m: &Machine,
    ens: &InitialEnsemble,
    max_steps: usize,
) -> Result<LongTerm> {
    let d = m.spec.site_dim();
    let mut diag = vec![0.0; d];
    let mut min_len = usize::MAX;
    let mut lattice = 0;
    for (c, w) in &ens.members {
        lattice = c.len();
        let parts: Vec<Configuration> = if c.control_positions().len() == 1 {
            vec![c.clone()]
        } else {
            c.blocks().into_iter().map(|(_, b)| b).collect()
        };
        let mut covered = 0;
        for part in &parts {
            covered += part.len();
            let (sums, len) = stream_site_sums(m, part, max_steps)?;
            min_len = min_len.min(len);
            let s = w / (len as f64 * c.len() as f64);
            for (k, v) in sums.iter().enumerate() {
                diag[k] += *v as f64 * s;
            }
        }
        if covered < c.len() {
            let first = c.control_positions().first().copied().unwrap_or(c.len());
            for st in &c.sites[..first] {
                diag[m.spec.site_index(*st)] += w / c.len() as f64;
            }
        }
    }
    let l = lattice.saturating_sub(1).max(1) as f64;
    let radius = 2.0 / l + if min_len == usize::MAX { 0.0 } else { 2.0 / min_len as f64 };
    Ok(LongTerm {
        diag,
        radius,
        min_len,
    })
}

/// Σ_j (number of sites holding value k in x(j)) for every site value k,
/// and the orbit length.
pub fn stream_site_sums(m: &Machine, c: &Configuration, max_steps: usize) -> Result<(Vec<u64>, usize)> {
    let d = m.spec.site_dim();
    let mut counts = vec![0i64; d];
    for &s in &c.sites {
        counts[m.spec.site_index(s)] += 1;
    }
    let mut sums: Vec<u64> = counts.iter().map(|&x| x as u64).collect();
    let mut w = Walker::new(m, c)?;
    let mut steps = 0;
    let len = loop {
        if steps == max_steps {
            return Err(Error::TruncatedOrbit);
        }
        steps += 1;
        match w.advance() {
            WalkEvent::DeadEnd => break w.j,
            WalkEvent::Closed => break w.j - 1,
            WalkEvent::Moved { pos, old } => {
                let cur = w.current();
                let n = if pos[0] == pos[1] { 1 } else { 2 };
                for i in 0..n {
                    counts[m.spec.site_index(old[i])] -= 1;
                    counts[m.spec.site_index(cur.sites[pos[i]])] += 1;
                }
                for (s, &c) in sums.iter_mut().zip(&counts) {
                    *s += c as u64;
                }
            }
        }
    };
    Ok((sums, len))
}

/// Fraction of A-cells holding `sym`, averaged uniformly over the orbit.
pub fn symbol_fraction(spec: &MachineSpec, c: &Configuration, sym: &str) -> f64 {
    spec.a_sym(sym)
        .map_or(0.0, |k| count_symbol(c, k) as f64 / c.len() as f64)
}

/// Site-value index of the distinguished single-site states: e₀ = the
/// initial control, e₁ = fresh A-cell, e₂ = A-cell a₂.
pub fn e_index(spec: &MachineSpec, k: usize) -> Option<usize> {
    match k {
        0 => Some(spec.site_index(Site::Ctrl {
            mode: spec.rw_mode(),
            q: spec.initial,
        })),
        1 => spec.a_sym("a1").map(|x| spec.site_index(Site::Cell(Cell::A(x)))),
        2 => spec.a_sym("a2").map(|x| spec.site_index(Site::Cell(Cell::A(x)))),
        3 => spec.a_sym("a3").map(|x| spec.site_index(Site::Cell(Cell::A(x)))),
        _ => None,
    }
}
