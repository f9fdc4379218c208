//! The machine as a nearest-neighbour partial isometry U on the
//! configuration basis, and H = U + U† restricted to orbits.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use num_rational::Ratio;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rtm::{Boundary, Configuration, Dir, Machine, MachineSpec, Orbit, Site, Terminal};

/// U as basis-pair maps. Site values are referred to by their index in
/// `0..d` (see [`MachineSpec::site_index`]).
#[derive(Clone, Debug)]
pub struct LocalHamiltonian {
    pub machine: Machine,
    pub boundary: Boundary,
    pub d: usize,
    /// Read-write moves on (control, read cell).
    pub u0: BTreeMap<(u32, u32), (u32, u32)>,
    /// Right shifts on (control, cell).
    pub right: BTreeMap<(u32, u32), (u32, u32)>,
    /// Left shifts on (cell, control).
    pub left: BTreeMap<(u32, u32), (u32, u32)>,
    /// Stay-class mode flips on a single control site.
    pub stay: BTreeMap<u32, u32>,
    pair_fwd: BTreeMap<(u32, u32), (u32, u32)>,
    pair_bwd: BTreeMap<(u32, u32), (u32, u32)>,
    single_bwd: BTreeMap<u32, u32>,
}

pub fn compile(spec: &MachineSpec, boundary: Boundary) -> Result<LocalHamiltonian> {
    let m = Machine::new(spec.clone())?;
    let sp = &m.spec;
    let d = sp.site_dim();
    let rw = m.rw_mode();
    let idx = |s: Site| sp.site_index(s) as u32;
    let mut u0 = BTreeMap::new();
    let mut right = BTreeMap::new();
    let mut left = BTreeMap::new();
    let mut stay = BTreeMap::new();
    for r in &sp.rules {
        if m.rw_rule(r.q, r.read).is_none() {
            continue;
        }
        u0.insert(
            (idx(Site::Ctrl { mode: rw, q: r.q }), idx(Site::Cell(r.read))),
            (
                idx(Site::Ctrl { mode: rw.other(), q: r.q2 }),
                idx(Site::Cell(r.write)),
            ),
        );
    }
    let cells = sp.all_cells();
    for q in 0..sp.n_states() as u32 {
        if !m.shift_allowed(q) {
            continue;
        }
        let from = idx(Site::Ctrl { mode: rw.other(), q });
        let to = idx(Site::Ctrl { mode: rw, q });
        match m.dir(q) {
            Dir::Stay => {
                stay.insert(from, to);
            }
            Dir::Right => {
                for &c in &cells {
                    right.insert((from, idx(Site::Cell(c))), (idx(Site::Cell(c)), to));
                }
            }
            Dir::Left => {
                for &c in &cells {
                    left.insert((idx(Site::Cell(c)), from), (to, idx(Site::Cell(c))));
                }
            }
        }
    }
    let mut pair_fwd = BTreeMap::new();
    for map in [&u0, &right, &left] {
        for (k, v) in map.iter() {
            if pair_fwd.insert(*k, *v).is_some() {
                return Err(Error::NotReversible("overlapping pair terms".into()));
            }
        }
    }
    let mut pair_bwd = BTreeMap::new();
    for (k, v) in &pair_fwd {
        if pair_bwd.insert(*v, *k).is_some() {
            return Err(Error::NotReversible("pair terms are not injective".into()));
        }
    }
    let single_bwd = stay.iter().map(|(k, v)| (*v, *k)).collect();
    Ok(LocalHamiltonian {
        machine: m,
        boundary,
        d,
        u0,
        right,
        left,
        stay,
        pair_fwd,
        pair_bwd,
        single_bwd,
    })
}

impl LocalHamiltonian {
    pub fn spec(&self) -> &MachineSpec {
        &self.machine.spec
    }

    fn pairs(&self, n: usize) -> impl Iterator<Item = (usize, usize)> {
        let wrap = self.boundary == Boundary::Periodic && n > 1;
        (0..n.saturating_sub(1))
            .map(|i| (i, i + 1))
            .chain(wrap.then_some((n - 1, 0)))
    }

    fn apply_maps(
        &self,
        c: &Configuration,
        pair: &BTreeMap<(u32, u32), (u32, u32)>,
        single: &BTreeMap<u32, u32>,
    ) -> Vec<Configuration> {
        let sp = self.spec();
        let ix: Vec<u32> = c.sites.iter().map(|&s| sp.site_index(s) as u32).collect();
        let mut out = Vec::new();
        for (i, j) in self.pairs(c.len()) {
            if let Some(&(a, b)) = pair.get(&(ix[i], ix[j])) {
                let mut n = c.clone();
                n.sites[i] = sp.site_from_index(a as usize);
                n.sites[j] = sp.site_from_index(b as usize);
                out.push(n);
            }
        }
        for (i, &x) in ix.iter().enumerate() {
            if let Some(&a) = single.get(&x) {
                let mut n = c.clone();
                n.sites[i] = sp.site_from_index(a as usize);
                out.push(n);
            }
        }
        out
    }

    /// U applied to a basis configuration: the sum over all local terms.
    /// A single-control configuration yields at most one term.
    pub fn apply_u_terms(&self, c: &Configuration) -> Vec<Configuration> {
        self.apply_maps(c, &self.pair_fwd, &self.stay)
    }

    /// U† applied to a basis configuration.
    pub fn apply_u_dagger_terms(&self, c: &Configuration) -> Vec<Configuration> {
        self.apply_maps(c, &self.pair_bwd, &self.single_bwd)
    }

    /// U on a single-control configuration; `None` is the zero vector.
    pub fn apply_u(&self, c: &Configuration) -> Result<Option<Configuration>> {
        c.single_control()?;
        let mut v = self.apply_u_terms(c);
        if v.len() > 1 {
            return Err(Error::NotReversible("several terms act on one control".into()));
        }
        Ok(v.pop())
    }

    pub fn apply_u_dagger(&self, c: &Configuration) -> Result<Option<Configuration>> {
        c.single_control()?;
        let mut v = self.apply_u_dagger_terms(c);
        if v.len() > 1 {
            return Err(Error::NotReversible("two predecessors".into()));
        }
        Ok(v.pop())
    }

    /// Pair maps as tag lists, for export.
    pub fn to_json(&self) -> serde_json::Value {
        let sp = self.spec();
        let t = |i: u32| sp.site_tag(sp.site_from_index(i as usize));
        let pairs = |m: &BTreeMap<(u32, u32), (u32, u32)>| -> Vec<[String; 4]> {
            m.iter()
                .map(|(k, v)| [t(k.0), t(k.1), t(v.0), t(v.1)])
                .collect()
        };
        serde_json::json!({
            "machine": sp.name,
            "site_dim": self.d,
            "boundary": self.boundary,
            "u0": pairs(&self.u0),
            "shift_right": pairs(&self.right),
            "shift_left": pairs(&self.left),
            "stay": self.stay.iter().map(|(k, v)| [t(*k), t(*v)]).collect::<Vec<_>>(),
        })
    }
}

/// Eigen-decomposition of H restricted to one orbit.
#[derive(Clone, Debug, Serialize)]
pub struct OrbitSpectrum {
    pub len: usize,
    pub cycle: bool,
    pub eigenvalues: Vec<f64>,
    /// `vectors[k][j]` is the j-th component of the k-th eigenvector.
    #[serde(skip)]
    pub vectors: Vec<Vec<Complex64>>,
}

/// Spectrum of the path (dead end) or cycle adjacency of length `j`.
pub fn spectrum_for(j: usize, cycle: bool) -> OrbitSpectrum {
    let mut eigenvalues = Vec::with_capacity(j);
    let mut vectors = Vec::with_capacity(j);
    if cycle {
        let norm = 1.0 / (j as f64).sqrt();
        for k in 0..j {
            let w = 2.0 * PI * k as f64 / j as f64;
            eigenvalues.push(2.0 * w.cos());
            vectors.push(
                (0..j)
                    .map(|x| Complex64::from_polar(norm, w * x as f64))
                    .collect(),
            );
        }
    } else {
        let th = PI / (j as f64 + 1.0);
        let norm = (2.0 / (j as f64 + 1.0)).sqrt();
        for k in 1..=j {
            eigenvalues.push(2.0 * (k as f64 * th).cos());
            vectors.push(
                (1..=j)
                    .map(|x| Complex64::new(norm * (x as f64 * k as f64 * th).sin(), 0.0))
                    .collect(),
            );
        }
    }
    OrbitSpectrum {
        len: j,
        cycle,
        eigenvalues,
        vectors,
    }
}

pub fn orbit_kind(orbit: &Orbit) -> Result<(usize, bool)> {
    match orbit.terminal {
        Terminal::DeadEnd(j) => Ok((j, false)),
        Terminal::Cycle(j) => Ok((j, true)),
        Terminal::Truncated => Err(Error::TruncatedOrbit),
    }
}

pub fn orbit_spectrum(orbit: &Orbit) -> Result<OrbitSpectrum> {
    let (j, cycle) = orbit_kind(orbit)?;
    Ok(spectrum_for(j, cycle))
}

/// Lower bound 8/(J+1)^2 on the gap between distinct orbit eigenvalues.
pub fn energy_gap_bound(orbit: &Orbit) -> Result<Ratio<u64>> {
    let (j, _) = orbit_kind(orbit)?;
    Ok(gap_bound_for(j))
}

pub fn gap_bound_for(j: usize) -> Ratio<u64> {
    let j = j as u64;
    Ratio::new(8, (j + 1) * (j + 1))
}

/// Smallest distance between distinct eigenvalues (values within `tol` are
/// merged). `None` for a single distinct level.
pub fn min_distinct_gap(eigs: &[f64], tol: f64) -> Option<f64> {
    let mut v = eigs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut levels: Vec<f64> = Vec::new();
    for x in v {
        if levels.last().is_none_or(|&l| x - l > tol) {
            levels.push(x);
        }
    }
    levels
        .windows(2)
        .map(|w| w[1] - w[0])
        .min_by(|a, b| a.partial_cmp(b).unwrap())
}
