//! Decision procedures on finite lattices: the time grid, the threshold
//! check, the (K, L) semi-decision sweep, the cut-off/Taylor procedure with
//! its error ledger, and the observable and rotation reductions.

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::dense::DenseSystem;
use crate::dynamics::{
    e_index, trace_norm, CMatrix, InitialEnsemble, MemberOrbits, Provenance, SingleSiteState,
};
use crate::encoding::{build_initial_ensemble, encode_input, EnsembleParams, Rat};
use crate::error::{Error, Result};
use crate::hca::{compile, gap_bound_for, min_distinct_gap, spectrum_for, LocalHamiltonian};
use crate::rtm::build::{builtin, BuildOptions};
use crate::rtm::json::{from_json, spec_from_str, MachineJson};
use crate::rtm::{Boundary, Configuration, MachineSpec, Variant};

/// Certified bound on ‖H‖: U is a partial isometry, so ‖U + U†‖ ≤ 2.
pub const NORM_H_BOUND: f64 = 2.0;

fn c(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub eta: f64,
    pub eps1: f64,
}

impl Thresholds {
    pub fn new(eta: f64, eps1: f64) -> Result<Self> {
        let t = Thresholds { eta, eps1 };
        t.validate()?;
        Ok(t)
    }

    /// 0 < 2 eps1 < eta < 1.
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < 2.0 * self.eps1 && 2.0 * self.eps1 < self.eta && self.eta < 1.0) {
            return Err(Error::InvalidThresholds(format!(
                "need 0 < 2 eps1 < eta < 1, got eta = {}, eps1 = {}",
                self.eta, self.eps1
            )));
        }
        Ok(())
    }

    /// Weaker check used by the grid and the threshold test, which only need
    /// a positive margin: 0 < eps1 < eta < 1.
    pub fn validate_margin(&self) -> Result<()> {
        if !(0.0 < self.eps1 && self.eps1 < self.eta && self.eta < 1.0) {
            return Err(Error::InvalidThresholds(format!(
                "need 0 < eps1 < eta < 1, got eta = {}, eps1 = {}",
                self.eta, self.eps1
            )));
        }
        Ok(())
    }

    pub fn gap(&self) -> f64 {
        self.eta - self.eps1
    }

    /// eps1 + (5/4)(eta - eps1).
    pub fn check_level(&self) -> f64 {
        self.eps1 + 1.25 * self.gap()
    }
}

/// Time horizon of a grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    /// Plain horizon T.
    Fixed(f64),
    /// Finite-lattice cut-off T0 = 2^{2(L+1) + 2L^gamma + 1}, or an override.
    Cutoff {
        lattice: usize,
        gamma: f64,
        t0_override: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimeGrid {
    pub dt: f64,
    /// Number of points t_i = i dt, i = 1..=k.
    pub k: usize,
    pub horizon: f64,
    /// log2 of the formula cut-off, in cut-off mode.
    pub t0_log2: Option<f64>,
    pub overridden: bool,
}

impl TimeGrid {
    pub fn t(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }
}

/// log2 T0 = 2(L+1) + 2L^gamma + 1.
pub fn t0_log2(lattice: usize, gamma: f64) -> f64 {
    2.0 * (lattice as f64 + 1.0) + 2.0 * (lattice as f64).powf(gamma) + 1.0
}

/// dt = (eta - eps1) / (4 ‖H‖); k = ceil(T / dt) for a fixed horizon,
/// floor(T0 / dt) under a cut-off.
pub fn make_grid(th: &Thresholds, norm_h: f64, horizon: Horizon) -> Result<TimeGrid> {
    th.validate_margin()?;
    if norm_h <= 0.0 || !norm_h.is_finite() {
        return Err(Error::InvalidThresholds(format!("norm bound {norm_h}")));
    }
    let dt = th.gap() / (4.0 * norm_h);
    let (t, log2, overridden) = match horizon {
        Horizon::Fixed(t) => (t, None, false),
        Horizon::Cutoff {
            lattice,
            gamma,
            t0_override,
        } => {
            let l2 = t0_log2(lattice, gamma);
            match t0_override {
                Some(t) => (t, Some(l2), true),
                None => (l2.exp2(), Some(l2), false),
            }
        }
    };
    if !t.is_finite() || t < 0.0 {
        return Err(Error::DimensionGuard {
            what: "time horizon (use a cut-off override)",
            value: u128::MAX,
            limit: u64::MAX as u128,
        });
    }
    // a fixed horizon is covered; a cut-off is never exceeded
    let k = match horizon {
        Horizon::Fixed(_) => (t / dt).ceil(),
        Horizon::Cutoff { .. } => (t / dt * (1.0 + 1e-12)).floor(),
    };
    if k > 1e9 {
        return Err(Error::DimensionGuard {
            what: "grid points",
            value: k as u128,
            limit: 1_000_000_000,
        });
    }
    Ok(TimeGrid {
        dt,
        k: k as usize,
        horizon: t,
        t0_log2: log2,
        overridden,
    })
}

/// Rounds every entry to a multiple of 2^-bits.
pub fn round_dyadic(m: &CMatrix, bits: u32) -> CMatrix {
    let s = (bits as f64).exp2();
    m.map(|z| Complex64::new((z.re * s).round() / s, (z.im * s).round() / s))
}

/// Bits needed so that rounding keeps every entry within `precision`.
pub fn bits_for(precision: f64) -> u32 {
    (1.0 / precision).log2().ceil().max(1.0) as u32 + 1
}

/// ‖σ - |e1><e1|‖₁.
pub fn distance_to_e1(avg: &SingleSiteState, e1: usize) -> f64 {
    let mut m = avg.m.clone();
    m[(e1, e1)] -= c(1.0);
    trace_norm(&m)
}

/// True iff ‖σ - |e1><e1|‖₁ > eps1 + (5/4)(eta - eps1). `precision` is the
/// entrywise accuracy of `avg`; it must not exceed (eta - eps1)/4.
pub fn check_condition(
    avg: &SingleSiteState,
    e1: usize,
    th: &Thresholds,
    precision: f64,
) -> Result<bool> {
    th.validate_margin()?;
    if precision > th.gap() / 4.0 {
        return Err(Error::PrecisionViolation(format!(
            "entrywise precision {precision:e} exceeds (eta - eps1)/4 = {:e}",
            th.gap() / 4.0
        )));
    }
    Ok(distance_to_e1(avg, e1) > th.check_level())
}

/// Machine reference inside an instance file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MachineRef {
    Builtin {
        name: String,
        variant: Variant,
        #[serde(default)]
        pad: usize,
    },
    File(String),
    Inline(Box<MachineJson>),
}

impl MachineRef {
    /// Relative file paths are resolved against `base`.
    pub fn resolve(&self, base: Option<&Path>) -> Result<MachineSpec> {
        match self {
            MachineRef::Builtin { name, variant, pad } => builtin(
                name,
                *variant,
                BuildOptions {
                    pad: *pad,
                    ..BuildOptions::default()
                },
            ),
            MachineRef::Inline(j) => from_json(j),
            MachineRef::File(p) => {
                let path = match base {
                    Some(b) if Path::new(p).is_relative() => b.join(p),
                    _ => Path::new(p).to_path_buf(),
                };
                let s = std::fs::read_to_string(&path)
                    .map_err(|_| Error::Parse(format!("machine spec not found: {}", path.display())))?;
                spec_from_str(&s)
            }
        }
    }
}

/// Weighted tape prefix: at lattice L the configuration is the initial
/// control, these cells, then fresh A-cells up to L cells.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Tape {
    pub cells: Vec<String>,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleSource {
    Tapes(Vec<Tape>),
    Product {
        v: String,
        /// M-cell rate as a rational string, e.g. "1/64".
        alpha: String,
        #[serde(default)]
        l: Option<usize>,
        /// Members with weight below this are dropped.
        #[serde(default)]
        eps_amp: f64,
        /// Draw this many members instead of enumerating.
        #[serde(default)]
        samples: Option<usize>,
        #[serde(default)]
        seed: u64,
    },
}

impl EnsembleSource {
    pub fn build(&self, spec: &MachineSpec, lattice: usize, boundary: Boundary) -> Result<InitialEnsemble> {
        match self {
            EnsembleSource::Tapes(tapes) => {
                let mut members = Vec::new();
                for t in tapes {
                    if t.cells.len() > lattice {
                        return Err(Error::MalformedConfiguration(format!(
                            "tape prefix of {} cells does not fit L = {lattice}",
                            t.cells.len()
                        )));
                    }
                    let mut cells = t
                        .cells
                        .iter()
                        .map(|x| spec.parse_cell(x))
                        .collect::<Result<Vec<_>>>()?;
                    cells.resize(lattice, spec.fresh_a());
                    members.push((spec.initial_config(&cells, boundary), t.weight));
                }
                let total: f64 = members.iter().map(|(_, w)| w).sum();
                for m in &mut members {
                    m.1 /= total;
                }
                Ok(InitialEnsemble {
                    members,
                    exact: None,
                    provenance: Provenance::Anchored,
                    meta: Default::default(),
                })
            }
            EnsembleSource::Product {
                v,
                alpha,
                l,
                eps_amp,
                samples,
                seed,
            } => {
                let a: Rat = alpha
                    .parse()
                    .map_err(|_| Error::Parse(format!("alpha {alpha:?} is not a rational")))?;
                let enc = encode_input(v)?.with_alpha(a);
                let mut params = match l {
                    Some(l) => EnsembleParams::iid(lattice, *l),
                    None => EnsembleParams::anchored(lattice),
                }
                .overridden();
                params.boundary = boundary;
                let ens = build_initial_ensemble(spec, &params, &enc, *eps_amp)?;
                match (samples, &ens.exact) {
                    (Some(n), _) => Ok(ens.sampled(*n, *seed)),
                    (None, Some(e)) => {
                        let mut e = e.clone();
                        let total = e.total_weight();
                        for m in &mut e.members {
                            m.1 /= total;
                        }
                        Ok(e)
                    }
                    (None, None) => Err(Error::DimensionGuard {
                        what: "ensemble support (set samples)",
                        value: u128::MAX,
                        limit: crate::encoding::ENUMERATION_LIMIT,
                    }),
                }
            }
        }
    }
}

/// How the spectral-gap floor is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapFloor {
    /// 2^{-L^gamma}.
    #[default]
    Exponential,
    /// 1/f_gap with f_gap = ceil((J_max + 1)^2 / 8) over the member orbits.
    OrbitBound,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecisionInstance {
    pub machine: MachineRef,
    #[serde(default = "periodic")]
    pub boundary: Boundary,
    pub ensemble: EnsembleSource,
    /// Lattice used by the finite procedure (and the largest one the
    /// semi-decision sweep visits).
    pub lattice: usize,
    /// First lattice of the semi-decision sweep.
    #[serde(default)]
    pub lattice_min: Option<usize>,
    pub eta: f64,
    pub eps1: f64,
    #[serde(default = "gamma_default")]
    pub gamma: f64,
    #[serde(default)]
    pub gap_floor: GapFloor,
    #[serde(default)]
    pub t0_override: Option<f64>,
    #[serde(default = "max_steps_default")]
    pub max_steps: usize,
    #[serde(default = "dim_default")]
    pub dim_limit: usize,
}

fn periodic() -> Boundary {
    Boundary::Periodic
}
fn gamma_default() -> f64 {
    1.0
}
fn max_steps_default() -> usize {
    1_000_000
}
fn dim_default() -> usize {
    crate::dynamics::dense::DEFAULT_DIM_LIMIT
}

impl DecisionInstance {
    pub fn thresholds(&self) -> Result<Thresholds> {
        Thresholds::new(self.eta, self.eps1)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse(format!("instance json: {e}")))
    }
}

/// An instance with its machine compiled.
pub struct Prepared {
    pub instance: DecisionInstance,
    pub spec: MachineSpec,
    pub h: LocalHamiltonian,
    pub e1: usize,
}

pub fn prepare(instance: &DecisionInstance, base: Option<&Path>) -> Result<Prepared> {
    instance.thresholds()?;
    let spec = instance.machine.resolve(base)?;
    let h = compile(&spec, instance.boundary)?;
    let e1 = e_index(&spec, 1)
        .ok_or_else(|| Error::MalformedSpec("machine has no a1 symbol".into()))?;
    Ok(Prepared {
        instance: instance.clone(),
        spec,
        h,
        e1,
    })
}

/// One term of the certified error budget.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct LedgerTerm {
    pub name: &'static str,
    pub value: f64,
    pub note: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Yes,
    No,
}

#[derive(Clone, Debug, Serialize)]
pub struct FiniteDecision {
    pub verdict: Verdict,
    /// First K at which the check fired.
    pub fired_at: Option<usize>,
    pub grid: TimeGrid,
    pub lattice: usize,
    pub measured_gap: Option<f64>,
    pub gap_floor: f64,
    /// Largest distance of the K-average from |e1><e1| seen.
    pub max_distance: f64,
    pub final_distance: f64,
    /// Largest measured ‖ρ_ap(t) - ρ(t)‖₁ over the grid.
    pub max_taylor_error: f64,
    pub taylor_bound: f64,
    pub ledger: Vec<LedgerTerm>,
}

/// Scalar truncated exponential sum_{k=0}^{m} z^k / k!, as e^z minus its
/// tail (the tail terms decrease once k > |z|, so the subtraction is
/// accurate).
pub fn truncated_exp(z: Complex64, m: usize) -> Complex64 {
    let r = z.norm();
    if r == 0.0 {
        return c(1.0);
    }
    let full = z.exp();
    if (m as f64) < 2.0 * r + 2.0 {
        // direct sum (small orders only)
        let mut term = c(1.0);
        let mut s = c(1.0);
        for k in 1..=m {
            term *= z / k as f64;
            s += term;
        }
        return s;
    }
    // log |z^{m+1}/(m+1)!|
    let lg = (m as f64 + 1.0) * r.ln() - ln_factorial(m + 1);
    if lg < -745.0 {
        return full;
    }
    let mut term = Complex64::from_polar(lg.exp(), (m as f64 + 1.0) * z.arg());
    let mut tail = c(0.0);
    let mut k = m + 1;
    while term.norm() > 1e-300 && term.norm() > 1e-18 * tail.norm() {
        tail += term;
        k += 1;
        term *= z / k as f64;
    }
    full - tail
}

fn ln_factorial(n: usize) -> f64 {
    if n <= 256 {
        return (2..=n).map(|k| (k as f64).ln()).sum();
    }
    let x = n as f64 + 1.0;
    // Stirling series for ln Γ(x); the next term is below 1e-16 here
    (x - 0.5) * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI).ln() + 1.0 / (12.0 * x)
        - 1.0 / (360.0 * x.powi(3))
        + 1.0 / (1260.0 * x.powi(5))
}

/// Parameters of the truncated series: N = ceil(T0 ‖H_ap‖), order 2N².
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TaylorSetup {
    pub n: u64,
    pub order: usize,
    pub bound: f64,
}

/// (5/2)(2^{-(N²-N)} + (eta - eps1)/16).
pub fn taylor_bound(n: u64, th: &Thresholds) -> f64 {
    let e = (n * n - n) as f64;
    2.5 * ((-e).exp2() + th.gap() / 16.0)
}

pub fn taylor_setup(t0: f64, norm_h_ap: f64, th: &Thresholds) -> Result<TaylorSetup> {
    let n = (t0 * norm_h_ap).ceil().max(1.0);
    if n > 4096.0 {
        return Err(Error::DimensionGuard {
            what: "Taylor order parameter N",
            value: n as u128,
            limit: 4096,
        });
    }
    let n = n as u64;
    Ok(TaylorSetup {
        n,
        order: (2 * n * n) as usize,
        bound: taylor_bound(n, th),
    })
}

/// Approximate pure-state evolution T(-itH_ap)|ψ> with T the order-2N²
/// truncated exponential, and the certified bound. `h_err` is the certified
/// ‖H - H_ap‖ (zero for the exact integer matrix).
#[derive(Clone, Debug)]
pub struct TaylorResult {
    pub state: DVector<Complex64>,
    pub setup: TaylorSetup,
}

pub fn truncated_evolution(
    sys: &DenseSystem,
    psi: &DVector<Complex64>,
    t: f64,
    t0: f64,
    th: &Thresholds,
    h_err: f64,
) -> Result<TaylorResult> {
    if h_err > th.gap() / (16.0 * t0) {
        return Err(Error::ToleranceViolation(format!(
            "‖H - H_ap‖ = {h_err:e} exceeds (eta - eps1)/(16 T0) = {:e}",
            th.gap() / (16.0 * t0)
        )));
    }
    if t.abs() > t0 * (1.0 + 1e-12) {
        return Err(Error::ToleranceViolation(format!("t = {t} beyond T0 = {t0}")));
    }
    let setup = taylor_setup(t0, NORM_H_BOUND + h_err, th)?;
    if t == 0.0 {
        return Ok(TaylorResult {
            state: psi.clone(),
            setup,
        });
    }
    Ok(TaylorResult {
        state: spectral_poly(sys, psi, |lam| truncated_exp(Complex64::new(0.0, -t * lam), setup.order)),
        setup,
    })
}

fn spectral_poly(
    sys: &DenseSystem,
    psi: &DVector<Complex64>,
    f: impl Fn(f64) -> Complex64,
) -> DVector<Complex64> {
    let v = sys.eigenvectors.map(c);
    let mut coeff = v.transpose() * psi;
    for k in 0..sys.dim() {
        coeff[k] *= f(sys.eigenvalues[k]);
    }
    v * coeff
}

/// Direct truncated Taylor series of e^{-itH} for a small dense H.
pub fn taylor_matrix(h: &DMatrix<f64>, t: f64, order: usize) -> CMatrix {
    let n = h.nrows();
    let a = h.map(|x| Complex64::new(0.0, -t * x));
    let mut out = CMatrix::identity(n, n);
    for k in (1..=order).rev() {
        out = CMatrix::identity(n, n) + (&a * out) / c(k as f64);
    }
    out
}

/// ‖aa† - bb†‖₁ for vectors a, b: sqrt((‖a‖²-‖b‖²)² + 4 G) with G the Gram
/// determinant, taken as ‖a‖² times the squared residual of b off a so
/// that nearly equal vectors do not cancel.
pub fn pure_distance(a: &DVector<Complex64>, b: &DVector<Complex64>) -> f64 {
    let na = a.norm_squared();
    let nb = b.norm_squared();
    if na == 0.0 {
        return nb;
    }
    let r = b - a * (a.dotc(b) / na);
    ((na - nb).powi(2) + 4.0 * na * r.norm_squared()).sqrt()
}

struct DenseMember {
    sys: DenseSystem,
    psi: DVector<Complex64>,
    coeff: DVector<Complex64>,
    v: CMatrix,
    weight: f64,
}

fn dense_members(p: &Prepared, ens: &InitialEnsemble) -> Result<Vec<DenseMember>> {
    ens.members
        .par_iter()
        .map(|(x, w)| {
            let sys = DenseSystem::new(&p.h, std::slice::from_ref(x), p.instance.dim_limit)?;
            let psi = sys.basis_vector(x).expect("seed in basis");
            let v = sys.eigenvectors.map(c);
            let coeff = v.transpose() * &psi;
            Ok(DenseMember {
                sys,
                psi,
                coeff,
                v,
                weight: *w,
            })
        })
        .collect()
}

/// Member orbits, the smallest distinct-level gap over them and the
/// largest orbit length.
fn orbit_gaps(p: &Prepared, ens: &InitialEnsemble) -> Result<(Vec<MemberOrbits>, Option<f64>, usize)> {
    let mut gap: Option<f64> = None;
    let mut jmax = 0;
    let mut all = Vec::with_capacity(ens.members.len());
    for (x, _) in &ens.members {
        let mo = MemberOrbits::new(&p.h.machine, x, p.instance.max_steps)?;
        for b in &mo.blocks {
            jmax = jmax.max(b.len);
            let s = spectrum_for(b.len, b.cycle);
            if let Some(g) = min_distinct_gap(&s.eigenvalues, 1e-9) {
                gap = Some(gap.map_or(g, |x: f64| x.min(g)));
            }
        }
        all.push(mo);
    }
    Ok((all, gap, jmax))
}

/// Finite-lattice procedure: checks the threshold on every K-average up to
/// ceil(T0/dt), with ρ̄_ap from the truncated Taylor series.
pub fn decide_finite(p: &Prepared) -> Result<FiniteDecision> {
    decide_finite_with(p, false)
}

/// `full_sweep` keeps evaluating after the check fires (to measure the
/// Taylor error on every grid point).
pub fn decide_finite_with(p: &Prepared, full_sweep: bool) -> Result<FiniteDecision> {
    let inst = &p.instance;
    let th = inst.thresholds()?;
    let lattice = inst.lattice;
    let grid = make_grid(
        &th,
        NORM_H_BOUND,
        Horizon::Cutoff {
            lattice,
            gamma: inst.gamma,
            t0_override: inst.t0_override,
        },
    )?;
    let t0 = grid.horizon;
    let ens = inst.ensemble.build(&p.spec, lattice, inst.boundary)?;
    let (orbits, gap, jmax) = orbit_gaps(p, &ens)?;
    let floor = match inst.gap_floor {
        GapFloor::Exponential => (-(lattice as f64).powf(inst.gamma)).exp2(),
        GapFloor::OrbitBound => {
            let b = gap_bound_for(jmax);
            1.0 / ((*b.denom() as f64) / (*b.numer() as f64)).ceil()
        }
    };
    if let Some(g) = gap {
        if g < floor {
            return Err(Error::GapViolation {
                measured: g,
                floor,
            });
        }
    }
    let setup = taylor_setup(t0, NORM_H_BOUND, &th)?;
    let members = dense_members(p, &ens)?;
    let d = p.spec.site_dim();
    let precision = th.gap() / 4.0;
    let bits = bits_for(precision / d as f64);
    let mut sum = CMatrix::zeros(d, d);
    let mut fired_at = None;
    let mut max_distance: f64 = 0.0;
    let mut final_distance = 0.0;
    let mut max_err: f64 = 0.0;
    for i in 1..=grid.k {
        let t = grid.t(i);
        let parts: Vec<(CMatrix, f64)> = members
            .par_iter()
            .map(|m| {
                let mut ap = m.coeff.clone();
                let mut ex = m.coeff.clone();
                for k in 0..m.sys.dim() {
                    let lam = m.sys.eigenvalues[k];
                    ap[k] *= truncated_exp(Complex64::new(0.0, -t * lam), setup.order);
                    ex[k] *= Complex64::from_polar(1.0, -t * lam);
                }
                let ap = &m.v * ap;
                let ex = &m.v * ex;
                let rho = m.sys.site_average_pure(&ap, d).m * c(m.weight);
                (rho, m.weight * pure_distance(&ap, &ex))
            })
            .collect();
        let mut err = 0.0;
        let mut step = CMatrix::zeros(d, d);
        for (rho, e) in parts {
            step += rho;
            err += e;
        }
        // independent reference: the closed-form orbit dynamics
        let mut reference = CMatrix::zeros(d, d);
        for (mo, (_, w)) in orbits.iter().zip(&ens.members) {
            mo.add_at(t, *w, &mut reference);
        }
        err = f64::max(err, trace_norm(&(&step - &reference)));
        sum += step;
        max_err = max_err.max(err);
        let avg = SingleSiteState {
            m: round_dyadic(&(&sum / c(i as f64)), bits),
        };
        let dist = distance_to_e1(&avg, p.e1);
        max_distance = max_distance.max(dist);
        final_distance = dist;
        if fired_at.is_none() && check_condition(&avg, p.e1, &th, precision / d as f64)? {
            fired_at = Some(i);
            if !full_sweep {
                break;
            }
        }
    }
    let cutoff_formula = if grid.overridden {
        // the cut-off estimate with the overridden T0 in place of the formula value
        (2.0 * (lattice as f64 + 1.0) + (lattice as f64).powf(inst.gamma) + 1.0).exp2() / t0
    } else {
        (-(lattice as f64).powf(inst.gamma)).exp2()
    };
    let ledger = vec![
        LedgerTerm {
            name: "grid_discretization",
            value: th.gap() / 2.0,
            note: format!("dt = {}, K_max = {}", grid.dt, grid.k),
        },
        LedgerTerm {
            name: "entry_rounding",
            value: th.gap() / 4.0,
            note: format!("entries rounded to 2^-{bits}"),
        },
        LedgerTerm {
            name: "taylor_truncation",
            value: setup.bound,
            note: format!("N = {}, order 2N^2 = {}", setup.n, setup.order),
        },
        LedgerTerm {
            name: "hamiltonian_tolerance",
            value: th.gap() / 16.0,
            note: "H_ap = H (integer entries)".into(),
        },
        LedgerTerm {
            name: "time_cutoff",
            value: cutoff_formula,
            note: if grid.overridden {
                format!("T0 overridden to {t0} (formula log2 T0 = {:.1})", grid.t0_log2.unwrap_or(0.0))
            } else {
                "2^-L^gamma".into()
            },
        },
        LedgerTerm {
            name: "gap_floor",
            value: floor,
            note: format!("measured orbit gap {:?}, J_max = {jmax}", gap),
        },
        LedgerTerm {
            name: "measured_taylor_error",
            value: max_err,
            note: "max over evaluated grid points of the full-state error and the site-level error against the orbit formula".into(),
        },
    ];
    if max_err > setup.bound {
        return Err(Error::ToleranceViolation(format!(
            "measured Taylor error {max_err:e} exceeds bound {:e}",
            setup.bound
        )));
    }
    Ok(FiniteDecision {
        verdict: if fired_at.is_some() { Verdict::Yes } else { Verdict::No },
        fired_at,
        grid,
        lattice,
        measured_gap: gap,
        gap_floor: floor,
        max_distance,
        final_distance,
        max_taylor_error: max_err,
        taylor_bound: setup.bound,
        ledger,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "result")]
pub enum SemiOutcome {
    Accepted { k: usize, lattice: usize, examined: usize },
    BudgetExhausted { examined: usize },
}

struct LatticeState {
    members: Vec<(MemberOrbits, f64)>,
    sum: CMatrix,
    k: usize,
}

/// (K, L) pairs in diagonal order: K + L ascending, K ascending within,
/// K ≥ 1 and lattice_min ≤ L ≤ lattice_max.
pub fn diagonal_pairs(lattice_min: usize, lattice_max: usize) -> impl Iterator<Item = (usize, usize)> {
    (lattice_min + 1..).flat_map(move |s| {
        (1..=s - lattice_min)
            .map(move |k| (k, s - k))
            .filter(move |&(_, l)| l <= lattice_max)
    })
}

/// Sweeps (K, L) pairs until the check fires or `budget` pairs have been
/// examined. ρ̄(t_i) comes from the exact orbit formula, rounded to dyadic
/// entries.
pub fn semi_decide(p: &Prepared, budget: usize) -> Result<SemiOutcome> {
    let inst = &p.instance;
    let th = inst.thresholds()?;
    let grid = make_grid(&th, NORM_H_BOUND, Horizon::Fixed(0.0))?;
    let lmin = inst.lattice_min.unwrap_or(inst.lattice);
    let d = p.spec.site_dim();
    let precision = th.gap() / 4.0 / d as f64;
    let bits = bits_for(precision);
    let mut states: HashMap<usize, LatticeState> = HashMap::new();
    for (examined, (k, l)) in diagonal_pairs(lmin, inst.lattice).take(budget).enumerate() {
        if let std::collections::hash_map::Entry::Vacant(e) = states.entry(l) {
            let ens = inst.ensemble.build(&p.spec, l, inst.boundary)?;
            let members = ens
                .members
                .iter()
                .map(|(x, w)| Ok((MemberOrbits::new(&p.h.machine, x, inst.max_steps)?, *w)))
                .collect::<Result<Vec<_>>>()?;
            e.insert(LatticeState {
                members,
                sum: CMatrix::zeros(d, d),
                k: 0,
            });
        }
        let st = states.get_mut(&l).unwrap();
        while st.k < k {
            st.k += 1;
            let t = grid.t(st.k);
            for (mo, w) in &st.members {
                mo.add_at(t, *w, &mut st.sum);
            }
        }
        let avg = SingleSiteState {
            m: round_dyadic(&(&st.sum / c(k as f64)), bits),
        };
        if check_condition(&avg, p.e1, &th, precision)? {
            return Ok(SemiOutcome::Accepted {
                k,
                lattice: l,
                examined: examined + 1,
            });
        }
    }
    Ok(SemiOutcome::BudgetExhausted { examined: budget })
}

/// Infinite-time reference: dense spectral projections of every member.
#[derive(Clone, Debug, Serialize)]
pub struct LongTermOracle {
    pub distance: f64,
    pub fires: bool,
    pub state_trace: f64,
}

pub fn longterm_oracle(p: &Prepared, lattice: usize) -> Result<(LongTermOracle, SingleSiteState)> {
    let th = p.instance.thresholds()?;
    let ens = p.instance.ensemble.build(&p.spec, lattice, p.instance.boundary)?;
    let members = dense_members(p, &ens)?;
    let d = p.spec.site_dim();
    let mut out = CMatrix::zeros(d, d);
    for m in &members {
        let inf = m.sys.infinite_time_average(&m.psi);
        out += m.sys.site_average_mixed(&inf, d).m * c(m.weight);
    }
    let s = SingleSiteState { m: out };
    let distance = distance_to_e1(&s, p.e1);
    Ok((
        LongTermOracle {
            distance,
            fires: distance > th.check_level(),
            state_trace: s.trace().re,
        },
        s,
    ))
}

/// Parameters of the observable form of the problem.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReductionParams {
    pub c1: f64,
    pub eps0: f64,
    pub eps1: f64,
    pub norm_a: f64,
}

/// c1 = <e1|A|e1>, eps1 = eta |A11 - A22| / (3‖A‖), eps0 = eps1 ‖A‖, with
/// e1, e2 the basis vectors `e1`, `e2`.
pub fn reduction_parameters(a: &CMatrix, e1: usize, e2: usize, eta: f64) -> Result<ReductionParams> {
    let a11 = a[(e1, e1)].re;
    let a22 = a[(e2, e2)].re;
    let norm_a = crate::dynamics::hermitian_eigenvalues(a)
        .into_iter()
        .fold(0.0f64, |m, x| m.max(x.abs()));
    if (a11 - a22).abs() <= 1e-15 * norm_a.max(1.0) || norm_a == 0.0 {
        return Err(Error::DegenerateObservable);
    }
    let eps1 = eta * (a11 - a22).abs() / (3.0 * norm_a);
    Ok(ReductionParams {
        c1: a11,
        eps0: eps1 * norm_a,
        eps1,
        norm_a,
    })
}

/// 1-local unitary V with V|e1> = |ψ'>, acting as the identity off
/// span{e1, ψ'}.
pub fn site_rotation(psi: &DVector<Complex64>, e0: usize, e1: usize, eps1: f64) -> Result<CMatrix> {
    let d = psi.len();
    let psi = psi / c(psi.norm());
    if psi[e0].norm() > 1e-12 {
        return Err(Error::OverlapViolation("<e0|ψ'> ≠ 0".into()));
    }
    let mut proj = CMatrix::zeros(d, d);
    proj += &psi * psi.adjoint();
    proj[(e1, e1)] -= c(1.0);
    let dist = trace_norm(&proj);
    if dist > eps1 + 1e-12 {
        return Err(Error::OverlapViolation(format!(
            "‖|ψ'><ψ'| - |e1><e1|‖₁ = {dist} > eps1 = {eps1}"
        )));
    }
    let cc = psi[e1];
    let mut rest = psi.clone();
    rest[e1] = c(0.0);
    let s = rest.norm();
    let mut v = CMatrix::identity(d, d);
    if s < 1e-15 {
        v[(e1, e1)] = cc;
        return Ok(v);
    }
    let u = rest / c(s);
    // V = I - |e1><e1| - |u><u| + |ψ'><e1| + (-s|e1> + c̄|u>)<u|
    let mut e1v = DVector::<Complex64>::zeros(d);
    e1v[e1] = c(1.0);
    v -= &e1v * e1v.adjoint();
    v -= &u * u.adjoint();
    v += &psi * e1v.adjoint();
    let second = &e1v * c(-s) + &u * cc.conj();
    v += second * u.adjoint();
    Ok(v)
}

/// Values of two neighbouring sites.
pub type SitePair = (usize, usize);
pub type PairTerm = (SitePair, SitePair, Complex64);

/// Local terms of H as sparse entries: pair terms on (i, i+1) indexed by
/// site-value pairs, and single-site terms.
#[derive(Clone, Debug)]
pub struct LocalTerms {
    pub d: usize,
    pub boundary: Boundary,
    /// ((row_i, row_j), (col_i, col_j), value).
    pub pair: Vec<PairTerm>,
    pub single: Vec<(usize, usize, Complex64)>,
}

impl LocalTerms {
    /// U + U† of a compiled machine.
    pub fn from_hamiltonian(h: &LocalHamiltonian) -> LocalTerms {
        let mut pair = Vec::new();
        for map in [&h.u0, &h.right, &h.left] {
            for (k, v) in map.iter() {
                let a = (k.0 as usize, k.1 as usize);
                let b = (v.0 as usize, v.1 as usize);
                pair.push((b, a, c(1.0)));
                pair.push((a, b, c(1.0)));
            }
        }
        let mut single = Vec::new();
        for (k, v) in &h.stay {
            single.push((*v as usize, *k as usize, c(1.0)));
            single.push((*k as usize, *v as usize, c(1.0)));
        }
        LocalTerms {
            d: h.d,
            boundary: h.boundary,
            pair,
            single,
        }
    }

    /// Terms of V†HV for the product unitary V^{⊗(L+1)}.
    pub fn conjugate(&self, v: &CMatrix) -> LocalTerms {
        let d = self.d;
        let vd = v.adjoint();
        // (V†⊗V†) h (V⊗V): each h entry (a, b) spreads a over rows r with
        // V†_{ra} and b over columns s with V_{bs}.
        let row_spread: Vec<Vec<(usize, Complex64)>> = (0..d)
            .map(|a| (0..d).filter(|&r| vd[(r, a)].norm() > 0.0).map(|r| (r, vd[(r, a)])).collect())
            .collect();
        let col_spread: Vec<Vec<(usize, Complex64)>> = (0..d)
            .map(|b| (0..d).filter(|&s| v[(b, s)].norm() > 0.0).map(|s| (s, v[(b, s)])).collect())
            .collect();
        let mut acc: HashMap<(SitePair, SitePair), Complex64> = HashMap::new();
        for &((a0, a1), (b0, b1), val) in &self.pair {
            for &(r0, x0) in &row_spread[a0] {
                for &(r1, x1) in &row_spread[a1] {
                    for &(s0, y0) in &col_spread[b0] {
                        for &(s1, y1) in &col_spread[b1] {
                            *acc.entry(((r0, r1), (s0, s1))).or_default() += x0 * x1 * val * y0 * y1;
                        }
                    }
                }
            }
        }
        let mut acc1: HashMap<(usize, usize), Complex64> = HashMap::new();
        for &(a, b, val) in &self.single {
            for &(r, x) in &row_spread[a] {
                for &(s, y) in &col_spread[b] {
                    *acc1.entry((r, s)).or_default() += x * val * y;
                }
            }
        }
        let mut pair: Vec<_> = acc.into_iter().filter(|(_, z)| z.norm() > 1e-15).map(|(k, z)| (k.0, k.1, z)).collect();
        pair.sort_by_key(|t| (t.0, t.1));
        let mut single: Vec<_> = acc1.into_iter().filter(|(_, z)| z.norm() > 1e-15).map(|(k, z)| (k.0, k.1, z)).collect();
        single.sort_by_key(|t| (t.0, t.1));
        LocalTerms {
            d,
            boundary: self.boundary,
            pair,
            single,
        }
    }

    /// H applied to a basis configuration given as site-value indices.
    pub fn apply(&self, x: &[usize]) -> Vec<(Vec<usize>, Complex64)> {
        let n = x.len();
        let mut by_col: HashMap<SitePair, Vec<(SitePair, Complex64)>> = HashMap::new();
        for &(r, s, z) in &self.pair {
            by_col.entry(s).or_default().push((r, z));
        }
        let mut out = Vec::new();
        let wrap = self.boundary == Boundary::Periodic && n > 1;
        let pairs = (0..n.saturating_sub(1)).map(|i| (i, i + 1)).chain(wrap.then_some((n - 1, 0)));
        for (i, j) in pairs {
            if let Some(list) = by_col.get(&(x[i], x[j])) {
                for &((r0, r1), z) in list {
                    let mut y = x.to_vec();
                    y[i] = r0;
                    y[j] = r1;
                    out.push((y, z));
                }
            }
        }
        for i in 0..n {
            for &(r, s, z) in &self.single {
                if s == x[i] {
                    let mut y = x.to_vec();
                    y[i] = r;
                    out.push((y, z));
                }
            }
        }
        out
    }
}

/// Dense H on the closure of `seeds` under the terms.
pub fn dense_closure(terms: &LocalTerms, seeds: &[Vec<usize>], limit: usize) -> Result<(Vec<Vec<usize>>, CMatrix)> {
    let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut basis = Vec::new();
    let mut queue = VecDeque::new();
    for s in seeds {
        if index.insert(s.clone(), basis.len()).is_none() {
            basis.push(s.clone());
            queue.push_back(s.clone());
        }
    }
    let mut entries = Vec::new();
    while let Some(x) = queue.pop_front() {
        let col = index[&x];
        for (y, z) in terms.apply(&x) {
            let row = match index.get(&y) {
                Some(&r) => r,
                None => {
                    if basis.len() >= limit {
                        return Err(Error::DimensionGuard {
                            what: "closure dimension",
                            value: basis.len() as u128 + 1,
                            limit: limit as u128,
                        });
                    }
                    index.insert(y.clone(), basis.len());
                    basis.push(y.clone());
                    queue.push_back(y);
                    basis.len() - 1
                }
            };
            entries.push((row, col, z));
        }
    }
    let n = basis.len();
    let mut h = CMatrix::zeros(n, n);
    for (r, cl, z) in entries {
        h[(r, cl)] += z;
    }
    Ok((basis, h))
}

/// Result of the state-to-Hamiltonian rotation.
#[derive(Clone, Debug)]
pub struct RotatedInstance {
    pub v: CMatrix,
    pub terms: LocalTerms,
}

/// H = V†H'V with V|e1> = |ψ'>: the dynamics of the product state with e1
/// under H equals V† (dynamics of ψ' under H') V, site by site.
pub fn rotate_instance(
    h_prime: &LocalTerms,
    psi_prime: &DVector<Complex64>,
    e0: usize,
    e1: usize,
    eps1: f64,
) -> Result<RotatedInstance> {
    let v = site_rotation(psi_prime, e0, e1, eps1)?;
    Ok(RotatedInstance {
        terms: h_prime.conjugate(&v),
        v,
    })
}

/// Hermitian eigen-evolution of a dense complex H: e^{-iHt}ψ.
pub fn evolve_dense(h: &CMatrix, psi: &DVector<Complex64>, t: f64) -> DVector<Complex64> {
    let herm = (h + h.adjoint()) * c(0.5);
    let eig = SymmetricEigen::new(herm);
    let coeff = eig.eigenvectors.adjoint() * psi;
    let phased = DVector::from_iterator(
        coeff.len(),
        coeff.iter().zip(eig.eigenvalues.iter()).map(|(a, &l)| a * Complex64::from_polar(1.0, -l * t)),
    );
    eig.eigenvectors * phased
}

/// Space-averaged single-site state of a vector over `basis`.
pub fn site_average_vector(basis: &[Vec<usize>], psi: &DVector<Complex64>, d: usize) -> CMatrix {
    let n = basis.first().map_or(0, |b| b.len());
    let mut out = CMatrix::zeros(d, d);
    // group basis elements by the configuration with one site removed
    let mut by_rest: HashMap<(usize, Vec<usize>), Vec<usize>> = HashMap::new();
    for (k, x) in basis.iter().enumerate() {
        if psi[k].norm() == 0.0 {
            continue;
        }
        for i in 0..n {
            let mut rest = x.clone();
            rest[i] = usize::MAX;
            by_rest.entry((i, rest)).or_default().push(k);
        }
    }
    for list in by_rest.values() {
        for &a in list {
            for &b in list {
                let i = basis[a].iter().zip(&basis[b]).position(|(p, q)| p != q);
                let (ra, rb) = match i {
                    Some(i) => (basis[a][i], basis[b][i]),
                    None => continue,
                };
                out[(ra, rb)] += psi[a] * psi[b].conj() / c(n as f64);
            }
        }
    }
    // diagonal part
    for (k, x) in basis.iter().enumerate() {
        let p = psi[k].norm_sqr() / n as f64;
        if p == 0.0 {
            continue;
        }
        for &s in x {
            out[(s, s)] += c(p);
        }
    }
    out
}

/// All product configurations over per-site value choices.
pub fn product_support(choices: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for ch in choices {
        let mut next = Vec::new();
        for x in &out {
            for &v in ch {
                let mut y = x.clone();
                y.push(v);
                next.push(y);
            }
        }
        out = next;
    }
    out
}

/// Amplitudes of a product state over its support.
pub fn product_amplitudes(support: &[Vec<usize>], sites: &[DVector<Complex64>]) -> Vec<Complex64> {
    support
        .iter()
        .map(|x| x.iter().zip(sites).map(|(&v, s)| s[v]).product())
        .collect()
}

/// Distinct values, in order.
pub fn distinct(xs: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut seen = HashSet::new();
    xs.into_iter().filter(|x| seen.insert(*x)).collect()
}

/// Rebuilds a configuration from site-value indices.
pub fn config_from_indices(spec: &MachineSpec, x: &[usize], boundary: Boundary) -> Configuration {
    Configuration::new(x.iter().map(|&i| spec.site_from_index(i)).collect(), boundary)
}
