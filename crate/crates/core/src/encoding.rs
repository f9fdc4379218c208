//! Input encodings, product initial ensembles, good-configuration tests and
//! the single-qubit rotation decoder.
//!
//! Probabilities on the classical path are exact rationals. Floats only
//! appear in sampling and in the rotation decoder's basis-state check.

use std::f64::consts::PI;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, Geometric, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{EnsembleMeta, InitialEnsemble, Provenance};
use crate::error::{Error, Result};
use crate::rtm::{Boundary, Cell, Configuration, MachineSpec, Site};

pub type Rat = BigRational;

fn rat(n: i64, d: i64) -> Rat {
    Rat::new(BigInt::from(n), BigInt::from(d))
}

fn pow2(k: usize) -> BigInt {
    BigInt::one() << k
}

fn to_f64(r: &Rat) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Input bits stored as the 1-rate `beta` on track 1 of M-cells, with the
/// length marker rate `marker = n^-2` on track 2.
#[derive(Clone, Debug, PartialEq)]
pub struct InputEncoding {
    pub v: String,
    pub n: usize,
    pub beta: Rat,
    /// M-cell rate.
    pub alpha: Rat,
    pub marker: Rat,
    pub eps1: Option<Rat>,
}

/// alpha = (eps1/4)^2.
pub fn alpha_from_eps1(eps1: &Rat) -> Rat {
    let q = eps1 / Rat::from_integer(BigInt::from(4));
    &q * &q
}

/// Rational value of the binary fraction `0.v`.
pub fn beta_of(v: &str) -> Rat {
    let mut num = BigInt::zero();
    for ch in v.chars() {
        num = (num << 1) + if ch == '1' { 1 } else { 0 };
    }
    Rat::new(num, pow2(v.len()))
}

/// Encodes a bit string. The M-cell rate defaults to the one derived from
/// eps1 = 1/4; use [`InputEncoding::with_eps1`] or
/// [`InputEncoding::with_alpha`] to change it.
pub fn encode_input(v: &str) -> Result<InputEncoding> {
    if v.is_empty() {
        return Err(Error::PromiseViolated("empty input".into()));
    }
    if !v.chars().all(|c| c == '0' || c == '1') {
        return Err(Error::PromiseViolated(format!("not a bit string: {v:?}")));
    }
    if !v.ends_with('1') {
        return Err(Error::PromiseViolated("last bit must be 1".into()));
    }
    let n = v.len();
    let eps1 = rat(1, 4);
    Ok(InputEncoding {
        v: v.to_string(),
        n,
        beta: beta_of(v),
        alpha: alpha_from_eps1(&eps1),
        marker: Rat::new(BigInt::one(), BigInt::from(n) * BigInt::from(n)),
        eps1: Some(eps1),
    })
}

impl InputEncoding {
    pub fn with_eps1(mut self, eps1: Rat) -> Self {
        self.alpha = alpha_from_eps1(&eps1);
        self.eps1 = Some(eps1);
        self
    }

    pub fn with_alpha(mut self, alpha: Rat) -> Self {
        self.alpha = alpha;
        self.eps1 = None;
        self
    }

    /// Amplitudes (sqrt(1-beta), sqrt(beta)) of the first input bit.
    pub fn track1_amplitudes(&self) -> [f64; 2] {
        let b = to_f64(&self.beta);
        [(1.0 - b).sqrt(), b.sqrt()]
    }

    /// Amplitudes (sqrt(1-n^-2), sqrt(n^-2)) of the marker bit.
    pub fn track2_amplitudes(&self) -> [f64; 2] {
        let m = to_f64(&self.marker);
        [(1.0 - m).sqrt(), m.sqrt()]
    }
}

/// Anchored (control fixed at site 0) or i.i.d. (every site may be a
/// control) product state. Same enum as the ensemble origin.
pub type EnsembleMode = Provenance;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EnsembleParams {
    pub mode: EnsembleMode,
    /// Largest site index; the lattice has `lattice + 1` sites.
    pub lattice: usize,
    /// Block scale, i.i.d. mode only.
    pub l: Option<usize>,
    pub boundary: Boundary,
    /// Record violated size constraints instead of failing.
    pub allow_violations: bool,
}

impl EnsembleParams {
    pub fn anchored(lattice: usize) -> Self {
        EnsembleParams {
            mode: Provenance::Anchored,
            lattice,
            l: None,
            boundary: Boundary::Periodic,
            allow_violations: false,
        }
    }

    pub fn iid(lattice: usize, l: usize) -> Self {
        EnsembleParams {
            mode: Provenance::Iid,
            lattice,
            l: Some(l),
            boundary: Boundary::Periodic,
            allow_violations: false,
        }
    }

    pub fn overridden(mut self) -> Self {
        self.allow_violations = true;
        self
    }

    pub fn sites(&self) -> usize {
        self.lattice + 1
    }

    fn block_scale(&self) -> Result<usize> {
        match (self.mode, self.l) {
            (Provenance::Iid, Some(l)) if l >= 2 => Ok(l),
            (Provenance::Iid, _) => Err(Error::ParamsViolation("i.i.d. mode needs l >= 2".into())),
            _ => Err(Error::ParamsViolation("block scale only exists in i.i.d. mode".into())),
        }
    }
}

/// Size thresholds derived from the input.
#[derive(Clone, Debug, PartialEq)]
pub struct Thresholds {
    /// Smallest admissible input length, 4/alpha.
    pub n0: Rat,
    /// Smallest admissible lattice: 2n^3 (anchored) or l^11 (i.i.d.).
    pub l0: BigInt,
    /// Smallest admissible block scale n^6 (i.i.d. only).
    pub block_min: Option<BigInt>,
}

pub fn thresholds(params: &EnsembleParams, enc: &InputEncoding) -> Thresholds {
    let n = BigInt::from(enc.n);
    let n0 = if enc.alpha.is_zero() {
        Rat::from_integer(BigInt::zero())
    } else {
        Rat::from_integer(BigInt::from(4)) / &enc.alpha
    };
    match (params.mode, params.l) {
        (Provenance::Iid, Some(l)) => Thresholds {
            n0,
            l0: BigInt::from(l).pow(11),
            block_min: Some(n.pow(6)),
        },
        _ => Thresholds {
            n0,
            l0: BigInt::from(2) * n.pow(3),
            block_min: None,
        },
    }
}

/// Every violated size constraint, as a readable string.
pub fn param_violations(params: &EnsembleParams, enc: &InputEncoding) -> Vec<String> {
    let th = thresholds(params, enc);
    let mut out = Vec::new();
    if !enc.alpha.is_zero() && Rat::from_integer(BigInt::from(enc.n)) < th.n0 {
        out.push(format!("n = {} < n0 = 4/alpha = {}", enc.n, th.n0));
    }
    match params.mode {
        Provenance::Anchored => {
            if BigInt::from(params.lattice) < th.l0 {
                out.push(format!("L = {} < 2n^3 = {}", params.lattice, th.l0));
            }
        }
        Provenance::Iid => match params.l {
            None => out.push("i.i.d. mode without block scale l".into()),
            Some(l) => {
                if BigInt::from(params.sites()) < th.l0 {
                    out.push(format!("L+1 = {} < l^11 = {}", params.sites(), th.l0));
                }
                if let Some(b) = &th.block_min {
                    if BigInt::from(l) < *b {
                        out.push(format!("l = {l} < n^6 = {b}"));
                    }
                }
            }
        },
    }
    out
}

fn checked_violations(params: &EnsembleParams, enc: &InputEncoding) -> Result<Vec<String>> {
    if params.mode == Provenance::Iid {
        params.block_scale()?;
    }
    let v = param_violations(params, enc);
    if !v.is_empty() && !params.allow_violations {
        return Err(Error::ParamsViolation(v.join("; ")));
    }
    Ok(v)
}

/// Single-site marginal of the product state: site values with exact
/// probabilities. Zero-probability values are left out.
#[derive(Clone, Debug)]
pub struct SiteLaw {
    pub outcomes: Vec<(Site, Rat)>,
    cumulative: Vec<f64>,
}

impl SiteLaw {
    fn new(outcomes: Vec<(Site, Rat)>) -> SiteLaw {
        let outcomes: Vec<_> = outcomes.into_iter().filter(|(_, p)| !p.is_zero()).collect();
        let mut acc = Rat::zero();
        let cumulative = outcomes
            .iter()
            .map(|(_, p)| {
                acc += p;
                to_f64(&acc)
            })
            .collect();
        SiteLaw { outcomes, cumulative }
    }

    pub fn draw(&self, rng: &mut impl Rng) -> Site {
        let u: f64 = rng.random();
        let k = self.cumulative.partition_point(|&c| c <= u);
        self.outcomes[k.min(self.outcomes.len() - 1)].0
    }
}

/// Marginal of a non-control site: A-cell `a1` or an M-cell with input bits.
pub fn cell_law(spec: &MachineSpec, enc: &InputEncoding) -> Vec<(Site, Rat)> {
    let one = Rat::one();
    let a = &one - &enc.alpha;
    let mut out = vec![(Site::Cell(spec.fresh_a()), a)];
    for b1 in [false, true] {
        for b2 in [false, true] {
            let p1 = if b1 { enc.beta.clone() } else { &one - &enc.beta };
            let p2 = if b2 { enc.marker.clone() } else { &one - &enc.marker };
            out.push((Site::Cell(spec.fresh_m(b1, b2)), &enc.alpha * p1 * p2));
        }
    }
    out
}

/// Product measure over configurations, with the optional exact
/// enumeration.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub params: EnsembleParams,
    pub encoding: InputEncoding,
    /// Law of every site; index 0 is the anchored control in anchored mode.
    pub laws: Vec<SiteLaw>,
    pub exact: Option<InitialEnsemble>,
    /// Exact probability mass dropped by the truncation.
    pub discarded: Rat,
    pub violations: Vec<String>,
}

/// Largest support that is enumerated exactly.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// Builds the dephased initial ensemble. Members whose weight is below
/// `eps_amp` are dropped from the enumeration; their mass is recorded.
pub fn build_initial_ensemble(
    spec: &MachineSpec,
    params: &EnsembleParams,
    enc: &InputEncoding,
    eps_amp: f64,
) -> Result<Ensemble> {
    let violations = checked_violations(params, enc)?;
    let ctrl = Site::Ctrl {
        mode: spec.rw_mode(),
        q: spec.initial,
    };
    let cells = cell_law(spec, enc);
    let laws: Vec<SiteLaw> = match params.mode {
        Provenance::Anchored => {
            let mut v = vec![SiteLaw::new(vec![(ctrl, Rat::one())])];
            v.extend((0..params.lattice).map(|_| SiteLaw::new(cells.clone())));
            v
        }
        Provenance::Iid => {
            let l = params.block_scale()?;
            let p0 = Rat::new(BigInt::one(), BigInt::from(l) * BigInt::from(l));
            let rest = Rat::one() - &p0;
            let mut law = vec![(ctrl, p0)];
            law.extend(cells.iter().map(|(s, p)| (*s, p * &rest)));
            (0..params.sites()).map(|_| SiteLaw::new(law.clone())).collect()
        }
    };
    let support = laws
        .iter()
        .try_fold(1u128, |acc, l| acc.checked_mul(l.outcomes.len() as u128));
    let mut ens = Ensemble {
        params: params.clone(),
        encoding: enc.clone(),
        laws,
        exact: None,
        discarded: Rat::zero(),
        violations: violations.clone(),
    };
    if support.is_some_and(|s| s <= ENUMERATION_LIMIT) {
        let (members, exact, discarded) = enumerate(&ens.laws, params.boundary, eps_amp);
        ens.discarded = discarded;
        ens.exact = Some(InitialEnsemble {
            members,
            exact: Some(exact),
            provenance: params.mode,
            meta: ens.meta(),
        });
    }
    Ok(ens)
}

type Enumerated = (Vec<(Configuration, f64)>, Vec<Rat>, Rat);

fn enumerate(laws: &[SiteLaw], boundary: Boundary, eps_amp: f64) -> Enumerated {
    let mut members = Vec::new();
    let mut exact = Vec::new();
    let mut discarded = Rat::zero();
    let mut sites = Vec::with_capacity(laws.len());
    fn rec(
        laws: &[SiteLaw],
        boundary: Boundary,
        eps: f64,
        w: Rat,
        sites: &mut Vec<Site>,
        out: &mut (Vec<(Configuration, f64)>, Vec<Rat>, Rat),
    ) {
        if sites.len() == laws.len() {
            let f = to_f64(&w);
            if f < eps {
                out.2 += w;
            } else {
                out.0.push((Configuration::new(sites.clone(), boundary), f));
                out.1.push(w);
            }
            return;
        }
        for (s, p) in &laws[sites.len()].outcomes {
            sites.push(*s);
            rec(laws, boundary, eps, &w * p, sites, out);
            sites.pop();
        }
    }
    let mut out = (Vec::new(), Vec::new(), Rat::zero());
    rec(laws, boundary, eps_amp, Rat::one(), &mut sites, &mut out);
    std::mem::swap(&mut members, &mut out.0);
    std::mem::swap(&mut exact, &mut out.1);
    std::mem::swap(&mut discarded, &mut out.2);
    (members, exact, discarded)
}

impl Ensemble {
    pub fn meta(&self) -> EnsembleMeta {
        EnsembleMeta {
            n: self.encoding.n,
            alpha: to_f64(&self.encoding.alpha),
            l: self.params.l,
            eps1: self.encoding.eps1.as_ref().map(to_f64),
            lattice: self.params.lattice,
            violations: self.violations.clone(),
        }
    }

    /// Exact total weight of the enumerated members.
    pub fn exact_total(&self) -> Option<Rat> {
        let e = self.exact.as_ref()?.exact.as_ref()?;
        Some(e.iter().fold(Rat::zero(), |a, w| a + w))
    }

    pub fn draw(&self, rng: &mut impl Rng) -> Configuration {
        let sites = self.laws.iter().map(|l| l.draw(rng)).collect();
        Configuration::new(sites, self.params.boundary)
    }

    /// Monte Carlo ensemble of `count` equally weighted draws.
    pub fn sampled(&self, count: usize, seed: u64) -> InitialEnsemble {
        let w = 1.0 / count.max(1) as f64;
        InitialEnsemble {
            members: sample_configs(self, count, seed)
                .into_iter()
                .map(|c| (c, w))
                .collect(),
            exact: None,
            provenance: self.params.mode,
            meta: self.meta(),
        }
    }

    /// Exact ensemble if it was enumerated, else `count` draws.
    pub fn members_or_sample(&self, count: usize, seed: u64) -> InitialEnsemble {
        self.exact.clone().unwrap_or_else(|| self.sampled(count, seed))
    }

    pub fn to_json(&self, spec: &MachineSpec, seed: Option<u64>) -> serde_json::Value {
        let members = self.exact.as_ref().map(|e| {
            e.members
                .iter()
                .zip(e.exact.as_ref().unwrap())
                .map(|((c, _), w)| serde_json::json!({ "weight": w.to_string(), "sites": spec.config_tags(c) }))
                .collect::<Vec<_>>()
        });
        serde_json::json!({
            "params": self.params,
            "input": self.encoding.v,
            "alpha": self.encoding.alpha.to_string(),
            "beta": self.encoding.beta.to_string(),
            "marker": self.encoding.marker.to_string(),
            "violations": self.violations,
            "discarded": self.discarded.to_string(),
            "members": members,
            "sampler": members_or_seed(self.exact.is_none(), seed),
        })
    }
}

fn members_or_seed(sampled: bool, seed: Option<u64>) -> serde_json::Value {
    if sampled {
        serde_json::json!({ "rng": "chacha8", "seed": seed, "stream": "draw index" })
    } else {
        serde_json::Value::Null
    }
}

/// Per-draw generator: draw `i` uses stream `i` of the seeded ChaCha8, so the
/// result does not depend on how draws are spread over threads.
pub fn draw_rng(seed: u64, i: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(i);
    r
}

pub fn sample_configs(ens: &Ensemble, count: usize, seed: u64) -> Vec<Configuration> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| ens.draw(&mut draw_rng(seed, i)))
        .collect()
}

/// Recovers the input from a frequency estimate `beta_prime` and the length
/// bound `n_prime`: the unique codeword with at most `n_prime` bits within
/// the open window of radius 2^-(n'+1).
pub fn recover_beta(beta_prime: &Rat, n_prime: usize) -> Result<String> {
    if n_prime == 0 {
        return Err(Error::NoValidCodeword);
    }
    let scale = Rat::from_integer(pow2(n_prime));
    let x = beta_prime * &scale;
    let k = x.round().to_integer();
    if k <= BigInt::zero() || k >= pow2(n_prime) {
        return Err(Error::NoValidCodeword);
    }
    let cand = Rat::new(k.clone(), pow2(n_prime));
    let radius = Rat::new(BigInt::one(), pow2(n_prime + 1));
    if (beta_prime - &cand).abs() >= radius {
        return Err(Error::NoValidCodeword);
    }
    let mut bits: Vec<char> = (0..n_prime)
        .rev()
        .map(|i| if (&k >> i) & BigInt::one() == BigInt::one() { '1' } else { '0' })
        .collect();
    while bits.last() == Some(&'0') {
        bits.pop();
    }
    Ok(bits.into_iter().collect())
}

/// Conditions a configuration can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "G-a")]
    RateWindow,
    #[serde(rename = "G-b")]
    Decode,
    #[serde(rename = "GB-1")]
    BlockLength,
    #[serde(rename = "GB-2")]
    BlockContent,
    #[serde(rename = "G-c")]
    BlockCount,
    #[serde(rename = "G-d")]
    BadCoverage,
}

impl Condition {
    pub fn label(self) -> &'static str {
        match self {
            Condition::RateWindow => "G-a",
            Condition::Decode => "G-b",
            Condition::BlockLength => "GB-1",
            Condition::BlockContent => "GB-2",
            Condition::BlockCount => "G-c",
            Condition::BadCoverage => "G-d",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GoodnessVerdict {
    pub good: bool,
    pub reasons: Vec<Condition>,
    /// Sites covered by bad blocks (i.i.d. mode).
    pub bad_sites: usize,
}

impl GoodnessVerdict {
    fn from_reasons(mut reasons: Vec<Condition>, bad_sites: usize) -> Self {
        reasons.sort();
        reasons.dedup();
        GoodnessVerdict {
            good: reasons.is_empty(),
            reasons,
            bad_sites,
        }
    }
}

/// M-cell rate in the open window (alpha - L^-1/3, alpha + L^-1/3).
pub fn rate_window_ok(m_cells: usize, cells: usize, alpha: f64) -> bool {
    if cells == 0 {
        return false;
    }
    let rate = m_cells as f64 / cells as f64;
    let w = (cells as f64).powf(-1.0 / 3.0);
    rate > alpha - w && rate < alpha + w
}

/// Result of decoding an M-cell stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecodeOutcome {
    /// Number of marker zeros before the first marker one.
    pub n_prime: Option<usize>,
    /// Frequency estimate, when it was computed exactly.
    #[serde(skip)]
    pub beta_prime: Option<Rat>,
    pub recovered: Option<String>,
    pub ok: bool,
}

/// Largest n' for which the 2^{4n'} track-1 bits are counted exactly.
const EXACT_COUNT_BITS: usize = 15;

/// Simulated decode: read marker bits up to the first 1 (giving n'), then
/// the frequency of 1s among the first 2^{4n'} track-1 bits. `stream` holds
/// the (b1, b2) bits of the M-cells in order; if it runs out and `tail` is
/// given, the rest of the stream is drawn from the product law.
pub fn decode_stream(
    stream: &[(bool, bool)],
    enc: &InputEncoding,
    mut tail: Option<&mut dyn RngCore>,
) -> DecodeOutcome {
    let fail = |n_prime| DecodeOutcome {
        n_prime,
        beta_prime: None,
        recovered: None,
        ok: false,
    };
    let n3 = enc.n.saturating_pow(3);
    let n_prime = match stream.iter().position(|&(_, b2)| b2) {
        Some(k) => k,
        None => match tail.as_deref_mut() {
            None => return fail(None),
            Some(rng) => {
                let p = to_f64(&enc.marker);
                let extra = Geometric::new(p).map(|g| g.sample(rng)).unwrap_or(0);
                stream.len().saturating_add(extra as usize)
            }
        },
    };
    if n_prime > n3 || n_prime == 0 {
        return fail(Some(n_prime));
    }
    let beta = to_f64(&enc.beta);
    if n_prime <= EXACT_COUNT_BITS {
        let need: u64 = 1u64 << (4 * n_prime);
        let have = (stream.len() as u64).min(need);
        let mut ones: u64 = stream[..have as usize].iter().filter(|(b1, _)| *b1).count() as u64;
        if have < need {
            match tail.as_deref_mut() {
                None => return fail(Some(n_prime)),
                Some(rng) => {
                    ones += Binomial::new(need - have, beta).map(|b| b.sample(rng)).unwrap_or(0);
                }
            }
        }
        let bp = Rat::new(BigInt::from(ones), BigInt::from(need));
        let rec = recover_beta(&bp, n_prime).ok();
        let ok = rec.as_deref() == Some(enc.v.as_str());
        return DecodeOutcome {
            n_prime: Some(n_prime),
            beta_prime: Some(bp),
            recovered: rec,
            ok,
        };
    }
    // 2^{4n'} bits: the lattice part is negligible, the count is normal.
    let Some(rng) = tail else {
        return fail(Some(n_prime));
    };
    let z: f64 = Normal::new(0.0, 1.0).unwrap().sample(rng);
    let sd_scaled = (beta * (1.0 - beta)).sqrt();
    // |beta' - beta| < 2^-(n'+1)  <=>  |z| sd 2^{-2n'} < 2^-(n'+1)
    let ok_window = z.abs() * sd_scaled < 2f64.powi(n_prime as i32 - 1);
    let ok = ok_window && n_prime >= enc.n;
    DecodeOutcome {
        n_prime: Some(n_prime),
        beta_prime: None,
        recovered: ok.then(|| enc.v.clone()),
        ok,
    }
}

fn m_stream(cells: impl Iterator<Item = Site>) -> (usize, usize, Vec<(bool, bool)>) {
    let mut n_cells = 0;
    let mut stream = Vec::new();
    for s in cells {
        if let Site::Cell(c) = s {
            n_cells += 1;
            if let Cell::M { b1, b2, .. } = c {
                stream.push((b1, b2));
            }
        }
    }
    (n_cells, stream.len(), stream)
}

/// G-a and G-b on one anchored tape (the sites after the control).
fn tape_conditions(
    sites: &[Site],
    enc: &InputEncoding,
    tail: Option<&mut dyn RngCore>,
) -> Vec<Condition> {
    let (cells, m, stream) = m_stream(sites.iter().copied());
    let mut out = Vec::new();
    if !rate_window_ok(m, cells, to_f64(&enc.alpha)) {
        out.push(Condition::RateWindow);
    }
    if !decode_stream(&stream, enc, tail).ok {
        out.push(Condition::Decode);
    }
    out
}

fn reborrow<'a>(t: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match t {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// K* = (1 - l^-2) l^-2 (L+1), rounded down.
pub fn block_target(l: usize, sites: usize) -> usize {
    let l2 = (l * l) as f64;
    ((1.0 - 1.0 / l2) / l2 * sites as f64).floor() as usize
}

/// Checks the good-configuration conditions. Anchored: G-a and G-b on the
/// tape. I.i.d.: the configuration is good when G-c and G-d hold and the
/// blocks failing GB-1/GB-2 cover at most 3(L+1)/n sites.
pub fn classify_good(
    config: &Configuration,
    params: &EnsembleParams,
    enc: &InputEncoding,
    mut tail: Option<&mut dyn RngCore>,
) -> GoodnessVerdict {
    match params.mode {
        Provenance::Anchored => {
            let start = config.control_positions().first().map_or(0, |p| p + 1);
            let mut rotated: Vec<Site> = config.sites[start..].to_vec();
            if config.boundary == Boundary::Periodic {
                rotated.extend_from_slice(&config.sites[..start.saturating_sub(1)]);
            }
            GoodnessVerdict::from_reasons(tape_conditions(&rotated, enc, tail), 0)
        }
        Provenance::Iid => {
            let l = params.l.unwrap_or(2);
            let n = config.len();
            let ctrls = config.control_positions();
            let mut reasons = Vec::new();
            // Blocks that start at a control site.
            let mut bad_sites = match (ctrls.first(), config.boundary) {
                (None, _) => n,
                (Some(&f), Boundary::Open) => f,
                _ => 0,
            };
            let mut bad_kinds = Vec::new();
            let mut block_bad = Vec::new();
            for (_, b) in config.blocks() {
                let mut why = Vec::new();
                if b.len() < l || b.len() > l.pow(4) {
                    why.push(Condition::BlockLength);
                }
                if !tape_conditions(&b.sites[1..], enc, reborrow(&mut tail)).is_empty() {
                    why.push(Condition::BlockContent);
                }
                if !why.is_empty() {
                    bad_sites += b.len();
                    bad_kinds.extend(why.iter().copied());
                }
                block_bad.push(!why.is_empty());
            }
            let limit = 3.0 * n as f64 / enc.n as f64;
            if bad_sites as f64 > limit {
                reasons.extend(bad_kinds);
            }
            // G-c / G-d use blocks that end at a control site, counted from
            // site 0.
            let k_star = block_target(l, n);
            let mut ends = ctrls.iter().map(|&p| p + 1);
            let mut prev = 0;
            let mut covered = 0;
            let mut bad_cov = 0;
            for _ in 0..k_star {
                let Some(e) = ends.next() else { break };
                let len = e - prev;
                let seg = &config.sites[prev..e - 1];
                let bad = len < l
                    || len > l.pow(4)
                    || !tape_conditions(seg, enc, reborrow(&mut tail)).is_empty();
                covered += len;
                if bad {
                    bad_cov += len;
                }
                prev = e;
            }
            let l2 = (l * l) as f64;
            if (covered as f64) < (1.0 - 2.0 / l2) * n as f64 {
                reasons.push(Condition::BlockCount);
            }
            if bad_cov as f64 > (2.0 * l2 / enc.n as f64 + 3.0) * k_star as f64 {
                reasons.push(Condition::BadCoverage);
            }
            GoodnessVerdict::from_reasons(reasons, bad_sites)
        }
    }
}

/// Closed-form bound on the bad mass: 2/n (anchored) or 5 l^10 / L (i.i.d.).
pub fn good_rate_bounds(params: &EnsembleParams, enc: &InputEncoding) -> Result<Rat> {
    checked_violations(params, enc)?;
    match params.mode {
        Provenance::Anchored => Ok(rat(2, enc.n as i64)),
        Provenance::Iid => {
            let l = params.block_scale()?;
            if params.lattice == 0 {
                return Err(Error::ParamsViolation("L = 0".into()));
            }
            Ok(Rat::new(
                BigInt::from(5) * BigInt::from(l).pow(10),
                BigInt::from(params.lattice),
            ))
        }
    }
}

/// Length L^[k]+1 of one i.i.d. block: geometric on {1, 2, ...} with
/// success probability l^-2.
pub fn sample_block_length(rng: &mut impl Rng, l: usize) -> u64 {
    let p = 1.0 / (l * l) as f64;
    1 + Geometric::new(p).unwrap().sample(rng)
}

/// Monte Carlo estimate of the bad rate.
#[derive(Clone, Debug, Serialize)]
pub struct BadRateEstimate {
    pub samples: usize,
    pub bad: usize,
    pub rate: f64,
    pub bound: f64,
    /// Failures per condition (a sample can fail several).
    pub by_condition: Vec<(Condition, usize)>,
}

/// Probability that a block of `len` sites passes G-a: exact binomial up to
/// 4096 cells, Hoeffding's bound 1 - 2exp(-2 cells^(1/3)) beyond.
pub fn rate_pass_probability(len: usize, enc: &InputEncoding) -> f64 {
    let cells = len.saturating_sub(1);
    let alpha = to_f64(&enc.alpha);
    if cells == 0 {
        return 0.0;
    }
    if cells > 4096 {
        return (1.0 - 2.0 * (-2.0 * (cells as f64).cbrt()).exp()).max(0.0);
    }
    let mut pa = 0.0;
    for k in 0..=cells {
        if !rate_window_ok(k, cells, alpha) {
            continue;
        }
        pa += if alpha == 0.0 {
            (k == 0) as u8 as f64
        } else {
            (ln_choose(cells, k) + k as f64 * alpha.ln() + (cells - k) as f64 * (1.0 - alpha).ln()).exp()
        };
    }
    pa.min(1.0)
}

/// Lower bound on the probability that the decode succeeds: the marker
/// count lands in n..n^3 and Chebyshev holds the frequency estimate inside
/// its window.
pub fn decode_pass_probability(enc: &InputEncoding) -> f64 {
    let p = to_f64(&enc.marker);
    let b = to_f64(&enc.beta);
    let mut pb = 0.0;
    let hi = enc.n.saturating_pow(3).min(10_000);
    for np in enc.n.max(1)..=hi {
        let pn = (1.0 - p).powi(np as i32) * p;
        let cheb = (b * (1.0 - b) * 2f64.powi(2 * np as i32 + 2 - 4 * np as i32)).min(1.0);
        pb += pn * (1.0 - cheb);
    }
    pb.min(1.0)
}

fn ln_choose(n: usize, k: usize) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Mean and variance of W = (block length) * [block is bad] for one
/// i.i.d. block.
pub fn bad_block_moments(l: usize, enc: &InputEncoding) -> (f64, f64) {
    let p = 1.0 / (l * l) as f64;
    let hi = l.pow(4);
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    let pb = decode_pass_probability(enc);
    let mut m = 1usize;
    let mut pm = p;
    loop {
        let bad = if m < l || m > hi {
            1.0
        } else {
            1.0 - rate_pass_probability(m, enc) * pb
        };
        let x = m as f64;
        m1 += pm * x * bad;
        m2 += pm * x * x * bad;
        if m > hi && pm * x * x < 1e-18 {
            break;
        }
        m += 1;
        pm *= 1.0 - p;
    }
    (m1, m2 - m1 * m1)
}

/// Bad-rate Monte Carlo on the size statistics alone. Anchored: the M-cell
/// count is binomial and the decode stream is drawn from its law. I.i.d.:
/// the covered length of the first K* blocks is negative binomial
/// (Gamma-Poisson) and the bad coverage among them is normal with the exact
/// per-block moments.
pub fn estimate_bad_rate(
    params: &EnsembleParams,
    enc: &InputEncoding,
    samples: usize,
    seed: u64,
) -> Result<BadRateEstimate> {
    let bound = to_f64(&good_rate_bounds(params, enc)?);
    let results: Vec<Vec<Condition>> = match params.mode {
        Provenance::Anchored => {
            let l = params.lattice;
            let alpha = to_f64(&enc.alpha);
            (0..samples as u64)
                .into_par_iter()
                .map(|i| {
                    let mut rng = draw_rng(seed, i);
                    let m = Binomial::new(l as u64, alpha).unwrap().sample(&mut rng) as usize;
                    let mut out = Vec::new();
                    if !rate_window_ok(m, l, alpha) {
                        out.push(Condition::RateWindow);
                    }
                    if !decode_stream(&[], enc, Some(&mut rng as &mut dyn RngCore)).ok {
                        out.push(Condition::Decode);
                    }
                    out
                })
                .collect()
        }
        Provenance::Iid => {
            let l = params.block_scale()?;
            let n = params.sites();
            let k_star = block_target(l, n);
            let p = 1.0 / (l * l) as f64;
            let (mw, vw) = bad_block_moments(l, enc);
            let l2 = (l * l) as f64;
            let lower = (1.0 - 2.0 / l2) * n as f64;
            let cov_limit = (2.0 * l2 / enc.n as f64 + 3.0) * k_star as f64;
            (0..samples as u64)
                .into_par_iter()
                .map(|i| {
                    let mut rng = draw_rng(seed, i);
                    let mut out = Vec::new();
                    let failures = if k_star == 0 {
                        0.0
                    } else {
                        let lam = Gamma::new(k_star as f64, (1.0 - p) / p).unwrap().sample(&mut rng);
                        if lam > 0.0 {
                            Poisson::new(lam).unwrap().sample(&mut rng)
                        } else {
                            0.0
                        }
                    };
                    let covered = k_star as f64 + failures;
                    if covered < lower || covered > n as f64 {
                        out.push(Condition::BlockCount);
                    }
                    let sd = (vw * k_star as f64).sqrt();
                    let z: f64 = Normal::new(0.0, 1.0).unwrap().sample(&mut rng);
                    let bad_cov = mw * k_star as f64 + sd * z;
                    if bad_cov > cov_limit {
                        out.push(Condition::BadCoverage);
                    }
                    out
                })
                .collect()
        }
    };
    let bad = results.iter().filter(|r| !r.is_empty()).count();
    let mut by: std::collections::BTreeMap<Condition, usize> = Default::default();
    for r in &results {
        for c in r {
            *by.entry(*c).or_default() += 1;
        }
    }
    Ok(BadRateEstimate {
        samples,
        bad,
        rate: bad as f64 / samples.max(1) as f64,
        bound,
        by_condition: by.into_iter().collect(),
    })
}

/// Output of the rotation decoder.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseDecode {
    pub len: usize,
    pub v: String,
    /// Qubit (cos, sin) at every copy point, in loop order.
    pub copies: Vec<[f64; 2]>,
    /// Largest distance of a copied qubit from the nearest signed basis
    /// state.
    pub max_deviation: f64,
}

/// Qubit angle in units of pi / 2^(d+1), taken mod 2pi. The rotation R_theta
/// turns the qubit vector by theta/2.
struct Qubit {
    units: u128,
    modulus: u128,
    d: u32,
}

impl Qubit {
    fn rotate(&mut self, delta: i128) {
        let m = self.modulus as i128;
        self.units = ((self.units as i128 + delta).rem_euclid(m)) as u128;
    }
    fn vector(&self) -> [f64; 2] {
        let theta = self.units as f64 * PI / 2f64.powi(self.d as i32 + 1);
        [theta.cos(), theta.sin()]
    }
    /// Which basis state (0 or 1) the qubit is at, up to sign, and the
    /// distance to it.
    fn nearest(&self) -> (usize, f64) {
        let [c, s] = self.vector();
        let d0 = (c.abs() - 1.0).hypot(s);
        let d1 = c.hypot(s.abs() - 1.0);
        if d0 <= d1 {
            (0, d0)
        } else {
            (1, d1)
        }
    }
}

/// Single-qubit decoder: finds |v| from the first k1 (counting down from
/// n') at which 2^k1 rotations by pi*beta take zeta_0 to zeta_1, then reads
/// the lower bits with correction rotations by -pi 2^-|v|.
pub fn phase_decode(beta: &Rat, n_prime: usize) -> Result<PhaseDecode> {
    let promise = |m: String| Error::OraclePromiseViolated(m);
    if !beta.is_positive() || *beta >= Rat::one() {
        return Err(promise("rotation angle outside (0, pi)".into()));
    }
    // beta = k / 2^d with k odd
    let den = beta.denom().clone();
    let d = den.bits() as u32 - 1;
    if den != pow2(d as usize) || d > 60 {
        return Err(promise("angle is not a short dyadic multiple of pi".into()));
    }
    let k = beta.numer().to_u128().ok_or_else(|| promise("angle numerator".into()))?;
    let modulus = 1u128 << (d + 2);
    let mut q = Qubit { units: 0, modulus, d };
    let step_beta = k as i128;
    let mut copies = Vec::new();
    let mut max_dev: f64 = 0.0;
    let mut len: Option<usize> = None;
    let mut bits: Vec<u8> = Vec::new(); // bits[k'] for k' = 1..=|v|, index k'-1
    for k1 in (1..=n_prime).rev() {
        match len {
            None => {
                let reps = 1u128.checked_shl(k1 as u32).ok_or_else(|| promise("n' too large".into()))?;
                q.rotate((step_beta as u128 * (reps % modulus) % modulus) as i128);
                let (b, dev) = q.nearest();
                copies.push(q.vector());
                max_dev = max_dev.max(dev);
                if dev > 1e-9 {
                    return Err(promise(format!("qubit in superposition at k1 = {k1}")));
                }
                if b == 1 {
                    len = Some(k1);
                    bits = vec![0; k1];
                    bits[k1 - 1] = 1;
                }
                q.units = 0;
            }
            Some(nv) => {
                if k1 >= nv {
                    continue;
                }
                // correction count sum_{k'=k1+1}^{|v|} 2^{|v|-k'} beta_k'
                let mut s: u128 = 0;
                for kp in (k1 + 1)..=nv {
                    s += (bits[kp - 1] as u128) << (nv - kp);
                }
                let corr = 1i128 << (d as usize - nv);
                for _ in 0..(1u128 << k1) {
                    q.rotate(step_beta);
                    for _ in 0..s {
                        q.rotate(-corr);
                    }
                }
                let (b, dev) = q.nearest();
                copies.push(q.vector());
                max_dev = max_dev.max(dev);
                if dev > 1e-9 {
                    return Err(promise(format!("qubit in superposition at k1 = {k1}")));
                }
                bits[k1 - 1] = b as u8;
                q.units = 0;
            }
        }
    }
    let Some(nv) = len else {
        return Err(promise("length was never detected; is n' < |v|?".into()));
    };
    Ok(PhaseDecode {
        len: nv,
        v: bits.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect(),
        copies,
        max_deviation: max_dev,
    })
}
