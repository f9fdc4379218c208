//! Command-line front end. `run` parses arguments, dispatches one verb and
//! writes its artifact; every artifact carries the resolved configuration
//! and the tool version.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use hca_core::dynamics::dense::{DenseSystem, DEFAULT_DIM_LIMIT};
use hca_core::dynamics::{
    e_index, longterm_site_average, site_average_at, trace_distance, CMatrix, InitialEnsemble,
    MemberOrbits, SingleSiteState,
};
use hca_core::encoding::{
    beta_of, encode_input, estimate_bad_rate, param_violations, phase_decode, EnsembleParams, Rat,
};
use hca_core::hca::{compile, gap_bound_for, min_distinct_gap, spectrum_for};
use hca_core::rtm::json::to_json;
use hca_core::rtm::stats::count_symbol;
use hca_core::verifier::{
    decide_finite_with, prepare, semi_decide, DecisionInstance, EnsembleSource, MachineRef, SemiOutcome,
    Tape,
};
use hca_core::{invert, run_orbit, validate_reversible, Boundary, Error, Machine, MachineSpec, Terminal, Variant};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Exit codes: 0 verdict/artifact produced, 2 input error, 3 resource
/// guard, 4 internal invariant failure.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn input(msg: impl Into<String>) -> Self {
        CliError { code: 2, message: msg.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::DimensionGuard { .. } | Error::SymbolBudgetExceeded { .. } | Error::TruncatedOrbit => 3,
            Error::PrecisionViolation(_) | Error::ToleranceViolation(_) | Error::InvalidState(_) => 4,
            _ => 2,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::input(format!("i/o error: {e}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantArg {
    OneWay,
    TwoWay,
    Iid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryArg {
    Periodic,
    Open,
}

impl From<BoundaryArg> for Boundary {
    fn from(b: BoundaryArg) -> Boundary {
        match b {
            BoundaryArg::Periodic => Boundary::Periodic,
            BoundaryArg::Open => Boundary::Open,
        }
    }
}

/// The resolved parameter record of one invocation.
#[derive(Parser, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[command(name = "hca", version, about = "Hamiltonian cell automata experiments")]
pub struct ExperimentConfig {
    #[command(subcommand)]
    pub command: Command,
    #[arg(long, global = true, value_enum, default_value = "json")]
    pub format: Format,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Cap on worker threads. Not recorded in artifacts: results do not
    /// depend on it.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub threads: Option<usize>,
    /// Substitute this T0 for the formula cut-off (decide).
    #[arg(long, global = true)]
    pub t0_override: Option<f64>,
    /// Accept ensemble parameters that break the size constraints.
    #[arg(long, global = true)]
    pub override_params: bool,
    /// Write the artifact here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config json")
    }

    pub fn from_json(v: &Value) -> Result<Self, CliError> {
        serde_json::from_value(v.clone()).map_err(|e| CliError::input(format!("config json: {e}")))
    }
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineArgs {
    /// Built-in name (halt_now, ping_pong, counter_<k>, shuttle) or a path
    /// to a machine JSON file.
    #[arg(long)]
    pub machine: String,
    #[arg(long, value_enum, default_value = "one-way")]
    pub variant: VariantArg,
    /// Use the machine as written, without the staged wrapper.
    #[arg(long)]
    pub bare: bool,
    #[arg(long, default_value_t = 0)]
    pub pad: usize,
}

impl MachineArgs {
    fn reference(&self) -> MachineRef {
        if self.machine.ends_with(".json") || self.machine.contains('/') {
            return MachineRef::File(self.machine.clone());
        }
        let variant = if self.bare {
            Variant::Bare
        } else {
            match self.variant {
                VariantArg::OneWay => Variant::OneWay,
                VariantArg::TwoWay => Variant::TwoWay,
                VariantArg::Iid => Variant::Iid,
            }
        };
        MachineRef::Builtin {
            name: self.machine.clone(),
            variant,
            pad: self.pad,
        }
    }

    fn resolve(&self) -> Result<MachineSpec, CliError> {
        let r = self.reference();
        if let MachineRef::File(p) = &r {
            if !Path::new(p).exists() {
                return Err(CliError::input(format!("machine spec not found: {p}")));
            }
        }
        Ok(r.resolve(None)?)
    }
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleArgs {
    /// Number of tape cells L (the lattice has L + 1 sites).
    #[arg(long)]
    pub lattice: usize,
    /// Comma-separated cell tags placed after the control; the rest of
    /// the tape is fresh A-cells.
    #[arg(long, value_delimiter = ',', conflicts_with = "v")]
    pub tape: Vec<String>,
    /// Input bit string for the product ensemble.
    #[arg(long)]
    pub v: Option<String>,
    /// M-cell rate, as a rational like 1/64. Defaults to the encoding's.
    #[arg(long, requires = "v")]
    pub alpha: Option<String>,
    /// Block scale l (i.i.d. ensemble).
    #[arg(long, requires = "v")]
    pub block_scale: Option<usize>,
    /// Draw this many members instead of enumerating the support.
    #[arg(long, requires = "v")]
    pub samples: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub eps_amp: f64,
    #[arg(long, value_enum, default_value = "periodic")]
    pub boundary: BoundaryArg,
}

impl EnsembleArgs {
    fn source(&self, seed: u64) -> Result<EnsembleSource, CliError> {
        Ok(match &self.v {
            None => EnsembleSource::Tapes(vec![Tape {
                cells: self.tape.clone(),
                weight: 1.0,
            }]),
            Some(v) => {
                let enc = encode_input(v)?;
                let alpha = self.alpha.clone().unwrap_or_else(|| enc.alpha.to_string());
                EnsembleSource::Product {
                    v: v.clone(),
                    alpha,
                    l: self.block_scale,
                    eps_amp: self.eps_amp,
                    samples: self.samples,
                    seed,
                }
            }
        })
    }

    /// Size-constraint violations of a product ensemble (none for tapes).
    fn violations(&self) -> Result<Vec<String>, CliError> {
        let Some(v) = &self.v else { return Ok(Vec::new()) };
        let mut enc = encode_input(v)?;
        if let Some(a) = &self.alpha {
            enc = enc.with_alpha(parse_rat(a)?);
        }
        let params = match self.block_scale {
            Some(l) => EnsembleParams::iid(self.lattice, l),
            None => EnsembleParams::anchored(self.lattice),
        };
        Ok(param_violations(&params, &enc))
    }

    fn build(&self, spec: &MachineSpec, cfg: &ExperimentConfig) -> Result<InitialEnsemble, CliError> {
        let v = self.violations()?;
        if !v.is_empty() && !cfg.override_params {
            return Err(CliError::input(format!(
                "parameter constraint violated: {} (pass --override-params to continue)",
                v.join("; ")
            )));
        }
        Ok(self.source(cfg.seed)?.build(spec, self.lattice, self.boundary.into())?)
    }
}

#[derive(Subcommand, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "verb")]
pub enum Command {
    /// Run one orbit and report its length, terminal kind and A-symbol counts.
    Orbit {
        #[command(flatten)]
        #[serde(flatten)]
        machine: MachineArgs,
        #[command(flatten)]
        #[serde(flatten)]
        ensemble: EnsembleArgs,
        #[arg(long, default_value_t = 1_000_000)]
        max_steps: usize,
    },
    /// Space-averaged single-site state on a time grid.
    Evolve {
        #[command(flatten)]
        #[serde(flatten)]
        machine: MachineArgs,
        #[command(flatten)]
        #[serde(flatten)]
        ensemble: EnsembleArgs,
        /// Explicit comma-separated times; overrides the uniform grid.
        #[arg(long, value_delimiter = ',')]
        times: Vec<f64>,
        #[arg(long, default_value_t = 10.0)]
        t_max: f64,
        #[arg(long, default_value_t = 11)]
        t_points: usize,
        #[arg(long, default_value_t = 1_000_000)]
        max_steps: usize,
        /// Use the dense reachable-set exponential instead of orbit formulas.
        #[arg(long)]
        dense: bool,
        #[arg(long, default_value_t = DEFAULT_DIM_LIMIT)]
        dim_limit: usize,
    },
    /// Infinite-time space average.
    Timeavg {
        #[command(flatten)]
        #[serde(flatten)]
        machine: MachineArgs,
        #[command(flatten)]
        #[serde(flatten)]
        ensemble: EnsembleArgs,
        /// Exact spectral-projection law instead of the streamed uniform law.
        #[arg(long)]
        exact: bool,
        #[arg(long, default_value_t = 100_000_000)]
        max_steps: usize,
    },
    /// Run the finite decision procedure (or the semi-decision sweep).
    Decide {
        /// Instance JSON file.
        #[arg(long)]
        instance: PathBuf,
        /// Sweep lattice sizes from lattice_min instead of deciding at one size.
        #[arg(long)]
        semi: bool,
        /// Step budget for --semi.
        #[arg(long, default_value_t = 10_000)]
        budget: usize,
        /// Keep sweeping the grid after the check fires.
        #[arg(long)]
        full_sweep: bool,
    },
    /// Monte Carlo estimate of the bad-configuration rate.
    SampleGood {
        /// Input bit string.
        #[arg(long)]
        v: String,
        /// M-cell rate as a rational; defaults to the encoding's.
        #[arg(long)]
        alpha: Option<String>,
        #[arg(long)]
        lattice: usize,
        /// Block scale l; selects the i.i.d. ensemble.
        #[arg(long)]
        block_scale: Option<usize>,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
    /// Orbit spectrum gap against the 8/(J+1)^2 floor.
    Gap {
        /// Orbit length; alternatively give a machine and tape.
        #[arg(long, conflicts_with = "machine")]
        len: Option<usize>,
        /// With --len: a cycle instead of a path.
        #[arg(long)]
        cycle: bool,
        #[arg(long)]
        machine: Option<String>,
        #[arg(long, value_enum, default_value = "one-way")]
        variant: VariantArg,
        #[arg(long)]
        bare: bool,
        #[arg(long, default_value_t = 6)]
        lattice: usize,
        #[arg(long, value_delimiter = ',')]
        tape: Vec<String>,
        #[arg(long, default_value_t = 1_000_000)]
        max_steps: usize,
    },
    /// Recover (|v|, v) from β with the rotation decoder.
    PhaseDecode {
        /// β as a rational (e.g. 5/8); or give --v.
        #[arg(long, conflicts_with = "v")]
        beta: Option<String>,
        /// Bit string whose encoded β is decoded.
        #[arg(long)]
        v: Option<String>,
        /// Upper bound on |v|; the decoder counts down from here.
        #[arg(long)]
        n_prime: usize,
    },
    /// Build a machine and write its JSON description.
    BuildMachine {
        #[command(flatten)]
        #[serde(flatten)]
        machine: MachineArgs,
        /// Emit the inverse machine.
        #[arg(long)]
        inverse: bool,
    },
}

fn parse_rat(s: &str) -> Result<Rat, CliError> {
    s.trim()
        .parse::<Rat>()
        .map_err(|_| CliError::input(format!("{s:?} is not a rational number")))
}

fn terminal_kind(t: Terminal) -> &'static str {
    match t {
        Terminal::DeadEnd(_) => "dead_end",
        Terminal::Cycle(_) => "cycle",
        Terminal::Truncated => "truncated",
    }
}

fn meta(cfg: &ExperimentConfig) -> Value {
    json!({ "tool": "hca", "version": VERSION, "config": cfg.to_json() })
}

/// CSV with `#` comment lines for the version and config.
fn csv_doc(cfg: &ExperimentConfig, notes: &[String], header: &[String], rows: &[Vec<String>]) -> Result<String, CliError> {
    let mut out = format!("# hca {VERSION}\n# config: {}\n", cfg.to_json());
    for n in notes {
        out.push_str(&format!("# {n}\n"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError { code: 4, message: format!("csv: {e}") };
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError { code: 4, message: format!("csv: {e}") })?;
    out.push_str(&String::from_utf8(bytes).expect("utf8 csv"));
    Ok(out)
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json");
    s.push('\n');
    s
}

fn cmd_orbit(cfg: &ExperimentConfig, machine: &MachineArgs, ens: &EnsembleArgs, max_steps: usize) -> Result<String, CliError> {
    if ens.v.is_some() {
        return Err(CliError::input("orbit takes a --tape, not a product ensemble"));
    }
    let spec = machine.resolve()?;
    let init = ens.build(&spec, cfg)?;
    let x = &init.members[0].0;
    let m = Machine::new(spec.clone())?;
    let orbit = run_orbit(&m, x, max_steps)?;
    let syms: Vec<(String, u16)> = spec
        .a_symbols
        .iter()
        .enumerate()
        .map(|(k, s)| (s.clone(), k as u16))
        .collect();
    let counts = |c: &hca_core::Configuration| -> Vec<usize> { syms.iter().map(|(_, k)| count_symbol(c, *k)).collect() };
    let kind = terminal_kind(orbit.terminal);
    match cfg.format {
        Format::Json => {
            // JSON lines: a header record, then one record per configuration
            let mut out = String::new();
            let mut head = meta(cfg);
            head["record"] = json!("meta");
            head["terminal"] = json!(kind);
            head["len"] = json!(orbit.len());
            head["symbols"] = json!(syms.iter().map(|(s, _)| s).collect::<Vec<_>>());
            out.push_str(&head.to_string());
            out.push('\n');
            for (j, c) in orbit.states.iter().enumerate() {
                let rec = json!({
                    "record": "step",
                    "j": j + 1,
                    "sites": spec.config_tags(c),
                    "counts": counts(c),
                });
                out.push_str(&rec.to_string());
                out.push('\n');
            }
            Ok(out)
        }
        Format::Csv => {
            let mut header = vec!["j".to_string()];
            header.extend(syms.iter().map(|(s, _)| format!("N_{s}")));
            let rows: Vec<Vec<String>> = orbit
                .states
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    let mut r = vec![(j + 1).to_string()];
                    r.extend(counts(c).iter().map(|n| n.to_string()));
                    r
                })
                .collect();
            csv_doc(cfg, &[format!("terminal: {kind}"), format!("len: {}", orbit.len())], &header, &rows)
        }
    }
}

fn reference_states(spec: &MachineSpec) -> Result<(SingleSiteState, SingleSiteState), CliError> {
    let d = spec.site_dim();
    let (e1, e2) = match (e_index(spec, 1), e_index(spec, 2)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(CliError::input("machine has no a1/a2 symbols to compare against")),
    };
    let one = SingleSiteState::basis(d, e1);
    let mix = SingleSiteState::mix(&[(0.5, &one), (0.5, &SingleSiteState::basis(d, e2))]);
    Ok((one, mix))
}

fn complex_matrix(m: &CMatrix) -> Value {
    json!((0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| [m[(r, c)].re, m[(r, c)].im]).collect::<Vec<_>>())
        .collect::<Vec<_>>())
}

fn site_labels(spec: &MachineSpec) -> Vec<String> {
    (0..spec.site_dim()).map(|k| spec.site_tag(spec.site_from_index(k))).collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_evolve(
    cfg: &ExperimentConfig,
    machine: &MachineArgs,
    ens: &EnsembleArgs,
    times: &[f64],
    t_max: f64,
    t_points: usize,
    max_steps: usize,
    dense: bool,
    dim_limit: usize,
) -> Result<String, CliError> {
    let spec = machine.resolve()?;
    let (one, mix) = reference_states(&spec)?;
    let init = ens.build(&spec, cfg)?;
    let grid: Vec<f64> = if !times.is_empty() {
        times.to_vec()
    } else if t_points <= 1 {
        vec![0.0]
    } else {
        (0..t_points).map(|i| t_max * i as f64 / (t_points - 1) as f64).collect()
    };
    if grid.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(CliError::input("times must be finite and non-negative"));
    }
    let d = spec.site_dim();
    let states: Vec<SingleSiteState> = if dense {
        let h = compile(&spec, ens.boundary.into())?;
        let seeds: Vec<_> = init.members.iter().map(|(x, _)| x.clone()).collect();
        let sys = DenseSystem::new(&h, &seeds, dim_limit)?;
        let starts: Vec<_> = init
            .members
            .iter()
            .map(|(x, w)| (sys.basis_vector(x).expect("seed in basis"), *w))
            .collect();
        grid.iter()
            .map(|&t| {
                let mut m = CMatrix::zeros(d, d);
                for (psi, w) in &starts {
                    m += sys.site_average_pure(&sys.evolve(psi, t), d).m * num_complex_scale(*w);
                }
                SingleSiteState { m }
            })
            .collect()
    } else {
        let m = Machine::new(spec.clone())?;
        grid.iter()
            .map(|&t| site_average_at(&m, &init, t, max_steps))
            .collect::<hca_core::Result<_>>()?
    };
    match cfg.format {
        Format::Json => {
            let rows: Vec<Value> = grid
                .iter()
                .zip(&states)
                .map(|(t, s)| {
                    json!({
                        "t": t,
                        "dist_e1": trace_distance(s, &one),
                        "dist_mix": trace_distance(s, &mix),
                        "rho": complex_matrix(&s.m),
                    })
                })
                .collect();
            let mut doc = meta(cfg);
            doc["trace_norm"] = json!("unhalved: sum of |eigenvalues|");
            doc["labels"] = json!(site_labels(&spec));
            doc["members"] = json!(init.members.len());
            doc["rows"] = json!(rows);
            Ok(pretty(&doc))
        }
        Format::Csv => {
            // only entries that are nonzero somewhere on the grid get a column
            let labels = site_labels(&spec);
            let mut cols = Vec::new();
            for r in 0..d {
                for c in 0..d {
                    if states.iter().any(|s| s.m[(r, c)].norm() > 0.0) {
                        cols.push((r, c));
                    }
                }
            }
            let mut header = vec!["t".to_string(), "dist_e1".into(), "dist_mix".into()];
            for &(r, c) in &cols {
                header.push(format!("re[{}|{}]", labels[r], labels[c]));
                header.push(format!("im[{}|{}]", labels[r], labels[c]));
            }
            let rows: Vec<Vec<String>> = grid
                .iter()
                .zip(&states)
                .map(|(t, s)| {
                    let mut row = vec![
                        t.to_string(),
                        trace_distance(s, &one).to_string(),
                        trace_distance(s, &mix).to_string(),
                    ];
                    for &(r, c) in &cols {
                        row.push(s.m[(r, c)].re.to_string());
                        row.push(s.m[(r, c)].im.to_string());
                    }
                    row
                })
                .collect();
            let notes = [
                "trace distances use the unhalved norm sum |eig|".to_string(),
                "dist_mix is the distance to (|e1><e1| + |e2><e2|)/2".to_string(),
            ];
            csv_doc(cfg, &notes, &header, &rows)
        }
    }
}

fn num_complex_scale(w: f64) -> num_complex::Complex64 {
    num_complex::Complex64::new(w, 0.0)
}

fn cmd_timeavg(cfg: &ExperimentConfig, machine: &MachineArgs, ens: &EnsembleArgs, exact: bool, max_steps: usize) -> Result<String, CliError> {
    let spec = machine.resolve()?;
    let (one, mix) = reference_states(&spec)?;
    let init = ens.build(&spec, cfg)?;
    let m = Machine::new(spec.clone())?;
    let d = spec.site_dim();
    let (state, radius, min_len) = if exact {
        let mut acc = CMatrix::zeros(d, d);
        for (x, w) in &init.members {
            MemberOrbits::new(&m, x, max_steps)?.add_longterm_exact(*w, &mut acc);
        }
        (SingleSiteState { m: acc }, 0.0, None)
    } else {
        let lt = longterm_site_average(&m, &init, max_steps)?;
        (lt.state(), lt.radius, Some(lt.min_len))
    };
    let labels = site_labels(&spec);
    let diag: Vec<f64> = (0..d).map(|k| state.m[(k, k)].re).collect();
    let de1 = trace_distance(&state, &one);
    let dmix = trace_distance(&state, &mix);
    match cfg.format {
        Format::Json => {
            let mut doc = meta(cfg);
            doc["law"] = json!(if exact { "spectral_projection" } else { "uniform" });
            doc["radius"] = json!(radius);
            doc["min_orbit_len"] = json!(min_len);
            doc["dist_e1"] = json!(de1);
            doc["dist_mix"] = json!(dmix);
            doc["diag"] = json!(labels
                .iter()
                .zip(&diag)
                .filter(|(_, p)| **p != 0.0)
                .map(|(l, p)| json!({"site": l, "p": p}))
                .collect::<Vec<_>>());
            if exact {
                doc["rho"] = complex_matrix(&state.m);
            }
            Ok(pretty(&doc))
        }
        Format::Csv => {
            let rows: Vec<Vec<String>> = labels
                .iter()
                .zip(&diag)
                .filter(|(_, p)| **p != 0.0)
                .map(|(l, p)| vec![l.clone(), p.to_string()])
                .collect();
            let notes = [
                format!("radius: {radius}"),
                format!("dist_e1: {de1}"),
                format!("dist_mix: {dmix}"),
            ];
            csv_doc(cfg, &notes, &["site".into(), "p".into()], &rows)
        }
    }
}

fn cmd_decide(cfg: &ExperimentConfig, path: &Path, semi: bool, budget: usize, full_sweep: bool) -> Result<String, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| CliError::input(format!("instance not found: {}", path.display())))?;
    let mut inst = DecisionInstance::from_json_str(&text)?;
    if cfg.t0_override.is_some() {
        inst.t0_override = cfg.t0_override;
    }
    let p = prepare(&inst, path.parent())?;
    let mut doc = meta(cfg);
    doc["instance"] = serde_json::to_value(&inst).expect("instance json");
    if semi {
        let out = semi_decide(&p, budget)?;
        doc["mode"] = json!("semi");
        doc["verdict"] = json!(match out {
            SemiOutcome::Accepted { .. } => "yes",
            SemiOutcome::BudgetExhausted { .. } => "budget_exhausted",
        });
        doc["outcome"] = serde_json::to_value(&out).expect("outcome json");
    } else {
        let d = decide_finite_with(&p, full_sweep)?;
        doc["mode"] = json!("finite");
        doc["verdict"] = serde_json::to_value(d.verdict).expect("verdict json");
        doc["decision"] = serde_json::to_value(&d).expect("decision json");
    }
    match cfg.format {
        Format::Json => Ok(pretty(&doc)),
        Format::Csv => {
            let mut rows = Vec::new();
            if let Some(ledger) = doc["decision"]["ledger"].as_array() {
                for t in ledger {
                    rows.push(vec![
                        t["name"].as_str().unwrap_or_default().to_string(),
                        t["value"].to_string(),
                        t["note"].as_str().unwrap_or_default().to_string(),
                    ]);
                }
            }
            let notes = [format!("verdict: {}", doc["verdict"].as_str().unwrap_or_default())];
            csv_doc(cfg, &notes, &["term".into(), "value".into(), "note".into()], &rows)
        }
    }
}

fn cmd_sample_good(
    cfg: &ExperimentConfig,
    v: &str,
    alpha: Option<&str>,
    lattice: usize,
    block_scale: Option<usize>,
    samples: usize,
) -> Result<String, CliError> {
    let mut enc = encode_input(v)?;
    if let Some(a) = alpha {
        enc = enc.with_alpha(parse_rat(a)?);
    }
    let params = match block_scale {
        Some(l) => EnsembleParams::iid(lattice, l),
        None => EnsembleParams::anchored(lattice),
    };
    let violations = param_violations(&params, &enc);
    if !violations.is_empty() && !cfg.override_params {
        return Err(CliError::input(format!(
            "parameter constraint violated: {} (pass --override-params to continue)",
            violations.join("; ")
        )));
    }
    let est = estimate_bad_rate(&params.overridden(), &enc, samples, cfg.seed)?;
    match cfg.format {
        Format::Json => {
            let mut doc = meta(cfg);
            doc["violations"] = json!(violations);
            doc["estimate"] = serde_json::to_value(&est).expect("estimate json");
            doc["within_bound"] = json!(est.rate <= est.bound);
            Ok(pretty(&doc))
        }
        Format::Csv => {
            let rows = vec![vec![
                est.samples.to_string(),
                est.bad.to_string(),
                est.rate.to_string(),
                est.bound.to_string(),
            ]];
            csv_doc(cfg, &violations, &["samples".into(), "bad".into(), "rate".into(), "bound".into()], &rows)
        }
    }
}

fn cmd_gap(cfg: &ExperimentConfig, cmd: &Command) -> Result<String, CliError> {
    let Command::Gap { len, cycle, machine, variant, bare, lattice, tape, max_steps } = cmd else {
        unreachable!()
    };
    let (j, is_cycle) = match (len, machine) {
        (Some(j), _) => (*j, *cycle),
        (None, Some(name)) => {
            let ma = MachineArgs {
                machine: name.clone(),
                variant: *variant,
                bare: *bare,
                pad: 0,
            };
            let spec = ma.resolve()?;
            let ens = EnsembleArgs {
                lattice: *lattice,
                tape: tape.clone(),
                v: None,
                alpha: None,
                block_scale: None,
                samples: None,
                eps_amp: 0.0,
                boundary: BoundaryArg::Periodic,
            };
            let init = ens.build(&spec, cfg)?;
            let m = Machine::new(spec)?;
            let o = run_orbit(&m, &init.members[0].0, *max_steps)?;
            match o.terminal {
                Terminal::DeadEnd(j) => (j, false),
                Terminal::Cycle(j) => (j, true),
                Terminal::Truncated => return Err(Error::TruncatedOrbit.into()),
            }
        }
        (None, None) => return Err(CliError::input("give --len or --machine")),
    };
    if j == 0 || (is_cycle && j < 3 && len.is_some()) {
        return Err(CliError::input("orbit length must be >= 1 (>= 3 for a cycle)"));
    }
    let sp = spectrum_for(j, is_cycle);
    let gap = min_distinct_gap(&sp.eigenvalues, 1e-9);
    let floor = gap_bound_for(j);
    let floor_f = *floor.numer() as f64 / *floor.denom() as f64;
    match cfg.format {
        Format::Json => {
            let mut doc = meta(cfg);
            doc["len"] = json!(j);
            doc["cycle"] = json!(is_cycle);
            doc["min_gap"] = json!(gap);
            doc["floor"] = json!(format!("{}/{}", floor.numer(), floor.denom()));
            doc["holds"] = json!(gap.is_none_or(|g| g >= floor_f - 1e-12));
            doc["eigenvalues"] = json!(sp.eigenvalues);
            Ok(pretty(&doc))
        }
        Format::Csv => {
            let rows: Vec<Vec<String>> = sp
                .eigenvalues
                .iter()
                .enumerate()
                .map(|(k, e)| vec![k.to_string(), e.to_string()])
                .collect();
            let notes = [
                format!("len: {j}, cycle: {is_cycle}"),
                format!("min_gap: {}", gap.map_or("none".to_string(), |g| g.to_string())),
                format!("floor: {}/{}", floor.numer(), floor.denom()),
            ];
            csv_doc(cfg, &notes, &["k".into(), "eigenvalue".into()], &rows)
        }
    }
}

fn cmd_phase_decode(cfg: &ExperimentConfig, beta: Option<&str>, v: Option<&str>, n_prime: usize) -> Result<String, CliError> {
    let b = match (beta, v) {
        (Some(b), _) => parse_rat(b)?,
        (None, Some(v)) => {
            encode_input(v)?;
            beta_of(v)
        }
        (None, None) => return Err(CliError::input("give --beta or --v")),
    };
    let d = phase_decode(&b, n_prime)?;
    match cfg.format {
        Format::Json => {
            let mut doc = meta(cfg);
            doc["beta"] = json!(b.to_string());
            doc["result"] = serde_json::to_value(&d).expect("decode json");
            Ok(pretty(&doc))
        }
        Format::Csv => {
            let rows: Vec<Vec<String>> = d
                .copies
                .iter()
                .enumerate()
                .map(|(k, [c, s])| vec![k.to_string(), c.to_string(), s.to_string()])
                .collect();
            let notes = [format!("len: {}", d.len), format!("v: {}", d.v)];
            csv_doc(cfg, &notes, &["copy".into(), "cos".into(), "sin".into()], &rows)
        }
    }
}

fn cmd_build_machine(cfg: &ExperimentConfig, machine: &MachineArgs, inverse: bool) -> Result<String, CliError> {
    let mut spec = machine.resolve()?;
    if inverse {
        spec = invert(&spec)?;
    }
    let report = validate_reversible(&spec);
    if !report.is_empty() {
        return Err(Error::NotReversible(format!("{report:?}")).into());
    }
    if cfg.format == Format::Csv {
        return Err(CliError::input("build-machine writes JSON only"));
    }
    // unknown keys are ignored when the file is read back as a machine
    let mut doc = serde_json::to_value(to_json(&spec)).expect("machine json");
    doc["meta"] = meta(cfg);
    doc["meta"]["site_dim"] = json!(spec.site_dim());
    Ok(pretty(&doc))
}

/// Parses `args` (including the program name) and writes the artifact to
/// `--out` or `stdout`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cfg = match ExperimentConfig::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 0 {
                return emit(stdout, &e.to_string());
            }
            return Err(CliError { code, message: e.to_string() });
        }
    };
    if let Some(n) = cfg.threads {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let text = match &cfg.command {
        Command::Orbit { machine, ensemble, max_steps } => cmd_orbit(&cfg, machine, ensemble, *max_steps)?,
        Command::Evolve {
            machine,
            ensemble,
            times,
            t_max,
            t_points,
            max_steps,
            dense,
            dim_limit,
        } => cmd_evolve(&cfg, machine, ensemble, times, *t_max, *t_points, *max_steps, *dense, *dim_limit)?,
        Command::Timeavg { machine, ensemble, exact, max_steps } => {
            cmd_timeavg(&cfg, machine, ensemble, *exact, *max_steps)?
        }
        Command::Decide { instance, semi, budget, full_sweep } => {
            cmd_decide(&cfg, instance, *semi, *budget, *full_sweep)?
        }
        Command::SampleGood { v, alpha, lattice, block_scale, samples } => {
            cmd_sample_good(&cfg, v, alpha.as_deref(), *lattice, *block_scale, *samples)?
        }
        c @ Command::Gap { .. } => cmd_gap(&cfg, c)?,
        Command::PhaseDecode { beta, v, n_prime } => cmd_phase_decode(&cfg, beta.as_deref(), v.as_deref(), *n_prime)?,
        Command::BuildMachine { machine, inverse } => cmd_build_machine(&cfg, machine, *inverse)?,
    };
    match &cfg.out {
        Some(p) => std::fs::write(p, text)?,
        None => emit(stdout, &text)?,
    }
    Ok(())
}

fn emit(stdout: &mut dyn Write, text: &str) -> Result<(), CliError> {
    match stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush()) {
        // a closed pipe downstream (e.g. `| head`) is not an error
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}
