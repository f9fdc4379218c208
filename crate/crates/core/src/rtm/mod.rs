//! Two-mode quadruple-form reversible Turing machines.
//!
//! A configuration is a row of sites; exactly one site per block holds the
//! finite control, which reads the cell immediately to its right. In the
//! read-write mode the control rewrites that cell and its state; in the shift
//! mode it moves one site (or stays) according to the state's direction class.

pub mod build;
pub mod json;
pub mod stats;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mode label of the finite control. Which label plays the read-write role is
/// a property of the machine (see [`MachineSpec::reversed`]).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    M0,
    M1,
}

impl Mode {
    pub fn other(self) -> Mode {
        match self {
            Mode::M0 => Mode::M1,
            Mode::M1 => Mode::M0,
        }
    }
    pub fn bit(self) -> usize {
        match self {
            Mode::M0 => 0,
            Mode::M1 => 1,
        }
    }
}

/// Direction class of a control state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dir {
    Right,
    Left,
    Stay,
}

impl Dir {
    pub fn flip(self) -> Dir {
        match self {
            Dir::Right => Dir::Left,
            Dir::Left => Dir::Right,
            Dir::Stay => Dir::Stay,
        }
    }
}

/// One tape cell. `A(k)` indexes the A-cell second-track alphabet; an M-cell
/// carries its read-only bit pair and an index into the M-cell second track.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cell {
    A(u16),
    M { b1: bool, b2: bool, w: u16 },
}

impl Cell {
    pub fn is_m(&self) -> bool {
        matches!(self, Cell::M { .. })
    }
    /// Same cell kind and track-1 bits, different second track.
    pub fn with_track2(self, k: u16) -> Cell {
        match self {
            Cell::A(_) => Cell::A(k),
            Cell::M { b1, b2, .. } => Cell::M { b1, b2, w: k },
        }
    }
    pub fn track2(&self) -> u16 {
        match *self {
            Cell::A(k) => k,
            Cell::M { w, .. } => w,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    Ctrl { mode: Mode, q: u32 },
    Cell(Cell),
}

impl Site {
    pub fn is_ctrl(&self) -> bool {
        matches!(self, Site::Ctrl { .. })
    }
    pub fn cell(&self) -> Option<Cell> {
        match *self {
            Site::Cell(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Periodic,
    Open,
}

/// A classical lattice configuration `x_0 .. x_L`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Configuration {
    pub sites: Vec<Site>,
    pub boundary: Boundary,
}

impl Configuration {
    pub fn new(sites: Vec<Site>, boundary: Boundary) -> Self {
        Configuration { sites, boundary }
    }

    /// Control at site 0 followed by `cells`.
    pub fn anchored(ctrl: Site, cells: &[Cell], boundary: Boundary) -> Self {
        let mut sites = Vec::with_capacity(cells.len() + 1);
        sites.push(ctrl);
        sites.extend(cells.iter().map(|&c| Site::Cell(c)));
        Configuration { sites, boundary }
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }
    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn control_positions(&self) -> Vec<usize> {
        self.sites
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_ctrl())
            .map(|(i, _)| i)
            .collect()
    }

    /// Position of the unique control site.
    pub fn single_control(&self) -> Result<usize> {
        let c = self.control_positions();
        match c.len() {
            1 => Ok(c[0]),
            0 => Err(Error::MalformedConfiguration("no control site".into())),
            k => Err(Error::MalformedConfiguration(format!(
                "{k} control sites in one block"
            ))),
        }
    }

    /// Splits a multi-control configuration into blocks, each starting at a
    /// control site and running up to the next one. Blocks use the open
    /// boundary. With a periodic boundary the cells before the first control
    /// are appended to the last block. Returns (start offset, block) pairs.
    pub fn blocks(&self) -> Vec<(usize, Configuration)> {
        let ctrls = self.control_positions();
        if ctrls.is_empty() {
            return Vec::new();
        }
        let n = self.sites.len();
        let mut out = Vec::with_capacity(ctrls.len());
        for (k, &s) in ctrls.iter().enumerate() {
            let mut sites = Vec::new();
            let end = if k + 1 < ctrls.len() {
                ctrls[k + 1]
            } else if self.boundary == Boundary::Periodic {
                ctrls[0] + n
            } else {
                n
            };
            for i in s..end {
                sites.push(self.sites[i % n]);
            }
            out.push((s, Configuration::new(sites, Boundary::Open)));
        }
        out
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        self.sites.iter().filter_map(|s| s.cell())
    }
}

/// Variant of the staged machine (or `Bare` for hand-written machines).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Bare,
    OneWay,
    TwoWay,
    Iid,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateInfo {
    pub name: String,
    /// Stage 1..4 for staged machines, 0 otherwise.
    pub stage: u8,
    pub primed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rule {
    pub q: u32,
    pub read: Cell,
    pub q2: u32,
    pub write: Cell,
}

/// Full machine description. Pure data; compile with [`Machine::new`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MachineSpec {
    pub name: String,
    pub variant: Variant,
    /// A-cell second-track alphabet.
    pub a_symbols: Vec<String>,
    /// M-cell second-track alphabet.
    pub m_symbols: Vec<String>,
    /// Plain box symbol indices (the left-end marker) in each track-2 alphabet.
    pub a_box: Option<u16>,
    pub m_box: Option<u16>,
    pub states: Vec<StateInfo>,
    /// Direction partition. Kept as three lists so that a broken partition is
    /// representable and reportable.
    pub right: Vec<u32>,
    pub left: Vec<u32>,
    pub stay: Vec<u32>,
    pub roles: BTreeMap<String, u32>,
    /// States that are never produced by a rule and have no shift term.
    pub entry_states: Vec<u32>,
    pub initial: u32,
    pub rules: Vec<Rule>,
    /// Set on machines produced by [`invert`]: the `M1` label is then the
    /// read-write mode.
    pub reversed: bool,
}

impl MachineSpec {
    pub fn n_states(&self) -> usize {
        self.states.len()
    }
    pub fn n_cells(&self) -> usize {
        self.a_symbols.len() + 4 * self.m_symbols.len()
    }
    /// Single-site dimension d = |Q_m x Q_u| + |Gamma|.
    pub fn site_dim(&self) -> usize {
        2 * self.n_states() + self.n_cells()
    }
    pub fn state(&self, name: &str) -> Option<u32> {
        self.states
            .iter()
            .position(|s| s.name == name)
            .map(|i| i as u32)
    }
    pub fn role(&self, role: &str) -> Option<u32> {
        self.roles.get(role).copied()
    }
    pub fn a_sym(&self, name: &str) -> Option<u16> {
        self.a_symbols
            .iter()
            .position(|s| s == name)
            .map(|i| i as u16)
    }
    pub fn m_sym(&self, name: &str) -> Option<u16> {
        self.m_symbols
            .iter()
            .position(|s| s == name)
            .map(|i| i as u16)
    }
    pub fn rw_mode(&self) -> Mode {
        if self.reversed {
            Mode::M1
        } else {
            Mode::M0
        }
    }

    pub fn cell_index(&self, c: Cell) -> usize {
        match c {
            Cell::A(k) => k as usize,
            Cell::M { b1, b2, w } => {
                self.a_symbols.len() + 4 * w as usize + (b1 as usize) + 2 * (b2 as usize)
            }
        }
    }
    pub fn cell_from_index(&self, i: usize) -> Cell {
        let na = self.a_symbols.len();
        if i < na {
            Cell::A(i as u16)
        } else {
            let r = i - na;
            Cell::M {
                b1: r & 1 == 1,
                b2: r & 2 == 2,
                w: (r / 4) as u16,
            }
        }
    }
    /// Basis index of a site value in `0..site_dim()`.
    pub fn site_index(&self, s: Site) -> usize {
        match s {
            Site::Ctrl { mode, q } => 2 * q as usize + mode.bit(),
            Site::Cell(c) => 2 * self.n_states() + self.cell_index(c),
        }
    }
    pub fn site_from_index(&self, i: usize) -> Site {
        let nq2 = 2 * self.n_states();
        if i < nq2 {
            Site::Ctrl {
                mode: if i.is_multiple_of(2) { Mode::M0 } else { Mode::M1 },
                q: (i / 2) as u32,
            }
        } else {
            Site::Cell(self.cell_from_index(i - nq2))
        }
    }

    pub fn is_box(&self, c: Cell) -> bool {
        match c {
            Cell::A(k) => Some(k) == self.a_box,
            Cell::M { w, .. } => Some(w) == self.m_box,
        }
    }

    /// Direction class per state, `None` when the partition is broken there.
    pub fn dir_table(&self) -> Vec<Option<Dir>> {
        let mut seen: Vec<Vec<Dir>> = vec![Vec::new(); self.n_states()];
        for (list, d) in [
            (&self.right, Dir::Right),
            (&self.left, Dir::Left),
            (&self.stay, Dir::Stay),
        ] {
            for &q in list {
                if let Some(v) = seen.get_mut(q as usize) {
                    v.push(d);
                }
            }
        }
        seen.into_iter()
            .map(|v| if v.len() == 1 { Some(v[0]) } else { None })
            .collect()
    }

    pub fn dir(&self, q: u32) -> Option<Dir> {
        self.dir_table()[q as usize]
    }

    pub fn state_name(&self, q: u32) -> &str {
        &self.states[q as usize].name
    }

    pub fn cell_tag(&self, c: Cell) -> String {
        match c {
            Cell::A(k) => format!("A:{}", self.a_symbols[k as usize]),
            Cell::M { b1, b2, w } => {
                format!("M:{}{}:{}", b1 as u8, b2 as u8, self.m_symbols[w as usize])
            }
        }
    }
    pub fn site_tag(&self, s: Site) -> String {
        match s {
            Site::Ctrl { mode, q } => format!(
                "{}:{}",
                if mode == Mode::M0 { "m0" } else { "m1" },
                self.state_name(q)
            ),
            Site::Cell(c) => self.cell_tag(c),
        }
    }
    pub fn parse_cell(&self, tag: &str) -> Result<Cell> {
        let bad = || Error::Parse(format!("bad cell tag {tag:?}"));
        if let Some(rest) = tag.strip_prefix("A:") {
            return self.a_sym(rest).map(Cell::A).ok_or_else(bad);
        }
        if let Some(rest) = tag.strip_prefix("M:") {
            let (bits, sym) = rest.split_once(':').ok_or_else(bad)?;
            let b: Vec<char> = bits.chars().collect();
            if b.len() != 2 || !b.iter().all(|c| *c == '0' || *c == '1') {
                return Err(bad());
            }
            let w = self.m_sym(sym).ok_or_else(bad)?;
            return Ok(Cell::M {
                b1: b[0] == '1',
                b2: b[1] == '1',
                w,
            });
        }
        Err(bad())
    }
    pub fn parse_site(&self, tag: &str) -> Result<Site> {
        for (p, mode) in [("m0:", Mode::M0), ("m1:", Mode::M1)] {
            if let Some(name) = tag.strip_prefix(p) {
                let q = self
                    .state(name)
                    .ok_or_else(|| Error::Parse(format!("unknown state {name:?}")))?;
                return Ok(Site::Ctrl { mode, q });
            }
        }
        self.parse_cell(tag).map(Site::Cell)
    }
    pub fn config_tags(&self, c: &Configuration) -> Vec<String> {
        c.sites.iter().map(|&s| self.site_tag(s)).collect()
    }
    pub fn parse_config(&self, tags: &[String], boundary: Boundary) -> Result<Configuration> {
        let sites = tags
            .iter()
            .map(|t| self.parse_site(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Configuration::new(sites, boundary))
    }

    /// Fresh A-cell `a1` (the amplification target).
    pub fn fresh_a(&self) -> Cell {
        Cell::A(self.a_sym("a1").unwrap_or(0))
    }
    /// Fresh M-cell carrying input bits.
    pub fn fresh_m(&self, b1: bool, b2: bool) -> Cell {
        Cell::M { b1, b2, w: self.m_sym("s0").unwrap_or(0) }
    }
    /// Legal initial configuration: `(m0, initial)` at site 0, then `cells`.
    pub fn initial_config(&self, cells: &[Cell], boundary: Boundary) -> Configuration {
        let ctrl = Site::Ctrl { mode: self.rw_mode(), q: self.initial };
        Configuration::anchored(ctrl, cells, boundary)
    }

    /// Every cell value of the tape alphabet.
    pub fn all_cells(&self) -> Vec<Cell> {
        (0..self.n_cells()).map(|i| self.cell_from_index(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Collision {
    pub image: (u32, String),
    pub sources: Vec<(u32, String)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DirectionViolation {
    pub state: u32,
    pub classes: Vec<Dir>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub collisions: Vec<Collision>,
    pub duplicate_domains: Vec<(u32, String)>,
    pub direction_violations: Vec<DirectionViolation>,
    /// M-cell rules that change the track-1 bits or the cell kind.
    pub track1_rewrites: Vec<(u32, String)>,
    pub dangling: Vec<String>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.collisions.is_empty()
            && self.duplicate_domains.is_empty()
            && self.direction_violations.is_empty()
            && self.track1_rewrites.is_empty()
            && self.dangling.is_empty()
    }
}

/// Exhaustive scan for everything that breaks reversibility.
pub fn validate_reversible(spec: &MachineSpec) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let nq = spec.n_states() as u32;
    let na = spec.a_symbols.len() as u16;
    let nm = spec.m_symbols.len() as u16;
    let cell_ok = |c: Cell| match c {
        Cell::A(k) => k < na,
        Cell::M { w, .. } => w < nm,
    };
    let mut images: BTreeMap<(u32, usize), Vec<(u32, Cell)>> = BTreeMap::new();
    let mut domains: HashSet<(u32, Cell)> = HashSet::new();
    for r in &spec.rules {
        if r.q >= nq || r.q2 >= nq || !cell_ok(r.read) || !cell_ok(r.write) {
            rep.dangling.push(format!("{r:?}"));
            continue;
        }
        if !domains.insert((r.q, r.read)) {
            rep.duplicate_domains.push((r.q, spec.cell_tag(r.read)));
        }
        let same_track1 = match (r.read, r.write) {
            (Cell::A(_), Cell::A(_)) => true,
            (Cell::M { b1, b2, .. }, Cell::M { b1: c1, b2: c2, .. }) => b1 == c1 && b2 == c2,
            _ => false,
        };
        if !same_track1 {
            rep.track1_rewrites.push((r.q, spec.cell_tag(r.read)));
        }
        images
            .entry((r.q2, spec.cell_index(r.write)))
            .or_default()
            .push((r.q, r.read));
    }
    for ((q2, wi), srcs) in images {
        if srcs.len() > 1 {
            rep.collisions.push(Collision {
                image: (q2, spec.cell_tag(spec.cell_from_index(wi))),
                sources: srcs.iter().map(|&(q, c)| (q, spec.cell_tag(c))).collect(),
            });
        }
    }
    let mut classes: Vec<Vec<Dir>> = vec![Vec::new(); spec.n_states()];
    for (list, d) in [
        (&spec.right, Dir::Right),
        (&spec.left, Dir::Left),
        (&spec.stay, Dir::Stay),
    ] {
        for &q in list {
            match classes.get_mut(q as usize) {
                Some(v) => v.push(d),
                None => rep.dangling.push(format!("direction entry for state {q}")),
            }
        }
    }
    for (q, v) in classes.into_iter().enumerate() {
        if v.len() != 1 {
            rep.direction_violations.push(DirectionViolation {
                state: q as u32,
                classes: v,
            });
        }
    }
    rep
}

/// The inverse machine: rules flipped, direction classes negated, mode roles
/// swapped. `invert(invert(s)) == s`.
pub fn invert(spec: &MachineSpec) -> Result<MachineSpec> {
    let rep = validate_reversible(spec);
    if !rep.is_empty() {
        return Err(Error::NotReversible(format!("{rep:?}")));
    }
    let mut out = spec.clone();
    out.rules = spec
        .rules
        .iter()
        .map(|r| Rule {
            q: r.q2,
            read: r.write,
            q2: r.q,
            write: r.read,
        })
        .collect();
    out.rules.sort();
    out.right = spec.left.clone();
    out.left = spec.right.clone();
    out.reversed = !spec.reversed;
    Ok(out)
}

/// Outcome of a single move.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Step {
    Next(Configuration),
    NoSuccessor,
}

/// A compiled machine with dense lookup tables.
#[derive(Clone, Debug)]
pub struct Machine {
    pub spec: MachineSpec,
    n_cells: usize,
    table: Vec<Option<(u32, Cell)>>,
    dirs: Vec<Dir>,
    shift_ok: Vec<bool>,
    rw: Mode,
}

impl Machine {
    pub fn new(spec: MachineSpec) -> Result<Machine> {
        let rep = validate_reversible(&spec);
        if !rep.is_empty() {
            return Err(Error::NotReversible(format!("{rep:?}")));
        }
        let n_cells = spec.n_cells();
        let mut table = vec![None; spec.n_states() * n_cells];
        for r in &spec.rules {
            table[r.q as usize * n_cells + spec.cell_index(r.read)] = Some((r.q2, r.write));
        }
        let dirs = spec.dir_table().into_iter().map(|d| d.unwrap()).collect();
        let mut shift_ok = vec![true; spec.n_states()];
        if !spec.reversed {
            for &q in &spec.entry_states {
                shift_ok[q as usize] = false;
            }
        }
        let rw = spec.rw_mode();
        Ok(Machine {
            spec,
            n_cells,
            table,
            dirs,
            shift_ok,
            rw,
        })
    }

    pub fn rw_mode(&self) -> Mode {
        self.rw
    }
    pub fn dir(&self, q: u32) -> Dir {
        self.dirs[q as usize]
    }
    /// Whether the shift term for `q` exists.
    pub fn shift_allowed(&self, q: u32) -> bool {
        self.shift_ok[q as usize]
    }

    /// Read-write transition, including the left-end cut: a right-moving
    /// state in read-write mode never reads a plain box.
    pub fn rw_rule(&self, q: u32, c: Cell) -> Option<(u32, Cell)> {
        if self.dirs[q as usize] == Dir::Right && self.spec.is_box(c) {
            return None;
        }
        self.table[q as usize * self.n_cells + self.spec.cell_index(c)]
    }

    /// Applies one move in place. Returns the two touched positions, or
    /// `None` when there is no successor (the sites are then untouched).
    pub fn step_in_place(
        &self,
        sites: &mut [Site],
        ctrl: &mut usize,
        boundary: Boundary,
    ) -> Option<[usize; 2]> {
        let n = sites.len();
        let p = *ctrl;
        let next = |i: usize| -> Option<usize> {
            if i + 1 < n {
                Some(i + 1)
            } else if boundary == Boundary::Periodic {
                Some(0)
            } else {
                None
            }
        };
        let prev = |i: usize| -> Option<usize> {
            if i > 0 {
                Some(i - 1)
            } else if boundary == Boundary::Periodic {
                Some(n - 1)
            } else {
                None
            }
        };
        let Site::Ctrl { mode, q } = sites[p] else {
            return None;
        };
        if mode == self.rw {
            let h = next(p)?;
            let c = sites[h].cell()?;
            let (q2, c2) = self.rw_rule(q, c)?;
            sites[p] = Site::Ctrl {
                mode: mode.other(),
                q: q2,
            };
            sites[h] = Site::Cell(c2);
            Some([p, h])
        } else {
            if !self.shift_ok[q as usize] {
                return None;
            }
            let ctl = Site::Ctrl { mode: self.rw, q };
            match self.dirs[q as usize] {
                Dir::Stay => {
                    sites[p] = ctl;
                    Some([p, p])
                }
                Dir::Right => {
                    let h = next(p)?;
                    let c = sites[h].cell()?;
                    sites[p] = Site::Cell(c);
                    sites[h] = ctl;
                    *ctrl = h;
                    Some([p, h])
                }
                Dir::Left => {
                    let h = prev(p)?;
                    let c = sites[h].cell()?;
                    sites[p] = Site::Cell(c);
                    sites[h] = ctl;
                    *ctrl = h;
                    Some([h, p])
                }
            }
        }
    }

    /// One move on a single-control configuration.
    pub fn step(&self, c: &Configuration) -> Result<Step> {
        let mut p = c.single_control()?;
        let mut next = c.clone();
        Ok(match self.step_in_place(&mut next.sites, &mut p, c.boundary) {
            Some(_) => Step::Next(next),
            None => Step::NoSuccessor,
        })
    }

    /// Unique predecessor of a single-control configuration, if any. Computed
    /// from the rule table directly rather than through [`invert`].
    pub fn predecessor(&self, c: &Configuration) -> Result<Option<Configuration>> {
        let p = c.single_control()?;
        let n = c.len();
        let Site::Ctrl { mode, q } = c.sites[p] else {
            unreachable!()
        };
        let periodic = c.boundary == Boundary::Periodic;
        let next = |i: usize| {
            if i + 1 < n {
                Some(i + 1)
            } else if periodic {
                Some(0)
            } else {
                None
            }
        };
        let prev = |i: usize| {
            if i > 0 {
                Some(i - 1)
            } else if periodic {
                Some(n - 1)
            } else {
                None
            }
        };
        let mut out = c.clone();
        if mode != self.rw {
            // Produced by a read-write move.
            let Some(h) = next(p) else { return Ok(None) };
            let Some(written) = c.sites[h].cell() else {
                return Ok(None);
            };
            for r in &self.spec.rules {
                if r.q2 == q && r.write == written && self.rw_rule(r.q, r.read).is_some() {
                    out.sites[p] = Site::Ctrl {
                        mode: self.rw,
                        q: r.q,
                    };
                    out.sites[h] = Site::Cell(r.read);
                    return Ok(Some(out));
                }
            }
            Ok(None)
        } else {
            // Produced by a shift move of q.
            if !self.shift_ok[q as usize] {
                return Ok(None);
            }
            let shifted = Site::Ctrl {
                mode: self.rw.other(),
                q,
            };
            match self.dirs[q as usize] {
                Dir::Stay => {
                    out.sites[p] = shifted;
                }
                Dir::Right => {
                    let Some(h) = prev(p) else { return Ok(None) };
                    let Some(cell) = c.sites[h].cell() else {
                        return Ok(None);
                    };
                    out.sites[h] = shifted;
                    out.sites[p] = Site::Cell(cell);
                }
                Dir::Left => {
                    let Some(h) = next(p) else { return Ok(None) };
                    let Some(cell) = c.sites[h].cell() else {
                        return Ok(None);
                    };
                    out.sites[h] = shifted;
                    out.sites[p] = Site::Cell(cell);
                }
            }
            Ok(Some(out))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Terminal {
    /// Orbit of length J ending in a configuration with no successor.
    DeadEnd(usize),
    /// The successor of the last state is the first; payload is the period.
    Cycle(usize),
    Truncated,
}

/// `x(1), x(2), ...` under the machine.
#[derive(Clone, Debug)]
pub struct Orbit {
    pub states: Vec<Configuration>,
    pub terminal: Terminal,
}

impl Orbit {
    pub fn len(&self) -> usize {
        self.states.len()
    }
    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
    pub fn is_cycle(&self) -> bool {
        matches!(self.terminal, Terminal::Cycle(_))
    }
}

/// Materialized orbit of a single-control configuration. A repeat of any
/// state other than `x(1)` means the machine is not injective there.
pub fn run_orbit(m: &Machine, c: &Configuration, max_steps: usize) -> Result<Orbit> {
    let mut p = c.single_control()?;
    let mut seen: HashMap<Configuration, usize> = HashMap::new();
    let mut states = vec![c.clone()];
    seen.insert(c.clone(), 0);
    let mut cur = c.clone();
    for _ in 0..max_steps {
        if m.step_in_place(&mut cur.sites, &mut p, c.boundary).is_none() {
            let j = states.len();
            return Ok(Orbit {
                states,
                terminal: Terminal::DeadEnd(j),
            });
        }
        if let Some(&k) = seen.get(&cur) {
            if k == 0 {
                let j = states.len();
                return Ok(Orbit {
                    states,
                    terminal: Terminal::Cycle(j),
                });
            }
            return Err(Error::NotReversible(format!(
                "orbit re-entered state {} without passing the start",
                k + 1
            )));
        }
        seen.insert(cur.clone(), states.len());
        states.push(cur.clone());
    }
    Ok(Orbit {
        states,
        terminal: Terminal::Truncated,
    })
}

/// Event reported by [`Walker::advance`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WalkEvent {
    /// A move happened; the touched positions with their old values.
    Moved { pos: [usize; 2], old: [Site; 2] },
    DeadEnd,
    /// The move led back to the start configuration.
    Closed,
}

/// Streams an orbit without storing it. Cycle closure is detected by counting
/// sites that differ from the start, which is exact for injective machines.
pub struct Walker<'a> {
    m: &'a Machine,
    start: Vec<Site>,
    cur: Configuration,
    ctrl: usize,
    diff: usize,
    /// Number of configurations visited so far (the current one included).
    pub j: usize,
}

impl<'a> Walker<'a> {
    pub fn new(m: &'a Machine, c: &Configuration) -> Result<Walker<'a>> {
        let ctrl = c.single_control()?;
        Ok(Walker {
            m,
            start: c.sites.clone(),
            cur: c.clone(),
            ctrl,
            diff: 0,
            j: 1,
        })
    }
    pub fn current(&self) -> &Configuration {
        &self.cur
    }
    pub fn control(&self) -> usize {
        self.ctrl
    }
    pub fn advance(&mut self) -> WalkEvent {
        let n = self.cur.len();
        let p = self.ctrl;
        let around = [if p > 0 { p - 1 } else { n - 1 }, p, if p + 1 < n { p + 1 } else { 0 }];
        let snap = around.map(|i| self.cur.sites[i]);
        let Some(pos) = self
            .m
            .step_in_place(&mut self.cur.sites, &mut self.ctrl, self.cur.boundary)
        else {
            return WalkEvent::DeadEnd;
        };
        let old_of = |i: usize| snap[around.iter().position(|&a| a == i).unwrap()];
        let old = [old_of(pos[0]), old_of(pos[1])];
        let touched: &[usize] = if pos[0] == pos[1] { &pos[..1] } else { &pos[..] };
        for (k, &i) in touched.iter().enumerate() {
            let was = old[k] != self.start[i];
            let now = self.cur.sites[i] != self.start[i];
            match (was, now) {
                (false, true) => self.diff += 1,
                (true, false) => self.diff -= 1,
                _ => {}
            }
        }
        self.j += 1;
        if self.diff == 0 {
            return WalkEvent::Closed;
        }
        WalkEvent::Moved { pos, old }
    }
}
