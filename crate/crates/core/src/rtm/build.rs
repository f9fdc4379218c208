//! The staged machine: tape initialization, decode, inner simulation and
//! amplification, plus the fixture inner machines.

use std::collections::{BTreeMap, HashMap, HashSet};

use super::{validate_reversible, Cell, Dir, MachineSpec, Rule, StateInfo, Variant};
use crate::error::{Error, Result};

/// Second-track symbol as seen by an inner machine.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum InnerSym {
    /// An M-cell second-track symbol (`s0`, `d`, `e` or one of the extras).
    Work(String),
    /// The left-end marker, in whichever flavor (A or M) it appears.
    Box,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InnerRule {
    pub from: usize,
    pub read: InnerSym,
    pub to: usize,
    pub write: InnerSym,
}

/// A reversible machine that runs on the M-cells of the decoded tape.
/// A-cells are skipped by the wrapper, never seen by the inner rules.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InnerMachine {
    pub name: String,
    pub states: Vec<(String, Dir)>,
    /// Work symbols beyond `s0`, `d`, `e`.
    pub extra_symbols: Vec<String>,
    pub start: usize,
    /// Accepting state; amplification starts when it reads the box.
    pub accept: Option<usize>,
    pub rules: Vec<InnerRule>,
}

fn w(s: &str) -> InnerSym {
    InnerSym::Work(s.to_string())
}

/// Walks right over the decoded prefix and turns back at the length marker;
/// accepts at the box.
pub fn halt_now() -> InnerMachine {
    InnerMachine {
        name: "halt_now".into(),
        states: vec![("go".into(), Dir::Right), ("halt".into(), Dir::Left)],
        extra_symbols: vec![],
        start: 0,
        accept: Some(1),
        rules: vec![
            InnerRule { from: 0, read: w("d"), to: 0, write: w("d") },
            InnerRule { from: 0, read: w("e"), to: 1, write: w("e") },
            InnerRule { from: 1, read: w("d"), to: 1, write: w("d") },
        ],
    }
}

/// Never accepts: a zig-zag that claims one fresh M-cell per round trip and
/// returns to the box each time, until it runs off the decoded stream.
pub fn ping_pong() -> InnerMachine {
    let fresh = ["d", "e", "s0"];
    let mut rules = Vec::new();
    // states: 0 = claim (right), 1 = back (left), 2 = forward (right)
    for x in fresh {
        rules.push(InnerRule { from: 0, read: w(x), to: 1, write: w(&format!("t_{x}")) });
        rules.push(InnerRule { from: 1, read: w(&format!("w_{x}")), to: 1, write: w(&format!("w_{x}")) });
        rules.push(InnerRule { from: 2, read: w(&format!("w_{x}")), to: 2, write: w(&format!("w_{x}")) });
        rules.push(InnerRule { from: 2, read: w(&format!("t_{x}")), to: 0, write: w(&format!("w_{x}")) });
    }
    rules.push(InnerRule { from: 1, read: InnerSym::Box, to: 2, write: InnerSym::Box });
    let mut extra = Vec::new();
    for p in ["w", "t"] {
        for x in fresh {
            extra.push(format!("{p}_{x}"));
        }
    }
    InnerMachine {
        name: "ping_pong".into(),
        states: vec![
            ("claim".into(), Dir::Right),
            ("back".into(), Dir::Left),
            ("forward".into(), Dir::Right),
        ],
        extra_symbols: extra,
        start: 0,
        accept: None,
        rules,
    }
}

/// Accepts after a chain of 2^(k-1) stay states at the box (about 2^k moves).
pub fn counter(k: u32) -> InnerMachine {
    let n = 1usize << k.saturating_sub(1);
    let states = (0..n).map(|i| (format!("c{i}"), Dir::Stay)).collect();
    let rules = (0..n.saturating_sub(1))
        .map(|i| InnerRule { from: i, read: InnerSym::Box, to: i + 1, write: InnerSym::Box })
        .collect();
    InnerMachine {
        name: format!("counter_{k}"),
        states,
        extra_symbols: vec![],
        start: 0,
        accept: Some(n - 1),
        rules,
    }
}

pub fn inner_by_name(name: &str) -> Option<InnerMachine> {
    match name {
        "halt_now" => Some(halt_now()),
        "ping_pong" => Some(ping_pong()),
        _ => name
            .strip_prefix("counter_")
            .and_then(|k| k.parse().ok())
            .filter(|&k: &u32| (1..=16).contains(&k))
            .map(counter),
    }
}

/// A two-state shuttle on A-cells between the box and an end marker. On a
/// periodic lattice its orbit from `(m0, L)` at the box is a cycle.
pub fn shuttle() -> MachineSpec {
    let a_symbols = vec!["box".to_string(), "c".to_string(), "end".to_string()];
    let (bx, c, end) = (Cell::A(0), Cell::A(1), Cell::A(2));
    let states = vec![
        StateInfo { name: "R".into(), stage: 0, primed: false },
        StateInfo { name: "L".into(), stage: 0, primed: false },
    ];
    let mut rules = vec![
        Rule { q: 0, read: c, q2: 0, write: c },
        Rule { q: 0, read: end, q2: 1, write: end },
        Rule { q: 1, read: c, q2: 1, write: c },
        Rule { q: 1, read: bx, q2: 0, write: bx },
    ];
    rules.sort();
    let mut roles = BTreeMap::new();
    roles.insert("right".into(), 0);
    roles.insert("left".into(), 1);
    MachineSpec {
        name: "shuttle".into(),
        variant: Variant::Bare,
        a_symbols,
        m_symbols: vec![],
        a_box: Some(0),
        m_box: None,
        states,
        right: vec![0],
        left: vec![1],
        stay: vec![],
        roles,
        entry_states: vec![],
        initial: 1,
        rules,
        reversed: false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BuildOptions {
    /// Length of the stay-state chain inserted before the inner machine.
    pub pad: usize,
    /// Upper bound on the single-site dimension.
    pub symbol_budget: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { pad: 0, symbol_budget: 1 << 16 }
    }
}

struct Builder {
    a: Vec<String>,
    m: Vec<String>,
    states: Vec<StateInfo>,
    dirs: Vec<Dir>,
    rules: Vec<Rule>,
    by_name: HashMap<String, u32>,
}

const BITS: [(bool, bool); 4] = [(false, false), (true, false), (false, true), (true, true)];

impl Builder {
    fn state(&mut self, name: &str, stage: u8, primed: bool, d: Dir) -> u32 {
        assert!(!self.by_name.contains_key(name), "duplicate state {name}");
        let q = self.states.len() as u32;
        self.states.push(StateInfo { name: name.into(), stage, primed });
        self.dirs.push(d);
        self.by_name.insert(name.into(), q);
        q
    }
    fn a(&self, s: &str) -> u16 {
        self.a.iter().position(|x| x == s).unwrap() as u16
    }
    fn m(&self, s: &str) -> u16 {
        self.m.iter().position(|x| x == s).unwrap() as u16
    }
    fn rule(&mut self, q: u32, read: Cell, q2: u32, write: Cell) {
        self.rules.push(Rule { q, read, q2, write });
    }
    /// Rule applied to every M-cell bit pair.
    fn rule_m(&mut self, q: u32, r: u16, q2: u32, wr: u16) {
        for (b1, b2) in BITS {
            self.rule(q, Cell::M { b1, b2, w: r }, q2, Cell::M { b1, b2, w: wr });
        }
    }
    /// Rule on a box flavor pair: A-cell symbol `ra`/M symbol `rm`.
    fn rule_box(&mut self, q: u32, r: (&str, &str), q2: u32, wr: (&str, &str)) {
        let (ra, wa) = (self.a(r.0), self.a(wr.0));
        let (rm, wm) = (self.m(r.1), self.m(wr.1));
        self.rule(q, Cell::A(ra), q2, Cell::A(wa));
        self.rule_m(q, rm, q2, wm);
    }
    fn skip_a(&mut self, q: u32, plain: &[&str]) {
        for s in plain {
            let k = self.a(s);
            self.rule(q, Cell::A(k), q, Cell::A(k));
        }
    }
    fn skip_m(&mut self, q: u32, boxes: &[&str]) {
        let ks: Vec<u16> = (0..self.m.len() as u16)
            .filter(|&k| !boxes.contains(&self.m[k as usize].as_str()))
            .collect();
        for k in ks {
            self.rule_m(q, k, q, k);
        }
    }
}

/// Names, dirs and rules of the decode plus inner-simulation stages, with
/// a name suffix for the primed copy.
struct SimPart {
    start: u32,
    accept: Option<u32>,
    /// Rules of this part (for the reversed copy).
    rules: Vec<Rule>,
    states: Vec<u32>,
}

fn emit_sim(
    b: &mut Builder,
    inner: &InnerMachine,
    pad: usize,
    plain_a: &[&str],
    suffix: &str,
    primed: bool,
) -> Result<SimPart> {
    let first_rule = b.rules.len();
    let first_state = b.states.len() as u32;
    let scan = b.state(&format!("q2_init{suffix}"), 2, primed, Dir::Right);
    let ret = b.state(&format!("q2_ret{suffix}"), 2, primed, Dir::Left);
    let (s0, d, e) = (b.m("s0"), b.m("d"), b.m("e"));
    b.skip_a(scan, plain_a);
    for b1 in [false, true] {
        b.rule(scan, Cell::M { b1, b2: false, w: s0 }, scan, Cell::M { b1, b2: false, w: d });
        b.rule(scan, Cell::M { b1, b2: true, w: s0 }, ret, Cell::M { b1, b2: true, w: e });
    }
    b.skip_a(ret, plain_a);
    b.rule_m(ret, d, ret, d);

    let pads: Vec<u32> = (0..pad)
        .map(|i| b.state(&format!("q3_pad{}{suffix}", i + 1), 3, primed, Dir::Stay))
        .collect();
    let inner_q: Vec<u32> = inner
        .states
        .iter()
        .map(|(n, dir)| b.state(&format!("q3_{n}{suffix}"), 3, primed, *dir))
        .collect();
    let start = inner_q[inner.start];
    let mut chain = vec![ret];
    chain.extend(&pads);
    chain.push(start);
    for win in chain.windows(2) {
        b.rule_box(win[0], ("box", "box"), win[1], ("box", "box"));
    }
    for (i, (_, dir)) in inner.states.iter().enumerate() {
        if *dir != Dir::Stay {
            b.skip_a(inner_q[i], plain_a);
        }
    }
    for r in &inner.rules {
        let (q, q2) = (inner_q[r.from], inner_q[r.to]);
        match (&r.read, &r.write) {
            (InnerSym::Box, InnerSym::Box) => b.rule_box(q, ("box", "box"), q2, ("box", "box")),
            (InnerSym::Work(x), InnerSym::Work(y)) => {
                let (x, y) = (b.m(x), b.m(y));
                b.rule_m(q, x, q2, y);
            }
            _ => {
                return Err(Error::InnerNotReversible(
                    "inner rules may only rewrite the box to itself".into(),
                ))
            }
        }
    }
    let accept = inner.accept.map(|a| inner_q[a]);
    Ok(SimPart {
        start: scan,
        accept,
        rules: b.rules[first_rule..].to_vec(),
        states: (first_state..b.states.len() as u32).collect(),
    })
}

fn check_inner(inner: &InnerMachine) -> Result<()> {
    let n = inner.states.len();
    if inner.start >= n || inner.accept.is_some_and(|a| a >= n) {
        return Err(Error::InnerNotReversible("state index out of range".into()));
    }
    let mut dom = HashSet::new();
    let mut img = HashSet::new();
    for r in &inner.rules {
        if r.from >= n || r.to >= n {
            return Err(Error::InnerNotReversible("state index out of range".into()));
        }
        if !dom.insert((r.from, r.read.clone())) {
            return Err(Error::InnerNotReversible(format!(
                "two rules for ({}, {:?})",
                inner.states[r.from].0, r.read
            )));
        }
        if !img.insert((r.to, r.write.clone())) {
            return Err(Error::InnerNotReversible(format!(
                "two rules produce ({}, {:?})",
                inner.states[r.to].0, r.write
            )));
        }
        if r.read == InnerSym::Box && inner.states[r.from].1 == Dir::Right {
            return Err(Error::InnerNotReversible(format!(
                "right-moving state {} can never read the box",
                inner.states[r.from].0
            )));
        }
    }
    // The decode hands over with (start, box) and the amplification entry
    // reads (accept, box); neither may clash with inner rules.
    if img.contains(&(inner.start, InnerSym::Box)) {
        return Err(Error::InnerNotReversible(
            "an inner rule produces the start state on the box".into(),
        ));
    }
    if let Some(a) = inner.accept {
        if dom.contains(&(a, InnerSym::Box)) {
            return Err(Error::InnerNotReversible(
                "the accept state already has a rule on the box".into(),
            ));
        }
        if inner.states[a].1 == Dir::Right {
            return Err(Error::InnerNotReversible(
                "accept state cannot read the box while moving right".into(),
            ));
        }
    }
    Ok(())
}

/// Builds the staged machine around `inner`.
pub fn build_machine_ma(
    inner: &InnerMachine,
    variant: Variant,
    opts: BuildOptions,
) -> Result<MachineSpec> {
    check_inner(inner)?;
    let a: Vec<&str> = match variant {
        Variant::OneWay => vec!["a1", "a2", "box"],
        Variant::TwoWay => vec!["a1", "a2", "a3", "box", "box2", "box3"],
        Variant::Iid => vec!["a1", "a2", "a3", "box"],
        Variant::Bare => {
            return Err(Error::MalformedSpec("bare machines are not staged".into()))
        }
    };
    let plain_a: Vec<&str> = a.iter().copied().filter(|s| !s.starts_with("box")).collect();
    let mut m: Vec<String> = ["box", "s0", "d", "e"].iter().map(|s| s.to_string()).collect();
    for x in &inner.extra_symbols {
        if m.contains(x) {
            return Err(Error::InnerNotReversible(format!("symbol {x} clashes")));
        }
        m.push(x.clone());
    }
    if variant == Variant::TwoWay {
        m.push("box2".into());
        m.push("box3".into());
    }
    for r in &inner.rules {
        for s in [&r.read, &r.write] {
            if let InnerSym::Work(x) = s {
                if !m.contains(x) || x.starts_with("box") {
                    return Err(Error::InnerNotReversible(format!("unknown work symbol {x}")));
                }
            }
        }
    }
    let mut b = Builder {
        a: a.iter().map(|s| s.to_string()).collect(),
        m,
        states: vec![],
        dirs: vec![],
        rules: vec![],
        by_name: HashMap::new(),
    };
    let mut roles = BTreeMap::new();

    // Stage 1: mark the first cell, keeping its kind and track-1 bits.
    let q1 = b.state("q1_init", 1, false, Dir::Stay);
    roles.insert("q1_init".to_string(), q1);
    let sim = emit_sim(&mut b, inner, opts.pad, &plain_a, "", false)?;
    let (a1, bx, s0) = (b.a("a1"), b.a("box"), b.m("s0"));
    let mbox = b.m("box");
    b.rule(q1, Cell::A(a1), sim.start, Cell::A(bx));
    b.rule_m(q1, s0, sim.start, mbox);
    roles.insert("q2_init".into(), sim.start);
    roles.insert("q2_ret".into(), sim.start + 1);
    roles.insert(
        "q3_init".into(),
        if opts.pad > 0 {
            sim.start + 2
        } else {
            sim.start + 2 + inner.start as u32
        },
    );
    let m_boxes = ["box", "box2", "box3"];

    match variant {
        Variant::OneWay => {
            let q4 = b.state("q4_init", 4, false, Dir::Right);
            roles.insert("q4_init".into(), q4);
            if let Some(acc) = sim.accept {
                roles.insert("q3_halt".into(), acc);
                b.rule_box(acc, ("box", "box"), q4, ("box", "box"));
            }
            let (a1, a2) = (b.a("a1"), b.a("a2"));
            b.rule(q4, Cell::A(a1), q4, Cell::A(a2));
            b.skip_m(q4, &m_boxes);
        }
        Variant::TwoWay => {
            let q40 = b.state("q4_0", 4, false, Dir::Right);
            let q41 = b.state("q4_1", 4, false, Dir::Right);
            let q42 = b.state("q4_2", 4, false, Dir::Left);
            let q43 = b.state("q4_3", 4, false, Dir::Left);
            for (i, q) in [q40, q41, q42, q43].iter().enumerate() {
                roles.insert(format!("q4_{i}"), *q);
            }
            if let Some(acc) = sim.accept {
                roles.insert("q3_halt".into(), acc);
                b.rule_box(acc, ("box", "box"), q41, ("box3", "box3"));
            }
            let (a1, a2, a3) = (Cell::A(b.a("a1")), Cell::A(b.a("a2")), Cell::A(b.a("a3")));
            b.rule(q40, a1, q40, a1);
            b.rule(q40, a2, q40, a2);
            b.rule(q40, a3, q41, a2);
            b.rule_box(q40, ("box2", "box2"), q40, ("box2", "box2"));
            b.rule(q41, a1, q42, a3);
            b.rule(q42, a1, q42, a1);
            b.rule(q42, a2, q42, a2);
            b.rule(q42, a3, q43, a2);
            b.rule_box(q42, ("box2", "box2"), q42, ("box2", "box2"));
            b.rule_box(q42, ("box3", "box3"), q43, ("box2", "box2"));
            b.rule(q43, a1, q40, a3);
            for q in [q40, q41, q42, q43] {
                b.skip_m(q, &m_boxes);
            }
        }
        Variant::Iid => {
            let Some(acc) = sim.accept else {
                // Without acceptance there is no amplification; the machine
                // still needs the stage-4 states for a uniform layout.
                return finish_iid_nonaccepting(b, roles, variant, inner, opts);
            };
            roles.insert("q3_halt".into(), acc);
            let rev = emit_reverse(&mut b, &sim, "")?;
            b.rule_box(acc, ("box", "box"), rev[&acc], ("box", "box"));
            let sim2 = emit_sim(&mut b, inner, opts.pad, &plain_a, "'", true)?;
            let acc2 = sim2.accept.unwrap();
            let rev2 = emit_reverse(&mut b, &sim2, "'")?;
            b.rule_box(acc2, ("box", "box"), rev2[&acc2], ("box", "box"));
            let q3acc = rev[&sim.start];
            let q3acc2 = rev2[&sim2.start];
            roles.insert("q3_acc".into(), q3acc);
            roles.insert("q3_acc'".into(), q3acc2);
            roles.insert("q2_init'".into(), sim2.start);
            let q40 = b.state("q4_0", 4, false, Dir::Right);
            let q41 = b.state("q4_1", 4, false, Dir::Right);
            let q42 = b.state("q4_2", 4, false, Dir::Left);
            for (i, q) in [q40, q41, q42].iter().enumerate() {
                roles.insert(format!("q4_{i}"), *q);
            }
            let (a1, a2, a3) = (Cell::A(b.a("a1")), Cell::A(b.a("a2")), Cell::A(b.a("a3")));
            b.rule_box(q3acc, ("box", "box"), q41, ("box", "box"));
            b.rule(q40, a2, q40, a2);
            b.rule(q40, a3, q41, a2);
            b.rule(q41, a1, q42, a3);
            b.rule(q42, a2, q42, a2);
            b.rule_box(q42, ("box", "box"), sim2.start, ("box", "box"));
            b.rule_box(q3acc2, ("box", "box"), q40, ("box", "box"));
            for q in [q40, q41, q42] {
                b.skip_m(q, &m_boxes);
            }
        }
        Variant::Bare => unreachable!(),
    }
    finish(b, roles, variant, inner, opts)
}

/// Reversed copy of a simulation part: for every rule (q,s)->(q',s') a rule
/// (r(q'),s')->(r(q),s), with r(q) moving opposite to q.
fn emit_reverse(b: &mut Builder, sim: &SimPart, suffix: &str) -> Result<HashMap<u32, u32>> {
    let mut map = HashMap::new();
    for &q in &sim.states {
        let name = format!("rev_{}", b.states[q as usize].name.trim_end_matches('\''));
        let primed = b.states[q as usize].primed;
        let r = b.state(&format!("{name}{suffix}"), 3, primed, b.dirs[q as usize].flip());
        map.insert(q, r);
    }
    for r in sim.rules.clone() {
        b.rule(map[&r.q2], r.write, map[&r.q], r.read);
    }
    Ok(map)
}

fn finish_iid_nonaccepting(
    mut b: Builder,
    mut roles: BTreeMap<String, u32>,
    variant: Variant,
    inner: &InnerMachine,
    opts: BuildOptions,
) -> Result<MachineSpec> {
    let q40 = b.state("q4_0", 4, false, Dir::Right);
    let q41 = b.state("q4_1", 4, false, Dir::Right);
    let q42 = b.state("q4_2", 4, false, Dir::Left);
    for (i, q) in [q40, q41, q42].iter().enumerate() {
        roles.insert(format!("q4_{i}"), *q);
    }
    finish(b, roles, variant, inner, opts)
}

fn finish(
    b: Builder,
    roles: BTreeMap<String, u32>,
    variant: Variant,
    inner: &InnerMachine,
    opts: BuildOptions,
) -> Result<MachineSpec> {
    let mut right = vec![];
    let mut left = vec![];
    let mut stay = vec![];
    for (q, d) in b.dirs.iter().enumerate() {
        match d {
            Dir::Right => right.push(q as u32),
            Dir::Left => left.push(q as u32),
            Dir::Stay => stay.push(q as u32),
        }
    }
    let a_box = b.a.iter().position(|s| s == "box").map(|i| i as u16);
    let m_box = b.m.iter().position(|s| s == "box").map(|i| i as u16);
    let q1 = roles["q1_init"];
    let mut rules = b.rules;
    rules.sort();
    let spec = MachineSpec {
        name: format!("ma_{}_{}", inner.name, variant_tag(variant)),
        variant,
        a_symbols: b.a,
        m_symbols: b.m,
        a_box,
        m_box,
        states: b.states,
        right,
        left,
        stay,
        roles,
        entry_states: vec![q1],
        initial: q1,
        rules,
        reversed: false,
    };
    let d = spec.site_dim();
    if d > opts.symbol_budget {
        return Err(Error::SymbolBudgetExceeded { dim: d, budget: opts.symbol_budget });
    }
    let rep = validate_reversible(&spec);
    if !rep.is_empty() {
        return Err(Error::NotReversible(format!("{rep:?}")));
    }
    Ok(spec)
}

pub fn variant_tag(v: Variant) -> &'static str {
    match v {
        Variant::Bare => "bare",
        Variant::OneWay => "one_way",
        Variant::TwoWay => "two_way",
        Variant::Iid => "iid",
    }
}

pub fn parse_variant(s: &str) -> Option<Variant> {
    match s {
        "bare" => Some(Variant::Bare),
        "one_way" | "one-way" => Some(Variant::OneWay),
        "two_way" | "two-way" => Some(Variant::TwoWay),
        "iid" => Some(Variant::Iid),
        _ => None,
    }
}

/// Convenience: built-in machine by name and variant.
pub fn builtin(name: &str, variant: Variant, opts: BuildOptions) -> Result<MachineSpec> {
    if name == "shuttle" {
        return Ok(shuttle());
    }
    let inner = inner_by_name(name)
        .ok_or_else(|| Error::MalformedSpec(format!("unknown built-in machine {name:?}")))?;
    build_machine_ma(&inner, variant, opts)
}
