//! JSON schema for machine specs and orbit export.
//!
//! States and symbols are referenced by name; cells use the tags `A:<sym>`
//! and `M:<b1><b2>:<sym>`, control sites `m0:<state>` / `m1:<state>`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{MachineSpec, Orbit, Rule, StateInfo, Variant};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineJson {
    pub name: String,
    pub variant: Variant,
    pub a_symbols: Vec<String>,
    pub m_symbols: Vec<String>,
    #[serde(default)]
    pub a_box: Option<String>,
    #[serde(default)]
    pub m_box: Option<String>,
    pub states: Vec<StateInfo>,
    pub right: Vec<String>,
    pub left: Vec<String>,
    pub stay: Vec<String>,
    #[serde(default)]
    pub roles: BTreeMap<String, String>,
    #[serde(default)]
    pub entry_states: Vec<String>,
    pub initial: String,
    /// Quadruples `[state, read, next state, write]`.
    pub rules: Vec<[String; 4]>,
    #[serde(default)]
    pub reversed: bool,
}

pub fn to_json(spec: &MachineSpec) -> MachineJson {
    let st = |q: &u32| spec.state_name(*q).to_string();
    MachineJson {
        name: spec.name.clone(),
        variant: spec.variant,
        a_symbols: spec.a_symbols.clone(),
        m_symbols: spec.m_symbols.clone(),
        a_box: spec.a_box.map(|k| spec.a_symbols[k as usize].clone()),
        m_box: spec.m_box.map(|k| spec.m_symbols[k as usize].clone()),
        states: spec.states.clone(),
        right: spec.right.iter().map(st).collect(),
        left: spec.left.iter().map(st).collect(),
        stay: spec.stay.iter().map(st).collect(),
        roles: spec.roles.iter().map(|(k, v)| (k.clone(), st(v))).collect(),
        entry_states: spec.entry_states.iter().map(st).collect(),
        initial: st(&spec.initial),
        rules: spec
            .rules
            .iter()
            .map(|r| {
                [
                    st(&r.q),
                    spec.cell_tag(r.read),
                    st(&r.q2),
                    spec.cell_tag(r.write),
                ]
            })
            .collect(),
        reversed: spec.reversed,
    }
}

pub fn from_json(j: &MachineJson) -> Result<MachineSpec> {
    let mut names = std::collections::HashSet::new();
    for s in &j.states {
        if !names.insert(s.name.as_str()) {
            return Err(Error::MalformedSpec(format!("duplicate state {}", s.name)));
        }
    }
    let find_sym = |list: &[String], s: &Option<String>| -> Result<Option<u16>> {
        match s {
            None => Ok(None),
            Some(x) => list
                .iter()
                .position(|y| y == x)
                .map(|i| Some(i as u16))
                .ok_or_else(|| Error::MalformedSpec(format!("unknown box symbol {x}"))),
        }
    };
    let mut spec = MachineSpec {
        name: j.name.clone(),
        variant: j.variant,
        a_symbols: j.a_symbols.clone(),
        m_symbols: j.m_symbols.clone(),
        a_box: find_sym(&j.a_symbols, &j.a_box)?,
        m_box: find_sym(&j.m_symbols, &j.m_box)?,
        states: j.states.clone(),
        right: vec![],
        left: vec![],
        stay: vec![],
        roles: BTreeMap::new(),
        entry_states: vec![],
        initial: 0,
        rules: vec![],
        reversed: j.reversed,
    };
    let q = |n: &str| {
        spec.state(n)
            .ok_or_else(|| Error::MalformedSpec(format!("unknown state {n:?}")))
    };
    let right = j.right.iter().map(|n| q(n)).collect::<Result<Vec<_>>>()?;
    let left = j.left.iter().map(|n| q(n)).collect::<Result<Vec<_>>>()?;
    let stay = j.stay.iter().map(|n| q(n)).collect::<Result<Vec<_>>>()?;
    let roles = j
        .roles
        .iter()
        .map(|(k, v)| Ok((k.clone(), q(v)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let entry = j.entry_states.iter().map(|n| q(n)).collect::<Result<Vec<_>>>()?;
    let initial = q(&j.initial)?;
    let mut rules = Vec::with_capacity(j.rules.len());
    for r in &j.rules {
        let cell = |t: &str| {
            spec.parse_cell(t)
                .map_err(|e| Error::MalformedSpec(e.to_string()))
        };
        rules.push(Rule {
            q: q(&r[0])?,
            read: cell(&r[1])?,
            q2: q(&r[2])?,
            write: cell(&r[3])?,
        });
    }
    spec.right = right;
    spec.left = left;
    spec.stay = stay;
    spec.roles = roles;
    spec.entry_states = entry;
    spec.initial = initial;
    spec.rules = rules;
    Ok(spec)
}

pub fn spec_to_string(spec: &MachineSpec) -> String {
    serde_json::to_string_pretty(&to_json(spec)).expect("machine json")
}

pub fn spec_from_str(s: &str) -> Result<MachineSpec> {
    let j: MachineJson =
        serde_json::from_str(s).map_err(|e| Error::Parse(format!("machine json: {e}")))?;
    from_json(&j)
}

/// One JSON object per configuration: `{"j": 1, "sites": [...]}`.
pub fn orbit_jsonl(spec: &MachineSpec, orbit: &Orbit) -> String {
    let mut out = String::new();
    for (k, c) in orbit.states.iter().enumerate() {
        let line = serde_json::json!({ "j": k + 1, "sites": spec.config_tags(c) });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}
