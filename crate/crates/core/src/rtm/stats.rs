//! Per-step symbol counts along an orbit.

use num_rational::Ratio;
use serde::Serialize;

use super::{Cell, Configuration, Machine, MachineSpec, Orbit, Site, Terminal, WalkEvent, Walker};
use crate::error::{Error, Result};

pub fn count_symbol(c: &Configuration, k: u16) -> usize {
    c.sites
        .iter()
        .filter(|s| matches!(s, Site::Cell(Cell::A(x)) if *x == k))
        .count()
}

#[derive(Clone, Debug, Serialize)]
pub struct AmpStats {
    /// `N(j)` for j = 1..J (the cycle closure is not repeated).
    pub counts: Vec<usize>,
    pub terminal: Terminal,
    pub sum: u64,
    /// (1/J) sum_j N(j)/(L+1), exact.
    #[serde(skip)]
    pub average_exact: Ratio<i128>,
    pub average: f64,
}

fn a_index(spec: &MachineSpec, sym: &str) -> Result<u16> {
    spec.a_sym(sym)
        .ok_or_else(|| Error::MalformedSpec(format!("no A-cell symbol {sym:?}")))
}

pub fn amplification_stats(spec: &MachineSpec, orbit: &Orbit, sym: &str) -> Result<AmpStats> {
    let k = a_index(spec, sym)?;
    let counts: Vec<usize> = orbit.states.iter().map(|c| count_symbol(c, k)).collect();
    let sum: u64 = counts.iter().map(|&x| x as u64).sum();
    let sites = orbit.states.first().map_or(1, |c| c.len()) as i128;
    let j = counts.len().max(1) as i128;
    let average_exact = Ratio::new(sum as i128, j * sites);
    Ok(AmpStats {
        average: sum as f64 / (j as f64 * sites as f64),
        counts,
        terminal: orbit.terminal,
        sum,
        average_exact,
    })
}

/// Summary of a streamed orbit.
#[derive(Clone, Debug, Serialize)]
pub struct StreamStats {
    pub terminal: Terminal,
    /// Number of distinct configurations (J or the period).
    pub len: usize,
    /// Per tracked symbol, sum over the orbit of its count.
    pub sums: Vec<u64>,
    /// Per tracked symbol, the count in the last configuration.
    pub last: Vec<usize>,
    /// Index j of the last configuration before the control first enters a
    /// stage-4 state, if it does.
    pub j0: Option<usize>,
    /// Indices j at which the first tracked symbol's count went up.
    pub increments: Vec<usize>,
    /// First tracked symbol's count per configuration, if requested.
    pub series: Option<Vec<u32>>,
}

impl StreamStats {
    pub fn average(&self, k: usize, sites: usize) -> f64 {
        self.sums[k] as f64 / (self.len as f64 * sites as f64)
    }
}

/// Walks the orbit of `c` without storing it, tracking A-cell symbol counts.
pub fn stream_stats(
    m: &Machine,
    c: &Configuration,
    syms: &[&str],
    max_steps: usize,
    keep_series: bool,
) -> Result<StreamStats> {
    let ks: Vec<u16> = syms
        .iter()
        .map(|s| a_index(&m.spec, s))
        .collect::<Result<_>>()?;
    let mut counts: Vec<usize> = ks.iter().map(|&k| count_symbol(c, k)).collect();
    let mut sums: Vec<u64> = counts.iter().map(|&x| x as u64).collect();
    let mut series = keep_series.then(|| vec![counts.first().copied().unwrap_or(0) as u32]);
    let mut increments = Vec::new();
    let stage4 = |s: Site| match s {
        Site::Ctrl { q, .. } => m.spec.states[q as usize].stage == 4,
        _ => false,
    };
    let mut w = Walker::new(m, c)?;
    let mut j0 = None;
    let mut steps = 0usize;
    let terminal = loop {
        if steps == max_steps {
            break Terminal::Truncated;
        }
        steps += 1;
        match w.advance() {
            WalkEvent::DeadEnd => break Terminal::DeadEnd(w.j),
            WalkEvent::Closed => break Terminal::Cycle(w.j - 1),
            WalkEvent::Moved { pos, old } => {
                let cur = w.current();
                let touched = if pos[0] == pos[1] { 1 } else { 2 };
                for (t, &kk) in ks.iter().enumerate() {
                    let before = counts[t];
                    for i in 0..touched {
                        let was = matches!(old[i], Site::Cell(Cell::A(x)) if x == kk);
                        let now = matches!(cur.sites[pos[i]], Site::Cell(Cell::A(x)) if x == kk);
                        counts[t] = (counts[t] as isize + now as isize - was as isize) as usize;
                    }
                    sums[t] += counts[t] as u64;
                    if t == 0 && counts[0] > before {
                        increments.push(w.j);
                    }
                }
                if j0.is_none() && stage4(cur.sites[w.control()]) {
                    j0 = Some(w.j - 1);
                }
                if let Some(s) = series.as_mut() {
                    s.push(counts.first().copied().unwrap_or(0) as u32);
                }
            }
        }
    };
    let len = match terminal {
        Terminal::DeadEnd(j) | Terminal::Cycle(j) => j,
        Terminal::Truncated => w.j,
    };
    Ok(StreamStats {
        terminal,
        len,
        sums,
        last: counts,
        j0,
        increments,
        series,
    })
}
