use std::path::Path;
use std::process::{Command, Output};

use hca_cli::ExperimentConfig;
use hca_core::rtm::build::{builtin, BuildOptions};
use hca_core::{run_orbit, Boundary, Machine, Terminal, Variant};
use clap::Parser;
use serde_json::Value;

fn hca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hca")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = hca(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn json(args: &[&str]) -> Value {
    serde_json::from_str(&ok(args)).unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

/// Data rows of a CSV artifact (comment lines and header dropped).
fn csv_rows(text: &str) -> Vec<Vec<String>> {
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn orbit_of_the_halting_fixture_dead_ends() {
    let out = ok(&["orbit", "--machine", "halt_now", "--lattice", "6", "--tape", "A:a1,M:00:s0,M:01:s0"]);
    let lines: Vec<Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let head = &lines[0];
    assert_eq!(head["terminal"], "dead_end");
    // same orbit straight from the library
    let s = builtin("halt_now", Variant::OneWay, BuildOptions::default()).unwrap();
    let mut cells: Vec<_> = ["A:a1", "M:00:s0", "M:01:s0"].iter().map(|t| s.parse_cell(t).unwrap()).collect();
    cells.resize(6, s.fresh_a());
    let x = s.initial_config(&cells, Boundary::Periodic);
    let o = run_orbit(&Machine::new(s.clone()).unwrap(), &x, 10_000).unwrap();
    let Terminal::DeadEnd(j) = o.terminal else { panic!() };
    assert_eq!(head["len"], j);
    assert_eq!(lines.len() - 1, j);
    for (k, rec) in lines[1..].iter().enumerate() {
        assert_eq!(rec["j"], k + 1);
        let tags: Vec<String> = serde_json::from_value(rec["sites"].clone()).unwrap();
        assert_eq!(tags, s.config_tags(&o.states[k]));
    }
    assert_eq!(head["version"], hca_cli::VERSION);
}

#[test]
fn orbit_csv_series() {
    let out = ok(&["orbit", "--format", "csv", "--machine", "halt_now", "--lattice", "6", "--tape", "A:a1,M:00:s0,M:01:s0"]);
    assert!(out.starts_with("# hca "));
    assert!(out.contains("# terminal: dead_end"));
    let rows = csv_rows(&out);
    // a1 + a2 is conserved after the first step; a2 ends at the full sweep
    let n2: Vec<usize> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert_eq!(n2[0], 0);
    assert!(*n2.last().unwrap() > 0);
}

#[test]
fn bare_shuttle_cycles() {
    let v = ok(&["orbit", "--machine", "shuttle", "--bare", "--lattice", "4", "--tape", "A:box,A:c,A:c,A:end"]);
    let head: Value = serde_json::from_str(v.lines().next().unwrap()).unwrap();
    assert_eq!(head["terminal"], "cycle");
}

#[test]
fn missing_machine_file_is_an_input_error() {
    let o = hca(&["orbit", "--machine", "no/such/machine.json", "--lattice", "4"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("machine spec not found"));
    let o = hca(&["orbit", "--machine", "halt_now", "--lattice", "4", "--tape", "Q:zz"]);
    assert_eq!(o.status.code(), Some(2));
    let o = hca(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn evolve_starts_near_e1_for_the_anchored_state() {
    // v = 11 has eps1 = 1/4 and alpha = 1/256
    let args = [
        "evolve", "--format", "csv", "--machine", "halt_now", "--lattice", "64", "--v", "11", "--samples", "200",
        "--override-params", "--seed", "5", "--times", "0",
    ];
    let rows = csv_rows(&ok(&args));
    let d: f64 = rows[0][1].parse().unwrap();
    assert!(d <= 0.25, "{d}");
}

#[test]
fn evolve_without_m_cells_stays_put() {
    let l = 8;
    let args = [
        "evolve", "--format", "csv", "--machine", "halt_now", "--lattice", "8", "--v", "11", "--alpha", "0",
        "--override-params", "--t-max", "20", "--t-points", "21",
    ];
    let rows = csv_rows(&ok(&args));
    assert_eq!(rows.len(), 21);
    let d: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    let bookkeeping = 2.0 / (l + 1) as f64;
    for x in &d {
        assert!((x - d[0]).abs() <= bookkeeping + 1e-12);
        assert!(*x <= 2.0 * bookkeeping + 1e-12);
    }
}

#[test]
fn evolve_is_reproducible() {
    let base = [
        "evolve", "--format", "csv", "--machine", "halt_now", "--variant", "iid", "--lattice", "12", "--v", "11",
        "--alpha", "1/8", "--block-scale", "3", "--samples", "40", "--override-params", "--seed", "9", "--t-max",
        "5", "--t-points", "6",
    ];
    let a = hca(&base);
    let b = hca(&base);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let mut one = base.to_vec();
    one.extend(["--threads", "1"]);
    let mut four = base.to_vec();
    four.extend(["--threads", "4"]);
    assert_eq!(hca(&one).stdout, a.stdout);
    assert_eq!(hca(&four).stdout, a.stdout);
    let mut other = base.to_vec();
    let seed_at = other.len() - 5;
    other[seed_at] = "10";
    assert_ne!(hca(&other).stdout, a.stdout);
}

#[test]
fn dense_evolution_agrees_with_orbit_path() {
    let common = ["evolve", "--machine", "halt_now", "--lattice", "5", "--tape", "M:00:s0,M:01:s0", "--times", "0.7,3.1"];
    let orbit = json(&common);
    let mut d = common.to_vec();
    d.push("--dense");
    let dense = json(&d);
    for (a, b) in orbit["rows"].as_array().unwrap().iter().zip(dense["rows"].as_array().unwrap()) {
        let x = a["dist_e1"].as_f64().unwrap();
        let y = b["dist_e1"].as_f64().unwrap();
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn dimension_guard_exit_code() {
    let o = hca(&[
        "evolve", "--machine", "halt_now", "--lattice", "5", "--tape", "M:00:s0,M:01:s0", "--dense", "--dim-limit", "3",
    ]);
    assert_eq!(o.status.code(), Some(3));
    // enumerating a product ensemble this large needs --samples
    let o = hca(&["evolve", "--machine", "halt_now", "--lattice", "40", "--v", "11", "--override-params"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn size_constraints_need_override() {
    let o = hca(&["sample-good", "--v", "11", "--lattice", "100", "--samples", "10"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--override-params"));
    let v = json(&["sample-good", "--v", "101", "--alpha", "1/16", "--lattice", "4096", "--samples", "500", "--override-params"]);
    assert_eq!(v["estimate"]["samples"], 500);
    assert!(!v["violations"].as_array().unwrap().is_empty());
}

#[test]
fn timeavg_laws() {
    let uniform = json(&["timeavg", "--machine", "halt_now", "--lattice", "5", "--tape", "M:00:s0,M:01:s0"]);
    let exact = json(&["timeavg", "--machine", "halt_now", "--lattice", "5", "--tape", "M:00:s0,M:01:s0", "--exact"]);
    let r = uniform["radius"].as_f64().unwrap();
    let a = uniform["dist_e1"].as_f64().unwrap();
    let b = exact["dist_e1"].as_f64().unwrap();
    assert!((a - b).abs() <= r + 1e-12);
    assert_eq!(exact["law"], "spectral_projection");
}

fn instance(name: &str, variant: &str) -> String {
    format!(
        r#"{{"machine":{{"builtin":{{"name":"{name}","variant":"{variant}"}}}},
"ensemble":{{"tapes":[{{"cells":["M:00:s0","M:01:s0"]}}]}},
"lattice":5,"eta":0.9,"eps1":0.1,"gamma":2.0,"t0_override":64.0}}"#
    )
}

#[test]
fn decide_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let halt = write(dir.path(), "halt.json", &instance("halt_now", "one_way"));
    let pp = write(dir.path(), "pp.json", &instance("ping_pong", "one_way"));
    let v = json(&["decide", "--instance", &halt]);
    assert_eq!(v["verdict"], "yes");
    assert!(v["decision"]["ledger"].as_array().unwrap().len() >= 4);
    assert_eq!(v["instance"]["lattice"], 5);
    assert_eq!(json(&["decide", "--instance", &pp])["verdict"], "no");
    assert_eq!(json(&["decide", "--instance", &pp, "--semi", "--budget", "40"])["verdict"], "budget_exhausted");
    assert_eq!(json(&["decide", "--instance", &halt, "--semi", "--budget", "500"])["verdict"], "yes");
    // the flag wins over the file
    let w = json(&["decide", "--instance", &halt, "--t0-override", "32"]);
    assert_eq!(w["instance"]["t0_override"], 32.0);
}

#[test]
fn decide_rejects_malformed_json() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.json", "{\"machine\": ");
    let o = hca(&["decide", "--instance", &bad]);
    assert_eq!(o.status.code(), Some(2));
    let o = hca(&["decide", "--instance", "/no/such/instance.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn phase_decode_and_gap() {
    let v = json(&["phase-decode", "--beta", "5/8", "--n-prime", "5"]);
    assert_eq!(v["result"]["v"], "101");
    assert_eq!(v["result"]["len"], 3);
    assert_eq!(json(&["phase-decode", "--v", "11", "--n-prime", "8"])["result"]["len"], 2);
    assert_eq!(hca(&["phase-decode", "--beta", "5/8", "--n-prime", "2"]).status.code(), Some(2));
    let g = json(&["gap", "--len", "7"]);
    assert_eq!(g["floor"], "1/8");
    assert!((g["min_gap"].as_f64().unwrap() - 0.4335).abs() < 1e-3);
    assert_eq!(g["holds"], true);
}

#[test]
fn built_machine_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let p = path.to_str().unwrap();
    ok(&["build-machine", "--machine", "ping_pong", "--variant", "two-way", "--out", p]);
    let text = std::fs::read_to_string(&path).unwrap();
    let doc: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(doc["meta"]["version"], hca_cli::VERSION);
    let loaded = hca_core::rtm::json::spec_from_str(&text).unwrap();
    assert_eq!(loaded, builtin("ping_pong", Variant::TwoWay, BuildOptions::default()).unwrap());
    let a = ok(&["orbit", "--machine", p, "--lattice", "6", "--tape", "M:00:s0,M:01:s0"]);
    let b = ok(&["orbit", "--machine", "ping_pong", "--variant", "two-way", "--lattice", "6", "--tape", "M:00:s0,M:01:s0"]);
    assert_eq!(a.lines().skip(1).collect::<Vec<_>>(), b.lines().skip(1).collect::<Vec<_>>());
}

#[test]
fn config_round_trips_and_is_embedded() {
    let args = ["hca", "evolve", "--machine", "halt_now", "--lattice", "5", "--tape", "M:01:s0", "--times", "0,1", "--seed", "3"];
    let cfg = ExperimentConfig::parse_from(args);
    let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
    assert_eq!(back, cfg);
    let out = json(&args[1..]);
    assert_eq!(out["config"], cfg.to_json());
}
