//! Acceptance criteria 1–8. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use soctrace::catalog::{Catalog, FlowSet};
use soctrace::lpn::EventLabel;
use soctrace::scenario::{check_compliance, orderings, AnalysisError, Limits, Outcome};
use soctrace::select::{
    branch_selections, distinguishing_power, evaluate, select_bits, select_events, start_end_events,
    strategy_mask, Mode, Row, RowState, Strategy,
};
use soctrace::sim::{simulate, GroundTruth, SimConfig};
use soctrace::trace::{Message, SignalTrace};

use common::*;

struct Report {
    lines: Vec<(usize, bool, String)>,
}

impl Report {
    fn add(&mut self, n: usize, ok: bool, detail: String) {
        println!("criterion {n}: {} - {detail}", if ok { "PASS" } else { "FAIL" });
        self.lines.push((n, ok, detail));
    }
}

fn worked_label(t: &str) -> EventLabel {
    let (s, d, c) = match t {
        "t1" => ("CPU_0", "Cache_0", "wr_req"),
        "t2" => ("Cache_0", "Bus", "rd_req"),
        "t3" => ("Bus", "Cache_1", "snp_req"),
        "t4" => ("Cache_1", "Bus", "snp_miss"),
        "t5" => ("Bus", "Mem", "rd_req"),
        "t6" => ("Mem", "Bus", "rd_resp"),
        "t11" => ("Cache_0", "CPU_0", "rd_resp"),
        other => panic!("no worked-example label {other}"),
    };
    EventLabel::new(s, d, c)
}

fn worked_trace(fs: &FlowSet, seq: &str) -> SignalTrace {
    let steps: Vec<Vec<Message>> = seq
        .split_whitespace()
        .map(|t| {
            vec![Message {
                event: worked_label(t),
                tag: 1,
                sid: 0,
                addr: 0,
                data: 0,
            }]
        })
        .collect();
    SignalTrace::from_messages(&fs.enc, &steps).unwrap()
}

/// Scenario as a sorted list of (start, marking) pairs.
fn shape(fs: &FlowSet, out: &Outcome) -> BTreeSet<Vec<(usize, String)>> {
    out.scenarios
        .iter()
        .map(|s| {
            let mut v: Vec<(usize, String)> = s.records(fs).into_iter().map(|r| (r.start, r.marking)).collect();
            v.sort();
            v
        })
        .collect()
}

fn set(items: &[&[(usize, &str)]]) -> BTreeSet<Vec<(usize, String)>> {
    items
        .iter()
        .map(|v| v.iter().map(|(s, m)| (*s, m.to_string())).collect())
        .collect()
}

fn criterion_1(fs: &FlowSet, r: &mut Report) {
    let mask = val_cmd_mask(fs);
    let t0 = Instant::now();
    let trace = worked_trace(fs, "t1 t2 t1 t2 t3 t3 t4 t4 t5 t6 t5 t6");
    let out = check_compliance(fs, &trace, &mask, &Limits::default()).unwrap();
    let elapsed = t0.elapsed();
    let mut prefix = trace.clone();
    prefix.steps.truncate(5);
    let eq2 = check_compliance(fs, &prefix, &mask, &Limits::default()).unwrap();
    let all_mem_write = out
        .scenarios
        .iter()
        .all(|s| s.records(fs).iter().all(|r| r.flow == "mem_write[X=0]"));
    let ok = out.halt.is_none()
        && out.metrics.final_count == 1
        && shape(fs, &out) == set(&[&[(0, "{p7}"), (2, "{p7}")]])
        && all_mem_write
        && out.metrics.peak == 2
        && out.metrics.peak_step == 4
        && shape(fs, &eq2) == set(&[&[(0, "{p4}"), (2, "{p3}")], &[(0, "{p3}"), (2, "{p4}")]])
        && elapsed < Duration::from_secs(1);
    r.add(
        1,
        ok,
        format!(
            "final {} {:?}, peak {} at step {}, runtime {:.3}s",
            out.metrics.final_count,
            shape(fs, &out),
            out.metrics.peak,
            out.metrics.peak_step,
            elapsed.as_secs_f64()
        ),
    );
}

fn criterion_2(fs: &FlowSet, r: &mut Report) {
    let mask = val_cmd_mask(fs);
    let t0 = Instant::now();
    let trace = worked_trace(fs, "t1 t2 t1 t2 t3 t3 t4 t4 t5 t6 t5 t11");
    let out = check_compliance(fs, &trace, &mask, &Limits::default()).unwrap();
    let elapsed = t0.elapsed();
    let want = set(&[&[(0, "{p7}"), (2, "{p6}")], &[(0, "{p6}"), (2, "{p7}")]]);
    let ok = out.halt_step() == 11 && shape(fs, &out) == want && elapsed < Duration::from_secs(1);
    r.add(
        2,
        ok,
        format!(
            "halt_step {} link {}, scenarios {:?}, runtime {:.3}s",
            out.halt_step(),
            out.halt.as_ref().map_or("-".into(), |h| h.link_name.clone()),
            shape(fs, &out),
            elapsed.as_secs_f64()
        ),
    );
}

fn criterion_3(r: &mut Report) {
    let manifest = "component cpu0\ncomponent DCache0\ncmd wr_req 0b01000000\ncmd rd_req 0b10000000\n\
                    link cpu0 -> DCache0 fields Val:1 Cmd:8 Tag:8 Sid:8 Addr:32 Data:32\n\
                    flow wr.flow\nflow rd.flow\n";
    let cat = Catalog::from_manifest_text("two_events", manifest, &mut |p| {
        let cmd = if p == "wr.flow" { "wr_req" } else { "rd_req" };
        Ok(format!(
            "flow {cmd}_flow\nplace a init\nplace b terminal\ntrans t: a -> b emits (cpu0,DCache0,{cmd})\n"
        ))
    })
    .unwrap();
    let fs = FlowSet::new(cat).unwrap();
    let codes: Vec<(String, u64)> = fs.enc.links[0].cmds.iter().map(|(k, v)| (k.clone(), *v)).collect();
    let low = distinguishing_power(&[0, 1, 2, 3, 4, 5], &codes);
    let b7 = distinguishing_power(&[7], &codes);
    let b6 = distinguishing_power(&[6], &codes);
    let strategy: Strategy = "S2+cmd".parse().unwrap();
    let mask = select_bits(&fs, &select_events(&fs, Mode::S2), &strategy);
    let (off, w) = fs.enc.links[0].field(soctrace::catalog::FieldKind::Cmd).unwrap();
    let cmd_bits: Vec<usize> = (0..w).filter(|&b| mask.bits[0].get(off + b)).collect();
    let ok = low.len() == 1 && b7.len() == 2 && b6.len() == 2 && cmd_bits.len() == 1;
    r.add(
        3,
        ok,
        format!(
            "b5..b0 -> {} block(s), b7 -> {}, b6 -> {}, select_bits Cmd = {:?}",
            low.len(),
            b7.len(),
            b6.len(),
            cmd_bits.iter().map(|b| format!("b{b}")).collect::<Vec<_>>()
        ),
    );
}

fn criterion_4(fs: &FlowSet, r: &mut Report) {
    let f = fs.flow_by_name("mem_write[X=0]").unwrap();
    let lpn = fs.flows[f].lpn();
    let name = |t: usize| lpn.transition(t).name.clone();
    let se: BTreeSet<String> = start_end_events(lpn).into_iter().map(name).collect();
    let got: BTreeSet<BTreeSet<String>> = branch_selections(lpn)
        .into_iter()
        .map(|s| s.into_iter().map(name).chain(se.iter().cloned()).collect())
        .collect();
    let mut want = BTreeSet::new();
    for a in ["t2", "t3"] {
        for b in ["t4", "t5", "t6", "t7"] {
            let s: BTreeSet<String> = ["t1", "t8", "t9", "t10", a, b].iter().map(|s| s.to_string()).collect();
            want.insert(s);
        }
    }
    r.add(4, got == want, format!("{} selections, start/end {:?}", got.len(), se));
}

struct SeedRun {
    seed: u64,
    gt: GroundTruth,
    rows: BTreeMap<String, Row>,
    s1_exact: bool,
    concurrent_same_flow: bool,
}

fn run_seed(fs: &FlowSet, seed: u64, limits: &Limits) -> SeedRun {
    let (trace, gt) = simulate(
        fs,
        &SimConfig {
            seed,
            budget: 10,
            ..Default::default()
        },
    )
    .unwrap();
    let mut rows = BTreeMap::new();
    for s in Strategy::matrix() {
        rows.insert(s.to_string(), evaluate(fs, &s, &trace, Some(&gt), limits).unwrap());
    }
    let wide = Limits {
        max_scenarios: 100_000,
        ..*limits
    };
    let s1 = check_compliance(fs, &trace, &strategy_mask(fs, &Strategy::s1()), &wide).unwrap();
    let want = gt.records(fs);
    let s1_exact = s1.halt.is_none()
        && s1.scenarios.len() == 1
        && sorted_records(fs, &s1.scenarios[0]) == want
        && orderings(&s1.scenarios[0].records(fs)) == orderings(&want);
    let concurrent_same_flow = gt.instances.iter().enumerate().any(|(i, a)| {
        gt.instances[i + 1..].iter().any(|b| {
            a.flow == b.flow && a.start <= b.end.unwrap_or(usize::MAX) && b.start <= a.end.unwrap_or(usize::MAX)
        })
    });
    SeedRun {
        seed,
        gt,
        rows,
        s1_exact,
        concurrent_same_flow,
    }
}

fn criterion_5(runs: &[SeedRun], r: &mut Report) {
    let mut cells = 0;
    let mut terminated = 0;
    let mut missing = Vec::new();
    for run in runs {
        for (s, row) in &run.rows {
            cells += 1;
            if row.state == RowState::Completed {
                terminated += 1;
                if row.ground_truth_found != Some(true) {
                    missing.push(format!("seed {} {s}", run.seed));
                }
            } else if matches!(row.state, RowState::Inconsistent { .. }) {
                missing.push(format!("seed {} {s} halted", run.seed));
            }
        }
    }
    let s1_bad: Vec<u64> = runs.iter().filter(|r| !r.s1_exact).map(|r| r.seed).collect();
    let instances: usize = runs.iter().map(|r| r.gt.instances.len()).sum();
    r.add(
        5,
        missing.is_empty() && s1_bad.is_empty(),
        format!(
            "{} seeds ({instances} instances), {terminated}/{cells} cells terminated within limits; \
             ground truth missing in {:?}; S1 not exact on seeds {:?}",
            runs.len(),
            missing,
            s1_bad
        ),
    );
}

fn criterion_6(fs: &FlowSet, runs: &[SeedRun], r: &mut Report) {
    let fields = ["cmd+tag+sid", "tag+sid", "cmd+sid", "cmd+tag", "us"];
    let bits = |s: &str| strategy_mask(fs, &s.parse().unwrap()).count();
    let s1 = bits("S1");
    let mut a_ok = true;
    let mut a_detail = Vec::new();
    for f in fields {
        let (b2, b3, b4) = (bits(&format!("S2+{f}")), bits(&format!("S3+{f}")), bits(&format!("S4+{f}")));
        a_ok &= b4 < b3 && b3 < b2 && b2 < s1;
        a_detail.push(format!("{f}: {b4}<{b3}<{b2}<{s1}"));
    }

    let peak = |run: &SeedRun, s: &str| run.rows[s].peak;
    let mut b_checked = 0;
    let mut b_fail = Vec::new();
    let mut c_fail = Vec::new();
    let mut d_fail = Vec::new();
    let mut skipped = 0;
    for run in runs {
        for m in ["S2", "S3", "S4"] {
            let full = format!("{m}+cmd+tag+sid");
            if run.rows[&full].state != RowState::Completed {
                skipped += 1;
                continue;
            }
            if run.concurrent_same_flow {
                b_checked += 1;
                if peak(run, &format!("{m}+cmd+tag")) <= peak(run, &full) {
                    b_fail.push(format!("seed {} {m}", run.seed));
                }
            }
            let nocmd = &run.rows[&format!("{m}+tag+sid")];
            let blown = matches!(nocmd.state, RowState::ComplexityExceeded { .. } | RowState::TimeLimit { .. })
                || nocmd.peak >= 10 * peak(run, &full);
            if !blown {
                c_fail.push(format!("seed {} {m}", run.seed));
            }
            let us = &run.rows[&format!("{m}+us")];
            if us.final_count != Some(1) || us.bits >= run.rows[&full].bits {
                d_fail.push(format!("seed {} {m}: final {:?}", run.seed, us.final_count));
            }
        }
    }
    let ok = a_ok && b_fail.is_empty() && c_fail.is_empty() && d_fail.is_empty();
    r.add(
        6,
        ok,
        format!(
            "(a) {}; {} seed/mode cells skipped (full fields over cap); (b) {} checks, failures {:?}; (c) failures {:?}; (d) failures {:?}",
            a_detail.join(", "),
            skipped,
            b_checked,
            b_fail,
            c_fail,
            d_fail
        ),
    );
}

fn criterion_7(fs: &FlowSet, r: &mut Report) {
    let limits = Limits {
        max_scenarios: 20_000,
        time_limit: None,
    };
    let results: Vec<(usize, usize, Vec<String>)> = (0..20u64)
        .into_par_iter()
        .map(|i| {
            let seed = 1000 + i;
            let (trace, _) = simulate(
                fs,
                &SimConfig {
                    seed,
                    budget: 4,
                    ..Default::default()
                },
            )
            .unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut checked, mut skipped, mut fails) = (0, 0, Vec::new());
            for pair in 0..20 {
                let a = random_mask(fs, &mut rng, 0.6);
                let b = random_superset(fs, &a, &mut rng, 0.5);
                assert!(a.is_subset(&b));
                let oa = check_compliance(fs, &trace, &a, &limits);
                let ob = check_compliance(fs, &trace, &b, &limits);
                match (oa, ob) {
                    (Ok(oa), Ok(ob)) => {
                        checked += 1;
                        let va: BTreeSet<_> = oa.scenarios.iter().map(|s| type3(fs, s)).collect();
                        let vb: BTreeSet<_> = ob.scenarios.iter().map(|s| type3(fs, s)).collect();
                        if !vb.is_subset(&va) || ob.metrics.peak > oa.metrics.peak || oa.halt.is_some() {
                            fails.push(format!("seed {seed} pair {pair}"));
                        }
                    }
                    (Err(AnalysisError::ComplexityExceeded { .. }), Ok(_)) => checked += 1,
                    (Ok(_), Err(AnalysisError::ComplexityExceeded { .. })) => {
                        fails.push(format!("seed {seed} pair {pair}: only the finer mask blew up"))
                    }
                    _ => skipped += 1,
                }
            }
            (checked, skipped, fails)
        })
        .collect();
    let checked: usize = results.iter().map(|r| r.0).sum();
    let skipped: usize = results.iter().map(|r| r.1).sum();
    let fails: Vec<String> = results.into_iter().flat_map(|r| r.2).collect();
    r.add(
        7,
        fails.is_empty() && checked > 0,
        format!("20 traces x 20 pairs: {checked} compared, {skipped} both over the scenario cap, failures {fails:?}"),
    );
}

fn criterion_8(fs: &FlowSet, r: &mut Report) {
    let limits = Limits {
        max_scenarios: 5_000,
        time_limit: None,
    };
    let results: Vec<(usize, usize, Vec<String>)> = (0..20u64)
        .into_par_iter()
        .map(|i| {
            let seed = 2000 + i;
            let (mut trace, _) = simulate(
                fs,
                &SimConfig {
                    seed,
                    budget: 2,
                    probability: 0.3,
                    ..Default::default()
                },
            )
            .unwrap();
            trace.steps.truncate(40);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut masks: Vec<(String, soctrace::trace::SelectionMask)> = Strategy::matrix()
                .into_iter()
                .map(|s| (s.to_string(), strategy_mask(fs, &s)))
                .collect();
            for k in 0..4 {
                masks.push((format!("random{k}"), random_mask(fs, &mut rng, 0.5)));
            }
            let (mut runs, mut scenarios, mut fails) = (0, 0, Vec::new());
            for (name, mask) in &masks {
                let Ok(out) = check_compliance(fs, &trace, mask, &limits) else { continue };
                runs += 1;
                for s in &out.scenarios {
                    scenarios += 1;
                    if !replay_ok(fs, &trace, mask, s) {
                        fails.push(format!("seed {seed} {name}"));
                        break;
                    }
                }
            }
            (runs, scenarios, fails)
        })
        .collect();
    let runs: usize = results.iter().map(|r| r.0).sum();
    let scenarios: usize = results.iter().map(|r| r.1).sum();
    let fails: Vec<String> = results.into_iter().flat_map(|r| r.2).collect();
    r.add(
        8,
        fails.is_empty() && scenarios > 0,
        format!("{runs} analyses of 20 traces (<= 40 steps), {scenarios} final scenarios replayed, failures {fails:?}"),
    );
}

fn main() -> ExitCode {
    let fs = FlowSet::bundled();
    let mut r = Report { lines: vec![] };
    criterion_1(&fs, &mut r);
    criterion_2(&fs, &mut r);
    criterion_3(&mut r);
    criterion_4(&fs, &mut r);

    let limits = Limits {
        max_scenarios: 20_000,
        time_limit: Some(Duration::from_secs(120)),
    };
    let t0 = Instant::now();
    let runs: Vec<SeedRun> = (0..50u64).into_par_iter().map(|s| run_seed(&fs, s, &limits)).collect();
    eprintln!("seed sweep took {:.1}s", t0.elapsed().as_secs_f64());
    criterion_5(&runs, &mut r);
    criterion_6(&fs, &runs, &mut r);
    criterion_7(&fs, &mut r);
    criterion_8(&fs, &mut r);

    let failed = r.lines.iter().filter(|l| !l.1).count();
    println!("acceptance: {} passed, {failed} failed", r.lines.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
