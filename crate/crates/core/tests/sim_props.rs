//! Simulator and bug injection.

mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use soctrace::catalog::{FieldKind, FlowSet};
use soctrace::lpn::EventLabel;
use soctrace::scenario::{check_compliance, Instance, Limits, Scenario};
use soctrace::sim::{inject_bug, occurrences, simulate, BugSpec, GroundTruth, SimConfig};
use soctrace::trace::{BitConstraint, SelectionMask};

use common::*;

fn cfg(seed: u64, budget: usize) -> SimConfig {
    SimConfig {
        seed,
        budget,
        probability: 0.3,
        ..Default::default()
    }
}

fn gt_scenario(fs: &FlowSet, gt: &GroundTruth) -> Scenario {
    let mut ordinals: BTreeMap<(usize, usize), u32> = BTreeMap::new();
    let instances = gt
        .instances
        .iter()
        .map(|g| {
            let flow = fs.flow_by_name(&g.flow).unwrap();
            let lpn = fs.flows[flow].lpn();
            let path: Vec<u16> = g.path.iter().map(|t| lpn.transition_index(t).unwrap() as u16).collect();
            let mut m = lpn.initial();
            for &t in &path {
                m = lpn.fire(m, t as usize).unwrap().0;
            }
            let o = ordinals.entry((flow, g.start)).or_insert(0);
            *o += 1;
            Instance {
                flow,
                start: g.start,
                ordinal: *o - 1,
                marking: m,
                end: g.end,
                path,
                sid: BitConstraint::exact(g.sid, 8),
            }
        })
        .collect();
    Scenario::from_instances(instances)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Some interleaving of the recorded paths produces every bit of the
    /// trace's Val, Cmd, Tag, Sid and status fields.
    #[test]
    fn ground_truth_replays_under_full_observation(seed in 0u64..100_000) {
        let fs = FlowSet::bundled();
        let (mut trace, mut gt) = simulate(&fs, &cfg(seed, 1)).unwrap();
        // Replay a 40-step window; instances cut by its edge would leave
        // unexplained messages.
        let cut = 40.min(trace.len());
        prop_assume!(gt.instances.iter().all(|i| i.start >= cut || i.end.is_some_and(|e| e < cut)));
        trace.steps.truncate(cut);
        gt.instances.retain(|i| i.start < cut);
        let mask = SelectionMask::fields(&fs.enc, &[FieldKind::Val, FieldKind::Cmd, FieldKind::Tag, FieldKind::Sid], true);
        prop_assert!(replay_ok(&fs, &trace, &mask, &gt_scenario(&fs, &gt)));
    }

    #[test]
    fn one_message_per_transition(seed in 0u64..100_000) {
        let fs = FlowSet::bundled();
        let (trace, gt) = simulate(&fs, &cfg(seed, 2)).unwrap();
        let sent: usize = trace
            .steps
            .iter()
            .map(|row| (0..fs.enc.message_links).filter(|&k| row[k].get(0)).count())
            .sum();
        let fired: usize = gt.instances.iter().map(|i| i.path.len()).sum();
        prop_assert_eq!(sent, fired);
        prop_assert!(gt.instances.iter().all(|i| i.end.is_some()));
    }

    #[test]
    fn sids_unique_and_tags_match_initiator(seed in 0u64..100_000) {
        let fs = FlowSet::bundled();
        let (trace, gt) = simulate(&fs, &cfg(seed, 4)).unwrap();
        let mut per_block: BTreeMap<String, BTreeSet<u64>> = BTreeMap::new();
        let mut count: BTreeMap<String, usize> = BTreeMap::new();
        for i in &gt.instances {
            let f = &fs.flows[fs.flow_by_name(&i.flow).unwrap()];
            per_block.entry(f.initiator.clone()).or_default().insert(i.sid);
            *count.entry(f.initiator.clone()).or_default() += 1;
        }
        for (b, sids) in &per_block {
            prop_assert_eq!(sids.len(), count[b], "duplicate sid for {}", b);
            prop_assert_eq!(count[b], 4, "budget for {}", b);
        }
        // Every message carries the tag and sid of an instance active then.
        for (h, row) in trace.steps.iter().enumerate() {
            for k in 0..fs.enc.message_links {
                if !row[k].get(0) {
                    continue;
                }
                let l = &fs.enc.links[k];
                let (toff, tw) = l.field(FieldKind::Tag).unwrap();
                let (soff, sw) = l.field(FieldKind::Sid).unwrap();
                let (tag, sid) = (row[k].field(toff, tw), row[k].field(soff, sw));
                let ok = gt.instances.iter().any(|i| {
                    let f = &fs.flows[fs.flow_by_name(&i.flow).unwrap()];
                    i.start <= h && i.end.is_none_or(|e| e >= h) && f.initiator_tag == tag && i.sid == sid
                        && i.path.iter().any(|t| f.links[f.lpn().transition_index(t).unwrap()] == k)
                });
                prop_assert!(ok, "step {} link {} tag {} sid {}", h, l.name, tag, sid);
            }
        }
    }

    #[test]
    fn ground_truth_text_round_trip(seed in 0u64..100_000) {
        let fs = FlowSet::bundled();
        let (_, gt) = simulate(&fs, &cfg(seed, 2)).unwrap();
        prop_assert_eq!(GroundTruth::parse(&gt.to_text()).unwrap(), gt);
    }

    /// A corrupted trace agrees with the original before the corrupted
    /// step, so any halt comes at or after it.
    #[test]
    fn corruption_halts_no_earlier_than_the_change(seed in 0u64..100_000) {
        let fs = FlowSet::bundled();
        let (trace, _) = simulate(&fs, &cfg(seed, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let busy: Vec<(usize, usize)> = (0..trace.len())
            .flat_map(|h| (0..fs.enc.message_links).map(move |k| (h, k)))
            .filter(|&(h, k)| trace.steps[h][k].get(0))
            .collect();
        let (h, k) = busy[rng.gen_range(0..busy.len())];
        let l = &fs.enc.links[k];
        let (coff, cw) = l.field(FieldKind::Cmd).unwrap();
        let code = trace.steps[h][k].field(coff, cw);
        let old_cmd = l.cmds.iter().find(|(_, &v)| v == code).unwrap().0.clone();
        let (src, dest) = l.name.split_once("->").unwrap();
        let old = EventLabel::new(src, dest, old_cmd);
        let new = fs.events[rng.gen_range(0..fs.events.len())].clone();
        let occ = occurrences(&fs, &trace, &old).unwrap();
        let n = occ.iter().position(|&s| s == h).unwrap() + 1;
        let (bad, step) = inject_bug(&fs, &trace, &BugSpec { old, new, occurrence: Some(n) }).unwrap();
        prop_assert_eq!(step, h);
        prop_assert_eq!(&bad.steps[..h], &trace.steps[..h]);
        prop_assert_eq!(&bad.steps[h + 1..], &trace.steps[h + 1..]);
        let out = check_compliance(&fs, &bad, &SelectionMask::fields(&fs.enc, &[FieldKind::Val, FieldKind::Cmd, FieldKind::Tag, FieldKind::Sid], false), &Limits { max_scenarios: 50_000, time_limit: None });
        if let Ok(out) = out {
            if let Some(halt) = out.halt {
                prop_assert!(halt.step >= h);
            }
        }
    }
}

#[test]
fn blocking_cache_serializes_cpu_accesses() {
    let fs = FlowSet::bundled();
    for seed in 0..10 {
        let (_, gt) = simulate(&fs, &SimConfig { seed, budget: 6, probability: 0.5, ..Default::default() }).unwrap();
        let cached: Vec<_> = gt
            .instances
            .iter()
            .filter(|i| i.template == "mem_read" || i.template == "mem_write")
            .collect();
        for (i, a) in cached.iter().enumerate() {
            for b in &cached[i + 1..] {
                let same_cpu = a.binding == b.binding;
                let overlap = a.start <= b.end.unwrap() && b.start <= a.end.unwrap();
                assert!(!(same_cpu && overlap), "seed {seed}: {} and {} overlap", a.flow, b.flow);
            }
        }
    }
}

#[test]
fn non_blocking_cache_reproduces_interleaved_writes() {
    // Two overlapping writes from CPU_0, the shape of the worked example.
    let fs = FlowSet::bundled();
    let found = (0..50).any(|seed| {
        let (trace, gt) = simulate(
            &fs,
            &SimConfig {
                seed,
                budget: 2,
                probability: 0.5,
                blocking_cache: false,
                templates: vec!["mem_write".into()],
                blocks: vec!["CPU_0".into()],
                ..Default::default()
            },
        )
        .unwrap();
        let [a, b] = &gt.instances[..] else { return false };
        let overlap = b.start <= a.end.unwrap();
        if overlap {
            let out = check_compliance(&fs, &trace, &val_cmd_mask(&fs), &Limits::default()).unwrap();
            assert!(out.halt.is_none());
            let truth = soctrace::scenario::project(&gt.records(&fs), soctrace::scenario::ViewLevel::Type3);
            assert!(out.scenarios.iter().any(|s| type3(&fs, s) == truth));
        }
        overlap
    });
    assert!(found);
}

#[test]
fn worked_example_swap_is_detected() {
    let fs = FlowSet::bundled();
    let mut halted = 0;
    for seed in 0..20 {
        let (trace, _) = simulate(
            &fs,
            &SimConfig {
                seed,
                budget: 2,
                probability: 0.5,
                blocking_cache: false,
                templates: vec!["mem_write".into()],
                blocks: vec!["CPU_0".into()],
                ..Default::default()
            },
        )
        .unwrap();
        let bug = BugSpec::parse("swap:Mem:Bus:rd_resp=Cache_0:CPU_0:rd_resp@last").unwrap();
        let Ok((bad, step)) = inject_bug(&fs, &trace, &bug) else { continue };
        let out = check_compliance(&fs, &bad, &val_cmd_mask(&fs), &Limits::default()).unwrap();
        let h = out.halt.expect("corrupted write must halt");
        assert!(h.step >= step);
        halted += 1;
    }
    assert!(halted > 0);
}
