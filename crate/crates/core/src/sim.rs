//! Message-level SoC simulator producing traces with ground truth.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::catalog::{FieldKind, FlowId, FlowSet};
use crate::lpn::{EventLabel, Marking, TransitionId};
use crate::scenario::InstanceRecord;
use crate::template::format_binding;
use crate::trace::{Bits, Message, SignalTrace, TraceError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("initiation probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("no flow in the catalog matches the configured templates and blocks")]
    NoFlows,
    #[error("simulation did not finish within {0} cycles")]
    CycleLimit(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    /// Per-block chance of starting a flow in a cycle.
    pub probability: f64,
    /// Instances each initiating block starts.
    pub budget: usize,
    /// At most one outstanding `mem_read`/`mem_write` per CPU.
    pub blocking_cache: bool,
    /// Restrict to these templates; empty means all.
    pub templates: Vec<String>,
    /// Restrict to these initiating blocks; empty means all.
    pub blocks: Vec<String>,
    pub max_delay: usize,
    pub max_cycles: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            probability: 0.1,
            budget: 10,
            blocking_cache: true,
            templates: vec![],
            blocks: vec![],
            max_delay: 3,
            max_cycles: 1_000_000,
        }
    }
}

const CACHED: [&str; 2] = ["mem_read", "mem_write"];

/// One simulated flow instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GtInstance {
    /// Concrete flow id, e.g. `mem_write[X=0]`.
    pub flow: String,
    pub template: String,
    pub binding: String,
    pub sid: u64,
    pub start: usize,
    pub end: Option<usize>,
    pub path: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroundTruth {
    pub instances: Vec<GtInstance>,
}

impl GroundTruth {
    /// Sidecar format: `mem_write X=0 sid=3 start=0 end=12 path=t1,t10`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for i in &self.instances {
            let binding = if i.binding.is_empty() { "-" } else { &i.binding };
            let end = i.end.map_or("-1".to_string(), |e| e.to_string());
            writeln!(
                s,
                "{} {} sid={} start={} end={} path={}",
                i.template,
                binding,
                i.sid,
                i.start,
                end,
                i.path.join(",")
            )
            .unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<GroundTruth, TraceError> {
        let mut gt = GroundTruth::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: &str| TraceError::Format {
                line: idx + 1,
                message: m.to_string(),
            };
            let w: Vec<&str> = line.split_whitespace().collect();
            if w.len() != 6 {
                return Err(err("expected `<template> <binding> sid= start= end= path=`"));
            }
            let kv = |word: &str, key: &str| -> Result<String, TraceError> {
                word.strip_prefix(key)
                    .and_then(|r| r.strip_prefix('='))
                    .map(str::to_string)
                    .ok_or_else(|| err(&format!("expected `{key}=`")))
            };
            let num = |v: String| v.parse::<i64>().map_err(|_| err(&format!("bad number `{v}`")));
            let binding = if w[1] == "-" { String::new() } else { w[1].to_string() };
            let end = num(kv(w[4], "end")?)?;
            let path = kv(w[5], "path")?;
            gt.instances.push(GtInstance {
                flow: if binding.is_empty() {
                    w[0].to_string()
                } else {
                    format!("{}[{}]", w[0], binding)
                },
                template: w[0].to_string(),
                binding,
                sid: num(kv(w[2], "sid")?)? as u64,
                start: num(kv(w[3], "start")?)? as usize,
                end: (end >= 0).then_some(end as usize),
                path: if path.is_empty() {
                    vec![]
                } else {
                    path.split(',').map(str::to_string).collect()
                },
            });
        }
        Ok(gt)
    }

    /// Records comparable with reconstructed scenarios. Markings come from
    /// replaying each path.
    pub fn records(&self, fs: &FlowSet) -> Vec<InstanceRecord> {
        let mut ordinals: BTreeMap<(String, usize), u32> = BTreeMap::new();
        let mut out: Vec<InstanceRecord> = self
            .instances
            .iter()
            .map(|i| {
                let o = ordinals.entry((i.flow.clone(), i.start)).or_insert(0);
                let ordinal = *o;
                *o += 1;
                let marking = fs
                    .flow_by_name(&i.flow)
                    .map(|f| {
                        let lpn = fs.flows[f].lpn();
                        let mut m = lpn.initial();
                        for t in &i.path {
                            if let Some(t) = lpn.transition_index(t) {
                                if let Ok((n, _)) = lpn.fire(m, t) {
                                    m = n;
                                }
                            }
                        }
                        lpn.marking_names(m)
                    })
                    .unwrap_or_default();
                InstanceRecord {
                    flow: i.flow.clone(),
                    start: i.start,
                    ordinal,
                    end: i.end,
                    marking,
                    path: i.path.clone(),
                }
            })
            .collect();
        out.sort();
        out
    }
}

struct Live {
    flow: FlowId,
    sid: u64,
    start: Option<usize>,
    marking: Marking,
    path: Vec<TransitionId>,
    ready: usize,
    pending: Option<TransitionId>,
    end: Option<usize>,
}

/// Runs the random test environment over the flow set.
pub fn simulate(fs: &FlowSet, cfg: &SimConfig) -> Result<(SignalTrace, GroundTruth), SimError> {
    if !(0.0..=1.0).contains(&cfg.probability) {
        return Err(SimError::BadProbability(cfg.probability));
    }
    let enc = &fs.enc;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Initiating blocks and the flows each may start.
    let mut blocks: BTreeMap<&str, Vec<FlowId>> = BTreeMap::new();
    for (fid, f) in fs.flows.iter().enumerate() {
        let t_ok = cfg.templates.is_empty() || cfg.templates.contains(&f.flow.template);
        let b_ok = cfg.blocks.is_empty() || cfg.blocks.contains(&f.initiator);
        if t_ok && b_ok {
            blocks.entry(f.initiator.as_str()).or_default().push(fid);
        }
    }
    if blocks.is_empty() && cfg.budget > 0 {
        return Err(SimError::NoFlows);
    }
    let names: Vec<&str> = blocks.keys().copied().collect();
    let mut started = vec![0usize; names.len()];
    let mut sid_counter = vec![0u64; names.len()];

    let mut live: Vec<Live> = Vec::new();
    let mut trace = SignalTrace::new(enc);
    let mut cycle = 0;
    loop {
        let budget_left = started.iter().any(|&s| s < cfg.budget);
        let active = live.iter().any(|l| l.end.is_none());
        if !budget_left && !active {
            break;
        }
        if cycle >= cfg.max_cycles {
            return Err(SimError::CycleLimit(cfg.max_cycles));
        }

        for (b, name) in names.iter().enumerate() {
            if started[b] >= cfg.budget || !rng.gen_bool(cfg.probability) {
                continue;
            }
            let flows = &blocks[name];
            let fid = flows[rng.gen_range(0..flows.len())];
            let is_cached = |f: FlowId| CACHED.contains(&fs.flows[f].flow.template.as_str());
            if cfg.blocking_cache
                && is_cached(fid)
                && live
                    .iter()
                    .any(|l| l.end.is_none() && is_cached(l.flow) && fs.flows[l.flow].initiator == *name)
            {
                continue;
            }
            started[b] += 1;
            let sid = sid_counter[b] % 256;
            sid_counter[b] += 1;
            live.push(Live {
                flow: fid,
                sid,
                start: None,
                marking: fs.flows[fid].lpn().initial(),
                path: vec![],
                ready: cycle,
                pending: None,
                end: None,
            });
        }

        let mut row = enc.idle_step();
        let mut link_busy = vec![false; enc.links.len()];
        for inst in live.iter_mut() {
            if inst.end.is_some() || inst.ready > cycle {
                continue;
            }
            let f = &fs.flows[inst.flow];
            let lpn = f.lpn();
            let t = match inst.pending {
                Some(t) => t,
                None => {
                    let en = lpn.enabled(inst.marking);
                    let t = en[rng.gen_range(0..en.len())];
                    inst.pending = Some(t);
                    t
                }
            };
            let link = f.links[t];
            let status = f.status[t].map(|s| enc.status_bits[s]);
            if link_busy[link] || status.is_some_and(|(k, j)| row[k].get(j)) {
                continue;
            }
            let (next, label) = lpn.fire(inst.marking, t).expect("pending transition is enabled");
            let msg = Message {
                event: label.clone(),
                tag: f.initiator_tag,
                sid: inst.sid,
                addr: rng.gen::<u32>() as u64,
                data: rng.gen(),
            };
            let (k, bits) = enc.encode(&msg).expect("catalog events encode");
            debug_assert_eq!(k, link);
            row[k] = bits;
            link_busy[k] = true;
            if let Some((k, j)) = status {
                row[k].set(j, true);
            }
            inst.start.get_or_insert(cycle);
            inst.marking = next;
            inst.path.push(t);
            inst.pending = None;
            inst.ready = cycle + rng.gen_range(1..=cfg.max_delay.max(1));
            if lpn.is_complete(next) {
                inst.end = Some(cycle);
            }
        }
        trace.steps.push(row);
        cycle += 1;
    }

    let mut gt = GroundTruth::default();
    for l in &live {
        let f = &fs.flows[l.flow];
        let lpn = f.lpn();
        gt.instances.push(GtInstance {
            flow: f.name.clone(),
            template: f.flow.template.clone(),
            binding: format_binding(&f.flow.binding),
            sid: l.sid,
            start: l.start.expect("finished instances started"),
            end: l.end,
            path: l.path.iter().map(|&t| lpn.transition(t).name.clone()).collect(),
        });
    }
    gt.instances.sort_by(|a, b| (a.start, &a.flow).cmp(&(b.start, &b.flow)));
    Ok((trace, gt))
}

/// Replaces one occurrence of an event by another event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BugSpec {
    pub old: EventLabel,
    pub new: EventLabel,
    /// 1-based occurrence index; `None` means the last occurrence.
    pub occurrence: Option<usize>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BugError {
    #[error("bad bug spec `{0}`; expected `swap:<src:dest:cmd>=<src:dest:cmd>@<n|last>`")]
    Syntax(String),
    #[error("event {event} occurs {found} times; occurrence {wanted} not found")]
    NotFound { event: String, found: usize, wanted: String },
    #[error(transparent)]
    Trace(#[from] TraceError),
}

impl BugSpec {
    pub fn parse(s: &str) -> Result<BugSpec, BugError> {
        let bad = || BugError::Syntax(s.to_string());
        let body = s.strip_prefix("swap:").ok_or_else(bad)?;
        let (pair, occ) = body.rsplit_once('@').ok_or_else(bad)?;
        let (old, new) = pair.split_once('=').ok_or_else(bad)?;
        let occurrence = match occ {
            "last" => None,
            n => Some(n.parse::<usize>().ok().filter(|&n| n >= 1).ok_or_else(bad)?),
        };
        Ok(BugSpec {
            old: EventLabel::parse(old).ok_or_else(bad)?,
            new: EventLabel::parse(new).ok_or_else(bad)?,
            occurrence,
        })
    }
}

/// Steps at which `event` is sent, judged by Val and the full Cmd field.
pub fn occurrences(fs: &FlowSet, trace: &SignalTrace, event: &EventLabel) -> Result<Vec<usize>, TraceError> {
    let enc = &fs.enc;
    let k = enc
        .message_link(&event.src, &event.dest)
        .ok_or_else(|| TraceError::UnknownLink(format!("{}->{}", event.src, event.dest)))?;
    let l = &enc.links[k];
    let code = enc.cmd_code(k, &event.cmd).ok_or_else(|| TraceError::UnknownCommand {
        link: l.name.clone(),
        cmd: event.cmd.clone(),
    })?;
    let (voff, _) = l.field(FieldKind::Val).expect("Val");
    let (coff, cw) = l.field(FieldKind::Cmd).expect("Cmd");
    Ok(trace
        .steps
        .iter()
        .enumerate()
        .filter(|(_, row)| row[k].get(voff) && row[k].field(coff, cw) == code)
        .map(|(i, _)| i)
        .collect())
}

/// Returns the corrupted trace and the step that was changed.
pub fn inject_bug(fs: &FlowSet, trace: &SignalTrace, bug: &BugSpec) -> Result<(SignalTrace, usize), BugError> {
    let enc = &fs.enc;
    let occ = occurrences(fs, trace, &bug.old)?;
    let idx = match bug.occurrence {
        Some(n) => n.checked_sub(1).filter(|&i| i < occ.len()),
        None => occ.len().checked_sub(1),
    };
    let Some(idx) = idx else {
        return Err(BugError::NotFound {
            event: bug.old.to_string(),
            found: occ.len(),
            wanted: bug.occurrence.map_or("last".into(), |n| n.to_string()),
        });
    };
    let step = occ[idx];
    let mut out = trace.clone();
    if bug.old == bug.new {
        return Ok((out, step));
    }
    let k_old = enc.message_link(&bug.old.src, &bug.old.dest).expect("checked");
    let old = &trace.steps[step][k_old];
    let l = &enc.links[k_old];
    let get = |kind| l.field(kind).map_or(0, |(o, w)| old.field(o, w));
    let msg = Message {
        event: bug.new.clone(),
        tag: get(FieldKind::Tag),
        sid: get(FieldKind::Sid),
        addr: get(FieldKind::Addr),
        data: get(FieldKind::Data),
    };
    let (k_new, bits) = enc.encode(&msg)?;
    out.steps[step][k_old] = Bits::zeros(l.width);
    out.steps[step][k_new] = bits;
    Ok((out, step))
}
