//! Execution scenarios and trace compliance checking.
//!
//! A scenario is a set of flow instances with their current markings. The
//! analyzer folds every abstracted trace step into the scenario set: on each
//! link carrying a message, every surviving scenario must account for
//! exactly one candidate event, either by advancing an instance or by
//! starting a new one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::catalog::{EventId, FlowId, FlowSet, StatusId};
use crate::lpn::{Marking, TransitionId};
use crate::trace::{abstract_step, AbstractedStep, BitConstraint, Candidate, LinkObs, SelectionMask, SignalTrace, TraceError};

/// Scenario sets at least this large are expanded in parallel.
const PAR_THRESHOLD: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Instance {
    pub flow: FlowId,
    pub start: usize,
    /// Distinguishes instances of one flow started at the same step.
    pub ordinal: u32,
    pub marking: Marking,
    pub end: Option<usize>,
    pub path: Vec<u16>,
    pub sid: BitConstraint,
}

impl Instance {
    pub fn key(&self) -> InstanceKey {
        (self.flow, self.start, self.ordinal)
    }

    pub fn is_complete(&self) -> bool {
        self.end.is_some()
    }
}

pub type InstanceKey = (FlowId, usize, u32);

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Scenario {
    /// Sorted by key.
    instances: Vec<Arc<Instance>>,
    /// Instances that fired during the current step.
    touched: Vec<InstanceKey>,
    /// Status pulses consumed during the current step.
    pulses_used: u64,
}

impl Scenario {
    pub fn empty() -> Scenario {
        Scenario::default()
    }

    pub fn from_instances(mut instances: Vec<Instance>) -> Scenario {
        instances.sort_by_key(Instance::key);
        Scenario {
            instances: instances.into_iter().map(Arc::new).collect(),
            ..Default::default()
        }
    }

    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.instances.iter().map(|a| a.as_ref())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    fn is_touched(&self, k: InstanceKey) -> bool {
        self.touched.binary_search(&k).is_ok()
    }

    fn with_replaced(&self, idx: usize, inst: Instance) -> Scenario {
        let mut s = self.clone();
        let k = inst.key();
        s.instances[idx] = Arc::new(inst);
        s.touch(k);
        s
    }

    fn with_added(&self, inst: Instance) -> Scenario {
        let mut s = self.clone();
        let k = inst.key();
        let pos = s.instances.partition_point(|i| i.key() < k);
        s.instances.insert(pos, Arc::new(inst));
        s.touch(k);
        s
    }

    fn touch(&mut self, k: InstanceKey) {
        if let Err(p) = self.touched.binary_search(&k) {
            self.touched.insert(p, k);
        }
    }

    fn end_step(&mut self) {
        self.touched.clear();
        self.pulses_used = 0;
    }

    /// Order-independent normal form: the sorted instance list.
    pub fn canonical(&self) -> Vec<Instance> {
        self.instances().cloned().collect()
    }

    /// Flat records used by projections and reports.
    pub fn records(&self, fs: &FlowSet) -> Vec<InstanceRecord> {
        self.instances()
            .map(|i| {
                let lpn = fs.flows[i.flow].lpn();
                InstanceRecord {
                    flow: fs.flows[i.flow].name.clone(),
                    start: i.start,
                    ordinal: i.ordinal,
                    end: i.end,
                    marking: lpn.marking_names(i.marking),
                    path: i.path.iter().map(|&t| lpn.transition(t as usize).name.clone()).collect(),
                }
            })
            .collect()
    }
}

/// A flow instance flattened to names.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct InstanceRecord {
    pub flow: String,
    pub start: usize,
    pub ordinal: u32,
    pub end: Option<usize>,
    pub marking: String,
    pub path: Vec<String>,
}

impl InstanceRecord {
    pub fn id(&self) -> String {
        if self.ordinal == 0 {
            format!("{}@{}", self.flow, self.start)
        } else {
            format!("{}@{}#{}", self.flow, self.start, self.ordinal)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Fact {
    InitiatedBefore(String, String),
    CompletedBeforeInitiated(String, String),
}

impl fmt::Display for Fact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fact::InitiatedBefore(a, b) => write!(f, "{a} initiated before {b}"),
            Fact::CompletedBeforeInitiated(a, b) => write!(f, "{a} completed before {b} initiated"),
        }
    }
}

/// Ordering facts derived from start and end indices. Equal indices give
/// no fact.
pub fn orderings(records: &[InstanceRecord]) -> BTreeSet<Fact> {
    let mut out = BTreeSet::new();
    for a in records {
        for b in records {
            if a.start < b.start {
                out.insert(Fact::InitiatedBefore(a.id(), b.id()));
            }
            if let Some(e) = a.end {
                if e < b.start {
                    out.insert(Fact::CompletedBeforeInitiated(a.id(), b.id()));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum ViewLevel {
    Type1 = 1,
    Type2 = 2,
    Type3 = 3,
}

impl ViewLevel {
    pub fn from_number(n: u8) -> Option<ViewLevel> {
        match n {
            1 => Some(ViewLevel::Type1),
            2 => Some(ViewLevel::Type2),
            3 => Some(ViewLevel::Type3),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct InstanceView {
    pub id: String,
    pub complete: Option<bool>,
    pub path: Option<Vec<String>>,
}

/// A scenario seen at one of the three abstraction levels.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ProjectedView {
    pub level: ViewLevel,
    pub counts: BTreeMap<String, usize>,
    pub instances: Vec<InstanceView>,
    pub facts: BTreeSet<Fact>,
}

pub fn project(records: &[InstanceRecord], level: ViewLevel) -> ProjectedView {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry(r.flow.clone()).or_insert(0) += 1;
    }
    let mut facts = orderings(records);
    if level == ViewLevel::Type1 {
        facts.retain(|f| matches!(f, Fact::InitiatedBefore(..)));
    }
    let mut instances: Vec<InstanceView> = records
        .iter()
        .map(|r| InstanceView {
            id: r.id(),
            complete: (level >= ViewLevel::Type2).then_some(r.end.is_some()),
            path: (level >= ViewLevel::Type3).then(|| r.path.clone()),
        })
        .collect();
    instances.sort();
    ProjectedView {
        level,
        counts,
        instances,
        facts,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub max_scenarios: usize,
    pub time_limit: Option<Duration>,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_scenarios: 1_000_000,
            time_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub peak: usize,
    pub peak_step: usize,
    pub final_count: usize,
    pub steps: usize,
    #[serde(skip)]
    pub wall_time: Duration,
    /// Peak scenario count times mean instances per scenario.
    pub memory_proxy: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Halt {
    pub step: usize,
    pub link: usize,
    pub link_name: String,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub scenarios: Vec<Scenario>,
    pub halt: Option<Halt>,
    pub metrics: Metrics,
}

impl Outcome {
    pub fn halt_step(&self) -> i64 {
        self.halt.as_ref().map_or(-1, |h| h.step as i64)
    }

    pub fn halt_link(&self) -> i64 {
        self.halt.as_ref().map_or(-1, |h| h.link as i64)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("scenario count exceeded {limit} at step {step} (peak {peak})")]
    ComplexityExceeded { limit: usize, peak: usize, step: usize },
    #[error("time limit of {limit:?} exceeded at step {step} (peak {peak})")]
    TimeLimit { limit: Duration, peak: usize, step: usize },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("at most 64 status signals are supported")]
    TooManyStatusSignals,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Visibility {
    Observed,
    Silent,
}

/// Mask-dependent view of the flow set.
pub struct Analyzer<'a> {
    pub fs: &'a FlowSet,
    /// Per flow, per transition.
    vis: Vec<Vec<Visibility>>,
    /// Per flow, per transition: status signal whose pulse must accompany it.
    gate: Vec<Vec<Option<StatusId>>>,
    has_silent: Vec<bool>,
    /// Flows able to start with each event.
    starters: Vec<Vec<FlowId>>,
}

type Closure = Vec<(Marking, Vec<u16>)>;

impl<'a> Analyzer<'a> {
    pub fn new(fs: &'a FlowSet, mask: &SelectionMask) -> Analyzer<'a> {
        let enc = &fs.enc;
        let status_seen: Vec<bool> = enc
            .status_bits
            .iter()
            .map(|&(k, j)| mask.bits.get(k).is_some_and(|b| b.get(j)))
            .collect();
        let mut vis = Vec::new();
        let mut gate = Vec::new();
        let mut has_silent = Vec::new();
        for f in &fs.flows {
            let v: Vec<Visibility> = f
                .links
                .iter()
                .map(|&l| {
                    let (off, _) = enc.links[l].field(crate::catalog::FieldKind::Val).expect("Val");
                    if mask.bits[l].get(off) {
                        Visibility::Observed
                    } else {
                        Visibility::Silent
                    }
                })
                .collect();
            let g: Vec<Option<StatusId>> = f.status.iter().map(|s| s.filter(|&s| status_seen[s])).collect();
            has_silent.push(v.contains(&Visibility::Silent) || g.iter().any(Option::is_some));
            vis.push(v);
            gate.push(g);
        }
        let mut a = Analyzer {
            fs,
            vis,
            gate,
            has_silent,
            starters: vec![Vec::new(); fs.events.len()],
        };
        for (fid, f) in fs.flows.iter().enumerate() {
            let lpn = f.lpn();
            let mut evs = BTreeSet::new();
            for (m, _) in a.closure(fid, lpn.initial()) {
                for t in lpn.enabled(m) {
                    if a.vis[fid][t] == Visibility::Observed {
                        evs.insert(f.events[t]);
                    }
                }
            }
            for e in evs {
                a.starters[e].push(fid);
            }
        }
        a
    }

    /// Markings reachable from `m` through silent, ungated transitions,
    /// with the transitions taken.
    fn closure(&self, f: FlowId, m: Marking) -> Closure {
        let mut out = vec![(m, Vec::new())];
        if !self.has_silent[f] {
            return out;
        }
        let lpn = self.fs.flows[f].lpn();
        let mut i = 0;
        while i < out.len() {
            let (cur, path) = out[i].clone();
            for t in lpn.enabled(cur) {
                if self.vis[f][t] == Visibility::Silent && self.gate[f][t].is_none() {
                    let (next, _) = lpn.fire(cur, t).expect("enabled");
                    let mut p = path.clone();
                    p.push(t as u16);
                    out.push((next, p));
                }
            }
            i += 1;
        }
        out
    }

    fn gate_ok(&self, scen: &Scenario, g: Option<StatusId>, pulses: &[Option<bool>]) -> Option<u64> {
        match g {
            None => Some(scen.pulses_used),
            Some(s) => {
                let bit = 1u64 << s;
                (pulses[s] == Some(true) && scen.pulses_used & bit == 0).then_some(scen.pulses_used | bit)
            }
        }
    }

    fn advance(
        &self,
        inst: &Instance,
        m: Marking,
        prefix: &[u16],
        t: TransitionId,
        sid: BitConstraint,
        h: usize,
    ) -> Instance {
        let lpn = self.fs.flows[inst.flow].lpn();
        let (next, _) = lpn.fire(m, t).expect("enabled");
        let mut path = inst.path.clone();
        path.extend_from_slice(prefix);
        path.push(t as u16);
        Instance {
            flow: inst.flow,
            start: inst.start,
            ordinal: inst.ordinal,
            marking: next,
            end: lpn.is_complete(next).then_some(h),
            path,
            sid,
        }
    }

    /// Every way `scen` can absorb candidate `c` at step `h`: by advancing
    /// one instance or by starting a new one. Empty means inconsistent.
    pub fn analysis(&self, scen: &Scenario, c: &Candidate, h: usize, pulses: &[Option<bool>]) -> Vec<Scenario> {
        let fs = self.fs;
        let mut out = Vec::new();
        for (idx, inst) in scen.instances().enumerate() {
            if inst.is_complete() || scen.is_touched(inst.key()) {
                continue;
            }
            let f = &fs.flows[inst.flow];
            if !c.tag.admits(f.initiator_tag) {
                continue;
            }
            let Some(sid) = inst.sid.merge(c.sid) else { continue };
            let lpn = f.lpn();
            for (m, prefix) in self.closure(inst.flow, inst.marking) {
                for t in fs.transitions_with(inst.flow, c.event) {
                    if self.vis[inst.flow][t] != Visibility::Observed || !lpn.is_enabled(m, t) {
                        continue;
                    }
                    let Some(used) = self.gate_ok(scen, self.gate[inst.flow][t], pulses) else { continue };
                    let mut s = scen.with_replaced(idx, self.advance(inst, m, &prefix, t, sid, h));
                    s.pulses_used = used;
                    out.push(s);
                }
            }
        }
        for &fid in &self.starters[c.event] {
            let f = &fs.flows[fid];
            if !c.tag.admits(f.initiator_tag) {
                continue;
            }
            let ordinal = scen.instances().filter(|i| i.flow == fid && i.start == h).count() as u32;
            let lpn = f.lpn();
            let seed = Instance {
                flow: fid,
                start: h,
                ordinal,
                marking: lpn.initial(),
                end: None,
                path: vec![],
                sid: BitConstraint::ANY,
            };
            for (m, prefix) in self.closure(fid, lpn.initial()) {
                for t in fs.transitions_with(fid, c.event) {
                    if self.vis[fid][t] != Visibility::Observed || !lpn.is_enabled(m, t) {
                        continue;
                    }
                    let Some(used) = self.gate_ok(scen, self.gate[fid][t], pulses) else { continue };
                    let mut s = scen.with_added(self.advance(&seed, m, &prefix, t, c.sid, h));
                    s.pulses_used = used;
                    out.push(s);
                }
            }
        }
        out
    }

    /// Fires gated transitions on unobserved links for every observed pulse
    /// not yet consumed this step.
    fn settle_pulses(&self, scen: &Scenario, h: usize, pulses: &[Option<bool>]) -> Vec<Scenario> {
        let pending = pulses
            .iter()
            .enumerate()
            .find(|&(s, p)| *p == Some(true) && scen.pulses_used & (1 << s) == 0)
            .map(|(s, _)| s);
        let Some(s) = pending else {
            return vec![scen.clone()];
        };
        let mut out = Vec::new();
        for (idx, inst) in scen.instances().enumerate() {
            if inst.is_complete() || scen.is_touched(inst.key()) {
                continue;
            }
            let lpn = self.fs.flows[inst.flow].lpn();
            for (m, prefix) in self.closure(inst.flow, inst.marking) {
                for t in lpn.enabled(m) {
                    if self.vis[inst.flow][t] == Visibility::Silent && self.gate[inst.flow][t] == Some(s) {
                        let mut next = scen.with_replaced(idx, self.advance(inst, m, &prefix, t, inst.sid, h));
                        next.pulses_used |= 1 << s;
                        out.extend(self.settle_pulses(&next, h, pulses));
                    }
                }
            }
        }
        out
    }

    /// Runs the compliance check over the whole trace.
    pub fn check(&self, trace: &SignalTrace, mask: &SelectionMask, limits: &Limits) -> Result<Outcome, AnalysisError> {
        let fs = self.fs;
        let enc = &fs.enc;
        enc.check_trace(trace)?;
        if enc.status_bits.len() > 64 {
            return Err(AnalysisError::TooManyStatusSignals);
        }
        let t0 = Instant::now();
        let mut m: Vec<Scenario> = vec![Scenario::empty()];
        let mut peak = 1;
        let mut peak_step = 0;
        let mut peak_size = 0.0f64;
        let mut halt = None;
        let mut steps = 0;

        let mut note = |m: &[Scenario], h: usize, peak: &mut usize, peak_step: &mut usize| -> Result<(), AnalysisError> {
            if m.len() > *peak {
                *peak = m.len();
                *peak_step = h;
                peak_size = m.iter().map(|s| s.len() as f64).sum::<f64>() / m.len() as f64;
            }
            if m.len() > limits.max_scenarios {
                return Err(AnalysisError::ComplexityExceeded {
                    limit: limits.max_scenarios,
                    peak: *peak,
                    step: h,
                });
            }
            Ok(())
        };

        'steps: for h in 0..trace.len() {
            if let Some(tl) = limits.time_limit {
                if t0.elapsed() > tl {
                    return Err(AnalysisError::TimeLimit { limit: tl, peak, step: h });
                }
            }
            let step: AbstractedStep = abstract_step(fs, trace, h, mask);
            for (k, obs) in step.links.iter().enumerate() {
                let LinkObs::Message(cands) = obs else { continue };
                let next = expand(&m, |s| {
                    cands.iter().flat_map(|c| self.analysis(s, c, h, &step.pulses)).collect()
                });
                if next.is_empty() {
                    halt = Some(Halt {
                        step: h,
                        link: k,
                        link_name: enc.links[k].name.clone(),
                    });
                    steps = h + 1;
                    break 'steps;
                }
                m = next;
                note(&m, h, &mut peak, &mut peak_step)?;
            }
            if step.pulses.contains(&Some(true)) {
                let next = expand(&m, |s| self.settle_pulses(s, h, &step.pulses));
                if next.is_empty() {
                    let s = step.pulses.iter().position(|p| *p == Some(true)).unwrap();
                    let k = enc.status_bits[s].0;
                    halt = Some(Halt {
                        step: h,
                        link: k,
                        link_name: enc.links[k].name.clone(),
                    });
                    steps = h + 1;
                    break 'steps;
                }
                m = next;
            }
            for s in &mut m {
                s.end_step();
            }
            m.sort_unstable();
            m.dedup();
            note(&m, h, &mut peak, &mut peak_step)?;
            steps = h + 1;
        }
        if halt.is_some() {
            for s in &mut m {
                s.end_step();
            }
            m.sort_unstable();
            m.dedup();
        }
        let final_count = m.len();
        if peak_size == 0.0 && !m.is_empty() {
            peak_size = m.iter().map(|s| s.len() as f64).sum::<f64>() / m.len() as f64;
        }
        Ok(Outcome {
            metrics: Metrics {
                peak,
                peak_step,
                final_count,
                steps,
                wall_time: t0.elapsed(),
                memory_proxy: peak as f64 * peak_size,
            },
            scenarios: m,
            halt,
        })
    }
}

/// Applies `f` to every scenario and merges the results into a sorted,
/// duplicate-free set.
fn expand<F>(m: &[Scenario], f: F) -> Vec<Scenario>
where
    F: Fn(&Scenario) -> Vec<Scenario> + Sync,
{
    let mut next: Vec<Scenario> = if m.len() >= PAR_THRESHOLD {
        m.par_iter().flat_map_iter(&f).collect()
    } else {
        m.iter().flat_map(&f).collect()
    };
    if next.len() >= PAR_THRESHOLD {
        next.par_sort_unstable();
    } else {
        next.sort_unstable();
    }
    next.dedup();
    next
}

/// Checks `trace` against the flow set under `mask`.
pub fn check_compliance(
    fs: &FlowSet,
    trace: &SignalTrace,
    mask: &SelectionMask,
    limits: &Limits,
) -> Result<Outcome, AnalysisError> {
    Analyzer::new(fs, mask).check(trace, mask, limits)
}

/// Event ids of the candidates, for diagnostics.
pub fn candidate_events(c: &[Candidate]) -> Vec<EventId> {
    c.iter().map(|c| c.event).collect()
}
