//! Trace signal selection: event selection, Cmd bit selection and the
//! S1–S4 strategies.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::catalog::{EventId, FieldKind, FlowId, FlowSet};
use crate::lpn::{BranchKind, Lpn, TransitionId};
use crate::scenario::{check_compliance, project, AnalysisError, Limits, ViewLevel};
use crate::sim::GroundTruth;
use crate::trace::{SelectionMask, SignalTrace};

/// Transitions enabled at the initial marking plus those entering a
/// terminal place.
pub fn start_end_events(lpn: &Lpn) -> BTreeSet<TransitionId> {
    let mut out: BTreeSet<TransitionId> = lpn.enabled(lpn.initial()).into_iter().collect();
    let end = lpn.end_state();
    for (i, t) in lpn.transitions().iter().enumerate() {
        if !t.postset.intersection(end).is_empty() {
            out.insert(i);
        }
    }
    out
}

/// Alternative transition sets that tell every pair of branches apart.
/// Each set is a minimal hitting set over the per-pair differences, with
/// start/end transitions and labels shared with the other branch removed.
pub fn branch_selections(lpn: &Lpn) -> Vec<BTreeSet<TransitionId>> {
    let Ok(bs) = lpn.branch_structure() else {
        return vec![BTreeSet::new()];
    };
    if bs.kind == BranchKind::DistinctTerminal || bs.branches.len() < 2 {
        return vec![BTreeSet::new()];
    }
    let se = start_end_events(lpn);
    let labels = |ts: &BTreeSet<TransitionId>| -> BTreeSet<&crate::lpn::EventLabel> {
        ts.iter().map(|&t| &lpn.transition(t).label).collect()
    };
    let mut diffs: Vec<BTreeSet<TransitionId>> = Vec::new();
    for (i, a) in bs.branches.iter().enumerate() {
        for b in &bs.branches[i + 1..] {
            let (la, lb) = (labels(&a.transitions), labels(&b.transitions));
            let mut d = BTreeSet::new();
            for &t in a.transitions.difference(&b.transitions) {
                if !se.contains(&t) && !lb.contains(&lpn.transition(t).label) {
                    d.insert(t);
                }
            }
            for &t in b.transitions.difference(&a.transitions) {
                if !se.contains(&t) && !la.contains(&lpn.transition(t).label) {
                    d.insert(t);
                }
            }
            if !d.is_empty() {
                diffs.push(d);
            }
        }
    }
    if diffs.is_empty() {
        return vec![BTreeSet::new()];
    }
    let universe: Vec<TransitionId> = diffs.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
    assert!(universe.len() <= 24, "too many branch events for exhaustive selection");
    let hits = |set: u32| {
        diffs
            .iter()
            .all(|d| universe.iter().enumerate().any(|(i, t)| set >> i & 1 == 1 && d.contains(t)))
    };
    let mut minimal: Vec<u32> = Vec::new();
    let mut by_size: Vec<u32> = (1..1u32 << universe.len()).collect();
    by_size.sort_by_key(|s| (s.count_ones(), *s));
    for s in by_size {
        if minimal.iter().any(|&m| m & s == m) {
            continue;
        }
        if hits(s) {
            minimal.push(s);
        }
    }
    let mut out: Vec<BTreeSet<TransitionId>> = minimal
        .into_iter()
        .map(|s| {
            universe
                .iter()
                .enumerate()
                .filter(|(i, _)| s >> i & 1 == 1)
                .map(|(_, &t)| t)
                .collect()
        })
        .collect();
    out.sort();
    out
}

/// Partition of `codes` by their values restricted to `bits`.
pub fn distinguishing_power(bits: &[usize], codes: &[(String, u64)]) -> Vec<Vec<String>> {
    let mut blocks: Vec<(u64, Vec<String>)> = Vec::new();
    for (name, code) in codes {
        let key = bits.iter().fold(0u64, |acc, &b| acc | (code >> b & 1) << b);
        match blocks.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(name.clone()),
            None => blocks.push((key, vec![name.clone()])),
        }
    }
    blocks.into_iter().map(|(_, v)| v).collect()
}

/// Greedy Cmd bit choice separating every selected code from every other
/// code on the link. Ties go to the lowest bit index.
pub fn select_cmd_bits(width: usize, selected: &[u64], all: &[u64]) -> Vec<usize> {
    let mut pairs: Vec<(u64, u64)> = Vec::new();
    for &a in selected {
        for &b in all {
            if a != b && !pairs.contains(&(b, a)) {
                pairs.push((a, b));
            }
        }
    }
    let mut chosen = Vec::new();
    while !pairs.is_empty() {
        let best = (0..width)
            .filter(|b| !chosen.contains(b))
            .map(|b| (pairs.iter().filter(|(x, y)| (x ^ y) >> b & 1 == 1).count(), b))
            .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
        match best {
            Some((n, b)) if n > 0 => {
                chosen.push(b);
                pairs.retain(|(x, y)| (x ^ y) >> b & 1 == 0);
            }
            _ => break,
        }
    }
    chosen.sort();
    chosen
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Mode {
    /// Every event, every field.
    S1,
    /// Start/end events plus the least shared branch events.
    S2,
    /// Start/end events plus the most shared branch events.
    S3,
    /// Start/end events plus branch-status signals.
    S4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Strategy {
    pub mode: Mode,
    pub cmd: bool,
    pub tag: bool,
    pub sid: bool,
    /// Tag only on links that carry events shared between initiators.
    pub split: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("bad strategy `{0}`; expected e.g. `S1`, `S2+cmd+sid`, `S4+us`")]
pub struct StrategyError(String);

impl FromStr for Strategy {
    type Err = StrategyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || StrategyError(s.to_string());
        let mut parts = s.split('+');
        let mode = match parts.next().map(str::to_ascii_uppercase).as_deref() {
            Some("S1") => Mode::S1,
            Some("S2") => Mode::S2,
            Some("S3") => Mode::S3,
            Some("S4") => Mode::S4,
            _ => return Err(bad()),
        };
        let rest: Vec<String> = parts.map(str::to_ascii_lowercase).collect();
        if mode == Mode::S1 {
            return if rest.is_empty() || rest == ["cmd", "tag", "sid"] {
                Ok(Strategy::s1())
            } else {
                Err(bad())
            };
        }
        let mut st = Strategy {
            mode,
            cmd: false,
            tag: false,
            sid: false,
            split: false,
        };
        if rest.is_empty() {
            st.cmd = true;
            st.tag = true;
            st.sid = true;
        }
        for p in &rest {
            match p.as_str() {
                "cmd" if !st.cmd => st.cmd = true,
                "tag" if !st.tag => st.tag = true,
                "sid" if !st.sid => st.sid = true,
                "us" if rest.len() == 1 => {
                    st.split = true;
                    st.cmd = true;
                    st.tag = true;
                    st.sid = true;
                }
                _ => return Err(bad()),
            }
        }
        Ok(st)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.mode)?;
        if self.mode == Mode::S1 {
            return Ok(());
        }
        if self.split {
            return write!(f, "+us");
        }
        for (on, n) in [(self.cmd, "cmd"), (self.tag, "tag"), (self.sid, "sid")] {
            if on {
                write!(f, "+{n}")?;
            }
        }
        Ok(())
    }
}

impl Strategy {
    pub fn s1() -> Strategy {
        Strategy {
            mode: Mode::S1,
            cmd: true,
            tag: true,
            sid: true,
            split: false,
        }
    }

    /// S1, then each of S2–S4 with every field combination and the split.
    pub fn matrix() -> Vec<Strategy> {
        let mut v = vec![Strategy::s1()];
        for m in ["S2", "S3", "S4"] {
            for f in ["cmd+tag+sid", "tag+sid", "cmd+sid", "cmd+tag", "us"] {
                v.push(format!("{m}+{f}").parse().expect("valid"));
            }
        }
        v
    }

    pub fn fields(&self) -> String {
        if self.mode == Mode::S1 {
            return "cmd+tag+sid".into();
        }
        let s = self.to_string();
        s.split_once('+').map(|(_, f)| f.to_string()).unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Provenance {
    StartEnd,
    Branch,
    All,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowSelection {
    pub flow: FlowId,
    pub transitions: BTreeMap<TransitionId, Provenance>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventSelection {
    pub flows: Vec<FlowSelection>,
    /// Observe branch-status signals.
    pub status: bool,
}

impl EventSelection {
    pub fn events(&self, fs: &FlowSet) -> BTreeSet<EventId> {
        self.flows
            .iter()
            .flat_map(|f| f.transitions.keys().map(move |&t| fs.flows[f.flow].events[t]))
            .collect()
    }
}

/// Number of concrete flows using each event.
pub fn sharing(fs: &FlowSet, e: EventId) -> usize {
    fs.event_flows[e].len()
}

/// Per-flow event choice for a mode.
pub fn select_events(fs: &FlowSet, mode: Mode) -> EventSelection {
    let mut flows = Vec::new();
    for (fid, f) in fs.flows.iter().enumerate() {
        let lpn = f.lpn();
        let mut tr = BTreeMap::new();
        if mode == Mode::S1 {
            for t in 0..lpn.transitions().len() {
                tr.insert(t, Provenance::All);
            }
        } else {
            for t in start_end_events(lpn) {
                tr.insert(t, Provenance::StartEnd);
            }
            if mode != Mode::S4 {
                let score = |s: &BTreeSet<TransitionId>| -> (usize, Vec<String>) {
                    let n = s.iter().map(|&t| sharing(fs, f.events[t])).sum();
                    let names = s.iter().map(|&t| lpn.transition(t).label.to_string()).collect();
                    (n, names)
                };
                let options = branch_selections(lpn);
                let pick = match mode {
                    Mode::S2 => options.iter().min_by(|a, b| score(a).cmp(&score(b))),
                    _ => options
                        .iter()
                        .min_by(|a, b| score(b).0.cmp(&score(a).0).then(score(a).1.cmp(&score(b).1))),
                };
                for &t in pick.into_iter().flatten() {
                    tr.entry(t).or_insert(Provenance::Branch);
                }
            }
        }
        flows.push(FlowSelection { flow: fid, transitions: tr });
    }
    EventSelection {
        flows,
        status: mode == Mode::S4,
    }
}

/// Observed bits for `selection` under `strategy`. Every message link's
/// Val bit is always observed.
pub fn select_bits(fs: &FlowSet, selection: &EventSelection, strategy: &Strategy) -> SelectionMask {
    let enc = &fs.enc;
    if strategy.mode == Mode::S1 {
        return SelectionMask::fields(enc, &[FieldKind::Val, FieldKind::Cmd, FieldKind::Tag, FieldKind::Sid], false);
    }
    let mut mask = SelectionMask::fields(enc, &[FieldKind::Val], selection.status);
    let selected = selection.events(fs);
    for k in 0..enc.message_links {
        let l = &enc.links[k];
        let sel: Vec<u64> = fs.link_events[k]
            .iter()
            .filter(|e| selected.contains(e))
            .map(|&e| l.cmds[&fs.events[e].cmd])
            .collect();
        if sel.is_empty() {
            continue;
        }
        let mut set = |kind: FieldKind, bits: Option<Vec<usize>>| {
            if let Some((off, w)) = l.field(kind) {
                for b in bits.unwrap_or_else(|| (0..w).collect()) {
                    mask.bits[k].set(off + b, true);
                }
            }
        };
        if strategy.cmd {
            let all: Vec<u64> = l.cmds.values().copied().collect();
            let w = l.field(FieldKind::Cmd).map_or(0, |f| f.1);
            set(FieldKind::Cmd, Some(select_cmd_bits(w, &sel, &all)));
        }
        let tag = if strategy.split {
            fs.link_events[k].iter().any(|&e| fs.is_shared(e))
        } else {
            strategy.tag
        };
        if tag {
            set(FieldKind::Tag, None);
        }
        if strategy.sid {
            set(FieldKind::Sid, None);
        }
    }
    mask
}

pub fn strategy_mask(fs: &FlowSet, strategy: &Strategy) -> SelectionMask {
    select_bits(fs, &select_events(fs, strategy.mode), strategy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RowState {
    Completed,
    Inconsistent { step: usize, link: usize },
    ComplexityExceeded { step: usize },
    TimeLimit { step: usize },
}

/// One sweep table row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub strategy: String,
    pub fields: String,
    pub bits: usize,
    pub state: RowState,
    pub peak: usize,
    pub final_count: Option<usize>,
    /// Whether the ground-truth scenario is among the final ones.
    pub ground_truth_found: Option<bool>,
    #[serde(skip)]
    pub runtime: Duration,
    pub memory_proxy: f64,
}

/// Builds the mask for `strategy`, analyzes `trace` and assembles a row.
pub fn evaluate(
    fs: &FlowSet,
    strategy: &Strategy,
    trace: &SignalTrace,
    truth: Option<&GroundTruth>,
    limits: &Limits,
) -> Result<Row, AnalysisError> {
    let mask = strategy_mask(fs, strategy);
    let mut row = Row {
        strategy: strategy.to_string(),
        fields: strategy.fields(),
        bits: mask.count(),
        state: RowState::Completed,
        peak: 0,
        final_count: None,
        ground_truth_found: None,
        runtime: Duration::ZERO,
        memory_proxy: 0.0,
    };
    let start = std::time::Instant::now();
    match check_compliance(fs, trace, &mask, limits) {
        Ok(out) => {
            row.peak = out.metrics.peak;
            row.final_count = Some(out.metrics.final_count);
            row.memory_proxy = out.metrics.memory_proxy;
            if let Some(h) = &out.halt {
                row.state = RowState::Inconsistent { step: h.step, link: h.link };
            }
            if let Some(gt) = truth {
                let want = project(&gt.records(fs), ViewLevel::Type3);
                row.ground_truth_found =
                    Some(out.scenarios.iter().any(|s| project(&s.records(fs), ViewLevel::Type3) == want));
            }
        }
        Err(AnalysisError::ComplexityExceeded { peak, step, .. }) => {
            row.peak = peak;
            row.state = RowState::ComplexityExceeded { step };
        }
        Err(AnalysisError::TimeLimit { peak, step, .. }) => {
            row.peak = peak;
            row.state = RowState::TimeLimit { step };
        }
        Err(e) => return Err(e),
    }
    row.runtime = start.elapsed();
    Ok(row)
}
