//! Labeled Petri nets: places, labeled transitions and 1-safe execution.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type PlaceId = usize;
pub type TransitionId = usize;

/// Upper bound on places per net; markings are packed into a `u64`.
pub const MAX_PLACES: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LpnError {
    #[error("net `{0}` has more than {MAX_PLACES} places")]
    TooManyPlaces(String),
    #[error("net `{0}` has an empty initial state")]
    EmptyInitialState(String),
    #[error("transition `{0}` has an empty preset or postset")]
    EmptyArcs(String),
    #[error("transition `{transition}` refers to unknown place index {place}")]
    UnknownPlace { transition: String, place: PlaceId },
    #[error("transition `{0}` is not enabled in the given marking")]
    NotEnabled(String),
    #[error("net `{0}` contains a cycle reachable from its initial state")]
    Cyclic(String),
    #[error("event label {0} has src == dest")]
    SelfLoopLabel(EventLabel),
}

/// A flow event `(src, dest, cmd)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventLabel {
    pub src: String,
    pub dest: String,
    pub cmd: String,
}

impl EventLabel {
    pub fn new(src: impl Into<String>, dest: impl Into<String>, cmd: impl Into<String>) -> Self {
        Self {
            src: src.into(),
            dest: dest.into(),
            cmd: cmd.into(),
        }
    }

    /// Parses `src:dest:cmd` or `(src,dest,cmd)`.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        let inner = s
            .strip_prefix('(')
            .and_then(|r| r.strip_suffix(')'))
            .unwrap_or(s);
        let parts: Vec<&str> = if inner.contains(',') {
            inner.split(',').map(str::trim).collect()
        } else {
            inner.split(':').map(str::trim).collect()
        };
        match parts.as_slice() {
            [a, b, c] if !a.is_empty() && !b.is_empty() && !c.is_empty() => {
                Some(Self::new(*a, *b, *c))
            }
            _ => None,
        }
    }
}

impl fmt::Display for EventLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}:{}:{})", self.src, self.dest, self.cmd)
    }
}

/// Names a status signal (`component.signal`) raised when a transition fires.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StatusRef {
    pub component: String,
    pub signal: String,
}

impl fmt::Display for StatusRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.component, self.signal)
    }
}

/// A set of marked places. Nets are 1-safe, so a set suffices.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Marking(pub u64);

impl Marking {
    pub const EMPTY: Marking = Marking(0);

    pub fn from_places(places: impl IntoIterator<Item = PlaceId>) -> Self {
        Marking(places.into_iter().fold(0u64, |acc, p| acc | (1u64 << p)))
    }

    pub fn contains(self, p: PlaceId) -> bool {
        p < MAX_PLACES && self.0 & (1u64 << p) != 0
    }

    pub fn is_subset(self, other: Marking) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: Marking) -> Marking {
        Marking(self.0 | other.0)
    }

    pub fn minus(self, other: Marking) -> Marking {
        Marking(self.0 & !other.0)
    }

    pub fn intersection(self, other: Marking) -> Marking {
        Marking(self.0 & other.0)
    }

    pub fn places(self) -> impl Iterator<Item = PlaceId> {
        (0..MAX_PLACES).filter(move |p| self.contains(*p))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }
}

impl fmt::Debug for Marking {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.places()).finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transition {
    pub name: String,
    pub preset: Marking,
    pub postset: Marking,
    pub label: EventLabel,
    pub status: Option<StatusRef>,
}

/// A labeled Petri net `(P, T, E, L, s0)` with its derived end state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Lpn {
    name: String,
    places: Vec<String>,
    transitions: Vec<Transition>,
    initial: Marking,
    end: Marking,
}

impl Lpn {
    /// Builds a net. The end state is computed as the set of places without
    /// outgoing transitions.
    pub fn new(
        name: impl Into<String>,
        places: Vec<String>,
        transitions: Vec<Transition>,
        initial: Marking,
    ) -> Result<Self, LpnError> {
        let name = name.into();
        if places.len() > MAX_PLACES {
            return Err(LpnError::TooManyPlaces(name));
        }
        if initial.is_empty() {
            return Err(LpnError::EmptyInitialState(name));
        }
        let all = Marking(if places.len() == 64 {
            u64::MAX
        } else {
            (1u64 << places.len()) - 1
        });
        let mut has_out = Marking::EMPTY;
        for t in &transitions {
            if t.preset.is_empty() || t.postset.is_empty() {
                return Err(LpnError::EmptyArcs(t.name.clone()));
            }
            for m in [t.preset, t.postset] {
                if let Some(p) = m.minus(all).places().next() {
                    return Err(LpnError::UnknownPlace {
                        transition: t.name.clone(),
                        place: p,
                    });
                }
            }
            if t.label.src == t.label.dest {
                return Err(LpnError::SelfLoopLabel(t.label.clone()));
            }
            has_out = has_out.union(t.preset);
        }
        if let Some(p) = initial.minus(all).places().next() {
            return Err(LpnError::UnknownPlace {
                transition: "<initial>".into(),
                place: p,
            });
        }
        let end = all.minus(has_out);
        Ok(Self {
            name,
            places,
            transitions,
            initial,
            end,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn places(&self) -> &[String] {
        &self.places
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn transition(&self, t: TransitionId) -> &Transition {
        &self.transitions[t]
    }

    pub fn initial(&self) -> Marking {
        self.initial
    }

    /// Places with no outgoing transition.
    pub fn end_state(&self) -> Marking {
        self.end
    }

    pub fn place_index(&self, name: &str) -> Option<PlaceId> {
        self.places.iter().position(|p| p == name)
    }

    pub fn transition_index(&self, name: &str) -> Option<TransitionId> {
        self.transitions.iter().position(|t| t.name == name)
    }

    /// True once the net has reached its end state.
    pub fn is_complete(&self, s: Marking) -> bool {
        s == self.end
    }

    /// Renders a marking as `{p1,p2}`.
    pub fn marking_names(&self, s: Marking) -> String {
        let names: Vec<&str> = s.places().map(|p| self.places[p].as_str()).collect();
        format!("{{{}}}", names.join(","))
    }

    pub fn is_enabled(&self, s: Marking, t: TransitionId) -> bool {
        self.transitions[t].preset.is_subset(s)
    }

    /// Transitions `t` with `•t ⊆ s`.
    pub fn enabled(&self, s: Marking) -> Vec<TransitionId> {
        (0..self.transitions.len())
            .filter(|&t| self.is_enabled(s, t))
            .collect()
    }

    /// Fires `t`, returning `(s - •t) ∪ t•` and the emitted label.
    pub fn fire(&self, s: Marking, t: TransitionId) -> Result<(Marking, &EventLabel), LpnError> {
        let tr = &self.transitions[t];
        if !tr.preset.is_subset(s) {
            return Err(LpnError::NotEnabled(tr.name.clone()));
        }
        Ok((s.minus(tr.preset).union(tr.postset), &tr.label))
    }

    /// Markings reached by firing each enabled transition labeled `e`.
    /// Empty means `e` cannot be accepted in `s`; more than one result
    /// means several enabled transitions share the label.
    pub fn accept(&self, s: Marking, e: &EventLabel) -> Vec<Marking> {
        let mut out = Vec::new();
        for t in self.enabled(s) {
            if &self.transitions[t].label == e {
                let next = s.minus(self.transitions[t].preset).union(self.transitions[t].postset);
                if !out.contains(&next) {
                    out.push(next);
                }
            }
        }
        out
    }

    /// Every marking reachable from the initial state.
    pub fn reachable(&self) -> BTreeSet<Marking> {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([self.initial]);
        seen.insert(self.initial);
        while let Some(s) = queue.pop_front() {
            for t in self.enabled(s) {
                let (next, _) = self.fire(s, t).expect("enabled");
                if seen.insert(next) {
                    queue.push_back(next);
                }
            }
        }
        seen
    }

    /// Checks that no cycle is reachable from the initial state.
    pub fn check_acyclic(&self) -> Result<(), LpnError> {
        // DFS over the reachability graph with an on-stack marker.
        fn visit(
            lpn: &Lpn,
            s: Marking,
            on_stack: &mut HashSet<Marking>,
            done: &mut HashSet<Marking>,
        ) -> bool {
            if done.contains(&s) {
                return true;
            }
            if !on_stack.insert(s) {
                return false;
            }
            for t in lpn.enabled(s) {
                let (next, _) = lpn.fire(s, t).expect("enabled");
                if !visit(lpn, next, on_stack, done) {
                    return false;
                }
            }
            on_stack.remove(&s);
            done.insert(s);
            true
        }
        let mut on_stack = HashSet::new();
        let mut done = HashSet::new();
        if visit(self, self.initial, &mut on_stack, &mut done) {
            Ok(())
        } else {
            Err(LpnError::Cyclic(self.name.clone()))
        }
    }

    /// Complete firing sequences from `s0` to a marking that enables nothing.
    pub fn maximal_runs(&self) -> Result<Vec<Vec<TransitionId>>, LpnError> {
        self.check_acyclic()?;
        let mut runs = Vec::new();
        let mut path = Vec::new();
        self.collect_runs(self.initial, &mut path, &mut runs);
        Ok(runs)
    }

    fn collect_runs(&self, s: Marking, path: &mut Vec<TransitionId>, out: &mut Vec<Vec<TransitionId>>) {
        let enabled = self.enabled(s);
        if enabled.is_empty() {
            out.push(path.clone());
            return;
        }
        for t in enabled {
            let (next, _) = self.fire(s, t).expect("enabled");
            path.push(t);
            self.collect_runs(next, path, out);
            path.pop();
        }
    }

    /// Enumerates branches (distinct transition sets of complete runs) and
    /// classifies whether terminal events tell the branches apart.
    pub fn branch_structure(&self) -> Result<BranchStructure, LpnError> {
        let mut branches: Vec<Branch> = Vec::new();
        for run in self.maximal_runs()? {
            let transitions: BTreeSet<TransitionId> = run.iter().copied().collect();
            if branches.iter().any(|b| b.transitions == transitions) {
                continue;
            }
            // A net that enables nothing initially has one empty run.
            let Some(&last) = run.last() else { continue };
            branches.push(Branch {
                transitions,
                sequence: run,
                terminal_event: self.transitions[last].label.clone(),
            });
        }
        let labels: BTreeSet<&EventLabel> = branches.iter().map(|b| &b.terminal_event).collect();
        let kind = if labels.len() == branches.len() {
            BranchKind::DistinctTerminal
        } else {
            BranchKind::SplitRejoin
        };
        Ok(BranchStructure { branches, kind })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Branch {
    pub transitions: BTreeSet<TransitionId>,
    /// One firing order of the branch.
    pub sequence: Vec<TransitionId>,
    pub terminal_event: EventLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    /// Every branch ends with its own event.
    DistinctTerminal,
    /// Branches split and rejoin on a shared final event.
    SplitRejoin,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchStructure {
    pub branches: Vec<Branch>,
    pub kind: BranchKind,
}

/// Builder used by the parser and by tests to assemble nets by name.
#[derive(Debug, Default)]
pub struct LpnBuilder {
    name: String,
    places: Vec<String>,
    initial: Vec<PlaceId>,
    transitions: Vec<Transition>,
}

impl LpnBuilder {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn place(mut self, name: &str, initial: bool) -> Self {
        self.add_place(name, initial);
        self
    }

    pub fn add_place(&mut self, name: &str, initial: bool) -> PlaceId {
        let id = match self.places.iter().position(|p| p == name) {
            Some(id) => id,
            None => {
                self.places.push(name.to_string());
                self.places.len() - 1
            }
        };
        if initial && !self.initial.contains(&id) {
            self.initial.push(id);
        }
        id
    }

    pub fn place_id(&self, name: &str) -> Option<PlaceId> {
        self.places.iter().position(|p| p == name)
    }

    pub fn trans(mut self, name: &str, pre: &[&str], post: &[&str], label: EventLabel) -> Self {
        self.add_transition(name, pre, post, label, None);
        self
    }

    pub fn add_transition(
        &mut self,
        name: &str,
        pre: &[&str],
        post: &[&str],
        label: EventLabel,
        status: Option<StatusRef>,
    ) {
        let mut mk = |names: &[&str]| Marking::from_places(names.iter().map(|n| self.add_place(n, false)));
        let preset = mk(pre);
        let postset = mk(post);
        self.transitions.push(Transition {
            name: name.to_string(),
            preset,
            postset,
            label,
            status,
        });
    }

    pub fn build(self) -> Result<Lpn, LpnError> {
        Lpn::new(
            self.name,
            self.places,
            self.transitions,
            Marking::from_places(self.initial),
        )
    }
}
