//! Link encodings, signal traces, selection masks and trace abstraction.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::catalog::{Catalog, EventId, FieldKind, FlowSet, LinkId};
use crate::lpn::EventLabel;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TraceError {
    #[error("no link {0}")]
    UnknownLink(String),
    #[error("command `{cmd}` is not carried by link {link}")]
    UnknownCommand { link: String, cmd: String },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("step {step}, link {link}: {message}")]
    State {
        step: usize,
        link: String,
        message: String,
    },
    #[error("trace links do not match the catalog: {0}")]
    Mismatch(String),
}

/// Fixed-width little-endian bit vector.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Bits {
    width: usize,
    words: Vec<u64>,
}

impl fmt::Debug for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bits({}:{})", self.width, self.to_hex())
    }
}

impl Bits {
    pub fn zeros(width: usize) -> Bits {
        Bits {
            width,
            words: vec![0; width.div_ceil(64)],
        }
    }

    pub fn ones(width: usize) -> Bits {
        let mut b = Bits::zeros(width);
        for i in 0..width {
            b.set(i, true);
        }
        b
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, i: usize) -> bool {
        i < self.width && (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn set(&mut self, i: usize, v: bool) {
        assert!(i < self.width, "bit {i} outside width {}", self.width);
        if v {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    /// Writes the low `w` bits of `value` at `off`. `w` ≤ 64.
    pub fn set_field(&mut self, off: usize, w: usize, value: u64) {
        for k in 0..w {
            self.set(off + k, (value >> k) & 1 == 1);
        }
    }

    pub fn field(&self, off: usize, w: usize) -> u64 {
        (0..w.min(64)).fold(0, |acc, k| acc | ((self.get(off + k) as u64) << k))
    }

    pub fn is_zero(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn ones_iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.width).filter(|&i| self.get(i))
    }

    /// Every set bit of `self` is set in `other`.
    pub fn is_subset(&self, other: &Bits) -> bool {
        self.words
            .iter()
            .zip(other.words.iter().chain(std::iter::repeat(&0)))
            .all(|(a, b)| a & !b == 0)
    }

    pub fn or_assign(&mut self, other: &Bits) {
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    /// MSB-first hex, `ceil(width/4)` digits.
    pub fn to_hex(&self) -> String {
        let digits = self.width.div_ceil(4).max(1);
        let mut s = String::with_capacity(digits);
        for d in (0..digits).rev() {
            let v = self.field(d * 4, 4.min(self.width.saturating_sub(d * 4)));
            write!(s, "{v:x}").unwrap();
        }
        s
    }

    /// Parses MSB-first hex; `None` if a set bit lies beyond `width`.
    pub fn from_hex(s: &str, width: usize) -> Option<Bits> {
        let mut b = Bits::zeros(width);
        for (pos, c) in s.chars().rev().enumerate() {
            let v = c.to_digit(16)? as u64;
            for k in 0..4 {
                if (v >> k) & 1 == 1 {
                    let i = pos * 4 + k;
                    if i >= width {
                        return None;
                    }
                    b.set(i, true);
                }
            }
        }
        Some(b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LinkKind {
    Message { src: String, dest: String },
    /// One bit per branch-status signal of `component`.
    Status { component: String, signals: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkLayout {
    pub name: String,
    pub kind: LinkKind,
    pub fields: Vec<(FieldKind, usize, usize)>,
    pub width: usize,
    pub cmds: BTreeMap<String, u64>,
}

impl LinkLayout {
    pub fn field(&self, kind: FieldKind) -> Option<(usize, usize)> {
        self.fields.iter().find(|f| f.0 == kind).map(|&(_, o, w)| (o, w))
    }

    pub fn is_status(&self) -> bool {
        matches!(self.kind, LinkKind::Status { .. })
    }
}

/// Bit layout of every traced link: message links in catalog order, then
/// one status link per component with status signals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageEncoding {
    pub links: Vec<LinkLayout>,
    pub tags: BTreeMap<String, u64>,
    /// Flat status signal id to (trace link, bit).
    pub status_bits: Vec<(usize, usize)>,
    pub message_links: usize,
}

/// One message on a link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub event: EventLabel,
    pub tag: u64,
    pub sid: u64,
    pub addr: u64,
    pub data: u64,
}

impl MessageEncoding {
    pub fn from_catalog(cat: &Catalog) -> MessageEncoding {
        let carried = cat.link_commands();
        let mut links = Vec::new();
        for (li, l) in cat.links.iter().enumerate() {
            let mut off = 0;
            let mut fields = Vec::new();
            for &(k, w) in &l.fields {
                fields.push((k, off, w));
                off += w;
            }
            links.push(LinkLayout {
                name: l.name(),
                kind: LinkKind::Message {
                    src: l.src.clone(),
                    dest: l.dest.clone(),
                },
                fields,
                width: off,
                cmds: carried[li].iter().map(|c| (c.clone(), cat.commands[c])).collect(),
            });
        }
        let message_links = links.len();
        let mut status_bits = Vec::new();
        for d in &cat.status {
            for j in 0..d.signals.len() {
                status_bits.push((links.len(), j));
            }
            links.push(LinkLayout {
                name: d.name(),
                kind: LinkKind::Status {
                    component: d.component.clone(),
                    signals: d.signals.clone(),
                },
                fields: vec![],
                width: d.signals.len(),
                cmds: BTreeMap::new(),
            });
        }
        MessageEncoding {
            links,
            tags: cat.components.iter().map(|c| (c.name.clone(), c.tag)).collect(),
            status_bits,
            message_links,
        }
    }

    pub fn link_index(&self, name: &str) -> Option<usize> {
        self.links.iter().position(|l| l.name == name)
    }

    pub fn message_link(&self, src: &str, dest: &str) -> Option<LinkId> {
        self.links[..self.message_links]
            .iter()
            .position(|l| l.kind == LinkKind::Message { src: src.into(), dest: dest.into() })
    }

    pub fn idle_step(&self) -> Vec<Bits> {
        self.links.iter().map(|l| Bits::zeros(l.width)).collect()
    }

    /// Cmd pattern of `cmd` on link `k`.
    pub fn cmd_code(&self, k: LinkId, cmd: &str) -> Option<u64> {
        self.links[k].cmds.get(cmd).copied()
    }

    pub fn encode(&self, m: &Message) -> Result<(LinkId, Bits), TraceError> {
        let e = &m.event;
        let k = self
            .message_link(&e.src, &e.dest)
            .ok_or_else(|| TraceError::UnknownLink(format!("{}->{}", e.src, e.dest)))?;
        let l = &self.links[k];
        let code = self.cmd_code(k, &e.cmd).ok_or_else(|| TraceError::UnknownCommand {
            link: l.name.clone(),
            cmd: e.cmd.clone(),
        })?;
        let mut b = Bits::zeros(l.width);
        for &(kind, off, w) in &l.fields {
            let v = match kind {
                FieldKind::Val => 1,
                FieldKind::Cmd => code,
                FieldKind::Tag => m.tag,
                FieldKind::Sid => m.sid,
                FieldKind::Addr => m.addr,
                FieldKind::Data => m.data,
            };
            b.set_field(off, w.min(64), v);
        }
        Ok((k, b))
    }

    /// Checks that `trace` uses exactly this encoding's links and widths.
    pub fn check_trace(&self, trace: &SignalTrace) -> Result<(), TraceError> {
        let expected: Vec<(String, usize)> = self.links.iter().map(|l| (l.name.clone(), l.width)).collect();
        if trace.links != expected {
            let diff = expected
                .iter()
                .zip(trace.links.iter().map(Some).chain(std::iter::repeat(None)))
                .find(|(e, t)| Some(*e) != *t)
                .map(|(e, t)| match t {
                    Some(t) => format!("expected link {} ({} bits), found {} ({} bits)", e.0, e.1, t.0, t.1),
                    None => format!("missing link {}", e.0),
                })
                .unwrap_or_else(|| "extra links".into());
            return Err(TraceError::Mismatch(diff));
        }
        Ok(())
    }
}

/// Per-step bit states of every link.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SignalTrace {
    pub links: Vec<(String, usize)>,
    pub steps: Vec<Vec<Bits>>,
}

impl SignalTrace {
    pub fn new(enc: &MessageEncoding) -> SignalTrace {
        SignalTrace {
            links: enc.links.iter().map(|l| (l.name.clone(), l.width)).collect(),
            steps: vec![],
        }
    }

    /// One step per entry; each entry lists the messages sent that step.
    pub fn from_messages(enc: &MessageEncoding, steps: &[Vec<Message>]) -> Result<SignalTrace, TraceError> {
        let mut t = SignalTrace::new(enc);
        for msgs in steps {
            let mut row = enc.idle_step();
            for m in msgs {
                let (k, b) = enc.encode(m)?;
                row[k] = b;
            }
            t.steps.push(row);
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("links:\n");
        for (n, w) in &self.links {
            writeln!(s, "link {n} {w}").unwrap();
        }
        for (i, step) in self.steps.iter().enumerate() {
            write!(s, "step {i}:").unwrap();
            for b in step {
                write!(s, " {}", b.to_hex()).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<SignalTrace, TraceError> {
        let mut t = SignalTrace::default();
        let mut seen_header = false;
        let mut in_body = false;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| TraceError::Format {
                line: line_no,
                message: m,
            };
            if !seen_header {
                if line != "links:" {
                    return Err(err("expected `links:` header".into()));
                }
                seen_header = true;
                continue;
            }
            if let Some(rest) = line.strip_prefix("link ") {
                if in_body {
                    return Err(err("link declaration after first step".into()));
                }
                let mut it = rest.split_whitespace();
                let (Some(n), Some(w), None) = (it.next(), it.next(), it.next()) else {
                    return Err(err("expected `link <name> <width>`".into()));
                };
                let w: usize = w.parse().map_err(|_| err(format!("bad width `{w}`")))?;
                if w == 0 {
                    return Err(err("zero-width link".into()));
                }
                t.links.push((n.to_string(), w));
            } else if let Some(rest) = line.strip_prefix("step ") {
                in_body = true;
                let (i, states) = rest
                    .split_once(':')
                    .ok_or_else(|| err("expected `step <i>: ...`".into()))?;
                let i: usize = i.trim().parse().map_err(|_| err(format!("bad step index `{i}`")))?;
                if i != t.steps.len() {
                    return Err(err(format!("expected step {}, found {i}", t.steps.len())));
                }
                let states: Vec<&str> = states.split_whitespace().collect();
                if states.len() != t.links.len() {
                    return Err(err(format!(
                        "step {i} has {} states for {} links",
                        states.len(),
                        t.links.len()
                    )));
                }
                let mut row = Vec::with_capacity(states.len());
                for ((name, w), h) in t.links.iter().zip(states) {
                    let b = Bits::from_hex(h, *w).ok_or_else(|| TraceError::State {
                        step: i,
                        link: name.clone(),
                        message: format!("`{h}` is not a {w}-bit hex state"),
                    })?;
                    row.push(b);
                }
                t.steps.push(row);
            } else {
                return Err(err(format!("unexpected line `{line}`")));
            }
        }
        if !seen_header {
            return Err(TraceError::Format {
                line: 1,
                message: "expected `links:` header".into(),
            });
        }
        Ok(t)
    }
}

/// Observed bit positions per traced link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMask {
    pub bits: Vec<Bits>,
}

impl SelectionMask {
    pub fn none(enc: &MessageEncoding) -> SelectionMask {
        SelectionMask {
            bits: enc.links.iter().map(|l| Bits::zeros(l.width)).collect(),
        }
    }

    pub fn all(enc: &MessageEncoding) -> SelectionMask {
        SelectionMask {
            bits: enc.links.iter().map(|l| Bits::ones(l.width)).collect(),
        }
    }

    /// Every bit of the given fields on all message links, plus every
    /// status bit when `status` is set.
    pub fn fields(enc: &MessageEncoding, kinds: &[FieldKind], status: bool) -> SelectionMask {
        let mut m = SelectionMask::none(enc);
        for (k, l) in enc.links.iter().enumerate() {
            if l.is_status() {
                if status {
                    m.bits[k] = Bits::ones(l.width);
                }
                continue;
            }
            for &kind in kinds {
                if let Some((off, w)) = l.field(kind) {
                    for i in off..off + w {
                        m.bits[k].set(i, true);
                    }
                }
            }
        }
        m
    }

    pub fn observes(&self, link: usize, bit: usize) -> bool {
        self.bits[link].get(bit)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(Bits::count_ones).sum()
    }

    pub fn is_subset(&self, other: &SelectionMask) -> bool {
        self.bits.len() == other.bits.len() && self.bits.iter().zip(&other.bits).all(|(a, b)| a.is_subset(b))
    }

    pub fn to_text(&self, enc: &MessageEncoding) -> String {
        let mut s = String::new();
        for (l, b) in enc.links.iter().zip(&self.bits) {
            let body = if b.is_zero() {
                "none".to_string()
            } else if b.count_ones() == b.width() {
                "all".to_string()
            } else {
                ranges(&b.ones_iter().collect::<Vec<_>>())
            };
            writeln!(s, "mask {}: {body}", l.name).unwrap();
        }
        s
    }

    /// Links not mentioned are unobserved.
    pub fn parse(text: &str, enc: &MessageEncoding) -> Result<SelectionMask, TraceError> {
        let mut m = SelectionMask::none(enc);
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| TraceError::Format {
                line: idx + 1,
                message: msg,
            };
            let rest = line
                .strip_prefix("mask ")
                .ok_or_else(|| err("expected `mask <link>: <bits>`".into()))?;
            let (name, spec) = rest
                .split_once(':')
                .ok_or_else(|| err("expected `mask <link>: <bits>`".into()))?;
            let k = enc
                .link_index(name.trim())
                .ok_or_else(|| err(format!("unknown link `{}`", name.trim())))?;
            let w = enc.links[k].width;
            let spec = spec.trim();
            let mut b = Bits::zeros(w);
            match spec {
                "all" => b = Bits::ones(w),
                "none" | "" => {}
                _ => {
                    for part in spec.split(',') {
                        let part = part.trim();
                        let (lo, hi) = match part.split_once('-') {
                            Some((a, z)) => (a.trim(), z.trim()),
                            None => (part, part),
                        };
                        let lo: usize = lo.parse().map_err(|_| err(format!("bad bit `{part}`")))?;
                        let hi: usize = hi.parse().map_err(|_| err(format!("bad bit `{part}`")))?;
                        if lo > hi || hi >= w {
                            return Err(err(format!("bit range `{part}` outside width {w}")));
                        }
                        for i in lo..=hi {
                            b.set(i, true);
                        }
                    }
                }
            }
            m.bits[k] = b;
        }
        Ok(m)
    }
}

fn ranges(v: &[usize]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j + 1 < v.len() && v[j + 1] == v[j] + 1 {
            j += 1;
        }
        parts.push(if i == j {
            v[i].to_string()
        } else {
            format!("{}-{}", v[i], v[j])
        });
        i = j + 1;
    }
    parts.join(",")
}

/// Known bits of a field value: bit k is fixed to `(value >> k) & 1` when
/// `(mask >> k) & 1` is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct BitConstraint {
    pub mask: u64,
    pub value: u64,
}

impl BitConstraint {
    pub const ANY: BitConstraint = BitConstraint { mask: 0, value: 0 };

    pub fn exact(value: u64, width: usize) -> BitConstraint {
        let mask = if width >= 64 { u64::MAX } else { (1 << width) - 1 };
        BitConstraint {
            mask,
            value: value & mask,
        }
    }

    pub fn admits(self, v: u64) -> bool {
        (v ^ self.value) & self.mask == 0
    }

    pub fn compatible(self, other: BitConstraint) -> bool {
        (self.value ^ other.value) & self.mask & other.mask == 0
    }

    pub fn merge(self, other: BitConstraint) -> Option<BitConstraint> {
        self.compatible(other).then_some(BitConstraint {
            mask: self.mask | other.mask,
            value: (self.value & self.mask) | (other.value & other.mask),
        })
    }
}

/// A candidate flow event with its observed Tag/Sid bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Candidate {
    pub event: EventId,
    pub tag: BitConstraint,
    pub sid: BitConstraint,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LinkObs {
    /// Val bit not observed: the link is invisible.
    Unobserved,
    /// Val observed as 0.
    Idle,
    /// Val observed as 1. Empty means the state matches no declared event.
    Message(Vec<Candidate>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbstractedStep {
    pub step: usize,
    /// One entry per message link.
    pub links: Vec<LinkObs>,
    /// Per status signal; `None` if its bit is not observed.
    pub pulses: Vec<Option<bool>>,
}

impl AbstractedStep {
    /// Candidate event sets only (empty for idle or unobserved links).
    pub fn event_sets(&self) -> Vec<Vec<EventId>> {
        self.links
            .iter()
            .map(|o| match o {
                LinkObs::Message(c) => c.iter().map(|c| c.event).collect(),
                _ => vec![],
            })
            .collect()
    }
}

/// Observed part of an `off..off+w` field as a constraint.
fn observed_field(state: &Bits, mask: &Bits, field: Option<(usize, usize)>) -> BitConstraint {
    let Some((off, w)) = field else {
        return BitConstraint::ANY;
    };
    let w = w.min(64);
    BitConstraint {
        mask: mask.field(off, w),
        value: state.field(off, w) & mask.field(off, w),
    }
}

/// Maps step `h` of `trace` to candidate events per link.
pub fn abstract_step(fs: &FlowSet, trace: &SignalTrace, h: usize, mask: &SelectionMask) -> AbstractedStep {
    let enc = &fs.enc;
    let row = &trace.steps[h];
    let mut links = Vec::with_capacity(enc.message_links);
    for k in 0..enc.message_links {
        let l = &enc.links[k];
        let (state, m) = (&row[k], &mask.bits[k]);
        let (val_off, _) = l.field(FieldKind::Val).expect("links carry Val");
        if !m.get(val_off) {
            links.push(LinkObs::Unobserved);
            continue;
        }
        if !state.get(val_off) {
            links.push(LinkObs::Idle);
            continue;
        }
        let cmd = observed_field(state, m, l.field(FieldKind::Cmd));
        let tag = observed_field(state, m, l.field(FieldKind::Tag));
        let sid = observed_field(state, m, l.field(FieldKind::Sid));
        let cands = fs.link_events[k]
            .iter()
            .filter(|&&e| cmd.admits(l.cmds[&fs.events[e].cmd]))
            .map(|&e| Candidate { event: e, tag, sid })
            .collect();
        links.push(LinkObs::Message(cands));
    }
    let pulses = enc
        .status_bits
        .iter()
        .map(|&(k, j)| mask.bits[k].get(j).then(|| row[k].get(j)))
        .collect();
    AbstractedStep { step: h, links, pulses }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_round_trip_odd_width() {
        let mut b = Bits::zeros(9);
        b.set(0, true);
        b.set(8, true);
        assert_eq!(b.to_hex(), "101");
        assert_eq!(Bits::from_hex("101", 9), Some(b));
        assert_eq!(Bits::from_hex("201", 9), None);
    }

    #[test]
    fn wr_req_cmd_field() {
        let fs = FlowSet::bundled();
        let m = Message {
            event: EventLabel::new("CPU_0", "Cache_0", "wr_req"),
            tag: 1,
            sid: 0,
            addr: 0,
            data: 0,
        };
        let (k, b) = fs.enc.encode(&m).unwrap();
        let (off, w) = fs.enc.links[k].field(FieldKind::Cmd).unwrap();
        assert_eq!(format!("{:08b}", b.field(off, w)), "01000000");
        assert!(b.get(0));
    }

    #[test]
    fn ranges_render() {
        assert_eq!(ranges(&[0, 1, 2, 5, 7, 8]), "0-2,5,7-8");
    }

    #[test]
    fn constraint_merge() {
        let a = BitConstraint { mask: 0b11, value: 0b01 };
        let b = BitConstraint { mask: 0b110, value: 0b010 };
        assert!(!a.compatible(b));
        let c = BitConstraint { mask: 0b100, value: 0b100 };
        assert_eq!(a.merge(c), Some(BitConstraint { mask: 0b111, value: 0b101 }));
    }
}
