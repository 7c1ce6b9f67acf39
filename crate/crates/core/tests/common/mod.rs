//! Oracles and helpers shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashSet;

use rand::Rng;
use soctrace::catalog::{FieldKind, FlowSet};
use soctrace::scenario::{project, InstanceRecord, Scenario, ViewLevel};
use soctrace::trace::{SelectionMask, SignalTrace};

pub fn val_cmd_mask(fs: &FlowSet) -> SelectionMask {
    SelectionMask::fields(&fs.enc, &[FieldKind::Val, FieldKind::Cmd], false)
}

pub fn type3(fs: &FlowSet, s: &Scenario) -> soctrace::scenario::ProjectedView {
    project(&s.records(fs), ViewLevel::Type3)
}

pub fn sorted_records(fs: &FlowSet, s: &Scenario) -> Vec<InstanceRecord> {
    let mut r = s.records(fs);
    r.sort();
    r
}

/// All Val bits, a random subset of Cmd bits per link (each kept with
/// probability `p_cmd`), and one random Tag and Sid bit subset shared by
/// every link. Status bits are observed with probability 1/2.
pub fn random_mask(fs: &FlowSet, rng: &mut impl Rng, p_cmd: f64) -> SelectionMask {
    let enc = &fs.enc;
    let mut m = SelectionMask::fields(enc, &[FieldKind::Val], false);
    let tag_bits: u64 = rng.gen::<u8>() as u64;
    let sid_bits: u64 = rng.gen::<u8>() as u64;
    for (k, l) in enc.links.iter().enumerate() {
        if l.is_status() {
            for j in 0..l.width {
                if rng.gen_bool(0.5) {
                    m.bits[k].set(j, true);
                }
            }
            continue;
        }
        if let Some((off, w)) = l.field(FieldKind::Cmd) {
            for b in 0..w {
                if rng.gen_bool(p_cmd) {
                    m.bits[k].set(off + b, true);
                }
            }
        }
        for (kind, bits) in [(FieldKind::Tag, tag_bits), (FieldKind::Sid, sid_bits)] {
            if let Some((off, w)) = l.field(kind) {
                for b in 0..w.min(64) {
                    if bits >> b & 1 == 1 {
                        m.bits[k].set(off + b, true);
                    }
                }
            }
        }
    }
    m
}

/// `base` plus each unobserved Cmd/Tag/Sid/status bit with probability `p`.
pub fn random_superset(fs: &FlowSet, base: &SelectionMask, rng: &mut impl Rng, p: f64) -> SelectionMask {
    let mut m = base.clone();
    for (k, l) in fs.enc.links.iter().enumerate() {
        let mut cand: Vec<usize> = Vec::new();
        if l.is_status() {
            cand.extend(0..l.width);
        }
        for kind in [FieldKind::Cmd, FieldKind::Tag, FieldKind::Sid] {
            if let Some((off, w)) = l.field(kind) {
                cand.extend(off..off + w);
            }
        }
        for i in cand {
            if rng.gen_bool(p) {
                m.bits[k].set(i, true);
            }
        }
    }
    m
}

/// Observed field bits at one step: (mask, value).
fn observed(trace: &SignalTrace, mask: &SelectionMask, step: usize, link: usize, off: usize, w: usize) -> (u64, u64) {
    let mut mk = 0;
    let mut v = 0;
    for b in 0..w.min(64) {
        if mask.bits[link].get(off + b) {
            mk |= 1 << b;
            if trace.steps[step][link].get(off + b) {
                v |= 1 << b;
            }
        }
    }
    (mk, v)
}

struct Replay<'a> {
    fs: &'a FlowSet,
    trace: &'a SignalTrace,
    mask: &'a SelectionMask,
    inst: Vec<(usize, usize, Option<usize>, Vec<usize>)>,
    seen: HashSet<(usize, Vec<usize>, Vec<(u64, u64)>)>,
}

impl Replay<'_> {
    /// Can transition `j` of instance `i` fire at step `h`? Returns the
    /// updated Sid knowledge.
    fn fits(&self, i: usize, j: usize, h: usize, sid: (u64, u64)) -> Option<(u64, u64)> {
        let (flow, ..) = self.inst[i];
        let f = &self.fs.flows[flow];
        let t = self.inst[i].3[j];
        let k = f.links[t];
        let l = &self.fs.enc.links[k];
        let (voff, _) = l.field(FieldKind::Val).unwrap();
        if !(self.mask.bits[k].get(voff) && self.trace.steps[h][k].get(voff)) {
            return None;
        }
        let ev = &self.fs.events[f.events[t]];
        let code = l.cmds[&ev.cmd];
        let (coff, cw) = l.field(FieldKind::Cmd).unwrap();
        let (cm, cv) = observed(self.trace, self.mask, h, k, coff, cw);
        if (code ^ cv) & cm != 0 {
            return None;
        }
        if let Some((toff, tw)) = l.field(FieldKind::Tag) {
            let (tm, tv) = observed(self.trace, self.mask, h, k, toff, tw);
            if (f.initiator_tag ^ tv) & tm != 0 {
                return None;
            }
        }
        let mut sid = sid;
        if let Some((soff, sw)) = l.field(FieldKind::Sid) {
            let (sm, sv) = observed(self.trace, self.mask, h, k, soff, sw);
            if (sid.1 ^ sv) & sid.0 & sm != 0 {
                return None;
            }
            sid = (sid.0 | sm, (sid.1 & sid.0) | (sv & sm));
        }
        if let Some(s) = f.status[t] {
            let (sk, sj) = self.fs.enc.status_bits[s];
            if self.mask.bits[sk].get(sj) && !self.trace.steps[h][sk].get(sj) {
                return None;
            }
        }
        Some(sid)
    }

    fn search(&mut self, h: usize, pos: Vec<usize>, sids: Vec<(u64, u64)>) -> bool {
        if h == self.trace.len() {
            return pos.iter().zip(&self.inst).all(|(&p, i)| p == i.3.len());
        }
        if !self.seen.insert((h, pos.clone(), sids.clone())) {
            return false;
        }
        // Instances forced to fire now, and the possible firers.
        let mut must = Vec::new();
        let mut may = Vec::new();
        for (i, &(_, start, end, ref path)) in self.inst.iter().enumerate() {
            let p = pos[i];
            if p == path.len() {
                continue;
            }
            if p == 0 && start > h {
                continue;
            }
            if p == 0 && start < h {
                return false;
            }
            let last = p + 1 == path.len();
            if last && end.is_some_and(|e| e < h) {
                return false;
            }
            if last && end.is_some_and(|e| e > h) {
                continue;
            }
            if p == 0 && start == h || last && end == Some(h) {
                must.push(i);
            }
            may.push(i);
        }
        self.choose(h, &pos, &sids, &may, &must, 0, &mut Vec::new())
    }

    #[allow(clippy::too_many_arguments)]
    fn choose(
        &mut self,
        h: usize,
        pos: &[usize],
        sids: &[(u64, u64)],
        may: &[usize],
        must: &[usize],
        idx: usize,
        picked: &mut Vec<(usize, (u64, u64))>,
    ) -> bool {
        if idx == may.len() {
            if must.iter().any(|m| !picked.iter().any(|(i, _)| i == m)) {
                return false;
            }
            // Every observed message and status pulse is used exactly once.
            let enc = &self.fs.enc;
            let mut links = vec![0usize; enc.links.len()];
            let mut pulses = vec![0usize; enc.status_bits.len()];
            for &(i, _) in picked.iter() {
                let f = &self.fs.flows[self.inst[i].0];
                let t = self.inst[i].3[pos[i]];
                links[f.links[t]] += 1;
                if let Some(s) = f.status[t] {
                    pulses[s] += 1;
                }
            }
            for k in 0..enc.message_links {
                let (voff, _) = enc.links[k].field(FieldKind::Val).unwrap();
                let busy = self.mask.bits[k].get(voff) && self.trace.steps[h][k].get(voff);
                if links[k] != busy as usize {
                    return false;
                }
            }
            for (s, &(k, j)) in enc.status_bits.iter().enumerate() {
                if self.mask.bits[k].get(j) && pulses[s] != self.trace.steps[h][k].get(j) as usize {
                    return false;
                }
            }
            let mut pos2 = pos.to_vec();
            let mut sids2 = sids.to_vec();
            for &(i, s) in picked.iter() {
                pos2[i] += 1;
                sids2[i] = s;
            }
            return self.search(h + 1, pos2, sids2);
        }
        let i = may[idx];
        if let Some(s) = self.fits(i, pos[i], h, sids[i]) {
            picked.push((i, s));
            if self.choose(h, pos, sids, may, must, idx + 1, picked) {
                return true;
            }
            picked.pop();
        }
        self.choose(h, pos, sids, may, must, idx + 1, picked)
    }
}

/// Interleaving search: does some schedule of the scenario's instance
/// paths reproduce every observed bit of the trace? Requires every message
/// link's Val bit to be observed.
pub fn replay_ok(fs: &FlowSet, trace: &SignalTrace, mask: &SelectionMask, scen: &Scenario) -> bool {
    for k in 0..fs.enc.message_links {
        let (voff, _) = fs.enc.links[k].field(FieldKind::Val).unwrap();
        assert!(mask.bits[k].get(voff), "replay oracle needs every Val bit");
    }
    let mut inst = Vec::new();
    for i in scen.instances() {
        let lpn = fs.flows[i.flow].lpn();
        let path: Vec<usize> = i.path.iter().map(|&t| t as usize).collect();
        let mut m = lpn.initial();
        for &t in &path {
            match lpn.fire(m, t) {
                Ok((n, _)) => m = n,
                Err(_) => return false,
            }
        }
        if m != i.marking || lpn.is_complete(m) != i.end.is_some() || path.is_empty() {
            return false;
        }
        inst.push((i.flow, i.start, i.end, path));
    }
    let n = inst.len();
    let mut r = Replay {
        fs,
        trace,
        mask,
        inst,
        seen: HashSet::new(),
    };
    r.search(0, vec![0; n], vec![(0, 0); n])
}
