//! SL-cache defense: runahead fills are parked in a side buffer tagged with
//! the branch scope they were loaded under, and only reach the regular
//! hierarchy once every enclosing branch has been validated.
//!
//! Branch ordinals are global and never reused. Ordinal 0 means "no branch".

use std::collections::{BTreeMap, BTreeSet};

use crate::isa::{Instruction, Opcode, NUM_REGS};
pub use crate::uarch::events::BTag;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlEntry {
    pub line_addr: u64,
    pub b_tag: BTag,
    pub is_tag: u32,
    pub fill_cycle: u64,
    /// Cycle the line's data arrives in the SL cache.
    pub ready_cycle: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScopeFrame {
    pub ordinal: u32,
    /// First pc past the scope; `usize::MAX` for dynamic (indirect) scopes.
    pub end: usize,
}

/// Dispatch-order taint view: one ordinal per architectural register
/// (the youngest producer's taint) plus the open scope stack.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TaintState {
    pub regs: [u32; NUM_REGS],
    pub scopes: Vec<ScopeFrame>,
}

impl TaintState {
    pub fn innermost(&self) -> u32 {
        self.scopes.last().map_or(0, |f| f.ordinal)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Pending,
    Correct,
    Wrong,
    /// Still undecided when the next episode began.
    Expired,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchRecord {
    pub pc: usize,
    pub parent: u32,
    /// Next pc fetch followed; `None` when the front end had no target.
    pub predicted_next: Option<usize>,
    pub verdict: Verdict,
}

/// Tags assigned to one instruction at dispatch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DispatchTags {
    /// Ordinal opened by this instruction (branches only).
    pub ordinal: u32,
    pub b_tag: BTag,
    pub is_tag: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FillOutcome {
    Installed,
    /// Line already parked; no new entry.
    AlreadyPresent,
    /// Capacity reached; the line is installed nowhere.
    Refused,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lookup {
    /// Not in the SL cache, or bypass active: use the regular hierarchy.
    Regular,
    /// Safe to promote: latency comes from `ready_cycle`.
    Promote(SlEntry),
    /// Some enclosing branch is still undecided.
    Wait,
    /// Entry can never be validated; drop it and use the regular path.
    Discard,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SlStats {
    pub fills: u64,
    pub refused: u64,
    pub promotions: u64,
    pub deletions: u64,
    pub bypass_events: u64,
}

#[derive(Clone, Debug)]
pub struct DefenseState {
    capacity: usize,
    entries: BTreeMap<u64, SlEntry>,
    /// Resident entry count, maintained independently of `entries`.
    c: usize,
    s: BTreeSet<u32>,
    pub sl_bypass: bool,
    branches: Vec<BranchRecord>,
    usl: BTreeMap<u32, u32>,
    /// Ordinals opened since the last episode began, by branch pc.
    by_pc: BTreeMap<usize, Vec<u32>>,
    pub taint: TaintState,
    pub stats: SlStats,
}

impl DefenseState {
    pub fn new(capacity: usize) -> Self {
        DefenseState {
            capacity,
            entries: BTreeMap::new(),
            c: 0,
            s: BTreeSet::new(),
            sl_bypass: false,
            branches: Vec::new(),
            usl: BTreeMap::new(),
            by_pc: BTreeMap::new(),
            taint: TaintState::default(),
            stats: SlStats::default(),
        }
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn entries(&self) -> impl Iterator<Item = &SlEntry> {
        self.entries.values()
    }

    pub fn entry(&self, line_addr: u64) -> Option<&SlEntry> {
        self.entries.get(&line_addr)
    }

    pub fn correct_set(&self) -> &BTreeSet<u32> {
        &self.s
    }

    pub fn branch(&self, ordinal: u32) -> Option<&BranchRecord> {
        ordinal.checked_sub(1).and_then(|i| self.branches.get(i as usize))
    }

    fn record_mut(&mut self, ordinal: u32) -> &mut BranchRecord {
        &mut self.branches[ordinal as usize - 1]
    }

    /// Allocates a new ordinal nested under the current innermost scope.
    pub fn new_ordinal(&mut self, pc: usize, predicted_next: Option<usize>) -> u32 {
        let parent = self.taint.innermost();
        self.branches.push(BranchRecord { pc, parent, predicted_next, verdict: Verdict::Pending });
        let ord = self.branches.len() as u32;
        self.by_pc.entry(pc).or_default().push(ord);
        ord
    }

    fn ancestors(&self, mut ordinal: u32) -> impl Iterator<Item = u32> + '_ {
        std::iter::from_fn(move || {
            let cur = ordinal;
            if cur == 0 {
                return None;
            }
            ordinal = self.branch(cur).map_or(0, |b| b.parent);
            Some(cur)
        })
    }

    /// True when `ordinal` is `root` or nested (transitively) inside it.
    pub fn is_within(&self, ordinal: u32, root: u32) -> bool {
        self.ancestors(ordinal).any(|a| a == root)
    }

    /// New runahead episode: forget S, drop leftovers, expire open verdicts.
    /// Returns the dropped entries.
    pub fn begin_episode(&mut self) -> Vec<SlEntry> {
        self.s.clear();
        self.sl_bypass = false;
        self.taint = TaintState::default();
        for ord in std::mem::take(&mut self.by_pc).into_values().flatten() {
            let b = self.record_mut(ord);
            if b.verdict == Verdict::Pending {
                b.verdict = Verdict::Expired;
            }
        }
        let dropped: Vec<SlEntry> = std::mem::take(&mut self.entries).into_values().collect();
        self.c -= dropped.len();
        self.stats.deletions += dropped.len() as u64;
        dropped
    }

    /// Scope matching and taint propagation for one dispatched instruction,
    /// in program order. Returns the instruction's tags.
    pub fn on_dispatch(&mut self, pc: usize, insn: &Instruction, scope_end: Option<usize>, predicted_next: Option<usize>) -> DispatchTags {
        while self.taint.scopes.last().is_some_and(|f| f.end == pc) {
            self.taint.scopes.pop();
        }
        let [a, b] = insn.sources();
        let t = |r: Option<u8>| r.map_or(0, |r| self.taint.regs[r as usize]);
        let src = t(a).max(t(b));
        let mut tags = DispatchTags::default();
        let mut dest_taint = src;

        match insn.op {
            Opcode::Ld => {
                let inner = self.taint.innermost();
                tags.is_tag = t(a);
                if inner != 0 {
                    let m = if tags.is_tag != 0 {
                        let c = self.usl.entry(inner).or_insert(0);
                        *c += 1;
                        *c
                    } else {
                        0
                    };
                    tags.b_tag = BTag { n: inner, m };
                    dest_taint = inner;
                } else {
                    dest_taint = tags.is_tag;
                }
            }
            op if op.is_cond_branch() => {
                if let Some(end) = scope_end {
                    tags.ordinal = self.new_ordinal(pc, predicted_next);
                    self.taint.scopes.push(ScopeFrame { ordinal: tags.ordinal, end });
                }
            }
            Opcode::Jalr | Opcode::Ret => {
                tags.ordinal = self.new_ordinal(pc, predicted_next);
                self.taint.scopes.push(ScopeFrame { ordinal: tags.ordinal, end: usize::MAX });
                dest_taint = 0;
            }
            Opcode::Li | Opcode::Call | Opcode::Rdcycle => dest_taint = 0,
            _ => {}
        }
        if let Some(rd) = insn.dest() {
            self.taint.regs[rd as usize] = dest_taint;
        }
        tags
    }

    /// Squash repair: roll the taint view back to just after the branch
    /// that opened `ordinal`, which re-opens (if its scope is still entered
    /// on the corrected path) under a fresh, already-validated ordinal.
    pub fn restore_after_squash(&mut self, after_branch: TaintState, ordinal: u32, corrected_next: usize) {
        self.taint = after_branch;
        if ordinal != 0 && self.taint.scopes.last().is_some_and(|f| f.ordinal == ordinal) {
            let frame = self.taint.scopes.pop().expect("checked above");
            let pc = self.branch(ordinal).map_or(0, |b| b.pc);
            let fresh = self.new_ordinal(pc, Some(corrected_next));
            self.record_mut(fresh).verdict = Verdict::Correct;
            self.s.insert(fresh);
            self.taint.scopes.push(ScopeFrame { ordinal: fresh, end: frame.end });
        }
    }

    /// Parks a runahead fill. `b_tag`/`is_tag` come from the load's dispatch.
    pub fn on_runahead_load(&mut self, line_addr: u64, b_tag: BTag, is_tag: u32, now: u64, ready: u64) -> FillOutcome {
        if self.entries.contains_key(&line_addr) {
            return FillOutcome::AlreadyPresent;
        }
        if self.c >= self.capacity {
            self.stats.refused += 1;
            return FillOutcome::Refused;
        }
        self.entries.insert(line_addr, SlEntry { line_addr, b_tag, is_tag, fill_cycle: now, ready_cycle: ready });
        self.c += 1;
        self.stats.fills += 1;
        FillOutcome::Installed
    }

    /// Records a branch verdict. A wrong verdict deletes every entry tagged
    /// with the branch or any branch nested in it; returns the deletions.
    pub fn on_branch_resolved(&mut self, ordinal: u32, correct: bool) -> Vec<SlEntry> {
        if ordinal == 0 || self.branch(ordinal).is_none() {
            return Vec::new();
        }
        if correct {
            self.record_mut(ordinal).verdict = Verdict::Correct;
            self.s.insert(ordinal);
            return Vec::new();
        }
        self.record_mut(ordinal).verdict = Verdict::Wrong;
        let doomed: Vec<u64> = self
            .entries
            .values()
            .filter(|e| self.is_within(e.b_tag.n, ordinal) || self.is_within(e.is_tag, ordinal))
            .map(|e| e.line_addr)
            .collect();
        doomed.iter().map(|l| self.remove(*l)).collect()
    }

    /// First normal-mode resolution of `pc` after an episode decides every
    /// pending ordinal recorded at that pc.
    pub fn on_normal_resolve(&mut self, pc: usize, actual_next: usize) -> Vec<SlEntry> {
        let Some(ords) = self.by_pc.remove(&pc) else { return Vec::new() };
        let pending: Vec<(u32, bool)> = ords
            .into_iter()
            .filter_map(|o| self.branch(o).map(|b| (o, b)))
            .filter(|(_, b)| b.verdict == Verdict::Pending)
            .map(|(o, b)| (o, b.predicted_next == Some(actual_next)))
            .collect();
        let mut deleted = Vec::new();
        for (ord, ok) in pending {
            deleted.extend(self.on_branch_resolved(ord, ok));
        }
        deleted
    }

    /// (some ancestor pending, some ancestor invalid) over both tag chains.
    fn blockers(&self, e: &SlEntry) -> (bool, bool) {
        let mut waiting = false;
        let mut wrong = false;
        for root in [e.b_tag.n, e.is_tag] {
            for a in self.ancestors(root) {
                match self.branch(a).map(|b| b.verdict) {
                    Some(Verdict::Correct) if self.s.contains(&a) => {}
                    Some(Verdict::Pending) => waiting = true,
                    _ => wrong = true,
                }
            }
        }
        (waiting, wrong)
    }

    /// Post-exit load protocol for one line.
    pub fn lookup(&self, line_addr: u64) -> Lookup {
        if self.sl_bypass || self.c == 0 {
            return Lookup::Regular;
        }
        let Some(e) = self.entries.get(&line_addr) else { return Lookup::Regular };
        match self.blockers(e) {
            (_, true) => Lookup::Discard,
            (true, false) => Lookup::Wait,
            (false, false) => Lookup::Promote(*e),
        }
    }

    /// Removes the entry after a promotion; sets bypass when C reaches 0.
    /// Returns true when this promotion emptied the SL cache.
    pub fn promote(&mut self, line_addr: u64) -> bool {
        if self.entries.remove(&line_addr).is_some() {
            self.c -= 1;
            self.stats.promotions += 1;
        }
        self.check_bypass()
    }

    /// Conservative removal of an entry whose verdict never arrived, or
    /// whose governing branch is no longer valid.
    pub fn delete(&mut self, line_addr: u64) -> Option<SlEntry> {
        let e = self.entries.contains_key(&line_addr).then(|| self.remove(line_addr));
        self.check_bypass();
        e
    }

    fn remove(&mut self, line_addr: u64) -> SlEntry {
        let e = self.entries.remove(&line_addr).expect("entry present");
        self.c -= 1;
        self.stats.deletions += 1;
        e
    }

    fn check_bypass(&mut self) -> bool {
        if self.c == 0 && !self.sl_bypass {
            self.sl_bypass = true;
            self.stats.bypass_events += 1;
            return true;
        }
        false
    }

    /// C-consistency and deletion closure.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.c != self.entries.len() {
            return Err(format!("C = {} but {} entries resident", self.c, self.entries.len()));
        }
        for e in self.entries.values() {
            for root in [e.b_tag.n, e.is_tag] {
                if let Some(bad) = self.ancestors(root).find(|&a| self.branch(a).is_some_and(|b| b.verdict == Verdict::Wrong)) {
                    return Err(format!("entry {:#x} survives wrong branch {bad}", e.line_addr));
                }
            }
        }
        Ok(())
    }
}
