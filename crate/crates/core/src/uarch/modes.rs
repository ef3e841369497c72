use std::cmp::Reverse;

use super::pipeline::LoadTiming;
use super::*;
use crate::isa::Opcode;
use crate::mem_hier::AccessKind;
use crate::sl_defense::{FillOutcome, Lookup, SlEntry};

impl Core {
    pub(super) fn runahead_transitions(&mut self) {
        if self.ra.active {
            if self.live_fill(self.ra.stalling_line).is_none() {
                self.exit_runahead();
            }
        } else {
            self.try_enter_runahead();
        }
    }

    /// Entry condition: the ROB head is a load still waiting on a fill at
    /// the trigger level.
    pub(super) fn try_enter_runahead(&mut self) {
        let rc = self.cfg.runahead;
        if !rc.enabled || self.ra.active {
            return;
        }
        if rc.require_full_rob && self.rob.len() < self.cfg.rob_entries {
            return;
        }
        let Some(head) = self.rob.front() else { return };
        if head.insn.op != Opcode::Ld || head.state != EntryState::Issued || !self.at_trigger(head.level) {
            return;
        }
        let Some(line) = head.fill_line.filter(|&l| self.live_fill(l).is_some()) else { return };
        self.enter_runahead(line);
    }

    fn enter_runahead(&mut self, line: u64) {
        let head = self.rob.front().expect("checked by caller");
        let (seq, pc, level) = (head.seq, head.pc, head.level);
        let predictor = **head.bp_before.as_ref().expect("loads keep a predictor checkpoint");
        let tables = (!self.cfg.bp.persist_runahead_updates).then(|| self.bp.snapshot_tables());
        self.checkpoint = Some(Checkpoint { regs: self.regs, predictor, tables, stalling_pc: pc, entry_cycle: self.cycle });
        self.ra.active = true;
        self.ra.stalling_seq = seq;
        self.ra.stalling_line = line;
        self.ra.episodes += 1;
        self.ra.dispatched_in_episode = 0;
        self.ra.restarts_in_episode = 0;
        self.reg_inv = [false; NUM_REGS];
        self.log(EventKind::RunaheadEnter, seq, pc, Detail::Fill { line_addr: line, level });

        if let Some(d) = self.defense.as_mut() {
            let dropped = d.begin_episode();
            self.log_sl_deletes(&dropped, seq, pc);
            self.retag_rob();
            if self.check {
                self.lines_at_entry = Some(self.hier.data_lines());
            }
        }

        // Every other load stuck at the trigger level turns INV now.
        let now = self.cycle;
        let mut bumped = Vec::new();
        for i in 1..self.rob.len() {
            let trig = self.at_trigger(self.rob[i].level);
            let e = &mut self.rob[i];
            if e.insn.op == Opcode::Ld && e.state == EntryState::Issued && trig && e.done_cycle > now + 1 {
                e.inv = true;
                e.done_cycle = now + 1;
                bumped.push(e.seq);
            }
        }
        for s in bumped {
            self.completions.push(Reverse((now + 1, s)));
        }

        let head = &mut self.rob[0];
        head.state = EntryState::Done;
        head.inv = true;
        head.result = 0;
        self.wake(seq, 0, true);
        self.pseudo_retire();
    }

    /// Re-tags the instructions already in the ROB, in program order, as if
    /// they had been dispatched inside the episode.
    fn retag_rob(&mut self) {
        for i in 0..self.rob.len() {
            let mut e = std::mem::replace(&mut self.rob[i], placeholder());
            self.tag_entry(&mut e);
            // A resolved branch already redirected on a mispredict, so
            // everything younger in the ROB is on its correct path.
            if e.state == EntryState::Done && e.tags.ordinal != 0 && !e.inv {
                let d = self.defense.as_mut().expect("sl mode");
                d.on_branch_resolved(e.tags.ordinal, true);
            }
            self.rob[i] = e;
        }
    }

    pub(super) fn tag_entry(&mut self, e: &mut RobEntry) {
        let Some(d) = self.defense.as_mut() else { return };
        let scope_end = if e.insn.op.is_cond_branch() { self.prog.scope_of(e.pc).map(|s| s.scope_end) } else { None };
        e.tags = d.on_dispatch(e.pc, &e.insn, scope_end, e.predicted_next);
        if e.insn.op.branch_kind().is_some() {
            e.taint_after = Some(Box::new(d.taint.clone()));
        }
    }

    fn exit_runahead(&mut self) {
        let cp = self.checkpoint.take().expect("active episode has a checkpoint");
        let w = self.ra.dispatched_in_episode;
        self.squash_from(0);
        self.max_window = self.max_window.max(w);
        self.ra.longest_episode = self.ra.longest_episode.max(self.cycle - cp.entry_cycle);
        self.ra.max_restarts = self.ra.max_restarts.max(self.ra.restarts_in_episode);
        self.log(EventKind::RunaheadExit, self.ra.stalling_seq, cp.stalling_pc, Detail::Window(w));
        self.regs = cp.regs;
        self.reg_inv = [false; NUM_REGS];
        self.bp.restore(&cp.predictor);
        if let Some(t) = cp.tables {
            self.bp.restore_tables(t);
        }
        self.ra_sb.clear();
        self.ra.active = false;
        self.redirect(cp.stalling_pc);
        self.last_progress = self.cycle;
        if let Some(before) = self.lines_at_entry.take() {
            let leaked: Vec<u64> = self.hier.data_lines().into_iter().filter(|l| before.binary_search(l).is_err()).collect();
            if !leaked.is_empty() {
                self.invariant_failure = Some(format!("runahead filled regular lines {leaked:x?} under the sl defense"));
            }
        }
    }

    /// CLFLUSH effect. A flush of a line with a fill in flight restarts the
    /// fill; loads waiting on it wait for the new one.
    pub(super) fn execute_flush(&mut self, addr: u64) {
        let line = self.line_addr(addr);
        self.hier.flush_line(addr).expect("range checked");
        if let Some(d) = self.defense.as_mut() {
            if let Some(e) = d.delete(line) {
                self.log_sl_deletes(&[e], 0, 0);
            }
        }
        if self.live_fill(line).is_none() {
            return;
        }
        let r = self.hier.access(addr, AccessKind::Load).expect("range checked");
        let ready = self.cycle + r.latency;
        self.fills.insert(line, Fill { ready, level: r.hit_level });
        self.stats.fill_restarts += 1;
        if self.ra.active && line == self.ra.stalling_line {
            self.ra.restarts_in_episode += 1;
        }
        let now = self.cycle;
        let mut bumped = Vec::new();
        for e in self.rob.iter_mut() {
            if e.state == EntryState::Issued && !e.inv && e.fill_line == Some(line) && e.done_cycle > now {
                e.done_cycle = ready;
                bumped.push(e.seq);
            }
        }
        for s in bumped {
            self.completions.push(Reverse((ready, s)));
        }
    }

    pub(super) fn log_sl_deletes(&mut self, gone: &[SlEntry], seq: u64, pc: usize) {
        for e in gone {
            self.log(EventKind::SlDelete, seq, pc, sl_detail(e));
        }
    }

    /// Runahead load under the SL defense: never touches the regular
    /// hierarchy.
    pub(super) fn sl_runahead_load(&mut self, idx: usize, addr: u64, line: u64) -> LoadTiming {
        let now = self.cycle;
        let p = self.hier.peek(addr, AccessKind::Load).expect("range checked");
        if p.hit_level == Level::L1 {
            return LoadTiming { done: now + p.latency, level: Level::L1, inv: false, line: None };
        }
        let trig = self.at_trigger(p.hit_level);
        let sl_latency = self.cfg.defense.sl_latency;
        let d = self.defense.as_mut().expect("sl mode");
        if let Some(e) = d.entry(line) {
            let inv = e.ready_cycle > now && trig;
            let done = if inv { now + 1 } else { e.ready_cycle.max(now + sl_latency) };
            return LoadTiming { done, level: p.hit_level, inv, line: None };
        }
        let (seq, pc, tags) = (self.rob[idx].seq, self.rob[idx].pc, self.rob[idx].tags);
        if d.on_runahead_load(line, tags.b_tag, tags.is_tag, now, now + p.latency) == FillOutcome::Installed {
            let detail = Detail::Sl { line_addr: line, b_tag: tags.b_tag, is_tag: tags.is_tag };
            self.log(EventKind::SlFill, seq, pc, detail);
        }
        LoadTiming { done: if trig { now + 1 } else { now + p.latency }, level: p.hit_level, inv: trig, line: None }
    }

    /// Normal-mode load under the SL defense. `None` holds the load until
    /// the entry's branches are decided or it reaches the ROB head.
    pub(super) fn sl_normal_load(&mut self, idx: usize, addr: u64, line: u64) -> Option<LoadTiming> {
        let (seq, pc) = (self.rob[idx].seq, self.rob[idx].pc);
        let d = self.defense.as_mut().expect("sl mode");
        match d.lookup(line) {
            Lookup::Regular => {}
            Lookup::Promote(e) => {
                let bypass = d.promote(line);
                self.hier.install_line(Level::L1, addr).expect("range checked");
                self.log(EventKind::SlPromote, seq, pc, sl_detail(&e));
                if bypass {
                    self.log(EventKind::SlBypass, seq, pc, Detail::None);
                }
                let done = e.ready_cycle.max(self.cycle) + self.cfg.defense.sl_latency;
                return Some(LoadTiming { done, level: Level::L1, inv: false, line: None });
            }
            Lookup::Wait if idx != 0 => return None,
            Lookup::Wait | Lookup::Discard => {
                if let Some(e) = d.delete(line) {
                    self.log_sl_deletes(&[e], seq, pc);
                }
            }
        }
        Some(self.regular_load(idx, addr, line))
    }
}

fn sl_detail(e: &SlEntry) -> Detail {
    Detail::Sl { line_addr: e.line_addr, b_tag: e.b_tag, is_tag: e.is_tag }
}

fn placeholder() -> RobEntry {
    RobEntry {
        seq: 0,
        pc: 0,
        insn: crate::isa::Instruction::nop(),
        ops: [Operand::None; 2],
        state: EntryState::Waiting,
        queue: Queue::None,
        done_cycle: 0,
        result: 0,
        inv: false,
        fault: None,
        predicted_next: None,
        pht_index: 0,
        bp_before: None,
        actual_next: 0,
        addr: None,
        level: Level::L1,
        fill_line: None,
        tags: DispatchTags::default(),
        taint_after: None,
    }
}
