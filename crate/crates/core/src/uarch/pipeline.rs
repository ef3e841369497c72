use std::cmp::Reverse;

use super::*;
use crate::branch_pred::Prediction;
use crate::isa::{alu_result, branch_taken, effective_addr, BranchKind, Opcode, UnitClass, INSN_BYTES, LINK_REG};
use crate::mem_hier::AccessKind;

struct Budget {
    slots: usize,
    add: usize,
    mul: usize,
    mem: usize,
}

pub(super) struct LoadTiming {
    pub done: u64,
    pub level: Level,
    pub inv: bool,
    /// Regular-hierarchy line whose fill this load waits on.
    pub line: Option<u64>,
}

enum Forward {
    Memory,
    Blocked,
    Value(u64, bool),
}

fn queue_of(insn: &Instruction) -> Queue {
    match insn.op {
        Opcode::Ld => Queue::Lq,
        Opcode::St | Opcode::Clflush => Queue::Sq,
        op if op.unit() == UnitClass::None => Queue::None,
        _ => Queue::Iq,
    }
}

impl Core {
    pub(super) fn fetch(&mut self) {
        match self.fetch_block {
            FetchBlock::None => {}
            FetchBlock::Until(c) if c <= self.cycle => self.fetch_block = FetchBlock::None,
            _ => return,
        }
        let cap = self.cfg.width * self.cfg.frontend_stages as usize;
        for _ in 0..self.cfg.width {
            if self.fq.len() >= cap {
                break;
            }
            let pc = self.fetch_pc;
            let Some(&insn) = self.prog.instructions.get(pc) else {
                self.fetch_block = FetchBlock::OutOfRange;
                break;
            };
            if !self.cfg.preload_icache {
                let addr = pc as u64 * INSN_BYTES;
                let line = addr / self.cfg.cache.line_bytes;
                if self.last_fetch_line != Some(line) {
                    self.last_fetch_line = Some(line);
                    let r = self.hier.access(addr, AccessKind::Ifetch).expect("fetch space is unbounded");
                    if r.hit_level != Level::L1 {
                        self.fetch_block = FetchBlock::Until(self.cycle + r.latency);
                        break;
                    }
                }
            }
            let kind = insn.op.branch_kind();
            let bp_before = (kind.is_some() || insn.is_load()).then(|| Box::new(self.bp.checkpoint()));
            let (next, pht_index) = match kind {
                None => (Some(pc + 1), 0),
                Some(k) => {
                    let p = self.bp.predict(pc, k, insn.target);
                    if insn.op == Opcode::Call || (insn.op == Opcode::Jalr && insn.rd == LINK_REG) {
                        self.bp.push_return(pc + 1);
                    }
                    (p.next_pc(pc + 1), p.pht_index)
                }
            };
            self.fq.push_back(Fetched {
                pc,
                insn,
                ready_at: self.cycle + self.cfg.frontend_stages,
                predicted_next: next,
                pht_index,
                bp_before,
            });
            self.log(EventKind::Fetch, 0, pc, Detail::None);
            if insn.op == Opcode::Halt {
                self.fetch_block = FetchBlock::Halt;
                break;
            }
            match next {
                None => {
                    self.fetch_block = FetchBlock::Unresolved;
                    break;
                }
                Some(n) => {
                    self.fetch_pc = n;
                    if n != pc + 1 {
                        break;
                    }
                }
            }
        }
    }

    fn read_operand(&mut self, r: u8, consumer: u64, slot: u8) -> Operand {
        let arch = Operand::Ready { value: self.regs[r as usize], inv: self.reg_inv[r as usize] };
        let Some(p) = self.rename[r as usize] else { return arch };
        match self.idx_of(p) {
            Some(i) if self.rob[i].state == EntryState::Done => Operand::Ready { value: self.rob[i].result, inv: self.rob[i].inv },
            Some(_) => {
                self.waiters.entry(p).or_default().push((consumer, slot));
                Operand::Wait(p)
            }
            None => arch,
        }
    }

    pub(super) fn dispatch(&mut self) {
        for _ in 0..self.cfg.width {
            if self.serialize.is_some() {
                break;
            }
            let Some(f) = self.fq.front() else { break };
            if f.ready_at > self.cycle || self.rob.len() >= self.cfg.rob_entries {
                break;
            }
            let queue = queue_of(&f.insn);
            let (count, cap) = match queue {
                Queue::Iq => (self.iq_count, self.cfg.iq_entries),
                Queue::Lq => (self.lq_count, self.cfg.lq_entries),
                Queue::Sq => (self.sq_count, self.cfg.sq_entries),
                Queue::None => (0, 1),
            };
            if count >= cap {
                break;
            }
            let f = self.fq.pop_front().expect("front checked");
            match queue {
                Queue::Iq => self.iq_count += 1,
                Queue::Lq => self.lq_count += 1,
                Queue::Sq => self.sq_count += 1,
                Queue::None => {}
            }
            let seq = self.next_seq;
            self.next_seq += 1;
            let mut ops = [Operand::None; 2];
            for (slot, r) in f.insn.sources().into_iter().enumerate() {
                if let Some(r) = r {
                    ops[slot] = self.read_operand(r, seq, slot as u8);
                }
            }
            let mut e = RobEntry {
                seq,
                pc: f.pc,
                insn: f.insn,
                ops,
                state: EntryState::Waiting,
                queue,
                done_cycle: 0,
                result: 0,
                inv: false,
                fault: None,
                predicted_next: f.predicted_next,
                pht_index: f.pht_index,
                bp_before: f.bp_before,
                actual_next: f.pc + 1,
                addr: None,
                level: Level::L1,
                fill_line: None,
                tags: DispatchTags::default(),
                taint_after: None,
            };
            if let Some(rd) = f.insn.dest() {
                self.rename[rd as usize] = Some(seq);
            }
            if self.ra.active {
                self.ra.dispatched_in_episode += 1;
                self.tag_entry(&mut e);
            }
            if queue == Queue::None {
                e.state = EntryState::Done;
                e.done_cycle = self.cycle;
                e.result = match e.insn.op {
                    Opcode::Li => e.insn.imm as u64,
                    Opcode::Call => e.pc as u64 + 1,
                    _ => 0,
                };
                if matches!(e.insn.op, Opcode::Jmp | Opcode::Call) {
                    e.actual_next = e.insn.target;
                }
            } else {
                self.pending.push(seq);
                match e.insn.op {
                    Opcode::Rdcycle => self.serialize = Some(seq),
                    Opcode::St | Opcode::Clflush => self.stores.push_back(seq),
                    _ => {}
                }
            }
            self.log(EventKind::Dispatch, seq, e.pc, Detail::None);
            self.rob.push_back(e);
        }
    }

    /// Oldest unexecuted conditional or indirect branch; under the skip
    /// defense no younger load may issue during runahead.
    fn load_gate(&self) -> Option<u64> {
        if !self.ra.active || self.cfg.defense.mode != DefenseMode::SkipInvBranch {
            return None;
        }
        let gates = |op: Opcode| op.is_cond_branch() || matches!(op, Opcode::Jalr | Opcode::Ret);
        self.rob.iter().find(|e| gates(e.insn.op) && e.state != EntryState::Done).map(|e| e.seq)
    }

    pub(super) fn issue(&mut self) {
        let fu = self.cfg.fu;
        let mut budget = Budget { slots: self.cfg.width, add: fu.add_units, mul: fu.mul_units, mem: fu.mem_ports };
        let mut gate = self.load_gate();
        let pending = std::mem::take(&mut self.pending);
        let mut keep = Vec::with_capacity(pending.len());
        for seq in pending {
            let was_active = self.ra.active;
            if budget.slots == 0 || !self.try_issue(seq, &mut budget, gate) {
                keep.push(seq);
            } else if !was_active && self.ra.active {
                gate = self.load_gate();
            }
        }
        self.pending = keep;
    }

    /// Returns false when the instruction must stay pending.
    fn try_issue(&mut self, seq: u64, budget: &mut Budget, gate: Option<u64>) -> bool {
        let Some(idx) = self.idx_of(seq) else { return true };
        let e = &self.rob[idx];
        let (Some((a, ainv)), Some((b, binv))) = (e.ops[0].ready(), e.ops[1].ready()) else { return false };
        let insn = e.insn;
        let pc = e.pc;
        let now = self.cycle;
        let unit = insn.op.unit();
        let has_unit = match unit {
            UnitClass::IntAdd => budget.add > 0,
            UnitClass::IntMul => budget.mul > 0,
            UnitClass::IntDiv => self.div_free.iter().any(|&c| c <= now),
            UnitClass::Mem => budget.mem > 0,
            UnitClass::None => true,
        };
        if !has_unit || (insn.op == Opcode::Rdcycle && idx != 0) {
            return false;
        }

        if insn.op == Opcode::Ld {
            if gate.is_some_and(|g| g < seq) || !self.issue_load(idx, a, ainv) {
                return false;
            }
        } else {
            let fu = self.cfg.fu;
            let mut inv = ainv || binv;
            let (lat, result) = match insn.op {
                Opcode::Rdcycle => (1, now),
                Opcode::Jalr => (1, pc as u64 + 1),
                Opcode::St | Opcode::Clflush => {
                    self.issue_mem_op(idx, a, ainv);
                    inv = if insn.op == Opcode::St { binv } else { ainv };
                    (1, b)
                }
                op if op.is_cond_branch() || op == Opcode::Ret => (1, 0),
                Opcode::Mul => (fu.int_mul, alu_result(&insn, a, b)),
                Opcode::Div => (fu.int_div, alu_result(&insn, a, b)),
                _ => (fu.int_add, alu_result(&insn, a, b)),
            };
            let e = &mut self.rob[idx];
            e.state = EntryState::Issued;
            e.done_cycle = now + lat;
            e.result = result;
            e.inv = inv;
            self.completions.push(Reverse((now + lat, seq)));
            if unit == UnitClass::IntDiv {
                let slot = self.div_free.iter_mut().find(|c| **c <= now).expect("checked above");
                *slot = now + lat;
            }
        }
        match unit {
            UnitClass::IntAdd => budget.add -= 1,
            UnitClass::IntMul => budget.mul -= 1,
            UnitClass::Mem => budget.mem -= 1,
            _ => {}
        }
        budget.slots -= 1;
        if self.rob.get(idx).is_some_and(|e| e.seq == seq && e.queue == Queue::Iq) {
            self.iq_count -= 1;
        }
        self.log(EventKind::Issue, seq, pc, Detail::None);
        true
    }

    /// Address generation for stores and flushes. An INV or (in runahead)
    /// out-of-range address leaves `addr` empty.
    fn issue_mem_op(&mut self, idx: usize, base: u64, base_inv: bool) {
        let addr = effective_addr(&self.rob[idx].insn, base);
        let ok = self.in_range(addr);
        let active = self.ra.active;
        let e = &mut self.rob[idx];
        if base_inv || (active && !ok) {
            return;
        }
        e.addr = Some(addr);
        if !ok {
            e.fault = Some(addr);
        }
    }

    fn forward_from_stores(&self, idx: usize, addr: u64) -> Forward {
        let seq = self.rob[idx].seq;
        let line = self.line_addr(addr);
        for &s in self.stores.iter().rev() {
            if s >= seq {
                continue;
            }
            let st = &self.rob[self.idx_of(s).expect("store list tracks the rob")];
            if st.state == EntryState::Waiting {
                return Forward::Blocked;
            }
            let Some(sa) = st.addr else { continue };
            if st.insn.op == Opcode::Clflush {
                if self.line_addr(sa) == line {
                    return Forward::Blocked;
                }
            } else if sa == addr {
                return Forward::Value(st.result, st.inv);
            } else if sa < addr.wrapping_add(8) && addr < sa.wrapping_add(8) {
                return Forward::Blocked;
            }
        }
        Forward::Memory
    }

    /// Returns false when the load cannot issue this cycle.
    fn issue_load(&mut self, idx: usize, base: u64, base_inv: bool) -> bool {
        let now = self.cycle;
        let was_active = self.ra.active;
        let insn = self.rob[idx].insn;
        let t = if base_inv {
            (LoadTiming { done: now + 1, level: Level::L1, inv: true, line: None }, 0)
        } else {
            let addr = effective_addr(&insn, base);
            match self.forward_from_stores(idx, addr) {
                Forward::Blocked => return false,
                Forward::Value(v, inv) => (LoadTiming { done: now + 1, level: Level::L1, inv, line: None }, v),
                Forward::Memory if !self.in_range(addr) => {
                    if !self.ra.active {
                        self.rob[idx].fault = Some(addr);
                    }
                    (LoadTiming { done: now + 1, level: Level::L1, inv: self.ra.active, line: None }, 0)
                }
                Forward::Memory => {
                    let value = if self.ra.active { self.ra_sb.read_u64(&self.mem, addr) } else { self.mem.read_u64(addr) };
                    let Some(t) = self.load_timing(idx, addr) else { return false };
                    self.rob[idx].addr = Some(addr);
                    (t, value)
                }
            }
        };
        let (t, value) = t;
        let seq = self.rob[idx].seq;
        let e = &mut self.rob[idx];
        e.state = EntryState::Issued;
        e.done_cycle = t.done;
        e.result = value;
        e.inv = t.inv;
        e.level = t.level;
        e.fill_line = t.line;
        self.completions.push(Reverse((t.done, seq)));
        self.stats.loads_issued += 1;
        if t.inv {
            self.stats.inv_loads += 1;
        }
        if !was_active && idx == 0 {
            self.try_enter_runahead();
        }
        true
    }

    /// Timing for an in-range load that found no older store to forward
    /// from. `None` holds the load back.
    fn load_timing(&mut self, idx: usize, addr: u64) -> Option<LoadTiming> {
        let line = self.line_addr(addr);
        let now = self.cycle;
        if let Some(f) = self.live_fill(line) {
            let inv = self.ra.active && self.at_trigger(f.level);
            let done = if inv { now + 1 } else { f.ready.max(now + self.cfg.cache.l1d.latency) };
            return Some(LoadTiming { done, level: f.level, inv, line: Some(line) });
        }
        if self.defense.is_some() {
            return if self.ra.active { Some(self.sl_runahead_load(idx, addr, line)) } else { self.sl_normal_load(idx, addr, line) };
        }
        Some(self.regular_load(idx, addr, line))
    }

    pub(super) fn regular_load(&mut self, idx: usize, addr: u64, line: u64) -> LoadTiming {
        let now = self.cycle;
        let r = self.hier.access(addr, AccessKind::Load).expect("range checked");
        let ready = now + r.latency;
        if r.hit_level != Level::L1 {
            self.fills.insert(line, Fill { ready, level: r.hit_level });
            let (seq, pc) = (self.rob[idx].seq, self.rob[idx].pc);
            self.log(EventKind::CacheFill, seq, pc, Detail::Fill { line_addr: line, level: r.hit_level });
        }
        let inv = self.ra.active && self.at_trigger(r.hit_level);
        LoadTiming { done: if inv { now + 1 } else { ready }, level: r.hit_level, inv, line: Some(line) }
    }

    pub(super) fn writeback(&mut self) {
        while let Some(&Reverse((c, seq))) = self.completions.peek() {
            if c > self.cycle {
                break;
            }
            self.completions.pop();
            let Some(idx) = self.idx_of(seq) else { continue };
            let e = &mut self.rob[idx];
            if e.state != EntryState::Issued || e.done_cycle != c {
                continue;
            }
            e.state = EntryState::Done;
            let (value, inv, op) = (e.result, e.inv, e.insn.op);
            if self.serialize == Some(seq) {
                self.serialize = None;
            }
            self.wake(seq, value, inv);
            if matches!(op.branch_kind(), Some(BranchKind::Conditional | BranchKind::Indirect | BranchKind::Return)) {
                self.resolve(seq);
            }
        }
        if self.fills.len() > 1024 {
            let now = self.cycle;
            self.fills.retain(|_, f| f.ready > now);
        }
    }

    pub(super) fn wake(&mut self, producer: u64, value: u64, inv: bool) {
        let Some(list) = self.waiters.remove(&producer) else { return };
        for (consumer, slot) in list {
            if let Some(i) = self.idx_of(consumer) {
                self.rob[i].ops[slot as usize] = Operand::Ready { value, inv };
            }
        }
    }

    fn resolve(&mut self, seq: u64) {
        let idx = self.idx_of(seq).expect("resolving entry is in the rob");
        let e = &self.rob[idx];
        let kind = e.insn.op.branch_kind().expect("control-flow instruction");
        let (Some((a, ainv)), Some((b, binv))) = (e.ops[0].ready(), e.ops[1].ready()) else { unreachable!("executed") };
        if ainv || binv {
            self.resolve_inv(idx, kind);
            return;
        }
        let (pc, insn) = (e.pc, e.insn);
        let taken = kind != BranchKind::Conditional || branch_taken(insn.op, a, b);
        let actual = match kind {
            BranchKind::Conditional if taken => insn.target,
            BranchKind::Conditional => pc + 1,
            _ => a as usize,
        };
        let correct = e.predicted_next == Some(actual);
        let pred = Prediction { taken, target: None, pht_index: e.pht_index };
        let ordinal = e.tags.ordinal;
        self.rob[idx].actual_next = actual;
        self.stats.branches_resolved += 1;
        self.bp.update(pc, kind, &pred, taken, actual);

        if let Some(d) = self.defense.as_mut() {
            let gone = if self.ra.active { d.on_branch_resolved(ordinal, correct) } else { d.on_normal_resolve(pc, actual) };
            self.log_sl_deletes(&gone, seq, pc);
        }
        if correct {
            return;
        }
        self.stats.mispredicts += 1;
        let before = self.rob[idx].bp_before.take().expect("branches keep a predictor checkpoint");
        self.bp.recover(&before, kind, taken);
        if insn.op == Opcode::Jalr && insn.rd == LINK_REG {
            self.bp.push_return(pc + 1);
        }
        let w = self.squash_from(idx + 1);
        self.note_squash(seq, pc, w);
        if self.ra.active {
            if let (Some(d), Some(t)) = (self.defense.as_mut(), self.rob[idx].taint_after.take()) {
                d.restore_after_squash(*t, ordinal, actual);
            }
        }
        self.redirect(actual);
    }

    /// A branch with an INV operand: never trains or squashes, except under
    /// the skip defense.
    fn resolve_inv(&mut self, idx: usize, kind: BranchKind) {
        self.stats.unresolvable_branches += 1;
        if self.cfg.defense.mode != DefenseMode::SkipInvBranch {
            return;
        }
        let e = &self.rob[idx];
        let (seq, pc, insn, predicted) = (e.seq, e.pc, e.insn, e.predicted_next);
        self.stats.skipped_branches += 1;
        if kind != BranchKind::Conditional {
            self.log(EventKind::SkipBranch, seq, pc, Detail::None);
            let w = self.squash_from(idx + 1);
            self.note_squash(seq, pc, w);
            self.fetch_block = FetchBlock::Parked;
            return;
        }
        let dest = self.prog.scope_of(pc).map_or(pc + 1, |s| s.scope_end);
        self.log(EventKind::SkipBranch, seq, pc, Detail::Target(dest));
        if predicted != Some(dest) {
            if let Some(before) = self.rob[idx].bp_before.take() {
                self.bp.recover(&before, kind, dest == insn.target && dest != pc + 1);
            }
            let w = self.squash_from(idx + 1);
            self.note_squash(seq, pc, w);
            self.redirect(dest);
        }
    }

    pub(super) fn note_squash(&mut self, seq: u64, pc: usize, window: u64) {
        self.stats.squashes += 1;
        self.max_window = self.max_window.max(window);
        self.log(EventKind::Squash, seq, pc, Detail::Window(window));
    }

    /// Discards ROB entries from `start` on plus the fetch queue; returns
    /// the number of ROB entries discarded.
    pub(super) fn squash_from(&mut self, start: usize) -> u64 {
        self.fq.clear();
        if start >= self.rob.len() {
            return 0;
        }
        let first = self.rob[start].seq;
        let removed: Vec<RobEntry> = self.rob.drain(start..).collect();
        for e in &removed {
            match e.queue {
                Queue::Iq if e.state == EntryState::Waiting => self.iq_count -= 1,
                Queue::Lq => self.lq_count -= 1,
                Queue::Sq => self.sq_count -= 1,
                _ => {}
            }
            self.waiters.remove(&e.seq);
        }
        self.pending.retain(|&s| s < first);
        self.stores.retain(|&s| s < first);
        if self.serialize.is_some_and(|s| s >= first) {
            self.serialize = None;
        }
        if self.check {
            self.squashed_ranges.push((first, self.next_seq));
        }
        self.rename = [None; NUM_REGS];
        for e in &self.rob {
            if let Some(d) = e.insn.dest() {
                self.rename[d as usize] = Some(e.seq);
            }
        }
        removed.len() as u64
    }

    pub(super) fn redirect(&mut self, pc: usize) {
        self.fq.clear();
        self.fetch_pc = pc;
        self.fetch_block = FetchBlock::None;
        self.last_fetch_line = None;
    }

    pub(super) fn retire(&mut self) -> Result<(), SimError> {
        for _ in 0..self.cfg.width {
            let Some(head) = self.rob.front() else { break };
            if head.state != EntryState::Done {
                break;
            }
            if self.ra.active {
                if head.insn.op == Opcode::Halt {
                    break;
                }
                self.pseudo_retire();
            } else {
                self.commit()?;
                if self.halted {
                    break;
                }
            }
        }
        Ok(())
    }

    fn pop_head(&mut self) -> RobEntry {
        let e = self.rob.pop_front().expect("non-empty rob");
        match e.queue {
            Queue::Lq => self.lq_count -= 1,
            Queue::Sq => self.sq_count -= 1,
            _ => {}
        }
        if self.stores.front() == Some(&e.seq) {
            self.stores.pop_front();
        }
        if let Some(d) = e.insn.dest() {
            if self.rename[d as usize] == Some(e.seq) {
                self.rename[d as usize] = None;
            }
        }
        e
    }

    fn commit(&mut self) -> Result<(), SimError> {
        let e = self.pop_head();
        if self.check {
            let bad_order = self.last_committed_seq.is_some_and(|s| s >= e.seq);
            let squashed = self.squashed_ranges.iter().any(|&(a, b)| (a..b).contains(&e.seq));
            if bad_order || squashed {
                let msg = format!("seq {} (pc {}) committed out of order or after squash", e.seq, e.pc);
                return Err(SimError::Invariant { cycle: self.cycle, msg });
            }
        }
        if let Some(addr) = e.fault {
            return Err(TrapError::MemoryOutOfRange { pc: e.pc, addr, size: self.cfg.cache.mem_size }.into());
        }
        match e.insn.op {
            Opcode::St => {
                let addr = e.addr.expect("committed store has an address");
                self.mem.write_u64(addr, e.result);
                let r = self.hier.access(addr, AccessKind::Store)?;
                if r.hit_level != Level::L1 {
                    let line = self.line_addr(addr);
                    self.fills.insert(line, Fill { ready: self.cycle + r.latency, level: r.hit_level });
                }
            }
            Opcode::Clflush => self.execute_flush(e.addr.expect("committed flush has an address")),
            Opcode::Halt => {
                self.halted = true;
                self.halt_pc = e.pc;
            }
            _ => {}
        }
        if let Some(d) = e.insn.dest() {
            self.regs[d as usize] = e.result;
        }
        self.committed += 1;
        self.last_committed_seq = Some(e.seq);
        self.last_progress = self.cycle;
        if self.snapshot.is_none() && self.snapshot_pc == Some(e.pc) {
            self.snapshot = Some(self.hier.clone());
        }
        self.log(EventKind::Commit, e.seq, e.pc, Detail::None);
        Ok(())
    }

    /// Runahead retirement: registers take the (possibly INV) result, stores
    /// go to the episode buffer, flushes take effect.
    pub(super) fn pseudo_retire(&mut self) {
        let e = self.pop_head();
        if let Some(d) = e.insn.dest() {
            self.regs[d as usize] = e.result;
            self.reg_inv[d as usize] = e.inv;
        }
        match (e.insn.op, e.addr, e.fault) {
            (Opcode::St, Some(addr), None) => self.ra_sb.write_u64(addr, e.result),
            (Opcode::Clflush, Some(addr), None) => self.execute_flush(addr),
            _ => {}
        }
        self.ra.pseudo_retired += 1;
        self.last_progress = self.cycle;
        self.log(EventKind::PseudoRetire, e.seq, e.pc, Detail::None);
    }
}
