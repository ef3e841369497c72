//! Two-level (gshare) direction predictor, direct-mapped BTB and return
//! stack buffer.
//!
//! Global history and the RSB are speculative and can be checkpointed; the
//! pattern table and BTB are trained at resolution and survive restores.

use crate::isa::BranchKind;

/// Hard upper bound on the RSB depth so checkpoints stay `Copy`.
pub const MAX_RSB_DEPTH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictorConfig {
    pub history_bits: u32,
    pub btb_entries: usize,
    pub rsb_depth: usize,
    /// Keep PHT/BTB training performed during runahead after exit.
    pub persist_runahead_updates: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig { history_bits: 8, btb_entries: 256, rsb_depth: 16, persist_runahead_updates: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub taken: bool,
    /// Predicted next pc when taken; `None` is a BTB/RSB miss.
    pub target: Option<usize>,
    /// PHT slot consulted, for training at resolution.
    pub pht_index: usize,
}

impl Prediction {
    /// The pc fetch continues from, or `None` on a target miss.
    pub fn next_pc(&self, fallthrough: usize) -> Option<usize> {
        if self.taken {
            self.target
        } else {
            Some(fallthrough)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct BtbEntry {
    tag: usize,
    target: usize,
    valid: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rsb {
    slots: [usize; MAX_RSB_DEPTH],
    depth: usize,
    /// Index of the next free slot (circular).
    top: usize,
    len: usize,
}

impl Rsb {
    pub fn new(depth: usize) -> Self {
        assert!((1..=MAX_RSB_DEPTH).contains(&depth), "rsb depth must be in 1..={MAX_RSB_DEPTH}");
        Rsb { slots: [0; MAX_RSB_DEPTH], depth, top: 0, len: 0 }
    }

    /// Pushes a return target; when full the oldest entry is overwritten.
    pub fn push(&mut self, target: usize) {
        self.slots[self.top] = target;
        self.top = (self.top + 1) % self.depth;
        self.len = (self.len + 1).min(self.depth);
    }

    pub fn pop(&mut self) -> Option<usize> {
        if self.len == 0 {
            return None;
        }
        self.top = (self.top + self.depth - 1) % self.depth;
        self.len -= 1;
        Some(self.slots[self.top])
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Live entries from oldest to newest.
    pub fn entries(&self) -> Vec<usize> {
        (0..self.len)
            .map(|i| self.slots[(self.top + self.depth * 2 - self.len + i) % self.depth])
            .collect()
    }
}

/// Speculative predictor state captured at a fetch point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictorCheckpoint {
    pub ghr: u64,
    pub rsb: Rsb,
}

/// Trained tables, saved only when runahead training must not persist.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableSnapshot {
    pht: Vec<u8>,
    btb: Vec<BtbEntry>,
}

#[derive(Clone, Debug)]
pub struct BranchPredictor {
    config: PredictorConfig,
    ghr: u64,
    pht: Vec<u8>,
    btb: Vec<BtbEntry>,
    rsb: Rsb,
}

impl BranchPredictor {
    pub fn new(config: PredictorConfig) -> Self {
        assert!((1..=20).contains(&config.history_bits), "history bits must be in 1..=20");
        assert!(config.btb_entries > 0, "btb needs at least one entry");
        BranchPredictor {
            config,
            ghr: 0,
            // Weakly not-taken.
            pht: vec![1; 1 << config.history_bits],
            btb: vec![BtbEntry::default(); config.btb_entries],
            rsb: Rsb::new(config.rsb_depth),
        }
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    fn history_mask(&self) -> u64 {
        (1u64 << self.config.history_bits) - 1
    }

    pub fn ghr(&self) -> u64 {
        self.ghr
    }

    pub fn rsb(&self) -> &Rsb {
        &self.rsb
    }

    pub fn pht_index(&self, pc: usize) -> usize {
        ((self.ghr ^ pc as u64) & self.history_mask()) as usize
    }

    pub fn counter(&self, index: usize) -> u8 {
        self.pht[index]
    }

    pub fn counters(&self) -> &[u8] {
        &self.pht
    }

    fn shift_history(&mut self, taken: bool) {
        self.ghr = ((self.ghr << 1) | taken as u64) & self.history_mask();
    }

    fn btb_slot(&self, pc: usize) -> usize {
        pc % self.btb.len()
    }

    pub fn btb_lookup(&self, pc: usize) -> Option<usize> {
        let e = &self.btb[self.btb_slot(pc)];
        (e.valid && e.tag == pc).then_some(e.target)
    }

    /// Front-end prediction. Speculatively shifts the history (conditional)
    /// and pops the RSB (`ret`); calls push via [`Self::push_return`].
    pub fn predict(&mut self, pc: usize, kind: BranchKind, encoded_target: usize) -> Prediction {
        let pht_index = self.pht_index(pc);
        match kind {
            BranchKind::Conditional => {
                let taken = self.pht[pht_index] >= 2;
                self.shift_history(taken);
                Prediction { taken, target: Some(encoded_target), pht_index }
            }
            BranchKind::Direct => Prediction { taken: true, target: Some(encoded_target), pht_index },
            BranchKind::Indirect => Prediction { taken: true, target: self.btb_lookup(pc), pht_index },
            BranchKind::Return => Prediction { taken: true, target: self.rsb.pop(), pht_index },
        }
    }

    /// Records a call's return address; used by direct calls at predict time.
    pub fn push_return(&mut self, ret: usize) {
        self.rsb.push(ret);
    }

    /// Trains the saturating counter at `index` toward the outcome.
    pub fn train_counter(&mut self, index: usize, taken: bool) {
        let c = &mut self.pht[index];
        *c = if taken { (*c + 1).min(3) } else { c.saturating_sub(1) };
    }

    /// Resolution-time training; never called for unresolvable branches.
    pub fn update(&mut self, pc: usize, kind: BranchKind, prediction: &Prediction, taken: bool, target: usize) {
        match kind {
            BranchKind::Conditional => self.train_counter(prediction.pht_index, taken),
            BranchKind::Indirect => {
                let slot = self.btb_slot(pc);
                self.btb[slot] = BtbEntry { tag: pc, target, valid: true };
            }
            BranchKind::Direct | BranchKind::Return => {}
        }
    }

    pub fn checkpoint(&self) -> PredictorCheckpoint {
        PredictorCheckpoint { ghr: self.ghr, rsb: self.rsb }
    }

    pub fn restore(&mut self, cp: &PredictorCheckpoint) {
        self.ghr = cp.ghr;
        self.rsb = cp.rsb;
    }

    /// Misprediction repair: return to the state before the branch was
    /// predicted, then replay its actual effect on history and RSB.
    pub fn recover(&mut self, before: &PredictorCheckpoint, kind: BranchKind, taken: bool) {
        self.restore(before);
        match kind {
            BranchKind::Conditional => self.shift_history(taken),
            BranchKind::Return => {
                self.rsb.pop();
            }
            BranchKind::Direct | BranchKind::Indirect => {}
        }
    }

    pub fn snapshot_tables(&self) -> TableSnapshot {
        TableSnapshot { pht: self.pht.clone(), btb: self.btb.clone() }
    }

    pub fn restore_tables(&mut self, snap: TableSnapshot) {
        self.pht = snap.pht;
        self.btb = snap.btb;
    }
}
