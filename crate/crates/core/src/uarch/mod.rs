//! Cycle-approximate out-of-order core.
//!
//! Per cycle: writeback (branch resolution) → commit or pseudo-retire →
//! runahead exit/entry → issue → dispatch → fetch. Values are computed at
//! issue; caches only decide timing, so the architectural result always
//! equals the in-order interpreter's.

pub mod events;
mod pipeline;
mod modes;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use thiserror::Error;

use crate::branch_pred::{BranchPredictor, PredictorCheckpoint};
use crate::config::{ConfigError, DefenseMode, EventLogLevel, SimConfig, Trigger};
use crate::isa::{ArchState, Instruction, Memory, ProgramImage, TrapError, NUM_REGS};
use crate::mem_hier::{CacheHierarchy, Level, MemError};
use crate::runahead::{Checkpoint, RunaheadStatus, RunaheadStoreBuffer};
use crate::sl_defense::{DefenseState, DispatchTags, SlStats, TaintState};
pub use events::{count_transient_window, format_events, BTag, Detail, Event, EventKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("deadlock: no commit or runahead progress for {idle} cycles (cycle {cycle}, rob head pc {head_pc:?})")]
    Deadlock { cycle: u64, idle: u64, head_pc: Option<usize> },
    #[error("max_cycles ({0}) exhausted before halt")]
    MaxCycles(u64),
    #[error("trap: {0}")]
    Trap(#[from] TrapError),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("memory: {0}")]
    Mem(#[from] MemError),
    #[error("invariant violated at cycle {cycle}: {msg}")]
    Invariant { cycle: u64, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Operand {
    None,
    Ready { value: u64, inv: bool },
    /// Produced by the in-flight instruction with this sequence number.
    Wait(u64),
}

impl Operand {
    fn ready(self) -> Option<(u64, bool)> {
        match self {
            Operand::None => Some((0, false)),
            Operand::Ready { value, inv } => Some((value, inv)),
            Operand::Wait(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryState {
    Waiting,
    Issued,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Queue {
    None,
    Iq,
    Lq,
    Sq,
}

#[derive(Clone, Debug)]
struct RobEntry {
    seq: u64,
    pc: usize,
    insn: Instruction,
    ops: [Operand; 2],
    state: EntryState,
    queue: Queue,
    done_cycle: u64,
    result: u64,
    inv: bool,
    /// Memory access outside the data memory; raised at commit.
    fault: Option<u64>,
    /// Fetch-time prediction; `None` when fetch stalled on this branch.
    predicted_next: Option<usize>,
    pht_index: usize,
    bp_before: Option<Box<PredictorCheckpoint>>,
    actual_next: usize,
    addr: Option<u64>,
    level: Level,
    fill_line: Option<u64>,
    tags: DispatchTags,
    taint_after: Option<Box<TaintState>>,
}

#[derive(Clone, Debug)]
struct Fetched {
    pc: usize,
    insn: Instruction,
    ready_at: u64,
    predicted_next: Option<usize>,
    pht_index: usize,
    bp_before: Option<Box<PredictorCheckpoint>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum FetchBlock {
    None,
    Halt,
    /// Waiting on the resolution of an indirect branch with no target.
    Unresolved,
    /// Fetch pc left the program.
    OutOfRange,
    /// Skip defense: an INV indirect branch stops fetch for the episode.
    Parked,
    /// Instruction-cache miss.
    Until(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Fill {
    ready: u64,
    level: Level,
}

/// Counters beyond the headline numbers of [`RunResult`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CoreStats {
    pub branches_resolved: u64,
    pub mispredicts: u64,
    pub squashes: u64,
    pub unresolvable_branches: u64,
    pub skipped_branches: u64,
    pub loads_issued: u64,
    pub inv_loads: u64,
    pub fill_restarts: u64,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub cycles: u64,
    pub committed: u64,
    pub runahead_episodes: u64,
    pub pseudo_retired: u64,
    pub state: ArchState,
    pub cache: CacheHierarchy,
    /// Hierarchy captured at the first commit of the snapshot pc.
    pub snapshot: Option<CacheHierarchy>,
    pub events: Vec<Event>,
    /// Largest transient window seen, whatever the log level.
    pub max_window: u64,
    pub longest_episode: u64,
    pub max_restarts: u64,
    pub stats: CoreStats,
    pub sl: Option<SlStats>,
}

impl RunResult {
    pub fn ipc(&self) -> f64 {
        if self.cycles == 0 {
            0.0
        } else {
            self.committed as f64 / self.cycles as f64
        }
    }

    /// `stats.txt` body.
    pub fn stats_text(&self) -> String {
        let mut s = format!(
            "cycles {}\ncommitted {}\nipc {:.6}\nrunahead_episodes {}\npseudo_retired {}\n",
            self.cycles,
            self.committed,
            self.ipc(),
            self.runahead_episodes,
            self.pseudo_retired
        );
        let st = &self.stats;
        s += &format!(
            "branches_resolved {}\nmispredicts {}\nsquashes {}\nunresolvable_branches {}\nskipped_branches {}\n",
            st.branches_resolved, st.mispredicts, st.squashes, st.unresolvable_branches, st.skipped_branches
        );
        s += &format!("max_transient_window {}\nlongest_episode {}\n", self.max_window, self.longest_episode);
        let c = self.cache.stats();
        s += &format!(
            "l1d_hits {}\nl1d_misses {}\nl2_hits {}\nl2_misses {}\nl3_hits {}\nl3_misses {}\n",
            c.l1d_hits, c.l1d_misses, c.l2_hits, c.l2_misses, c.l3_hits, c.l3_misses
        );
        if let Some(sl) = &self.sl {
            s += &format!(
                "sl_fills {}\nsl_refused {}\nsl_promotions {}\nsl_deletions {}\nsl_bypass {}\n",
                sl.fills, sl.refused, sl.promotions, sl.deletions, sl.bypass_events
            );
        }
        s
    }
}

pub struct Core {
    cfg: SimConfig,
    prog: ProgramImage,
    cycle: u64,

    regs: [u64; NUM_REGS],
    reg_inv: [bool; NUM_REGS],
    mem: Memory,
    halted: bool,
    halt_pc: usize,
    committed: u64,
    last_committed_seq: Option<u64>,

    fetch_pc: usize,
    fetch_block: FetchBlock,
    last_fetch_line: Option<u64>,
    fq: VecDeque<Fetched>,
    rob: VecDeque<RobEntry>,
    /// Sequence numbers of entries still needing issue, oldest first.
    pending: Vec<u64>,
    next_seq: u64,
    rename: [Option<u64>; NUM_REGS],
    waiters: HashMap<u64, Vec<(u64, u8)>>,
    completions: BinaryHeap<Reverse<(u64, u64)>>,
    iq_count: usize,
    lq_count: usize,
    sq_count: usize,
    /// Stores and flushes in the ROB, oldest first.
    stores: VecDeque<u64>,
    serialize: Option<u64>,
    /// Cycle each (unpipelined) divider frees up.
    div_free: Vec<u64>,

    bp: BranchPredictor,
    hier: CacheHierarchy,
    fills: HashMap<u64, Fill>,

    ra: RunaheadStatus,
    checkpoint: Option<Checkpoint>,
    ra_sb: RunaheadStoreBuffer,
    defense: Option<DefenseState>,

    events: Vec<Event>,
    last_progress: u64,
    max_window: u64,
    stats: CoreStats,
    snapshot_pc: Option<usize>,
    snapshot: Option<CacheHierarchy>,
    check: bool,
    squashed_ranges: Vec<(u64, u64)>,
    lines_at_entry: Option<Vec<u64>>,
    invariant_failure: Option<String>,
}

impl Core {
    pub fn new(program: &ProgramImage, cfg: SimConfig) -> Result<Core, SimError> {
        cfg.validate()?;
        let mut hier = CacheHierarchy::new(cfg.cache)?;
        if cfg.preload_icache {
            for pc in 0..program.instructions.len() {
                hier.install_ifetch_line(pc as u64 * crate::isa::INSN_BYTES)?;
            }
        }
        let defense = (cfg.defense.mode == DefenseMode::SlCache).then(|| DefenseState::new(cfg.defense.sl_entries));
        Ok(Core {
            prog: program.clone(),
            cycle: 0,
            regs: [0; NUM_REGS],
            reg_inv: [false; NUM_REGS],
            mem: program.initial_memory(),
            halted: false,
            halt_pc: 0,
            committed: 0,
            last_committed_seq: None,
            fetch_pc: program.entry,
            fetch_block: FetchBlock::None,
            last_fetch_line: None,
            fq: VecDeque::new(),
            rob: VecDeque::with_capacity(cfg.rob_entries),
            pending: Vec::new(),
            next_seq: 0,
            rename: [None; NUM_REGS],
            waiters: HashMap::new(),
            completions: BinaryHeap::new(),
            iq_count: 0,
            lq_count: 0,
            sq_count: 0,
            stores: VecDeque::new(),
            serialize: None,
            div_free: vec![0; cfg.fu.div_units],
            bp: BranchPredictor::new(cfg.bp),
            hier,
            fills: HashMap::new(),
            ra: RunaheadStatus::default(),
            checkpoint: None,
            ra_sb: RunaheadStoreBuffer::default(),
            defense,
            events: Vec::new(),
            last_progress: 0,
            max_window: 0,
            stats: CoreStats::default(),
            snapshot_pc: None,
            snapshot: None,
            check: false,
            squashed_ranges: Vec::new(),
            lines_at_entry: None,
            invariant_failure: None,
            cfg,
        })
    }

    /// Capture the cache hierarchy at the first commit of `pc`.
    pub fn set_snapshot_pc(&mut self, pc: usize) {
        self.snapshot_pc = Some(pc);
    }

    /// Check structural and defense invariants every cycle.
    pub fn set_check_invariants(&mut self, on: bool) {
        self.check = on;
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn halted(&self) -> bool {
        self.halted
    }

    pub fn runahead_active(&self) -> bool {
        self.ra.active
    }

    pub fn runahead_status(&self) -> &RunaheadStatus {
        &self.ra
    }

    pub fn rob_len(&self) -> usize {
        self.rob.len()
    }

    pub fn cache(&self) -> &CacheHierarchy {
        &self.hier
    }

    /// Test and setup hook: place a line before the run starts.
    pub fn cache_mut(&mut self) -> &mut CacheHierarchy {
        &mut self.hier
    }

    pub fn predictor(&self) -> &BranchPredictor {
        &self.bp
    }

    pub fn defense(&self) -> Option<&DefenseState> {
        self.defense.as_ref()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    fn log(&mut self, kind: EventKind, seq: u64, pc: usize, detail: Detail) {
        let level = self.cfg.event_log;
        if level == EventLogLevel::Off || (level == EventLogLevel::Summary && kind.is_per_instruction()) {
            return;
        }
        self.events.push(Event { cycle: self.cycle, kind, seq, pc, detail });
    }

    fn line_addr(&self, addr: u64) -> u64 {
        self.hier.line_addr(addr)
    }

    fn idx_of(&self, seq: u64) -> Option<usize> {
        self.rob.binary_search_by_key(&seq, |e| e.seq).ok()
    }

    /// Advances one cycle; returns the events it produced.
    pub fn step_cycle(&mut self) -> Result<&[Event], SimError> {
        let first = self.events.len();
        self.cycle += 1;
        self.writeback();
        self.retire()?;
        if !self.halted {
            self.runahead_transitions();
            self.issue();
            self.dispatch();
            self.fetch();
            self.check_stuck()?;
            if let Some(msg) = self.invariant_failure.take() {
                return Err(SimError::Invariant { cycle: self.cycle, msg });
            }
            if self.check {
                self.check_invariants().map_err(|msg| SimError::Invariant { cycle: self.cycle, msg })?;
            }
        }
        Ok(&self.events[first..])
    }

    fn check_stuck(&mut self) -> Result<(), SimError> {
        if !self.ra.active && self.rob.is_empty() && self.fq.is_empty() && self.fetch_block == FetchBlock::OutOfRange {
            return Err(TrapError::PcOutOfRange { pc: self.fetch_pc, len: self.prog.instructions.len() }.into());
        }
        let limit = 10 * self.cfg.cache.mem_latency;
        let idle = self.cycle - self.last_progress;
        if idle > limit {
            return Err(SimError::Deadlock { cycle: self.cycle, idle, head_pc: self.rob.front().map(|e| e.pc) });
        }
        Ok(())
    }

    /// Runs until HALT commits.
    pub fn run(mut self) -> Result<RunResult, SimError> {
        while !self.halted {
            if self.cycle >= self.cfg.max_cycles {
                return Err(SimError::MaxCycles(self.cfg.max_cycles));
            }
            self.step_cycle()?;
        }
        Ok(self.into_result())
    }

    fn into_result(self) -> RunResult {
        let state = ArchState {
            regs: self.regs,
            memory: self.mem,
            pc: self.halt_pc,
            halted: self.halted,
            retired_count: self.committed,
        };
        RunResult {
            cycles: self.cycle,
            committed: self.committed,
            runahead_episodes: self.ra.episodes,
            pseudo_retired: self.ra.pseudo_retired,
            state,
            cache: self.hier,
            snapshot: self.snapshot,
            events: self.events,
            max_window: self.max_window,
            longest_episode: self.ra.longest_episode,
            max_restarts: self.ra.max_restarts,
            stats: self.stats,
            sl: self.defense.map(|d| d.stats),
        }
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        let c = &self.cfg;
        if self.rob.len() > c.rob_entries {
            return Err(format!("rob holds {} > {}", self.rob.len(), c.rob_entries));
        }
        let count = |q: Queue| self.rob.iter().filter(|e| e.queue == q && !(q == Queue::Iq && e.state != EntryState::Waiting)).count();
        let (iq, lq, sq) = (count(Queue::Iq), count(Queue::Lq), count(Queue::Sq));
        if (iq, lq, sq) != (self.iq_count, self.lq_count, self.sq_count) {
            return Err(format!("queue counters {:?} disagree with rob {:?}", (self.iq_count, self.lq_count, self.sq_count), (iq, lq, sq)));
        }
        if iq > c.iq_entries || lq > c.lq_entries || sq > c.sq_entries {
            return Err(format!("queue overflow iq {iq} lq {lq} sq {sq}"));
        }
        if self.rob.iter().zip(self.rob.iter().skip(1)).any(|(a, b)| a.seq >= b.seq) {
            return Err("rob not in sequence order".into());
        }
        if let Some(d) = &self.defense {
            d.check_invariants()?;
        }
        Ok(())
    }

    fn in_range(&self, addr: u64) -> bool {
        addr.checked_add(8).is_some_and(|end| end <= self.cfg.cache.mem_size)
    }

    fn at_trigger(&self, level: Level) -> bool {
        match self.cfg.runahead.trigger {
            Trigger::MemMiss => level == Level::Mem,
            Trigger::L1dMiss => level != Level::L1,
        }
    }

    fn live_fill(&self, line: u64) -> Option<Fill> {
        self.fills.get(&line).copied().filter(|f| f.ready > self.cycle)
    }
}

/// Simulates `program` to completion.
pub fn run(program: &ProgramImage, cfg: SimConfig) -> Result<RunResult, SimError> {
    Core::new(program, cfg)?.run()
}
