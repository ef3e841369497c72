use std::fmt::{self, Write as _};

use thiserror::Error;

use super::AttackError;
use crate::config::SimConfig;
use crate::isa::assemble;
use crate::mem_hier::Level;
use crate::uarch::run;

const X_ADDR: u64 = 0x1000;
const SENTINEL_ADDR: u64 = 0x3000;
/// NOPs between successive re-flushes of the stalling line.
pub const FLUSH_SPACING: usize = 512;

/// Which transient window the probe measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WindowCase {
    /// Branch speculation alone, bounded by the ROB.
    Rob,
    /// A single runahead episode.
    Runahead,
    /// Runahead whose stalling fill is restarted by in-window flushes.
    Extended,
}

impl WindowCase {
    pub const ALL: [WindowCase; 3] = [WindowCase::Rob, WindowCase::Runahead, WindowCase::Extended];

    pub fn number(self) -> u8 {
        match self {
            WindowCase::Rob => 1,
            WindowCase::Runahead => 2,
            WindowCase::Extended => 3,
        }
    }

    pub fn from_number(n: u8) -> Option<WindowCase> {
        WindowCase::ALL.into_iter().find(|c| c.number() == n)
    }

    /// The configuration the case runs under: runahead off for case 1 only.
    pub fn config(self, mut cfg: SimConfig) -> SimConfig {
        cfg.runahead.enabled = self != WindowCase::Rob;
        cfg
    }
}

impl fmt::Display for WindowCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Flushes placed among `nop_count` NOPs: one after every full
/// `FLUSH_SPACING`, at most `repeat_flush - 1`, none for cases 1 and 2.
pub fn flush_count(case: WindowCase, nop_count: usize, repeat_flush: u32) -> usize {
    match case {
        WindowCase::Extended => (nop_count / FLUSH_SPACING).min(repeat_flush.saturating_sub(1) as usize),
        _ => 0,
    }
}

/// The branch on the missing `x` is architecturally taken, so the marker
/// load of `sentinel` can only ever execute transiently.
pub fn gen_window_probe(case: WindowCase, nop_count: usize, repeat_flush: u32) -> String {
    let mut s = String::with_capacity(nop_count * 6 + 256);
    let _ = writeln!(s, ".data\n.org {X_ADDR:#x}\nx: .word 1\n.org {SENTINEL_ADDR:#x}\nsentinel: .word 0");
    let _ = writeln!(s, ".text\n.entry main\nmain:\n  li r1, x\n  li r2, sentinel");
    s.push_str("  clflush 0(r2)\n  clflush 0(r1)\n  ld r3, 0(r1)\n  bne r3, r0, end\n");
    let mut flushes = flush_count(case, nop_count, repeat_flush);
    for i in 1..=nop_count {
        s.push_str("  nop\n");
        if flushes > 0 && i % FLUSH_SPACING == 0 {
            s.push_str("  clflush 0(r1)\n");
            flushes -= 1;
        }
    }
    s.push_str("  ld r4, 0(r2)\nend:\n  halt\n");
    s
}

/// Whether the marker load reached the hierarchy for this NOP count.
pub fn probe_reached(case: WindowCase, cfg: SimConfig, nop_count: usize, repeat_flush: u32) -> Result<bool, AttackError> {
    let program = assemble(&gen_window_probe(case, nop_count, repeat_flush))?;
    let r = run(&program, case.config(cfg))?;
    let hit = r.cache.peek_latency(SENTINEL_ADDR).map_err(crate::uarch::SimError::from)?;
    Ok(hit.hit_level != Level::Mem)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowMeasurement {
    pub case: WindowCase,
    /// Largest NOP count whose marker still executed.
    pub nop_count: usize,
    /// Instructions from the branch through the marker, inclusive.
    pub n: usize,
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("search bounds [{lo}, {hi}] do not bracket the window (reached at lo: {lo_reached}, at hi: {hi_reached})")]
    Bounds { lo: usize, hi: usize, lo_reached: bool, hi_reached: bool },
    #[error(transparent)]
    Attack(#[from] AttackError),
}

/// Binary search for the largest NOP count in `[lo, hi)` whose marker is
/// reached; `lo` must be reached and `hi` must not.
pub fn measure_window(
    case: WindowCase,
    cfg: SimConfig,
    lo: usize,
    hi: usize,
    repeat_flush: u32,
) -> Result<WindowMeasurement, SearchError> {
    let reached = |k| probe_reached(case, cfg, k, repeat_flush);
    let (lo_reached, hi_reached) = (lo < hi && reached(lo)?, reached(hi)?);
    if !lo_reached || hi_reached {
        return Err(SearchError::Bounds { lo, hi, lo_reached, hi_reached });
    }
    let (mut good, mut bad) = (lo, hi);
    while bad - good > 1 {
        let mid = good + (bad - good) / 2;
        if reached(mid)? {
            good = mid;
        } else {
            bad = mid;
        }
    }
    let n = good + 2 + flush_count(case, good, repeat_flush);
    Ok(WindowMeasurement { case, nop_count: good, n })
}
