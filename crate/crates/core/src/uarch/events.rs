use std::fmt;

use crate::mem_hier::Level;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EventKind {
    Fetch,
    Dispatch,
    Issue,
    Commit,
    Squash,
    RunaheadEnter,
    RunaheadExit,
    PseudoRetire,
    CacheFill,
    SlFill,
    SlPromote,
    SlDelete,
    SlBypass,
    SkipBranch,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Fetch => "fetch",
            EventKind::Dispatch => "dispatch",
            EventKind::Issue => "issue",
            EventKind::Commit => "commit",
            EventKind::Squash => "squash",
            EventKind::RunaheadEnter => "runahead_enter",
            EventKind::RunaheadExit => "runahead_exit",
            EventKind::PseudoRetire => "pseudo_retire",
            EventKind::CacheFill => "cache_fill",
            EventKind::SlFill => "sl_fill",
            EventKind::SlPromote => "sl_promote",
            EventKind::SlDelete => "sl_delete",
            EventKind::SlBypass => "sl_bypass",
            EventKind::SkipBranch => "skip_branch",
        }
    }

    /// Per-instruction pipeline events, logged only at the `full` level.
    pub fn is_per_instruction(self) -> bool {
        matches!(self, EventKind::Fetch | EventKind::Dispatch | EventKind::Issue | EventKind::Commit | EventKind::PseudoRetire)
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Branch ordinal and USL ordinal; `(0, 0)` is the zero tag.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BTag {
    pub n: u32,
    pub m: u32,
}

impl BTag {
    pub const ZERO: BTag = BTag { n: 0, m: 0 };

    pub fn is_zero(self) -> bool {
        self.n == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Detail {
    None,
    /// Transient instructions discarded by a squash or runahead exit.
    Window(u64),
    Fill { line_addr: u64, level: Level },
    Sl { line_addr: u64, b_tag: BTag, is_tag: u32 },
    Target(usize),
    Value(u64),
}

impl fmt::Display for Detail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Detail::None => Ok(()),
            Detail::Window(w) => write!(f, "window={w}"),
            Detail::Fill { line_addr, level } => write!(f, "line={line_addr:#x};level={level}"),
            Detail::Sl { line_addr, b_tag, is_tag } => {
                write!(f, "line={line_addr:#x};b_tag={}.{};is={is_tag}", b_tag.n, b_tag.m)
            }
            Detail::Target(t) => write!(f, "target={t}"),
            Detail::Value(v) => write!(f, "value={v}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub cycle: u64,
    pub kind: EventKind,
    pub seq: u64,
    pub pc: usize,
    pub detail: Detail,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},{}", self.cycle, self.kind, self.seq, self.pc, self.detail)
    }
}

/// `cycle,kind,seq,pc,detail` lines.
pub fn format_events(events: &[Event]) -> String {
    let mut s = String::with_capacity(events.len() * 24);
    for e in events {
        use fmt::Write as _;
        let _ = writeln!(s, "{e}");
    }
    s
}

/// Largest number of transient instructions discarded by any single squash
/// or runahead exit in the log.
pub fn count_transient_window(events: &[Event]) -> u64 {
    events
        .iter()
        .filter_map(|e| match (e.kind, e.detail) {
            (EventKind::Squash | EventKind::RunaheadExit, Detail::Window(w)) => Some(w),
            _ => None,
        })
        .max()
        .unwrap_or(0)
}
