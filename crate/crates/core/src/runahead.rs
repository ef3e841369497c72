//! Runahead-mode state: the checkpoint taken at entry, the episode-local
//! store buffer, and the mode status. The core drives the transitions.

use std::collections::HashMap;

use crate::branch_pred::{PredictorCheckpoint, TableSnapshot};
use crate::isa::{Memory, NUM_REGS};

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub regs: [u64; NUM_REGS],
    pub predictor: PredictorCheckpoint,
    /// Present only when runahead training must not persist.
    pub tables: Option<TableSnapshot>,
    pub stalling_pc: usize,
    pub entry_cycle: u64,
}

/// Byte-granular stores made during one episode. Never reaches memory.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunaheadStoreBuffer {
    bytes: HashMap<u64, u8>,
}

impl RunaheadStoreBuffer {
    pub fn write_u64(&mut self, addr: u64, value: u64) {
        for (i, b) in value.to_le_bytes().into_iter().enumerate() {
            self.bytes.insert(addr.wrapping_add(i as u64), b);
        }
    }

    /// Little-endian read, buffered bytes shadowing `mem`.
    pub fn read_u64(&self, mem: &Memory, addr: u64) -> u64 {
        if self.bytes.is_empty() {
            return mem.read_u64(addr);
        }
        let mut out = [0u8; 8];
        for (i, b) in out.iter_mut().enumerate() {
            let a = addr.wrapping_add(i as u64);
            *b = self.bytes.get(&a).copied().unwrap_or_else(|| mem.read_u8(a));
        }
        u64::from_le_bytes(out)
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn clear(&mut self) {
        self.bytes.clear();
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunaheadStatus {
    pub active: bool,
    pub stalling_seq: u64,
    pub stalling_line: u64,
    pub episodes: u64,
    pub pseudo_retired: u64,
    /// Instructions dispatched during the current episode.
    pub dispatched_in_episode: u64,
    /// Times the stalling fill was restarted by a flush of its line.
    pub restarts_in_episode: u64,
    pub max_restarts: u64,
    pub longest_episode: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffer_shadows_memory_bytewise() {
        let mut mem = Memory::new();
        mem.write_u64(0x100, 0x1122_3344_5566_7788);
        let mut sb = RunaheadStoreBuffer::default();
        assert_eq!(sb.read_u64(&mem, 0x100), 0x1122_3344_5566_7788);
        sb.write_u64(0x104, 0xAAAA_AAAA_BBBB_BBBB);
        assert_eq!(sb.read_u64(&mem, 0x100), 0xBBBB_BBBB_5566_7788);
        assert_eq!(mem.read_u64(0x100), 0x1122_3344_5566_7788);
        sb.clear();
        assert!(sb.is_empty());
    }
}
