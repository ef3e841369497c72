//! Set-associative LRU cache hierarchy: split L1, shared L2/L3, flat-latency
//! memory. Latency is the serial sum of lookups down to the hit level.

use std::fmt;

use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    L1,
    L2,
    L3,
    Mem,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::L1 => "L1",
            Level::L2 => "L2",
            Level::L3 => "L3",
            Level::Mem => "MEM",
        })
    }
}

/// Instruction fetches live in their own address space so code lines never
/// alias data lines in the shared levels.
pub const IFETCH_SPACE: u64 = 1 << 56;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccessKind {
    Ifetch,
    Load,
    Store,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AccessResult {
    pub latency: u64,
    pub hit_level: Level,
    pub line_addr: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemError {
    #[error("address {addr:#x} outside {size:#x}-byte memory")]
    AddressOutOfRange { addr: u64, size: u64 },
    #[error("invalid cache geometry: {0}")]
    Geometry(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelConfig {
    pub size_bytes: u64,
    pub ways: usize,
    pub latency: u64,
}

impl LevelConfig {
    pub const fn new(size_bytes: u64, ways: usize, latency: u64) -> Self {
        LevelConfig { size_bytes, ways, latency }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheConfig {
    pub l1i: LevelConfig,
    pub l1d: LevelConfig,
    pub l2: LevelConfig,
    pub l3: LevelConfig,
    pub line_bytes: u64,
    pub mem_latency: u64,
    pub mem_size: u64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            l1i: LevelConfig::new(16 * 1024, 4, 2),
            l1d: LevelConfig::new(16 * 1024, 4, 2),
            l2: LevelConfig::new(128 * 1024, 8, 8),
            l3: LevelConfig::new(4 * 1024 * 1024, 8, 32),
            line_bytes: 64,
            mem_latency: 200,
            mem_size: crate::isa::DEFAULT_MEM_SIZE,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<(), MemError> {
        let bad = |m: String| Err(MemError::Geometry(m));
        if !self.line_bytes.is_power_of_two() || self.line_bytes < 8 {
            return bad(format!("line size {} must be a power of two >= 8", self.line_bytes));
        }
        for (name, l) in [("l1i", self.l1i), ("l1d", self.l1d), ("l2", self.l2), ("l3", self.l3)] {
            if l.ways == 0 || l.latency == 0 {
                return bad(format!("{name}: ways and latency must be positive"));
            }
            let set_bytes = l.ways as u64 * self.line_bytes;
            if l.size_bytes == 0 || l.size_bytes % set_bytes != 0 {
                return bad(format!("{name}: size {} not divisible by ways x line", l.size_bytes));
            }
        }
        let lat = [self.l1d.latency, self.l2.latency, self.l3.latency, self.mem_latency];
        if !lat.windows(2).all(|w| w[0] < w[1]) || self.l1i.latency >= self.l2.latency {
            return bad("latencies must increase L1 < L2 < L3 < memory".into());
        }
        if self.mem_size == 0 {
            return bad("memory size must be positive".into());
        }
        Ok(())
    }

    /// Full-walk latency down to and including `level`.
    pub fn walk_latency(&self, level: Level) -> u64 {
        let mut total = self.l1d.latency;
        if level >= Level::L2 {
            total += self.l2.latency;
        }
        if level >= Level::L3 {
            total += self.l3.latency;
        }
        if level == Level::Mem {
            total += self.mem_latency;
        }
        total
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Way {
    tag: u64,
    valid: bool,
    /// 0 is most recently used.
    lru_rank: u8,
}

/// One cache level indexed by line number (`addr / line_bytes`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheLevel {
    ways: usize,
    sets: Vec<Vec<Way>>,
}

impl CacheLevel {
    pub fn new(cfg: LevelConfig, line_bytes: u64) -> Self {
        let nsets = (cfg.size_bytes / (cfg.ways as u64 * line_bytes)) as usize;
        let set: Vec<Way> = (0..cfg.ways).map(|r| Way { lru_rank: r as u8, ..Way::default() }).collect();
        CacheLevel { ways: cfg.ways, sets: vec![set; nsets] }
    }

    pub fn num_sets(&self) -> usize {
        self.sets.len()
    }

    fn locate(&self, line: u64) -> (usize, u64) {
        let n = self.sets.len() as u64;
        ((line % n) as usize, line / n)
    }

    fn find(&self, line: u64) -> Option<(usize, usize)> {
        let (s, tag) = self.locate(line);
        self.sets[s].iter().position(|w| w.valid && w.tag == tag).map(|w| (s, w))
    }

    pub fn contains(&self, line: u64) -> bool {
        self.find(line).is_some()
    }

    fn touch(&mut self, set: usize, way: usize) {
        let r = self.sets[set][way].lru_rank;
        for w in self.sets[set].iter_mut() {
            if w.lru_rank < r {
                w.lru_rank += 1;
            }
        }
        self.sets[set][way].lru_rank = 0;
    }

    /// Hit: refresh LRU and return true.
    fn lookup(&mut self, line: u64) -> bool {
        match self.find(line) {
            Some((s, w)) => {
                self.touch(s, w);
                true
            }
            None => false,
        }
    }

    /// Installs as MRU; returns the evicted line, if any.
    pub fn insert(&mut self, line: u64) -> Option<u64> {
        if let Some((s, w)) = self.find(line) {
            self.touch(s, w);
            return None;
        }
        let (s, tag) = self.locate(line);
        let n = self.sets.len() as u64;
        let set = &self.sets[s];
        let way = set
            .iter()
            .position(|w| !w.valid)
            .unwrap_or_else(|| set.iter().position(|w| w.lru_rank as usize == self.ways - 1).expect("lru ranks form a permutation"));
        let old = set[way];
        self.sets[s][way] = Way { tag, valid: true, lru_rank: old.lru_rank };
        self.touch(s, way);
        old.valid.then_some(old.tag * n + s as u64)
    }

    pub fn invalidate(&mut self, line: u64) {
        if let Some((s, w)) = self.find(line) {
            self.sets[s][w].valid = false;
        }
    }

    /// Resident lines of one set, most recently used first.
    pub fn set_contents(&self, set: usize) -> Vec<u64> {
        let n = self.sets.len() as u64;
        let mut ws: Vec<&Way> = self.sets[set].iter().filter(|w| w.valid).collect();
        ws.sort_by_key(|w| w.lru_rank);
        ws.iter().map(|w| w.tag * n + set as u64).collect()
    }

    pub fn lines(&self) -> Vec<u64> {
        let mut v: Vec<u64> = (0..self.sets.len()).flat_map(|s| self.set_contents(s)).collect();
        v.sort_unstable();
        v
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        for (i, set) in self.sets.iter().enumerate() {
            let mut ranks: Vec<u8> = set.iter().map(|w| w.lru_rank).collect();
            ranks.sort_unstable();
            if ranks.iter().enumerate().any(|(k, &r)| r as usize != k) {
                return Err(format!("set {i}: lru ranks {ranks:?} not a permutation"));
            }
            let mut tags: Vec<u64> = set.iter().filter(|w| w.valid).map(|w| w.tag).collect();
            let before = tags.len();
            tags.sort_unstable();
            tags.dedup();
            if tags.len() != before {
                return Err(format!("set {i}: duplicate line"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub l1i_hits: u64,
    pub l1i_misses: u64,
    pub l1d_hits: u64,
    pub l1d_misses: u64,
    pub l2_hits: u64,
    pub l2_misses: u64,
    pub l3_hits: u64,
    pub l3_misses: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheHierarchy {
    config: CacheConfig,
    l1i: CacheLevel,
    l1d: CacheLevel,
    l2: CacheLevel,
    l3: CacheLevel,
    stats: CacheStats,
}

impl CacheHierarchy {
    pub fn new(config: CacheConfig) -> Result<Self, MemError> {
        config.validate()?;
        let lb = config.line_bytes;
        Ok(CacheHierarchy {
            l1i: CacheLevel::new(config.l1i, lb),
            l1d: CacheLevel::new(config.l1d, lb),
            l2: CacheLevel::new(config.l2, lb),
            l3: CacheLevel::new(config.l3, lb),
            config,
            stats: CacheStats::default(),
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn stats(&self) -> &CacheStats {
        &self.stats
    }

    pub fn line_of(&self, addr: u64) -> u64 {
        addr / self.config.line_bytes
    }

    pub fn line_addr(&self, addr: u64) -> u64 {
        addr & !(self.config.line_bytes - 1)
    }

    fn check(&self, addr: u64) -> Result<(), MemError> {
        if addr < self.config.mem_size {
            Ok(())
        } else {
            Err(MemError::AddressOutOfRange { addr, size: self.config.mem_size })
        }
    }

    /// Data addresses are range-checked; fetch addresses are moved into the
    /// instruction space.
    fn checked(&self, addr: u64, kind: AccessKind) -> Result<u64, MemError> {
        if kind == AccessKind::Ifetch {
            Ok(addr | IFETCH_SPACE)
        } else {
            self.check(addr).map(|_| addr)
        }
    }

    fn l1(&self, kind: AccessKind) -> &CacheLevel {
        if kind == AccessKind::Ifetch {
            &self.l1i
        } else {
            &self.l1d
        }
    }

    fn result(&self, kind: AccessKind, addr: u64, hit_level: Level) -> AccessResult {
        let l1_lat = if kind == AccessKind::Ifetch { self.config.l1i.latency } else { self.config.l1d.latency };
        let latency = self.config.walk_latency(hit_level) - self.config.l1d.latency + l1_lat;
        AccessResult { latency, hit_level, line_addr: self.line_addr(addr) }
    }

    fn hit_level(&self, kind: AccessKind, line: u64) -> Level {
        if self.l1(kind).contains(line) {
            Level::L1
        } else if self.l2.contains(line) {
            Level::L2
        } else if self.l3.contains(line) {
            Level::L3
        } else {
            Level::Mem
        }
    }

    /// Timed access with fill-on-miss into every level above the hit.
    pub fn access(&mut self, addr: u64, kind: AccessKind) -> Result<AccessResult, MemError> {
        let addr = self.checked(addr, kind)?;
        let line = self.line_of(addr);
        let level = self.hit_level(kind, line);
        let st = &mut self.stats;
        let (h1, m1) = match kind {
            AccessKind::Ifetch => (&mut st.l1i_hits, &mut st.l1i_misses),
            _ => (&mut st.l1d_hits, &mut st.l1d_misses),
        };
        if level == Level::L1 {
            *h1 += 1;
        } else {
            *m1 += 1;
            if level == Level::L2 {
                st.l2_hits += 1;
            } else {
                st.l2_misses += 1;
                if level == Level::L3 {
                    st.l3_hits += 1;
                } else {
                    st.l3_misses += 1;
                }
            }
        }

        let l1 = if kind == AccessKind::Ifetch { &mut self.l1i } else { &mut self.l1d };
        match level {
            Level::L1 => {
                l1.lookup(line);
            }
            Level::L2 => {
                self.l2.lookup(line);
                l1.insert(line);
            }
            Level::L3 => {
                self.l3.lookup(line);
                self.l2.insert(line);
                l1.insert(line);
            }
            Level::Mem => {
                self.l3.insert(line);
                self.l2.insert(line);
                l1.insert(line);
            }
        }
        Ok(self.result(kind, addr, level))
    }

    /// What `access(addr, Load)` would return, without touching any state.
    pub fn peek_latency(&self, addr: u64) -> Result<AccessResult, MemError> {
        self.peek(addr, AccessKind::Load)
    }

    pub fn peek(&self, addr: u64, kind: AccessKind) -> Result<AccessResult, MemError> {
        let addr = self.checked(addr, kind)?;
        Ok(self.result(kind, addr, self.hit_level(kind, self.line_of(addr))))
    }

    /// Invalidates the line at every level, instruction side included.
    pub fn flush_line(&mut self, addr: u64) -> Result<(), MemError> {
        self.check(addr)?;
        let line = self.line_of(addr);
        for l in [&mut self.l1i, &mut self.l1d, &mut self.l2, &mut self.l3] {
            l.invalidate(line);
        }
        Ok(())
    }

    /// Makes the line resident (MRU) at one data-side level, free of charge.
    pub fn install_line(&mut self, level: Level, addr: u64) -> Result<(), MemError> {
        self.check(addr)?;
        let line = self.line_of(addr);
        match level {
            Level::L1 => self.l1d.insert(line),
            Level::L2 => self.l2.insert(line),
            Level::L3 => self.l3.insert(line),
            Level::Mem => None,
        };
        Ok(())
    }

    pub fn install_ifetch_line(&mut self, addr: u64) -> Result<(), MemError> {
        let line = self.line_of(self.checked(addr, AccessKind::Ifetch)?);
        self.l1i.insert(line);
        Ok(())
    }

    /// True when the line is held by any data-side level.
    pub fn is_resident(&self, addr: u64) -> bool {
        let line = self.line_of(addr);
        self.l1d.contains(line) || self.l2.contains(line) || self.l3.contains(line)
    }

    pub fn level(&self, level: Level, ifetch: bool) -> Option<&CacheLevel> {
        match level {
            Level::L1 if ifetch => Some(&self.l1i),
            Level::L1 => Some(&self.l1d),
            Level::L2 => Some(&self.l2),
            Level::L3 => Some(&self.l3),
            Level::Mem => None,
        }
    }

    /// Sorted union of data-side resident line addresses.
    pub fn data_lines(&self) -> Vec<u64> {
        let mut v: Vec<u64> = [&self.l1d, &self.l2, &self.l3].iter().flat_map(|l| l.lines()).collect();
        v.sort_unstable();
        v.dedup();
        v.iter().map(|l| l * self.config.line_bytes).filter(|a| a & IFETCH_SPACE == 0).collect()
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        for l in [&self.l1i, &self.l1d, &self.l2, &self.l3] {
            l.check_invariants()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h() -> CacheHierarchy {
        CacheHierarchy::new(CacheConfig::default()).unwrap()
    }

    const A: u64 = 0x4000;

    #[test]
    fn cold_then_warm() {
        let mut c = h();
        let r = c.access(A, AccessKind::Load).unwrap();
        assert_eq!((r.hit_level, r.latency), (Level::Mem, 242));
        let r = c.access(A + 8, AccessKind::Load).unwrap();
        assert_eq!((r.hit_level, r.latency, r.line_addr), (Level::L1, 2, A));
    }

    #[test]
    fn install_levels() {
        let mut c = h();
        c.install_line(Level::L1, A).unwrap();
        assert_eq!(c.access(A, AccessKind::Load).unwrap().latency, 2);
        c.install_line(Level::L3, 0x9000).unwrap();
        assert_eq!(c.access(0x9000, AccessKind::Load).unwrap().latency, 42);
        c.install_line(Level::L2, 0xA000).unwrap();
        assert_eq!(c.access(0xA000, AccessKind::Load).unwrap().latency, 10);
    }

    #[test]
    fn double_install_single_copy() {
        let mut c = h();
        c.install_line(Level::L1, A).unwrap();
        c.install_line(Level::L1, A).unwrap();
        assert_eq!(c.level(Level::L1, false).unwrap().lines(), vec![A / 64]);
        c.check_invariants().unwrap();
    }

    #[test]
    fn flush_semantics() {
        let mut c = h();
        c.flush_line(A).unwrap();
        assert_eq!(c, h());
        c.access(A, AccessKind::Load).unwrap();
        c.access(A + 64, AccessKind::Load).unwrap();
        c.flush_line(A).unwrap();
        assert_eq!(c.access(A, AccessKind::Load).unwrap().hit_level, Level::Mem);
        assert_eq!(c.access(A + 64, AccessKind::Load).unwrap().latency, 2);
    }

    #[test]
    fn peek_is_pure() {
        let c = h();
        let before = c.clone();
        assert_eq!(c.peek_latency(A).unwrap().latency, 242);
        assert_eq!(c.peek_latency(A).unwrap(), c.peek_latency(A).unwrap());
        assert_eq!(c, before);
    }

    #[test]
    fn five_lines_in_one_l1_set() {
        let mut c = h();
        // 64 sets of 64-byte lines: a 4 KiB stride maps to the same L1 set.
        let stride = 64 * 64;
        for i in 0..5 {
            c.access(A + i * stride, AccessKind::Load).unwrap();
        }
        let r = c.access(A, AccessKind::Load).unwrap();
        assert_eq!((r.hit_level, r.latency), (Level::L2, 10));
    }

    #[test]
    fn ifetch_uses_l1i() {
        let mut c = h();
        c.install_ifetch_line(0).unwrap();
        assert_eq!(c.access(0, AccessKind::Ifetch).unwrap().latency, 2);
        assert_eq!(c.peek_latency(0).unwrap().hit_level, Level::Mem);
        // A code line missing L1I does not make the same-numbered data line resident.
        c.access(0x8000, AccessKind::Ifetch).unwrap();
        assert_eq!(c.peek_latency(0x8000).unwrap().hit_level, Level::Mem);
    }

    #[test]
    fn out_of_range() {
        let mut c = h();
        let size = c.config().mem_size;
        assert_eq!(c.access(size, AccessKind::Load), Err(MemError::AddressOutOfRange { addr: size, size }));
        assert!(c.flush_line(u64::MAX).is_err());
    }

    #[test]
    fn geometry_validation() {
        let mut cfg = CacheConfig::default();
        cfg.l2.size_bytes = 1000;
        assert!(CacheHierarchy::new(cfg).is_err());
        let mut cfg = CacheConfig::default();
        cfg.l3.latency = 4;
        assert!(cfg.validate().is_err());
    }
}
