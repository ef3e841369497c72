//! Simulator configuration and its `key = value` text format.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use thiserror::Error;

use crate::branch_pred::{PredictorConfig, MAX_RSB_DEPTH};
use crate::mem_hier::{CacheConfig, LevelConfig};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("config line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: bad value `{value}` for `{key}`")]
    BadValue { line: usize, key: String, value: String },
    #[error("config line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trigger {
    /// The head load missed every cache level.
    MemMiss,
    /// The head load missed L1D.
    L1dMiss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DefenseMode {
    None,
    SlCache,
    SkipInvBranch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventLogLevel {
    Off,
    /// Everything except per-instruction fetch/dispatch/issue/commit.
    Summary,
    Full,
}

macro_rules! text_enum {
    ($ty:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$var => $s),+ }
            }
        }
        impl FromStr for $ty {
            type Err = ();
            fn from_str(s: &str) -> Result<Self, ()> {
                match s { $($s => Ok($ty::$var),)+ _ => Err(()) }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

text_enum!(Trigger { MemMiss => "mem_miss", L1dMiss => "l1d_miss" });
text_enum!(DefenseMode { None => "none", SlCache => "sl_cache", SkipInvBranch => "skip_inv_branch" });
text_enum!(EventLogLevel { Off => "off", Summary => "summary", Full => "full" });

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FuConfig {
    pub int_add: u64,
    pub int_mul: u64,
    pub int_div: u64,
    pub add_units: usize,
    pub mul_units: usize,
    pub div_units: usize,
    pub mem_ports: usize,
}

impl Default for FuConfig {
    fn default() -> Self {
        FuConfig { int_add: 1, int_mul: 2, int_div: 5, add_units: 4, mul_units: 2, div_units: 1, mem_ports: 2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunaheadConfig {
    pub enabled: bool,
    pub trigger: Trigger,
    pub require_full_rob: bool,
}

impl Default for RunaheadConfig {
    fn default() -> Self {
        RunaheadConfig { enabled: true, trigger: Trigger::MemMiss, require_full_rob: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DefenseConfig {
    pub mode: DefenseMode,
    pub sl_entries: usize,
    pub sl_latency: u64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig { mode: DefenseMode::None, sl_entries: 64, sl_latency: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SimConfig {
    pub width: usize,
    pub frontend_stages: u64,
    pub rob_entries: usize,
    pub iq_entries: usize,
    pub lq_entries: usize,
    pub sq_entries: usize,
    pub max_cycles: u64,
    /// Start with the program resident in L1I.
    pub preload_icache: bool,
    pub fu: FuConfig,
    pub runahead: RunaheadConfig,
    pub defense: DefenseConfig,
    pub bp: PredictorConfig,
    pub cache: CacheConfig,
    pub event_log: EventLogLevel,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            width: 4,
            frontend_stages: 6,
            rob_entries: 256,
            iq_entries: 40,
            lq_entries: 40,
            sq_entries: 40,
            max_cycles: 20_000_000,
            preload_icache: true,
            fu: FuConfig::default(),
            runahead: RunaheadConfig::default(),
            defense: DefenseConfig::default(),
            bp: PredictorConfig::default(),
            cache: CacheConfig::default(),
            event_log: EventLogLevel::Summary,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Some(true),
        "false" | "off" | "0" | "no" => Some(false),
        _ => None,
    }
}

fn parse_num<T: FromStr>(v: &str) -> Option<T> {
    let v = v.replace('_', "");
    if let Some(hex) = v.strip_prefix("0x") {
        return u64::from_str_radix(hex, 16).ok().and_then(|n| n.to_string().parse().ok());
    }
    v.parse().ok()
}

fn parse_size(v: &str) -> Option<u64> {
    let v = v.trim();
    let (num, mul) = if let Some(n) = v.strip_suffix(['K', 'k']) {
        (n, 1024)
    } else if let Some(n) = v.strip_suffix(['M', 'm']) {
        (n, 1024 * 1024)
    } else {
        (v, 1)
    };
    parse_num::<u64>(num).map(|n| n * mul)
}

fn parse_level(v: &str) -> Option<LevelConfig> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    let [size, ways, lat] = parts[..] else { return None };
    Some(LevelConfig::new(parse_size(size)?, parse_num(ways)?, parse_num(lat)?))
}

impl SimConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.set_at(0, key, value)
    }

    fn set_at(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue { line, key: key.to_string(), value: value.to_string() };
        macro_rules! num {
            () => {
                parse_num(value).ok_or_else(bad)?
            };
        }
        let flag = || parse_bool(value).ok_or_else(bad);
        match key {
            "core.width" => self.width = num!(),
            "core.frontend_stages" => self.frontend_stages = num!(),
            "core.rob_entries" => self.rob_entries = num!(),
            "core.iq_entries" => self.iq_entries = num!(),
            "core.lq_entries" => self.lq_entries = num!(),
            "core.sq_entries" => self.sq_entries = num!(),
            "core.max_cycles" => self.max_cycles = num!(),
            "core.preload_icache" => self.preload_icache = flag()?,
            "fu.int_add" => self.fu.int_add = num!(),
            "fu.int_mul" => self.fu.int_mul = num!(),
            "fu.int_div" => self.fu.int_div = num!(),
            "runahead.enabled" => self.runahead.enabled = flag()?,
            "runahead.trigger" => self.runahead.trigger = value.parse().map_err(|_| bad())?,
            "runahead.require_full_rob" => self.runahead.require_full_rob = flag()?,
            "defense.mode" => self.defense.mode = value.parse().map_err(|_| bad())?,
            "defense.sl_entries" => self.defense.sl_entries = num!(),
            "defense.sl_latency" => self.defense.sl_latency = num!(),
            "bp.history_bits" => self.bp.history_bits = num!(),
            "bp.btb_entries" => self.bp.btb_entries = num!(),
            "bp.rsb_depth" => self.bp.rsb_depth = num!(),
            "bp.persist_runahead_updates" => self.bp.persist_runahead_updates = flag()?,
            "cache.l1i" => self.cache.l1i = parse_level(value).ok_or_else(bad)?,
            "cache.l1d" => self.cache.l1d = parse_level(value).ok_or_else(bad)?,
            "cache.l2" => self.cache.l2 = parse_level(value).ok_or_else(bad)?,
            "cache.l3" => self.cache.l3 = parse_level(value).ok_or_else(bad)?,
            "cache.line_bytes" => self.cache.line_bytes = num!(),
            "mem.latency" => self.cache.mem_latency = num!(),
            "mem.size" => self.cache.mem_size = parse_size(value).ok_or_else(bad)?,
            "sim.event_log" => self.event_log = value.parse().map_err(|_| bad())?,
            _ => return Err(ConfigError::UnknownKey { line, key: key.to_string() }),
        }
        Ok(())
    }

    /// Parses a config file on top of the defaults.
    pub fn parse(text: &str) -> Result<SimConfig, ConfigError> {
        let mut cfg = SimConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or(ConfigError::Syntax { line })?;
            self.set_at(line, k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        let counts = [self.width, self.rob_entries, self.iq_entries, self.lq_entries, self.sq_entries];
        if counts.contains(&0) || self.frontend_stages == 0 || self.max_cycles == 0 {
            return bad("all counts must be positive");
        }
        if self.width > self.rob_entries {
            return bad("width must not exceed rob_entries");
        }
        if [self.fu.int_add, self.fu.int_mul, self.fu.int_div].contains(&0) {
            return bad("functional-unit latencies must be positive");
        }
        if !(1..=20).contains(&self.bp.history_bits) || self.bp.btb_entries == 0 {
            return bad("bp.history_bits must be 1..=20 and bp.btb_entries positive");
        }
        if !(1..=MAX_RSB_DEPTH).contains(&self.bp.rsb_depth) {
            return bad("bp.rsb_depth out of range");
        }
        if self.defense.sl_entries == 0 {
            return bad("defense.sl_entries must be positive");
        }
        self.cache.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Canonical text form; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let lvl = |l: LevelConfig| format!("{},{},{}", l.size_bytes, l.ways, l.latency);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("core.width", self.width.to_string());
        kv("core.frontend_stages", self.frontend_stages.to_string());
        kv("core.rob_entries", self.rob_entries.to_string());
        kv("core.iq_entries", self.iq_entries.to_string());
        kv("core.lq_entries", self.lq_entries.to_string());
        kv("core.sq_entries", self.sq_entries.to_string());
        kv("core.max_cycles", self.max_cycles.to_string());
        kv("core.preload_icache", self.preload_icache.to_string());
        kv("fu.int_add", self.fu.int_add.to_string());
        kv("fu.int_mul", self.fu.int_mul.to_string());
        kv("fu.int_div", self.fu.int_div.to_string());
        kv("runahead.enabled", self.runahead.enabled.to_string());
        kv("runahead.trigger", self.runahead.trigger.to_string());
        kv("runahead.require_full_rob", self.runahead.require_full_rob.to_string());
        kv("defense.mode", self.defense.mode.to_string());
        kv("defense.sl_entries", self.defense.sl_entries.to_string());
        kv("defense.sl_latency", self.defense.sl_latency.to_string());
        kv("bp.history_bits", self.bp.history_bits.to_string());
        kv("bp.btb_entries", self.bp.btb_entries.to_string());
        kv("bp.rsb_depth", self.bp.rsb_depth.to_string());
        kv("bp.persist_runahead_updates", self.bp.persist_runahead_updates.to_string());
        kv("cache.l1i", lvl(self.cache.l1i));
        kv("cache.l1d", lvl(self.cache.l1d));
        kv("cache.l2", lvl(self.cache.l2));
        kv("cache.l3", lvl(self.cache.l3));
        kv("cache.line_bytes", self.cache.line_bytes.to_string());
        kv("mem.latency", self.cache.mem_latency.to_string());
        kv("mem.size", self.cache.mem_size.to_string());
        kv("sim.event_log", self.event_log.to_string());
        s
    }
}
