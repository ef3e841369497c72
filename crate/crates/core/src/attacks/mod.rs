//! Proof-of-concept generators for the runahead-nested Spectre attack and
//! its window probes, plus the analysis that turns a run into a verdict.

mod poc;
mod window;

pub use poc::{gen_poc, layout, read_latencies, run_poc, run_poc_checked, AttackOutcome, Layout};
pub use window::{
    flush_count, gen_window_probe, measure_window, probe_reached, SearchError, WindowCase, WindowMeasurement, FLUSH_SPACING,
};

use std::fmt::{self, Write as _};
use std::str::FromStr;

use thiserror::Error;

use crate::isa::AsmError;
use crate::uarch::SimError;

/// Default hit/miss threshold: strictly between L3-hit and memory latency.
pub const DEFAULT_THRESHOLD: u64 = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Pht,
    Btb,
    RsbOverwrite,
    RsbFlush,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Pht, Variant::Btb, Variant::RsbOverwrite, Variant::RsbFlush];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Pht => "pht",
            Variant::Btb => "btb",
            Variant::RsbOverwrite => "rsb_overwrite",
            Variant::RsbFlush => "rsb_flush",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = ParamError;

    fn from_str(s: &str) -> Result<Self, ParamError> {
        Variant::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| ParamError::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParamError {
    #[error("unknown variant `{0}` (expected pht, btb, rsb_overwrite or rsb_flush)")]
    UnknownVariant(String),
    #[error("probe stride {0} is not a nonzero multiple of the 64-byte line")]
    Stride(u64),
    #[error("probe array of {entries} x {stride} bytes does not fit below the result buffer")]
    ProbeTooLarge { entries: usize, stride: u64 },
    #[error("probe_entries must be in 1..=256, got {0}")]
    Entries(usize),
    #[error("train_iterations must be at least 1")]
    Training,
    #[error("{0} must be at least 1")]
    Zero(&'static str),
}

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("generated program does not assemble: {0}")]
    Asm(#[from] AsmError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PocParams {
    pub secret: u8,
    pub probe_stride: u64,
    pub probe_entries: usize,
    pub train_iterations: u32,
    /// NOPs placed ahead of the secret-dependent load.
    pub nop_pad: usize,
    pub variant: Variant,
    /// Times the stalling line is flushed; above 1 stretches the episode.
    pub repeat_flush: u32,
}

impl Default for PocParams {
    fn default() -> Self {
        PocParams {
            secret: 86,
            probe_stride: 512,
            probe_entries: 256,
            train_iterations: 8,
            nop_pad: 0,
            variant: Variant::Pht,
            repeat_flush: 1,
        }
    }
}

impl PocParams {
    pub fn validate(&self) -> Result<(), ParamError> {
        let l = poc::layout();
        if self.probe_stride == 0 || !self.probe_stride.is_multiple_of(64) {
            return Err(ParamError::Stride(self.probe_stride));
        }
        if !(1..=256).contains(&self.probe_entries) {
            return Err(ParamError::Entries(self.probe_entries));
        }
        if l.probe + self.probe_entries as u64 * self.probe_stride > l.results {
            return Err(ParamError::ProbeTooLarge { entries: self.probe_entries, stride: self.probe_stride });
        }
        if self.train_iterations == 0 {
            return Err(ParamError::Training);
        }
        if self.repeat_flush == 0 {
            return Err(ParamError::Zero("repeat_flush"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbeReport {
    pub latencies: Vec<u64>,
    pub threshold: u64,
    pub recovered: Option<usize>,
    /// Why nothing was recovered, when nothing was.
    pub diagnostic: Option<String>,
}

/// The unique index timed below `threshold`, if there is exactly one.
pub fn recover_secret(latencies: &[u64], threshold: u64) -> ProbeReport {
    let fast: Vec<usize> = latencies.iter().enumerate().filter(|(_, &l)| l < threshold).map(|(i, _)| i).collect();
    let (recovered, diagnostic) = match fast.as_slice() {
        [i] => (Some(*i), None),
        [] => (None, Some(format!("no index below threshold {threshold}"))),
        many => (None, Some(format!("{} indices below threshold {threshold}: {:?}", many.len(), &many[..many.len().min(8)]))),
    };
    ProbeReport { latencies: latencies.to_vec(), threshold, recovered, diagnostic }
}

impl ProbeReport {
    /// `index,latency_cycles` rows and the recovery trailer.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.latencies.len() * 8 + 32);
        for (i, l) in self.latencies.iter().enumerate() {
            let _ = writeln!(s, "{i},{l}");
        }
        let rec = self.recovered.map_or_else(|| "none".to_string(), |i| i.to_string());
        let _ = writeln!(s, "recovered,{rec},threshold,{}", self.threshold);
        s
    }

    /// Inverse of [`Self::to_csv`].
    pub fn parse_csv(text: &str) -> Option<ProbeReport> {
        let mut latencies = Vec::new();
        let mut trailer = None;
        for line in text.lines() {
            let f: Vec<&str> = line.split(',').collect();
            match f.as_slice() {
                ["recovered", rec, "threshold", t] => trailer = Some((*rec, t.parse().ok()?)),
                [i, l] if i.parse::<usize>().ok()? == latencies.len() => latencies.push(l.parse().ok()?),
                _ => return None,
            }
        }
        let (rec, threshold) = trailer?;
        let recovered = if rec == "none" { None } else { Some(rec.parse().ok()?) };
        let mut r = recover_secret(&latencies, threshold);
        (r.recovered == recovered).then(|| {
            r.recovered = recovered;
            r
        })
    }
}
