use std::fmt::Write as _;
use std::str::FromStr;

/// Named experiments, each a fixed command with fixed parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// PHT PoC, secret 86, no defense.
    Fig7,
    /// Memory-bound microbenchmark, runahead on vs off.
    Fig11Micro,
    /// The three transient-window measurements.
    Fig17,
    /// PHT PoC, secret 127, gadget padded past the ROB, runahead on and off.
    Fig22,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Fig7, Preset::Fig11Micro, Preset::Fig17, Preset::Fig22];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Fig7 => "fig7",
            Preset::Fig11Micro => "fig11-micro",
            Preset::Fig17 => "fig17",
            Preset::Fig22 => "fig22",
        }
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
            format!("unknown preset `{s}` (expected one of {})", names.join(", "))
        })
    }
}

pub const BEYOND_ROB_PAD: usize = 300;
pub const WINDOW_REPEAT_FLUSH: u32 = 3;
pub const BENCH_LOADS: usize = 64;
pub const BENCH_SPACING: usize = 300;

/// `loads` independent cold loads, each followed by `spacing` independent
/// ALU instructions. With `spacing` above the ROB size an out-of-order core
/// cannot overlap two misses; runahead can.
pub fn gen_mlp_bench(loads: usize, spacing: usize) -> String {
    let mut s = String::with_capacity(loads * spacing * 20);
    s.push_str(".data\n.org 0x100000\nbuf: .space 8\n.text\n.entry main\nmain:\n  li r1, buf\n");
    for i in 0..loads {
        let _ = writeln!(s, "  ld r{}, {}(r1)", 2 + i % 8, i * 64);
        for j in 0..spacing {
            let r = 10 + j % 4;
            let _ = writeln!(s, "  addi r{r}, r{r}, 1");
        }
    }
    s.push_str("  halt\n");
    s
}
