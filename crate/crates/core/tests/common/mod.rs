#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specrun_core::config::{DefenseMode, SimConfig, Trigger};

/// Random terminating program text: straight-line ALU and memory work,
/// properly nested forward branches, bounded loops and a leaf call.
/// Data lives in a 512-byte region addressed through r30.
pub fn random_program(seed: u64) -> String {
    let mut g = Gen { rng: ChaCha8Rng::seed_from_u64(seed), out: String::new(), labels: 0 };
    g.out.push_str(".data\n.align 64\nregion:\n");
    for _ in 0..64 {
        let w: i64 = g.rng.gen_range(-1000..1000);
        g.out.push_str(&format!("  .word {w}\n"));
    }
    g.out.push_str(".text\n.entry main\nmain:\n  li r30, region\n");
    for r in 1..=8 {
        let v: i64 = g.rng.gen_range(-50..50);
        g.out.push_str(&format!("  li r{r}, {v}\n"));
    }
    let n = g.rng.gen_range(8..40);
    g.block(n, 0);
    g.out.push_str("  halt\nleaf:\n  addi r7, r7, 3\n  ld r8, 16(r30)\n  ret\n");
    g.out
}

struct Gen {
    rng: ChaCha8Rng,
    out: String,
    labels: usize,
}

impl Gen {
    fn label(&mut self) -> String {
        self.labels += 1;
        format!("l{}", self.labels)
    }

    fn reg(&mut self) -> u8 {
        self.rng.gen_range(1..=8)
    }

    fn block(&mut self, n: usize, depth: usize) {
        for _ in 0..n {
            let roll = self.rng.gen_range(0..100);
            match roll {
                0..=7 if depth < 3 => {
                    let end = self.label();
                    let op = ["beq", "bne", "blt", "bge"][self.rng.gen_range(0..4)];
                    let (a, b) = (self.reg(), self.reg());
                    self.out.push_str(&format!("  {op} r{a}, r{b}, {end}\n"));
                    let k = self.rng.gen_range(1..6);
                    self.block(k, depth + 1);
                    self.out.push_str(&format!("{end}:\n"));
                }
                8..=10 if depth < 2 => {
                    let top = self.label();
                    let ctr = 20 + depth;
                    let trips = self.rng.gen_range(1..6);
                    self.out.push_str(&format!("  li r{ctr}, {trips}\n{top}:\n"));
                    let k = self.rng.gen_range(1..6);
                    self.block(k, depth + 1);
                    self.out.push_str(&format!("  addi r{ctr}, r{ctr}, -1\n  blt r0, r{ctr}, {top}\n"));
                }
                11..=12 => self.out.push_str("  call leaf\n"),
                13..=27 => {
                    let (d, a) = (self.reg(), self.reg());
                    self.out.push_str(&format!("  andi r9, r{a}, 504\n  add r9, r9, r30\n  ld r{d}, 0(r9)\n"));
                }
                28..=33 => {
                    let off = self.rng.gen_range(0..64) * 8;
                    let d = self.reg();
                    self.out.push_str(&format!("  ld r{d}, {off}(r30)\n"));
                }
                34..=43 => {
                    let (s, a) = (self.reg(), self.reg());
                    if self.rng.gen_bool(0.5) {
                        let off = self.rng.gen_range(0..64) * 8;
                        self.out.push_str(&format!("  st r{s}, {off}(r30)\n"));
                    } else {
                        self.out.push_str(&format!("  andi r10, r{a}, 504\n  add r10, r10, r30\n  st r{s}, 0(r10)\n"));
                    }
                }
                44..=49 => {
                    let off = self.rng.gen_range(0..8) * 64;
                    self.out.push_str(&format!("  clflush {off}(r30)\n"));
                }
                50..=53 => {
                    let (d, a, b) = (self.reg(), self.reg(), self.reg());
                    let op = ["mul", "div"][self.rng.gen_range(0..2)];
                    self.out.push_str(&format!("  {op} r{d}, r{a}, r{b}\n"));
                }
                54..=61 => {
                    let (d, a) = (self.reg(), self.reg());
                    let op = ["addi", "andi", "slli", "srli"][self.rng.gen_range(0..4)];
                    let imm = self.rng.gen_range(-20..20i64);
                    let imm = if op.ends_with("li") { imm.rem_euclid(64) } else { imm };
                    self.out.push_str(&format!("  {op} r{d}, r{a}, {imm}\n"));
                }
                _ => {
                    let (d, a, b) = (self.reg(), self.reg(), self.reg());
                    let op = ["add", "sub", "and", "or", "xor", "sll", "srl"][self.rng.gen_range(0..7)];
                    self.out.push_str(&format!("  {op} r{d}, r{a}, r{b}\n"));
                }
            }
        }
    }
}

/// Configurations the equivalence property is checked under: every
/// runahead on/off and defense pairing, plus two structural variants.
pub fn oracle_configs() -> Vec<(String, SimConfig)> {
    let mut out = Vec::new();
    for ra in [true, false] {
        for mode in [DefenseMode::None, DefenseMode::SlCache, DefenseMode::SkipInvBranch] {
            let mut c = SimConfig::default();
            c.runahead.enabled = ra;
            c.defense.mode = mode;
            c.defense.sl_entries = 4;
            out.push((format!("{}_{}", if ra { "ra" } else { "nora" }, mode.as_str()), c));
        }
    }
    let mut l1 = SimConfig::default();
    l1.runahead.trigger = Trigger::L1dMiss;
    out.push(("l1d_trigger".into(), l1));
    let mut small =
        SimConfig { rob_entries: 32, iq_entries: 8, lq_entries: 4, sq_entries: 4, width: 2, preload_icache: false, ..Default::default() };
    small.bp.persist_runahead_updates = false;
    small.defense.mode = DefenseMode::SlCache;
    out.push(("small_core".into(), small));
    out
}

/// `y` is loaded in runahead outside any branch scope (its address waits on
/// a valid div chain so it cannot issue before entry), `z` inside the scope
/// of a branch with valid operands. Both are re-timed with calibrated
/// RDCYCLE pairs once normal execution has promoted them.
pub const BENIGN_PROMOTION: &str = "
.data
.org 0x1000
x: .word 1
.org 0x4000
y: .word 5
.org 0x5000
z: .word 6
.text
.entry main
main:
  li r1, x
  li r2, y
  li r3, z
  li r8, 1
  clflush 0(r2)
  clflush 0(r3)
  clflush 0(r1)
  ld r5, 0(r1)
  div r9, r8, r8
  div r9, r9, r8
  div r9, r9, r8
  sub r9, r9, r8
  add r2, r2, r9
  ld r6, 0(r2)
  beq r8, r0, skip
  ld r7, 0(r3)
skip:
  li r12, 100
spin:
  addi r12, r12, -1
  blt r0, r12, spin
  rdcycle r20
  rdcycle r21
  sub r22, r21, r20
  rdcycle r23
  ld r24, 0(r2)
  rdcycle r25
  sub r26, r25, r23
  sub r26, r26, r22
  andi r24, r24, 0
  add r3, r3, r24
  rdcycle r23
  ld r27, 0(r3)
  rdcycle r25
  sub r28, r25, r23
  sub r28, r28, r22
  halt
";
