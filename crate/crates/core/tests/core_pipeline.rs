use specrun_core::config::{DefenseMode, EventLogLevel, SimConfig};
use specrun_core::isa::{assemble, interpret_with, ProgramImage};
use specrun_core::mem_hier::Level;
use specrun_core::uarch::{count_transient_window, run, Core, EventKind, RunResult, SimError};

fn cfg() -> SimConfig {
    SimConfig { event_log: EventLogLevel::Full, ..SimConfig::default() }
}

fn go(src: &str, cfg: SimConfig) -> RunResult {
    let p = assemble(src).unwrap();
    let mut core = Core::new(&p, cfg).unwrap();
    core.set_check_invariants(true);
    core.run().unwrap()
}

fn same_as_interp(p: &ProgramImage, r: &RunResult, cfg: &SimConfig) {
    let want = interpret_with(p, 1_000_000, cfg.cache.mem_size).unwrap();
    assert_eq!(r.state.regs, want.regs);
    assert_eq!(r.state.memory, want.memory);
    assert_eq!(r.state.pc, want.pc);
    assert_eq!(r.committed, want.retired_count);
}

#[test]
fn straight_line_alu() {
    let r = go("li r1, 2\nli r2, 3\nadd r3, r1, r2\nmul r4, r3, r3\ndiv r5, r4, r2\nhalt", cfg());
    assert_eq!(r.state.regs[3], 5);
    assert_eq!(r.state.regs[4], 25);
    assert_eq!(r.state.regs[5], 8);
    assert_eq!(r.committed, 6);
    assert!(r.state.halted);
}

#[test]
fn nothing_dispatches_before_frontend_depth() {
    let r = go("nop\nhalt", cfg());
    let first_dispatch = r.events.iter().find(|e| e.kind == EventKind::Dispatch).unwrap();
    let first_fetch = r.events.iter().find(|e| e.kind == EventKind::Fetch).unwrap();
    assert_eq!(first_dispatch.cycle - first_fetch.cycle, 6);
}

#[test]
fn counted_loop_matches_interpreter() {
    let src = "li r1, 0\nli r2, 100\nloop: addi r1, r1, 1\nblt r1, r2, loop\nhalt";
    let r = go(src, cfg());
    assert_eq!(r.state.regs[1], 100);
    same_as_interp(&assemble(src).unwrap(), &r, &cfg());
    assert!(r.stats.mispredicts >= 1);
}

#[test]
fn stores_forward_and_commit() {
    let src = ".data\nx: .word 5\n.text\nli r1, x\nli r2, 9\nst r2, 0(r1)\nld r3, 0(r1)\nadd r4, r3, r3\nhalt";
    let r = go(src, cfg());
    assert_eq!(r.state.regs[4], 18);
    same_as_interp(&assemble(src).unwrap(), &r, &cfg());
}

#[test]
fn memory_miss_enters_runahead_and_exits() {
    let src = ".data\nx: .word 7\n.text\nli r1, x\nclflush 0(r1)\nld r2, 0(r1)\naddi r3, r2, 1\nhalt";
    let r = go(src, cfg());
    assert_eq!(r.state.regs[3], 8);
    assert!(r.runahead_episodes >= 1, "{}", r.stats_text());
    assert!(r.events.iter().any(|e| e.kind == EventKind::RunaheadExit));
}

#[test]
fn no_runahead_when_disabled() {
    let mut c = cfg();
    c.runahead.enabled = false;
    let src = ".data\nx: .word 7\n.text\nli r1, x\nclflush 0(r1)\nld r2, 0(r1)\nhalt";
    let r = go(src, c);
    assert_eq!(r.runahead_episodes, 0);
    assert!(r.cycles > 242);
}

#[test]
fn out_of_range_load_traps_at_commit() {
    let p = assemble("li r1, -1\nld r2, 0(r1)\nhalt").unwrap();
    assert!(matches!(run(&p, cfg()), Err(SimError::Trap(_))));
}

#[test]
fn pc_out_of_range_traps() {
    let p = assemble("li r1, 100\njalr r2, r1\nhalt").unwrap();
    assert!(matches!(run(&p, cfg()), Err(SimError::Trap(_))));
}

#[test]
fn call_and_return() {
    let src = "li r1, 1\ncall f\naddi r1, r1, 10\nhalt\nf: addi r1, r1, 100\nret";
    let r = go(src, cfg());
    assert_eq!(r.state.regs[1], 111);
    same_as_interp(&assemble(src).unwrap(), &r, &cfg());
}

#[test]
fn load_after_fill_hits() {
    let src = ".data\nx: .word 7\n.text\nli r1, x\nld r2, 0(r1)\nld r3, 0(r1)\nhalt";
    let r = go(src, cfg());
    assert_eq!(r.cache.peek_latency(0x1000).unwrap().hit_level, Level::L1);
    assert_eq!(r.state.regs[3], 7);
}

#[test]
fn window_is_recorded() {
    let mut src = String::from(".data\nx: .word 0\n.text\nli r1, x\nclflush 0(r1)\nld r2, 0(r1)\n");
    for _ in 0..600 {
        src.push_str("nop\n");
    }
    src.push_str("halt\n");
    let r = go(&src, cfg());
    assert!(count_transient_window(&r.events) > 255, "{}", r.stats_text());
    let mut c = cfg();
    c.defense.mode = DefenseMode::SlCache;
    let r = go(&src, c);
    assert!(r.sl.is_some());
}
