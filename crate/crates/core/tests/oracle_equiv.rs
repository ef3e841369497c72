mod common;

use proptest::prelude::*;
use specrun_core::isa::{assemble, interpret_with};
use specrun_core::uarch::Core;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Whatever the speculation and defense settings, committed state equals
    /// the in-order interpreter's.
    #[test]
    fn core_matches_interpreter(seed in any::<u64>()) {
        let src = common::random_program(seed);
        let p = assemble(&src).unwrap();
        for (name, cfg) in common::oracle_configs() {
            let want = interpret_with(&p, 1_000_000, cfg.cache.mem_size).unwrap();
            prop_assert!(want.halted);
            let mut core = Core::new(&p, cfg).unwrap();
            core.set_check_invariants(true);
            let got = core.run().map_err(|e| TestCaseError::fail(format!("{name}: {e}\n{src}")))?;
            prop_assert_eq!(got.state.regs, want.regs, "{} regs\n{}", name, src);
            prop_assert_eq!(&got.state.memory, &want.memory, "{} memory", name);
            prop_assert_eq!(got.committed, want.retired_count, "{} count", name);
            prop_assert_eq!(got.state.pc, want.pc);
        }
    }
}

/// The corpus must actually exercise the speculative paths.
#[test]
fn corpus_reaches_speculative_paths() {
    let cfgs = common::oracle_configs();
    let mut episodes = vec![0u64; cfgs.len()];
    let (mut unresolvable, mut skipped, mut sl_fills, mut restarts, mut squashes) = (0, 0, 0, 0, 0);
    for seed in 0..60 {
        let p = assemble(&common::random_program(seed)).unwrap();
        for (i, (_, cfg)) in cfgs.iter().enumerate() {
            let r = Core::new(&p, *cfg).unwrap().run().unwrap();
            episodes[i] += r.runahead_episodes;
            unresolvable += r.stats.unresolvable_branches;
            skipped += r.stats.skipped_branches;
            squashes += r.stats.squashes;
            restarts += r.stats.fill_restarts;
            sl_fills += r.sl.map_or(0, |s| s.fills);
        }
    }
    println!("episodes {episodes:?} unresolvable {unresolvable} skipped {skipped} sl_fills {sl_fills} restarts {restarts} squashes {squashes}");
    for ((name, cfg), n) in cfgs.iter().zip(&episodes) {
        assert_eq!(cfg.runahead.enabled, *n > 0, "{name}");
    }
    assert!(unresolvable > 0 && skipped > 0 && sl_fills > 0 && squashes > 0);
}

/// Seeds that once broke the sl bookkeeping: instruction lines counted as
/// data fills, and a normal-mode mispredict retagged as wrong at entry.
#[test]
fn regression_seeds() {
    for seed in [675_974_628_937_924_976u64, 7_966_318_544_775_568_244] {
        let p = assemble(&common::random_program(seed)).unwrap();
        let want = interpret_with(&p, 1_000_000, specrun_core::isa::DEFAULT_MEM_SIZE).unwrap();
        for (name, cfg) in common::oracle_configs() {
            let mut core = Core::new(&p, cfg).unwrap();
            core.set_check_invariants(true);
            let got = core.run().unwrap_or_else(|e| panic!("seed {seed} {name}: {e}"));
            assert_eq!(got.state.regs, want.regs, "seed {seed} {name}");
        }
    }
}
