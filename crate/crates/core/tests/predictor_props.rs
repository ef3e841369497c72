use proptest::prelude::*;
use specrun_core::branch_pred::{BranchPredictor, PredictorConfig, Rsb};
use specrun_core::isa::BranchKind;

proptest! {
    #[test]
    fn rsb_matches_bounded_stack(depth in 1usize..=16, ops in prop::collection::vec(prop::option::of(0usize..1000), 0..80)) {
        let mut rsb = Rsb::new(depth);
        let mut oracle: Vec<usize> = Vec::new();
        for op in ops {
            match op {
                Some(v) => {
                    rsb.push(v);
                    oracle.push(v);
                    if oracle.len() > depth {
                        oracle.remove(0);
                    }
                }
                None => prop_assert_eq!(rsb.pop(), oracle.pop()),
            }
            prop_assert_eq!(rsb.entries(), oracle.clone());
        }
    }

    #[test]
    fn counters_stay_in_range(outcomes in prop::collection::vec((0usize..64, any::<bool>()), 0..200)) {
        let mut bp = BranchPredictor::new(PredictorConfig::default());
        for (pc, taken) in outcomes {
            let before = bp.checkpoint();
            let p = bp.predict(pc, BranchKind::Conditional, pc + 2);
            bp.update(pc, BranchKind::Conditional, &p, taken, pc + 2);
            if p.taken != taken {
                bp.recover(&before, BranchKind::Conditional, taken);
            }
            prop_assert!(bp.counters().iter().all(|&c| c <= 3));
            prop_assert_eq!(bp.ghr() & 1, taken as u64);
        }
    }

    #[test]
    fn restore_undoes_speculative_state(
        warm in prop::collection::vec(0usize..500, 0..20),
        spec in prop::collection::vec((0usize..500, 0u8..3), 0..40),
    ) {
        let mut bp = BranchPredictor::new(PredictorConfig::default());
        for r in warm {
            bp.push_return(r);
        }
        let cp = bp.checkpoint();
        for (pc, k) in spec {
            match k {
                0 => { bp.predict(pc, BranchKind::Conditional, pc + 1); }
                1 => bp.push_return(pc),
                _ => { bp.predict(pc, BranchKind::Return, 0); }
            }
        }
        bp.restore(&cp);
        prop_assert_eq!(bp.checkpoint(), cp);
    }
}
