// SPDX-License-Identifier: Apache-2.0

//! Property tests: arbitrary interleavings of honest and adversarial
//! actions never reach an invariant-violating state, traces replay
//! cleanly, and the canonical digest behaves like a value.

use casim_core::canon::Canon;
use casim_core::explore::{action_alphabet, ExploreConfig};
use casim_core::invariants::{check_invariants, check_trace};
use casim_core::setup::{build_base, BaseOptions};
use casim_core::types::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // The core soundness property: no reachable state, however
    // adversarially driven, breaks any invariant while enforcement is on.
    #[test]
    fn random_action_sequences_stay_sound(indices in prop::collection::vec(0usize..1000, 1..30)) {
        let cfg = ExploreConfig::default();
        let alphabet = action_alphabet(&cfg);
        let mut sim = build_base(Default::default(), false, BaseOptions::default());
        for idx in indices {
            let action = &alphabet[idx % alphabet.len()];
            let _ = sim.apply(action);
            let report = check_invariants(&sim.state);
            prop_assert!(report.all_pass(), "after {action:?}: {}", report.summary());
        }
        let trace_violations = check_trace(&sim.events);
        prop_assert!(trace_violations.is_empty(), "{trace_violations:?}");
    }

    // State digests are a pure function of state.
    #[test]
    fn digests_are_stable_under_clone(indices in prop::collection::vec(0usize..1000, 0..12)) {
        let cfg = ExploreConfig::default();
        let alphabet = action_alphabet(&cfg);
        let mut sim = build_base(Default::default(), false, BaseOptions::default());
        for idx in indices {
            let _ = sim.apply(&alphabet[idx % alphabet.len()]);
        }
        let copy = sim.fork_state();
        prop_assert_eq!(sim.state.digest(), copy.state.digest());
        prop_assert_eq!(sim.state.dedup_key(), copy.state.dedup_key());
    }

    // The measurement chain: equal entry sequences agree, and perturbing
    // any single entry changes the result.
    #[test]
    fn measurement_chain_binds_every_entry(
        entries in prop::collection::vec((0u64..1 << 20, any::<[u8; 32]>(), any::<bool>()), 1..8),
        flip in any::<prop::sample::Index>(),
    ) {
        let chain = |list: &[(u64, [u8; 32], bool)]| {
            let mut rim = Digest::ZERO;
            for (ipa, content, attach) in list {
                let mut c = Canon::new("rim-entry");
                c.digest(&rim);
                c.u64(*ipa);
                c.digest(&Digest(*content));
                c.bool(*attach);
                rim = c.finish();
            }
            rim
        };
        prop_assert_eq!(chain(&entries), chain(&entries));
        let mut perturbed = entries.clone();
        let at = flip.index(perturbed.len());
        perturbed[at].0 ^= 1;
        prop_assert_ne!(chain(&entries), chain(&perturbed));
    }
}
