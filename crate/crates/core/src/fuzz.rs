// SPDX-License-Identifier: Apache-2.0

//! Seeded pseudo-random interleaving of honest and adversarial actions
//! with a per-step invariant check. Fully deterministic for a fixed seed:
//! the same seed always yields the same action sequence, the same trace,
//! and the same state digest at every step.

use crate::explore::{action_alphabet, ExploreConfig};
use crate::invariants::{check_trace, TraceViolation};
use crate::kernel::Sim;
use crate::setup::{build_base, BaseOptions};
use crate::trace::{result_name, TraceEvent};
use crate::types::Digest;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Debug)]
pub struct FuzzOutcome {
    /// First invariant failure, if any: (step, check, witness).
    pub violation: Option<(u64, String, String)>,
    pub trace_violations: Vec<TraceViolation>,
    /// State digest after every step.
    pub digests: Vec<Digest>,
    pub trace: Vec<TraceEvent>,
    pub exit_code: i32,
}

pub fn fuzz(seed: u64, steps: u64, cfg: &ExploreConfig) -> FuzzOutcome {
    let mut sim = build_base(cfg.knobs, cfg.opt, BaseOptions::default());
    let alphabet = action_alphabet(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut digests = Vec::with_capacity(steps as usize);
    let mut trace = Vec::with_capacity(steps as usize);
    let mut violation = None;

    for _ in 0..steps {
        let action = &alphabet[rng.gen_range(0..alphabet.len())];
        let result = sim.apply(action);
        let digest = sim.state.digest();
        digests.push(digest);
        trace.push(TraceEvent {
            step: sim.step,
            actor: action.actor(),
            op: action.op_name().to_string(),
            args: json!({ "detail": format!("{action:?}") }),
            result: result_name(&result),
            state_digest: digest.to_hex(),
        });
        let report = sim.check_invariants();
        let first_fail = report
            .failures()
            .next()
            .map(|f| (f.name.to_string(), f.witness.clone().unwrap_or_default()));
        if let Some((name, witness)) = first_fail {
            violation = Some((sim.step, name, witness));
            break;
        }
    }

    let trace_violations = check_trace(&sim.events);
    let exit_code = if violation.is_some() || !trace_violations.is_empty() {
        2
    } else {
        0
    };
    FuzzOutcome {
        violation,
        trace_violations,
        digests,
        trace,
        exit_code,
    }
}

/// The fuzzer's simulator, exposed for tests that want to poke the final
/// state after a run.
pub fn fuzz_final_state(seed: u64, steps: u64, cfg: &ExploreConfig) -> Sim {
    let mut sim = build_base(cfg.knobs, cfg.opt, BaseOptions::default());
    let alphabet = action_alphabet(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..steps {
        let action = &alphabet[rng.gen_range(0..alphabet.len())];
        let _ = sim.apply(action);
    }
    sim
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Knobs;
    use crate::explore::ExploreConfig;

    #[test]
    fn same_seed_same_trace() {
        let cfg = ExploreConfig::default();
        let a = fuzz(11, 500, &cfg);
        let b = fuzz(11, 500, &cfg);
        assert_eq!(a.digests, b.digests);
        assert_eq!(a.exit_code, 0);
        assert!(a.violation.is_none());
        let lines_a: Vec<String> = a.trace.iter().map(|t| t.to_json_line()).collect();
        let lines_b: Vec<String> = b.trace.iter().map(|t| t.to_json_line()).collect();
        assert_eq!(lines_a, lines_b);
    }

    #[test]
    fn different_seeds_diverge() {
        let cfg = ExploreConfig::default();
        let a = fuzz(1, 200, &cfg);
        let b = fuzz(2, 200, &cfg);
        assert_ne!(a.digests, b.digests);
    }

    #[test]
    fn mutation_knob_trips_within_the_run() {
        let cfg = ExploreConfig {
            knobs: Knobs { skip_double_map_check: true, ..Default::default() },
            ..Default::default()
        };
        let out = fuzz(3, 10_000, &cfg);
        assert_eq!(out.exit_code, 2);
        let (_, check, _) = out.violation.expect("found the seeded violation");
        assert_eq!(check, "i4_host_guest_1to1");
    }
}
