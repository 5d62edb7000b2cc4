// SPDX-License-Identifier: Apache-2.0

//! The threat model as executable attack scenarios.
//!
//! Each scenario is an honest setup plus a short adversarial action
//! sequence and the exact blocking point it is expected to die at. Running
//! one also re-checks every invariant after every step: a scenario only
//! counts as blocked if the expected fault fired at the expected step and
//! no state was corrupted along the way.

use crate::error::SimError;
use crate::kernel::{Action, RealmRef};
use crate::setup::*;
use crate::smmu::SmmuField;
use crate::types::*;

/// Which adversary drives the attack steps.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ThreatActor {
    Hypervisor,
    CoTenantRealm,
    MaliciousDevice,
    Physical,
}

impl ThreatActor {
    pub fn name(self) -> &'static str {
        match self {
            ThreatActor::Hypervisor => "hypervisor",
            ThreatActor::CoTenantRealm => "co-tenant realm",
            ThreatActor::MaliciousDevice => "malicious device",
            ThreatActor::Physical => "physical attacker",
        }
    }
}

pub struct AttackScenario {
    pub name: &'static str,
    pub actor: ThreatActor,
    pub description: &'static str,
    /// Extra pieces of the base world this scenario needs.
    pub base: BaseOptions,
    /// Honest steps specific to this scenario, applied after the base.
    pub extra_setup: Vec<Action>,
    pub attack: Vec<Action>,
    /// (blocking fault, index into `attack` where it must fire).
    pub expected: (SimError, usize),
}

#[derive(Clone, Debug)]
pub struct ScenarioOutcome {
    pub name: &'static str,
    pub blocked: bool,
    pub blocked_by: Option<String>,
    pub at_step: Option<usize>,
    pub detail: String,
}

/// All registered scenarios.
pub fn scenarios() -> Vec<AttackScenario> {
    let r1 = || RealmRef::Name("r1".into());
    vec![
        AttackScenario {
            name: "hv_remap_realm_stream",
            actor: ThreatActor::Hypervisor,
            description: "hypervisor rewrites the stage-2 table of a realm device's stream",
            base: BaseOptions { protmem_r0: true, ..Default::default() },
            extra_setup: vec![],
            attack: vec![Action::HvS2Map {
                sid: DEV0.stream_id(),
                ipa: DATA2_IPA,
                pa: FREE_PA,
            }],
            expected: (SimError::RealmStreamDenied, 0),
        },
        AttackScenario {
            name: "hv_smmu_config_tamper",
            actor: ThreatActor::Hypervisor,
            description: "hypervisor turns stage-2 bypass on through the config interface",
            base: BaseOptions::default(),
            extra_setup: vec![],
            attack: vec![Action::HvConfigWrite {
                field: SmmuField::Stage2Bypass,
                value: 1,
            }],
            expected: (SimError::FieldDenied, 0),
        },
        AttackScenario {
            name: "hv_enable_ats",
            actor: ThreatActor::Hypervisor,
            description: "hypervisor enables address translation services on a stream",
            base: BaseOptions::default(),
            extra_setup: vec![],
            attack: vec![Action::HvAtsEnable { sid: DEV0.stream_id() }],
            expected: (SimError::AtsDenied, 0),
        },
        AttackScenario {
            name: "hv_emulate_device",
            actor: ThreatActor::Hypervisor,
            description: "hypervisor attaches a software-emulated endpoint to a realm",
            base: BaseOptions::default(),
            extra_setup: vec![],
            attack: vec![Action::DataCreate {
                realm: r1(),
                src: STAGING_PA,
                dst: R1_CFG_PA,
                ipa: CFG_IPA,
                attach: Some(attach_params(EMULATED)),
            }],
            expected: (SimError::AttestFailed, 0),
        },
        AttackScenario {
            name: "hv_wrong_bar_sizes",
            actor: ThreatActor::Hypervisor,
            description: "hypervisor declares a two-granule BAR but maps only one granule",
            base: BaseOptions::default(),
            extra_setup: vec![],
            attack: vec![Action::DataCreate {
                realm: r1(),
                src: STAGING_PA,
                dst: R1_CFG_PA,
                ipa: CFG_IPA,
                attach: Some(crate::rmm::AttachParams {
                    bus: DEV1,
                    bars: vec![(BAR_IPA, 2)],
                }),
            }],
            expected: (SimError::BarNotMapped, 0),
        },
        AttackScenario {
            name: "hv_bar_in_normal_world",
            actor: ThreatActor::Hypervisor,
            description: "hypervisor backs a BAR region with normal-world memory",
            base: BaseOptions::default(),
            extra_setup: vec![],
            // The granule at FREE_PA was never delegated; mapping it as the
            // BAR backing dies at the world check.
            attack: vec![Action::DataCreate {
                realm: r1(),
                src: STAGING_PA,
                dst: FREE_PA,
                ipa: DATA2_IPA,
                attach: None,
            }],
            expected: (SimError::WrongWorld, 0),
        },
        AttackScenario {
            name: "hv_reclaim_during_dma",
            actor: ThreatActor::Hypervisor,
            description: "hypervisor reclaims a realm granule that a device still maps",
            base: BaseOptions { protmem_r0: true, ..Default::default() },
            extra_setup: vec![],
            attack: vec![Action::Undelegate { pa: R0_DATA_PA }],
            expected: (SimError::StillMapped, 0),
        },
        AttackScenario {
            name: "hv_double_assign_device",
            actor: ThreatActor::Hypervisor,
            description: "hypervisor assigns an already-attached device to a second realm",
            base: BaseOptions::default(),
            extra_setup: vec![],
            attack: vec![Action::DataCreate {
                realm: r1(),
                src: STAGING_PA,
                dst: R1_CFG_PA,
                ipa: CFG_IPA,
                attach: Some(attach_params(DEV0)),
            }],
            expected: (SimError::StreamIdTaken, 0),
        },
        AttackScenario {
            name: "cotenant_overlap_dma",
            actor: ThreatActor::CoTenantRealm,
            description: "co-tenant realm asks for a mapping of the victim's granule",
            base: BaseOptions::default(),
            extra_setup: vec![],
            attack: vec![Action::DataCreate {
                realm: r1(),
                src: STAGING_PA,
                dst: R0_DATA_PA,
                ipa: DATA2_IPA,
                attach: None,
            }],
            expected: (SimError::DoubleMap, 0),
        },
        AttackScenario {
            name: "cotenant_ipa_claim",
            actor: ThreatActor::CoTenantRealm,
            description: "co-tenant realm delegates protected memory for the victim's device",
            base: BaseOptions { activate_r1: true, ..Default::default() },
            extra_setup: vec![],
            attack: vec![Action::ProtMem {
                realm: r1(),
                dev: DEV0.stream_id(),
                sg: vec![(DATA_IPA, GRANULE_SIZE)],
            }],
            expected: (SimError::NotOwner, 0),
        },
        AttackScenario {
            name: "device_forge_rid",
            actor: ThreatActor::MaliciousDevice,
            description: "device attached to one realm forges the victim device's requester id",
            base: BaseOptions {
                attach_r1: true,
                activate_r1: true,
                protmem_r0: true,
                ..Default::default()
            },
            extra_setup: vec![],
            attack: vec![Action::Dma {
                bus: DEV1,
                op: RwOp::Read,
                ipa: DATA_IPA,
                len: 16,
                t_bit: true,
                rid_override: Some(DEV0.rid()),
            }],
            expected: (SimError::DiscardedAtRootPort, 0),
        },
        AttackScenario {
            name: "device_cross_realm_dma",
            actor: ThreatActor::MaliciousDevice,
            description: "realm device reaches for another realm's protected granule",
            base: BaseOptions {
                attach_r1: true,
                activate_r1: true,
                protmem_r0: true,
                ..Default::default()
            },
            // Realm one never delegated this address for its device, so the
            // stream's stage-2 table has no entry for it.
            extra_setup: vec![],
            attack: vec![Action::Dma {
                bus: DEV1,
                op: RwOp::Read,
                ipa: DATA_IPA,
                len: 16,
                t_bit: true,
                rid_override: None,
            }],
            expected: (SimError::TranslationFault, 0),
        },
        AttackScenario {
            name: "normal_device_reads_realm",
            actor: ThreatActor::MaliciousDevice,
            description: "untagged transaction walks a hypervisor mapping into realm memory",
            base: BaseOptions::default(),
            // The hypervisor may map a normal stream at a realm granule;
            // the protection check stops the access itself.
            extra_setup: vec![Action::HvS2Map {
                sid: DEV1.stream_id(),
                ipa: DATA_IPA,
                pa: R0_DATA_PA,
            }],
            attack: vec![Action::Dma {
                bus: DEV1,
                op: RwOp::Read,
                ipa: DATA_IPA,
                len: 16,
                t_bit: false,
                rid_override: None,
            }],
            expected: (SimError::GpcDenied, 0),
        },
        AttackScenario {
            name: "physical_replay_envelope",
            actor: ThreatActor::Physical,
            description: "physical attacker replays a captured link envelope",
            base: BaseOptions { protmem_r0: true, ..Default::default() },
            // A legitimate transfer to capture.
            extra_setup: vec![Action::Dma {
                bus: DEV0,
                op: RwOp::Write,
                ipa: DATA_IPA,
                len: 16,
                t_bit: true,
                rid_override: None,
            }],
            attack: vec![Action::TapReplay],
            expected: (SimError::DiscardedAtRootPort, 0),
        },
        AttackScenario {
            name: "physical_plug_after_attest",
            actor: ThreatActor::Physical,
            description: "attacker swaps in a device after attestation; it holds no link key",
            base: BaseOptions { protmem_r0: true, ..Default::default() },
            extra_setup: vec![],
            attack: vec![
                Action::DeviceSwap { bus: DEV0 },
                Action::Dma {
                    bus: DEV0,
                    op: RwOp::Read,
                    ipa: DATA_IPA,
                    len: 16,
                    t_bit: true,
                    rid_override: None,
                },
            ],
            expected: (SimError::DiscardedAtRootPort, 1),
        },
    ]
}

pub fn scenario_names() -> Vec<&'static str> {
    scenarios().iter().map(|s| s.name).collect()
}

/// Execute one registered scenario from a fresh base world.
pub fn run_attack_scenario(name: &str) -> Result<ScenarioOutcome, SimError> {
    let scenario = scenarios()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or(SimError::UnknownScenario)?;
    Ok(run_scenario(&scenario))
}

pub fn run_scenario(scenario: &AttackScenario) -> ScenarioOutcome {
    let mut sim = build_base(Default::default(), false, scenario.base);
    for (i, action) in scenario.extra_setup.iter().enumerate() {
        if let Err(e) = sim.apply(action) {
            return ScenarioOutcome {
                name: scenario.name,
                blocked: false,
                blocked_by: None,
                at_step: None,
                detail: format!("setup step {i} failed: {}", e.name()),
            };
        }
        let report = sim.check_invariants();
        if !report.all_pass() {
            return ScenarioOutcome {
                name: scenario.name,
                blocked: false,
                blocked_by: None,
                at_step: None,
                detail: format!("invariants broke during setup: {}", report.summary()),
            };
        }
    }

    let mut first_fault: Option<(usize, String)> = None;
    for (i, action) in scenario.attack.iter().enumerate() {
        let result = sim.apply(action);
        let report = sim.check_invariants();
        if !report.all_pass() {
            return ScenarioOutcome {
                name: scenario.name,
                blocked: false,
                blocked_by: first_fault.map(|(_, e)| e),
                at_step: Some(i),
                detail: format!("attack corrupted state: {}", report.summary()),
            };
        }
        if let Err(fault) = result {
            first_fault = Some((i, fault.name().to_string()));
            break;
        }
    }

    let (expected_err, expected_step) = scenario.expected;
    match first_fault {
        Some((step, ref err)) if step == expected_step && err == expected_err.name() => {
            ScenarioOutcome {
                name: scenario.name,
                blocked: true,
                blocked_by: Some(err.clone()),
                at_step: Some(step),
                detail: "blocked as expected".into(),
            }
        }
        Some((step, err)) => ScenarioOutcome {
            name: scenario.name,
            blocked: false,
            blocked_by: Some(err.clone()),
            at_step: Some(step),
            detail: format!(
                "blocked by {err} at step {step}, expected {} at step {expected_step}",
                expected_err.name()
            ),
        },
        None => ScenarioOutcome {
            name: scenario.name,
            blocked: false,
            blocked_by: None,
            at_step: None,
            detail: "attack ran to completion".into(),
        },
    }
}
