// SPDX-License-Identifier: Apache-2.0

//! Canonical small worlds for the attack scenarios, the exhaustive
//! explorer, and the fuzzer.
//!
//! The base world has eight data granules, two realms, and two genuine
//! devices plus one emulated endpoint. Realm zero is fully built: one data
//! granule, one BAR granule, config space, device attached, activated.
//! Realm one is created and has data and BAR granules mapped, but its
//! attach is left to the caller, so both the legitimate completion and
//! every way of subverting it stay reachable in a few steps.

use crate::config::{default_inventory, DeviceBehavior, DeviceSpec, Knobs, SimConfig};
use crate::kernel::{Action, RealmRef, Sim};
use crate::rmm::AttachParams;
use crate::types::*;

pub const STAGING_PA: PhysAddr = PhysAddr(0x0000);
pub const R0_DATA_PA: PhysAddr = PhysAddr(0x1000);
pub const R0_BAR_PA: PhysAddr = PhysAddr(0x2000);
pub const R0_CFG_PA: PhysAddr = PhysAddr(0x3000);
pub const R1_DATA_PA: PhysAddr = PhysAddr(0x4000);
pub const R1_BAR_PA: PhysAddr = PhysAddr(0x5000);
pub const R1_CFG_PA: PhysAddr = PhysAddr(0x6000);
pub const FREE_PA: PhysAddr = PhysAddr(0x7000);

pub const DATA_IPA: Ipa = Ipa(0x2000);
pub const DATA2_IPA: Ipa = Ipa(0x3000);
pub const BAR_IPA: Ipa = Ipa(0x8000);
pub const CFG_IPA: Ipa = Ipa(0xB000);

pub const DEV0: BusAddr = BusAddr(0x0100);
pub const DEV1: BusAddr = BusAddr(0x0200);
pub const EMULATED: BusAddr = BusAddr(0x0300);

pub fn small_inventory() -> Vec<DeviceSpec> {
    let mut inv = default_inventory();
    for dev in &mut inv {
        dev.bars = vec![1];
        dev.behavior = if dev.genuine {
            DeviceBehavior::NegateCopy
        } else {
            DeviceBehavior::Inert
        };
    }
    inv
}

pub fn small_config(knobs: Knobs, opt: bool) -> SimConfig {
    SimConfig {
        data_granules: 8,
        max_realms: 2,
        devices: small_inventory(),
        opt,
        knobs,
        staging: vec![(0, 0x11)],
        swap_during_attach: None,
    }
}

/// Which optional pieces of the base world to build.
#[derive(Clone, Copy, Default)]
pub struct BaseOptions {
    /// Also attach the second device to realm one.
    pub attach_r1: bool,
    /// Also activate realm one.
    pub activate_r1: bool,
    /// Also delegate realm zero's data granule to its device.
    pub protmem_r0: bool,
}

pub fn attach_params(bus: BusAddr) -> AttachParams {
    AttachParams {
        bus,
        bars: vec![(BAR_IPA, 1)],
    }
}

/// The honest build sequence for the base world. Every step must succeed.
pub fn base_actions(opts: BaseOptions) -> Vec<Action> {
    let r0 = || RealmRef::Name("r0".into());
    let r1 = || RealmRef::Name("r1".into());
    let mut acts = vec![
        Action::Delegate { pa: R0_DATA_PA },
        Action::Delegate { pa: R0_BAR_PA },
        Action::Delegate { pa: R0_CFG_PA },
        Action::Delegate { pa: R1_DATA_PA },
        Action::Delegate { pa: R1_BAR_PA },
        Action::Delegate { pa: R1_CFG_PA },
        Action::RealmCreate { name: "r0".into() },
        Action::DataCreate {
            realm: r0(),
            src: STAGING_PA,
            dst: R0_DATA_PA,
            ipa: DATA_IPA,
            attach: None,
        },
        Action::DataCreate {
            realm: r0(),
            src: STAGING_PA,
            dst: R0_BAR_PA,
            ipa: BAR_IPA,
            attach: None,
        },
        Action::DataCreate {
            realm: r0(),
            src: STAGING_PA,
            dst: R0_CFG_PA,
            ipa: CFG_IPA,
            attach: Some(attach_params(DEV0)),
        },
        Action::Activate { realm: r0() },
        Action::RealmCreate { name: "r1".into() },
        Action::DataCreate {
            realm: r1(),
            src: STAGING_PA,
            dst: R1_DATA_PA,
            ipa: DATA_IPA,
            attach: None,
        },
        Action::DataCreate {
            realm: r1(),
            src: STAGING_PA,
            dst: R1_BAR_PA,
            ipa: BAR_IPA,
            attach: None,
        },
    ];
    if opts.attach_r1 {
        acts.push(Action::DataCreate {
            realm: r1(),
            src: STAGING_PA,
            dst: R1_CFG_PA,
            ipa: CFG_IPA,
            attach: Some(attach_params(DEV1)),
        });
    }
    if opts.activate_r1 {
        acts.push(Action::Activate { realm: r1() });
    }
    if opts.protmem_r0 {
        acts.push(Action::ProtMem {
            realm: r0(),
            dev: DEV0.stream_id(),
            sg: vec![(DATA_IPA, GRANULE_SIZE)],
        });
    }
    acts
}

/// Build the base world, panicking if any honest step fails.
pub fn build_base(knobs: Knobs, opt: bool, opts: BaseOptions) -> Sim {
    let mut sim = Sim::new(small_config(knobs, opt));
    for action in base_actions(opts) {
        if let Err(e) = sim.apply(&action) {
            panic!("base world step {action:?} failed: {}", e.name());
        }
    }
    sim
}
