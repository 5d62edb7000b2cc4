// SPDX-License-Identifier: Apache-2.0

//! Simulation configuration: physical address space size, device inventory,
//! enforcement knobs, and the pre-mapping optimization flag.

use crate::types::*;
use serde::{Deserialize, Serialize};

/// Number of granules reserved at the top of the address space for SMMU
/// data structures (stream table, stage-2 tables, command/event queues).
/// `boot_init` moves them to root world.
pub const RESERVED_GRANULES: usize = 3;

/// What a device does when its doorbell register is written.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum DeviceBehavior {
    /// Ignores doorbells.
    Inert,
    /// DMA-reads the source buffer, negates every byte, DMA-writes the
    /// result to the destination buffer.
    NegateCopy,
}

/// Static description of one device on the bus.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub bus: BusAddr,
    /// Size of each BAR in granules; at most six entries.
    pub bars: Vec<u8>,
    /// Firmware identity; the report digest derives from this string.
    pub firmware: String,
    pub debug_disabled: bool,
    /// False models a hypervisor-emulated endpoint: it answers bus probes
    /// but cannot complete the link-key handshake or sign a report.
    pub genuine: bool,
    pub behavior: DeviceBehavior,
}

/// Enforcement knobs. Each disables exactly one security check so that the
/// invariant checkers can be shown non-vacuous; all default to off.
#[derive(Clone, Copy, Default, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Knobs {
    /// Monitor accepts devices whose attestation fails (identity check).
    pub skip_attest_check: bool,
    /// Monitor skips the taken-stream-id check at attach (ownership check).
    pub skip_stream_taken_check: bool,
    /// Monitor skips verifying that delegated (ipa, pa) pairs mirror the
    /// owner realm's stage-2 table and come from the realm manager.
    pub skip_mirror_check: bool,
    /// Realm manager skips the destination-already-mapped check.
    pub skip_double_map_check: bool,
    /// Monitor skips the reverse-map lookup before stage-2 writes.
    pub skip_reverse_map_check: bool,
    /// Realm manager skips verifying that BAR regions are fully mapped.
    pub skip_bar_mapped_check: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimConfig {
    /// Usable data granules. RESERVED_GRANULES more are appended for the
    /// SMMU structures, so the physical space covers
    /// `data_granules + RESERVED_GRANULES` granules in total.
    pub data_granules: usize,
    pub max_realms: usize,
    pub devices: Vec<DeviceSpec>,
    /// Pre-map all realm memory into the attached device's stage-2 table at
    /// creation time, making runtime protected-memory delegation a no-op.
    pub opt: bool,
    pub knobs: Knobs,
    /// Normal-world granules pre-filled by the hypervisor before the run,
    /// as (granule index, fill byte). Used as data-create sources.
    pub staging: Vec<(usize, u8)>,
    /// Adversary schedule: the physical attacker swaps the endpoint at
    /// this bus address inside the next attach, after key programming but
    /// before the attestation exchange.
    pub swap_during_attach: Option<BusAddr>,
}

impl SimConfig {
    pub fn total_granules(&self) -> usize {
        self.data_granules + RESERVED_GRANULES
    }

    /// Granule holding the stream table.
    pub fn stream_table_granule(&self) -> usize {
        self.data_granules
    }

    /// Granules holding stage-2 tables and command/event queues.
    pub fn smmu_table_granules(&self) -> [usize; 2] {
        [self.data_granules + 1, self.data_granules + 2]
    }

    pub fn device(&self, bus: BusAddr) -> Option<&DeviceSpec> {
        self.devices.iter().find(|d| d.bus == bus)
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            // 256 granules of physical space in total (1 MiB).
            data_granules: 256 - RESERVED_GRANULES,
            max_realms: 8,
            devices: default_inventory(),
            opt: false,
            knobs: Knobs::default(),
            staging: (1..=7).map(|i| (i, 0x10 + i as u8)).collect(),
            swap_during_attach: None,
        }
    }
}

/// The stock bus: one two-BAR accelerator, one single-BAR accelerator, and
/// one hypervisor-emulated endpoint used by attack scenarios.
pub fn default_inventory() -> Vec<DeviceSpec> {
    vec![
        DeviceSpec {
            bus: BusAddr(0x0100),
            bars: vec![2, 1],
            firmware: "fw-accel-1.0".to_string(),
            debug_disabled: true,
            genuine: true,
            behavior: DeviceBehavior::NegateCopy,
        },
        DeviceSpec {
            bus: BusAddr(0x0200),
            bars: vec![1],
            firmware: "fw-accel-1.0".to_string(),
            debug_disabled: true,
            genuine: true,
            behavior: DeviceBehavior::NegateCopy,
        },
        DeviceSpec {
            bus: BusAddr(0x0300),
            bars: vec![1],
            firmware: "fw-accel-1.0".to_string(),
            debug_disabled: true,
            genuine: false,
            behavior: DeviceBehavior::Inert,
        },
    ]
}
