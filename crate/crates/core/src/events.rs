// SPDX-License-Identifier: Apache-2.0

//! Append-only event log.
//!
//! The log records what happened inside each committed step: interface
//! calls, protection faults, key programming, table writes, flushes. It is
//! not part of the digestable state; it exists so that ordering properties
//! (key programming before config reads, no hypervisor write ever reaching
//! SMMU state, access-log soundness) can be checked after the fact.

use crate::types::*;
use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Event {
    /// An RMI/RSI/SMC entry point was invoked. `name` is the interface name.
    InterfaceCall { name: &'static str, vmid: Option<Vmid> },
    GptSetWorld { pa: PhysAddr, from: World, world: World, generation: u64, zeroed: bool },
    FlushPublished { pa: PhysAddr, generation: u64 },
    GpcFault { accessor_world: World, pa: PhysAddr, granule_world: World },
    /// A memory access that passed the protection check.
    MemAccess { accessor_world: World, granule_world: World, op: RwOp, pa: PhysAddr },
    Scrubbed { pa: PhysAddr },
    StreamTableLocked,
    StreamTableUnlocked,
    DeviceReset { bus: BusAddr },
    IdeKeyProgrammed { rid: Rid, key: KeyId },
    IdeKeyErased { rid: Rid },
    SpdmAttest { bus: BusAddr, ok: bool },
    ConfigRead { bus: BusAddr },
    SteWrite { sid: StreamId, caller_world: World },
    S2Write { sid: StreamId, ipa: Ipa, pa: PhysAddr, caller_world: World },
    S2Remove { sid: StreamId, ipa: Ipa },
    TlbFill { sid: StreamId, ipa: Ipa, pa: PhysAddr, generation: u64 },
    TlbInvalidate { sid: StreamId, ipa: Ipa },
    /// Stale TLB hit that disagreed with a fresh table walk. Never expected.
    TlbIncoherent { sid: StreamId, ipa: Ipa, cached: PhysAddr, walked: Option<PhysAddr> },
    RootPortVerdict {
        rid: Rid,
        verdict: &'static str,
        envelope_key: Option<KeyId>,
        store_key: Option<KeyId>,
    },
    /// Hypervisor SMMU request outcome; `allowed` writes were performed by
    /// the monitor on the hypervisor's behalf.
    HypSmmuRequest { desc: String, allowed: bool },
    DmaTransfer { bus: BusAddr, op: RwOp, ipa: Ipa, len: u64 },
    MmioAccess { vmid: Vmid, op: RwOp, ipa: Ipa },
    TapRecorded { rid: Rid },
    DeviceSwapped { bus: BusAddr },
    RealmAborted { vmid: Vmid },
}

#[derive(Default, Clone)]
pub struct EventLog {
    pub entries: Vec<(u64, Event)>,
    step: u64,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn push(&mut self, ev: Event) {
        self.entries.push((self.step, ev));
    }

    pub fn iter(&self) -> impl Iterator<Item = &(u64, Event)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
