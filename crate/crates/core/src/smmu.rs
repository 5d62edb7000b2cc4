// SPDX-License-Identifier: Apache-2.0

//! Device-side MMU: stream table, per-stream stage-2 tables, inbound world
//! inference, and a translation cache kept coherent with protection-table
//! generations.
//!
//! Stage-2 tables are flat maps rather than multi-level trees; every
//! isolation claim is about mapping content, not walk mechanics. All table
//! mutation goes through root-world writes — the tables live in granules
//! that boot moved to root world, so a direct hypervisor store faults.

use crate::canon::Canon;
use crate::error::{SimError, SimResult};
use crate::events::Event;
use crate::kernel::Sim;
use crate::pcie::{PcieTransaction, RootPortVerdict};
use crate::types::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// SMMU configuration registers the hypervisor may ask the monitor to
/// touch. Only the first three are on the allow-list.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub enum SmmuField {
    EventQueueThreshold,
    NonRealmStage2Base,
    FaultRecordConfig,
    SmmuEnable,
    Stage2Bypass,
    AtsGlobalEnable,
    RealmStreamTableBase,
}

impl SmmuField {
    pub const ALL: [SmmuField; 7] = [
        SmmuField::EventQueueThreshold,
        SmmuField::NonRealmStage2Base,
        SmmuField::FaultRecordConfig,
        SmmuField::SmmuEnable,
        SmmuField::Stage2Bypass,
        SmmuField::AtsGlobalEnable,
        SmmuField::RealmStreamTableBase,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SmmuField::EventQueueThreshold => "event_queue_threshold",
            SmmuField::NonRealmStage2Base => "non_realm_stage2_base",
            SmmuField::FaultRecordConfig => "fault_record_config",
            SmmuField::SmmuEnable => "smmu_enable",
            SmmuField::Stage2Bypass => "stage2_bypass",
            SmmuField::AtsGlobalEnable => "ats_global_enable",
            SmmuField::RealmStreamTableBase => "realm_stream_table_base",
        }
    }

    pub fn from_name(s: &str) -> Option<SmmuField> {
        SmmuField::ALL.into_iter().find(|f| f.name() == s)
    }

    fn index(self) -> u8 {
        SmmuField::ALL.iter().position(|&f| f == self).unwrap() as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ste {
    pub valid: bool,
    pub world: World,
    /// Must stay false for realm streams; address translation services let
    /// a device bypass stage-2 entirely.
    pub ats_enabled: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TlbEntry {
    pub pa: PhysAddr,
    pub generation: u64,
}

#[derive(Clone, Debug, Default)]
pub struct SmmuState {
    pub stes: BTreeMap<StreamId, Ste>,
    pub s2: BTreeMap<StreamId, BTreeMap<Ipa, PhysAddr>>,
    pub tlb: BTreeMap<(StreamId, Ipa), TlbEntry>,
    pub config: BTreeMap<SmmuField, u64>,
}

impl SmmuState {
    pub fn mapping(&self, sid: StreamId, ipa: Ipa) -> Option<PhysAddr> {
        self.s2.get(&sid).and_then(|t| t.get(&ipa)).copied()
    }

    pub fn canonize(&self, c: &mut Canon, with_counters: bool) {
        c.u64(self.stes.len() as u64);
        for (sid, ste) in &self.stes {
            c.u32(sid.0);
            c.bool(ste.valid);
            c.u8(ste.world.as_u8());
            c.bool(ste.ats_enabled);
        }
        c.u64(self.s2.len() as u64);
        for (sid, table) in &self.s2 {
            c.u32(sid.0);
            c.u64(table.len() as u64);
            for (ipa, pa) in table {
                c.u64(ipa.0);
                c.u64(pa.0);
            }
        }
        c.u64(self.tlb.len() as u64);
        for ((sid, ipa), entry) in &self.tlb {
            c.u32(sid.0);
            c.u64(ipa.0);
            c.u64(entry.pa.0);
            if with_counters {
                c.u64(entry.generation);
            }
        }
        c.u64(self.config.len() as u64);
        for (field, value) in &self.config {
            c.u8(field.index());
            c.u64(*value);
        }
    }
}

impl Sim {
    /// Install or replace a stream table entry. Root only.
    pub(crate) fn ste_write(&mut self, sid: StreamId, ste: Ste, caller: AccessorCtx) -> SimResult<()> {
        if caller.world != World::Root {
            return Err(SimError::NotRoot);
        }
        self.state.smmu.stes.insert(sid, ste);
        self.smmu_flush_stream(sid);
        self.events.push(Event::SteWrite { sid, caller_world: caller.world });
        Ok(())
    }

    pub(crate) fn ste_remove(&mut self, sid: StreamId, caller: AccessorCtx) -> SimResult<()> {
        if caller.world != World::Root {
            return Err(SimError::NotRoot);
        }
        self.state.smmu.stes.remove(&sid);
        self.smmu_flush_stream(sid);
        self.events.push(Event::SteWrite { sid, caller_world: caller.world });
        Ok(())
    }

    /// Install one stage-2 mapping. Root only. The affected cache line is
    /// invalidated in the same step.
    pub(crate) fn s2_write(
        &mut self,
        sid: StreamId,
        ipa: Ipa,
        pa: PhysAddr,
        caller: AccessorCtx,
    ) -> SimResult<()> {
        if caller.world != World::Root {
            return Err(SimError::NotRoot);
        }
        self.state.smmu.s2.entry(sid).or_default().insert(ipa, pa);
        if self.state.smmu.tlb.remove(&(sid, ipa)).is_some() {
            self.events.push(Event::TlbInvalidate { sid, ipa });
        }
        self.events.push(Event::S2Write { sid, ipa, pa, caller_world: caller.world });
        Ok(())
    }

    pub(crate) fn s2_remove(&mut self, sid: StreamId, ipa: Ipa, caller: AccessorCtx) -> SimResult<()> {
        if caller.world != World::Root {
            return Err(SimError::NotRoot);
        }
        if let Some(table) = self.state.smmu.s2.get_mut(&sid) {
            table.remove(&ipa);
            if table.is_empty() {
                self.state.smmu.s2.remove(&sid);
            }
        }
        if self.state.smmu.tlb.remove(&(sid, ipa)).is_some() {
            self.events.push(Event::TlbInvalidate { sid, ipa });
        }
        self.events.push(Event::S2Remove { sid, ipa });
        Ok(())
    }

    /// Drop every cached translation that resolves to this physical
    /// address. Called on each protection-table change.
    pub(crate) fn smmu_flush_pa(&mut self, pa: PhysAddr) {
        let stale: Vec<(StreamId, Ipa)> = self
            .state
            .smmu
            .tlb
            .iter()
            .filter(|(_, e)| e.pa == pa)
            .map(|(k, _)| *k)
            .collect();
        for key in stale {
            self.state.smmu.tlb.remove(&key);
            self.events.push(Event::TlbInvalidate { sid: key.0, ipa: key.1 });
        }
    }

    pub(crate) fn smmu_flush_stream(&mut self, sid: StreamId) {
        let stale: Vec<(StreamId, Ipa)> = self
            .state
            .smmu
            .tlb
            .keys()
            .filter(|(s, _)| *s == sid)
            .copied()
            .collect();
        for key in stale {
            self.state.smmu.tlb.remove(&key);
            self.events.push(Event::TlbInvalidate { sid: key.0, ipa: key.1 });
        }
    }

    /// Clear a stream's whole stage-2 table, releasing its reverse-map
    /// claims. Root-internal, used by attach (fresh table) and detach.
    pub(crate) fn s2_clear_stream(&mut self, sid: StreamId) {
        if let Some(table) = self.state.smmu.s2.remove(&sid) {
            for (ipa, pa) in table {
                let slot = &mut self.state.rmm.reverse[pa.granule_index()];
                if slot.smmu_owner == Some(sid) {
                    slot.smmu_owner = None;
                }
                self.events.push(Event::S2Remove { sid, ipa });
            }
        }
        self.smmu_flush_stream(sid);
    }

    /// The inbound translation pipeline: infer the transaction's world from
    /// the root-port verdict and the tag bit, look up the stream table,
    /// walk (or hit the cache), and protection-check the result.
    pub(crate) fn translate_transaction(
        &mut self,
        txn: &PcieTransaction,
        verdict: RootPortVerdict,
    ) -> SimResult<PhysAddr> {
        if verdict == RootPortVerdict::Discard {
            return Err(SimError::DiscardedAtRootPort);
        }
        let world_ext = if txn.t_bit { World::Realm } else { World::Normal };
        debug_assert!(world_ext != World::Root, "no root transactions on the bus");

        // Stream table indexing is a root-world access regardless of the
        // transaction's own world: the table granule is root memory.
        let st_pa = PhysAddr::from_granule_index(self.state.cfg.stream_table_granule());
        self.events.push(Event::MemAccess {
            accessor_world: World::Root,
            granule_world: self.state.mem.world(st_pa),
            op: RwOp::Read,
            pa: st_pa,
        });

        let sid = StreamId(txn.rid.0);
        let ste = self.state.smmu.stes.get(&sid).copied();
        let ste = match ste {
            Some(s) if s.valid && s.world == world_ext => s,
            _ => return Err(SimError::NoSte),
        };
        debug_assert!(!(ste.world == World::Realm && ste.ats_enabled));

        let ipa = txn.ipa.granule_base();
        let pa = match self.state.smmu.tlb.get(&(sid, ipa)) {
            Some(entry) => {
                // A cached translation must agree with a fresh walk; a
                // mismatch would mean a missed invalidation.
                let walked = self.state.smmu.mapping(sid, ipa);
                if walked != Some(entry.pa) {
                    self.events.push(Event::TlbIncoherent {
                        sid,
                        ipa,
                        cached: entry.pa,
                        walked,
                    });
                }
                entry.pa
            }
            None => {
                let pa = self
                    .state
                    .smmu
                    .mapping(sid, ipa)
                    .ok_or(SimError::TranslationFault)?;
                let generation = self.state.mem.generation;
                self.state.smmu.tlb.insert((sid, ipa), TlbEntry { pa, generation });
                self.events.push(Event::TlbFill { sid, ipa, pa, generation });
                pa
            }
        };

        let granule_world = self.state.mem.world(pa);
        if !crate::memory::gpc_allows(world_ext, granule_world) {
            self.events.push(Event::GpcFault {
                accessor_world: world_ext,
                pa,
                granule_world,
            });
            return Err(SimError::GpcDenied);
        }
        Ok(pa)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Event;
    use crate::memory::ReadOutcome;
    use crate::setup::*;

    // Hand trace of the inbound pipeline: tagged transaction, accepted at
    // the port, stream table hit, stage-2 walk, protection check, memory.
    #[test]
    fn tagged_dma_read_returns_realm_bytes() {
        let mut s = build_base(
            Default::default(),
            false,
            BaseOptions { protmem_r0: true, ..Default::default() },
        );
        // Put known plaintext in the realm buffer first.
        s.realm_mem_write(Vmid(0), DATA_IPA, &[0x5A; 16]).unwrap();
        let out = s
            .device_send_dma(DEV0, RwOp::Read, DATA_IPA, 16, true, None, Vec::new())
            .unwrap();
        assert_eq!(
            out.data,
            Some(ReadOutcome::Bytes(vec![0x5A; 16])),
            "device sees the owner realm's plaintext"
        );
    }

    #[test]
    fn untagged_transactions_cannot_reach_realm_memory() {
        let mut s = build_base(Default::default(), false, BaseOptions::default());
        // Hypervisor maps the normal stream straight at a realm granule.
        s.smc_smmu_request(crate::monitor::SmmuHypRequest::S2Map {
            sid: DEV1.stream_id(),
            ipa: DATA_IPA,
            pa: R0_DATA_PA,
        })
        .unwrap();
        let err = s
            .device_send_dma(DEV1, RwOp::Read, DATA_IPA, 16, false, None, Vec::new())
            .unwrap_err();
        assert_eq!(err, SimError::GpcDenied);
    }

    #[test]
    fn forged_identity_dies_before_the_smmu() {
        let mut s = build_base(
            Default::default(),
            false,
            BaseOptions { attach_r1: true, protmem_r0: true, ..Default::default() },
        );
        let events_before = s.events.len();
        let err = s
            .device_send_dma(DEV1, RwOp::Read, DATA_IPA, 16, true, Some(DEV0.rid()), Vec::new())
            .unwrap_err();
        assert_eq!(err, SimError::DiscardedAtRootPort);
        // No stream-table or walk activity happened for the discard.
        let new_events = &s.events.entries[events_before..];
        assert!(!new_events.iter().any(|(_, e)| matches!(
            e,
            Event::TlbFill { .. } | Event::GpcFault { .. }
        )));
    }

    #[test]
    fn gpt_changes_flush_cached_translations() {
        let mut s = build_base(
            Default::default(),
            false,
            BaseOptions { protmem_r0: true, ..Default::default() },
        );
        let sid = DEV0.stream_id();
        // Fill the cache.
        s.device_send_dma(DEV0, RwOp::Read, DATA_IPA, 16, true, None, Vec::new()).unwrap();
        assert!(s.state.smmu.tlb.contains_key(&(sid, DATA_IPA)));
        let pa = s.state.smmu.mapping(sid, DATA_IPA).unwrap();
        // Any world change on that granule invalidates the entry.
        s.gpt_set_world(pa, World::Root, AccessorCtx::monitor()).unwrap();
        assert!(!s.state.smmu.tlb.contains_key(&(sid, DATA_IPA)));
        s.gpt_set_world(pa, World::Realm, AccessorCtx::monitor()).unwrap();
        // A fresh walk refills with the current generation.
        s.device_send_dma(DEV0, RwOp::Read, DATA_IPA, 16, true, None, Vec::new()).unwrap();
        let entry = s.state.smmu.tlb[&(sid, DATA_IPA)];
        assert_eq!(entry.generation, s.state.mem.generation);
        assert_eq!(entry.pa, pa);
    }

    #[test]
    fn table_writes_are_root_only() {
        let mut s = build_base(Default::default(), false, BaseOptions::default());
        let hyp = AccessorCtx::hypervisor();
        assert_eq!(
            s.s2_write(DEV1.stream_id(), DATA_IPA, FREE_PA, hyp),
            Err(SimError::NotRoot)
        );
        assert_eq!(
            s.ste_write(
                DEV1.stream_id(),
                Ste { valid: true, world: World::Normal, ats_enabled: false },
                hyp
            ),
            Err(SimError::NotRoot)
        );
        // Equivalently, a direct store to the table granules faults.
        let table_pa = PhysAddr::from_granule_index(s.state.cfg.smmu_table_granules()[0]);
        assert_eq!(s.mem_write(hyp, table_pa, &[0]), Err(SimError::GpcDenied));
    }

    #[test]
    fn writes_invalidate_then_next_walk_sees_new_mapping() {
        let mut s = build_base(Default::default(), false, BaseOptions::default());
        let sid = DEV1.stream_id();
        s.smc_smmu_request(crate::monitor::SmmuHypRequest::S2Map {
            sid,
            ipa: DATA_IPA,
            pa: FREE_PA,
        })
        .unwrap();
        s.device_send_dma(DEV1, RwOp::Read, DATA_IPA, 16, false, None, Vec::new()).unwrap();
        assert_eq!(s.state.smmu.tlb[&(sid, DATA_IPA)].pa, FREE_PA);
        // Remap through the sanctioned interface; the stale entry is gone
        // and the next walk uses the new target.
        s.smc_smmu_request(crate::monitor::SmmuHypRequest::S2Unmap { sid, ipa: DATA_IPA })
            .unwrap();
        assert!(!s.state.smmu.tlb.contains_key(&(sid, DATA_IPA)));
        s.smc_smmu_request(crate::monitor::SmmuHypRequest::S2Map {
            sid,
            ipa: DATA_IPA,
            pa: STAGING_PA,
        })
        .unwrap();
        s.device_send_dma(DEV1, RwOp::Read, DATA_IPA, 16, false, None, Vec::new()).unwrap();
        assert_eq!(s.state.smmu.tlb[&(sid, DATA_IPA)].pa, STAGING_PA);
    }
}
