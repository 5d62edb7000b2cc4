// SPDX-License-Identifier: Apache-2.0

//! Trusted realm manager: realm VM lifecycle, stage-2 translation with the
//! reverse ownership map, the measurement chain, and attestation.
//!
//! The measurement is a digest chain: rim' = H(rim || entry), with entries
//! serialized as fixed-width little-endian fields in declaration order.
//! Identical build sequences therefore produce bit-identical measurements.

use crate::canon::Canon;
use crate::error::{SimError, SimResult};
use crate::events::Event;
use crate::kernel::Sim;
use crate::memory::ReadOutcome;
use crate::monitor::AttachArgs;
use crate::pcie::DeviceReport;
use crate::types::*;
use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize)]
pub enum RealmState {
    New,
    Active,
    Destroyed,
}

/// Attach progress for a realm. A failed attach aborts realm creation: the
/// realm can never activate and only destruction remains.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AttachState {
    NotRequested,
    Attached(StreamId),
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DataLogEntry {
    pub ipa: Ipa,
    pub content: Digest,
    pub attach_dev: bool,
}

#[derive(Clone, Debug)]
pub struct RealmVm {
    pub vmid: Vmid,
    pub name: String,
    pub state: RealmState,
    pub stage2: BTreeMap<Ipa, PhysAddr>,
    /// Running measurement; append-only while New, frozen at activation.
    pub measurement: Digest,
    pub data_log: Vec<DataLogEntry>,
    pub attach: AttachState,
    pub device_report: Option<DeviceReport>,
    /// Declared BAR regions, (guest base, size in bytes).
    pub bar_layout: Vec<(Ipa, u64)>,
}

impl RealmVm {
    fn extend_measurement(&mut self, entry: &DataLogEntry) {
        let mut c = Canon::new("rim-entry");
        c.digest(&self.measurement);
        c.u64(entry.ipa.0);
        c.digest(&entry.content);
        c.bool(entry.attach_dev);
        self.measurement = c.finish();
        self.data_log.push(entry.clone());
    }

    pub fn canonize(&self, c: &mut Canon) {
        c.u32(self.vmid.0);
        c.bytes(self.name.as_bytes());
        c.u8(match self.state {
            RealmState::New => 0,
            RealmState::Active => 1,
            RealmState::Destroyed => 2,
        });
        c.u64(self.stage2.len() as u64);
        for (ipa, pa) in &self.stage2 {
            c.u64(ipa.0);
            c.u64(pa.0);
        }
        c.digest(&self.measurement);
        match self.attach {
            AttachState::NotRequested => c.u8(0),
            AttachState::Attached(sid) => {
                c.u8(1);
                c.u32(sid.0);
            }
            AttachState::Failed => c.u8(2),
        }
        c.u64(self.bar_layout.len() as u64);
        for (ipa, size) in &self.bar_layout {
            c.u64(ipa.0);
            c.u64(*size);
        }
    }
}

/// Per-granule ownership, kept consistent with the union of all realm
/// stage-2 maps and all SMMU stage-2 maps.
#[derive(Clone, Copy, Default, Debug, PartialEq, Eq)]
pub struct PaSlot {
    pub realm_owner: Option<Vmid>,
    pub smmu_owner: Option<StreamId>,
}

#[derive(Clone, Debug)]
pub struct RmmState {
    pub realms: BTreeMap<Vmid, RealmVm>,
    pub reverse: Vec<PaSlot>,
    pub next_vmid: u32,
}

impl RmmState {
    pub fn new(total_granules: usize) -> Self {
        RmmState {
            realms: BTreeMap::new(),
            reverse: vec![PaSlot::default(); total_granules],
            next_vmid: 0,
        }
    }

    pub fn realm_by_name(&self, name: &str) -> Option<&RealmVm> {
        self.realms
            .values()
            .find(|r| r.name == name && r.state != RealmState::Destroyed)
            .or_else(|| self.realms.values().find(|r| r.name == name))
    }

    pub fn canonize(&self, c: &mut Canon, with_counters: bool) {
        c.u64(self.realms.len() as u64);
        for realm in self.realms.values() {
            realm.canonize(c);
        }
        for slot in &self.reverse {
            c.opt_u64(slot.realm_owner.map(|v| v.0 as u64));
            c.opt_u64(slot.smmu_owner.map(|s| s.0 as u64));
        }
        if with_counters {
            c.u32(self.next_vmid);
        }
    }
}

/// Device parameters the hypervisor supplies alongside the config-space
/// image when it requests an attach.
#[derive(Clone, Debug, PartialEq)]
pub struct AttachParams {
    pub bus: BusAddr,
    /// Declared BAR regions, (guest base address, size in granules).
    pub bars: Vec<(Ipa, u64)>,
}

/// The combined realm-plus-device attestation evidence.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttestationReport {
    pub realm_measurement: Digest,
    pub data_log: Vec<DataLogEntry>,
    pub device_section: Option<DeviceReport>,
    pub bar_layout: Vec<(Ipa, u64)>,
}

impl Sim {
    fn realm_mut(&mut self, vmid: Vmid) -> SimResult<&mut RealmVm> {
        match self.state.rmm.realms.get_mut(&vmid) {
            Some(r) if r.state != RealmState::Destroyed => Ok(r),
            _ => Err(SimError::UnknownVm),
        }
    }

    /// Create a realm VM in state New with a fresh id and encryption key.
    pub fn rmi_realm_create(&mut self, name: &str) -> SimResult<Vmid> {
        self.events.push(Event::InterfaceCall {
            name: "rmi_realm_create",
            vmid: None,
        });
        let live = self
            .state
            .rmm
            .realms
            .values()
            .filter(|r| r.state != RealmState::Destroyed);
        if live.clone().count() >= self.state.cfg.max_realms {
            return Err(SimError::ResourceExhausted);
        }
        if live.clone().any(|r| r.name == name) {
            return Err(SimError::ResourceExhausted);
        }
        let vmid = Vmid(self.state.rmm.next_vmid);
        self.state.rmm.next_vmid += 1;
        let mec_key = self.fresh_key();
        self.state.mem.mec_keys.insert(vmid, mec_key);
        self.state.rmm.realms.insert(
            vmid,
            RealmVm {
                vmid,
                name: name.to_string(),
                state: RealmState::New,
                stage2: BTreeMap::new(),
                measurement: Digest::ZERO,
                data_log: Vec::new(),
                attach: AttachState::NotRequested,
                device_report: None,
                bar_layout: Vec::new(),
            },
        );
        Ok(vmid)
    }

    /// Move one granule from normal to realm world. The monitor scrubs it
    /// on the way.
    pub fn rmi_granule_delegate(&mut self, pa: PhysAddr) -> SimResult<()> {
        self.events.push(Event::InterfaceCall {
            name: "rmi_granule_delegate",
            vmid: None,
        });
        let idx = self.pa_index(pa)?;
        if self.state.mem.worlds[idx] != World::Normal {
            return Err(SimError::WrongWorld);
        }
        let slot = self.state.rmm.reverse[idx];
        if slot.realm_owner.is_some() || slot.smmu_owner.is_some() {
            return Err(SimError::StillMapped);
        }
        let monitor = AccessorCtx::monitor();
        self.scrub(pa, monitor)?;
        self.gpt_set_world(pa, World::Realm, monitor)
    }

    /// Return one realm granule to the normal world. Refused while any
    /// stage-2 table, host- or device-side, still maps it.
    pub fn rmi_granule_undelegate(&mut self, pa: PhysAddr) -> SimResult<()> {
        self.events.push(Event::InterfaceCall {
            name: "rmi_granule_undelegate",
            vmid: None,
        });
        let idx = self.pa_index(pa)?;
        if self.state.mem.worlds[idx] != World::Realm {
            return Err(SimError::WrongWorld);
        }
        let slot = self.state.rmm.reverse[idx];
        if slot.realm_owner.is_some() || slot.smmu_owner.is_some() {
            return Err(SimError::StillMapped);
        }
        let monitor = AccessorCtx::monitor();
        self.scrub(pa, monitor)?;
        self.gpt_set_world(pa, World::Normal, monitor)
    }

    /// Copy one granule of data into a realm and map it. With the attach
    /// flag, also validate the device parameters and pull the device in via
    /// the monitor; a failure there aborts realm creation.
    pub fn rmi_data_create(
        &mut self,
        vmid: Vmid,
        src: PhysAddr,
        dst: PhysAddr,
        ipa: Ipa,
        attach: Option<AttachParams>,
    ) -> SimResult<()> {
        self.events.push(Event::InterfaceCall {
            name: "rmi_data_create",
            vmid: Some(vmid),
        });
        let realm = self.realm_mut(vmid)?;
        match realm.state {
            RealmState::New => {}
            RealmState::Active => return Err(SimError::RealmActive),
            RealmState::Destroyed => unreachable!(),
        }
        if realm.attach == AttachState::Failed {
            return Err(SimError::AttachIncomplete);
        }
        if attach.is_some() {
            match realm.attach {
                AttachState::NotRequested => {}
                AttachState::Attached(_) => return Err(SimError::VmAlreadyHasDevice),
                AttachState::Failed => return Err(SimError::AttachIncomplete),
            }
        }
        if !ipa.is_granule_aligned() {
            return Err(SimError::OutOfRange);
        }
        let src_idx = self.pa_index(src)?;
        let dst_idx = self.pa_index(dst)?;
        if self.state.mem.worlds[src_idx] != World::Normal {
            return Err(SimError::WrongWorld);
        }
        if self.state.mem.worlds[dst_idx] != World::Realm {
            return Err(if attach.is_some() {
                SimError::ConfigNotRealm
            } else {
                SimError::WrongWorld
            });
        }
        if self.state.rmm.reverse[dst_idx].realm_owner.is_some()
            && !self.state.cfg.knobs.skip_double_map_check
        {
            return Err(SimError::DoubleMap);
        }
        if self.state.rmm.realms[&vmid].stage2.contains_key(&ipa) {
            return Err(SimError::IpaInUse);
        }

        // Copy source to destination and extend the measurement.
        let bytes = self.state.mem.granules[src_idx].read(0, GRANULE_SIZE as usize);
        let owner_key = self.state.mem.mec_keys.get(&vmid).copied();
        let mut writer = AccessorCtx::monitor();
        writer.mec_key = owner_key;
        self.mem_write(writer, dst, &bytes)?;

        let content = match &attach {
            None => sha256(&[&bytes]),
            Some(params) => {
                // Attach entries bind the device parameters into the
                // measured content: bus address and declared BAR sizes.
                let mut c = Canon::new("attach-entry");
                c.bytes(&bytes);
                c.u16(params.bus.0);
                c.u64(params.bars.len() as u64);
                for (base, granules) in &params.bars {
                    c.u64(base.0);
                    c.u64(*granules);
                }
                c.finish()
            }
        };
        let realm = self.state.rmm.realms.get_mut(&vmid).unwrap();
        realm.stage2.insert(ipa, dst);
        realm.extend_measurement(&DataLogEntry {
            ipa,
            content,
            attach_dev: attach.is_some(),
        });
        self.state.rmm.reverse[dst_idx].realm_owner = Some(vmid);

        if let Some(params) = attach {
            if let Err(e) = self.attach_device(vmid, dst, ipa, &params) {
                // Abort realm creation: undo this call's effects and mark
                // the realm unfinishable.
                let realm = self.state.rmm.realms.get_mut(&vmid).unwrap();
                realm.stage2.remove(&ipa);
                realm.data_log.pop();
                realm.measurement = recompute_measurement(&realm.data_log);
                realm.attach = AttachState::Failed;
                self.state.rmm.reverse[dst_idx].realm_owner = None;
                let monitor = AccessorCtx::monitor();
                self.scrub(dst, monitor)?;
                self.events.push(Event::RealmAborted { vmid });
                return Err(e);
            }
        } else if self.state.cfg.opt {
            // Pre-mapping mode: memory added to a device-attached realm is
            // immediately visible to the device.
            if let AttachState::Attached(sid) = self.state.rmm.realms[&vmid].attach {
                self.smc_delegate_prot_mem(vmid, sid, ipa, dst, true)?;
            }
        }
        Ok(())
    }

    fn attach_device(
        &mut self,
        vmid: Vmid,
        config_dst: PhysAddr,
        config_ipa: Ipa,
        params: &AttachParams,
    ) -> SimResult<()> {
        // The config-space mapping this very call created must be valid and
        // realm-world; checked above. Every declared BAR region must
        // already be fully mapped to this realm.
        if !self.state.cfg.knobs.skip_bar_mapped_check {
            let realm = &self.state.rmm.realms[&vmid];
            for &(base, granules) in &params.bars {
                for g in 0..granules {
                    let ipa = Ipa(base.0 + g * GRANULE_SIZE);
                    let Some(&pa) = realm.stage2.get(&ipa) else {
                        return Err(SimError::BarNotMapped);
                    };
                    if self.state.mem.world(pa) != World::Realm {
                        return Err(SimError::BarNotMapped);
                    }
                }
            }
        }
        let bar_regions: Vec<(Ipa, u64)> = params
            .bars
            .iter()
            .map(|&(base, granules)| (base, granules * GRANULE_SIZE))
            .collect();
        let report = self.smc_device_attach(AttachArgs {
            vmid,
            bus: params.bus,
            config_space_pa: config_dst,
            bar_regions: bar_regions.clone(),
        })?;
        let sid = params.bus.stream_id();
        let realm = self.state.rmm.realms.get_mut(&vmid).unwrap();
        realm.attach = AttachState::Attached(sid);
        realm.device_report = Some(report);
        realm.bar_layout = bar_regions;

        // The monitor rewrote the config granule; measurement already
        // covers the hypervisor-staged image, which attestation lets the
        // verifier cross-check against the device's own config digest.
        let _ = config_ipa;

        if self.state.cfg.opt {
            // Pre-map everything the realm has so far, config space
            // included, into the device's stage-2 table.
            let mappings: Vec<(Ipa, PhysAddr)> = self.state.rmm.realms[&vmid]
                .stage2
                .iter()
                .map(|(i, p)| (*i, *p))
                .collect();
            for (ipa, pa) in mappings {
                self.smc_delegate_prot_mem(vmid, sid, ipa, pa, true)?;
            }
        }
        Ok(())
    }

    /// Seal the realm: the measurement freezes and the VM may run.
    pub fn rmi_realm_activate(&mut self, vmid: Vmid) -> SimResult<()> {
        self.events.push(Event::InterfaceCall {
            name: "rmi_realm_activate",
            vmid: Some(vmid),
        });
        let realm = self.realm_mut(vmid)?;
        match realm.state {
            RealmState::Active => return Err(SimError::RealmActive),
            RealmState::New => {}
            RealmState::Destroyed => unreachable!(),
        }
        if realm.attach == AttachState::Failed {
            return Err(SimError::AttachIncomplete);
        }
        realm.state = RealmState::Active;
        Ok(())
    }

    /// The realm OS hands a scatter-gather list of its own guest addresses
    /// to the realm manager, which resolves every granule through its own
    /// stage-2 table and delegates the pairs to the monitor. All or
    /// nothing: a failed granule rolls back the ones before it.
    pub fn rsi_delegate_prot_mem(
        &mut self,
        vmid: Vmid,
        sg: &[(Ipa, u64)],
        device: StreamId,
    ) -> SimResult<()> {
        self.events.push(Event::InterfaceCall {
            name: "rsi_delegate_prot_mem",
            vmid: Some(vmid),
        });
        let realm = match self.state.rmm.realms.get(&vmid) {
            Some(r) if r.state != RealmState::Destroyed => r,
            _ => return Err(SimError::UnknownVm),
        };
        if realm.state != RealmState::Active {
            return Err(SimError::NotActive);
        }
        if realm.attach != AttachState::Attached(device) {
            return Err(SimError::NotOwner);
        }

        // Resolve phase: expand the list to granules and translate each
        // through this realm's stage-2 table.
        let mut pairs: Vec<(Ipa, PhysAddr)> = Vec::new();
        for &(ipa, size) in sg {
            if size == 0 || size % GRANULE_SIZE != 0 || !ipa.is_granule_aligned() {
                return Err(SimError::Unmapped);
            }
            for g in 0..size / GRANULE_SIZE {
                let gipa = Ipa(ipa.0 + g * GRANULE_SIZE);
                let Some(&pa) = realm.stage2.get(&gipa) else {
                    return Err(SimError::Unmapped);
                };
                pairs.push((gipa, pa));
            }
        }

        // Pre-mapped granules are a no-op under the pre-mapping
        // optimization.
        if self.state.cfg.opt {
            pairs.retain(|&(ipa, pa)| self.state.smmu.mapping(device, ipa) != Some(pa));
        }

        // Commit phase.
        let mut committed: Vec<Ipa> = Vec::new();
        for &(ipa, pa) in &pairs {
            match self.smc_delegate_prot_mem(vmid, device, ipa, pa, true) {
                Ok(()) => committed.push(ipa),
                Err(e) => {
                    for ipa in committed {
                        self.smc_remove_prot_mem(device, ipa);
                    }
                    return Err(e);
                }
            }
        }
        Ok(())
    }

    /// Tear a realm down: detach its device, scrub and undelegate all its
    /// granules, release its key, and clear every reference to it.
    pub fn rmi_realm_destroy(&mut self, vmid: Vmid) -> SimResult<()> {
        self.events.push(Event::InterfaceCall {
            name: "rmi_realm_destroy",
            vmid: Some(vmid),
        });
        let realm = self.realm_mut(vmid)?;
        let pas: Vec<PhysAddr> = realm.stage2.values().copied().collect();
        realm.stage2.clear();
        realm.data_log.clear();
        realm.device_report = None;
        realm.state = RealmState::Destroyed;

        self.smc_device_detach(vmid)?;

        let monitor = AccessorCtx::monitor();
        for pa in pas {
            let idx = pa.granule_index();
            self.state.rmm.reverse[idx].realm_owner = None;
            self.scrub(pa, monitor)?;
            self.gpt_set_world(pa, World::Normal, monitor)?;
        }
        self.state.mem.mec_keys.remove(&vmid);
        Ok(())
    }

    /// Assemble the attestation evidence for an active realm.
    pub fn attestation_report(&mut self, vmid: Vmid) -> SimResult<AttestationReport> {
        self.events.push(Event::InterfaceCall {
            name: "rsi_attestation_report",
            vmid: Some(vmid),
        });
        let realm = match self.state.rmm.realms.get(&vmid) {
            Some(r) if r.state != RealmState::Destroyed => r,
            _ => return Err(SimError::UnknownVm),
        };
        if realm.state != RealmState::Active {
            return Err(SimError::NotActive);
        }
        Ok(AttestationReport {
            realm_measurement: realm.measurement,
            data_log: realm.data_log.clone(),
            device_section: realm.device_report.clone(),
            bar_layout: realm.bar_layout.clone(),
        })
    }

    /// Read from a realm's own memory through its stage-2 table, as its
    /// guest code would.
    pub fn realm_mem_read(&mut self, vmid: Vmid, ipa: Ipa, len: usize) -> SimResult<ReadOutcome> {
        let realm = match self.state.rmm.realms.get(&vmid) {
            Some(r) if r.state == RealmState::Active => r,
            Some(_) => return Err(SimError::NotActive),
            None => return Err(SimError::UnknownVm),
        };
        let base = ipa.granule_base();
        let Some(&pa) = realm.stage2.get(&base) else {
            return Err(SimError::TranslationFault);
        };
        let key = self.state.mem.mec_keys[&vmid];
        self.mem_read(
            AccessorCtx::realm_core(vmid, key),
            PhysAddr(pa.0 + ipa.offset_in_granule()),
            len,
        )
    }

    /// Write to a realm's own memory through its stage-2 table.
    pub fn realm_mem_write(&mut self, vmid: Vmid, ipa: Ipa, data: &[u8]) -> SimResult<()> {
        let realm = match self.state.rmm.realms.get(&vmid) {
            Some(r) if r.state == RealmState::Active => r,
            Some(_) => return Err(SimError::NotActive),
            None => return Err(SimError::UnknownVm),
        };
        let base = ipa.granule_base();
        let Some(&pa) = realm.stage2.get(&base) else {
            return Err(SimError::TranslationFault);
        };
        let key = self.state.mem.mec_keys[&vmid];
        self.mem_write(
            AccessorCtx::realm_core(vmid, key),
            PhysAddr(pa.0 + ipa.offset_in_granule()),
            data,
        )
    }
}

fn recompute_measurement(log: &[DataLogEntry]) -> Digest {
    let mut rim = Digest::ZERO;
    for entry in log {
        let mut c = Canon::new("rim-entry");
        c.digest(&rim);
        c.u64(entry.ipa.0);
        c.digest(&entry.content);
        c.bool(entry.attach_dev);
        rim = c.finish();
    }
    rim
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Knobs;
    use crate::policy::{verify_report, Policy, VerifyFailReason};
    use crate::setup::*;

    fn sim() -> Sim {
        Sim::new(small_config(Default::default(), false))
    }

    #[test]
    fn realm_create_allocates_fresh_ids() {
        let mut s = sim();
        assert_eq!(s.rmi_realm_create("a").unwrap(), Vmid(0));
        assert_eq!(s.state.rmm.realms[&Vmid(0)].state, RealmState::New);
        assert_eq!(s.rmi_realm_create("b").unwrap(), Vmid(1));
        // Same descriptor while the first is live.
        assert_eq!(s.rmi_realm_create("a"), Err(SimError::ResourceExhausted));
        // Bounded by configuration.
        assert_eq!(s.rmi_realm_create("c"), Err(SimError::ResourceExhausted));
    }

    #[test]
    fn delegate_moves_normal_to_realm_scrubbed() {
        let mut s = sim();
        let pa = FREE_PA;
        s.rmi_granule_delegate(pa).unwrap();
        assert_eq!(s.state.mem.world(pa), World::Realm);
        assert!(s.state.mem.granules[pa.granule_index()].is_zeroed());
        assert_eq!(s.rmi_granule_delegate(pa), Err(SimError::WrongWorld));
    }

    #[test]
    fn delegate_refuses_mapped_granules() {
        let mut s = build_base(Default::default(), false, BaseOptions::default());
        assert_eq!(s.rmi_granule_undelegate(R0_DATA_PA), Err(SimError::StillMapped));
        // A normal granule mapped into a device's table is pinned too.
        s.apply(&crate::kernel::Action::HvS2Map {
            sid: DEV1.stream_id(),
            ipa: DATA_IPA,
            pa: FREE_PA,
        })
        .unwrap();
        assert_eq!(s.rmi_granule_delegate(FREE_PA), Err(SimError::StillMapped));
    }

    // Replay of the data-create validity rules by hand: the mapping and
    // the measurement entry land exactly as specified.
    #[test]
    fn data_create_maps_and_measures() {
        let mut s = sim();
        let vmid = s.rmi_realm_create("r0").unwrap();
        s.rmi_granule_delegate(R0_DATA_PA).unwrap();
        let rim_before = s.state.rmm.realms[&vmid].measurement;
        s.rmi_data_create(vmid, STAGING_PA, R0_DATA_PA, DATA_IPA, None).unwrap();
        let realm = &s.state.rmm.realms[&vmid];
        assert_eq!(realm.stage2.get(&DATA_IPA), Some(&R0_DATA_PA));
        assert_eq!(realm.data_log.len(), 1);
        assert_ne!(realm.measurement, rim_before);
        // The copied bytes are the staged pattern, readable by the realm.
        assert_eq!(
            s.state.mem.granules[R0_DATA_PA.granule_index()].read(0, 4),
            vec![0x11; 4]
        );
        // Destination granule now carries the realm's encryption tag.
        let key = s.state.mem.mec_keys[&vmid];
        assert_eq!(s.state.mem.granules[R0_DATA_PA.granule_index()].mec_key, Some(key));
    }

    #[test]
    fn data_create_rejects_double_maps_and_reused_ipas() {
        let mut s = sim();
        let v0 = s.rmi_realm_create("r0").unwrap();
        let v1 = s.rmi_realm_create("r1").unwrap();
        s.rmi_granule_delegate(R0_DATA_PA).unwrap();
        s.rmi_granule_delegate(R1_DATA_PA).unwrap();
        s.rmi_data_create(v0, STAGING_PA, R0_DATA_PA, DATA_IPA, None).unwrap();
        assert_eq!(
            s.rmi_data_create(v1, STAGING_PA, R0_DATA_PA, DATA_IPA, None),
            Err(SimError::DoubleMap)
        );
        assert_eq!(
            s.rmi_data_create(v0, STAGING_PA, R1_DATA_PA, DATA_IPA, None),
            Err(SimError::IpaInUse)
        );
        // Source must be normal world, destination realm world.
        assert_eq!(
            s.rmi_data_create(v1, R0_DATA_PA, R1_DATA_PA, DATA2_IPA, None),
            Err(SimError::WrongWorld)
        );
        assert_eq!(
            s.rmi_data_create(v1, STAGING_PA, FREE_PA, DATA2_IPA, None),
            Err(SimError::WrongWorld)
        );
    }

    #[test]
    fn attach_requires_fully_mapped_bars() {
        let mut s = sim();
        let vmid = s.rmi_realm_create("r0").unwrap();
        for pa in [R0_DATA_PA, R0_BAR_PA, R0_CFG_PA] {
            s.rmi_granule_delegate(pa).unwrap();
        }
        s.rmi_data_create(vmid, STAGING_PA, R0_BAR_PA, BAR_IPA, None).unwrap();
        // Declares a two-granule BAR with only one granule mapped.
        let err = s.rmi_data_create(
            vmid,
            STAGING_PA,
            R0_CFG_PA,
            CFG_IPA,
            Some(AttachParams { bus: DEV0, bars: vec![(BAR_IPA, 2)] }),
        );
        assert_eq!(err, Err(SimError::BarNotMapped));
        // The failed attach aborted realm creation.
        assert_eq!(s.state.rmm.realms[&vmid].attach, AttachState::Failed);
        assert_eq!(s.rmi_realm_activate(vmid), Err(SimError::AttachIncomplete));
    }

    #[test]
    fn activate_freezes_the_measurement() {
        let mut s = sim();
        let vmid = s.rmi_realm_create("r0").unwrap();
        s.rmi_granule_delegate(R0_DATA_PA).unwrap();
        s.rmi_granule_delegate(R1_DATA_PA).unwrap();
        s.rmi_data_create(vmid, STAGING_PA, R0_DATA_PA, DATA_IPA, None).unwrap();
        s.rmi_realm_activate(vmid).unwrap();
        assert_eq!(s.state.rmm.realms[&vmid].state, RealmState::Active);
        assert_eq!(
            s.rmi_data_create(vmid, STAGING_PA, R1_DATA_PA, DATA2_IPA, None),
            Err(SimError::RealmActive)
        );
        assert_eq!(s.rmi_realm_activate(vmid), Err(SimError::RealmActive));
    }

    // Independent expansion oracle for scatter-gather lists.
    fn expand_sg_oracle(sg: &[(Ipa, u64)]) -> Vec<Ipa> {
        let mut out = Vec::new();
        for &(ipa, size) in sg {
            let mut off = 0;
            while off < size {
                out.push(Ipa(ipa.0 + off));
                off += GRANULE_SIZE;
            }
        }
        out
    }

    #[test]
    fn prot_mem_expands_per_granule() {
        let mut s = build_base(Default::default(), false, BaseOptions::default());
        let sid = DEV0.stream_id();
        let sg = vec![(DATA_IPA, GRANULE_SIZE), (BAR_IPA, GRANULE_SIZE)];
        s.rsi_delegate_prot_mem(Vmid(0), &sg, sid).unwrap();
        let expected = expand_sg_oracle(&sg);
        let table = &s.state.smmu.s2[&sid];
        assert_eq!(table.len(), expected.len());
        for ipa in expected {
            let pa = s.state.rmm.realms[&Vmid(0)].stage2[&ipa];
            assert_eq!(table.get(&ipa), Some(&pa));
        }
    }

    #[test]
    fn prot_mem_is_atomic_and_owner_checked() {
        let mut s = build_base(Default::default(), false, BaseOptions::default());
        let sid = DEV0.stream_id();
        // One mapped entry followed by an unmapped one: nothing commits.
        let sg = vec![(DATA_IPA, GRANULE_SIZE), (DATA2_IPA, GRANULE_SIZE)];
        assert_eq!(
            s.rsi_delegate_prot_mem(Vmid(0), &sg, sid),
            Err(SimError::Unmapped)
        );
        assert!(s.state.smmu.s2.get(&sid).is_none());
        // Another realm's device.
        assert_eq!(
            s.rsi_delegate_prot_mem(Vmid(0), &[(DATA_IPA, GRANULE_SIZE)], DEV1.stream_id()),
            Err(SimError::NotOwner)
        );
    }

    // Composition of the detach and undelegate rules.
    #[test]
    fn destroy_detaches_scrubs_and_clears() {
        let mut s = build_base(
            Default::default(),
            false,
            BaseOptions { protmem_r0: true, ..Default::default() },
        );
        let sid = DEV0.stream_id();
        let pas: Vec<PhysAddr> =
            s.state.rmm.realms[&Vmid(0)].stage2.values().copied().collect();
        s.rmi_realm_destroy(Vmid(0)).unwrap();
        assert!(s.state.monitor.registry.get(&sid).is_none());
        assert!(s.state.smmu.stes.get(&sid).is_none());
        assert!(s.state.smmu.s2.get(&sid).is_none());
        assert!(s.state.pcie.root_keys.get(&DEV0.rid()).is_none());
        for pa in pas {
            assert_eq!(s.state.mem.world(pa), World::Normal);
            assert!(s.state.mem.granules[pa.granule_index()].is_zeroed());
        }
        assert_eq!(s.rmi_realm_destroy(Vmid(0)), Err(SimError::UnknownVm));
        // Old-identity realm traffic dies at the port (key erased), and
        // untagged traffic finds no stream table entry left.
        assert_eq!(
            s.device_send_dma(DEV0, RwOp::Read, DATA_IPA, 16, true, None, Vec::new())
                .unwrap_err(),
            SimError::DiscardedAtRootPort
        );
        assert_eq!(
            s.device_send_dma(DEV0, RwOp::Read, DATA_IPA, 16, false, None, Vec::new())
                .unwrap_err(),
            SimError::NoSte
        );
        let report = s.check_invariants();
        assert!(report.all_pass(), "{}", report.summary());
    }

    #[test]
    fn report_carries_the_device_section_and_bar_layout() {
        let mut s = build_base(
            Default::default(),
            false,
            BaseOptions { attach_r1: true, activate_r1: true, ..Default::default() },
        );
        let report = s.attestation_report(Vmid(0)).unwrap();
        let section = report.device_section.expect("attached realm has a section");
        assert_eq!(section.rid, DEV0.rid());
        assert!(section.verify_signature());
        assert_eq!(report.bar_layout, vec![(BAR_IPA, GRANULE_SIZE)]);
        // A deviceless realm reports no section.
        let mut s2 = Sim::new(small_config(Default::default(), false));
        let vmid = s2.rmi_realm_create("solo").unwrap();
        s2.rmi_realm_activate(vmid).unwrap();
        let solo = s2.attestation_report(vmid).unwrap();
        assert!(solo.device_section.is_none());
    }

    #[test]
    fn identical_sequences_measure_identically() {
        let build = || {
            let mut s = sim();
            let vmid = s.rmi_realm_create("twin").unwrap();
            s.rmi_granule_delegate(R0_DATA_PA).unwrap();
            s.rmi_data_create(vmid, STAGING_PA, R0_DATA_PA, DATA_IPA, None).unwrap();
            s.state.rmm.realms[&vmid].measurement
        };
        assert_eq!(build(), build());
        // Same contents at a different guest address measures differently.
        let mut s = sim();
        let vmid = s.rmi_realm_create("twin").unwrap();
        s.rmi_granule_delegate(R0_DATA_PA).unwrap();
        s.rmi_data_create(vmid, STAGING_PA, R0_DATA_PA, DATA2_IPA, None).unwrap();
        assert_ne!(s.state.rmm.realms[&vmid].measurement, build());
    }

    #[test]
    fn verify_passes_honest_attach_and_fails_tampered_ones() {
        let mut s = build_base(
            Default::default(),
            false,
            BaseOptions { activate_r1: false, ..Default::default() },
        );
        let report = s.attestation_report(Vmid(0)).unwrap();
        let fw = s.state.pcie.devices[&DEV0].firmware_digest;
        let policy = Policy {
            realm_measurement: Some(report.realm_measurement),
            firmware_digest: Some(fw),
            debug_disabled: true,
            bars: Some(vec![1]),
        };
        assert_eq!(verify_report(&report, &policy), Ok(()));
        // Wrong expected BAR sizes.
        let policy_bad_bars = Policy { bars: Some(vec![2, 1]), ..policy.clone() };
        assert_eq!(
            verify_report(&report, &policy_bad_bars),
            Err(VerifyFailReason::BarMismatch)
        );
        // Forged report body: the signature stops verifying.
        let mut forged = report.clone();
        forged.device_section.as_mut().unwrap().debug_disabled = false;
        let verdict = verify_report(&forged, &policy);
        assert_eq!(verdict, Err(VerifyFailReason::BadSignature));
    }

    #[test]
    fn emulated_attach_with_enforcement_off_fails_verification() {
        let knobs = Knobs { skip_attest_check: true, ..Default::default() };
        let mut s = Sim::new(small_config(knobs, false));
        let vmid = s.rmi_realm_create("r0").unwrap();
        for pa in [R0_DATA_PA, R0_BAR_PA, R0_CFG_PA] {
            s.rmi_granule_delegate(pa).unwrap();
        }
        s.rmi_data_create(vmid, STAGING_PA, R0_BAR_PA, BAR_IPA, None).unwrap();
        s.rmi_data_create(
            vmid,
            STAGING_PA,
            R0_CFG_PA,
            CFG_IPA,
            Some(AttachParams { bus: EMULATED, bars: vec![(BAR_IPA, 1)] }),
        )
        .unwrap();
        s.rmi_realm_activate(vmid).unwrap();
        let report = s.attestation_report(vmid).unwrap();
        let policy = Policy {
            firmware_digest: Some(report.device_section.as_ref().unwrap().firmware_digest),
            debug_disabled: true,
            bars: Some(vec![1]),
            ..Default::default()
        };
        assert_eq!(verify_report(&report, &policy), Err(VerifyFailReason::BadSignature));
    }
}
