// SPDX-License-Identifier: Apache-2.0

//! Root-world firmware: sole owner of the protection table, the SMMU data
//! structures, the realm-device registry, and link-key programming.
//!
//! The attach path follows a strict order: lock the stream table, probe the
//! bus, reset the device, program the link key, and only then read the
//! configuration and collect the attestation report. Key-before-read closes
//! the window where a swapped device could answer with stale identity.
//! Attach is all-or-nothing; any failure past the lock rolls back every
//! side effect including the key.

use crate::canon::Canon;
use crate::error::{SimError, SimResult};
use crate::events::Event;
use crate::kernel::Sim;
use crate::pcie::DeviceReport;
use crate::smmu::{SmmuField, Ste};
use crate::types::*;
use std::collections::{BTreeMap, BTreeSet};

#[derive(Clone, Debug)]
pub struct RegistryEntry {
    pub vmid: Vmid,
    pub rid: Rid,
    pub config_space_pa: PhysAddr,
    /// Declared BAR regions as (guest base address, size in bytes).
    pub bar_regions: Vec<(Ipa, u64)>,
    /// Report collected during attach; the realm manager folds it into the
    /// realm's attestation.
    pub report: DeviceReport,
}

impl RegistryEntry {
    /// The monitor's per-device identity state packs into one 64-bit word:
    /// stream id, requester id, owner VM, and a validity flag.
    pub fn id_word(&self, sid: StreamId) -> [u8; 8] {
        let mut w = [0u8; 8];
        w[0..2].copy_from_slice(&(sid.0 as u16).to_le_bytes());
        w[2..4].copy_from_slice(&(self.rid.0 as u16).to_le_bytes());
        w[4..6].copy_from_slice(&(self.vmid.0 as u16).to_le_bytes());
        w[6..8].copy_from_slice(&1u16.to_le_bytes());
        w
    }

    pub fn canonize(&self, c: &mut Canon) {
        c.u32(self.vmid.0);
        c.u32(self.rid.0);
        c.u64(self.config_space_pa.0);
        c.u64(self.bar_regions.len() as u64);
        for (ipa, size) in &self.bar_regions {
            c.u64(ipa.0);
            c.u64(*size);
        }
        self.report.canonize(c);
    }
}

#[derive(Clone, Debug, Default)]
pub struct MonitorState {
    pub registry: BTreeMap<StreamId, RegistryEntry>,
    pub allow_list: BTreeSet<SmmuField>,
    pub booted: bool,
    pub stream_table_locked: bool,
}

impl MonitorState {
    pub fn vmid_of(&self, sid: StreamId) -> Option<Vmid> {
        self.registry.get(&sid).map(|e| e.vmid)
    }

    pub fn entry_for_vmid(&self, vmid: Vmid) -> Option<(StreamId, &RegistryEntry)> {
        self.registry
            .iter()
            .find(|(_, e)| e.vmid == vmid)
            .map(|(s, e)| (*s, e))
    }

    pub fn canonize(&self, c: &mut Canon) {
        c.u64(self.registry.len() as u64);
        for (sid, entry) in &self.registry {
            c.u32(sid.0);
            entry.canonize(c);
        }
        c.bool(self.booted);
        c.bool(self.stream_table_locked);
    }
}

/// Hypervisor requests against the SMMU, mediated by the monitor.
#[derive(Clone, Debug, PartialEq)]
pub enum SmmuHypRequest {
    S2Map { sid: StreamId, ipa: Ipa, pa: PhysAddr },
    S2Unmap { sid: StreamId, ipa: Ipa },
    ConfigWrite { field: SmmuField, value: u64 },
    AtsEnable { sid: StreamId },
}

pub(crate) struct AttachArgs {
    pub vmid: Vmid,
    pub bus: BusAddr,
    pub config_space_pa: PhysAddr,
    pub bar_regions: Vec<(Ipa, u64)>,
}

impl Sim {
    /// One-time root setup: move the SMMU data structures to root world,
    /// turn stage-2 enforcement on, and install the configuration
    /// allow-list. Idempotent.
    pub fn boot_init(&mut self) {
        if self.state.monitor.booted {
            return;
        }
        let monitor = AccessorCtx::monitor();
        let st = self.state.cfg.stream_table_granule();
        let tables = self.state.cfg.smmu_table_granules();
        for idx in [st, tables[0], tables[1]] {
            self.gpt_set_world(PhysAddr::from_granule_index(idx), World::Root, monitor)
                .expect("reserved granules are in range");
        }
        self.state.monitor.allow_list = [
            SmmuField::EventQueueThreshold,
            SmmuField::NonRealmStage2Base,
            SmmuField::FaultRecordConfig,
        ]
        .into_iter()
        .collect();
        self.state.smmu.config.insert(SmmuField::SmmuEnable, 1);
        self.state.smmu.config.insert(SmmuField::Stage2Bypass, 0);
        self.state.smmu.config.insert(SmmuField::AtsGlobalEnable, 0);
        self.state.monitor.booted = true;
    }

    /// Attach a device to a realm VM. Called by the realm manager during
    /// realm creation. Returns the device report on success.
    pub(crate) fn smc_device_attach(&mut self, args: AttachArgs) -> SimResult<DeviceReport> {
        self.events.push(Event::InterfaceCall {
            name: "smc_device_attach",
            vmid: Some(args.vmid),
        });
        assert!(!self.state.monitor.stream_table_locked, "attach re-entered");
        self.state.monitor.stream_table_locked = true;
        self.events.push(Event::StreamTableLocked);

        let result = self.attach_locked(&args);

        self.state.monitor.stream_table_locked = false;
        self.events.push(Event::StreamTableUnlocked);
        result
    }

    fn attach_locked(&mut self, args: &AttachArgs) -> SimResult<DeviceReport> {
        // Re-scan the bus for the device and derive its identities.
        let dev = self
            .state
            .pcie
            .devices
            .get(&args.bus)
            .ok_or(SimError::DeviceNotFound)?;
        let sid = args.bus.stream_id();
        let rid = dev.rid;

        if self.state.monitor.registry.contains_key(&sid)
            && !self.state.cfg.knobs.skip_stream_taken_check
        {
            return Err(SimError::StreamIdTaken);
        }
        if self.state.monitor.entry_for_vmid(args.vmid).is_some() {
            return Err(SimError::VmAlreadyHasDevice);
        }

        self.device_reset(args.bus)?;

        let mut key_programmed = false;
        let result = (|| -> SimResult<DeviceReport> {
            self.ide_program_key(rid, AccessorCtx::monitor())?;
            key_programmed = true;

            // Attestation blocks this call until the report is back.
            let report = match self.spdm_attest(args.bus) {
                Ok(r) => r,
                Err(SimError::AttestFailed) if self.state.cfg.knobs.skip_attest_check => {
                    // Enforcement disabled: record whatever the endpoint
                    // claims, with no valid signature behind it.
                    let dev = &self.state.pcie.devices[&args.bus];
                    DeviceReport {
                        rid,
                        firmware_digest: dev.firmware_digest,
                        config_digest: dev.config_space.digest(),
                        debug_disabled: dev.debug_disabled,
                        signature: Digest::ZERO,
                    }
                }
                Err(e) => return Err(e),
            };

            let config = match self.read_device_config(args.bus) {
                Ok(c) => c,
                Err(_) if self.state.cfg.knobs.skip_attest_check => {
                    vec![0u8; GRANULE_SIZE as usize]
                }
                Err(e) => return Err(e),
            };
            let owner_key = self.state.mem.mec_keys.get(&args.vmid).copied();
            let mut writer = AccessorCtx::monitor();
            writer.mec_key = owner_key;
            self.mem_write(writer, args.config_space_pa, &config)?;

            self.ste_write(
                sid,
                Ste {
                    valid: true,
                    world: World::Realm,
                    ats_enabled: false,
                },
                AccessorCtx::monitor(),
            )?;
            self.s2_clear_stream(sid);

            self.state.monitor.registry.insert(
                sid,
                RegistryEntry {
                    vmid: args.vmid,
                    rid,
                    config_space_pa: args.config_space_pa,
                    bar_regions: args.bar_regions.clone(),
                    report: report.clone(),
                },
            );
            Ok(report)
        })();

        if result.is_err() {
            // Roll back: no partial attach state survives a failure.
            if key_programmed {
                self.ide_erase_key(rid);
                if let Some(dev) = self.state.pcie.devices.get_mut(&args.bus) {
                    dev.link_key = None;
                }
            }
            if self.state.smmu.stes.contains_key(&sid)
                && !self.state.monitor.registry.contains_key(&sid)
            {
                let _ = self.ste_remove(sid, AccessorCtx::monitor());
            }
        }
        result
    }

    /// Detach the device bound to this realm: registry entry, stream table
    /// entry, stage-2 table, cached translations, and link key all go.
    pub(crate) fn smc_device_detach(&mut self, vmid: Vmid) -> SimResult<()> {
        self.events.push(Event::InterfaceCall {
            name: "smc_device_attach",
            vmid: Some(vmid),
        });
        let Some((sid, entry)) = self.state.monitor.entry_for_vmid(vmid) else {
            return Ok(());
        };
        let rid = entry.rid;
        self.state.monitor.registry.remove(&sid);
        self.ste_remove(sid, AccessorCtx::monitor())?;
        self.s2_clear_stream(sid);
        self.ide_erase_key(rid);
        Ok(())
    }

    /// Install one protected-region mapping for a realm device. The monitor
    /// re-checks everything from its own vantage point: the caller must be
    /// the realm manager, the pair must mirror the owner realm's stage-2
    /// entry, the granule must be realm world, and the reverse map must
    /// show no other device claim on the physical address.
    pub(crate) fn smc_delegate_prot_mem(
        &mut self,
        vmid: Vmid,
        sid: StreamId,
        ipa: Ipa,
        pa: PhysAddr,
        from_rmm: bool,
    ) -> SimResult<()> {
        self.events.push(Event::InterfaceCall {
            name: "smc_delegate_prot_mem",
            vmid: Some(vmid),
        });
        let entry = self
            .state
            .monitor
            .registry
            .get(&sid)
            .ok_or(SimError::NotOwner)?;
        if entry.vmid != vmid {
            return Err(SimError::NotOwner);
        }
        let idx = self.pa_index(pa)?;
        if self.state.mem.worlds[idx] != World::Realm {
            return Err(SimError::WrongWorld);
        }
        if !self.state.cfg.knobs.skip_reverse_map_check {
            if self.state.rmm.reverse[idx].smmu_owner.is_some() {
                return Err(SimError::PaOwnedByOtherDevice);
            }
        }
        if self
            .state
            .smmu
            .s2
            .get(&sid)
            .is_some_and(|t| t.contains_key(&ipa))
        {
            return Err(SimError::IpaInUse);
        }
        if !self.state.cfg.knobs.skip_mirror_check {
            if !from_rmm {
                return Err(SimError::NotRmm);
            }
            let mirrored = self
                .state
                .rmm
                .realms
                .get(&vmid)
                .and_then(|r| r.stage2.get(&ipa))
                .is_some_and(|&mapped| mapped == pa);
            if !mirrored {
                return Err(SimError::NotOwner);
            }
        }
        self.s2_write(sid, ipa, pa, AccessorCtx::monitor())?;
        self.state.rmm.reverse[idx].smmu_owner = Some(sid);
        Ok(())
    }

    pub(crate) fn smc_remove_prot_mem(&mut self, sid: StreamId, ipa: Ipa) {
        if let Some(pa) = self.state.smmu.mapping(sid, ipa) {
            let _ = self.s2_remove(sid, ipa, AccessorCtx::monitor());
            let slot = &mut self.state.rmm.reverse[pa.granule_index()];
            if slot.smmu_owner == Some(sid) {
                slot.smmu_owner = None;
            }
        }
    }

    /// The hypervisor's only path to the SMMU. Stream and table writes are
    /// allowed for non-realm streams only; configuration writes only for
    /// allow-listed fields; translation-service enablement never.
    pub fn smc_smmu_request(&mut self, req: SmmuHypRequest) -> SimResult<()> {
        self.events.push(Event::InterfaceCall {
            name: "smc_smmu_request",
            vmid: None,
        });
        let outcome = self.smmu_request_inner(&req);
        self.events.push(Event::HypSmmuRequest {
            desc: format!("{req:?}"),
            allowed: outcome.is_ok(),
        });
        outcome
    }

    fn smmu_request_inner(&mut self, req: &SmmuHypRequest) -> SimResult<()> {
        match *req {
            SmmuHypRequest::S2Map { sid, ipa, pa } => {
                if self.state.monitor.registry.contains_key(&sid) {
                    return Err(SimError::RealmStreamDenied);
                }
                let idx = self.pa_index(pa)?;
                if !self.state.cfg.knobs.skip_reverse_map_check {
                    if self.state.rmm.reverse[idx].smmu_owner.is_some() {
                        return Err(SimError::PaOwnedByOtherDevice);
                    }
                }
                if self
                    .state
                    .smmu
                    .s2
                    .get(&sid)
                    .is_some_and(|t| t.contains_key(&ipa))
                {
                    return Err(SimError::IpaInUse);
                }
                if !self.state.smmu.stes.contains_key(&sid) {
                    self.ste_write(
                        sid,
                        Ste {
                            valid: true,
                            world: World::Normal,
                            ats_enabled: false,
                        },
                        AccessorCtx::monitor(),
                    )?;
                }
                self.s2_write(sid, ipa, pa, AccessorCtx::monitor())?;
                self.state.rmm.reverse[idx].smmu_owner = Some(sid);
                Ok(())
            }
            SmmuHypRequest::S2Unmap { sid, ipa } => {
                if self.state.monitor.registry.contains_key(&sid) {
                    return Err(SimError::RealmStreamDenied);
                }
                self.smc_remove_prot_mem(sid, ipa);
                Ok(())
            }
            SmmuHypRequest::ConfigWrite { field, value } => {
                if field == SmmuField::AtsGlobalEnable {
                    return Err(SimError::AtsDenied);
                }
                if !self.state.monitor.allow_list.contains(&field) {
                    return Err(SimError::FieldDenied);
                }
                self.state.smmu.config.insert(field, value);
                Ok(())
            }
            SmmuHypRequest::AtsEnable { .. } => Err(SimError::AtsDenied),
        }
    }
}
