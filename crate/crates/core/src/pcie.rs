// SPDX-License-Identifier: Apache-2.0

//! PCIe fabric: devices, root-port key store, the symbolic link-encryption
//! envelope, device attestation, and the DMA/MMIO transport.
//!
//! Link encryption is an envelope of (key id, sequence number) around the
//! payload. The root port accepts a tagged transaction only when the
//! envelope key matches its per-requester key store entry and the sequence
//! number is fresh, which is exactly the property the identity argument
//! rests on: a forged requester id or a replayed capture never decrypts.

use crate::canon::Canon;
use crate::config::{DeviceBehavior, DeviceSpec};
use crate::error::{SimError, SimResult};
use crate::events::Event;
use crate::kernel::Sim;
use crate::memory::{Blob, ReadOutcome};
use crate::types::*;
use serde::Serialize;
use std::collections::BTreeMap;

/// Signing context for genuine device reports. Emulated endpoints never get
/// a signature minted under it; the remote verifier recomputes it.
const MANUFACTURER_SEED: &[u8] = b"device-endorsement-v1";

pub const DEVICE_MEM_SIZE: usize = 4 * GRANULE_SIZE as usize;
pub const MAX_BARS: usize = 6;

/// Doorbell interface exposed in BAR0, all registers 8 bytes wide.
pub const REG_SRC_IPA: u64 = 0x00;
pub const REG_LEN: u64 = 0x08;
pub const REG_DST_IPA: u64 = 0x10;
pub const REG_DOORBELL: u64 = 0x18;
pub const REG_STATUS: u64 = 0x20;

pub const STATUS_IDLE: u64 = 0;
pub const STATUS_DONE: u64 = 1;
pub const STATUS_ERROR: u64 = 2;

#[derive(Clone, Copy, Default, Debug, PartialEq, Eq)]
pub struct JobRegs {
    pub src_ipa: u64,
    pub len: u64,
    pub dst_ipa: u64,
    pub status: u64,
}

#[derive(Clone, Debug)]
pub struct DeviceModel {
    pub bus: BusAddr,
    pub rid: Rid,
    pub genuine: bool,
    pub bars: Vec<u8>,
    pub firmware_digest: Digest,
    pub debug_disabled: bool,
    pub behavior: DeviceBehavior,
    pub config_space: Blob,
    pub local_mem: Blob,
    /// Raw backing for BAR windows beyond the register file.
    pub bar_mem: Vec<Blob>,
    pub regs: JobRegs,
    /// Link key received during the establishment handshake. Only genuine
    /// endpoints can complete the handshake.
    pub link_key: Option<KeyId>,
    /// Next sequence number for device-originated envelopes.
    pub send_seq: u64,
    /// Next expected sequence number for host-originated envelopes.
    pub recv_seq: u64,
}

impl DeviceModel {
    pub fn from_spec(spec: &DeviceSpec) -> Self {
        assert!(spec.bars.len() <= MAX_BARS, "at most six BARs");
        let firmware_digest = sha256(&[spec.firmware.as_bytes()]);
        let mut dev = DeviceModel {
            bus: spec.bus,
            rid: spec.bus.rid(),
            genuine: spec.genuine,
            bars: spec.bars.clone(),
            firmware_digest,
            debug_disabled: spec.debug_disabled,
            behavior: spec.behavior,
            config_space: Blob::zeroed(GRANULE_SIZE as usize),
            local_mem: Blob::zeroed(DEVICE_MEM_SIZE),
            bar_mem: spec
                .bars
                .iter()
                .map(|&g| Blob::zeroed(g as usize * GRANULE_SIZE as usize))
                .collect(),
            regs: JobRegs::default(),
            link_key: None,
            send_seq: 0,
            recv_seq: 0,
        };
        dev.reset_state();
        dev
    }

    /// Regenerate configuration space and wipe volatile state. The image is
    /// a pure function of (rid, BAR sizes, firmware), so resets are
    /// referentially transparent.
    pub fn reset_state(&mut self) {
        let mut cfg = vec![0u8; GRANULE_SIZE as usize];
        cfg[0..2].copy_from_slice(&0x51e5u16.to_le_bytes());
        cfg[2..4].copy_from_slice(&(self.rid.0 as u16).to_le_bytes());
        for (i, &g) in self.bars.iter().enumerate() {
            let off = 0x10 + 4 * i;
            cfg[off..off + 4].copy_from_slice(&(g as u32 * GRANULE_SIZE as u32).to_le_bytes());
        }
        cfg[0x40..0x60].copy_from_slice(&self.firmware_digest.0);
        cfg[0x60] = self.debug_disabled as u8;
        // Deterministic vendor-defined filler derived from the identity.
        let fill = sha256(&[&self.rid.0.to_le_bytes(), &self.firmware_digest.0]);
        for (i, b) in cfg[0x80..0x100].iter_mut().enumerate() {
            *b = fill.0[i % 32];
        }
        self.config_space = Blob::new(cfg);
        self.local_mem = Blob::zeroed(DEVICE_MEM_SIZE);
        self.bar_mem = self
            .bars
            .iter()
            .map(|&g| Blob::zeroed(g as usize * GRANULE_SIZE as usize))
            .collect();
        self.regs = JobRegs::default();
    }

    fn sign_report(&self) -> Digest {
        sha256(&[
            MANUFACTURER_SEED,
            &self.rid.0.to_le_bytes(),
            &self.firmware_digest.0,
            &self.config_space.digest().0,
            &[self.debug_disabled as u8],
        ])
    }

    pub fn canonize(&self, c: &mut Canon, with_counters: bool) {
        c.u16(self.bus.0);
        c.bool(self.genuine);
        c.digest(&self.config_space.digest());
        c.digest(&self.local_mem.digest());
        for b in &self.bar_mem {
            c.digest(&b.digest());
        }
        c.u64(self.regs.src_ipa);
        c.u64(self.regs.len);
        c.u64(self.regs.dst_ipa);
        c.u64(self.regs.status);
        c.opt_u64(self.link_key.map(|k| k.0));
        c.bool(self.debug_disabled);
        if with_counters {
            c.u64(self.send_seq);
            c.u64(self.recv_seq);
        }
    }
}

/// Attestation evidence returned by a device. The signature binds every
/// field to the device's manufacturing identity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DeviceReport {
    pub rid: Rid,
    pub firmware_digest: Digest,
    pub config_digest: Digest,
    pub debug_disabled: bool,
    pub signature: Digest,
}

impl DeviceReport {
    pub fn verify_signature(&self) -> bool {
        self.signature
            == sha256(&[
                MANUFACTURER_SEED,
                &self.rid.0.to_le_bytes(),
                &self.firmware_digest.0,
                &self.config_digest.0,
                &[self.debug_disabled as u8],
            ])
    }

    pub fn canonize(&self, c: &mut Canon) {
        c.u32(self.rid.0);
        c.digest(&self.firmware_digest);
        c.digest(&self.config_digest);
        c.bool(self.debug_disabled);
        c.digest(&self.signature);
    }
}

/// Symbolic link-encryption envelope.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Envelope {
    /// Key the sender sealed with; None when the sender holds no link key.
    pub key: Option<KeyId>,
    pub seq: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TxnKind {
    DmaRead,
    DmaWrite,
    MmioRead,
    MmioWrite,
    Completion,
}

/// One transaction on the link. Inbound (device to host) transactions go
/// through the root port verdict and then the SMMU.
#[derive(Clone, Debug)]
pub struct PcieTransaction {
    pub rid: Rid,
    pub t_bit: bool,
    pub kind: TxnKind,
    pub ipa: Ipa,
    pub payload: Vec<u8>,
    pub len: u64,
    pub envelope: Option<Envelope>,
}

/// What the root port decided about an inbound transaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RootPortVerdict {
    DecryptedOk,
    Discard,
    PlaintextNormal,
}

impl RootPortVerdict {
    pub fn name(self) -> &'static str {
        match self {
            RootPortVerdict::DecryptedOk => "decrypted-ok",
            RootPortVerdict::Discard => "discard",
            RootPortVerdict::PlaintextNormal => "plaintext-normal",
        }
    }
}

/// What an on-path physical adversary retains from one observed
/// transaction: the sealed transaction itself, and the payload bytes only
/// when the transaction travelled unsealed.
#[derive(Clone, Debug)]
pub struct TappedTransaction {
    pub txn: PcieTransaction,
    pub visible_payload: Option<Vec<u8>>,
}

#[derive(Clone, Debug)]
pub struct PcieState {
    pub devices: BTreeMap<BusAddr, DeviceModel>,
    /// Root-port key store; mutated only through root-world calls.
    pub root_keys: BTreeMap<Rid, KeyId>,
    /// Next expected inbound sequence number per requester.
    pub port_recv_seq: BTreeMap<Rid, u64>,
    /// Next outbound sequence number per requester.
    pub port_send_seq: BTreeMap<Rid, u64>,
    /// Last transaction captured by the on-path adversary.
    pub tap: Option<TappedTransaction>,
    /// One-shot adversary schedule: swap this endpoint inside the next
    /// attach window, after key programming.
    pub scheduled_window_swap: Option<BusAddr>,
    pub next_key: u64,
}

impl PcieState {
    pub fn new(specs: &[DeviceSpec]) -> Self {
        PcieState {
            devices: specs
                .iter()
                .map(|s| (s.bus, DeviceModel::from_spec(s)))
                .collect(),
            root_keys: BTreeMap::new(),
            port_recv_seq: BTreeMap::new(),
            port_send_seq: BTreeMap::new(),
            tap: None,
            scheduled_window_swap: None,
            next_key: 1,
        }
    }

    pub fn device_by_rid(&self, rid: Rid) -> Option<&DeviceModel> {
        self.devices.values().find(|d| d.rid == rid)
    }

    pub fn canonize(&self, c: &mut Canon, with_counters: bool) {
        c.u64(self.devices.len() as u64);
        for dev in self.devices.values() {
            dev.canonize(c, with_counters);
        }
        c.u64(self.root_keys.len() as u64);
        for (rid, key) in &self.root_keys {
            c.u32(rid.0);
            c.u64(key.0);
        }
        if with_counters {
            // The tap and the sequence counters never influence an
            // access-control decision (replayed captures are stale by
            // construction), so the exploration dedup key omits them.
            match &self.tap {
                None => c.u8(0),
                Some(t) => {
                    c.u8(1);
                    c.u32(t.txn.rid.0);
                    c.bool(t.txn.t_bit);
                    c.u64(t.txn.ipa.0);
                    c.bytes(&t.txn.payload);
                    c.opt_u64(t.txn.envelope.and_then(|e| e.key).map(|k| k.0));
                    c.opt_u64(t.txn.envelope.map(|e| e.seq));
                }
            }
            c.opt_u64(self.scheduled_window_swap.map(|b| b.0 as u64));
            c.u64(self.next_key);
            for (rid, seq) in &self.port_recv_seq {
                c.u32(rid.0);
                c.u64(*seq);
            }
            for (rid, seq) in &self.port_send_seq {
                c.u32(rid.0);
                c.u64(*seq);
            }
        }
    }
}

/// Outcome of one delivered DMA transaction.
#[derive(Debug)]
pub struct DmaOutcome {
    pub data: Option<ReadOutcome>,
}

impl Sim {
    pub(crate) fn fresh_key(&mut self) -> KeyId {
        let k = KeyId(self.state.pcie.next_key);
        self.state.pcie.next_key += 1;
        k
    }

    /// Program a fresh link key for a requester. Root only. The genuine
    /// endpoint at that requester id completes the handshake and receives
    /// the key; an emulated endpoint cannot.
    pub fn ide_program_key(&mut self, rid: Rid, caller: AccessorCtx) -> SimResult<KeyId> {
        if caller.world != World::Root {
            return Err(SimError::NotRoot);
        }
        if self.state.pcie.root_keys.contains_key(&rid) {
            // Key-slot uniqueness is the same already-bound check the
            // registry enforces at attach; the knob disables both halves.
            if !self.state.cfg.knobs.skip_stream_taken_check {
                return Err(SimError::RidInUse);
            }
            self.ide_erase_key(rid);
        }
        let key = self.fresh_key();
        self.state.pcie.root_keys.insert(rid, key);
        self.state.pcie.port_recv_seq.insert(rid, 0);
        self.state.pcie.port_send_seq.insert(rid, 0);
        if let Some(dev) = self
            .state
            .pcie
            .devices
            .values_mut()
            .find(|d| d.rid == rid && d.genuine)
        {
            dev.link_key = Some(key);
            dev.send_seq = 0;
            dev.recv_seq = 0;
        }
        self.events.push(Event::IdeKeyProgrammed { rid, key });
        Ok(key)
    }

    pub(crate) fn ide_erase_key(&mut self, rid: Rid) {
        self.state.pcie.root_keys.remove(&rid);
        self.state.pcie.port_recv_seq.remove(&rid);
        self.state.pcie.port_send_seq.remove(&rid);
        self.events.push(Event::IdeKeyErased { rid });
    }

    /// Root-port admission for an inbound transaction. Tagged traffic must
    /// decrypt under the stored key for the claimed requester and carry a
    /// fresh sequence number; everything else is plaintext normal-world
    /// traffic.
    fn root_port_admit(&mut self, txn: &PcieTransaction) -> RootPortVerdict {
        let verdict = if txn.t_bit {
            let store_key = self.state.pcie.root_keys.get(&txn.rid).copied();
            let env = txn.envelope.expect("tagged transaction without envelope");
            match (env.key, store_key) {
                (Some(k), Some(s)) if k == s => {
                    let expected = self
                        .state
                        .pcie
                        .port_recv_seq
                        .get(&txn.rid)
                        .copied()
                        .unwrap_or(0);
                    if env.seq == expected {
                        *self.state.pcie.port_recv_seq.entry(txn.rid).or_insert(0) += 1;
                        RootPortVerdict::DecryptedOk
                    } else {
                        RootPortVerdict::Discard
                    }
                }
                _ => RootPortVerdict::Discard,
            }
        } else {
            RootPortVerdict::PlaintextNormal
        };
        self.events.push(Event::RootPortVerdict {
            rid: txn.rid,
            verdict: verdict.name(),
            envelope_key: txn.envelope.and_then(|e| e.key),
            store_key: self.state.pcie.root_keys.get(&txn.rid).copied(),
        });
        verdict
    }

    /// The on-path adversary captures sealed inbound transactions for later
    /// replay. The payload of a sealed transaction is never visible to it;
    /// plaintext traffic is readable but replaying it is indistinguishable
    /// from originating it, which the action alphabet already covers.
    fn tap_record(&mut self, txn: &PcieTransaction) {
        if txn.envelope.is_none() {
            return;
        }
        self.state.pcie.tap = Some(TappedTransaction {
            txn: txn.clone(),
            visible_payload: None,
        });
        self.events.push(Event::TapRecorded { rid: txn.rid });
    }

    /// A device puts one DMA transaction on the link. Adversarial senders
    /// may claim any requester id; sealing always uses the sender's own
    /// link key, which is all a forger has.
    pub fn device_send_dma(
        &mut self,
        bus: BusAddr,
        op: RwOp,
        ipa: Ipa,
        len: u64,
        t_bit: bool,
        rid_override: Option<Rid>,
        payload: Vec<u8>,
    ) -> SimResult<DmaOutcome> {
        let dev = self
            .state
            .pcie
            .devices
            .get_mut(&bus)
            .ok_or(SimError::DeviceNotFound)?;
        let rid = rid_override.unwrap_or(dev.rid);
        let envelope = if t_bit {
            let e = Envelope {
                key: dev.link_key,
                seq: dev.send_seq,
            };
            dev.send_seq += 1;
            Some(e)
        } else {
            None
        };
        let txn = PcieTransaction {
            rid,
            t_bit,
            kind: match op {
                RwOp::Read => TxnKind::DmaRead,
                RwOp::Write => TxnKind::DmaWrite,
            },
            ipa,
            payload,
            len,
            envelope,
        };
        self.tap_record(&txn);
        self.events.push(Event::DmaTransfer { bus, op, ipa, len });
        self.deliver_dma(bus, txn)
    }

    /// Re-inject the last captured transaction. Models the physical
    /// adversary's replay; the stale sequence number makes the port drop it.
    pub fn tap_replay(&mut self) -> SimResult<DmaOutcome> {
        let tapped = self
            .state
            .pcie
            .tap
            .clone()
            .ok_or(SimError::DiscardedAtRootPort)?;
        // Replays re-enter at the root port; the original sender is not
        // involved, so no device state advances.
        let bus = self
            .state
            .pcie
            .device_by_rid(tapped.txn.rid)
            .map(|d| d.bus)
            .unwrap_or(BusAddr(0));
        self.deliver_dma(bus, tapped.txn)
    }

    /// Root-port verdict, SMMU translation, protection check, and the
    /// memory access itself, in that order.
    fn deliver_dma(&mut self, bus: BusAddr, txn: PcieTransaction) -> SimResult<DmaOutcome> {
        let verdict = self.root_port_admit(&txn);
        let pa = self.translate_transaction(&txn, verdict)?;
        let world_ext = if txn.t_bit { World::Realm } else { World::Normal };
        // Device accesses to a realm's protected region land under the
        // owner realm's memory encryption key: ownership is the binding.
        let mec_key = if world_ext == World::Realm {
            let sid = StreamId(txn.rid.0);
            self.state
                .monitor
                .registry
                .get(&sid)
                .and_then(|e| self.state.mem.mec_keys.get(&e.vmid).copied())
        } else {
            None
        };
        let accessor = AccessorCtx::smmu(world_ext, mec_key);
        match txn.kind {
            TxnKind::DmaRead => {
                let out = self.mem_read(accessor, PhysAddr(pa.0 + txn.ipa.offset_in_granule()), txn.len as usize)?;
                // Completion back to the device rides the link sealed under
                // the requester's key.
                if let ReadOutcome::Bytes(bytes) = &out {
                    self.send_completion(bus, txn.rid, txn.t_bit, bytes.clone());
                }
                Ok(DmaOutcome { data: Some(out) })
            }
            TxnKind::DmaWrite => {
                let payload = txn.payload.clone();
                self.mem_write(
                    accessor,
                    PhysAddr(pa.0 + txn.ipa.offset_in_granule()),
                    &payload,
                )?;
                Ok(DmaOutcome { data: None })
            }
            _ => Ok(DmaOutcome { data: None }),
        }
    }

    /// Host-to-device leg: read completions and MMIO traffic, sealed under
    /// the root-port key for that requester when one exists.
    fn send_completion(&mut self, bus: BusAddr, rid: Rid, sealed: bool, bytes: Vec<u8>) {
        let key = self.state.pcie.root_keys.get(&rid).copied();
        let envelope = if sealed {
            let seq = self.state.pcie.port_send_seq.entry(rid).or_insert(0);
            let e = Envelope { key, seq: *seq };
            *seq += 1;
            Some(e)
        } else {
            None
        };
        if let Some(dev) = self.state.pcie.devices.get_mut(&bus) {
            let accept = match envelope {
                Some(env) => dev.link_key.is_some() && env.key == dev.link_key && env.seq == dev.recv_seq,
                None => true,
            };
            if accept {
                if envelope.is_some() {
                    dev.recv_seq += 1;
                }
                let n = bytes.len().min(DEVICE_MEM_SIZE);
                dev.local_mem.write(0, &bytes[..n]);
            }
        }
    }

    /// Reset a device to its manufacturing state.
    pub fn device_reset(&mut self, bus: BusAddr) -> SimResult<()> {
        let dev = self
            .state
            .pcie
            .devices
            .get_mut(&bus)
            .ok_or(SimError::DeviceNotFound)?;
        dev.reset_state();
        self.events.push(Event::DeviceReset { bus });
        Ok(())
    }

    /// Run the attestation exchange with a device. Synchronous: the caller
    /// blocks until the report is back. The exchange rides the keyed link,
    /// so a device that lost the key handshake cannot answer, and an
    /// emulated endpoint cannot sign.
    pub fn spdm_attest(&mut self, bus: BusAddr) -> SimResult<DeviceReport> {
        // A scheduled window swap strikes here: the endpoint changes hands
        // after key programming, so the exchange below cannot decrypt.
        if self.state.pcie.scheduled_window_swap == Some(bus) {
            self.state.pcie.scheduled_window_swap = None;
            self.device_swap(bus)?;
        }
        let dev = self
            .state
            .pcie
            .devices
            .get(&bus)
            .ok_or(SimError::DeviceNotFound)?;
        let store_key = self.state.pcie.root_keys.get(&dev.rid).copied();
        let ok = dev.genuine && dev.link_key.is_some() && dev.link_key == store_key;
        self.events.push(Event::SpdmAttest { bus, ok });
        if !ok {
            return Err(SimError::AttestFailed);
        }
        let dev = &self.state.pcie.devices[&bus];
        Ok(DeviceReport {
            rid: dev.rid,
            firmware_digest: dev.firmware_digest,
            config_digest: dev.config_space.digest(),
            debug_disabled: dev.debug_disabled,
            signature: dev.sign_report(),
        })
    }

    /// Read the device's configuration space over the keyed link.
    pub(crate) fn read_device_config(&mut self, bus: BusAddr) -> SimResult<Vec<u8>> {
        let dev = self
            .state
            .pcie
            .devices
            .get(&bus)
            .ok_or(SimError::DeviceNotFound)?;
        let store_key = self.state.pcie.root_keys.get(&dev.rid).copied();
        self.events.push(Event::ConfigRead { bus });
        if dev.link_key.is_none() || dev.link_key != store_key {
            return Err(SimError::AttestFailed);
        }
        Ok(dev.config_space.bytes().to_vec())
    }

    /// Physical adversary swaps the endpoint at a bus address for a fresh
    /// device of the same model. The newcomer holds no link key.
    pub fn device_swap(&mut self, bus: BusAddr) -> SimResult<()> {
        let spec = self
            .state
            .cfg
            .device(bus)
            .cloned()
            .ok_or(SimError::DeviceNotFound)?;
        let fresh = DeviceModel::from_spec(&spec);
        self.state.pcie.devices.insert(bus, fresh);
        self.events.push(Event::DeviceSwapped { bus });
        Ok(())
    }

    /// Memory-mapped access from a realm core to its device's BAR space.
    /// Resolved through the realm's stage-2 table, protection-checked, then
    /// forwarded over the keyed link to the device.
    pub fn mmio_access(
        &mut self,
        vmid: Vmid,
        ipa: Ipa,
        op: RwOp,
        value: u64,
    ) -> SimResult<Option<u64>> {
        let realm = self.state.rmm.realms.get(&vmid).ok_or(SimError::UnknownVm)?;
        if realm.state != crate::rmm::RealmState::Active {
            return Err(SimError::NotActive);
        }
        let sid = match realm.attach {
            crate::rmm::AttachState::Attached(sid) => sid,
            _ => return Err(SimError::NotBarRegion),
        };
        let entry = self
            .state
            .monitor
            .registry
            .get(&sid)
            .ok_or(SimError::NotBarRegion)?;
        let mut located = None;
        for (bar_idx, &(base, size)) in entry.bar_regions.iter().enumerate() {
            if ipa.0 >= base.0 && ipa.0 + 8 <= base.0 + size {
                located = Some((bar_idx, ipa.0 - base.0));
                break;
            }
        }
        let (bar_idx, offset) = located.ok_or(SimError::NotBarRegion)?;
        let rid = entry.rid;
        let bus = self
            .state
            .pcie
            .device_by_rid(rid)
            .map(|d| d.bus)
            .ok_or(SimError::DeviceNotFound)?;

        // Stage-1 is guest-internal; the realm core resolves through the
        // realm manager's stage-2 table and the protection check applies to
        // the backing granule.
        let realm = &self.state.rmm.realms[&vmid];
        let base_ipa = ipa.granule_base();
        let pa = *realm
            .stage2
            .get(&base_ipa)
            .ok_or(SimError::TranslationFault)?;
        let mec_key = self.state.mem.mec_keys.get(&vmid).copied();
        let accessor = AccessorCtx::realm_core(vmid, mec_key.unwrap_or(KeyId(0)));
        let idx = self.pa_index(pa)?;
        if !crate::memory::gpc_allows(accessor.world, self.state.mem.worlds[idx]) {
            self.events.push(Event::GpcFault {
                accessor_world: accessor.world,
                pa,
                granule_world: self.state.mem.worlds[idx],
            });
            return Err(SimError::GpcDenied);
        }
        self.events.push(Event::MmioAccess { vmid, op, ipa });

        // Forward over the link inside an envelope keyed for the device.
        let env = Envelope {
            key: self.state.pcie.root_keys.get(&rid).copied(),
            seq: {
                let seq = self.state.pcie.port_send_seq.entry(rid).or_insert(0);
                let s = *seq;
                *seq += 1;
                s
            },
        };
        let dev = self.state.pcie.devices.get_mut(&bus).unwrap();
        if dev.link_key.is_none() || env.key != dev.link_key || env.seq != dev.recv_seq {
            // The endpoint cannot decrypt; the access is lost on the link.
            return Err(SimError::DiscardedAtRootPort);
        }
        dev.recv_seq += 1;

        match op {
            RwOp::Write => {
                self.device_bar_write(bus, bar_idx, offset, value)?;
                Ok(None)
            }
            RwOp::Read => {
                let v = self.device_bar_read(bus, bar_idx, offset);
                Ok(Some(v))
            }
        }
    }

    fn device_bar_read(&self, bus: BusAddr, bar_idx: usize, offset: u64) -> u64 {
        let dev = &self.state.pcie.devices[&bus];
        if bar_idx == 0 {
            match offset {
                REG_SRC_IPA => return dev.regs.src_ipa,
                REG_LEN => return dev.regs.len,
                REG_DST_IPA => return dev.regs.dst_ipa,
                REG_DOORBELL => return 0,
                REG_STATUS => return dev.regs.status,
                _ => {}
            }
        }
        let bytes = dev.bar_mem[bar_idx].bytes();
        let off = offset as usize;
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&bytes[off..off + 8]);
        u64::from_le_bytes(buf)
    }

    fn device_bar_write(
        &mut self,
        bus: BusAddr,
        bar_idx: usize,
        offset: u64,
        value: u64,
    ) -> SimResult<()> {
        let dev = self.state.pcie.devices.get_mut(&bus).unwrap();
        if bar_idx == 0 {
            match offset {
                REG_SRC_IPA => {
                    dev.regs.src_ipa = value;
                    return Ok(());
                }
                REG_LEN => {
                    dev.regs.len = value;
                    return Ok(());
                }
                REG_DST_IPA => {
                    dev.regs.dst_ipa = value;
                    return Ok(());
                }
                REG_DOORBELL => {
                    if value == 1 {
                        self.run_device_job(bus);
                    }
                    return Ok(());
                }
                REG_STATUS => {
                    dev.regs.status = value;
                    return Ok(());
                }
                _ => {}
            }
        }
        let off = offset as usize;
        dev.bar_mem[bar_idx].write(off, &value.to_le_bytes());
        Ok(())
    }

    /// The programmable device computation: read the source buffer over
    /// DMA, transform, write it back to the destination buffer over DMA.
    fn run_device_job(&mut self, bus: BusAddr) {
        let (behavior, src, len, dst) = {
            let dev = &self.state.pcie.devices[&bus];
            (dev.behavior, dev.regs.src_ipa, dev.regs.len, dev.regs.dst_ipa)
        };
        if behavior != DeviceBehavior::NegateCopy {
            return;
        }
        let status = self.run_negate_copy(bus, src, len, dst);
        if let Some(dev) = self.state.pcie.devices.get_mut(&bus) {
            dev.regs.status = status;
        }
    }

    fn run_negate_copy(&mut self, bus: BusAddr, src: u64, len: u64, dst: u64) -> u64 {
        if len == 0 || len as usize > DEVICE_MEM_SIZE {
            return STATUS_ERROR;
        }
        let mut collected = Vec::with_capacity(len as usize);
        let mut off = 0u64;
        while off < len {
            let ipa = Ipa(src + off);
            let chunk = (GRANULE_SIZE - ipa.offset_in_granule()).min(len - off);
            match self.device_send_dma(bus, RwOp::Read, ipa, chunk, true, None, Vec::new()) {
                Ok(DmaOutcome { data: Some(ReadOutcome::Bytes(bytes)) }) => {
                    collected.extend_from_slice(&bytes)
                }
                _ => return STATUS_ERROR,
            }
            off += chunk;
        }
        for b in collected.iter_mut() {
            *b = !*b;
        }
        if let Some(dev) = self.state.pcie.devices.get_mut(&bus) {
            dev.local_mem.write(0, &collected);
        }
        let mut off = 0u64;
        while off < len {
            let ipa = Ipa(dst + off);
            let chunk = (GRANULE_SIZE - ipa.offset_in_granule()).min(len - off);
            let payload = collected[off as usize..(off + chunk) as usize].to_vec();
            match self.device_send_dma(bus, RwOp::Write, ipa, chunk, true, None, payload) {
                Ok(_) => {}
                Err(_) => return STATUS_ERROR,
            }
            off += chunk;
        }
        STATUS_DONE
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::setup::*;

    fn sim() -> Sim {
        Sim::new(small_config(Default::default(), false))
    }

    #[test]
    fn key_programming_is_root_only_and_unique() {
        let mut s = sim();
        let rid = DEV0.rid();
        assert_eq!(
            s.ide_program_key(rid, AccessorCtx::hypervisor()),
            Err(SimError::NotRoot)
        );
        let key = s.ide_program_key(rid, AccessorCtx::monitor()).unwrap();
        assert_eq!(s.state.pcie.root_keys[&rid], key);
        assert_eq!(s.state.pcie.devices[&DEV0].link_key, Some(key));
        assert_eq!(
            s.ide_program_key(rid, AccessorCtx::monitor()),
            Err(SimError::RidInUse)
        );
    }

    #[test]
    fn emulated_endpoints_never_complete_the_handshake() {
        let mut s = sim();
        let rid = EMULATED.rid();
        s.ide_program_key(rid, AccessorCtx::monitor()).unwrap();
        assert_eq!(s.state.pcie.devices[&EMULATED].link_key, None);
        assert_eq!(s.spdm_attest(EMULATED), Err(SimError::AttestFailed));
    }

    #[test]
    fn resets_are_referentially_transparent() {
        let mut s = sim();
        s.device_reset(DEV0).unwrap();
        let first = s.state.pcie.devices[&DEV0].config_space.digest();
        // Dirty the device, then reset again.
        s.state.pcie.devices.get_mut(&DEV0).unwrap().local_mem.write(0, &[9; 8]);
        s.state.pcie.devices.get_mut(&DEV0).unwrap().regs.src_ipa = 42;
        s.device_reset(DEV0).unwrap();
        let dev = &s.state.pcie.devices[&DEV0];
        assert_eq!(dev.config_space.digest(), first);
        assert!(dev.local_mem.bytes().iter().all(|&b| b == 0));
        assert_eq!(dev.regs, JobRegs::default());
        assert_eq!(dev.rid, DEV0.rid());
    }

    #[test]
    fn honest_reports_verify_and_debug_state_is_carried() {
        let mut s = sim();
        s.ide_program_key(DEV0.rid(), AccessorCtx::monitor()).unwrap();
        let report = s.spdm_attest(DEV0).unwrap();
        assert!(report.verify_signature());
        assert!(report.debug_disabled);
        // A debug-enabled unit reports the flag; the signature still
        // verifies, leaving the rejection to the remote verifier.
        let mut cfg = small_config(Default::default(), false);
        cfg.devices[0].debug_disabled = false;
        let mut s = Sim::new(cfg);
        s.ide_program_key(DEV0.rid(), AccessorCtx::monitor()).unwrap();
        let report = s.spdm_attest(DEV0).unwrap();
        assert!(!report.debug_disabled);
        assert!(report.verify_signature());
    }

    #[test]
    fn verdicts_follow_the_key_store() {
        let mut s = build_base(
            Default::default(),
            false,
            BaseOptions { protmem_r0: true, ..Default::default() },
        );
        // Genuine tagged traffic decrypts.
        s.device_send_dma(DEV0, RwOp::Write, DATA_IPA, 16, true, None, vec![1; 16]).unwrap();
        // A keyless device claiming its own identity is discarded on
        // tagged traffic.
        assert_eq!(
            s.device_send_dma(DEV1, RwOp::Write, DATA_IPA, 16, true, None, vec![1; 16])
                .unwrap_err(),
            SimError::DiscardedAtRootPort
        );
        let verdicts: Vec<&str> = s
            .events
            .iter()
            .filter_map(|(_, e)| match e {
                crate::events::Event::RootPortVerdict { verdict, .. } => Some(*verdict),
                _ => None,
            })
            .collect();
        assert!(verdicts.contains(&"decrypted-ok"));
        assert!(verdicts.contains(&"discard"));
    }

    #[test]
    fn replayed_envelopes_are_stale() {
        let mut s = build_base(
            Default::default(),
            false,
            BaseOptions { protmem_r0: true, ..Default::default() },
        );
        s.device_send_dma(DEV0, RwOp::Write, DATA_IPA, 16, true, None, vec![7; 16]).unwrap();
        let tap = s.state.pcie.tap.clone().expect("sealed transfer captured");
        // The capture exposes no plaintext to the attacker.
        assert!(tap.visible_payload.is_none());
        assert_eq!(s.tap_replay().unwrap_err(), SimError::DiscardedAtRootPort);
        // Legitimate traffic continues unharmed afterwards.
        s.device_send_dma(DEV0, RwOp::Write, DATA_IPA, 16, true, None, vec![8; 16]).unwrap();
    }

    #[test]
    fn mmio_reaches_only_the_owner_realm_device() {
        let mut s = build_base(
            Default::default(),
            false,
            BaseOptions { attach_r1: true, activate_r1: true, ..Default::default() },
        );
        // Owner writes a BAR0 register and reads it back.
        s.mmio_access(Vmid(0), Ipa(BAR_IPA.0 + REG_SRC_IPA), RwOp::Write, 0x2000).unwrap();
        assert_eq!(
            s.mmio_access(Vmid(0), Ipa(BAR_IPA.0 + REG_SRC_IPA), RwOp::Read, 0).unwrap(),
            Some(0x2000)
        );
        assert_eq!(s.state.pcie.devices[&DEV0].regs.src_ipa, 0x2000);
        // The co-tenant's identical guest address reaches its own device,
        // not the victim's.
        s.mmio_access(Vmid(1), Ipa(BAR_IPA.0 + REG_SRC_IPA), RwOp::Write, 0x9999).unwrap();
        assert_eq!(s.state.pcie.devices[&DEV0].regs.src_ipa, 0x2000);
        assert_eq!(s.state.pcie.devices[&DEV1].regs.src_ipa, 0x9999);
        // An address outside every BAR region is refused.
        assert_eq!(
            s.mmio_access(Vmid(0), DATA_IPA, RwOp::Write, 1),
            Err(SimError::NotBarRegion)
        );
        // The hypervisor cannot read the BAR backing granule either.
        let bar_pa = s.state.rmm.realms[&Vmid(0)].stage2[&BAR_IPA];
        assert_eq!(
            s.mem_read(AccessorCtx::hypervisor(), bar_pa, 8),
            Err(SimError::GpcDenied)
        );
    }

    #[test]
    fn swapped_device_loses_the_link() {
        let mut s = build_base(
            Default::default(),
            false,
            BaseOptions { protmem_r0: true, ..Default::default() },
        );
        s.device_swap(DEV0).unwrap();
        assert_eq!(s.state.pcie.devices[&DEV0].link_key, None);
        assert_eq!(
            s.device_send_dma(DEV0, RwOp::Read, DATA_IPA, 16, true, None, Vec::new())
                .unwrap_err(),
            SimError::DiscardedAtRootPort
        );
        // MMIO to the swapped endpoint is lost on the link as well.
        assert_eq!(
            s.mmio_access(Vmid(0), Ipa(BAR_IPA.0 + REG_STATUS), RwOp::Read, 0),
            Err(SimError::DiscardedAtRootPort)
        );
    }

    #[test]
    fn window_swap_defeats_attestation() {
        // The physical adversary swaps the endpoint after key programming
        // but before the attestation exchange; the exchange cannot
        // decrypt and the attach aborts.
        let mut cfg = small_config(Default::default(), false);
        cfg.swap_during_attach = Some(DEV0);
        let mut s = Sim::new(cfg);
        let vmid = s.rmi_realm_create("r0").unwrap();
        for pa in [R0_BAR_PA, R0_CFG_PA] {
            s.rmi_granule_delegate(pa).unwrap();
        }
        s.rmi_data_create(vmid, STAGING_PA, R0_BAR_PA, BAR_IPA, None).unwrap();
        let err = s.rmi_data_create(
            vmid,
            STAGING_PA,
            R0_CFG_PA,
            CFG_IPA,
            Some(attach_params(DEV0)),
        );
        assert_eq!(err, Err(SimError::AttestFailed));
        // Rollback erased the key: nothing for the swapped unit to use.
        assert!(s.state.pcie.root_keys.get(&DEV0.rid()).is_none());
    }

    #[test]
    fn doorbell_runs_the_negate_copy_job() {
        let mut s = build_base(
            Default::default(),
            false,
            BaseOptions { protmem_r0: true, ..Default::default() },
        );
        // DATA_IPA is both source and destination here: negate in place.
        s.realm_mem_write(Vmid(0), DATA_IPA, &[0x0F; 32]).unwrap();
        for (reg, val) in [
            (REG_SRC_IPA, DATA_IPA.0),
            (REG_LEN, 32),
            (REG_DST_IPA, DATA_IPA.0),
            (REG_DOORBELL, 1),
        ] {
            s.mmio_access(Vmid(0), Ipa(BAR_IPA.0 + reg), RwOp::Write, val).unwrap();
        }
        assert_eq!(
            s.mmio_access(Vmid(0), Ipa(BAR_IPA.0 + REG_STATUS), RwOp::Read, 0).unwrap(),
            Some(STATUS_DONE)
        );
        let out = s.realm_mem_read(Vmid(0), DATA_IPA, 32).unwrap();
        assert_eq!(out, crate::memory::ReadOutcome::Bytes(vec![0xF0; 32]));
    }
}
