// SPDX-License-Identifier: Apache-2.0

//! Simulation kernel: the global state snapshot, the single-mutator step
//! function, and canonical state digests.
//!
//! All state changes happen inside [`Sim::apply`]; a [`SimState`] value is
//! an immutable snapshot outside a step and safe to clone and inspect from
//! anywhere. Two digests exist: the full digest (goes into traces, covers
//! everything including monotone counters) and a dedup key used by the
//! exhaustive explorer, which ignores counters that never influence any
//! access-control decision — allocation counters, the protection-table
//! generation, cache fill tags, and envelope sequence numbers.

use crate::canon::Canon;
use crate::config::SimConfig;
use crate::error::{SimError, SimResult};
use crate::events::EventLog;
use crate::memory::{MemoryState, ReadOutcome};
use crate::monitor::{MonitorState, SmmuHypRequest};
use crate::policy::{verify_report, Policy, VerifyFailReason};
use crate::rmm::{AttachParams, AttestationReport, RmmState};
use crate::smmu::{SmmuField, SmmuState};
use crate::pcie::PcieState;
use crate::types::*;

#[derive(Clone, Debug)]
pub struct SimState {
    pub cfg: SimConfig,
    pub mem: MemoryState,
    pub rmm: RmmState,
    pub monitor: MonitorState,
    pub smmu: SmmuState,
    pub pcie: PcieState,
}

impl SimState {
    fn canonize(&self, with_counters: bool) -> Digest {
        let mut c = Canon::new("sim-state");
        self.mem.canonize(&mut c, with_counters);
        self.rmm.canonize(&mut c, with_counters);
        self.monitor.canonize(&mut c);
        self.smmu.canonize(&mut c, with_counters);
        self.pcie.canonize(&mut c, with_counters);
        c.finish()
    }

    /// Canonical digest of the complete state.
    pub fn digest(&self) -> Digest {
        self.canonize(true)
    }

    /// Exploration dedup key: canonical digest modulo decision-irrelevant
    /// counters, truncated to 128 bits.
    pub fn dedup_key(&self) -> [u8; 16] {
        let d = self.canonize(false);
        let mut k = [0u8; 16];
        k.copy_from_slice(&d.0[..16]);
        k
    }
}

pub struct Sim {
    pub state: SimState,
    pub events: EventLog,
    pub step: u64,
}

impl Clone for Sim {
    fn clone(&self) -> Self {
        Sim {
            state: self.state.clone(),
            events: self.events.clone(),
            step: self.step,
        }
    }
}

impl Sim {
    /// Build a booted system: inventory on the bus, staging granules
    /// pre-filled by the hypervisor, SMMU structures in root world.
    pub fn new(cfg: SimConfig) -> Self {
        let total = cfg.total_granules();
        let mut sim = Sim {
            state: SimState {
                mem: MemoryState::new(total),
                rmm: RmmState::new(total),
                monitor: MonitorState::default(),
                smmu: SmmuState::default(),
                pcie: PcieState::new(&cfg.devices),
                cfg,
            },
            events: EventLog::new(),
            step: 0,
        };
        sim.state.pcie.scheduled_window_swap = sim.state.cfg.swap_during_attach;
        for (idx, fill) in sim.state.cfg.staging.clone() {
            sim.state.mem.granules[idx].write(0, &vec![fill; GRANULE_SIZE as usize]);
        }
        sim.boot_init();
        sim
    }

    /// Clone with a fresh event log; used by the explorer, which needs
    /// successor states but not their histories.
    pub fn fork_state(&self) -> Sim {
        Sim {
            state: self.state.clone(),
            events: EventLog::new(),
            step: self.step,
        }
    }
}

/// Reference to a realm, by script name or by id.
#[derive(Clone, Debug, PartialEq)]
pub enum RealmRef {
    Name(String),
    Id(Vmid),
}

impl RealmRef {
    pub fn resolve(&self, state: &SimState) -> SimResult<Vmid> {
        match self {
            RealmRef::Id(vmid) => Ok(*vmid),
            RealmRef::Name(name) => state
                .rmm
                .realm_by_name(name)
                .map(|r| r.vmid)
                .ok_or(SimError::UnknownVm),
        }
    }
}

/// Every operation and adversarial move the simulator understands. Scripts,
/// the fuzzer, the explorer, and attack scenarios all speak this alphabet.
#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    BootInit,
    Delegate { pa: PhysAddr },
    Undelegate { pa: PhysAddr },
    RealmCreate { name: String },
    DataCreate {
        realm: RealmRef,
        src: PhysAddr,
        dst: PhysAddr,
        ipa: Ipa,
        attach: Option<AttachParams>,
    },
    Activate { realm: RealmRef },
    ProtMem { realm: RealmRef, dev: StreamId, sg: Vec<(Ipa, u64)> },
    Dma {
        bus: BusAddr,
        op: RwOp,
        ipa: Ipa,
        len: u64,
        t_bit: bool,
        rid_override: Option<Rid>,
    },
    Mmio { realm: RealmRef, op: RwOp, ipa: Ipa, value: u64 },
    MemRead { realm: RealmRef, ipa: Ipa, len: u64 },
    MemWrite { realm: RealmRef, ipa: Ipa, data: Vec<u8> },
    Attest { realm: RealmRef },
    Verify { realm: RealmRef, policy: Policy },
    Destroy { realm: RealmRef },
    // Hypervisor moves outside the sanctioned interface.
    HvS2Map { sid: StreamId, ipa: Ipa, pa: PhysAddr },
    HvS2Unmap { sid: StreamId, ipa: Ipa },
    HvConfigWrite { field: SmmuField, value: u64 },
    HvAtsEnable { sid: StreamId },
    HvMemWrite { pa: PhysAddr, byte: u8 },
    HvMemRead { pa: PhysAddr },
    HvSmcDelegate { vmid: Vmid, sid: StreamId, ipa: Ipa, pa: PhysAddr },
    // Physical adversary moves.
    TapReplay,
    DeviceSwap { bus: BusAddr },
}

/// What a successfully applied action hands back.
#[derive(Clone, Debug, PartialEq)]
pub enum ActionOutput {
    Unit,
    CreatedRealm(Vmid),
    Bytes(Vec<u8>),
    Ciphertext,
    Value(u64),
    Report(Box<AttestationReport>),
    VerifyPass,
}

/// An action stops either at a simulator fault or at a verification
/// failure; both carry a stable name scripts can expect.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepFault {
    Sim(SimError),
    Verify(VerifyFailReason),
}

impl StepFault {
    pub fn name(self) -> &'static str {
        match self {
            StepFault::Sim(e) => e.name(),
            StepFault::Verify(r) => r.name(),
        }
    }
}

impl From<SimError> for StepFault {
    fn from(e: SimError) -> Self {
        StepFault::Sim(e)
    }
}

pub type StepResult = Result<ActionOutput, StepFault>;

impl Action {
    /// Who performs this action, for trace attribution.
    pub fn actor(&self) -> String {
        use Action::*;
        match self {
            BootInit => "monitor".into(),
            Delegate { .. } | Undelegate { .. } | RealmCreate { .. } | DataCreate { .. }
            | Activate { .. } | Destroy { .. } | HvS2Map { .. } | HvS2Unmap { .. }
            | HvConfigWrite { .. } | HvAtsEnable { .. } | HvMemWrite { .. } | HvMemRead { .. }
            | HvSmcDelegate { .. } => "hypervisor".into(),
            ProtMem { realm, .. } | Mmio { realm, .. } | MemRead { realm, .. }
            | MemWrite { realm, .. } | Attest { realm, .. } | Verify { realm, .. } => {
                match realm {
                    RealmRef::Name(n) => format!("realm:{n}"),
                    RealmRef::Id(v) => format!("realm:{}", v.0),
                }
            }
            Dma { bus, .. } => format!("device:{:?}", bus),
            TapReplay | DeviceSwap { .. } => "physical".into(),
        }
    }

    /// Operation name for traces and call accounting.
    pub fn op_name(&self) -> &'static str {
        use Action::*;
        match self {
            BootInit => "boot_init",
            Delegate { .. } => "delegate",
            Undelegate { .. } => "undelegate",
            RealmCreate { .. } => "realm_create",
            DataCreate { .. } => "data_create",
            Activate { .. } => "activate",
            ProtMem { .. } => "prot_mem",
            Dma { .. } => "dma",
            Mmio { .. } => "mmio",
            MemRead { .. } | MemWrite { .. } => "mem",
            Attest { .. } => "attest",
            Verify { .. } => "verify",
            Destroy { .. } => "destroy",
            HvS2Map { .. } => "hv_s2_map",
            HvS2Unmap { .. } => "hv_s2_unmap",
            HvConfigWrite { .. } => "hv_config_write",
            HvAtsEnable { .. } => "hv_ats_enable",
            HvMemWrite { .. } => "hv_mem_write",
            HvMemRead { .. } => "hv_mem_read",
            HvSmcDelegate { .. } => "hv_smc_delegate",
            TapReplay => "tap_replay",
            DeviceSwap { .. } => "device_swap",
        }
    }
}

impl Sim {
    /// Apply one action as a committed step.
    pub fn apply(&mut self, action: &Action) -> StepResult {
        self.step += 1;
        self.events.set_step(self.step);
        self.dispatch(action)
    }

    fn dispatch(&mut self, action: &Action) -> StepResult {
        use Action::*;
        match action {
            BootInit => {
                self.boot_init();
                Ok(ActionOutput::Unit)
            }
            Delegate { pa } => {
                self.rmi_granule_delegate(*pa)?;
                Ok(ActionOutput::Unit)
            }
            Undelegate { pa } => {
                self.rmi_granule_undelegate(*pa)?;
                Ok(ActionOutput::Unit)
            }
            RealmCreate { name } => {
                let vmid = self.rmi_realm_create(name)?;
                Ok(ActionOutput::CreatedRealm(vmid))
            }
            DataCreate { realm, src, dst, ipa, attach } => {
                let vmid = realm.resolve(&self.state)?;
                self.rmi_data_create(vmid, *src, *dst, *ipa, attach.clone())?;
                Ok(ActionOutput::Unit)
            }
            Activate { realm } => {
                let vmid = realm.resolve(&self.state)?;
                self.rmi_realm_activate(vmid)?;
                Ok(ActionOutput::Unit)
            }
            ProtMem { realm, dev, sg } => {
                let vmid = realm.resolve(&self.state)?;
                self.rsi_delegate_prot_mem(vmid, sg, *dev)?;
                Ok(ActionOutput::Unit)
            }
            Dma { bus, op, ipa, len, t_bit, rid_override } => {
                let payload = match op {
                    RwOp::Write => dma_payload(*bus, *ipa, *len),
                    RwOp::Read => Vec::new(),
                };
                let out =
                    self.device_send_dma(*bus, *op, *ipa, *len, *t_bit, *rid_override, payload)?;
                match out.data {
                    Some(ReadOutcome::Bytes(b)) => Ok(ActionOutput::Bytes(b)),
                    Some(ReadOutcome::Ciphertext) => Ok(ActionOutput::Ciphertext),
                    None => Ok(ActionOutput::Unit),
                }
            }
            Mmio { realm, op, ipa, value } => {
                let vmid = realm.resolve(&self.state)?;
                match self.mmio_access(vmid, *ipa, *op, *value)? {
                    Some(v) => Ok(ActionOutput::Value(v)),
                    None => Ok(ActionOutput::Unit),
                }
            }
            MemRead { realm, ipa, len } => {
                let vmid = realm.resolve(&self.state)?;
                match self.realm_mem_read(vmid, *ipa, *len as usize)? {
                    ReadOutcome::Bytes(b) => Ok(ActionOutput::Bytes(b)),
                    ReadOutcome::Ciphertext => Ok(ActionOutput::Ciphertext),
                }
            }
            MemWrite { realm, ipa, data } => {
                let vmid = realm.resolve(&self.state)?;
                self.realm_mem_write(vmid, *ipa, data)?;
                Ok(ActionOutput::Unit)
            }
            Attest { realm } => {
                let vmid = realm.resolve(&self.state)?;
                let report = self.attestation_report(vmid)?;
                Ok(ActionOutput::Report(Box::new(report)))
            }
            Verify { realm, policy } => {
                let vmid = realm.resolve(&self.state)?;
                let report = self.attestation_report(vmid)?;
                match verify_report(&report, policy) {
                    Ok(()) => Ok(ActionOutput::VerifyPass),
                    Err(reason) => Err(StepFault::Verify(reason)),
                }
            }
            Destroy { realm } => {
                let vmid = realm.resolve(&self.state)?;
                self.rmi_realm_destroy(vmid)?;
                Ok(ActionOutput::Unit)
            }
            HvS2Map { sid, ipa, pa } => {
                self.smc_smmu_request(SmmuHypRequest::S2Map { sid: *sid, ipa: *ipa, pa: *pa })?;
                Ok(ActionOutput::Unit)
            }
            HvS2Unmap { sid, ipa } => {
                self.smc_smmu_request(SmmuHypRequest::S2Unmap { sid: *sid, ipa: *ipa })?;
                Ok(ActionOutput::Unit)
            }
            HvConfigWrite { field, value } => {
                self.smc_smmu_request(SmmuHypRequest::ConfigWrite {
                    field: *field,
                    value: *value,
                })?;
                Ok(ActionOutput::Unit)
            }
            HvAtsEnable { sid } => {
                self.smc_smmu_request(SmmuHypRequest::AtsEnable { sid: *sid })?;
                Ok(ActionOutput::Unit)
            }
            HvMemWrite { pa, byte } => {
                let data = [*byte; 16];
                self.mem_write(AccessorCtx::hypervisor(), *pa, &data)?;
                Ok(ActionOutput::Unit)
            }
            HvMemRead { pa } => {
                match self.mem_read(AccessorCtx::hypervisor(), *pa, 16)? {
                    ReadOutcome::Bytes(b) => Ok(ActionOutput::Bytes(b)),
                    ReadOutcome::Ciphertext => Ok(ActionOutput::Ciphertext),
                }
            }
            HvSmcDelegate { vmid, sid, ipa, pa } => {
                self.smc_delegate_prot_mem(*vmid, *sid, *ipa, *pa, false)?;
                Ok(ActionOutput::Unit)
            }
            TapReplay => {
                self.tap_replay()?;
                Ok(ActionOutput::Unit)
            }
            DeviceSwap { bus } => {
                self.device_swap(*bus)?;
                Ok(ActionOutput::Unit)
            }
        }
    }
}

/// Deterministic payload for generated DMA writes, derived from the action
/// parameters so that repeating an action is idempotent.
fn dma_payload(bus: BusAddr, ipa: Ipa, len: u64) -> Vec<u8> {
    let seed = sha256(&[&bus.0.to_le_bytes(), &ipa.0.to_le_bytes()]);
    (0..len as usize).map(|i| seed.0[i % 32]).collect()
}
