// SPDX-License-Identifier: Apache-2.0

//! Bounded exhaustive exploration.
//!
//! Depth-first enumeration of every action sequence from the closed
//! adversary-plus-honest alphabet, starting at the prepared base world,
//! with state deduplication on the canonical dedup key. A state seen
//! before is re-expanded only when reached with more remaining budget.
//! Every newly reached state is invariant-checked; the expected result on
//! an unmutated simulator is an empty violation list.

use crate::config::Knobs;
use crate::error::{SimError, SimResult};
use crate::invariants::check_invariants;
use crate::kernel::{Action, RealmRef, Sim};
use crate::memory::gpc_allows;
use crate::rmm::{AttachState, RealmState};
use crate::setup::*;
use crate::smmu::SmmuField;
use crate::types::*;
use std::collections::HashMap;

#[derive(Clone, Debug)]
pub struct ExploreConfig {
    pub depth: usize,
    /// Entity bounds the alphabet ranges over.
    pub realms: usize,
    pub devices: usize,
    pub granules: usize,
    pub knobs: Knobs,
    pub opt: bool,
    /// Abort with BudgetExceeded beyond this many distinct states.
    pub max_states: usize,
    /// Return after the first violation instead of enumerating all.
    pub stop_on_first: bool,
    /// Guest addresses the hypervisor-request actions range over.
    pub hv_ipas: Vec<Ipa>,
    /// Guest addresses data and DMA actions range over.
    pub ipas: Vec<Ipa>,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            depth: 5,
            realms: 2,
            devices: 2,
            granules: 8,
            knobs: Knobs::default(),
            opt: false,
            max_states: 20_000_000,
            stop_on_first: false,
            hv_ipas: vec![DATA_IPA, DATA2_IPA],
            ipas: vec![DATA_IPA, DATA2_IPA, BAR_IPA, CFG_IPA],
        }
    }
}

/// Empty bounds mean an empty alphabet.
impl ExploreConfig {
    pub fn is_vacuous(&self) -> bool {
        self.realms == 0 && self.devices == 0 && self.granules == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub depth: usize,
    /// Action names along the path from the base world.
    pub path: Vec<String>,
    pub check: &'static str,
    pub witness: String,
}

#[derive(Debug)]
pub struct ExploreOutcome {
    pub violations: Vec<Violation>,
    pub states: usize,
    pub transitions: usize,
}

/// The closed, deterministic action alphabet for the given bounds.
pub fn action_alphabet(cfg: &ExploreConfig) -> Vec<Action> {
    let mut acts = Vec::new();
    let pas: Vec<PhysAddr> = (0..cfg.granules).map(PhysAddr::from_granule_index).collect();
    let realms: Vec<Vmid> = (0..cfg.realms as u32).map(Vmid).collect();
    let devices: Vec<BusAddr> = [DEV0, DEV1][..cfg.devices.min(2)].to_vec();
    let stream_table_pa = PhysAddr::from_granule_index(cfg.granules);

    for &pa in &pas {
        acts.push(Action::Delegate { pa });
    }
    for &pa in &pas {
        acts.push(Action::Undelegate { pa });
    }
    if cfg.realms > 0 {
        acts.push(Action::RealmCreate { name: "r2".into() });
    }
    for &vmid in &realms {
        for &dst in &pas {
            for &ipa in &cfg.ipas {
                acts.push(Action::DataCreate {
                    realm: RealmRef::Id(vmid),
                    src: STAGING_PA,
                    dst,
                    ipa,
                    attach: None,
                });
            }
        }
    }
    for &vmid in &realms {
        let mut attach_buses = devices.clone();
        if cfg.devices > 0 {
            attach_buses.push(EMULATED);
        }
        for bus in attach_buses {
            acts.push(Action::DataCreate {
                realm: RealmRef::Id(vmid),
                src: STAGING_PA,
                dst: R1_CFG_PA,
                ipa: CFG_IPA,
                attach: Some(attach_params(bus)),
            });
        }
    }
    for &vmid in &realms {
        acts.push(Action::Activate { realm: RealmRef::Id(vmid) });
    }
    for &vmid in &realms {
        for dev in &devices {
            for &ipa in &cfg.ipas {
                acts.push(Action::ProtMem {
                    realm: RealmRef::Id(vmid),
                    dev: dev.stream_id(),
                    sg: vec![(ipa, GRANULE_SIZE)],
                });
            }
        }
    }
    for &bus in &devices {
        for op in [RwOp::Read, RwOp::Write] {
            for &ipa in &cfg.ipas {
                for t_bit in [false, true] {
                    acts.push(Action::Dma {
                        bus,
                        op,
                        ipa,
                        len: 16,
                        t_bit,
                        rid_override: None,
                    });
                }
            }
        }
    }
    // Forged requester ids: each device claims the other's identity.
    let forgery_pairs: &[(BusAddr, BusAddr)] = if cfg.devices >= 2 {
        &[(DEV0, DEV1), (DEV1, DEV0)]
    } else {
        &[]
    };
    for &(bus, victim) in forgery_pairs {
        for &ipa in &cfg.ipas {
            acts.push(Action::Dma {
                bus,
                op: RwOp::Read,
                ipa,
                len: 16,
                t_bit: true,
                rid_override: Some(victim.rid()),
            });
        }
    }
    for &vmid in &realms {
        let r = RealmRef::Id(vmid);
        acts.push(Action::Mmio {
            realm: r.clone(),
            op: RwOp::Write,
            ipa: Ipa(BAR_IPA.0),
            value: DATA_IPA.0,
        });
        acts.push(Action::Mmio {
            realm: r.clone(),
            op: RwOp::Write,
            ipa: Ipa(BAR_IPA.0 + 0x08),
            value: 64,
        });
        acts.push(Action::Mmio {
            realm: r.clone(),
            op: RwOp::Write,
            ipa: Ipa(BAR_IPA.0 + 0x10),
            value: DATA2_IPA.0,
        });
        acts.push(Action::Mmio {
            realm: r.clone(),
            op: RwOp::Write,
            ipa: Ipa(BAR_IPA.0 + 0x18),
            value: 1,
        });
        acts.push(Action::Mmio {
            realm: r.clone(),
            op: RwOp::Read,
            ipa: Ipa(BAR_IPA.0 + 0x20),
            value: 0,
        });
        acts.push(Action::MemWrite {
            realm: r.clone(),
            ipa: DATA_IPA,
            data: vec![0xA5; 16],
        });
        acts.push(Action::MemWrite {
            realm: r,
            ipa: DATA2_IPA,
            data: vec![0xA5; 16],
        });
    }
    for &vmid in &realms {
        acts.push(Action::Destroy { realm: RealmRef::Id(vmid) });
    }
    // Hypervisor SMMU requests: every (stream, guest address, physical
    // address) triple in bounds.
    for dev in &devices {
        for &ipa in &cfg.hv_ipas {
            for &pa in &pas {
                acts.push(Action::HvS2Map { sid: dev.stream_id(), ipa, pa });
            }
        }
    }
    for dev in &devices {
        for &ipa in &cfg.hv_ipas {
            acts.push(Action::HvS2Unmap { sid: dev.stream_id(), ipa });
        }
    }
    if !cfg.is_vacuous() {
        for field in SmmuField::ALL {
            acts.push(Action::HvConfigWrite { field, value: 1 });
        }
    }
    for dev in &devices {
        acts.push(Action::HvAtsEnable { sid: dev.stream_id() });
    }
    for &pa in &pas {
        acts.push(Action::HvMemWrite { pa, byte: 0x5C });
    }
    if cfg.granules > 0 {
        acts.push(Action::HvMemWrite { pa: stream_table_pa, byte: 0x5C });
        acts.push(Action::HvMemRead { pa: R0_DATA_PA });
    }
    // Direct monitor-call forgeries.
    for (i, dev) in devices.iter().enumerate() {
        for &ipa in &cfg.hv_ipas {
            for &pa in &pas {
                acts.push(Action::HvSmcDelegate {
                    vmid: Vmid(i as u32),
                    sid: dev.stream_id(),
                    ipa,
                    pa,
                });
            }
        }
    }
    if cfg.devices > 0 {
        acts.push(Action::TapReplay);
    }
    for &bus in &devices {
        acts.push(Action::DeviceSwap { bus });
    }
    acts
}

/// True when the action is certain to fault without any state change, so
/// the explorer can skip the clone. Must stay conservative: anything that
/// can mutate state (even on a fault path) must return false.
fn surely_inert(sim: &Sim, action: &Action) -> bool {
    let st = &sim.state;
    let knobs = &st.cfg.knobs;
    let realm_of = |r: &RealmRef| match r {
        RealmRef::Id(v) => st.rmm.realms.get(v),
        RealmRef::Name(n) => st.rmm.realm_by_name(n),
    };
    match action {
        Action::BootInit => st.monitor.booted,
        Action::Delegate { pa } | Action::Undelegate { pa } => {
            let Ok(idx) = in_range(st, *pa) else { return true };
            let want = if matches!(action, Action::Delegate { .. }) {
                World::Normal
            } else {
                World::Realm
            };
            let slot = st.rmm.reverse[idx];
            st.mem.worlds[idx] != want || slot.realm_owner.is_some() || slot.smmu_owner.is_some()
        }
        Action::RealmCreate { name } => {
            let live: Vec<_> = st
                .rmm
                .realms
                .values()
                .filter(|r| r.state != RealmState::Destroyed)
                .collect();
            live.len() >= st.cfg.max_realms || live.iter().any(|r| &r.name == name)
        }
        Action::DataCreate { realm, src, dst, ipa, attach } => {
            let Some(r) = realm_of(realm) else { return true };
            if r.state != RealmState::New || r.attach == AttachState::Failed {
                return true;
            }
            if attach.is_some() && r.attach != AttachState::NotRequested {
                return true;
            }
            let (Ok(si), Ok(di)) = (in_range(st, *src), in_range(st, *dst)) else {
                return true;
            };
            if st.mem.worlds[si] != World::Normal || st.mem.worlds[di] != World::Realm {
                return true;
            }
            if st.rmm.reverse[di].realm_owner.is_some() && !knobs.skip_double_map_check {
                return true;
            }
            r.stage2.contains_key(ipa)
        }
        Action::Activate { realm } => {
            let Some(r) = realm_of(realm) else { return true };
            r.state != RealmState::New || r.attach == AttachState::Failed
        }
        Action::ProtMem { realm, dev, sg } => {
            let Some(r) = realm_of(realm) else { return true };
            if r.state != RealmState::Active || r.attach != AttachState::Attached(*dev) {
                return true;
            }
            sg.iter().any(|(ipa, size)| {
                *size == 0
                    || size % GRANULE_SIZE != 0
                    || !ipa.is_granule_aligned()
                    || !r.stage2.contains_key(ipa)
            })
        }
        Action::Dma { bus, ipa, t_bit, rid_override, .. } => {
            // Fault paths change nothing the dedup key sees, but delivered
            // transactions may fill caches or write memory.
            let Some(dev) = st.pcie.devices.get(bus) else { return true };
            let rid = rid_override.unwrap_or(dev.rid);
            if *t_bit {
                let key_ok =
                    dev.link_key.is_some() && st.pcie.root_keys.get(&rid) == dev.link_key.as_ref();
                if !key_ok {
                    return true;
                }
            }
            let sid = StreamId(rid.0);
            let world = if *t_bit { World::Realm } else { World::Normal };
            match st.smmu.stes.get(&sid) {
                Some(ste) if ste.valid && ste.world == world => {}
                _ => return true,
            }
            let Some(pa) = st.smmu.mapping(sid, ipa.granule_base()) else {
                return true;
            };
            if !gpc_allows(world, st.mem.world(pa)) {
                return true;
            }
            false
        }
        Action::Mmio { realm, ipa, .. } => {
            let Some(r) = realm_of(realm) else { return true };
            if r.state != RealmState::Active {
                return true;
            }
            let AttachState::Attached(sid) = r.attach else { return true };
            let Some(entry) = st.monitor.registry.get(&sid) else { return true };
            !entry
                .bar_regions
                .iter()
                .any(|&(base, size)| ipa.0 >= base.0 && ipa.0 + 8 <= base.0 + size)
        }
        Action::MemWrite { realm, ipa, .. } | Action::MemRead { realm, ipa, .. } => {
            if matches!(action, Action::MemRead { .. }) {
                return true; // reads never change state
            }
            let Some(r) = realm_of(realm) else { return true };
            r.state != RealmState::Active || !r.stage2.contains_key(&ipa.granule_base())
        }
        Action::Attest { .. } | Action::Verify { .. } => true,
        Action::Destroy { realm } => realm_of(realm).is_none(),
        Action::HvS2Map { sid, ipa, pa } => {
            if st.monitor.registry.contains_key(sid) {
                return true;
            }
            let Ok(idx) = in_range(st, *pa) else { return true };
            if st.rmm.reverse[idx].smmu_owner.is_some() && !knobs.skip_reverse_map_check {
                return true;
            }
            st.smmu.s2.get(sid).is_some_and(|t| t.contains_key(ipa))
        }
        Action::HvS2Unmap { sid, ipa } => {
            st.monitor.registry.contains_key(sid)
                || st.smmu.mapping(*sid, *ipa).is_none()
        }
        Action::HvConfigWrite { field, value } => {
            *field == SmmuField::AtsGlobalEnable
                || !st.monitor.allow_list.contains(field)
                || st.smmu.config.get(field) == Some(value)
        }
        Action::HvAtsEnable { .. } => true,
        Action::HvMemWrite { pa, byte } => {
            let Ok(idx) = in_range(st, *pa) else { return true };
            if !gpc_allows(World::Normal, st.mem.worlds[idx]) {
                return true;
            }
            st.mem.granules[idx].read(0, 16) == vec![*byte; 16]
        }
        Action::HvMemRead { .. } => true,
        Action::HvSmcDelegate { vmid, sid, ipa, pa } => {
            let Some(entry) = st.monitor.registry.get(sid) else { return true };
            if entry.vmid != *vmid {
                return true;
            }
            let Ok(idx) = in_range(st, *pa) else { return true };
            if st.mem.worlds[idx] != World::Realm {
                return true;
            }
            if st.rmm.reverse[idx].smmu_owner.is_some() && !knobs.skip_reverse_map_check {
                return true;
            }
            if st.smmu.s2.get(sid).is_some_and(|t| t.contains_key(ipa)) {
                return true;
            }
            if !knobs.skip_mirror_check {
                return true; // blocked as a non-manager caller
            }
            false
        }
        Action::TapReplay => true,
        Action::DeviceSwap { bus } => {
            let Some(dev) = st.pcie.devices.get(bus) else { return true };
            dev.link_key.is_none()
                && dev.regs == Default::default()
                && dev.local_mem.bytes().iter().all(|&b| b == 0)
        }
    }
}

fn in_range(st: &crate::kernel::SimState, pa: PhysAddr) -> SimResult<usize> {
    if !pa.is_granule_aligned() {
        return Err(SimError::OutOfRange);
    }
    let idx = pa.granule_index();
    if idx >= st.mem.worlds.len() {
        return Err(SimError::OutOfRange);
    }
    Ok(idx)
}

struct Explorer {
    alphabet: Vec<Action>,
    /// Dedup key -> largest remaining budget this state was expanded with.
    visited: HashMap<[u8; 16], u8>,
    violations: Vec<Violation>,
    states: usize,
    transitions: usize,
    max_states: usize,
    stop_on_first: bool,
}

impl Explorer {
    fn record_violations(&mut self, sim: &Sim, path: &[usize]) {
        let report = check_invariants(&sim.state);
        for fail in report.failures() {
            self.violations.push(Violation {
                depth: path.len(),
                path: path
                    .iter()
                    .map(|&i| format!("{:?}", self.alphabet[i]))
                    .collect(),
                check: fail.name,
                witness: fail.witness.clone().unwrap_or_default(),
            });
        }
    }

    fn dfs(&mut self, sim: &Sim, budget: u8, path: &mut Vec<usize>) -> SimResult<()> {
        if budget == 0 {
            return Ok(());
        }
        if self.stop_on_first && !self.violations.is_empty() {
            return Ok(());
        }
        for i in 0..self.alphabet.len() {
            if self.stop_on_first && !self.violations.is_empty() {
                return Ok(());
            }
            let action = self.alphabet[i].clone();
            if surely_inert(sim, &action) {
                continue;
            }
            let mut next = sim.fork_state();
            let _ = next.apply(&action);
            self.transitions += 1;
            let key = next.state.dedup_key();
            let remaining = budget - 1;
            match self.visited.get(&key) {
                Some(&seen) if seen >= remaining => continue,
                Some(_) => {
                    // Reached again on a shorter path; re-expand with the
                    // larger budget and re-record so the shallowest
                    // witnessing trace wins.
                    self.visited.insert(key, remaining);
                    path.push(i);
                    self.record_violations(&next, path);
                    path.pop();
                }
                None => {
                    self.visited.insert(key, remaining);
                    self.states += 1;
                    if self.states > self.max_states {
                        return Err(SimError::BudgetExceeded);
                    }
                    path.push(i);
                    self.record_violations(&next, path);
                    path.pop();
                }
            }
            path.push(i);
            self.dfs(&next, remaining, path)?;
            path.pop();
        }
        Ok(())
    }
}

/// Run the bounded exhaustive exploration.
pub fn explore(cfg: &ExploreConfig) -> SimResult<ExploreOutcome> {
    let sim = build_base(cfg.knobs, cfg.opt, BaseOptions::default());
    let alphabet = action_alphabet(cfg);
    let mut explorer = Explorer {
        alphabet,
        visited: HashMap::new(),
        violations: Vec::new(),
        states: 1,
        transitions: 0,
        max_states: cfg.max_states,
        stop_on_first: cfg.stop_on_first,
    };
    let base_report = check_invariants(&sim.state);
    for fail in base_report.failures() {
        explorer.violations.push(Violation {
            depth: 0,
            path: Vec::new(),
            check: fail.name,
            witness: fail.witness.clone().unwrap_or_default(),
        });
    }
    explorer
        .visited
        .insert(sim.state.dedup_key(), cfg.depth as u8);
    let mut path = Vec::new();
    explorer.dfs(&sim, cfg.depth as u8, &mut path)?;

    let mut violations = explorer.violations;
    // Keep the shallowest witnessing trace per distinct violation.
    violations.sort_by(|a, b| {
        (a.check, &a.witness, a.depth, &a.path).cmp(&(b.check, &b.witness, b.depth, &b.path))
    });
    violations.dedup_by(|a, b| a.check == b.check && a.witness == b.witness);
    violations.sort_by(|a, b| (a.depth, &a.path, a.check).cmp(&(b.depth, &b.path, b.check)));
    Ok(ExploreOutcome {
        violations,
        states: explorer.states,
        transitions: explorer.transitions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_zero_checks_only_the_base() {
        let cfg = ExploreConfig { depth: 0, ..Default::default() };
        let out = explore(&cfg).unwrap();
        assert!(out.violations.is_empty());
        assert_eq!(out.states, 1);
    }

    #[test]
    fn alphabet_is_deterministic_and_counts_match_the_bounds() {
        let cfg = ExploreConfig::default();
        let a = action_alphabet(&cfg);
        let b = action_alphabet(&cfg);
        assert_eq!(a, b);
        // Counting oracle for the hypervisor remap family: one action per
        // (stream x guest address x physical address) triple in bounds.
        let expected = cfg.devices * cfg.hv_ipas.len() * cfg.granules;
        let got = a
            .iter()
            .filter(|x| matches!(x, Action::HvS2Map { .. }))
            .count();
        assert_eq!(got, expected);
    }

    #[test]
    fn empty_bounds_mean_an_empty_alphabet() {
        let cfg = ExploreConfig {
            realms: 0,
            devices: 0,
            granules: 0,
            hv_ipas: vec![],
            ipas: vec![],
            ..Default::default()
        };
        assert!(action_alphabet(&cfg).is_empty());
    }

    #[test]
    fn disabled_overlap_check_is_caught() {
        let cfg = ExploreConfig {
            depth: 3,
            knobs: Knobs { skip_reverse_map_check: true, ..Default::default() },
            stop_on_first: true,
            ..Default::default()
        };
        let out = explore(&cfg).unwrap();
        assert!(!out.violations.is_empty());
        let v = &out.violations[0];
        assert_eq!(v.check, "i5_no_pa_overlap");
        assert!(v.depth <= 3);
    }

    #[test]
    fn tiny_budget_is_reported() {
        let cfg = ExploreConfig { depth: 3, max_states: 10, ..Default::default() };
        assert_eq!(explore(&cfg).unwrap_err(), SimError::BudgetExceeded);
    }
}
