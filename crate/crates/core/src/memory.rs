// SPDX-License-Identifier: Apache-2.0

//! Physical memory as world-tagged granules.
//!
//! Holds the granule protection table (a world tag per granule plus a
//! generation counter), the per-realm memory-encryption key store, and the
//! protection-checked access path. Encryption is symbolic: a granule
//! written by a realm-keyed accessor carries that key id, and a read under
//! a different key yields an opaque ciphertext marker instead of bytes.

use crate::canon::Canon;
use crate::error::{SimError, SimResult};
use crate::events::Event;
use crate::kernel::Sim;
use crate::types::*;
use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

/// Immutable byte block with its content digest computed once at build
/// time. Shared between cloned states; writes copy.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    bytes: Arc<Vec<u8>>,
    digest: Digest,
}

impl Blob {
    pub fn new(bytes: Vec<u8>) -> Self {
        let digest = sha256(&[&bytes]);
        Blob { bytes: Arc::new(bytes), digest }
    }

    pub fn zeroed(len: usize) -> Self {
        Blob::new(vec![0u8; len])
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn write(&mut self, offset: usize, data: &[u8]) {
        let buf = Arc::make_mut(&mut self.bytes);
        buf[offset..offset + data.len()].copy_from_slice(data);
        self.digest = sha256(&[buf]);
    }
}

fn zero_granule_digest() -> Digest {
    static ZERO: OnceLock<Digest> = OnceLock::new();
    *ZERO.get_or_init(|| sha256(&[&vec![0u8; GRANULE_SIZE as usize]]))
}

/// Contents and encryption tag of one granule. `blob: None` means all
/// zeroes, which is by far the common case.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GranuleData {
    blob: Option<Blob>,
    pub mec_key: Option<KeyId>,
}

impl GranuleData {
    pub fn read(&self, offset: usize, len: usize) -> Vec<u8> {
        match &self.blob {
            Some(b) => b.bytes()[offset..offset + len].to_vec(),
            None => vec![0u8; len],
        }
    }

    pub fn write(&mut self, offset: usize, data: &[u8]) {
        let blob = self
            .blob
            .get_or_insert_with(|| Blob::zeroed(GRANULE_SIZE as usize));
        blob.write(offset, data);
    }

    pub fn content_digest(&self) -> Digest {
        match &self.blob {
            Some(b) => b.digest(),
            None => zero_granule_digest(),
        }
    }

    pub fn is_zeroed(&self) -> bool {
        match &self.blob {
            Some(b) => b.bytes().iter().all(|&b| b == 0),
            None => true,
        }
    }

    pub fn scrub(&mut self) {
        self.blob = None;
        self.mec_key = None;
    }
}

/// Outcome of a protection-checked read. A mismatched encryption key never
/// exposes bytes; the caller sees the marker instead.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ReadOutcome {
    Bytes(Vec<u8>),
    Ciphertext,
}

#[derive(Clone, Debug)]
pub struct MemoryState {
    /// World tag per granule. Index is the granule number.
    pub worlds: Vec<World>,
    pub granules: Vec<GranuleData>,
    /// Bumped on every world change; granule-protection caches key their
    /// fills against it.
    pub generation: u64,
    /// Per-realm memory encryption keys.
    pub mec_keys: BTreeMap<Vmid, KeyId>,
}

impl MemoryState {
    pub fn new(total_granules: usize) -> Self {
        MemoryState {
            worlds: vec![World::Normal; total_granules],
            granules: vec![GranuleData::default(); total_granules],
            generation: 0,
            mec_keys: BTreeMap::new(),
        }
    }

    pub fn world(&self, pa: PhysAddr) -> World {
        self.worlds[pa.granule_index()]
    }

    pub fn canonize(&self, c: &mut Canon, with_counters: bool) {
        for w in &self.worlds {
            c.u8(w.as_u8());
        }
        if with_counters {
            c.u64(self.generation);
        }
        for g in &self.granules {
            c.digest(&g.content_digest());
            c.opt_u64(g.mec_key.map(|k| k.0));
        }
        c.u64(self.mec_keys.len() as u64);
        for (vmid, key) in &self.mec_keys {
            c.u32(vmid.0);
            c.u64(key.0);
        }
    }
}

/// The access matrix. Root reaches everything; realm and secure accessors
/// additionally reach normal memory; normal accessors only their own world.
pub fn gpc_allows(accessor_world: World, granule_world: World) -> bool {
    match accessor_world {
        World::Root => true,
        World::Realm => matches!(granule_world, World::Realm | World::Normal),
        World::Secure => matches!(granule_world, World::Secure | World::Normal),
        World::Normal => granule_world == World::Normal,
    }
}

impl Sim {
    pub(crate) fn pa_index(&self, pa: PhysAddr) -> SimResult<usize> {
        if !pa.is_granule_aligned() {
            return Err(SimError::OutOfRange);
        }
        let idx = pa.granule_index();
        if idx >= self.state.mem.worlds.len() {
            return Err(SimError::OutOfRange);
        }
        Ok(idx)
    }

    /// Pure protection check of one accessor against one granule.
    pub fn gpc_check(&self, accessor: AccessorCtx, pa: PhysAddr) -> SimResult<bool> {
        let idx = self.pa_index(pa)?;
        Ok(gpc_allows(accessor.world, self.state.mem.worlds[idx]))
    }

    /// Retag one granule's world. Monitor only. Publishes a flush to every
    /// protection-check holder so no stale translation survives the change.
    pub fn gpt_set_world(
        &mut self,
        pa: PhysAddr,
        world: World,
        caller: AccessorCtx,
    ) -> SimResult<()> {
        if caller.world != World::Root {
            return Err(SimError::NotRoot);
        }
        let idx = self.pa_index(pa)?;
        let from = self.state.mem.worlds[idx];
        if from == world {
            return Ok(());
        }
        self.state.mem.worlds[idx] = world;
        self.state.mem.generation += 1;
        let generation = self.state.mem.generation;
        let zeroed = self.state.mem.granules[idx].is_zeroed();
        self.events.push(Event::GptSetWorld { pa, from, world, generation, zeroed });
        self.events.push(Event::FlushPublished { pa, generation });
        self.smmu_flush_pa(pa);
        Ok(())
    }

    fn gpc_gate(&mut self, accessor: AccessorCtx, pa: PhysAddr) -> SimResult<usize> {
        let idx = self.pa_index(pa)?;
        let granule_world = self.state.mem.worlds[idx];
        if !gpc_allows(accessor.world, granule_world) {
            self.events.push(Event::GpcFault {
                accessor_world: accessor.world,
                pa,
                granule_world,
            });
            return Err(SimError::GpcDenied);
        }
        Ok(idx)
    }

    /// Protection-checked read of up to one granule. `pa` may be unaligned;
    /// the read must not cross a granule boundary.
    pub fn mem_read(
        &mut self,
        accessor: AccessorCtx,
        pa: PhysAddr,
        len: usize,
    ) -> SimResult<ReadOutcome> {
        let base = PhysAddr(pa.0 & !(GRANULE_SIZE - 1));
        let offset = (pa.0 % GRANULE_SIZE) as usize;
        assert!(offset + len <= GRANULE_SIZE as usize, "read crosses granule");
        let idx = self.gpc_gate(accessor, base)?;
        let granule_world = self.state.mem.worlds[idx];
        self.events.push(Event::MemAccess {
            accessor_world: accessor.world,
            granule_world,
            op: RwOp::Read,
            pa,
        });
        let g = &self.state.mem.granules[idx];
        match g.mec_key {
            Some(tag) if accessor.mec_key != Some(tag) => Ok(ReadOutcome::Ciphertext),
            _ => Ok(ReadOutcome::Bytes(g.read(offset, len))),
        }
    }

    /// Protection-checked write of up to one granule. A write lands with
    /// the accessor's encryption key as the granule tag when the granule is
    /// realm-world, and untagged otherwise.
    pub fn mem_write(
        &mut self,
        accessor: AccessorCtx,
        pa: PhysAddr,
        data: &[u8],
    ) -> SimResult<()> {
        let base = PhysAddr(pa.0 & !(GRANULE_SIZE - 1));
        let offset = (pa.0 % GRANULE_SIZE) as usize;
        assert!(
            offset + data.len() <= GRANULE_SIZE as usize,
            "write crosses granule"
        );
        let idx = self.gpc_gate(accessor, base)?;
        let granule_world = self.state.mem.worlds[idx];
        self.events.push(Event::MemAccess {
            accessor_world: accessor.world,
            granule_world,
            op: RwOp::Write,
            pa,
        });
        let g = &mut self.state.mem.granules[idx];
        g.write(offset, data);
        g.mec_key = if granule_world == World::Realm {
            accessor.mec_key
        } else {
            None
        };
        Ok(())
    }

    /// Zero a granule and drop its encryption tag. Monitor only.
    pub fn scrub(&mut self, pa: PhysAddr, caller: AccessorCtx) -> SimResult<()> {
        if caller.world != World::Root {
            return Err(SimError::NotRoot);
        }
        let idx = self.pa_index(pa)?;
        self.state.mem.granules[idx].scrub();
        self.events.push(Event::Scrubbed { pa });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::setup::small_config;

    fn sim() -> Sim {
        Sim::new(small_config(Default::default(), false))
    }

    // The access matrix, written out by hand from the world model: root
    // reaches all, realm and secure also reach normal, normal only normal.
    #[test]
    fn gpc_matrix_matches_oracle() {
        use World::*;
        let expected = [
            // (accessor, granule, allowed)
            (Normal, Normal, true),
            (Normal, Secure, false),
            (Normal, Realm, false),
            (Normal, Root, false),
            (Secure, Normal, true),
            (Secure, Secure, true),
            (Secure, Realm, false),
            (Secure, Root, false),
            (Realm, Normal, true),
            (Realm, Secure, false),
            (Realm, Realm, true),
            (Realm, Root, false),
            (Root, Normal, true),
            (Root, Secure, true),
            (Root, Realm, true),
            (Root, Root, true),
        ];
        for (accessor, granule, allowed) in expected {
            assert_eq!(gpc_allows(accessor, granule), allowed, "{accessor:?} -> {granule:?}");
        }
    }

    #[test]
    fn gpc_check_reads_the_table() {
        let mut s = sim();
        let pa = PhysAddr(0x1000);
        s.gpt_set_world(pa, World::Realm, AccessorCtx::monitor()).unwrap();
        assert!(!s.gpc_check(AccessorCtx::hypervisor(), pa).unwrap());
        assert!(s.gpc_check(AccessorCtx::realm_core(Vmid(0), KeyId(1)), pa).unwrap());
        assert!(s.gpc_check(AccessorCtx::monitor(), pa).unwrap());
    }

    #[test]
    fn set_world_is_monitor_only_and_bumps_generation() {
        let mut s = sim();
        let before = s.state.mem.generation;
        s.gpt_set_world(PhysAddr(0x1000), World::Realm, AccessorCtx::monitor()).unwrap();
        assert_eq!(s.state.mem.generation, before + 1);
        assert_eq!(
            s.gpt_set_world(PhysAddr(0x1000), World::Normal, AccessorCtx::hypervisor()),
            Err(SimError::NotRoot)
        );
        // Out of the configured space.
        assert_eq!(
            s.gpt_set_world(PhysAddr(0xFFFF_F000), World::Root, AccessorCtx::monitor()),
            Err(SimError::OutOfRange)
        );
        // Unaligned addresses are rejected outright.
        assert_eq!(
            s.gpt_set_world(PhysAddr(0x1004), World::Realm, AccessorCtx::monitor()),
            Err(SimError::OutOfRange)
        );
    }

    #[test]
    fn same_world_write_is_idempotent() {
        let mut s = sim();
        let pa = PhysAddr(0x1000);
        s.gpt_set_world(pa, World::Realm, AccessorCtx::monitor()).unwrap();
        let gen = s.state.mem.generation;
        s.gpt_set_world(pa, World::Realm, AccessorCtx::monitor()).unwrap();
        assert_eq!(s.state.mem.generation, gen);
    }

    #[test]
    fn keyed_write_round_trips_for_the_owner() {
        let mut s = sim();
        let pa = PhysAddr(0x1000);
        s.gpt_set_world(pa, World::Realm, AccessorCtx::monitor()).unwrap();
        let vm0 = AccessorCtx::realm_core(Vmid(0), KeyId(7));
        s.mem_write(vm0, pa, &[0xAB; 32]).unwrap();
        assert_eq!(s.mem_read(vm0, pa, 32).unwrap(), ReadOutcome::Bytes(vec![0xAB; 32]));
    }

    // Key-mismatch rule applied by hand: the monitor holds no realm key,
    // so a raw read of realm-written data sees ciphertext, never the
    // plaintext.
    #[test]
    fn raw_read_of_keyed_granule_is_ciphertext() {
        let mut s = sim();
        let pa = PhysAddr(0x1000);
        s.gpt_set_world(pa, World::Realm, AccessorCtx::monitor()).unwrap();
        let vm0 = AccessorCtx::realm_core(Vmid(0), KeyId(7));
        s.mem_write(vm0, pa, &[0xAB; 32]).unwrap();
        assert_eq!(s.mem_read(AccessorCtx::monitor(), pa, 32).unwrap(), ReadOutcome::Ciphertext);
        // Another realm's key does not open it either.
        let vm1 = AccessorCtx::realm_core(Vmid(1), KeyId(8));
        assert_eq!(s.mem_read(vm1, pa, 32).unwrap(), ReadOutcome::Ciphertext);
    }

    #[test]
    fn normal_world_cannot_touch_realm_granules() {
        let mut s = sim();
        let pa = PhysAddr(0x1000);
        s.gpt_set_world(pa, World::Realm, AccessorCtx::monitor()).unwrap();
        assert_eq!(
            s.mem_read(AccessorCtx::hypervisor(), pa, 16),
            Err(SimError::GpcDenied)
        );
        // The denial is recorded as a protection fault in the event log.
        assert!(s
            .events
            .iter()
            .any(|(_, e)| matches!(e, Event::GpcFault { accessor_world: World::Normal, .. })));
    }

    #[test]
    fn scrub_zeroes_and_unkeys() {
        let mut s = sim();
        let pa = PhysAddr(0x1000);
        s.gpt_set_world(pa, World::Realm, AccessorCtx::monitor()).unwrap();
        let vm0 = AccessorCtx::realm_core(Vmid(0), KeyId(7));
        s.mem_write(vm0, pa, &[0xAB; 32]).unwrap();
        assert_eq!(s.scrub(pa, AccessorCtx::hypervisor()), Err(SimError::NotRoot));
        s.scrub(pa, AccessorCtx::monitor()).unwrap();
        let idx = pa.granule_index();
        assert!(s.state.mem.granules[idx].is_zeroed());
        assert_eq!(s.state.mem.granules[idx].mec_key, None);
        // Anyone allowed now reads zeroes.
        assert_eq!(
            s.mem_read(vm0, pa, 8).unwrap(),
            ReadOutcome::Bytes(vec![0u8; 8])
        );
    }

    #[test]
    fn realm_writes_to_normal_memory_stay_untagged() {
        let mut s = sim();
        let pa = PhysAddr(0x7000);
        let vm0 = AccessorCtx::realm_core(Vmid(0), KeyId(7));
        s.mem_write(vm0, pa, &[1, 2, 3]).unwrap();
        assert_eq!(s.state.mem.granules[pa.granule_index()].mec_key, None);
    }
}
