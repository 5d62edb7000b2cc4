// SPDX-License-Identifier: Apache-2.0

//! Core identifier and address newtypes shared by every subsystem.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Smallest unit of physical memory tracked by the protection table.
pub const GRANULE_SIZE: u64 = 4096;

/// Host physical address. Always granule-aligned when it names a granule.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhysAddr(pub u64);

impl PhysAddr {
    pub fn granule_index(self) -> usize {
        (self.0 / GRANULE_SIZE) as usize
    }

    pub fn is_granule_aligned(self) -> bool {
        self.0 % GRANULE_SIZE == 0
    }

    pub fn from_granule_index(idx: usize) -> Self {
        PhysAddr(idx as u64 * GRANULE_SIZE)
    }
}

impl fmt::Debug for PhysAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pa:{:#x}", self.0)
    }
}

/// Guest (intermediate) physical address inside one VM's address space.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Ipa(pub u64);

impl Ipa {
    pub fn is_granule_aligned(self) -> bool {
        self.0 % GRANULE_SIZE == 0
    }

    pub fn granule_base(self) -> Ipa {
        Ipa(self.0 & !(GRANULE_SIZE - 1))
    }

    pub fn offset_in_granule(self) -> u64 {
        self.0 % GRANULE_SIZE
    }
}

impl fmt::Debug for Ipa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ipa:{:#x}", self.0)
    }
}

/// Realm VM identifier, unique for the lifetime of a simulation.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Vmid(pub u32);

impl fmt::Debug for Vmid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vmid:{}", self.0)
    }
}

/// Index into the SMMU stream table; one per device function.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StreamId(pub u32);

impl fmt::Debug for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sid:{:#x}", self.0)
    }
}

/// PCIe requester identity carried by every transaction.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Rid(pub u32);

impl fmt::Debug for Rid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rid:{:#x}", self.0)
    }
}

/// Opaque key identifier for the symbolic encryption envelopes (link keys
/// and per-realm memory encryption keys).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KeyId(pub u64);

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "key:{}", self.0)
    }
}

/// PCIe bus/device/function triple, packed bus[15:8] dev[7:3] fn[2:0].
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BusAddr(pub u16);

impl BusAddr {
    /// Stream ids and requester ids both derive deterministically from the
    /// bus address so that attach is reproducible across runs.
    pub fn stream_id(self) -> StreamId {
        StreamId(self.0 as u32)
    }

    pub fn rid(self) -> Rid {
        Rid(self.0 as u32)
    }
}

impl fmt::Debug for BusAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:02x}:{:02x}.{}",
            self.0 >> 8,
            (self.0 >> 3) & 0x1f,
            self.0 & 0x7
        )
    }
}

/// One of the four physical address spaces. Every granule carries exactly
/// one of these tags; accessors carry one as their execution mode.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub enum World {
    Normal,
    Secure,
    Realm,
    Root,
}

impl World {
    pub fn as_u8(self) -> u8 {
        match self {
            World::Normal => 0,
            World::Secure => 1,
            World::Realm => 2,
            World::Root => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            World::Normal => "Normal",
            World::Secure => "Secure",
            World::Realm => "Realm",
            World::Root => "Root",
        }
    }
}

/// Which hardware element originates a memory access.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum AccessorKind {
    Core,
    Smmu,
    RootPort,
}

/// Execution context presented to the granule protection check.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct AccessorCtx {
    pub kind: AccessorKind,
    pub world: World,
    pub vmid: Option<Vmid>,
    pub mec_key: Option<KeyId>,
}

impl AccessorCtx {
    /// Root-world firmware context.
    pub fn monitor() -> Self {
        AccessorCtx {
            kind: AccessorKind::Core,
            world: World::Root,
            vmid: None,
            mec_key: None,
        }
    }

    /// Normal-world hypervisor context.
    pub fn hypervisor() -> Self {
        AccessorCtx {
            kind: AccessorKind::Core,
            world: World::Normal,
            vmid: None,
            mec_key: None,
        }
    }

    /// A core executing inside a realm VM.
    pub fn realm_core(vmid: Vmid, mec_key: KeyId) -> Self {
        AccessorCtx {
            kind: AccessorKind::Core,
            world: World::Realm,
            vmid: Some(vmid),
            mec_key: Some(mec_key),
        }
    }

    /// The SMMU performing an access on behalf of a device transaction.
    pub fn smmu(world: World, mec_key: Option<KeyId>) -> Self {
        AccessorCtx {
            kind: AccessorKind::Smmu,
            world,
            vmid: None,
            mec_key,
        }
    }
}

/// Read or write, for memory and device accesses.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum RwOp {
    Read,
    Write,
}

impl RwOp {
    pub fn name(self) -> &'static str {
        match self {
            RwOp::Read => "read",
            RwOp::Write => "write",
        }
    }
}

/// SHA-256 digest value used for measurements and content hashes.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn to_hex(self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Digest> {
        let bytes = hex::decode(s).ok()?;
        let arr: [u8; 32] = bytes.try_into().ok()?;
        Some(Digest(arr))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..", &self.to_hex()[..12])
    }
}

/// Hash arbitrary byte slices into a [`Digest`].
pub fn sha256(parts: &[&[u8]]) -> Digest {
    use sha2::{Digest as _, Sha256};
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}
