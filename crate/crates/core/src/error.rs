// SPDX-License-Identifier: Apache-2.0

//! Fault vocabulary of the simulator.
//!
//! Every operation either succeeds or stops at exactly one of these faults.
//! The names are stable strings: scenario scripts assert them with
//! `expect error=<Name>` and attack scenarios name their expected blocking
//! point with them.

use thiserror::Error;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Error)]
pub enum SimError {
    // world_memory
    #[error("caller is not the root-world monitor")]
    NotRoot,
    #[error("physical address outside the configured address space")]
    OutOfRange,
    #[error("granule protection check denied the access")]
    GpcDenied,

    // realm manager
    #[error("granule is not in the expected world for this transition")]
    WrongWorld,
    #[error("granule is still mapped in a stage-2 table")]
    StillMapped,
    #[error("no free realm resources")]
    ResourceExhausted,
    #[error("destination granule is already mapped to another realm VM")]
    DoubleMap,
    #[error("guest address is already mapped")]
    IpaInUse,
    #[error("a BAR region is not fully mapped to the realm VM")]
    BarNotMapped,
    #[error("config-space granule is not in realm world")]
    ConfigNotRealm,
    #[error("realm VM is already active")]
    RealmActive,
    #[error("device attach did not complete")]
    AttachIncomplete,
    #[error("caller does not own this device")]
    NotOwner,
    #[error("guest address is not mapped in the realm's stage-2 table")]
    Unmapped,
    #[error("no such realm VM")]
    UnknownVm,
    #[error("realm VM is not active")]
    NotActive,

    // monitor
    #[error("stream id is already assigned to a realm")]
    StreamIdTaken,
    #[error("no device at this bus address")]
    DeviceNotFound,
    #[error("device attestation failed")]
    AttestFailed,
    #[error("realm VM already has an attached device")]
    VmAlreadyHasDevice,
    #[error("physical address is mapped in another device's stage-2 table")]
    PaOwnedByOtherDevice,
    #[error("stream belongs to a realm device")]
    RealmStreamDenied,
    #[error("configuration field is not on the allow-list")]
    FieldDenied,
    #[error("address translation services must stay disabled")]
    AtsDenied,
    #[error("call did not originate from the realm management monitor")]
    NotRmm,

    // pcie fabric
    #[error("requester id already has a link key")]
    RidInUse,
    #[error("transaction discarded at the root port")]
    DiscardedAtRootPort,
    #[error("no valid stream table entry for this transaction")]
    NoSte,
    #[error("stage-2 walk found no mapping")]
    TranslationFault,
    #[error("address does not fall in a mapped BAR region")]
    NotBarRegion,

    // harness
    #[error("no scenario registered under this name")]
    UnknownScenario,
    #[error("attack scenario was not blocked as expected")]
    ScenarioNotBlocked,
    #[error("exploration exceeded the configured state budget")]
    BudgetExceeded,
}

impl SimError {
    /// Stable name used in traces and script `expect` clauses.
    pub fn name(self) -> &'static str {
        use SimError::*;
        match self {
            NotRoot => "NotRoot",
            OutOfRange => "OutOfRange",
            GpcDenied => "GpcDenied",
            WrongWorld => "WrongWorld",
            StillMapped => "StillMapped",
            ResourceExhausted => "ResourceExhausted",
            DoubleMap => "DoubleMap",
            IpaInUse => "IpaInUse",
            BarNotMapped => "BarNotMapped",
            ConfigNotRealm => "ConfigNotRealm",
            RealmActive => "RealmActive",
            AttachIncomplete => "AttachIncomplete",
            NotOwner => "NotOwner",
            Unmapped => "Unmapped",
            UnknownVm => "UnknownVm",
            NotActive => "NotActive",
            StreamIdTaken => "StreamIdTaken",
            DeviceNotFound => "DeviceNotFound",
            AttestFailed => "AttestFailed",
            VmAlreadyHasDevice => "VmAlreadyHasDevice",
            PaOwnedByOtherDevice => "PaOwnedByOtherDevice",
            RealmStreamDenied => "RealmStreamDenied",
            FieldDenied => "FieldDenied",
            AtsDenied => "AtsDenied",
            NotRmm => "NotRmm",
            RidInUse => "RidInUse",
            DiscardedAtRootPort => "DiscardedAtRootPort",
            NoSte => "NoSte",
            TranslationFault => "TranslationFault",
            NotBarRegion => "NotBarRegion",
            UnknownScenario => "UnknownScenario",
            ScenarioNotBlocked => "ScenarioNotBlocked",
            BudgetExceeded => "BudgetExceeded",
        }
    }

    pub fn from_name(name: &str) -> Option<SimError> {
        use SimError::*;
        Some(match name {
            "NotRoot" => NotRoot,
            "OutOfRange" => OutOfRange,
            "GpcDenied" => GpcDenied,
            "WrongWorld" => WrongWorld,
            "StillMapped" => StillMapped,
            "ResourceExhausted" => ResourceExhausted,
            "DoubleMap" => DoubleMap,
            "IpaInUse" => IpaInUse,
            "BarNotMapped" => BarNotMapped,
            "ConfigNotRealm" => ConfigNotRealm,
            "RealmActive" => RealmActive,
            "AttachIncomplete" => AttachIncomplete,
            "NotOwner" => NotOwner,
            "Unmapped" => Unmapped,
            "UnknownVm" => UnknownVm,
            "NotActive" => NotActive,
            "StreamIdTaken" => StreamIdTaken,
            "DeviceNotFound" => DeviceNotFound,
            "AttestFailed" => AttestFailed,
            "VmAlreadyHasDevice" => VmAlreadyHasDevice,
            "PaOwnedByOtherDevice" => PaOwnedByOtherDevice,
            "RealmStreamDenied" => RealmStreamDenied,
            "FieldDenied" => FieldDenied,
            "AtsDenied" => AtsDenied,
            "NotRmm" => NotRmm,
            "RidInUse" => RidInUse,
            "DiscardedAtRootPort" => DiscardedAtRootPort,
            "NoSte" => NoSte,
            "TranslationFault" => TranslationFault,
            "NotBarRegion" => NotBarRegion,
            "UnknownScenario" => UnknownScenario,
            "ScenarioNotBlocked" => ScenarioNotBlocked,
            "BudgetExceeded" => BudgetExceeded,
            _ => return None,
        })
    }
}

pub type SimResult<T> = Result<T, SimError>;
