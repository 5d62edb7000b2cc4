// SPDX-License-Identifier: Apache-2.0

//! Deterministic simulator of world-isolated memory, two-stage device
//! translation, and link-encrypted PCIe device attachment for confidential
//! VMs.
//!
//! The model has four cooperating privilege domains:
//!
//! * [`memory`] — physical granules tagged with one of four worlds, the
//!   protection table, and protection-checked access with symbolic
//!   per-realm memory encryption;
//! * [`rmm`] — the trusted realm manager: realm lifecycle, stage-2
//!   translation with a reverse ownership map, measurement, attestation;
//! * [`monitor`] — root-world firmware owning the protection table, all
//!   SMMU structures, the realm-device registry, and link keys;
//! * [`smmu`] and [`pcie`] — the device-side MMU and the bus fabric with
//!   root-port key stores and the symbolic encryption envelope.
//!
//! On top sit the verification harnesses: per-step invariant checking
//! ([`invariants`]), a scenario script runner ([`script`]), the attack
//! scenario registry ([`adversary`]), bounded exhaustive exploration
//! ([`explore`]), and a deterministic fuzzer ([`fuzz`]).

pub mod adversary;
pub mod canon;
pub mod config;
pub mod error;
pub mod events;
pub mod explore;
pub mod fuzz;
pub mod invariants;
pub mod kernel;
pub mod memory;
pub mod monitor;
pub mod pcie;
pub mod policy;
pub mod rmm;
pub mod script;
pub mod setup;
pub mod smmu;
pub mod trace;
pub mod types;

pub use config::{DeviceBehavior, DeviceSpec, Knobs, SimConfig};
pub use error::{SimError, SimResult};
pub use invariants::{check_invariants, check_trace, count_interface_calls, InvariantReport};
pub use kernel::{Action, ActionOutput, RealmRef, Sim, SimState, StepFault};
pub use types::*;
