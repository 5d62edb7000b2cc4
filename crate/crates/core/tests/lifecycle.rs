// SPDX-License-Identifier: Apache-2.0

//! End-to-end lifecycle against the library API: full build-attach-verify
//! flow with a device DMA round trip, equivalence of the pre-mapping mode,
//! and exact interface-call accounting.

use casim_core::invariants::count_interface_calls;
use casim_core::memory::ReadOutcome;
use casim_core::pcie::{REG_DOORBELL, REG_DST_IPA, REG_LEN, REG_SRC_IPA, REG_STATUS, STATUS_DONE};
use casim_core::policy::{verify_report, Policy};
use casim_core::rmm::AttachParams;
use casim_core::types::*;
use casim_core::{Sim, SimConfig};

const DEV0: BusAddr = BusAddr(0x0100);

const BUF0: Ipa = Ipa(0x2000);
const BUF1: Ipa = Ipa(0x3000);
const BUF2: Ipa = Ipa(0x4000);
const BAR0A: Ipa = Ipa(0x8000);
const BAR0B: Ipa = Ipa(0x9000);
const BAR1: Ipa = Ipa(0xA000);
const CFG: Ipa = Ipa(0xB000);

/// Build the canonical one-realm world with the two-BAR device on the
/// default (256-granule) configuration.
fn build(opt: bool) -> (Sim, Vmid) {
    let cfg = SimConfig { opt, ..SimConfig::default() };
    let mut sim = Sim::new(cfg);
    let vmid = sim.rmi_realm_create("r0").unwrap();
    let plan: [(u64, Ipa); 7] = [
        (0x10000, BUF0),
        (0x11000, BUF1),
        (0x12000, BUF2),
        (0x13000, BAR0A),
        (0x14000, BAR0B),
        (0x15000, BAR1),
        (0x16000, CFG),
    ];
    for (dst, _) in plan {
        sim.rmi_granule_delegate(PhysAddr(dst)).unwrap();
    }
    for (i, (dst, ipa)) in plan.iter().enumerate() {
        let src = PhysAddr(0x1000 * (i as u64 + 1));
        let attach = (*ipa == CFG).then(|| AttachParams {
            bus: DEV0,
            bars: vec![(BAR0A, 2), (BAR1, 1)],
        });
        sim.rmi_data_create(vmid, src, PhysAddr(*dst), *ipa, attach).unwrap();
    }
    sim.rmi_realm_activate(vmid).unwrap();
    (sim, vmid)
}

fn run_dma_job(sim: &mut Sim, vmid: Vmid) -> Vec<u8> {
    sim.rsi_delegate_prot_mem(
        vmid,
        &[(BUF0, GRANULE_SIZE), (BUF1, GRANULE_SIZE), (BUF2, GRANULE_SIZE)],
        DEV0.stream_id(),
    )
    .unwrap();
    for (reg, val) in [
        (REG_SRC_IPA, BUF0.0),
        (REG_LEN, 64),
        (REG_DST_IPA, BUF2.0),
        (REG_DOORBELL, 1),
    ] {
        sim.mmio_access(vmid, Ipa(BAR0A.0 + reg), RwOp::Write, val).unwrap();
    }
    assert_eq!(
        sim.mmio_access(vmid, Ipa(BAR0A.0 + REG_STATUS), RwOp::Read, 0).unwrap(),
        Some(STATUS_DONE)
    );
    match sim.realm_mem_read(vmid, BUF2, 64).unwrap() {
        ReadOutcome::Bytes(b) => b,
        ReadOutcome::Ciphertext => panic!("owner read must decrypt"),
    }
}

#[test]
fn full_lifecycle_with_dma_round_trip() {
    let (mut sim, vmid) = build(false);

    // Attestation passes the remote-verifier policy for this device.
    let report = sim.attestation_report(vmid).unwrap();
    let policy = Policy {
        realm_measurement: Some(report.realm_measurement),
        firmware_digest: Some(sha256(&[b"fw-accel-1.0"])),
        debug_disabled: true,
        bars: Some(vec![2, 1]),
    };
    assert_eq!(verify_report(&report, &policy), Ok(()));
    assert_eq!(report.bar_layout, vec![(BAR0A, 2 * GRANULE_SIZE), (BAR1, GRANULE_SIZE)]);

    // Buffer 0 was staged with 0x11 bytes; the device negates into
    // buffer 2.
    let out = run_dma_job(&mut sim, vmid);
    assert_eq!(out, vec![0xEE; 64]);

    // MMIO round trip on the second BAR.
    sim.mmio_access(vmid, BAR1, RwOp::Write, 0xDEAD).unwrap();
    assert_eq!(sim.mmio_access(vmid, BAR1, RwOp::Read, 0).unwrap(), Some(0xDEAD));

    let check = sim.check_invariants();
    assert!(check.all_pass(), "{}", check.summary());

    sim.rmi_realm_destroy(vmid).unwrap();
    let check = sim.check_invariants();
    assert!(check.all_pass(), "{}", check.summary());
    assert!(casim_core::check_trace(&sim.events).is_empty());
}

#[test]
fn pre_mapping_mode_is_equivalent_and_quiet_at_runtime() {
    let (mut plain, v0) = build(false);
    let (mut opt, v1) = build(true);

    let report_plain = plain.attestation_report(v0).unwrap();
    let report_opt = opt.attestation_report(v1).unwrap();
    assert_eq!(report_plain, report_opt, "attestation evidence is identical");

    let act_plain = activation_step(&plain);
    let act_opt = activation_step(&opt);

    let out_plain = run_dma_job(&mut plain, v0);
    let out_opt = run_dma_job(&mut opt, v1);
    assert_eq!(out_plain, out_opt, "realm-visible DMA results are identical");

    // Identical final invariant reports.
    let rep_plain = plain.check_invariants();
    let rep_opt = opt.check_invariants();
    assert!(rep_plain.all_pass() && rep_opt.all_pass());
    assert_eq!(rep_plain, rep_opt);

    // Runtime delegations: the plain run installs one mapping per buffer
    // granule after activation; the pre-mapping run installs none.
    let runtime = |sim: &Sim, act: u64| {
        count_interface_calls(sim.events.iter().filter(|(step, _)| *step > act))
            .get("smc_delegate_prot_mem")
            .copied()
            .unwrap_or(0)
    };
    assert_eq!(runtime(&plain, act_plain), 3);
    assert_eq!(runtime(&opt, act_opt), 0);
}

fn activation_step(sim: &Sim) -> u64 {
    sim.events
        .iter()
        .filter_map(|(step, e)| match e {
            casim_core::events::Event::InterfaceCall { name: "rmi_realm_activate", .. } => {
                Some(*step)
            }
            _ => None,
        })
        .last()
        .expect("realm was activated")
}

/// Interface-call accounting for a k-buffer, p-pages-per-buffer DMA
/// workload under the two allocator extremes.
fn dma_workload(opt: bool, fragmented: bool, k: u64, p: u64) -> (u64, u64) {
    let cfg = SimConfig { opt, ..SimConfig::default() };
    let mut sim = Sim::new(cfg);
    let vmid = sim.rmi_realm_create("r0").unwrap();
    // Buffers at 0x20000 upward, one BAR granule, one config granule.
    let mut next_dst = 0x20000u64;
    let mut plan: Vec<(PhysAddr, Ipa)> = Vec::new();
    for i in 0..k * p {
        plan.push((PhysAddr(next_dst), Ipa(0x2000 + i * GRANULE_SIZE)));
        next_dst += GRANULE_SIZE;
    }
    let bar_pa = PhysAddr(next_dst);
    let cfg_pa = PhysAddr(next_dst + GRANULE_SIZE);
    let bar_ipa = Ipa(0x80000);
    let cfg_ipa = Ipa(0x90000);
    for (pa, _) in &plan {
        sim.rmi_granule_delegate(*pa).unwrap();
    }
    sim.rmi_granule_delegate(bar_pa).unwrap();
    sim.rmi_granule_delegate(cfg_pa).unwrap();
    for (pa, ipa) in &plan {
        sim.rmi_data_create(vmid, PhysAddr(0x1000), *pa, *ipa, None).unwrap();
    }
    sim.rmi_data_create(vmid, PhysAddr(0x1000), bar_pa, bar_ipa, None).unwrap();
    sim.rmi_data_create(
        vmid,
        PhysAddr(0x1000),
        cfg_pa,
        cfg_ipa,
        Some(AttachParams { bus: BusAddr(0x0200), bars: vec![(bar_ipa, 1)] }),
    )
    .unwrap();
    sim.rmi_realm_activate(vmid).unwrap();
    let act = activation_step(&sim);

    let sid = BusAddr(0x0200).stream_id();
    if fragmented {
        // Worst-case allocator: the guest maps one page at a time, one
        // call per page.
        for i in 0..k * p {
            sim.rsi_delegate_prot_mem(vmid, &[(Ipa(0x2000 + i * GRANULE_SIZE), GRANULE_SIZE)], sid)
                .unwrap();
        }
    } else {
        // Contiguous allocator: one call per buffer, each covering p pages.
        for b in 0..k {
            sim.rsi_delegate_prot_mem(
                vmid,
                &[(Ipa(0x2000 + b * p * GRANULE_SIZE), p * GRANULE_SIZE)],
                sid,
            )
            .unwrap();
        }
    }
    let counts = count_interface_calls(sim.events.iter().filter(|(step, _)| *step > act));
    let rsi = counts.get("rsi_delegate_prot_mem").copied().unwrap_or(0);
    let smc = counts.get("smc_delegate_prot_mem").copied().unwrap_or(0);
    let check = sim.check_invariants();
    assert!(check.all_pass(), "{}", check.summary());
    (rsi, smc)
}

#[test]
fn call_accounting_matches_the_allocator_shape() {
    let (k, p) = (3, 4);
    // Contiguous: one delegation call per buffer; the monitor still
    // installs one stage-2 entry per page.
    assert_eq!(dma_workload(false, false, k, p), (k, k * p));
    // Maximally fragmenting: one call per page and one install per page.
    assert_eq!(dma_workload(false, true, k, p), (k * p, k * p));
    // Pre-mapping mode: the calls become no-ops; zero runtime installs.
    assert_eq!(dma_workload(true, false, k, p), (k, 0));
    assert_eq!(dma_workload(true, true, k, p), (k * p, 0));
}
