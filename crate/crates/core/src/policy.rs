// SPDX-License-Identifier: Apache-2.0

//! Remote-verifier policy and the report verification it drives.
//!
//! A policy file is plain `key=value` lines with `#` comments:
//!
//! ```text
//! realm_measurement=<64 hex chars>   # optional
//! firmware_digest=<64 hex chars>     # expecting a device section
//! debug_disabled=true
//! bars=2,1                           # expected BAR sizes in granules
//! ```

use crate::rmm::AttestationReport;
use crate::types::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerifyFailReason {
    MeasurementMismatch,
    NoDeviceSection,
    BadSignature,
    FirmwareMismatch,
    DebugEnabled,
    BarMismatch,
    BarNotInLog,
}

impl VerifyFailReason {
    pub fn name(self) -> &'static str {
        match self {
            VerifyFailReason::MeasurementMismatch => "MeasurementMismatch",
            VerifyFailReason::NoDeviceSection => "NoDeviceSection",
            VerifyFailReason::BadSignature => "BadSignature",
            VerifyFailReason::FirmwareMismatch => "FirmwareMismatch",
            VerifyFailReason::DebugEnabled => "DebugEnabled",
            VerifyFailReason::BarMismatch => "BarMismatch",
            VerifyFailReason::BarNotInLog => "BarNotInLog",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        use VerifyFailReason::*;
        Some(match s {
            "MeasurementMismatch" => MeasurementMismatch,
            "NoDeviceSection" => NoDeviceSection,
            "BadSignature" => BadSignature,
            "FirmwareMismatch" => FirmwareMismatch,
            "DebugEnabled" => DebugEnabled,
            "BarMismatch" => BarMismatch,
            "BarNotInLog" => BarNotInLog,
            _ => return None,
        })
    }
}

/// What the remote verifier expects of a realm and its device.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Policy {
    pub realm_measurement: Option<Digest>,
    pub firmware_digest: Option<Digest>,
    pub debug_disabled: bool,
    /// Expected BAR sizes in granules, in BAR order.
    pub bars: Option<Vec<u64>>,
}

impl Policy {
    fn expects_device(&self) -> bool {
        self.firmware_digest.is_some() || self.bars.is_some()
    }

    pub fn parse(text: &str) -> Result<Policy, String> {
        let mut p = Policy {
            debug_disabled: true,
            ..Policy::default()
        };
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("policy line {}: expected key=value", no + 1))?;
            match key.trim() {
                "realm_measurement" => {
                    p.realm_measurement = Some(
                        Digest::from_hex(value.trim())
                            .ok_or_else(|| format!("policy line {}: bad digest", no + 1))?,
                    )
                }
                "firmware_digest" => {
                    p.firmware_digest = Some(
                        Digest::from_hex(value.trim())
                            .ok_or_else(|| format!("policy line {}: bad digest", no + 1))?,
                    )
                }
                "debug_disabled" => p.debug_disabled = value.trim() == "true",
                "bars" => {
                    let sizes: Result<Vec<u64>, _> =
                        value.trim().split(',').map(|s| s.trim().parse()).collect();
                    p.bars = Some(
                        sizes.map_err(|_| format!("policy line {}: bad bar list", no + 1))?,
                    );
                }
                other => return Err(format!("policy line {}: unknown key '{other}'", no + 1)),
            }
        }
        Ok(p)
    }
}

/// The remote verifier's checks: the realm measurement, the device report's
/// authenticity and content, and that every declared BAR granule actually
/// went through the measured data path.
pub fn verify_report(report: &AttestationReport, policy: &Policy) -> Result<(), VerifyFailReason> {
    if let Some(expected) = policy.realm_measurement {
        if report.realm_measurement != expected {
            return Err(VerifyFailReason::MeasurementMismatch);
        }
    }
    if !policy.expects_device() {
        return Ok(());
    }
    let Some(section) = &report.device_section else {
        return Err(VerifyFailReason::NoDeviceSection);
    };
    if !section.verify_signature() {
        return Err(VerifyFailReason::BadSignature);
    }
    if let Some(expected) = policy.firmware_digest {
        if section.firmware_digest != expected {
            return Err(VerifyFailReason::FirmwareMismatch);
        }
    }
    if policy.debug_disabled && !section.debug_disabled {
        return Err(VerifyFailReason::DebugEnabled);
    }
    if let Some(expected_bars) = &policy.bars {
        let got: Vec<u64> = report
            .bar_layout
            .iter()
            .map(|&(_, size)| size / GRANULE_SIZE)
            .collect();
        if &got != expected_bars {
            return Err(VerifyFailReason::BarMismatch);
        }
    }
    // All device-mapped memory must be in the protected region: every BAR
    // granule shows up in the measured data log.
    for &(base, size) in &report.bar_layout {
        for g in 0..size / GRANULE_SIZE {
            let ipa = Ipa(base.0 + g * GRANULE_SIZE);
            if !report.data_log.iter().any(|e| e.ipa == ipa) {
                return Err(VerifyFailReason::BarNotInLog);
            }
        }
    }
    Ok(())
}
