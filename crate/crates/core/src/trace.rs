// SPDX-License-Identifier: Apache-2.0

//! Structured trace records, one JSON object per committed step.

use crate::kernel::{ActionOutput, StepResult};
use serde::Serialize;
use serde_json::Value;

#[derive(Clone, Debug, Serialize)]
pub struct TraceEvent {
    pub step: u64,
    pub actor: String,
    pub op: String,
    pub args: Value,
    pub result: String,
    pub state_digest: String,
}

impl TraceEvent {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace events serialize")
    }
}

/// Render a step result as the stable result string used in traces and
/// matched by scripts.
pub fn result_name(result: &StepResult) -> String {
    match result {
        Ok(ActionOutput::Unit) => "ok".to_string(),
        Ok(ActionOutput::CreatedRealm(vmid)) => format!("ok vmid={}", vmid.0),
        Ok(ActionOutput::Bytes(b)) => format!("ok data={}", hex::encode(b)),
        Ok(ActionOutput::Ciphertext) => "ok data=<ciphertext>".to_string(),
        Ok(ActionOutput::Value(v)) => format!("ok value={v:#x}"),
        Ok(ActionOutput::Report(_)) => "ok report".to_string(),
        Ok(ActionOutput::VerifyPass) => "ok verify=pass".to_string(),
        Err(fault) => fault.name().to_string(),
    }
}
