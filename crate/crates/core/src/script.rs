// SPDX-License-Identifier: Apache-2.0

//! Scenario script language and runner.
//!
//! One command per line, `#` starts a comment, tokens are space-separated.
//! Addresses are hexadecimal with an `0x` prefix; other numbers are decimal
//! (an `0x` prefix is honored anywhere). Commands:
//!
//! ```text
//! delegate <pa>
//! undelegate <pa>
//! realm_create <name>
//! data_create <realm> src=<pa> dst=<pa> ipa=<ipa> [attach_dev dev=<bus_addr> [bars=<ipa>:<granules>[,...]]]
//! activate <realm>
//! prot_mem <realm> dev=<sid> sg=<ipa>:<bytes>[,...]
//! dma <dev> read|write ipa=<ipa> len=<bytes> [t=0|1] [rid=<rid>]
//! mmio <realm> read|write ipa=<ipa> [value=<u64>]
//! mem <realm> read|write ipa=<ipa> [len=<bytes>] [data=<hex bytes>]
//! attest <realm>
//! verify <realm> policy=<file>
//! destroy <realm>
//! attack <scenario_name>
//! expect error=<ErrName>            # applies to the previous command
//! expect data=<hex bytes | 0x...>   # applies to the previous read
//! check
//! ```
//!
//! An unknown command is a parse error, never skipped. A command that
//! faults must be followed by a matching `expect error=`; an unconsumed
//! fault, a fault name mismatch, or an `expect` after a clean command is a
//! script failure. Exit codes: 0 clean, 2 invariant violation, 3 failed
//! expectation, 4 parse error.

use crate::adversary;
use crate::error::SimError;
use crate::invariants::{check_trace, InvariantReport};
use crate::kernel::{Action, ActionOutput, RealmRef, Sim, StepResult};
use crate::policy::Policy;
use crate::rmm::AttachParams;
use crate::trace::{result_name, TraceEvent};
use crate::types::*;
use serde_json::json;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq)]
pub enum Cmd {
    Act(Action),
    /// `verify` carries a policy file path, loaded at run time relative to
    /// the script's directory.
    Verify { realm: String, policy_path: String },
    Attack(String),
    ExpectError(String),
    ExpectData(Vec<u8>),
    Check,
}

#[derive(Clone, Debug)]
pub struct ScriptLine {
    pub line_no: usize,
    pub cmd: Cmd,
}

#[derive(Debug, thiserror::Error)]
#[error("line {line}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

fn parse_num(tok: &str) -> Result<u64, String> {
    let t = tok.trim();
    if let Some(hex) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).map_err(|_| format!("bad hex number '{t}'"))
    } else {
        t.parse().map_err(|_| format!("bad number '{t}'"))
    }
}

fn parse_addr(tok: &str) -> Result<u64, String> {
    if !tok.starts_with("0x") && !tok.starts_with("0X") {
        return Err(format!("address '{tok}' must carry an 0x prefix"));
    }
    parse_num(tok)
}

fn kv<'a>(tok: &'a str, key: &str) -> Option<&'a str> {
    tok.strip_prefix(key)?.strip_prefix('=')
}

fn take_kv<'a>(toks: &[&'a str], key: &str) -> Result<&'a str, String> {
    toks.iter()
        .find_map(|t| kv(t, key))
        .ok_or_else(|| format!("missing {key}=..."))
}

fn opt_kv<'a>(toks: &[&'a str], key: &str) -> Option<&'a str> {
    toks.iter().find_map(|t| kv(t, key))
}

/// Parse `<ipa>:<n>[,...]` lists.
fn parse_pair_list(s: &str) -> Result<Vec<(Ipa, u64)>, String> {
    s.split(',')
        .map(|entry| {
            let (ipa, n) = entry
                .split_once(':')
                .ok_or_else(|| format!("bad list entry '{entry}'"))?;
            Ok((Ipa(parse_addr(ipa)?), parse_num(n)?))
        })
        .collect()
}

pub fn parse_script(text: &str) -> Result<Vec<ScriptLine>, ParseError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let cmd = parse_line(line).map_err(|msg| ParseError { line: line_no, msg })?;
        out.push(ScriptLine { line_no, cmd });
    }
    Ok(out)
}

fn parse_line(line: &str) -> Result<Cmd, String> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    let (head, rest) = toks.split_first().ok_or("empty command")?;
    let realm = |i: usize| -> Result<RealmRef, String> {
        rest.get(i)
            .map(|n| RealmRef::Name(n.to_string()))
            .ok_or_else(|| "missing realm name".to_string())
    };
    match *head {
        "delegate" => Ok(Cmd::Act(Action::Delegate {
            pa: PhysAddr(parse_addr(rest.first().ok_or("missing pa")?)?),
        })),
        "undelegate" => Ok(Cmd::Act(Action::Undelegate {
            pa: PhysAddr(parse_addr(rest.first().ok_or("missing pa")?)?),
        })),
        "realm_create" => Ok(Cmd::Act(Action::RealmCreate {
            name: rest.first().ok_or("missing realm name")?.to_string(),
        })),
        "data_create" => {
            let attach = if rest.contains(&"attach_dev") {
                let bus = BusAddr(parse_num(take_kv(rest, "dev")?)? as u16);
                let bars = match opt_kv(rest, "bars") {
                    Some(list) => parse_pair_list(list)?,
                    None => Vec::new(),
                };
                Some(AttachParams { bus, bars })
            } else {
                None
            };
            Ok(Cmd::Act(Action::DataCreate {
                realm: realm(0)?,
                src: PhysAddr(parse_addr(take_kv(rest, "src")?)?),
                dst: PhysAddr(parse_addr(take_kv(rest, "dst")?)?),
                ipa: Ipa(parse_addr(take_kv(rest, "ipa")?)?),
                attach,
            }))
        }
        "activate" => Ok(Cmd::Act(Action::Activate { realm: realm(0)? })),
        "prot_mem" => Ok(Cmd::Act(Action::ProtMem {
            realm: realm(0)?,
            dev: StreamId(parse_num(take_kv(rest, "dev")?)? as u32),
            sg: parse_pair_list(take_kv(rest, "sg")?)?,
        })),
        "dma" => {
            let bus = BusAddr(parse_num(rest.first().ok_or("missing device")?)? as u16);
            let op = match rest.get(1) {
                Some(&"read") => RwOp::Read,
                Some(&"write") => RwOp::Write,
                _ => return Err("dma needs read|write".into()),
            };
            Ok(Cmd::Act(Action::Dma {
                bus,
                op,
                ipa: Ipa(parse_addr(take_kv(rest, "ipa")?)?),
                len: parse_num(take_kv(rest, "len")?)?,
                t_bit: match opt_kv(rest, "t") {
                    None => true,
                    Some(v) => parse_num(v)? != 0,
                },
                rid_override: match opt_kv(rest, "rid") {
                    None => None,
                    Some(v) => Some(Rid(parse_num(v)? as u32)),
                },
            }))
        }
        "mmio" => {
            let op = match rest.get(1) {
                Some(&"read") => RwOp::Read,
                Some(&"write") => RwOp::Write,
                _ => return Err("mmio needs read|write".into()),
            };
            Ok(Cmd::Act(Action::Mmio {
                realm: realm(0)?,
                op,
                ipa: Ipa(parse_addr(take_kv(rest, "ipa")?)?),
                value: match opt_kv(rest, "value") {
                    None => 0,
                    Some(v) => parse_num(v)?,
                },
            }))
        }
        "mem" => {
            let r = realm(0)?;
            let ipa = Ipa(parse_addr(take_kv(rest, "ipa")?)?);
            match rest.get(1) {
                Some(&"read") => Ok(Cmd::Act(Action::MemRead {
                    realm: r,
                    ipa,
                    len: match opt_kv(rest, "len") {
                        None => 16,
                        Some(v) => parse_num(v)?,
                    },
                })),
                Some(&"write") => {
                    let data = hex::decode(take_kv(rest, "data")?)
                        .map_err(|_| "bad hex in data=".to_string())?;
                    Ok(Cmd::Act(Action::MemWrite { realm: r, ipa, data }))
                }
                _ => Err("mem needs read|write".into()),
            }
        }
        "attest" => Ok(Cmd::Act(Action::Attest { realm: realm(0)? })),
        "verify" => Ok(Cmd::Verify {
            realm: rest.first().ok_or("missing realm name")?.to_string(),
            policy_path: take_kv(rest, "policy")?.to_string(),
        }),
        "destroy" => Ok(Cmd::Act(Action::Destroy { realm: realm(0)? })),
        "attack" => Ok(Cmd::Attack(
            rest.first().ok_or("missing scenario name")?.to_string(),
        )),
        "expect" => {
            if let Ok(err) = take_kv(rest, "error") {
                return Ok(Cmd::ExpectError(err.to_string()));
            }
            if let Ok(data) = take_kv(rest, "data") {
                let bytes = if let Some(hexnum) = data.strip_prefix("0x") {
                    let v = u64::from_str_radix(hexnum, 16)
                        .map_err(|_| format!("bad value '{data}'"))?;
                    v.to_le_bytes().to_vec()
                } else {
                    hex::decode(data).map_err(|_| "bad hex in data=".to_string())?
                };
                return Ok(Cmd::ExpectData(bytes));
            }
            Err("expect needs error= or data=".into())
        }
        "check" => Ok(Cmd::Check),
        other => Err(format!("unknown command '{other}'")),
    }
}

/// Outcome of a script run.
#[derive(Debug)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub trace: Vec<TraceEvent>,
    pub final_invariants: Option<InvariantReport>,
    pub failure: Option<String>,
}

pub struct Runner {
    pub sim: Sim,
    script_dir: PathBuf,
}

impl Runner {
    pub fn new(sim: Sim, script_dir: &Path) -> Self {
        Runner {
            sim,
            script_dir: script_dir.to_path_buf(),
        }
    }

    /// Execute a parsed script: every committed step is traced and checked.
    pub fn run(&mut self, lines: &[ScriptLine]) -> RunOutcome {
        let mut trace = Vec::new();
        let mut pending: Option<(usize, StepResult)> = None;

        for line in lines {
            // A fault from the previous command must have been consumed by
            // an expect; anything else is a script failure.
            if !matches!(line.cmd, Cmd::ExpectError(_) | Cmd::ExpectData(_)) {
                if let Some((at, Err(fault))) = &pending {
                    return self.fail(
                        trace,
                        3,
                        format!("line {at}: unexpected fault {}", fault.name()),
                    );
                }
            }

            match &line.cmd {
                Cmd::Act(action) => {
                    let result = self.sim.apply(action);
                    trace.push(self.trace_event(action, &result));
                    let report = self.sim.check_invariants();
                    if !report.all_pass() {
                        return self.violation(trace, report);
                    }
                    pending = Some((line.line_no, result));
                }
                Cmd::Verify { realm, policy_path } => {
                    let full = self.script_dir.join(policy_path);
                    let text = match std::fs::read_to_string(&full) {
                        Ok(t) => t,
                        Err(e) => {
                            return self.fail(
                                trace,
                                4,
                                format!("line {}: policy {full:?}: {e}", line.line_no),
                            )
                        }
                    };
                    let policy = match Policy::parse(&text) {
                        Ok(p) => p,
                        Err(msg) => {
                            return self.fail(trace, 4, format!("line {}: {msg}", line.line_no))
                        }
                    };
                    let action = Action::Verify {
                        realm: RealmRef::Name(realm.clone()),
                        policy,
                    };
                    let result = self.sim.apply(&action);
                    trace.push(self.trace_event(&action, &result));
                    pending = Some((line.line_no, result));
                }
                Cmd::Attack(name) => {
                    match adversary::run_attack_scenario(name) {
                        Err(e) => {
                            return self.fail(
                                trace,
                                4,
                                format!("line {}: {}", line.line_no, e.name()),
                            )
                        }
                        Ok(outcome) => {
                            let result: StepResult = if outcome.blocked {
                                Ok(ActionOutput::Unit)
                            } else {
                                Err(SimError::ScenarioNotBlocked.into())
                            };
                            trace.push(TraceEvent {
                                step: self.sim.step,
                                actor: "adversary".into(),
                                op: format!("attack {name}"),
                                args: json!({
                                    "blocked_by": outcome.blocked_by,
                                    "detail": outcome.detail,
                                }),
                                result: result_name(&result),
                                state_digest: self.sim.state.digest().to_hex(),
                            });
                            pending = Some((line.line_no, result));
                        }
                    }
                }
                Cmd::ExpectError(name) => {
                    let Some((_, result)) = pending.take() else {
                        return self.fail(
                            trace,
                            3,
                            format!("line {}: expect with no previous command", line.line_no),
                        );
                    };
                    match result {
                        Err(fault) if fault.name() == name => {}
                        other => {
                            return self.fail(
                                trace,
                                3,
                                format!(
                                    "line {}: expected error {name}, got {}",
                                    line.line_no,
                                    result_name(&other)
                                ),
                            )
                        }
                    }
                }
                Cmd::ExpectData(bytes) => {
                    let Some((_, result)) = pending.take() else {
                        return self.fail(
                            trace,
                            3,
                            format!("line {}: expect with no previous command", line.line_no),
                        );
                    };
                    let got = match &result {
                        Ok(ActionOutput::Bytes(b)) => Some(b.clone()),
                        Ok(ActionOutput::Value(v)) => Some(v.to_le_bytes().to_vec()),
                        _ => None,
                    };
                    if got.as_deref() != Some(bytes.as_slice()) {
                        return self.fail(
                            trace,
                            3,
                            format!(
                                "line {}: expected data {}, got {}",
                                line.line_no,
                                hex::encode(bytes),
                                result_name(&result)
                            ),
                        );
                    }
                }
                Cmd::Check => {
                    let report = self.sim.check_invariants();
                    trace.push(TraceEvent {
                        step: self.sim.step,
                        actor: "harness".into(),
                        op: "check".into(),
                        args: json!({ "summary": report.summary() }),
                        result: if report.all_pass() { "ok".into() } else { "violation".into() },
                        state_digest: self.sim.state.digest().to_hex(),
                    });
                    if !report.all_pass() {
                        return self.violation(trace, report);
                    }
                    pending = None;
                }
            }
        }

        if let Some((at, Err(fault))) = &pending {
            return self.fail(
                trace,
                3,
                format!("line {at}: unexpected fault {}", fault.name()),
            );
        }

        // Whole-trace ordering and soundness checks.
        let trace_violations = check_trace(&self.sim.events);
        if !trace_violations.is_empty() {
            let v = &trace_violations[0];
            return self.fail(
                trace,
                2,
                format!("trace check {} failed: {}", v.check, v.detail),
            );
        }

        let report = self.sim.check_invariants();
        let code = if report.all_pass() { 0 } else { 2 };
        RunOutcome {
            exit_code: code,
            trace,
            final_invariants: Some(report),
            failure: None,
        }
    }

    fn trace_event(&self, action: &Action, result: &StepResult) -> TraceEvent {
        TraceEvent {
            step: self.sim.step,
            actor: action.actor(),
            op: action.op_name().to_string(),
            args: action_args(action),
            result: result_name(result),
            state_digest: self.sim.state.digest().to_hex(),
        }
    }

    fn fail(&self, trace: Vec<TraceEvent>, code: i32, msg: String) -> RunOutcome {
        RunOutcome {
            exit_code: code,
            trace,
            final_invariants: Some(self.sim.check_invariants()),
            failure: Some(msg),
        }
    }

    fn violation(&self, trace: Vec<TraceEvent>, report: InvariantReport) -> RunOutcome {
        let detail = report
            .failures()
            .map(|c| format!("{}: {}", c.name, c.witness.clone().unwrap_or_default()))
            .collect::<Vec<_>>()
            .join("; ");
        RunOutcome {
            exit_code: 2,
            trace,
            final_invariants: Some(report),
            failure: Some(format!("invariant violation: {detail}")),
        }
    }
}

fn action_args(action: &Action) -> serde_json::Value {
    json!({ "detail": format!("{action:?}") })
}

/// Convenience: parse and run a script text against a fresh simulator.
pub fn run_script_text(sim: Sim, text: &str, script_dir: &Path) -> Result<RunOutcome, ParseError> {
    let lines = parse_script(text)?;
    let mut runner = Runner::new(sim, script_dir);
    Ok(runner.run(&lines))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SimConfig;
    use std::path::Path;

    fn run(text: &str) -> RunOutcome {
        let sim = Sim::new(SimConfig::default());
        run_script_text(sim, text, Path::new(".")).expect("parses")
    }

    #[test]
    fn grammar_round_trips() {
        let text = "\
# comment line
delegate 0x10000
realm_create r0
data_create r0 src=0x1000 dst=0x10000 ipa=0x2000
activate r0
prot_mem r0 dev=0x100 sg=0x2000:4096,0x3000:8192
dma 0x100 read ipa=0x2000 len=16 t=1 rid=0x100
mmio r0 write ipa=0x8000 value=0x1
mem r0 read ipa=0x2000 len=4
attest r0
destroy r0
check
";
        let lines = parse_script(text).expect("all commands parse");
        assert_eq!(lines.len(), 11);
        assert!(matches!(lines[0].cmd, Cmd::Act(Action::Delegate { .. })));
        match &lines[4].cmd {
            Cmd::Act(Action::ProtMem { sg, .. }) => {
                assert_eq!(sg, &vec![(Ipa(0x2000), 4096), (Ipa(0x3000), 8192)]);
            }
            other => panic!("unexpected parse {other:?}"),
        }
    }

    #[test]
    fn unknown_commands_are_parse_errors() {
        assert!(parse_script("frobnicate 0x1000\n").is_err());
        // Addresses must carry the hex prefix.
        assert!(parse_script("delegate 4096\n").is_err());
    }

    #[test]
    fn expected_errors_match_or_fail_the_run() {
        let ok = run("delegate 0x10000\ndelegate 0x10000\nexpect error=WrongWorld\n");
        assert_eq!(ok.exit_code, 0, "{:?}", ok.failure);
        // Wrong expectation.
        let wrong = run("delegate 0x10000\nexpect error=WrongWorld\n");
        assert_eq!(wrong.exit_code, 3);
        // Unconsumed fault.
        let unconsumed = run("delegate 0x10000\ndelegate 0x10000\ncheck\n");
        assert_eq!(unconsumed.exit_code, 3);
        // Trailing unconsumed fault.
        let trailing = run("delegate 0x10000\ndelegate 0x10000\n");
        assert_eq!(trailing.exit_code, 3);
    }

    #[test]
    fn attack_command_requires_the_block() {
        let blocked = run("attack hv_enable_ats\n");
        assert_eq!(blocked.exit_code, 0, "{:?}", blocked.failure);
        let unknown = run("attack not_a_scenario\n");
        assert_eq!(unknown.exit_code, 4);
    }

    #[test]
    fn traces_record_every_step_with_digests() {
        let out = run("delegate 0x10000\nrealm_create r0\n");
        assert_eq!(out.trace.len(), 2);
        assert_eq!(out.trace[0].op, "delegate");
        assert_eq!(out.trace[0].result, "ok");
        assert_eq!(out.trace[1].result, "ok vmid=0");
        assert_eq!(out.trace[0].state_digest.len(), 64);
        let line = out.trace[0].to_json_line();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["op"], "delegate");
        assert_eq!(v["step"], 1);
    }
}
