//! Attack harness: a command-parser node with a deliberately injected
//! command-injection flaw, and the attack client that demonstrates
//! compromise without a jail and containment with one.
//!
//! The vulnerable path executes the rest of any command that starts with the
//! magic token as a host shell command. It is double-gated: compiled behind
//! the `vuln-exec` feature and refused at runtime unless the
//! `--vulnerable` acknowledgment was given. The planted secret lives inside
//! a scenario scratch tree, never at a real system path.

pub mod topology;

use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;

use crate::broker::{Broker, BrokerAddr};
use crate::jail::{self, ExecuteOptions, Mode};
use crate::node::{NodeConn, NodeError};
use crate::plan::build_plan;
use crate::policy::{MountKind, MountSpec, SandboxPolicy};

/// Marker string planted in the scenario secret file; exfiltration evidence.
pub const SECRET_MARKER: &str = "SECRET-MARKER-7f3a";

/// The injected flaw's trigger token: everything after it runs as a host
/// shell command when the vulnerable path is armed.
pub const EXEC_MAGIC: &str = "!#EXEC ";

/// The service name the command node registers.
pub const COMMAND_SERVICE: &str = "cmd";

/// Command verbs understood by the node. `Raw` is the deliberately
/// vulnerable path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandVerb {
    Ping,
    GetTelemetry,
    SetParam,
    Raw,
}

/// One command as carried in a request payload: `VERB args`, UTF-8.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandMessage {
    pub verb: CommandVerb,
    pub args: String,
}

impl CommandMessage {
    pub fn parse(payload: &[u8]) -> Result<CommandMessage, String> {
        let text = std::str::from_utf8(payload).map_err(|_| "not utf-8".to_string())?;
        let (verb, args) = match text.split_once(' ') {
            Some((v, a)) => (v, a.to_string()),
            None => (text, String::new()),
        };
        let verb = match verb {
            "PING" => CommandVerb::Ping,
            "GET_TELEMETRY" => CommandVerb::GetTelemetry,
            "SET_PARAM" => CommandVerb::SetParam,
            "RAW" => CommandVerb::Raw,
            other => return Err(format!("unknown verb `{other}`")),
        };
        Ok(CommandMessage { verb, args })
    }

    pub fn encode(&self) -> Vec<u8> {
        let verb = match self.verb {
            CommandVerb::Ping => "PING",
            CommandVerb::GetTelemetry => "GET_TELEMETRY",
            CommandVerb::SetParam => "SET_PARAM",
            CommandVerb::Raw => "RAW",
        };
        if self.args.is_empty() {
            verb.as_bytes().to_vec()
        } else {
            format!("{verb} {}", self.args).into_bytes()
        }
    }
}

/// Handle one command. Pure for the benign verbs; the RAW magic path shells
/// out on the host when armed.
pub fn handle_command(payload: &[u8], vulnerable: bool) -> Vec<u8> {
    let msg = match CommandMessage::parse(payload) {
        Ok(m) => m,
        Err(e) => return format!("ERR {e}").into_bytes(),
    };
    match msg.verb {
        CommandVerb::Ping => b"PONG".to_vec(),
        CommandVerb::GetTelemetry => {
            br#"{"bat_v":7.42,"temp_c":-12.5,"mode":"nominal","uptime_s":86400}"#.to_vec()
        }
        CommandVerb::SetParam => format!("ACK {}", msg.args).into_bytes(),
        CommandVerb::Raw => raw_command(&msg.args, vulnerable),
    }
}

#[cfg(feature = "vuln-exec")]
fn raw_command(args: &str, vulnerable: bool) -> Vec<u8> {
    if !vulnerable {
        return b"RAW-IGNORED".to_vec();
    }
    let Some(shell_command) = args.strip_prefix(EXEC_MAGIC) else {
        return b"RAW-IGNORED".to_vec();
    };
    // The injected flaw: execute the remainder as a host shell command and
    // return its output.
    match std::process::Command::new("/bin/sh")
        .arg("-c")
        .arg(shell_command)
        .output()
    {
        Ok(output) => {
            let mut response = output.stdout;
            response.extend_from_slice(&output.stderr);
            response
        }
        Err(e) => format!("EXEC-ERROR: {e}").into_bytes(),
    }
}

#[cfg(not(feature = "vuln-exec"))]
fn raw_command(_args: &str, _vulnerable: bool) -> Vec<u8> {
    b"RAW-IGNORED".to_vec()
}

/// Serve the command service until the broker connection drops.
///
/// Refuses to arm the vulnerable path unless `vulnerable` is set: the flaw
/// exists for containment experiments, never by accident.
pub fn run_command_node(addr: &BrokerAddr, vulnerable: bool) -> Result<(), NodeError> {
    let conn = NodeConn::connect(addr)?;
    conn.serve(COMMAND_SERVICE, move |payload| {
        handle_command(payload, vulnerable)
    })
}

/// The benign command suite: deterministic commands whose responses must be
/// byte-identical jailed and unjailed.
pub fn benign_suite() -> Vec<Vec<u8>> {
    let mut suite = Vec::new();
    for _ in 0..8 {
        suite.push(b"PING".to_vec());
    }
    for _ in 0..6 {
        suite.push(b"GET_TELEMETRY".to_vec());
    }
    for i in 0..6 {
        suite.push(format!("SET_PARAM beacon_interval={}", 10 + i).into_bytes());
    }
    for i in 0..4 {
        suite.push(format!("SET_PARAM tx_power_dbm={}", 27 + i).into_bytes());
    }
    suite
}

/// Containment reasons for a failed exploit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContainmentReason {
    FileAbsent,
    SyscallKilled,
    ReadOnly,
    Timeout,
}

/// Outcome of one attack run.
#[derive(Debug, Clone, Serialize)]
pub struct AttackOutcome {
    pub exploited: bool,
    pub evidence: String,
    pub violations: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<ContainmentReason>,
}

impl AttackOutcome {
    fn exploited(evidence: String, violations: u64) -> AttackOutcome {
        debug_assert!(evidence.contains(SECRET_MARKER));
        AttackOutcome {
            exploited: true,
            evidence,
            violations,
            reason: None,
        }
    }

    fn contained(reason: ContainmentReason, evidence: String, violations: u64) -> AttackOutcome {
        AttackOutcome {
            exploited: false,
            evidence,
            violations,
            reason: Some(reason),
        }
    }
}

/// What the attack client saw from one exploit payload, before supervision
/// evidence is folded in.
#[derive(Debug)]
enum RawAttackResult {
    Response(Vec<u8>),
    NoResponse,
}

fn send_exploit(conn: &NodeConn, secret_path: &Path) -> RawAttackResult {
    let payload = format!("RAW {EXEC_MAGIC}cat {}", secret_path.display());
    match conn.call(COMMAND_SERVICE, payload.as_bytes(), Duration::from_secs(5)) {
        Ok(response) => RawAttackResult::Response(response),
        Err(_) => RawAttackResult::NoResponse,
    }
}

/// Classify a client-visible result into an outcome, given the supervision
/// evidence (`filter_killed`) from the jail, when any.
fn classify(
    result: RawAttackResult,
    filter_killed: bool,
    violations: u64,
) -> AttackOutcome {
    match result {
        RawAttackResult::Response(bytes) => {
            let text = String::from_utf8_lossy(&bytes).into_owned();
            if text.contains(SECRET_MARKER) {
                AttackOutcome::exploited(text, violations)
            } else if text.contains("Read-only file system") {
                AttackOutcome::contained(ContainmentReason::ReadOnly, text, violations)
            } else if text.contains("No such file or directory")
                || text.contains("EXEC-ERROR") && text.contains("os error 2")
                || text.contains("not found")
            {
                AttackOutcome::contained(ContainmentReason::FileAbsent, text, violations)
            } else {
                AttackOutcome::contained(ContainmentReason::Timeout, text, violations)
            }
        }
        RawAttackResult::NoResponse => {
            if filter_killed {
                AttackOutcome::contained(
                    ContainmentReason::SyscallKilled,
                    "node terminated by the syscall filter".to_string(),
                    violations,
                )
            } else {
                AttackOutcome::contained(
                    ContainmentReason::Timeout,
                    "no response within the deadline".to_string(),
                    violations,
                )
            }
        }
    }
}

/// Scenario wiring shared by the attack-sim command and the tests.
pub struct Scenario {
    /// Scratch tree: secret, broker socket, jail root all live here.
    pub scratch: PathBuf,
    /// Confinement posture for the jailed run: namespaces, filter,
    /// capabilities, limits, network mode, and host tool mounts.
    pub base_policy: SandboxPolicy,
    /// The node binary to launch inside the jail.
    pub exe: PathBuf,
    pub mode: Mode,
}

pub struct ScenarioOutcome {
    pub attack: AttackOutcome,
    /// Benign responses collected before and after the attack.
    pub benign_before: Vec<Vec<u8>>,
    pub benign_after: Vec<Vec<u8>>,
}

impl Scenario {
    pub fn secret_path(&self) -> PathBuf {
        self.scratch.join("secret/key.txt")
    }

    pub fn broker_socket(&self) -> PathBuf {
        self.scratch.join("bus/broker.sock")
    }

    pub fn jail_root(&self) -> PathBuf {
        self.scratch.join("jailroot")
    }

    /// Create the scratch tree and plant the secret.
    pub fn prepare(&self) -> std::io::Result<()> {
        std::fs::create_dir_all(self.scratch.join("secret"))?;
        std::fs::create_dir_all(self.scratch.join("bus"))?;
        std::fs::create_dir_all(self.jail_root())?;
        std::fs::write(
            self.secret_path(),
            format!("{SECRET_MARKER} mission-key=0xDEADBEEF\n"),
        )
    }

    /// The concrete jailed-node policy: the base posture rooted at the
    /// scratch tree, with the node binary, the broker socket directory, a
    /// scratch tmpfs, and proc appended to the declared mounts.
    pub fn jailed_policy(&self) -> SandboxPolicy {
        let mut policy = self.base_policy.clone();
        policy.chroot_root = self.jail_root().to_str().unwrap().to_string();
        policy.log_path = Some(
            self.scratch
                .join("violations.jsonl")
                .to_str()
                .unwrap()
                .to_string(),
        );
        policy.mounts.retain(|m| {
            m.kind != MountKind::Bind || Path::new(&m.source).exists()
        });
        let exe_dir = self.exe.parent().unwrap_or(Path::new("/"));
        policy.mounts.push(MountSpec {
            kind: MountKind::Bind,
            source: exe_dir.to_str().unwrap().to_string(),
            dest: "/app".to_string(),
            read_only: true,
        });
        policy.mounts.push(MountSpec {
            kind: MountKind::Bind,
            source: self.scratch.join("bus").to_str().unwrap().to_string(),
            dest: "/bus".to_string(),
            read_only: false,
        });
        policy.mounts.push(MountSpec {
            kind: MountKind::Tmpfs,
            source: "tmpfs".to_string(),
            dest: "/work".to_string(),
            read_only: false,
        });
        if policy.namespaces.contains(&crate::policy::Namespace::Pid) {
            policy.mounts.push(MountSpec {
                kind: MountKind::Proc,
                source: "proc".to_string(),
                dest: "/proc".to_string(),
                read_only: false,
            });
        }
        policy
    }

    fn jailed_argv(&self) -> Vec<String> {
        let exe_name = self
            .exe
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "orbitjail".to_string());
        vec![
            format!("/app/{exe_name}"),
            "node".to_string(),
            "vuln".to_string(),
            "--vulnerable".to_string(),
            "--broker".to_string(),
            "unix:/bus/broker.sock".to_string(),
        ]
    }

    fn launch_jailed_node(&self) -> Result<jail::JailHandle, ScenarioError> {
        let plan = build_plan(&self.jailed_policy(), &self.jailed_argv())
            .map_err(|e| ScenarioError::Setup(e.to_string()))?;
        jail::execute(
            &plan,
            ExecuteOptions {
                mode: self.mode,
                ..Default::default()
            },
        )
        .map_err(|e| ScenarioError::Setup(e.to_string()))
    }

    /// Wait until the command service answers a ping.
    fn await_service(&self, addr: &BrokerAddr) -> Result<NodeConn, ScenarioError> {
        let deadline = std::time::Instant::now() + Duration::from_secs(10);
        loop {
            if let Ok(conn) = NodeConn::connect(addr) {
                if let Ok(r) = conn.call(COMMAND_SERVICE, b"PING", Duration::from_millis(500)) {
                    if r == b"PONG" {
                        return Ok(conn);
                    }
                }
            }
            if std::time::Instant::now() > deadline {
                return Err(ScenarioError::Setup(
                    "command service never came up".to_string(),
                ));
            }
            std::thread::sleep(Duration::from_millis(50));
        }
    }

    fn run_benign(&self, conn: &NodeConn) -> Vec<Vec<u8>> {
        benign_suite()
            .iter()
            .map(|payload| {
                conn.call(COMMAND_SERVICE, payload, Duration::from_secs(5))
                    .unwrap_or_else(|e| format!("CALL-FAILED: {e}").into_bytes())
            })
            .collect()
    }

    /// Run the unjailed scenario: the node runs as plain in-process code
    /// with full host access, exactly like a non-sandboxed deployment.
    pub fn run_unjailed(&self) -> Result<ScenarioOutcome, ScenarioError> {
        self.prepare().map_err(|e| ScenarioError::Setup(e.to_string()))?;
        let broker = Broker::bind(&BrokerAddr::Unix(self.broker_socket()))
            .map_err(|e| ScenarioError::Setup(e.to_string()))?;
        let node_addr = broker.addr().clone();
        std::thread::spawn(move || {
            let _ = run_command_node(&node_addr, true);
        });

        let conn = self.await_service(broker.addr())?;
        let benign_before = self.run_benign(&conn);
        let result = send_exploit(&conn, &self.secret_path());
        let attack = classify(result, false, 0);
        let benign_after = self.run_benign(&conn);
        Ok(ScenarioOutcome {
            attack,
            benign_before,
            benign_after,
        })
    }

    /// Run the jailed scenario: the node is launched via the jailer with the
    /// scenario policy. If the exploit kills the node, a fresh jail is
    /// launched for the after-attack continuity check, the way a flight
    /// supervisor would restart a crashed service.
    pub fn run_jailed(&self) -> Result<ScenarioOutcome, ScenarioError> {
        self.prepare().map_err(|e| ScenarioError::Setup(e.to_string()))?;
        let broker = Broker::bind(&BrokerAddr::Unix(self.broker_socket()))
            .map_err(|e| ScenarioError::Setup(e.to_string()))?;

        let mut handle = self.launch_jailed_node()?;
        let conn = self.await_service(broker.addr())?;
        let benign_before = self.run_benign(&conn);

        let result = send_exploit(&conn, &self.secret_path());

        // Settle the node's fate: give a killed node a moment to be reaped,
        // then collect its record either way.
        let node_died = matches!(result, RawAttackResult::NoResponse);
        let record = if node_died {
            handle.wait().map_err(|e| ScenarioError::Setup(e.to_string()))?
        } else {
            handle.kill();
            handle.wait().map_err(|e| ScenarioError::Setup(e.to_string()))?
        };
        let violations = record.violations.len() as u64;
        let attack = classify(result, record.filter_kill, violations);

        // Functional continuity after the attack, relaunching when the
        // filter killed the node.
        let (benign_after, after_handle) = if node_died {
            let mut handle = self.launch_jailed_node()?;
            let conn = self.await_service(broker.addr())?;
            let responses = self.run_benign(&conn);
            handle.kill();
            (responses, Some(handle))
        } else {
            let conn = self.await_service(broker.addr())?;
            (self.run_benign(&conn), None)
        };
        if let Some(h) = after_handle {
            let _ = h.wait();
        }

        Ok(ScenarioOutcome {
            attack,
            benign_before,
            benign_after,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("scenario setup failed: {0}")]
    Setup(String),
}

/// Read a violations JSON-lines file, for operators inspecting a run.
pub fn read_violation_log(path: &Path) -> std::io::Result<Vec<serde_json::Value>> {
    let mut text = String::new();
    std::fs::File::open(path)?.read_to_string(&mut text)?;
    Ok(text
        .lines()
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_parsing() {
        let msg = CommandMessage::parse(b"PING").unwrap();
        assert_eq!(msg.verb, CommandVerb::Ping);
        assert_eq!(msg.args, "");
        let msg = CommandMessage::parse(b"SET_PARAM key=1").unwrap();
        assert_eq!(msg.verb, CommandVerb::SetParam);
        assert_eq!(msg.args, "key=1");
        assert!(CommandMessage::parse(b"SELF_DESTRUCT now").is_err());
        assert!(CommandMessage::parse(&[0xFF, 0xFE]).is_err());
    }

    #[test]
    fn benign_commands_are_deterministic() {
        assert_eq!(handle_command(b"PING", true), b"PONG");
        assert_eq!(handle_command(b"PING", false), b"PONG");
        let t1 = handle_command(b"GET_TELEMETRY", true);
        let t2 = handle_command(b"GET_TELEMETRY", false);
        assert_eq!(t1, t2);
        assert!(serde_json::from_slice::<serde_json::Value>(&t1).is_ok());
        assert_eq!(handle_command(b"SET_PARAM x=1", true), b"ACK x=1");
        assert!(benign_suite().len() >= 20);
    }

    #[test]
    fn raw_without_flag_is_inert() {
        let response = handle_command(format!("RAW {EXEC_MAGIC}echo hi").as_bytes(), false);
        assert_eq!(response, b"RAW-IGNORED");
        let response = handle_command(b"RAW no-magic-here", true);
        assert_eq!(response, b"RAW-IGNORED");
    }

    #[cfg(feature = "vuln-exec")]
    #[test]
    fn armed_raw_executes_shell_commands() {
        let response = handle_command(format!("RAW {EXEC_MAGIC}echo hi").as_bytes(), true);
        assert_eq!(response, b"hi\n");
    }

    #[cfg(feature = "vuln-exec")]
    #[test]
    fn armed_raw_reads_planted_secrets() {
        let dir = tempfile::tempdir().unwrap();
        let secret = dir.path().join("key.txt");
        std::fs::write(&secret, format!("{SECRET_MARKER} k=v\n")).unwrap();
        let payload = format!("RAW {EXEC_MAGIC}cat {}", secret.display());
        let response = handle_command(payload.as_bytes(), true);
        assert!(String::from_utf8_lossy(&response).contains(SECRET_MARKER));
    }

    #[test]
    fn classification_covers_the_reason_table() {
        let secret = format!("{SECRET_MARKER} data");
        let out = classify(RawAttackResult::Response(secret.into_bytes()), false, 0);
        assert!(out.exploited);
        assert!(out.reason.is_none());

        let out = classify(
            RawAttackResult::Response(b"cat: /x: No such file or directory\n".to_vec()),
            false,
            0,
        );
        assert_eq!(out.reason, Some(ContainmentReason::FileAbsent));
        assert!(!out.exploited);

        let out = classify(
            RawAttackResult::Response(b"sh: 1: cannot create /x: Read-only file system\n".to_vec()),
            false,
            1,
        );
        assert_eq!(out.reason, Some(ContainmentReason::ReadOnly));

        let out = classify(RawAttackResult::NoResponse, true, 1);
        assert_eq!(out.reason, Some(ContainmentReason::SyscallKilled));

        let out = classify(RawAttackResult::NoResponse, false, 0);
        assert_eq!(out.reason, Some(ContainmentReason::Timeout));
    }
}
