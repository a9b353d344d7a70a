//! Jail execution and supervision.
//!
//! [`execute`] turns a [`LaunchPlan`] into a confined child process and
//! returns a handle; the [`SupervisionRecord`] completes at child exit. The
//! executor is rootless-first: user namespaces are the privilege mechanism,
//! and running as real root is supported but never required.
//!
//! Fail-closed: if any plan step fails, the child reports the failing step
//! over a private pipe and exits before the target is ever exec'd.

mod bpf;
mod child;
pub mod limits;
mod supervise;

pub use limits::LimitsEnforcement;

use std::path::Path;
use std::sync::mpsc;

use serde::Serialize;

use crate::plan::{self, LaunchPlan, PlanStep};
use crate::policy::{Namespace, SandboxPolicy};

/// Supervision mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Kernel-enforced filter; zero supervision overhead, violations kill
    /// without attribution.
    #[default]
    Enforce,
    /// Supervisor-side interception via tracing; every filtered syscall is
    /// attributed by name in the violation log.
    Observe,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "enforce" => Some(Mode::Enforce),
            "observe" => Some(Mode::Observe),
            _ => None,
        }
    }
}

/// Violation event classes, as written to the JSON-lines log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    SyscallDenied,
    SyscallLogged,
    LimitExceeded,
    SetupFailure,
}

/// One append-only violation record.
#[derive(Debug, Clone, Serialize)]
pub struct ViolationEvent {
    pub ts: u64,
    pub jail: String,
    pub kind: ViolationKind,
    pub detail: String,
}

/// How the supervised child ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ChildStatus {
    Exited(i32),
    Signaled(i32),
}

/// Everything the supervisor learned about one jail run.
#[derive(Debug, Serialize)]
pub struct SupervisionRecord {
    pub jail: String,
    pub pid: i32,
    pub status: ChildStatus,
    /// The child was terminated by the syscall filter.
    pub filter_kill: bool,
    pub violations: Vec<ViolationEvent>,
    pub limits: LimitsEnforcement,
    pub started_ms: u64,
    pub finished_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stdout: Option<Vec<u8>>,
}

impl SupervisionRecord {
    /// Supervisor exit-status convention: 0 for child exit 0, 10+n for child
    /// exit n, 65 for a filter kill.
    pub fn supervisor_exit_code(&self) -> i32 {
        if self.filter_kill {
            return 65;
        }
        match self.status {
            ChildStatus::Exited(0) => 0,
            ChildStatus::Exited(n) => 10 + n,
            ChildStatus::Signaled(_) => 65,
        }
    }

    /// Stdout bytes, when captured.
    pub fn stdout_bytes(&self) -> &[u8] {
        self.stdout.as_deref().unwrap_or(&[])
    }
}

#[derive(Debug, thiserror::Error)]
pub enum JailError {
    #[error("kernel lacks namespace support: {missing:?}")]
    UnsupportedKernel { missing: Vec<String> },
    #[error("setup step `{step}` failed with errno {errno}: {detail}")]
    SetupFailure {
        step: String,
        errno: i32,
        detail: String,
    },
    #[error("invalid jail request: {reason}")]
    Invalid { reason: String },
    #[error(transparent)]
    Plan(#[from] plan::PlanError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Execution knobs.
#[derive(Debug, Default)]
pub struct ExecuteOptions {
    pub mode: Mode,
    /// Collect the child's stdout into the record.
    pub capture_stdout: bool,
    /// Test support: force the plan step at this index to fail, proving that
    /// no partially confined child gets exec'd.
    pub fail_at_step: Option<usize>,
}

/// Collects violation events and mirrors them to the policy's log file as
/// whole-line JSON writes, so concurrent jails never interleave partial
/// records.
pub(crate) struct EventSink {
    jail: String,
    file: Option<std::fs::File>,
    events: Vec<ViolationEvent>,
}

impl EventSink {
    fn open(jail: &str, log_path: Option<&str>) -> EventSink {
        let file = log_path.and_then(|p| {
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .ok()
        });
        EventSink {
            jail: jail.to_string(),
            file,
            events: Vec::new(),
        }
    }

    fn record(&mut self, kind: ViolationKind, detail: String) {
        let event = ViolationEvent {
            ts: supervise::now_ms(),
            jail: self.jail.clone(),
            kind,
            detail,
        };
        if let Some(f) = &mut self.file {
            if let Ok(mut line) = serde_json::to_string(&event) {
                line.push('\n');
                use std::io::Write;
                let _ = f.write_all(line.as_bytes());
            }
        }
        self.events.push(event);
    }

    fn saw_limit_hit(&self, which: &str) -> bool {
        self.events
            .iter()
            .any(|e| e.kind == ViolationKind::LimitExceeded && e.detail.starts_with(which))
    }

    fn into_events(self) -> Vec<ViolationEvent> {
        self.events
    }
}

/// Handle to a running jail; the record completes at child exit.
pub struct JailHandle {
    pid_rx: mpsc::Receiver<libc::pid_t>,
    pid: Option<libc::pid_t>,
    thread: std::thread::JoinHandle<Result<SupervisionRecord, JailError>>,
}

impl JailHandle {
    /// The child's pid in the supervisor's namespace; blocks until the clone
    /// happened.
    pub fn pid(&mut self) -> Option<i32> {
        if self.pid.is_none() {
            self.pid = self.pid_rx.recv().ok();
        }
        self.pid
    }

    /// Forcibly end the jail.
    pub fn kill(&mut self) {
        if let Some(pid) = self.pid() {
            unsafe {
                libc::kill(pid, libc::SIGKILL);
            }
        }
    }

    /// Wait for child exit and collect the record.
    pub fn wait(self) -> Result<SupervisionRecord, JailError> {
        self.thread.join().unwrap_or_else(|_| {
            Err(JailError::Invalid {
                reason: "supervisor thread panicked".to_string(),
            })
        })
    }
}

fn ns_proc_name(ns: Namespace) -> &'static str {
    match ns {
        Namespace::User => "user",
        Namespace::Pid => "pid",
        Namespace::Mount => "mnt",
        Namespace::Net => "net",
        Namespace::Ipc => "ipc",
        Namespace::Uts => "uts",
        Namespace::Cgroup => "cgroup",
    }
}

/// Check that the kernel can provide every namespace the plan asks for.
fn check_kernel_support(plan: &LaunchPlan) -> Result<(), JailError> {
    let mut missing = Vec::new();
    for step in plan.steps() {
        if let PlanStep::CreateNamespaces(set) = step {
            for ns in set {
                let path = format!("/proc/self/ns/{}", ns_proc_name(*ns));
                if !Path::new(&path).exists() {
                    missing.push(ns.as_str().to_string());
                }
            }
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(JailError::UnsupportedKernel { missing })
    }
}

/// Launch a plan under supervision. Returns once the child is being set up;
/// the record completes at child exit via [`JailHandle::wait`].
pub fn execute(plan: &LaunchPlan, opts: ExecuteOptions) -> Result<JailHandle, JailError> {
    plan.check_ordering().map_err(JailError::Plan)?;
    check_kernel_support(plan)?;
    let plan = plan.clone();
    let (pid_tx, pid_rx) = mpsc::channel();
    // One supervisor thread owns the clone, every ptrace call, and the
    // record until completion.
    let thread = std::thread::Builder::new()
        .name(format!("jail-{}", plan.jail_name))
        .spawn(move || supervise::supervise(plan, opts, pid_tx))
        .map_err(JailError::Io)?;
    Ok(JailHandle {
        pid_rx,
        pid: None,
        thread,
    })
}

/// Launch and wait in one call.
pub fn execute_blocking(
    plan: &LaunchPlan,
    opts: ExecuteOptions,
) -> Result<SupervisionRecord, JailError> {
    execute(plan, opts)?.wait()
}

/// One fresh jail per command line: nothing is shared between invocations
/// and teardown completes before the record is returned.
pub fn spawn_per_command(
    policy: &SandboxPolicy,
    command_line: &str,
    mode: Mode,
) -> Result<SupervisionRecord, JailError> {
    let argv: Vec<String> = command_line
        .split_whitespace()
        .map(str::to_string)
        .collect();
    let plan = plan::build_plan(policy, &argv)?;
    execute_blocking(
        &plan,
        ExecuteOptions {
            mode,
            ..Default::default()
        },
    )
}
