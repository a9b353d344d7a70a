//! The per-jail supervisor: clone, barrier, wait, and the observe-mode
//! syscall interception loop.
//!
//! Enforce mode installs the kernel filter in the child and pays zero
//! supervision overhead; a filter kill then surfaces as an unattributed
//! SIGSYS death. Observe mode skips the kernel filter and instead traces the
//! child, evaluating every syscall against the reference interpreter and
//! applying the action itself: denials are rewritten to return an errno,
//! logged calls proceed, kill-class actions terminate the child. The filter
//! semantics begin at the target's exec, matching where the kernel filter
//! would be installed; plan steps themselves are never filtered.

use std::io::Read;
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::plan::{LaunchPlan, PlanStep};
use crate::seccomp::{self, Action};

use super::child::ChildContext;
use super::limits::CgroupSetup;
use super::{
    ChildStatus, EventSink, ExecuteOptions, JailError, Mode, SupervisionRecord, ViolationKind,
};

pub(super) fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn pipe2(flags: libc::c_int) -> Result<(OwnedFd, OwnedFd), JailError> {
    let mut fds = [0 as libc::c_int; 2];
    if unsafe { libc::pipe2(fds.as_mut_ptr(), flags) } != 0 {
        return Err(JailError::Io(std::io::Error::last_os_error()));
    }
    unsafe { Ok((OwnedFd::from_raw_fd(fds[0]), OwnedFd::from_raw_fd(fds[1]))) }
}

fn wait_for(pid: libc::pid_t) -> (libc::c_int, bool) {
    loop {
        let mut status: libc::c_int = 0;
        let r = unsafe { libc::waitpid(pid, &mut status, 0) };
        if r == pid {
            return (status, true);
        }
        if r < 0 {
            let err = std::io::Error::last_os_error();
            if err.raw_os_error() == Some(libc::EINTR) {
                continue;
            }
            return (0, false);
        }
    }
}

fn status_of(raw: libc::c_int) -> Option<ChildStatus> {
    if libc::WIFEXITED(raw) {
        Some(ChildStatus::Exited(libc::WEXITSTATUS(raw)))
    } else if libc::WIFSIGNALED(raw) {
        Some(ChildStatus::Signaled(libc::WTERMSIG(raw)))
    } else {
        None
    }
}

struct SetupFailureReport {
    step: String,
    errno: i32,
}

/// Read the child's five-byte failure record, if any.
fn read_failure(err_read: &mut std::fs::File, plan: &LaunchPlan) -> Option<SetupFailureReport> {
    let mut buf = [0u8; 5];
    let mut filled = 0;
    while filled < 5 {
        match err_read.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(_) => break,
        }
    }
    if filled < 5 {
        return None;
    }
    let step_idx = buf[0] as usize;
    let errno = i32::from_le_bytes(buf[1..5].try_into().unwrap());
    let step = plan
        .steps()
        .get(step_idx)
        .map(|s| s.kind().to_string())
        .unwrap_or_else(|| format!("step-{step_idx}"));
    Some(SetupFailureReport { step, errno })
}

pub(super) fn supervise(
    plan: LaunchPlan,
    opts: ExecuteOptions,
    pid_tx: std::sync::mpsc::Sender<libc::pid_t>,
) -> Result<SupervisionRecord, JailError> {
    let started_ms = now_ms();
    let mut sink = EventSink::open(&plan.jail_name, plan.log_path.as_deref());

    // Cgroups are prepared before the clone so the child can be attached at
    // its barrier, and cleaned up before the record is finalized.
    let limits = plan.steps().iter().find_map(|s| match s {
        PlanStep::ApplyCgroups(l) => Some(*l),
        _ => None,
    });
    let cgroups = match &limits {
        Some(l) => super::limits::prepare(&plan.jail_name, l),
        None => CgroupSetup::default(),
    };

    let program = super::child::prepare(&plan, opts.mode, &cgroups.child_rlimits)
        .map_err(|e| fail_with_event(&mut sink, e))?;

    // Error pipe: close-on-exec, so a successful exec reads as EOF.
    let (err_r, err_w) = pipe2(libc::O_CLOEXEC)?;
    let (cg_req_r, cg_req_w) = pipe2(libc::O_CLOEXEC)?;
    let (cg_ack_r, cg_ack_w) = pipe2(0)?;
    let capture = opts.capture_stdout;
    let (out_r, out_w) = if capture {
        let (r, w) = pipe2(0)?;
        (Some(r), Some(w))
    } else {
        (None, None)
    };

    // Injected failure at the create-namespaces step happens before any
    // child exists.
    let ns_step_index = plan
        .steps()
        .iter()
        .position(|s| matches!(s, PlanStep::CreateNamespaces(_)));
    if opts.fail_at_step.is_some() && opts.fail_at_step == ns_step_index {
        cgroups.cleanup();
        return Err(fail_with_event(
            &mut sink,
            JailError::SetupFailure {
                step: "create-namespaces".to_string(),
                errno: libc::ECANCELED,
                detail: "injected failure".to_string(),
            },
        ));
    }

    let flags = program.clone_flags as libc::c_long | libc::SIGCHLD as libc::c_long;
    let pid = unsafe { libc::syscall(libc::SYS_clone, flags, 0u64, 0u64, 0u64, 0u64) };
    if pid < 0 {
        let errno = std::io::Error::last_os_error().raw_os_error().unwrap_or(0);
        cgroups.cleanup();
        return Err(fail_with_event(
            &mut sink,
            JailError::SetupFailure {
                step: "create-namespaces".to_string(),
                errno,
                detail: "clone failed".to_string(),
            },
        ));
    }

    if pid == 0 {
        // Child: only prepared buffers and raw syscalls from here on.
        let ctx = ChildContext {
            err_fd: err_w.as_raw_fd(),
            cg_req_fd: cg_req_w.as_raw_fd(),
            cg_ack_fd: cg_ack_r.as_raw_fd(),
            stdout_fd: out_w.as_ref().map(|f| f.as_raw_fd()).unwrap_or(-1),
            close_fds: [
                err_r.as_raw_fd(),
                cg_req_r.as_raw_fd(),
                cg_ack_w.as_raw_fd(),
                out_r.as_ref().map(|f| f.as_raw_fd()).unwrap_or(-1),
            ],
            fail_at: opts.fail_at_step,
        };
        unsafe { super::child::run(&program, &ctx) }
    }

    let pid = pid as libc::pid_t;
    let _ = pid_tx.send(pid);
    drop(err_w);
    drop(cg_req_w);
    drop(cg_ack_r);
    drop(out_w);

    // Collect captured stdout on a side thread so the child never blocks on
    // a full pipe.
    let stdout_thread = out_r.map(|fd| {
        std::thread::spawn(move || {
            let mut file = std::fs::File::from(fd);
            let mut buf = Vec::new();
            let _ = file.read_to_end(&mut buf);
            buf
        })
    });

    // Cgroup barrier: the child waits until it has been attached.
    if program.has_cgroup_barrier {
        let mut req = std::fs::File::from(cg_req_r);
        let mut byte = [0u8; 1];
        match req.read(&mut byte) {
            Ok(1) => {
                let ack = if cgroups.attach(pid).is_ok() { 0u8 } else { 1u8 };
                let ok = unsafe { libc::write(cg_ack_w.as_raw_fd(), [ack].as_ptr().cast(), 1) };
                if ack != 0 || ok != 1 {
                    let (raw, _) = wait_for(pid);
                    let _ = raw;
                    cgroups.cleanup();
                    return Err(fail_with_event(
                        &mut sink,
                        JailError::SetupFailure {
                            step: "apply-cgroups".to_string(),
                            errno: libc::EACCES,
                            detail: "cgroup attach failed".to_string(),
                        },
                    ));
                }
            }
            _ => { /* child failed before the barrier; the error pipe has it */ }
        }
    }
    drop(cg_ack_w);

    let mut err_read = std::fs::File::from(err_r);

    let outcome = match opts.mode {
        Mode::Enforce => run_enforce(pid, &mut err_read, &plan, &mut sink),
        Mode::Observe => run_observe(pid, &mut err_read, &plan, &mut sink),
    };

    let stdout = stdout_thread.map(|t| t.join().unwrap_or_default());

    let (status, filter_kill) = match outcome {
        Ok(pair) => pair,
        Err(e) => {
            cgroups.cleanup();
            return Err(fail_with_event(&mut sink, e));
        }
    };

    // Limit evidence: controller counters first, then the documented
    // heuristic for rlimit-mediated deaths under an active memory cap.
    for hit in cgroups.limit_hits() {
        sink.record(
            ViolationKind::LimitExceeded,
            format!("{hit} limit exceeded (cgroup counter)"),
        );
    }
    if let Some(l) = &limits {
        if l.memory_bytes.is_some() && !filter_kill && !sink.saw_limit_hit("memory") {
            if let ChildStatus::Signaled(sig) = status {
                if sig == libc::SIGABRT || sig == libc::SIGKILL || sig == libc::SIGSEGV {
                    sink.record(
                        ViolationKind::LimitExceeded,
                        format!(
                            "memory limit exceeded (terminated by signal {sig} under active cap)"
                        ),
                    );
                }
            }
        }
    }

    cgroups.cleanup();

    Ok(SupervisionRecord {
        jail: plan.jail_name.clone(),
        pid,
        status,
        filter_kill,
        violations: sink.into_events(),
        limits: cgroups_enforcement(&cgroups),
        started_ms,
        finished_ms: now_ms(),
        stdout,
    })
}

fn cgroups_enforcement(setup: &CgroupSetup) -> super::limits::LimitsEnforcement {
    setup.enforcement.clone()
}

fn fail_with_event(sink: &mut EventSink, err: JailError) -> JailError {
    if let JailError::SetupFailure { step, errno, .. } = &err {
        sink.record(
            ViolationKind::SetupFailure,
            format!("step {step} failed (errno {errno})"),
        );
    }
    err
}

/// Enforce mode: wait out the exec barrier, then wait for exit.
fn run_enforce(
    pid: libc::pid_t,
    err_read: &mut std::fs::File,
    plan: &LaunchPlan,
    sink: &mut EventSink,
) -> Result<(ChildStatus, bool), JailError> {
    if let Some(failure) = read_failure(err_read, plan) {
        let (_, _) = wait_for(pid);
        return Err(JailError::SetupFailure {
            step: failure.step,
            errno: failure.errno,
            detail: "jail setup step failed".to_string(),
        });
    }
    let (raw, ok) = wait_for(pid);
    if !ok {
        return Err(JailError::Io(std::io::Error::other("waitpid failed")));
    }
    let status = status_of(raw).unwrap_or(ChildStatus::Exited(-1));
    let mut filter_kill = false;
    if status == ChildStatus::Signaled(libc::SIGSYS) {
        filter_kill = true;
        sink.record(
            ViolationKind::SyscallDenied,
            "unattributed filter kill (SIGSYS)".to_string(),
        );
    }
    Ok((status, filter_kill))
}

const WALL: libc::c_int = 0x4000_0000;
const WNOTHREAD: libc::c_int = 0x2000_0000;

#[derive(Default)]
struct TraceeState {
    in_syscall: bool,
    pending_errno: Option<u32>,
    /// The filter semantics start at the target's exec; descendants inherit
    /// an active filter, matching kernel behavior.
    filter_active: bool,
    /// Auto-attached children deliver one administrative SIGSTOP that must
    /// be swallowed rather than forwarded.
    awaiting_initial_stop: bool,
}

/// Observe mode: trace the child (and everything it spawns, since a kernel
/// filter would be inherited) and apply filter actions supervisor-side.
fn run_observe(
    pid: libc::pid_t,
    err_read: &mut std::fs::File,
    plan: &LaunchPlan,
    sink: &mut EventSink,
) -> Result<(ChildStatus, bool), JailError> {
    let program = plan
        .steps()
        .iter()
        .find_map(|s| match s {
            PlanStep::InstallFilter(spec) => Some(spec.program.clone()),
            _ => None,
        })
        .ok_or(JailError::Invalid {
            reason: "plan has no filter step".to_string(),
        })?;
    let table = seccomp::tables::native();
    let arch_tag = table.audit_arch();
    let exec_nrs: Vec<u64> = ["execve", "execveat"]
        .iter()
        .filter_map(|n| table.resolve(n).ok())
        .map(u64::from)
        .collect();

    // First stop: the TRACEME + SIGSTOP from the child, or an early death.
    let (raw, ok) = wait_for(pid);
    if !ok {
        return Err(JailError::Io(std::io::Error::other("waitpid failed")));
    }
    if let Some(status) = status_of(raw) {
        // Child never reached the stop: a setup failure or an exec of a
        // vanishing command.
        if let Some(failure) = read_failure(err_read, plan) {
            return Err(JailError::SetupFailure {
                step: failure.step,
                errno: failure.errno,
                detail: "jail setup step failed".to_string(),
            });
        }
        return Ok((status, false));
    }

    unsafe {
        libc::ptrace(
            libc::PTRACE_SETOPTIONS,
            pid,
            0,
            libc::PTRACE_O_TRACESYSGOOD
                | libc::PTRACE_O_EXITKILL
                | libc::PTRACE_O_TRACEEXEC
                | libc::PTRACE_O_TRACEFORK
                | libc::PTRACE_O_TRACEVFORK
                | libc::PTRACE_O_TRACECLONE,
        );
    }

    let mut tracees: std::collections::HashMap<libc::pid_t, TraceeState> = Default::default();
    tracees.insert(pid, TraceeState::default());
    let mut filter_kill = false;
    let mut main_status: Option<ChildStatus> = None;
    unsafe {
        libc::ptrace(libc::PTRACE_SYSCALL, pid, 0, 0);
    }

    while !tracees.is_empty() {
        let mut raw: libc::c_int = 0;
        let who = unsafe { libc::waitpid(-1, &mut raw, WALL | WNOTHREAD) };
        if who < 0 {
            let err = std::io::Error::last_os_error();
            match err.raw_os_error() {
                Some(libc::EINTR) => continue,
                Some(libc::ECHILD) => break,
                _ => return Err(JailError::Io(err)),
            }
        }

        if let Some(status) = status_of(raw) {
            tracees.remove(&who);
            if who == pid {
                main_status = Some(status);
            }
            continue;
        }

        let stopsig = libc::WSTOPSIG(raw);
        let event = (raw >> 16) & 0xff;
        let mut resume_sig: libc::c_int = 0;

        if std::env::var_os("ORBITJAIL_TRACE_DEBUG").is_some() {
            let mut regs: libc::user_regs_struct = unsafe { std::mem::zeroed() };
            unsafe { libc::ptrace(libc::PTRACE_GETREGS, who, 0, &mut regs) };
            eprintln!(
                "[trace] pid={who} sig={stopsig:#x} event={event} nr={} ret={}",
                syscall_nr(&regs) as i64,
                return_value(&regs) as i64
            );
        }

        if event == libc::PTRACE_EVENT_FORK
            || event == libc::PTRACE_EVENT_VFORK
            || event == libc::PTRACE_EVENT_CLONE
        {
            let mut new_pid: libc::c_ulong = 0;
            unsafe {
                libc::ptrace(libc::PTRACE_GETEVENTMSG, who, 0, &mut new_pid);
            }
            let inherited = tracees.get(&who).map(|t| t.filter_active).unwrap_or(true);
            tracees.entry(new_pid as libc::pid_t).or_insert(TraceeState {
                // The first stop of a fresh tracee is the tail of its
                // clone, when the kernel reports one at all.
                in_syscall: true,
                pending_errno: None,
                filter_active: inherited,
                awaiting_initial_stop: true,
            });
        } else if event == 0 && stopsig == libc::SIGTRAP | 0x80 {
            let state = tracees.entry(who).or_insert_with(|| TraceeState {
                in_syscall: true,
                pending_errno: None,
                filter_active: true,
                awaiting_initial_stop: false,
            });
            let mut regs: libc::user_regs_struct = unsafe { std::mem::zeroed() };
            if unsafe { libc::ptrace(libc::PTRACE_GETREGS, who, 0, &mut regs) } == 0 {
                // Entry stops carry -ENOSYS in the return register; this also
                // resyncs after unreported clone-exit stops.
                let is_entry =
                    !state.in_syscall || return_value(&regs) as i64 == -(libc::ENOSYS as i64);
                if state.pending_errno.is_none() && is_entry {
                    state.in_syscall = true;
                    let nr = syscall_nr(&regs);
                    if !state.filter_active && exec_nrs.contains(&nr) {
                        // The target exec: the filter applies from here,
                        // exactly where enforce mode installs it.
                        state.filter_active = true;
                    }
                    if state.filter_active {
                        let action = seccomp::evaluate(&program, arch_tag, nr as u32)
                            .map_err(|e| JailError::Invalid {
                                reason: e.to_string(),
                            })?;
                        let name = table
                            .name_of(nr as u32)
                            .map(str::to_string)
                            .unwrap_or_else(|| format!("nr:{nr}"));
                        match action {
                            Action::Allow => {}
                            Action::Log => sink.record(ViolationKind::SyscallLogged, name),
                            Action::Errno(e) => {
                                sink.record(
                                    ViolationKind::SyscallDenied,
                                    format!("{name} denied with {}", e.name()),
                                );
                                state.pending_errno = Some(e.number());
                                set_syscall_nr(&mut regs, u64::MAX);
                                unsafe {
                                    libc::ptrace(libc::PTRACE_SETREGS, who, 0, &regs);
                                }
                            }
                            Action::Kill => {
                                sink.record(
                                    ViolationKind::SyscallDenied,
                                    format!("{name} (kill)"),
                                );
                                if who == pid {
                                    filter_kill = true;
                                }
                                unsafe {
                                    libc::kill(who, libc::SIGKILL);
                                }
                            }
                        }
                    }
                } else {
                    state.in_syscall = false;
                    if let Some(e) = state.pending_errno.take() {
                        set_return_value(&mut regs, -(e as i64));
                        unsafe {
                            libc::ptrace(libc::PTRACE_SETREGS, who, 0, &regs);
                        }
                    } else if state.filter_active
                        && exec_nrs.contains(&syscall_nr(&regs))
                        && (return_value(&regs) as i64) < 0
                        && who == pid
                    {
                        // The target exec failed; the child is back in setup
                        // code, which is not subject to the filter.
                        state.filter_active = false;
                    }
                }
            }
        } else if event == 0 && stopsig != libc::SIGTRAP {
            if stopsig == libc::SIGSTOP {
                match tracees.get_mut(&who) {
                    Some(state) if state.awaiting_initial_stop => {
                        state.awaiting_initial_stop = false;
                    }
                    Some(_) => resume_sig = stopsig,
                    None => {
                        // Initial stop racing ahead of the fork event.
                        tracees.insert(
                            who,
                            TraceeState {
                                in_syscall: true,
                                pending_errno: None,
                                filter_active: true,
                                awaiting_initial_stop: false,
                            },
                        );
                    }
                }
            } else {
                resume_sig = stopsig;
            }
        }

        unsafe {
            libc::ptrace(libc::PTRACE_SYSCALL, who, 0, resume_sig as libc::c_long);
        }
    }

    if let Some(failure) = read_failure(err_read, plan) {
        return Err(JailError::SetupFailure {
            step: failure.step,
            errno: failure.errno,
            detail: "jail setup step failed".to_string(),
        });
    }
    Ok((main_status.unwrap_or(ChildStatus::Exited(-1)), filter_kill))
}

#[cfg(target_arch = "x86_64")]
fn syscall_nr(regs: &libc::user_regs_struct) -> u64 {
    regs.orig_rax
}
#[cfg(target_arch = "x86_64")]
fn set_syscall_nr(regs: &mut libc::user_regs_struct, nr: u64) {
    regs.orig_rax = nr;
}
#[cfg(target_arch = "x86_64")]
fn return_value(regs: &libc::user_regs_struct) -> u64 {
    regs.rax
}
#[cfg(target_arch = "x86_64")]
fn set_return_value(regs: &mut libc::user_regs_struct, value: i64) {
    regs.rax = value as u64;
}

#[cfg(target_arch = "aarch64")]
fn syscall_nr(regs: &libc::user_regs_struct) -> u64 {
    regs.regs[8]
}
#[cfg(target_arch = "aarch64")]
fn set_syscall_nr(regs: &mut libc::user_regs_struct, nr: u64) {
    regs.regs[8] = nr;
}
#[cfg(target_arch = "aarch64")]
fn return_value(regs: &libc::user_regs_struct) -> u64 {
    regs.regs[0]
}
#[cfg(target_arch = "aarch64")]
fn set_return_value(regs: &mut libc::user_regs_struct, value: i64) {
    regs.regs[0] = value as u64;
}
