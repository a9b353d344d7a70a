//! In-jail isolation verification.
//!
//! The probe program runs as the jailed process, empirically checks every
//! confinement claim the policy makes, and emits a machine-readable report.
//! Probes run sequentially in a fixed declared order so reports are
//! diffable, and they never attempt privileged repairs; the only write is a
//! single scratch file under a designated writable mount.
//!
//! Exit codes: 0 all pass, 1 any fail, 2 harness failure, 3 passes with
//! skips.

use serde::{Deserialize, Serialize};

use crate::policy::{MountKind, Namespace, NetworkMode, SandboxPolicy};

/// What the probe program is asked to check, derived from a policy.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Expectations {
    pub policy_name: String,
    /// Expected apparent uid (the inside id of the first uid mapping, or 0
    /// under the default self-map). None when no user namespace is expected.
    pub uid: Option<u32>,
    /// Expect to be pid 1.
    pub pid1: bool,
    pub hostname: Option<String>,
    /// Paths that must be readable inside the jail.
    pub visible: Vec<String>,
    /// Paths that must not exist inside the jail (escape probes).
    pub absent: Vec<String>,
    /// Mount destinations that must reject writes.
    pub read_only: Vec<String>,
    /// A writable location for the single scratch-write probe.
    pub writable: Option<String>,
    pub network: Option<NetworkExpectation>,
    /// A syscall (by name) that the filter kills; checked in a sacrificial
    /// child so the prober itself survives.
    pub killed_syscall: Option<String>,
    /// Expect privileged actions (hostname change) to fail.
    pub caps_dropped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkExpectation {
    Isolated,
    LoopbackOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: String,
    pub expected: String,
    pub observed: String,
    pub verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Structured pass/fail evidence that each confinement claim holds.
#[derive(Debug, Serialize, Deserialize)]
pub struct IsolationReport {
    pub policy: String,
    pub ts_ms: u64,
    pub checks: Vec<CheckResult>,
}

impl IsolationReport {
    pub fn any_failed(&self) -> bool {
        self.checks.iter().any(|c| c.verdict == Verdict::Fail)
    }

    pub fn any_skipped(&self) -> bool {
        self.checks.iter().any(|c| c.verdict == Verdict::Skipped)
    }

    /// 0 all pass, 1 any fail, 3 passes with skips.
    pub fn exit_code(&self) -> i32 {
        if self.any_failed() {
            1
        } else if self.any_skipped() {
            3
        } else {
            0
        }
    }
}

/// Derive the probe set a policy implies.
///
/// Every confinement claim in the policy produces exactly one check; fields
/// the policy leaves empty produce none.
pub fn expectations_from_policy(policy: &SandboxPolicy) -> Expectations {
    let mut exp = Expectations {
        policy_name: policy.name.clone(),
        ..Default::default()
    };
    if policy.namespaces.contains(&Namespace::User) {
        exp.uid = Some(policy.uid_map.first().map(|m| m.inside).unwrap_or(0));
    }
    exp.pid1 = policy.namespaces.contains(&Namespace::Pid);
    if !policy.hostname.is_empty() && policy.namespaces.contains(&Namespace::Uts) {
        exp.hostname = Some(policy.hostname.clone());
    }
    for mount in &policy.mounts {
        exp.visible.push(mount.dest.clone());
        if mount.read_only {
            exp.read_only.push(mount.dest.clone());
        } else if exp.writable.is_none() && mount.kind == MountKind::Tmpfs {
            exp.writable = Some(mount.dest.clone());
        }
    }
    if policy.chroot_root != "/" {
        // The jail root's own host path must be invisible from inside.
        exp.absent.push(policy.chroot_root.clone());
    }
    exp.network = match policy.network_mode {
        NetworkMode::Isolated => Some(NetworkExpectation::Isolated),
        NetworkMode::LoopbackOnly => Some(NetworkExpectation::LoopbackOnly),
        NetworkMode::Passthrough => None,
    };
    exp.killed_syscall = pick_killed_syscall(policy);
    exp.caps_dropped = !policy.capabilities.contains("CAP_SYS_ADMIN");
    exp
}

/// A denied syscall the probe's sacrificial child can safely attempt:
/// harmless, capability-free, and absent from the allow list of a
/// default-kill policy.
fn pick_killed_syscall(policy: &SandboxPolicy) -> Option<String> {
    use crate::seccomp::Action;
    if policy.seccomp.default_action != Action::Kill {
        return None;
    }
    let table = crate::seccomp::tables::native();
    ["symlinkat", "symlink", "linkat", "mknodat"]
        .iter()
        .find(|name| {
            table.contains(name) && policy.seccomp.action_for(name) == Action::Kill
        })
        .map(|s| s.to_string())
}

#[cfg(target_os = "linux")]
mod probes {
    use super::*;

    fn check(
        name: &str,
        expected: impl Into<String>,
        observed: impl Into<String>,
        ok: bool,
    ) -> CheckResult {
        CheckResult {
            check: name.to_string(),
            expected: expected.into(),
            observed: observed.into(),
            verdict: if ok { Verdict::Pass } else { Verdict::Fail },
            reason: None,
        }
    }

    fn skipped(name: &str, expected: impl Into<String>, reason: &str) -> CheckResult {
        CheckResult {
            check: name.to_string(),
            expected: expected.into(),
            observed: "not probed".to_string(),
            verdict: Verdict::Skipped,
            reason: Some(reason.to_string()),
        }
    }

    pub fn uid_probe(expected: u32) -> CheckResult {
        let uid = unsafe { libc::getuid() };
        check("uid", expected.to_string(), uid.to_string(), uid == expected)
    }

    pub fn pid_probe() -> CheckResult {
        let pid = std::process::id();
        check("pid", "1", pid.to_string(), pid == 1)
    }

    pub fn hostname_probe(expected: &str) -> CheckResult {
        let mut buf = [0u8; 256];
        let rc = unsafe { libc::gethostname(buf.as_mut_ptr().cast(), buf.len()) };
        let observed = if rc == 0 {
            let end = buf.iter().position(|&b| b == 0).unwrap_or(buf.len());
            String::from_utf8_lossy(&buf[..end]).into_owned()
        } else {
            format!("gethostname failed: {}", std::io::Error::last_os_error())
        };
        let ok = observed == expected;
        check("hostname", expected, observed, ok)
    }

    pub fn fs_read_probe(path: &str) -> CheckResult {
        let ok = std::fs::metadata(path).is_ok();
        check(
            &format!("fs-read:{path}"),
            "readable",
            if ok { "readable" } else { "missing" },
            ok,
        )
    }

    pub fn fs_escape_probe(path: &str) -> CheckResult {
        let exists = std::path::Path::new(path).exists();
        check(
            &format!("fs-escape:{path}"),
            "absent",
            if exists { "visible" } else { "absent" },
            !exists,
        )
    }

    pub fn ro_probe(dest: &str) -> CheckResult {
        let probe_path = format!("{}/.orbitjail-ro-probe", dest.trim_end_matches('/'));
        let result = std::fs::OpenOptions::new()
            .write(true)
            .create(true)
            .open(&probe_path);
        match result {
            Ok(_) => {
                let _ = std::fs::remove_file(&probe_path);
                check(&format!("ro:{dest}"), "write rejected", "write succeeded", false)
            }
            Err(e) if e.raw_os_error() == Some(libc::EROFS) => {
                check(&format!("ro:{dest}"), "write rejected", "EROFS", true)
            }
            Err(e) => {
                // Rejected, but not with the read-only error.
                check(
                    &format!("ro:{dest}"),
                    "write rejected",
                    format!("rejected: {e}"),
                    true,
                )
            }
        }
    }

    pub fn scratch_write_probe(dest: &str) -> CheckResult {
        let probe_path = format!("{}/.orbitjail-scratch", dest.trim_end_matches('/'));
        let ok = std::fs::write(&probe_path, b"scratch").is_ok()
            && std::fs::read(&probe_path).map(|d| d == b"scratch").unwrap_or(false);
        let _ = std::fs::remove_file(&probe_path);
        check(
            &format!("scratch-write:{dest}"),
            "writable",
            if ok { "writable" } else { "rejected" },
            ok,
        )
    }

    pub fn net_probe(expectation: NetworkExpectation) -> CheckResult {
        use std::net::TcpStream;
        use std::time::Duration;
        match expectation {
            NetworkExpectation::Isolated => {
                // In an interface-less namespace any outbound connect fails
                // immediately with a network error.
                let outbound = TcpStream::connect_timeout(
                    &"192.0.2.1:9".parse().unwrap(),
                    Duration::from_millis(300),
                );
                let ok = outbound.is_err();
                check(
                    "net-isolated",
                    "outbound connect fails",
                    if ok { "unreachable" } else { "connected" },
                    ok,
                )
            }
            NetworkExpectation::LoopbackOnly => {
                let listener = std::net::TcpListener::bind("127.0.0.1:0");
                let ok = match listener {
                    Ok(l) => {
                        let addr = l.local_addr().unwrap();
                        TcpStream::connect_timeout(&addr, Duration::from_millis(500)).is_ok()
                    }
                    Err(_) => false,
                };
                check(
                    "net-loopback",
                    "loopback reachable",
                    if ok { "reachable" } else { "unreachable" },
                    ok,
                )
            }
        }
    }

    /// Fork a sacrificial child that invokes the denied syscall with raw
    /// arguments; the filter must terminate the child while the prober
    /// survives.
    pub fn syscall_probe(name: &str) -> CheckResult {
        let table = crate::seccomp::tables::native();
        let nr = match table.resolve(name) {
            Ok(nr) => nr,
            Err(_) => return skipped("syscall", format!("{name} killed"), "not on this arch"),
        };
        let child = unsafe { libc::fork() };
        if child < 0 {
            return skipped("syscall", format!("{name} killed"), "fork unavailable");
        }
        if child == 0 {
            unsafe {
                // Harmless arguments: a symlink/link attempt into an
                // obviously bogus path fails even if allowed.
                let target = b"/.orbitjail-nonexistent\0";
                libc::syscall(
                    nr as libc::c_long,
                    target.as_ptr(),
                    libc::AT_FDCWD,
                    target.as_ptr(),
                );
                libc::_exit(7);
            }
        }
        let mut status = 0;
        unsafe {
            libc::waitpid(child, &mut status, 0);
        }
        let killed = libc::WIFSIGNALED(status) && libc::WTERMSIG(status) == libc::SIGSYS;
        check(
            "syscall",
            format!("{name} kills the caller"),
            if killed {
                "child killed by SIGSYS".to_string()
            } else if libc::WIFEXITED(status) {
                format!("child exited {}", libc::WEXITSTATUS(status))
            } else {
                format!("child signaled {}", libc::WTERMSIG(status))
            },
            killed,
        )
    }

    pub fn cap_probe() -> CheckResult {
        let name = b"orbitjail-cap-probe";
        let rc = unsafe { libc::sethostname(name.as_ptr().cast(), name.len()) };
        if rc == 0 {
            // Undo the accidental success as far as possible.
            let old = b"orbitjail";
            unsafe {
                libc::sethostname(old.as_ptr().cast(), old.len());
            }
            check("caps", "hostname change rejected", "change succeeded", false)
        } else {
            check(
                "caps",
                "hostname change rejected",
                format!("rejected: {}", std::io::Error::last_os_error()),
                true,
            )
        }
    }
}

/// Run the probe set. Must execute as the (jailed) process under test; run
/// it unjailed only as a negative control.
#[cfg(target_os = "linux")]
pub fn run_probes(exp: &Expectations) -> IsolationReport {
    let mut checks = Vec::new();
    if let Some(uid) = exp.uid {
        checks.push(probes::uid_probe(uid));
    }
    if exp.pid1 {
        checks.push(probes::pid_probe());
    }
    if let Some(hostname) = &exp.hostname {
        checks.push(probes::hostname_probe(hostname));
    }
    for path in &exp.visible {
        checks.push(probes::fs_read_probe(path));
    }
    for path in &exp.absent {
        checks.push(probes::fs_escape_probe(path));
    }
    for path in &exp.read_only {
        checks.push(probes::ro_probe(path));
    }
    if let Some(path) = &exp.writable {
        checks.push(probes::scratch_write_probe(path));
    }
    if let Some(net) = exp.network {
        checks.push(probes::net_probe(net));
    }
    if let Some(name) = &exp.killed_syscall {
        checks.push(probes::syscall_probe(name));
    }
    if exp.caps_dropped {
        checks.push(probes::cap_probe());
    }
    IsolationReport {
        policy: exp.policy_name.clone(),
        ts_ms: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0),
        checks,
    }
}

/// Report shape when the kernel cannot provide the namespaces the policy
/// needs: every derived check is present, each skipped with the reason.
pub fn all_skipped_report(exp: &Expectations, reason: &str) -> IsolationReport {
    let mut checks = Vec::new();
    let mut push = |name: String, expected: String| {
        checks.push(CheckResult {
            check: name,
            expected,
            observed: "not probed".to_string(),
            verdict: Verdict::Skipped,
            reason: Some(reason.to_string()),
        });
    };
    if let Some(uid) = exp.uid {
        push("uid".into(), uid.to_string());
    }
    if exp.pid1 {
        push("pid".into(), "1".into());
    }
    if let Some(h) = &exp.hostname {
        push("hostname".into(), h.clone());
    }
    for p in &exp.visible {
        push(format!("fs-read:{p}"), "readable".into());
    }
    for p in &exp.absent {
        push(format!("fs-escape:{p}"), "absent".into());
    }
    for p in &exp.read_only {
        push(format!("ro:{p}"), "write rejected".into());
    }
    if let Some(p) = &exp.writable {
        push(format!("scratch-write:{p}"), "writable".into());
    }
    if exp.network.is_some() {
        push("net".into(), "per policy".into());
    }
    if let Some(s) = &exp.killed_syscall {
        push("syscall".into(), format!("{s} kills the caller"));
    }
    if exp.caps_dropped {
        push("caps".into(), "hostname change rejected".into());
    }
    IsolationReport {
        policy: exp.policy_name.clone(),
        ts_ms: 0,
        checks,
    }
}

/// Count of checks a policy implies; reports must carry exactly this many.
pub fn expected_check_count(exp: &Expectations) -> usize {
    exp.uid.is_some() as usize
        + exp.pid1 as usize
        + exp.hostname.is_some() as usize
        + exp.visible.len()
        + exp.absent.len()
        + exp.read_only.len()
        + exp.writable.is_some() as usize
        + exp.network.is_some() as usize
        + exp.killed_syscall.is_some() as usize
        + exp.caps_dropped as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::parse_policy;

    #[test]
    fn expectations_cover_every_policy_claim() {
        let text = "\
[sandbox]
name = ref
chroot = /srv/jail/ref
hostname = refhost
network_mode = isolated

[namespaces]
user = true
mount = true
pid = true
net = true
uts = true

[idmap]
uid = 4242:0:1

[mounts]
mount = bind,/usr,/usr,ro
mount = tmpfs,tmpfs,/work,rw

[seccomp]
default = kill
allow = read, write
";
        let policy = parse_policy(text).unwrap();
        let exp = expectations_from_policy(&policy);
        assert_eq!(exp.uid, Some(4242));
        assert!(exp.pid1);
        assert_eq!(exp.hostname.as_deref(), Some("refhost"));
        assert_eq!(exp.visible, vec!["/usr".to_string(), "/work".to_string()]);
        assert_eq!(exp.absent, vec!["/srv/jail/ref".to_string()]);
        assert_eq!(exp.read_only, vec!["/usr".to_string()]);
        assert_eq!(exp.writable.as_deref(), Some("/work"));
        assert_eq!(exp.network, Some(NetworkExpectation::Isolated));
        assert_eq!(exp.killed_syscall.as_deref(), Some("symlinkat"));
        assert!(exp.caps_dropped);
        // uid, pid, hostname, 2 visible, 1 escape, 1 read-only, scratch
        // write, network, syscall, caps.
        assert_eq!(expected_check_count(&exp), 11);
    }

    #[test]
    fn allow_default_policies_skip_the_kill_probe() {
        let policy = parse_policy("[sandbox]\nname = x\nchroot = /\n").unwrap();
        let exp = expectations_from_policy(&policy);
        assert!(exp.killed_syscall.is_none());
        assert!(exp.uid.is_none());
    }

    #[test]
    fn skipped_report_is_complete_and_exits_three() {
        let text = "\
[sandbox]
name = ref
chroot = /srv/jail/ref

[namespaces]
user = true
mount = true
pid = true
";
        let policy = parse_policy(text).unwrap();
        let exp = expectations_from_policy(&policy);
        let report = all_skipped_report(&exp, "user-ns-unavailable");
        assert_eq!(report.checks.len(), expected_check_count(&exp));
        assert!(report.checks.iter().all(|c| c.verdict == Verdict::Skipped));
        assert!(report
            .checks
            .iter()
            .all(|c| c.reason.as_deref() == Some("user-ns-unavailable")));
        assert_eq!(report.exit_code(), 3);
    }

    #[cfg(target_os = "linux")]
    #[test]
    fn negative_control_fails_under_no_confinement() {
        // The probes must be able to fail: run jail expectations unjailed.
        let exp = Expectations {
            policy_name: "negative".to_string(),
            uid: Some(424_242),
            pid1: true,
            absent: vec!["/".to_string()],
            ..Default::default()
        };
        let report = run_probes(&exp);
        assert_eq!(report.checks.len(), 3);
        assert!(report.checks.iter().all(|c| c.verdict == Verdict::Fail));
        assert_eq!(report.exit_code(), 1);
    }

    #[test]
    fn report_round_trips_as_json() {
        let exp = Expectations {
            policy_name: "json".to_string(),
            pid1: true,
            ..Default::default()
        };
        let report = all_skipped_report(&exp, "test");
        let text = serde_json::to_string(&report).unwrap();
        let back: IsolationReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.checks.len(), report.checks.len());
    }
}
