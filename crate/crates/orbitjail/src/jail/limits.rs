//! Resource caps: cgroups when the controller filesystem is writable,
//! per-process resource limits as the documented fallback.
//!
//! Memory gets both belts when possible: the cgroup limit plus RLIMIT_AS in
//! the child, because some environments (gVisor-style sandboxes, containers)
//! accept cgroup writes without enforcing them. Pid caps use the pids
//! controller; the RLIMIT_NPROC fallback is only armed when no controller is
//! available, since NPROC counts processes per uid and would throttle
//! unrelated jails sharing the invoking user. cpu_percent has no per-process
//! equivalent and is reported unenforced when cgroups are unavailable.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::policy::ResourceLimits;

/// How each requested limit ended up enforced, recorded so the supervision
/// record never overstates containment.
#[derive(Debug, Clone, Default, Serialize, PartialEq, Eq)]
pub struct LimitsEnforcement {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memory: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pids: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cpu: Option<String>,
}

/// One jail's prepared cgroup directories.
#[derive(Debug, Default)]
pub struct CgroupSetup {
    /// v1 controller dirs (or the single v2 dir) to attach the child to and
    /// remove afterwards.
    dirs: Vec<PathBuf>,
    pub enforcement: LimitsEnforcement,
    /// rlimit values the child applies to itself: (resource, value).
    pub child_rlimits: Vec<(libc::c_int, u64)>,
}

fn cgroup_v2_root() -> Option<PathBuf> {
    let root = PathBuf::from("/sys/fs/cgroup");
    root.join("cgroup.controllers").exists().then_some(root)
}

fn v1_controller(name: &str) -> Option<PathBuf> {
    let dir = PathBuf::from("/sys/fs/cgroup").join(name);
    dir.is_dir().then_some(dir)
}

fn make_group(parent: &Path, tag: &str) -> std::io::Result<PathBuf> {
    let dir = parent.join(tag);
    match fs::create_dir(&dir) {
        Ok(()) => Ok(dir),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Ok(dir),
        Err(e) => Err(e),
    }
}

fn write_file(path: &Path, value: &str) -> std::io::Result<()> {
    let mut f = fs::OpenOptions::new().write(true).open(path)?;
    f.write_all(value.as_bytes())
}

/// Prepare the cgroup directories and decide the enforcement mix.
///
/// Never fails the launch: anything the environment refuses degrades to the
/// rlimit fallback (or to "unenforced" for the cpu quota) and is recorded.
pub fn prepare(jail_name: &str, limits: &ResourceLimits) -> CgroupSetup {
    let mut setup = CgroupSetup::default();
    if limits.is_empty() {
        return setup;
    }
    let tag = format!("orbitjail-{jail_name}-{}", std::process::id());

    let v2 = cgroup_v2_root();

    if let Some(memory) = limits.memory_bytes {
        let mut via_cgroup = false;
        if let Some(root) = &v2 {
            via_cgroup = make_group(root, &tag)
                .and_then(|dir| {
                    write_file(&dir.join("memory.max"), &memory.to_string())?;
                    setup.dirs.push(dir);
                    Ok(())
                })
                .is_ok();
        } else if let Some(ctrl) = v1_controller("memory") {
            via_cgroup = make_group(&ctrl, &tag)
                .and_then(|dir| {
                    write_file(&dir.join("memory.limit_in_bytes"), &memory.to_string())?;
                    setup.dirs.push(dir);
                    Ok(())
                })
                .is_ok();
        }
        // The address-space rlimit rides along even when the cgroup write
        // succeeded; environments exist where the write is accepted but the
        // limit never fires.
        setup.child_rlimits.push((libc::RLIMIT_AS as _, memory));
        setup.enforcement.memory = Some(if via_cgroup {
            "cgroup+rlimit".to_string()
        } else {
            "rlimit".to_string()
        });
    }

    if let Some(pids) = limits.pids_max {
        let mut via_cgroup = false;
        if let Some(root) = &v2 {
            via_cgroup = make_group(root, &tag)
                .and_then(|dir| {
                    write_file(&dir.join("pids.max"), &pids.to_string())?;
                    if !setup.dirs.contains(&dir) {
                        setup.dirs.push(dir);
                    }
                    Ok(())
                })
                .is_ok();
        } else if let Some(ctrl) = v1_controller("pids") {
            via_cgroup = make_group(&ctrl, &tag)
                .and_then(|dir| {
                    write_file(&dir.join("pids.max"), &pids.to_string())?;
                    setup.dirs.push(dir);
                    Ok(())
                })
                .is_ok();
        }
        if via_cgroup {
            setup.enforcement.pids = Some("cgroup".to_string());
        } else {
            setup
                .child_rlimits
                .push((libc::RLIMIT_NPROC as _, pids as u64));
            setup.enforcement.pids = Some("rlimit".to_string());
        }
    }

    if let Some(percent) = limits.cpu_percent {
        let mut via_cgroup = false;
        if let Some(root) = &v2 {
            via_cgroup = make_group(root, &tag)
                .and_then(|dir| {
                    let period = 100_000u64;
                    let quota = period * percent as u64 / 100;
                    write_file(&dir.join("cpu.max"), &format!("{quota} {period}"))?;
                    if !setup.dirs.contains(&dir) {
                        setup.dirs.push(dir);
                    }
                    Ok(())
                })
                .is_ok();
        } else if let Some(ctrl) = v1_controller("cpu") {
            via_cgroup = make_group(&ctrl, &tag)
                .and_then(|dir| {
                    let period = 100_000u64;
                    let quota = period * percent as u64 / 100;
                    write_file(&dir.join("cpu.cfs_period_us"), &period.to_string())?;
                    write_file(&dir.join("cpu.cfs_quota_us"), &quota.to_string())?;
                    setup.dirs.push(dir);
                    Ok(())
                })
                .is_ok();
        }
        setup.enforcement.cpu = Some(if via_cgroup {
            "cgroup".to_string()
        } else {
            "unenforced".to_string()
        });
    }

    setup
}

impl CgroupSetup {
    /// Attach a child pid to every prepared group.
    pub fn attach(&self, pid: libc::pid_t) -> std::io::Result<()> {
        for dir in &self.dirs {
            write_file(&dir.join("cgroup.procs"), &pid.to_string())?;
        }
        Ok(())
    }

    /// Post-exit evidence that a limit actually fired.
    pub fn limit_hits(&self) -> Vec<String> {
        let mut hits = Vec::new();
        for dir in &self.dirs {
            for (file, label) in [
                ("memory.failcnt", "memory"),
                ("memory.events", "memory"),
                ("pids.events", "pids"),
            ] {
                let path = dir.join(file);
                if let Ok(text) = fs::read_to_string(&path) {
                    let fired = if file == "memory.failcnt" {
                        text.trim().parse::<u64>().map(|n| n > 0).unwrap_or(false)
                    } else {
                        // "oom 3" / "max 2" style event counters.
                        text.lines().any(|l| {
                            let mut it = l.split_whitespace();
                            matches!(
                                (it.next(), it.next().and_then(|v| v.parse::<u64>().ok())),
                                (Some("oom" | "max" | "oom_kill"), Some(n)) if n > 0
                            )
                        })
                    };
                    if fired && !hits.iter().any(|h| h == label) {
                        hits.push(label.to_string());
                    }
                }
            }
        }
        hits
    }

    /// Remove the cgroup directories. Retries briefly: the kernel holds the
    /// directory busy until the last task is fully reaped.
    pub fn cleanup(&self) {
        for dir in &self.dirs {
            for _ in 0..50 {
                match fs::remove_dir(dir) {
                    Ok(()) => break,
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => break,
                    Err(_) => std::thread::sleep(std::time::Duration::from_millis(10)),
                }
            }
        }
    }
}
