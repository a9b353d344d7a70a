//! The post-clone child program.
//!
//! Everything the child needs is prepared in the parent while allocation is
//! still safe: C strings, mount argument tuples, the kernel filter words, and
//! resolved environment entries. After the clone the child only walks these
//! prepared buffers with raw syscalls; in a forked copy of a multithreaded
//! process nothing else is sound. Failures are reported over the error pipe
//! as a fixed five-byte record (step index, errno) followed by `_exit(64)`,
//! so a partially confined child is never exec'd.

use std::ffi::CString;
use std::os::unix::ffi::OsStrExt;
use std::path::{Path, PathBuf};

use crate::plan::{LaunchPlan, PlanStep};
use crate::policy::{IdMapping, MountKind, NetworkMode};

use super::bpf::{self, SockFilter, SockFprog};
use super::Mode;

pub struct MountOp {
    mkdirs: Vec<CString>,
    create_file: Option<CString>,
    source: CString,
    target: CString,
    fstype: CString,
    flags: libc::c_ulong,
    remount_ro: bool,
}

pub enum PreparedStep {
    WriteFiles {
        /// (path, content, required): optional writes tolerate ENOENT.
        writes: Vec<(CString, CString, bool)>,
    },
    Mounts {
        make_private: bool,
        ops: Vec<MountOp>,
    },
    EnterRoot {
        root: CString,
    },
    SetHostname {
        name: CString,
    },
    CgroupBarrier {
        rlimits: Vec<(libc::c_int, u64)>,
    },
    Network {
        raise_loopback: bool,
    },
    DropCaps {
        keep_mask: u64,
    },
    InstallFilter {
        words: Vec<SockFilter>,
    },
    TracemeStop,
    Exec {
        argv_ptrs: Vec<*const libc::c_char>,
        env_ptrs: Vec<*const libc::c_char>,
        // Owners of the pointers above; kept alive for the child's lifetime.
        _argv: Vec<CString>,
        _env: Vec<CString>,
    },
}

/// A fully prepared child program: plan steps lowered to raw buffers.
pub struct ChildProgram {
    /// (plan step index, lowered step)
    pub steps: Vec<(usize, PreparedStep)>,
    pub clone_flags: libc::c_int,
    pub has_cgroup_barrier: bool,
}

// The raw pointers inside Exec point into CStrings owned by the same struct;
// the program is moved to the supervisor thread before the clone and never
// shared.
unsafe impl Send for ChildProgram {}

fn cstring(s: &str) -> Result<CString, super::JailError> {
    CString::new(s).map_err(|_| super::JailError::Invalid {
        reason: format!("embedded NUL in `{s}`"),
    })
}

fn cstring_path(p: &Path) -> Result<CString, super::JailError> {
    CString::new(p.as_os_str().as_bytes()).map_err(|_| super::JailError::Invalid {
        reason: format!("embedded NUL in `{}`", p.display()),
    })
}

fn idmap_content(mappings: &[IdMapping], self_id: u32) -> String {
    if mappings.is_empty() {
        return format!("0 {self_id} 1\n");
    }
    let mut out = String::new();
    for m in mappings {
        out.push_str(&format!("{} {} {}\n", m.inside, m.outside, m.count));
    }
    out
}

/// The mount target path on the host side: dest is interpreted relative to
/// the jail root.
fn target_path(chroot_root: &str, dest: &str) -> PathBuf {
    if chroot_root == "/" {
        PathBuf::from(dest)
    } else {
        Path::new(chroot_root).join(dest.trim_start_matches('/'))
    }
}

/// Lower a plan into the child program. Validates execution preconditions
/// that are cheap to check from the parent (bind sources, jail root).
pub fn prepare(
    plan: &LaunchPlan,
    mode: Mode,
    rlimits: &[(libc::c_int, u64)],
) -> Result<ChildProgram, super::JailError> {
    let mut clone_flags: libc::c_int = 0;
    let mut steps = Vec::new();
    let mut has_cgroup_barrier = false;
    let mut chroot_root = "/".to_string();

    // The chroot root is needed while lowering mounts, which precede
    // enter-root in the plan.
    for step in plan.steps() {
        if let PlanStep::EnterRoot(root) = step {
            chroot_root = root.clone();
        }
    }

    for (idx, step) in plan.steps().iter().enumerate() {
        match step {
            PlanStep::CreateNamespaces(set) => {
                for ns in set {
                    clone_flags |= match ns {
                        crate::policy::Namespace::User => libc::CLONE_NEWUSER,
                        crate::policy::Namespace::Pid => libc::CLONE_NEWPID,
                        crate::policy::Namespace::Mount => libc::CLONE_NEWNS,
                        crate::policy::Namespace::Net => libc::CLONE_NEWNET,
                        crate::policy::Namespace::Ipc => libc::CLONE_NEWIPC,
                        crate::policy::Namespace::Uts => libc::CLONE_NEWUTS,
                        crate::policy::Namespace::Cgroup => libc::CLONE_NEWCGROUP,
                    };
                }
            }
            PlanStep::WriteIdMaps { uid, gid } => {
                let self_uid = unsafe { libc::getuid() };
                let self_gid = unsafe { libc::getgid() };
                let writes = vec![
                    (
                        cstring("/proc/self/setgroups")?,
                        cstring("deny")?,
                        false, // absent on some kernels
                    ),
                    (
                        cstring("/proc/self/gid_map")?,
                        cstring(&idmap_content(gid, self_gid))?,
                        true,
                    ),
                    (
                        cstring("/proc/self/uid_map")?,
                        cstring(&idmap_content(uid, self_uid))?,
                        true,
                    ),
                ];
                steps.push((idx, PreparedStep::WriteFiles { writes }));
            }
            PlanStep::ApplyMounts(mounts) => {
                let mut ops = Vec::new();
                for m in mounts {
                    let target = target_path(&chroot_root, &m.dest);
                    let source_is_file = if m.kind == MountKind::Bind {
                        let meta = std::fs::metadata(&m.source).map_err(|e| {
                            super::JailError::SetupFailure {
                                step: "apply-mounts".to_string(),
                                errno: e.raw_os_error().unwrap_or(0),
                                detail: format!("bind source `{}` missing", m.source),
                            }
                        })?;
                        meta.is_file()
                    } else {
                        false
                    };
                    // Create the parent chain in the child, where tmpfs
                    // mounts from earlier ops are visible.
                    let mut mkdirs = Vec::new();
                    let mut chain = PathBuf::new();
                    let dir_target = if source_is_file {
                        target.parent().map(Path::to_path_buf).unwrap_or_default()
                    } else {
                        target.clone()
                    };
                    for component in dir_target.components() {
                        chain.push(component);
                        if chain.parent().is_some() {
                            mkdirs.push(cstring_path(&chain)?);
                        }
                    }
                    let (source, fstype, flags) = match m.kind {
                        MountKind::Bind => (
                            cstring(&m.source)?,
                            cstring("")?,
                            libc::MS_BIND | libc::MS_REC,
                        ),
                        MountKind::Tmpfs => {
                            let ro = if m.read_only { libc::MS_RDONLY } else { 0 };
                            (cstring("tmpfs")?, cstring("tmpfs")?, ro)
                        }
                        MountKind::Proc => {
                            let ro = if m.read_only { libc::MS_RDONLY } else { 0 };
                            (cstring("proc")?, cstring("proc")?, ro)
                        }
                    };
                    ops.push(MountOp {
                        mkdirs,
                        create_file: source_is_file.then(|| cstring_path(&target)).transpose()?,
                        source,
                        target: cstring_path(&target)?,
                        fstype,
                        flags,
                        remount_ro: m.kind == MountKind::Bind && m.read_only,
                    });
                }
                steps.push((
                    idx,
                    PreparedStep::Mounts {
                        make_private: true,
                        ops,
                    },
                ));
            }
            PlanStep::EnterRoot(root) => {
                if !Path::new(root).is_dir() {
                    return Err(super::JailError::SetupFailure {
                        step: "enter-root".to_string(),
                        errno: libc::ENOENT,
                        detail: format!("jail root `{root}` is not a directory"),
                    });
                }
                steps.push((idx, PreparedStep::EnterRoot { root: cstring(root)? }));
            }
            PlanStep::SetHostname(name) => {
                steps.push((idx, PreparedStep::SetHostname { name: cstring(name)? }));
            }
            PlanStep::ApplyCgroups(_) => {
                has_cgroup_barrier = true;
                steps.push((
                    idx,
                    PreparedStep::CgroupBarrier {
                        rlimits: rlimits.to_vec(),
                    },
                ));
            }
            PlanStep::ConfigureNetwork(mode) => {
                steps.push((
                    idx,
                    PreparedStep::Network {
                        raise_loopback: *mode == NetworkMode::LoopbackOnly,
                    },
                ));
            }
            PlanStep::DropCapabilities(keep) => {
                let mut mask = 0u64;
                for name in keep {
                    let bit = crate::caps::bit(name).ok_or_else(|| super::JailError::Invalid {
                        reason: format!("unknown capability `{name}`"),
                    })?;
                    mask |= 1 << bit;
                }
                steps.push((idx, PreparedStep::DropCaps { keep_mask: mask }));
            }
            PlanStep::InstallFilter(spec) => match mode {
                Mode::Enforce => {
                    steps.push((
                        idx,
                        PreparedStep::InstallFilter {
                            words: bpf::emit(&spec.program),
                        },
                    ));
                }
                Mode::Observe => {
                    steps.push((idx, PreparedStep::TracemeStop));
                }
            },
            PlanStep::ExecTarget { argv, env } => {
                let mut argv_c = Vec::with_capacity(argv.len());
                for a in argv {
                    argv_c.push(cstring(a)?);
                }
                let mut env_c = Vec::new();
                for name in env {
                    if let Ok(value) = std::env::var(name) {
                        env_c.push(cstring(&format!("{name}={value}"))?);
                    }
                }
                let mut argv_ptrs: Vec<*const libc::c_char> =
                    argv_c.iter().map(|c| c.as_ptr()).collect();
                argv_ptrs.push(std::ptr::null());
                let mut env_ptrs: Vec<*const libc::c_char> =
                    env_c.iter().map(|c| c.as_ptr()).collect();
                env_ptrs.push(std::ptr::null());
                steps.push((
                    idx,
                    PreparedStep::Exec {
                        argv_ptrs,
                        env_ptrs,
                        _argv: argv_c,
                        _env: env_c,
                    },
                ));
            }
        }
    }

    Ok(ChildProgram {
        steps,
        clone_flags,
        has_cgroup_barrier,
    })
}

/// Runtime file descriptors and the injected failure point.
pub struct ChildContext {
    pub err_fd: libc::c_int,
    pub cg_req_fd: libc::c_int,
    pub cg_ack_fd: libc::c_int,
    pub stdout_fd: libc::c_int,
    /// Parent-side pipe ends the child must not keep open (negative entries
    /// are ignored).
    pub close_fds: [libc::c_int; 4],
    pub fail_at: Option<usize>,
}

fn errno() -> i32 {
    std::io::Error::last_os_error().raw_os_error().unwrap_or(0)
}

unsafe fn report_and_exit(ctx: &ChildContext, step_idx: usize, err: i32) -> ! {
    let mut buf = [0u8; 5];
    buf[0] = step_idx as u8;
    buf[1..5].copy_from_slice(&err.to_le_bytes());
    libc::write(ctx.err_fd, buf.as_ptr().cast(), buf.len());
    libc::_exit(64)
}

/// Execute the prepared program. Never returns.
///
/// # Safety
/// Must only be called in the freshly cloned child. Performs raw syscalls on
/// the prepared buffers and nothing else.
pub unsafe fn run(program: &ChildProgram, ctx: &ChildContext) -> ! {
    for &fd in &ctx.close_fds {
        if fd >= 0 {
            libc::close(fd);
        }
    }
    for (plan_idx, step) in &program.steps {
        if ctx.fail_at == Some(*plan_idx) {
            report_and_exit(ctx, *plan_idx, libc::ECANCELED);
        }
        let failed_errno = run_step(step, ctx);
        if failed_errno != 0 {
            report_and_exit(ctx, *plan_idx, failed_errno);
        }
    }
    // Plans always end in an exec step, which either never returns or
    // reported its own failure above.
    libc::_exit(64)
}

/// Returns 0 on success, the errno on failure.
unsafe fn run_step(step: &PreparedStep, ctx: &ChildContext) -> i32 {
    match step {
        PreparedStep::WriteFiles { writes } => {
            for (path, content, required) in writes {
                let fd = libc::open(path.as_ptr(), libc::O_WRONLY);
                if fd < 0 {
                    if !required && errno() == libc::ENOENT {
                        continue;
                    }
                    return errno();
                }
                let bytes = content.as_bytes();
                let n = libc::write(fd, bytes.as_ptr().cast(), bytes.len());
                let write_err = if n != bytes.len() as isize { errno() } else { 0 };
                libc::close(fd);
                if write_err != 0 {
                    return write_err;
                }
            }
            0
        }
        PreparedStep::Mounts { make_private, ops } => {
            if *make_private {
                let root = b"/\0";
                if libc::mount(
                    std::ptr::null(),
                    root.as_ptr().cast(),
                    std::ptr::null(),
                    libc::MS_REC | libc::MS_PRIVATE,
                    std::ptr::null(),
                ) != 0
                {
                    return errno();
                }
            }
            for op in ops {
                for dir in &op.mkdirs {
                    if libc::mkdir(dir.as_ptr(), 0o755) != 0 && errno() != libc::EEXIST {
                        return errno();
                    }
                }
                if let Some(path) = &op.create_file {
                    let fd = libc::open(path.as_ptr(), libc::O_WRONLY | libc::O_CREAT, 0o644);
                    if fd < 0 && errno() != libc::EEXIST {
                        return errno();
                    }
                    if fd >= 0 {
                        libc::close(fd);
                    }
                }
                if libc::mount(
                    op.source.as_ptr(),
                    op.target.as_ptr(),
                    op.fstype.as_ptr(),
                    op.flags,
                    std::ptr::null(),
                ) != 0
                {
                    return errno();
                }
                if op.remount_ro
                    && libc::mount(
                        std::ptr::null(),
                        op.target.as_ptr(),
                        std::ptr::null(),
                        libc::MS_BIND | libc::MS_REMOUNT | libc::MS_RDONLY,
                        std::ptr::null(),
                    ) != 0
                {
                    return errno();
                }
            }
            0
        }
        PreparedStep::EnterRoot { root } => {
            if libc::chroot(root.as_ptr()) != 0 {
                return errno();
            }
            let slash = b"/\0";
            if libc::chdir(slash.as_ptr().cast()) != 0 {
                return errno();
            }
            0
        }
        PreparedStep::SetHostname { name } => {
            let bytes = name.as_bytes();
            if libc::sethostname(bytes.as_ptr().cast(), bytes.len()) != 0 {
                return errno();
            }
            0
        }
        PreparedStep::CgroupBarrier { rlimits } => {
            // Ask the supervisor to attach this pid to the prepared cgroups,
            // then wait for the ack before anything can exceed a limit.
            let req = [b'C'];
            if libc::write(ctx.cg_req_fd, req.as_ptr().cast(), 1) != 1 {
                return errno();
            }
            let mut ack = [0u8; 1];
            let n = libc::read(ctx.cg_ack_fd, ack.as_mut_ptr().cast(), 1);
            if n != 1 {
                return if errno() != 0 { errno() } else { libc::EPIPE };
            }
            if ack[0] != 0 {
                // The supervisor failed (or injected a failure) on its side
                // and already recorded the detail.
                libc::_exit(64);
            }
            for &(resource, value) in rlimits {
                let lim = libc::rlimit {
                    rlim_cur: value,
                    rlim_max: value,
                };
                if libc::setrlimit(resource as _, &lim) != 0 {
                    return errno();
                }
            }
            0
        }
        PreparedStep::Network { raise_loopback } => {
            if !raise_loopback {
                return 0; // isolated: the empty namespace is the policy
            }
            let fd = libc::socket(libc::AF_INET, libc::SOCK_DGRAM, 0);
            if fd < 0 {
                return errno();
            }
            let mut ifr: libc::ifreq = std::mem::zeroed();
            ifr.ifr_name[..2].copy_from_slice(&[b'l' as libc::c_char, b'o' as libc::c_char]);
            if libc::ioctl(fd, libc::SIOCGIFFLAGS, &mut ifr) != 0 {
                let e = errno();
                libc::close(fd);
                return e;
            }
            let up = libc::IFF_UP as libc::c_short;
            if ifr.ifr_ifru.ifru_flags & up == 0 {
                ifr.ifr_ifru.ifru_flags |= up;
                if libc::ioctl(fd, libc::SIOCSIFFLAGS, &ifr) != 0 {
                    let e = errno();
                    libc::close(fd);
                    return e;
                }
            }
            libc::close(fd);
            0
        }
        PreparedStep::DropCaps { keep_mask } => {
            for cap in 0..=63u32 {
                if keep_mask & (1 << cap) != 0 {
                    continue;
                }
                if libc::prctl(libc::PR_CAPBSET_DROP, cap as libc::c_ulong, 0, 0, 0) != 0 {
                    match errno() {
                        // Bits beyond the kernel's last capability.
                        libc::EINVAL => continue,
                        e => return e,
                    }
                }
            }
            // Ambient clearing is best-effort: kernels and sandboxes without
            // ambient capability support report EINVAL.
            libc::prctl(libc::PR_CAP_AMBIENT, libc::PR_CAP_AMBIENT_CLEAR_ALL, 0, 0, 0);

            #[repr(C)]
            struct CapHdr {
                version: u32,
                pid: libc::c_int,
            }
            #[repr(C)]
            #[derive(Clone, Copy)]
            struct CapData {
                effective: u32,
                permitted: u32,
                inheritable: u32,
            }
            let hdr = CapHdr {
                version: 0x2008_0522, // _LINUX_CAPABILITY_VERSION_3
                pid: 0,
            };
            let low = (*keep_mask & 0xFFFF_FFFF) as u32;
            let high = (*keep_mask >> 32) as u32;
            let data = [
                CapData {
                    effective: low,
                    permitted: low,
                    inheritable: 0,
                },
                CapData {
                    effective: high,
                    permitted: high,
                    inheritable: 0,
                },
            ];
            if libc::syscall(libc::SYS_capset, &hdr, data.as_ptr()) != 0 {
                return errno();
            }
            0
        }
        PreparedStep::InstallFilter { words } => {
            if libc::prctl(libc::PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0 {
                return errno();
            }
            let prog = SockFprog {
                len: words.len() as libc::c_ushort,
                filter: words.as_ptr(),
            };
            if libc::prctl(libc::PR_SET_SECCOMP, libc::SECCOMP_MODE_FILTER, &prog) != 0 {
                return errno();
            }
            0
        }
        PreparedStep::TracemeStop => {
            if libc::prctl(libc::PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0 {
                return errno();
            }
            if libc::ptrace(libc::PTRACE_TRACEME, 0, 0, 0) != 0 {
                return errno();
            }
            if libc::kill(libc::getpid(), libc::SIGSTOP) != 0 {
                return errno();
            }
            0
        }
        PreparedStep::Exec {
            argv_ptrs,
            env_ptrs,
            ..
        } => {
            if ctx.stdout_fd >= 0 && libc::dup2(ctx.stdout_fd, 1) < 0 {
                return errno();
            }
            libc::execve(argv_ptrs[0], argv_ptrs.as_ptr(), env_ptrs.as_ptr());
            errno()
        }
    }
}
