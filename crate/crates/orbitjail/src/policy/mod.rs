//! The declarative sandbox policy model.
//!
//! A [`SandboxPolicy`] fully describes one jail: namespaces, id mappings,
//! mounts, the syscall filter, retained capabilities, resource limits, and
//! the network mode. Policies are immutable after construction and validated
//! as a whole; a misspelled or inconsistent restriction is a hard error, not
//! a warning, because a policy that silently weakens a jail is worse than one
//! that refuses to load.

mod text;

pub use text::{parse_policy, serialize_policy};

use std::collections::BTreeSet;

use crate::caps;
use crate::seccomp::SeccompPolicy;

/// Namespace kinds a jail may unshare, in the canonical display order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Namespace {
    User,
    Pid,
    Mount,
    Net,
    Ipc,
    Uts,
    Cgroup,
}

impl Namespace {
    pub const ALL: [Namespace; 7] = [
        Namespace::User,
        Namespace::Pid,
        Namespace::Mount,
        Namespace::Net,
        Namespace::Ipc,
        Namespace::Uts,
        Namespace::Cgroup,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Namespace::User => "user",
            Namespace::Pid => "pid",
            Namespace::Mount => "mount",
            Namespace::Net => "net",
            Namespace::Ipc => "ipc",
            Namespace::Uts => "uts",
            Namespace::Cgroup => "cgroup",
        }
    }

    pub fn from_str(s: &str) -> Option<Namespace> {
        Namespace::ALL.iter().copied().find(|n| n.as_str() == s)
    }
}

impl std::fmt::Display for Namespace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the jail sees the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NetworkMode {
    /// Fresh network namespace with no usable interfaces.
    Isolated,
    /// Fresh network namespace with only the loopback interface raised.
    LoopbackOnly,
    /// Host network untouched (no network namespace).
    #[default]
    Passthrough,
}

impl NetworkMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            NetworkMode::Isolated => "isolated",
            NetworkMode::LoopbackOnly => "loopback-only",
            NetworkMode::Passthrough => "passthrough",
        }
    }

    pub fn from_str(s: &str) -> Option<NetworkMode> {
        match s {
            "isolated" => Some(NetworkMode::Isolated),
            "loopback-only" => Some(NetworkMode::LoopbackOnly),
            "passthrough" => Some(NetworkMode::Passthrough),
            _ => None,
        }
    }
}

impl std::fmt::Display for NetworkMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One contiguous id range mapped between the jail and the host.
///
/// The canonical mapping gives the jailed process the impression of root
/// (inside id 0) while the host-side id stays unprivileged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdMapping {
    pub inside: u32,
    pub outside: u32,
    pub count: u32,
}

/// Mount kinds a policy may request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MountKind {
    Bind,
    Tmpfs,
    Proc,
}

impl MountKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MountKind::Bind => "bind",
            MountKind::Tmpfs => "tmpfs",
            MountKind::Proc => "proc",
        }
    }

    pub fn from_str(s: &str) -> Option<MountKind> {
        match s {
            "bind" => Some(MountKind::Bind),
            "tmpfs" => Some(MountKind::Tmpfs),
            "proc" => Some(MountKind::Proc),
            _ => None,
        }
    }
}

/// One mount inside the jail. `dest` is interpreted relative to the jail
/// root. For tmpfs and proc mounts the source is ignored and canonicalized to
/// the kind name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MountSpec {
    pub kind: MountKind,
    pub source: String,
    pub dest: String,
    pub read_only: bool,
}

/// Resource caps applied to the jail to blunt resource-exhaustion attacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ResourceLimits {
    pub memory_bytes: Option<u64>,
    pub pids_max: Option<u32>,
    /// Proportional CPU quota, 1..=100.
    pub cpu_percent: Option<u32>,
}

impl ResourceLimits {
    pub fn is_empty(&self) -> bool {
        self.memory_bytes.is_none() && self.pids_max.is_none() && self.cpu_percent.is_none()
    }
}

/// Full declarative description of one jail.
#[derive(Debug, Clone, PartialEq)]
pub struct SandboxPolicy {
    pub name: String,
    /// Absolute, normalized jail root. "/" means no chroot.
    pub chroot_root: String,
    /// UTS hostname; empty means leave the hostname alone.
    pub hostname: String,
    pub namespaces: BTreeSet<Namespace>,
    pub uid_map: Vec<IdMapping>,
    pub gid_map: Vec<IdMapping>,
    pub mounts: Vec<MountSpec>,
    pub seccomp: SeccompPolicy,
    /// Capability names retained; empty means drop everything.
    pub capabilities: BTreeSet<String>,
    pub limits: ResourceLimits,
    pub network_mode: NetworkMode,
    /// Environment variable names passed through; all others are stripped.
    pub env_allow: Vec<String>,
    /// Where the supervisor appends violation events, one JSON object per line.
    pub log_path: Option<String>,
}

impl SandboxPolicy {
    /// A named, chroot-less, restriction-less policy to build on.
    pub fn new(name: &str) -> SandboxPolicy {
        SandboxPolicy {
            name: name.to_string(),
            chroot_root: "/".to_string(),
            hostname: String::new(),
            namespaces: BTreeSet::new(),
            uid_map: Vec::new(),
            gid_map: Vec::new(),
            mounts: Vec::new(),
            seccomp: SeccompPolicy::allow_all(),
            capabilities: BTreeSet::new(),
            limits: ResourceLimits::default(),
            network_mode: NetworkMode::Passthrough,
            env_allow: Vec::new(),
            log_path: None,
        }
    }

    /// Check every policy invariant, returning the first violation.
    pub fn validate(&self) -> Result<(), PolicyError> {
        let err = |field: &str, reason: String| {
            Err(PolicyError::Validation {
                field: field.to_string(),
                reason,
            })
        };

        if self.name.is_empty() || self.name.len() > 64 {
            return err("name", "must be 1..=64 characters".into());
        }
        if !self
            .name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
        {
            return err("name", "allowed characters are [A-Za-z0-9_-]".into());
        }

        if let Some(reason) = path_problem(&self.chroot_root) {
            return err("chroot", reason);
        }

        if !self.hostname.is_empty() {
            if self.hostname.len() > 64
                || !self
                    .hostname
                    .bytes()
                    .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
            {
                return err("hostname", "allowed characters are [A-Za-z0-9_-]".into());
            }
        }

        if let Some(path) = &self.log_path {
            if let Some(reason) = path_problem(path) {
                return err("log_path", reason);
            }
        }

        for (field, mappings) in [("idmap.uid", &self.uid_map), ("idmap.gid", &self.gid_map)] {
            if let Some(reason) = idmap_problem(mappings) {
                return err(field, reason);
            }
        }
        if !self.namespaces.contains(&Namespace::User)
            && (!self.uid_map.is_empty() || !self.gid_map.is_empty())
        {
            return err("idmap", "id mappings require the user namespace".into());
        }

        for (i, m) in self.mounts.iter().enumerate() {
            let field = format!("mounts[{i}].dest");
            if let Some(reason) = path_problem(&m.dest) {
                return Err(PolicyError::Validation {
                    field,
                    reason: format!("not-normalized: {reason}"),
                });
            }
            if m.kind == MountKind::Bind {
                if let Some(reason) = path_problem(&m.source) {
                    return Err(PolicyError::Validation {
                        field: format!("mounts[{i}].source"),
                        reason,
                    });
                }
            }
        }
        if !self.namespaces.contains(&Namespace::Mount)
            && (!self.mounts.is_empty() || self.chroot_root != "/")
        {
            return err(
                "namespaces.mount",
                "mounts or a chroot require the mount namespace".into(),
            );
        }

        for cap in &self.capabilities {
            if !caps::is_known(cap) {
                return err("capabilities.keep", format!("unknown capability `{cap}`"));
            }
        }

        if let Some(v) = self.limits.memory_bytes {
            if v == 0 {
                return err("limits.memory_bytes", "must be > 0".into());
            }
        }
        if let Some(v) = self.limits.pids_max {
            if v == 0 {
                return err("limits.pids_max", "must be > 0".into());
            }
        }
        if let Some(v) = self.limits.cpu_percent {
            if v == 0 || v > 100 {
                return err("limits.cpu_percent", "must be in 1..=100".into());
            }
        }

        let has_net_ns = self.namespaces.contains(&Namespace::Net);
        match self.network_mode {
            NetworkMode::Passthrough if has_net_ns => {
                return err(
                    "network_mode",
                    "passthrough requires the net namespace to be absent".into(),
                );
            }
            NetworkMode::Isolated | NetworkMode::LoopbackOnly if !has_net_ns => {
                return err(
                    "network_mode",
                    format!("{} requires the net namespace", self.network_mode),
                );
            }
            _ => {}
        }

        let mut seen_env = std::collections::HashSet::new();
        for name in &self.env_allow {
            if name.is_empty()
                || name.bytes().next().map(|b| b.is_ascii_digit()) == Some(true)
                || !name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
            {
                return err("env.allow", format!("invalid variable name `{name}`"));
            }
            if !seen_env.insert(name.as_str()) {
                return err("env.allow", format!("duplicate variable `{name}`"));
            }
        }

        self.seccomp
            .validate()
            .map_err(|e| PolicyError::Validation {
                field: "seccomp".to_string(),
                reason: e.to_string(),
            })?;
        // The file grammar expresses kill only as the default action, so a
        // policy carrying kill rules could never round-trip.
        for (name, action) in &self.seccomp.rules {
            if *action == crate::seccomp::Action::Kill {
                return err(
                    "seccomp",
                    format!("rule for `{name}`: kill is only available as the default action"),
                );
            }
        }

        Ok(())
    }
}

/// Reject relative, empty, or non-normalized paths. Returns a reason string
/// for bad paths.
fn path_problem(path: &str) -> Option<String> {
    if path.is_empty() {
        return Some("path is empty".to_string());
    }
    if !path.starts_with('/') {
        return Some(format!("`{path}` is not absolute"));
    }
    if path == "/" {
        return None;
    }
    if path.ends_with('/') {
        return Some(format!("`{path}` has a trailing slash"));
    }
    for segment in path[1..].split('/') {
        if segment.is_empty() {
            return Some(format!("`{path}` contains `//`"));
        }
        if segment == "." || segment == ".." {
            return Some(format!("`{path}` contains `{segment}` segments"));
        }
    }
    None
}

fn idmap_problem(mappings: &[IdMapping]) -> Option<String> {
    for m in mappings {
        if m.count == 0 {
            return Some("count must be >= 1".to_string());
        }
        if m.inside.checked_add(m.count - 1).is_none() || m.outside.checked_add(m.count - 1).is_none()
        {
            return Some("id range overflows".to_string());
        }
    }
    for (i, a) in mappings.iter().enumerate() {
        for b in &mappings[i + 1..] {
            let overlap = |x: u32, xc: u32, y: u32, yc: u32| x < y + yc && y < x + xc;
            if overlap(a.inside, a.count, b.inside, b.count) {
                return Some("inside ranges overlap".to_string());
            }
            if overlap(a.outside, a.count, b.outside, b.count) {
                return Some("outside ranges overlap".to_string());
            }
        }
    }
    None
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: duplicate key")]
    DuplicateKey { line: usize },
    #[error("{field}: {reason}")]
    Validation { field: String, reason: String },
}

#[cfg(test)]
mod tests {
    use super::*;

    fn valid() -> SandboxPolicy {
        let mut p = SandboxPolicy::new("probe");
        p.namespaces.insert(Namespace::User);
        p.namespaces.insert(Namespace::Mount);
        p.chroot_root = "/srv/jail".to_string();
        p
    }

    #[test]
    fn baseline_is_valid() {
        valid().validate().unwrap();
    }

    #[test]
    fn name_rules() {
        let mut p = valid();
        p.name = String::new();
        assert!(p.validate().is_err());
        p.name = "a".repeat(65);
        assert!(p.validate().is_err());
        p.name = "has space".to_string();
        assert!(p.validate().is_err());
        p.name = "ok-name_9".to_string();
        p.validate().unwrap();
    }

    #[test]
    fn chroot_must_be_normalized() {
        for bad in ["relative/path", "/a/../b", "/a//b", "/a/./b", "", "/a/"] {
            let mut p = valid();
            p.chroot_root = bad.to_string();
            assert!(p.validate().is_err(), "{bad:?} accepted");
        }
    }

    #[test]
    fn idmap_requires_user_namespace() {
        let mut p = valid();
        p.namespaces.remove(&Namespace::User);
        p.uid_map.push(IdMapping {
            inside: 0,
            outside: 1000,
            count: 1,
        });
        let err = p.validate().unwrap_err();
        assert!(matches!(err, PolicyError::Validation { field, .. } if field == "idmap"));
    }

    #[test]
    fn idmap_overlaps_rejected() {
        let mut p = valid();
        p.uid_map = vec![
            IdMapping {
                inside: 0,
                outside: 1000,
                count: 10,
            },
            IdMapping {
                inside: 5,
                outside: 50000,
                count: 10,
            },
        ];
        assert!(p.validate().is_err());
        p.uid_map = vec![
            IdMapping {
                inside: 0,
                outside: 1000,
                count: 10,
            },
            IdMapping {
                inside: 100,
                outside: 1005,
                count: 10,
            },
        ];
        assert!(p.validate().is_err());
        p.uid_map = vec![IdMapping {
            inside: 0,
            outside: 1000,
            count: 0,
        }];
        assert!(p.validate().is_err());
        p.uid_map = vec![IdMapping {
            inside: u32::MAX,
            outside: 0,
            count: 2,
        }];
        assert!(p.validate().is_err());
    }

    #[test]
    fn unknown_capability_rejected() {
        let mut p = valid();
        p.capabilities.insert("CAP_TIME_TRAVEL".to_string());
        assert!(p.validate().is_err());
        let mut p = valid();
        p.capabilities.insert("CAP_NET_RAW".to_string());
        p.validate().unwrap();
    }

    #[test]
    fn mounts_require_mount_namespace() {
        let mut p = SandboxPolicy::new("nomount");
        p.mounts.push(MountSpec {
            kind: MountKind::Tmpfs,
            source: "tmpfs".to_string(),
            dest: "/work".to_string(),
            read_only: false,
        });
        assert!(p.validate().is_err());
        // A chroot without the mount namespace is rejected too.
        let mut p = SandboxPolicy::new("nochroot");
        p.chroot_root = "/srv/jail".to_string();
        assert!(p.validate().is_err());
    }

    #[test]
    fn network_mode_pairing() {
        let mut p = valid();
        p.network_mode = NetworkMode::Isolated;
        assert!(p.validate().is_err());
        p.namespaces.insert(Namespace::Net);
        p.validate().unwrap();
        p.network_mode = NetworkMode::Passthrough;
        assert!(p.validate().is_err());
    }

    #[test]
    fn limit_bounds() {
        let mut p = valid();
        p.limits.cpu_percent = Some(101);
        assert!(p.validate().is_err());
        p.limits.cpu_percent = Some(0);
        assert!(p.validate().is_err());
        p.limits.cpu_percent = Some(100);
        p.validate().unwrap();
        p.limits.memory_bytes = Some(0);
        assert!(p.validate().is_err());
    }

    #[test]
    fn env_names_checked() {
        let mut p = valid();
        p.env_allow = vec!["PATH".into(), "1BAD".into()];
        assert!(p.validate().is_err());
        p.env_allow = vec!["PATH".into(), "PATH".into()];
        assert!(p.validate().is_err());
        p.env_allow = vec!["PATH".into(), "HOME".into()];
        p.validate().unwrap();
    }
}
