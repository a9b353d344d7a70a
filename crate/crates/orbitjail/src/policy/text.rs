//! The line-oriented policy file format.
//!
//! UTF-8, LF line endings, `#` starts a comment to end of line. Sections are
//! `[name]` headers followed by `key = value` lines. Unknown sections and
//! keys are hard errors. [`serialize_policy`] emits a canonical form:
//! sections in the fixed grammar order, keys sorted lexicographically within
//! each section, list values sorted where order carries no meaning. Parsing a
//! canonical form reproduces the policy exactly.

use std::collections::BTreeSet;

use crate::errno;
use crate::seccomp::{Action, SeccompPolicy};

use super::{
    IdMapping, MountKind, MountSpec, Namespace, NetworkMode, PolicyError, SandboxPolicy,
};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    None,
    Sandbox,
    Namespaces,
    Idmap,
    Mounts,
    Seccomp,
    Capabilities,
    Limits,
    Env,
}

/// Parse and fully validate a policy file.
///
/// Every diagnostic carries the 1-based line number it refers to; validation
/// failures refer to the offending field instead.
pub fn parse_policy(text: &str) -> Result<SandboxPolicy, PolicyError> {
    let syntax = |line: usize, reason: String| PolicyError::Syntax { line, reason };

    let mut policy = SandboxPolicy::new("unnamed");
    policy.name = String::new();
    policy.chroot_root = String::new();

    let mut section = Section::None;
    let mut seen_sections: BTreeSet<&'static str> = BTreeSet::new();
    // (section, key) pairs already set, for duplicate detection of
    // single-valued keys.
    let mut seen_keys: BTreeSet<String> = BTreeSet::new();

    let mut seccomp_default: Option<Action> = None;
    let mut seccomp_allow: Vec<String> = Vec::new();
    let mut seccomp_log: Vec<String> = Vec::new();
    let mut seccomp_errno: Vec<(String, Vec<String>)> = Vec::new();

    for (idx, raw_line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }

        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| syntax(lineno, "unterminated section header".into()))?
                .trim();
            let (sec, tag) = match name {
                "sandbox" => (Section::Sandbox, "sandbox"),
                "namespaces" => (Section::Namespaces, "namespaces"),
                "idmap" => (Section::Idmap, "idmap"),
                "mounts" => (Section::Mounts, "mounts"),
                "seccomp" => (Section::Seccomp, "seccomp"),
                "capabilities" => (Section::Capabilities, "capabilities"),
                "limits" => (Section::Limits, "limits"),
                "env" => (Section::Env, "env"),
                other => return Err(syntax(lineno, format!("unknown section `[{other}]`"))),
            };
            if !seen_sections.insert(tag) {
                return Err(syntax(lineno, format!("section `[{tag}]` appears twice")));
            }
            section = sec;
            continue;
        }

        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| syntax(lineno, "expected `key = value`".into()))?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(syntax(lineno, "empty key".into()));
        }

        // Keys that may legitimately repeat within their section.
        let repeatable = matches!(
            (section, key),
            (Section::Idmap, "uid") | (Section::Idmap, "gid") | (Section::Mounts, "mount")
        );
        if !repeatable {
            let tag = format!("{}\u{0}{key}", section_name(section));
            if !seen_keys.insert(tag) {
                return Err(PolicyError::DuplicateKey { line: lineno });
            }
        }

        match section {
            Section::None => {
                return Err(syntax(lineno, "key outside any section".into()));
            }
            Section::Sandbox => match key {
                "name" => policy.name = value.to_string(),
                "chroot" => policy.chroot_root = value.to_string(),
                "hostname" => policy.hostname = value.to_string(),
                "log_path" => policy.log_path = Some(value.to_string()),
                "network_mode" => {
                    policy.network_mode = NetworkMode::from_str(value).ok_or_else(|| {
                        syntax(lineno, format!("unknown network mode `{value}`"))
                    })?;
                }
                other => return Err(syntax(lineno, format!("unknown key `{other}`"))),
            },
            Section::Namespaces => {
                let ns = Namespace::from_str(key)
                    .ok_or_else(|| syntax(lineno, format!("unknown namespace `{key}`")))?;
                match value {
                    "true" => {
                        policy.namespaces.insert(ns);
                    }
                    "false" => {}
                    other => {
                        return Err(syntax(lineno, format!("expected true|false, got `{other}`")))
                    }
                }
            }
            Section::Idmap => {
                let mapping = parse_idmap(value)
                    .ok_or_else(|| syntax(lineno, "expected `<inside>:<outside>:<count>`".into()))?;
                match key {
                    "uid" => policy.uid_map.push(mapping),
                    "gid" => policy.gid_map.push(mapping),
                    other => return Err(syntax(lineno, format!("unknown key `{other}`"))),
                }
            }
            Section::Mounts => match key {
                "mount" => policy.mounts.push(parse_mount(value).map_err(|reason| {
                    syntax(lineno, reason)
                })?),
                other => return Err(syntax(lineno, format!("unknown key `{other}`"))),
            },
            Section::Seccomp => {
                if key == "default" {
                    seccomp_default = Some(match value {
                        "allow" => Action::Allow,
                        "kill" => Action::Kill,
                        "log" => Action::Log,
                        other => {
                            return Err(syntax(
                                lineno,
                                format!("default must be allow|kill|log, got `{other}`"),
                            ))
                        }
                    });
                } else if key == "allow" {
                    seccomp_allow = parse_list(value, lineno)?;
                } else if key == "log" {
                    seccomp_log = parse_list(value, lineno)?;
                } else if let Some(name) = key.strip_prefix("errno.") {
                    if errno::by_name(name).is_none() {
                        return Err(syntax(lineno, format!("unknown errno `{name}`")));
                    }
                    seccomp_errno.push((name.to_string(), parse_list(value, lineno)?));
                } else {
                    return Err(syntax(lineno, format!("unknown key `{key}`")));
                }
            }
            Section::Capabilities => match key {
                "keep" => {
                    for cap in parse_list(value, lineno)? {
                        if !policy.capabilities.insert(cap.clone()) {
                            return Err(syntax(lineno, format!("duplicate capability `{cap}`")));
                        }
                    }
                }
                other => return Err(syntax(lineno, format!("unknown key `{other}`"))),
            },
            Section::Limits => {
                let num = value.parse::<u64>().map_err(|_| {
                    syntax(lineno, format!("expected an unsigned integer, got `{value}`"))
                })?;
                match key {
                    "memory_bytes" => policy.limits.memory_bytes = Some(num),
                    "pids_max" => {
                        policy.limits.pids_max = Some(num.try_into().map_err(|_| {
                            syntax(lineno, "pids_max out of range".into())
                        })?)
                    }
                    "cpu_percent" => {
                        policy.limits.cpu_percent = Some(num.try_into().map_err(|_| {
                            syntax(lineno, "cpu_percent out of range".into())
                        })?)
                    }
                    other => return Err(syntax(lineno, format!("unknown key `{other}`"))),
                }
            }
            Section::Env => match key {
                "allow" => policy.env_allow = parse_list(value, lineno)?,
                other => return Err(syntax(lineno, format!("unknown key `{other}`"))),
            },
        }
    }

    if policy.name.is_empty() {
        return Err(PolicyError::Validation {
            field: "name".to_string(),
            reason: "missing [sandbox] name".to_string(),
        });
    }
    if policy.chroot_root.is_empty() {
        return Err(PolicyError::Validation {
            field: "chroot".to_string(),
            reason: "missing [sandbox] chroot".to_string(),
        });
    }

    // Mounts with tmpfs/proc kinds ignore the source; canonicalize it.
    for m in &mut policy.mounts {
        if m.kind != MountKind::Bind {
            m.source = m.kind.as_str().to_string();
        }
    }

    // Assemble the seccomp policy with rules sorted by syscall name.
    let mut rules: Vec<(String, Action)> = Vec::new();
    for name in seccomp_allow {
        rules.push((name, Action::Allow));
    }
    for name in seccomp_log {
        rules.push((name, Action::Log));
    }
    for (errno_name, names) in seccomp_errno {
        let code = errno::by_name(&errno_name).expect("validated above");
        for name in names {
            rules.push((name, Action::Errno(code)));
        }
    }
    rules.sort_by(|a, b| a.0.cmp(&b.0));
    policy.seccomp = SeccompPolicy {
        default_action: seccomp_default.unwrap_or(Action::Allow),
        rules,
    };
    policy.env_allow.sort();

    policy.validate()?;
    Ok(policy)
}

fn section_name(section: Section) -> &'static str {
    match section {
        Section::None => "",
        Section::Sandbox => "sandbox",
        Section::Namespaces => "namespaces",
        Section::Idmap => "idmap",
        Section::Mounts => "mounts",
        Section::Seccomp => "seccomp",
        Section::Capabilities => "capabilities",
        Section::Limits => "limits",
        Section::Env => "env",
    }
}

fn parse_idmap(value: &str) -> Option<IdMapping> {
    let mut parts = value.split(':');
    let inside = parts.next()?.trim().parse().ok()?;
    let outside = parts.next()?.trim().parse().ok()?;
    let count = parts.next()?.trim().parse().ok()?;
    if parts.next().is_some() {
        return None;
    }
    Some(IdMapping {
        inside,
        outside,
        count,
    })
}

fn parse_mount(value: &str) -> Result<MountSpec, String> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err("expected `<kind>,<source>,<dest>,<ro|rw>`".to_string());
    }
    let kind = MountKind::from_str(parts[0])
        .ok_or_else(|| format!("unknown mount kind `{}`", parts[0]))?;
    let read_only = match parts[3] {
        "ro" => true,
        "rw" => false,
        other => return Err(format!("expected ro|rw, got `{other}`")),
    };
    Ok(MountSpec {
        kind,
        source: parts[1].to_string(),
        dest: parts[2].to_string(),
        read_only,
    })
}

fn parse_list(value: &str, lineno: usize) -> Result<Vec<String>, PolicyError> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for item in value.split(',') {
        let item = item.trim();
        if item.is_empty() {
            return Err(PolicyError::Syntax {
                line: lineno,
                reason: "empty list item".to_string(),
            });
        }
        out.push(item.to_string());
    }
    Ok(out)
}

/// Serialize a valid policy to its canonical text form.
///
/// `parse_policy(serialize_policy(p))` reproduces `p` for any policy that
/// came out of the parser; programmatically built policies round-trip up to
/// canonical ordering of their order-free lists.
pub fn serialize_policy(policy: &SandboxPolicy) -> String {
    let mut out = String::new();

    out.push_str("[sandbox]\n");
    out.push_str(&format!("chroot = {}\n", policy.chroot_root));
    if !policy.hostname.is_empty() {
        out.push_str(&format!("hostname = {}\n", policy.hostname));
    }
    if let Some(path) = &policy.log_path {
        out.push_str(&format!("log_path = {path}\n"));
    }
    out.push_str(&format!("name = {}\n", policy.name));
    out.push_str(&format!("network_mode = {}\n", policy.network_mode));

    if !policy.namespaces.is_empty() {
        out.push_str("\n[namespaces]\n");
        let mut names: Vec<&str> = policy.namespaces.iter().map(|n| n.as_str()).collect();
        names.sort_unstable();
        for name in names {
            out.push_str(&format!("{name} = true\n"));
        }
    }

    if !policy.uid_map.is_empty() || !policy.gid_map.is_empty() {
        out.push_str("\n[idmap]\n");
        for m in &policy.gid_map {
            out.push_str(&format!("gid = {}:{}:{}\n", m.inside, m.outside, m.count));
        }
        for m in &policy.uid_map {
            out.push_str(&format!("uid = {}:{}:{}\n", m.inside, m.outside, m.count));
        }
    }

    if !policy.mounts.is_empty() {
        out.push_str("\n[mounts]\n");
        for m in &policy.mounts {
            out.push_str(&format!(
                "mount = {},{},{},{}\n",
                m.kind.as_str(),
                m.source,
                m.dest,
                if m.read_only { "ro" } else { "rw" }
            ));
        }
    }

    out.push_str("\n[seccomp]\n");
    let mut allow: Vec<&str> = Vec::new();
    let mut log: Vec<&str> = Vec::new();
    let mut by_errno: std::collections::BTreeMap<&str, Vec<&str>> = Default::default();
    for (name, action) in &policy.seccomp.rules {
        match action {
            Action::Allow => allow.push(name),
            Action::Log => log.push(name),
            Action::Errno(e) => by_errno.entry(e.name()).or_default().push(name),
            // Unreachable for policies that passed validation; serialize it
            // as-is would be unsound, so keep the panic loud.
            Action::Kill => unreachable!("kill rules are not expressible in the file format"),
        }
    }
    allow.sort_unstable();
    log.sort_unstable();
    if !allow.is_empty() {
        out.push_str(&format!("allow = {}\n", allow.join(", ")));
    }
    out.push_str(&format!("default = {}\n", policy.seccomp.default_action));
    for (errno_name, mut names) in by_errno {
        names.sort_unstable();
        out.push_str(&format!("errno.{errno_name} = {}\n", names.join(", ")));
    }
    if !log.is_empty() {
        out.push_str(&format!("log = {}\n", log.join(", ")));
    }

    if !policy.capabilities.is_empty() {
        let caps: Vec<&str> = policy.capabilities.iter().map(String::as_str).collect();
        out.push_str(&format!("\n[capabilities]\nkeep = {}\n", caps.join(", ")));
    }

    if !policy.limits.is_empty() {
        out.push_str("\n[limits]\n");
        if let Some(v) = policy.limits.cpu_percent {
            out.push_str(&format!("cpu_percent = {v}\n"));
        }
        if let Some(v) = policy.limits.memory_bytes {
            out.push_str(&format!("memory_bytes = {v}\n"));
        }
        if let Some(v) = policy.limits.pids_max {
            out.push_str(&format!("pids_max = {v}\n"));
        }
    }

    if !policy.env_allow.is_empty() {
        let mut names: Vec<&str> = policy.env_allow.iter().map(String::as_str).collect();
        names.sort_unstable();
        out.push_str(&format!("\n[env]\nallow = {}\n", names.join(", ")));
    }

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
[sandbox]
name = minimal
chroot = /srv/jail/minimal

[namespaces]
user = true
mount = true
";

    #[test]
    fn minimal_policy_parses() {
        let p = parse_policy(MINIMAL).unwrap();
        assert_eq!(p.name, "minimal");
        assert_eq!(p.chroot_root, "/srv/jail/minimal");
        assert_eq!(p.namespaces.len(), 2);
        assert!(p.namespaces.contains(&Namespace::User));
        assert!(p.namespaces.contains(&Namespace::Mount));
        assert!(p.mounts.is_empty());
        assert_eq!(p.seccomp.default_action, Action::Allow);
        assert_eq!(p.network_mode, NetworkMode::Passthrough);
    }

    #[test]
    fn idmap_line_parses() {
        let text = format!("{MINIMAL}\n[idmap]\nuid = 0:1000:1\n");
        let p = parse_policy(&text).unwrap();
        assert_eq!(
            p.uid_map,
            vec![IdMapping {
                inside: 0,
                outside: 1000,
                count: 1
            }]
        );
    }

    #[test]
    fn non_normalized_mount_dest_rejected() {
        let text = format!("{MINIMAL}\n[mounts]\nmount = bind,/etc,../etc,ro\n");
        let err = parse_policy(&text).unwrap_err();
        match err {
            PolicyError::Validation { field, reason } => {
                assert!(field.contains("dest"), "{field}");
                assert!(reason.contains("not-normalized"), "{reason}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_minimal() {
        let p = parse_policy(MINIMAL).unwrap();
        let text = serialize_policy(&p);
        let p2 = parse_policy(&text).unwrap();
        assert_eq!(p, p2);
    }

    #[test]
    fn key_order_does_not_matter() {
        let a = "[sandbox]\nname = x\nchroot = /srv/x\n[namespaces]\nmount = true\nuser = true\n";
        let b = "[sandbox]\nchroot = /srv/x\nname = x\n[namespaces]\nuser = true\nmount = true\n";
        let pa = parse_policy(a).unwrap();
        let pb = parse_policy(b).unwrap();
        assert_eq!(serialize_policy(&pa), serialize_policy(&pb));
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let text = "\
# a full-line comment
[sandbox]
name = c   # trailing comment
chroot = /

";
        let p = parse_policy(text).unwrap();
        assert_eq!(p.name, "c");
        assert_eq!(p.chroot_root, "/");
    }

    #[test]
    fn unknown_key_is_hard_error() {
        let text = "[sandbox]\nname = x\nchroot = /\nchrootx = /oops\n";
        let err = parse_policy(text).unwrap_err();
        assert!(matches!(err, PolicyError::Syntax { line: 4, .. }), "{err:?}");
    }

    #[test]
    fn unknown_section_is_hard_error() {
        let err = parse_policy("[sandvich]\n").unwrap_err();
        assert!(matches!(err, PolicyError::Syntax { line: 1, .. }));
    }

    #[test]
    fn duplicate_key_reported_with_line() {
        let text = "[sandbox]\nname = x\nname = y\nchroot = /\n";
        assert_eq!(
            parse_policy(text).unwrap_err(),
            PolicyError::DuplicateKey { line: 3 }
        );
    }

    #[test]
    fn duplicate_section_rejected() {
        let text = "[sandbox]\nname = x\nchroot = /\n[sandbox]\n";
        assert!(matches!(
            parse_policy(text).unwrap_err(),
            PolicyError::Syntax { line: 4, .. }
        ));
    }

    #[test]
    fn seccomp_section_full() {
        let text = "\
[sandbox]
name = s
chroot = /

[seccomp]
default = kill
allow = read, write, close
errno.EPERM = mkdir
log = socket
";
        let p = parse_policy(text).unwrap();
        assert_eq!(p.seccomp.default_action, Action::Kill);
        assert_eq!(p.seccomp.rules.len(), 5);
        assert_eq!(p.seccomp.action_for("read"), Action::Allow);
        assert_eq!(p.seccomp.action_for("socket"), Action::Log);
        assert_eq!(
            p.seccomp.action_for("mkdir"),
            Action::Errno(errno::by_name("EPERM").unwrap())
        );
        assert_eq!(p.seccomp.action_for("ptrace"), Action::Kill);
    }

    #[test]
    fn unknown_errno_rejected() {
        let text = "[sandbox]\nname = s\nchroot = /\n[seccomp]\nerrno.EBOGUS = read\n";
        assert!(matches!(
            parse_policy(text).unwrap_err(),
            PolicyError::Syntax { line: 5, .. }
        ));
    }

    #[test]
    fn unknown_syscall_in_list_rejected() {
        let text = "[sandbox]\nname = s\nchroot = /\n[seccomp]\nallow = read, frobnicate\n";
        let err = parse_policy(text).unwrap_err();
        assert!(matches!(err, PolicyError::Validation { .. }), "{err:?}");
    }

    #[test]
    fn mount_and_limits_and_env_round_trip() {
        let text = "\
[sandbox]
name = full
chroot = /srv/jail/full
hostname = fullhost
log_path = /var/log/full.jsonl
network_mode = loopback-only

[namespaces]
user = true
mount = true
net = true
pid = true
uts = true

[idmap]
uid = 0:1000:1
gid = 0:1000:1

[mounts]
mount = bind,/usr,/usr,ro
mount = tmpfs,tmpfs,/work,rw
mount = proc,proc,/proc,rw

[seccomp]
default = kill
allow = read, write

[capabilities]
keep = CAP_NET_BIND_SERVICE

[limits]
memory_bytes = 67108864
pids_max = 16
cpu_percent = 50

[env]
allow = PATH, HOME
";
        let p = parse_policy(text).unwrap();
        assert_eq!(p.mounts.len(), 3);
        assert!(p.mounts[0].read_only);
        assert_eq!(p.mounts[1].source, "tmpfs");
        assert_eq!(p.limits.memory_bytes, Some(67108864));
        assert_eq!(p.env_allow, vec!["HOME".to_string(), "PATH".to_string()]);
        let p2 = parse_policy(&serialize_policy(&p)).unwrap();
        assert_eq!(p, p2);
    }

    #[test]
    fn canonical_output_is_fixed_point() {
        let p = parse_policy(MINIMAL).unwrap();
        let once = serialize_policy(&p);
        let twice = serialize_policy(&parse_policy(&once).unwrap());
        assert_eq!(once, twice);
    }
}
