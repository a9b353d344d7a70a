//! Ordered launch plans: the executable form of the isolation stack.
//!
//! A [`LaunchPlan`] is a deterministic function of a policy plus the target
//! command: namespaces first, then id maps, mounts, chroot, hostname,
//! cgroups, network, capability drop, filter install, and finally the exec.
//! Nothing runs unfiltered after the filter is installed, and mount/chroot
//! steps happen while the privileges they need still exist.
//!
//! Plans render to a stable one-step-per-line text so a jail setup can be
//! reviewed (and golden-tested) on any machine without privileges.

use crate::policy::{
    IdMapping, MountSpec, Namespace, NetworkMode, ResourceLimits, SandboxPolicy,
};
use crate::seccomp::{self, FilterProgram, SeccompPolicy};

/// One isolation step.
#[derive(Debug, Clone, PartialEq)]
pub enum PlanStep {
    CreateNamespaces(Vec<Namespace>),
    /// Empty mapping lists mean the default self-map: inside id 0 maps to the
    /// invoking user's id, resolved at execution time.
    WriteIdMaps {
        uid: Vec<IdMapping>,
        gid: Vec<IdMapping>,
    },
    ApplyMounts(Vec<MountSpec>),
    EnterRoot(String),
    SetHostname(String),
    ApplyCgroups(ResourceLimits),
    ConfigureNetwork(NetworkMode),
    DropCapabilities(Vec<String>),
    InstallFilter(FilterSpec),
    ExecTarget {
        argv: Vec<String>,
        /// Environment variable names passed through; values are resolved
        /// from the supervisor's environment at spawn time.
        env: Vec<String>,
    },
}

impl PlanStep {
    /// Step kind name as used in rendering and failure reports.
    pub fn kind(&self) -> &'static str {
        match self {
            PlanStep::CreateNamespaces(_) => "create-namespaces",
            PlanStep::WriteIdMaps { .. } => "write-idmaps",
            PlanStep::ApplyMounts(_) => "apply-mounts",
            PlanStep::EnterRoot(_) => "enter-root",
            PlanStep::SetHostname(_) => "set-hostname",
            PlanStep::ApplyCgroups(_) => "apply-cgroups",
            PlanStep::ConfigureNetwork(_) => "configure-network",
            PlanStep::DropCapabilities(_) => "drop-capabilities",
            PlanStep::InstallFilter(_) => "install-filter",
            PlanStep::ExecTarget { .. } => "exec",
        }
    }
}

/// The symbolic filter plus its compiled form for the build target.
///
/// The symbolic policy keeps rendering platform-independent; the compiled
/// program is what execution installs.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSpec {
    pub policy: SeccompPolicy,
    pub program: FilterProgram,
}

/// An ordered, renderable jail launch plan.
#[derive(Debug, Clone, PartialEq)]
pub struct LaunchPlan {
    pub jail_name: String,
    pub log_path: Option<String>,
    steps: Vec<PlanStep>,
}

impl LaunchPlan {
    pub fn steps(&self) -> &[PlanStep] {
        &self.steps
    }

    /// Structural check of the ordering invariants.
    pub fn check_ordering(&self) -> Result<(), PlanError> {
        let ordering = |reason: &str| {
            Err(PlanError::Ordering {
                reason: reason.to_string(),
            })
        };
        let position = |kind: &str| self.steps.iter().position(|s| s.kind() == kind);

        for kind in [
            "create-namespaces",
            "write-idmaps",
            "apply-mounts",
            "enter-root",
            "set-hostname",
            "apply-cgroups",
            "configure-network",
            "drop-capabilities",
            "install-filter",
            "exec",
        ] {
            if self.steps.iter().filter(|s| s.kind() == kind).count() > 1 {
                return ordering(&format!("step `{kind}` appears more than once"));
            }
        }

        let exec = match position("exec") {
            Some(i) => i,
            None => return ordering("plan has no exec step"),
        };
        if exec != self.steps.len() - 1 {
            return ordering("exec must be the last step");
        }
        let install = match position("install-filter") {
            Some(i) => i,
            None => return ordering("plan has no install-filter step"),
        };
        if install + 1 != exec {
            return ordering("install-filter must immediately precede exec");
        }
        let drop = match position("drop-capabilities") {
            Some(i) => i,
            None => return ordering("plan has no drop-capabilities step"),
        };
        if drop >= install {
            return ordering("drop-capabilities must precede install-filter");
        }
        for kind in ["apply-mounts", "enter-root"] {
            if let Some(i) = position(kind) {
                if i >= drop {
                    return ordering(&format!("{kind} must precede drop-capabilities"));
                }
            }
        }
        if let Some(i) = position("create-namespaces") {
            if i != 0 {
                return ordering("create-namespaces must be the first step");
            }
        }
        if let Some(i) = position("write-idmaps") {
            if position("create-namespaces") != Some(i.wrapping_sub(1)) {
                return ordering("write-idmaps must immediately follow create-namespaces");
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("empty command")]
    EmptyCommand,
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
    #[error(transparent)]
    Filter(#[from] crate::seccomp::SeccompError),
    #[error("plan ordering violated: {reason}")]
    Ordering { reason: String },
}

/// Build the launch plan for a policy and target command.
///
/// Every policy field is represented by exactly one step; empty fields
/// produce no step. Identical policies produce byte-identical rendered plans.
pub fn build_plan(policy: &SandboxPolicy, argv: &[String]) -> Result<LaunchPlan, PlanError> {
    if argv.is_empty() {
        return Err(PlanError::EmptyCommand);
    }
    policy.validate()?;

    let mut steps = Vec::new();

    if !policy.namespaces.is_empty() {
        steps.push(PlanStep::CreateNamespaces(
            policy.namespaces.iter().copied().collect(),
        ));
    }
    if policy.namespaces.contains(&Namespace::User) {
        steps.push(PlanStep::WriteIdMaps {
            uid: policy.uid_map.clone(),
            gid: policy.gid_map.clone(),
        });
    }
    if !policy.mounts.is_empty() {
        steps.push(PlanStep::ApplyMounts(policy.mounts.clone()));
    }
    if policy.chroot_root != "/" {
        steps.push(PlanStep::EnterRoot(policy.chroot_root.clone()));
    }
    if !policy.hostname.is_empty() {
        steps.push(PlanStep::SetHostname(policy.hostname.clone()));
    }
    if !policy.limits.is_empty() {
        steps.push(PlanStep::ApplyCgroups(policy.limits));
    }
    if policy.network_mode != NetworkMode::Passthrough {
        steps.push(PlanStep::ConfigureNetwork(policy.network_mode));
    }
    steps.push(PlanStep::DropCapabilities(
        policy.capabilities.iter().cloned().collect(),
    ));
    let program = seccomp::compile_filter(&policy.seccomp, seccomp::tables::native())?;
    steps.push(PlanStep::InstallFilter(FilterSpec {
        policy: policy.seccomp.clone(),
        program,
    }));
    let mut env = policy.env_allow.clone();
    env.sort();
    steps.push(PlanStep::ExecTarget {
        argv: argv.to_vec(),
        env,
    });

    let plan = LaunchPlan {
        jail_name: policy.name.clone(),
        log_path: policy.log_path.clone(),
        steps,
    };
    plan.check_ordering()?;
    Ok(plan)
}

/// Render a plan as stable one-step-per-line text.
///
/// The rendering is byte-identical across runs and platforms: the filter step
/// shows symbolic rule counts rather than compiled, architecture-specific
/// instructions.
pub fn render_plan(plan: &LaunchPlan) -> String {
    let mut out = String::new();
    for step in &plan.steps {
        let line = match step {
            PlanStep::CreateNamespaces(set) => {
                let names: Vec<&str> = set.iter().map(|n| n.as_str()).collect();
                format!("create-namespaces {}", names.join(","))
            }
            PlanStep::WriteIdMaps { uid, gid } => {
                format!("write-idmaps uid={} gid={}", render_idmap(uid), render_idmap(gid))
            }
            PlanStep::ApplyMounts(mounts) => {
                let rendered: Vec<String> = mounts
                    .iter()
                    .map(|m| {
                        format!(
                            "{},{},{},{}",
                            m.kind.as_str(),
                            m.source,
                            m.dest,
                            if m.read_only { "ro" } else { "rw" }
                        )
                    })
                    .collect();
                format!("apply-mounts [{}]", rendered.join("; "))
            }
            PlanStep::EnterRoot(root) => format!("enter-root {root}"),
            PlanStep::SetHostname(name) => format!("set-hostname {name}"),
            PlanStep::ApplyCgroups(limits) => {
                let mut parts = Vec::new();
                if let Some(v) = limits.memory_bytes {
                    parts.push(format!("memory_bytes={v}"));
                }
                if let Some(v) = limits.pids_max {
                    parts.push(format!("pids_max={v}"));
                }
                if let Some(v) = limits.cpu_percent {
                    parts.push(format!("cpu_percent={v}"));
                }
                format!("apply-cgroups {}", parts.join(" "))
            }
            PlanStep::ConfigureNetwork(mode) => format!("configure-network {mode}"),
            PlanStep::DropCapabilities(keep) => {
                format!("drop-capabilities keep=[{}]", keep.join(","))
            }
            PlanStep::InstallFilter(spec) => {
                let counts = spec.policy.rule_counts();
                format!(
                    "install-filter default={} allow={} errno={} log={} kill={}",
                    spec.policy.default_action, counts.allow, counts.errno, counts.log, counts.kill
                )
            }
            PlanStep::ExecTarget { argv, env } => {
                format!("exec argv={argv:?} env={env:?}")
            }
        };
        out.push_str(&line);
        out.push('\n');
    }
    out
}

fn render_idmap(mappings: &[IdMapping]) -> String {
    if mappings.is_empty() {
        return "[self->0]".to_string();
    }
    let parts: Vec<String> = mappings
        .iter()
        .map(|m| format!("{}:{}:{}", m.inside, m.outside, m.count))
        .collect();
    format!("[{}]", parts.join(","))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::parse_policy;

    const MINIMAL: &str = "\
[sandbox]
name = minimal
chroot = /srv/jail/minimal

[namespaces]
user = true
mount = true
";

    fn argv(parts: &[&str]) -> Vec<String> {
        parts.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn minimal_plan_has_the_forced_step_sequence() {
        let policy = parse_policy(MINIMAL).unwrap();
        let plan = build_plan(&policy, &argv(&["/bin/true"])).unwrap();
        let kinds: Vec<&str> = plan.steps().iter().map(|s| s.kind()).collect();
        assert_eq!(
            kinds,
            vec![
                "create-namespaces",
                "write-idmaps",
                "enter-root",
                "drop-capabilities",
                "install-filter",
                "exec",
            ]
        );
    }

    #[test]
    fn empty_command_rejected() {
        let policy = parse_policy(MINIMAL).unwrap();
        assert!(matches!(
            build_plan(&policy, &[]),
            Err(PlanError::EmptyCommand)
        ));
    }

    #[test]
    fn plans_are_deterministic() {
        let a = parse_policy(MINIMAL).unwrap();
        let b = parse_policy(MINIMAL).unwrap();
        let pa = build_plan(&a, &argv(&["/bin/true"])).unwrap();
        let pb = build_plan(&b, &argv(&["/bin/true"])).unwrap();
        assert_eq!(render_plan(&pa), render_plan(&pb));
    }

    #[test]
    fn minimal_render_is_stable() {
        let policy = parse_policy(MINIMAL).unwrap();
        let plan = build_plan(&policy, &argv(&["/bin/true"])).unwrap();
        let expected = "\
create-namespaces user,mount
write-idmaps uid=[self->0] gid=[self->0]
enter-root /srv/jail/minimal
drop-capabilities keep=[]
install-filter default=allow allow=0 errno=0 log=0 kill=0
exec argv=[\"/bin/true\"] env=[]
";
        assert_eq!(render_plan(&plan), expected);
    }

    #[test]
    fn empty_env_renders_empty_list() {
        let policy = parse_policy(MINIMAL).unwrap();
        let plan = build_plan(&policy, &argv(&["/bin/probe", "--x"])).unwrap();
        let rendered = render_plan(&plan);
        assert!(rendered.ends_with("exec argv=[\"/bin/probe\", \"--x\"] env=[]\n"));
    }

    #[test]
    fn full_policy_emits_all_ten_step_kinds() {
        let text = "\
[sandbox]
name = full
chroot = /srv/jail/full
hostname = fullhost
network_mode = isolated

[namespaces]
user = true
mount = true
pid = true
net = true
uts = true

[idmap]
uid = 0:1000:1
gid = 0:1000:1

[mounts]
mount = bind,/usr,/usr,ro

[seccomp]
default = kill
allow = read, write

[capabilities]
keep = CAP_NET_BIND_SERVICE

[limits]
memory_bytes = 67108864

[env]
allow = PATH
";
        let policy = parse_policy(text).unwrap();
        let plan = build_plan(&policy, &argv(&["/bin/node"])).unwrap();
        assert_eq!(plan.steps().len(), 10);
        plan.check_ordering().unwrap();
        let rendered = render_plan(&plan);
        assert!(rendered.contains("write-idmaps uid=[0:1000:1] gid=[0:1000:1]"));
        assert!(rendered.contains("configure-network isolated"));
        assert!(rendered.contains("drop-capabilities keep=[CAP_NET_BIND_SERVICE]"));
        assert!(rendered.contains("install-filter default=kill allow=2 errno=0 log=0 kill=0"));
    }

    #[test]
    fn ordering_checker_rejects_shuffled_plans() {
        let policy = parse_policy(MINIMAL).unwrap();
        let plan = build_plan(&policy, &argv(&["/bin/true"])).unwrap();
        let mut bad = plan.clone();
        bad.steps.swap(4, 5); // exec before install-filter
        assert!(bad.check_ordering().is_err());
        let mut bad = plan.clone();
        bad.steps.remove(4); // no filter at all
        assert!(bad.check_ordering().is_err());
        let mut bad = plan;
        let first = bad.steps.remove(0);
        bad.steps.insert(1, first); // namespaces not first
        assert!(bad.check_ordering().is_err());
    }
}
