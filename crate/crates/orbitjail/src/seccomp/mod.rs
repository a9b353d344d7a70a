//! Symbolic syscall policies and their compiled filter form.
//!
//! A [`SeccompPolicy`] names syscalls and actions; [`compile_filter`] turns it
//! into an architecture-checked [`FilterProgram`]; [`evaluate`] is the
//! reference interpreter that defines the enforcement semantics and serves as
//! the oracle for both the compiler and the runtime (kernel installation in
//! enforce mode, supervisor-side interception in observe mode).

pub mod program;
pub mod tables;

pub use program::{compile_filter, evaluate, FilterProgram, Instruction};
pub use tables::ArchTable;

use crate::errno::SymbolicErrno;

/// What the filter does when a syscall matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Action {
    /// Let the syscall through.
    Allow,
    /// Terminate the offending process.
    Kill,
    /// Deny the syscall, making it fail with the given errno.
    Errno(SymbolicErrno),
    /// Let it through but record a violation event.
    Log,
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Action::Allow => f.write_str("allow"),
            Action::Kill => f.write_str("kill"),
            Action::Errno(e) => write!(f, "errno {e}"),
            Action::Log => f.write_str("log"),
        }
    }
}

/// A symbolic syscall policy: a default action plus per-syscall rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeccompPolicy {
    pub default_action: Action,
    /// (syscall name, action) pairs; no name appears twice.
    pub rules: Vec<(String, Action)>,
}

impl Default for SeccompPolicy {
    fn default() -> Self {
        SeccompPolicy {
            default_action: Action::Allow,
            rules: Vec::new(),
        }
    }
}

impl SeccompPolicy {
    /// Policy that allows everything (the implicit policy when a file has no
    /// `[seccomp]` section).
    pub fn allow_all() -> Self {
        Self::default()
    }

    /// The action for a named syscall under this policy.
    pub fn action_for(&self, name: &str) -> Action {
        self.rules
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, a)| a)
            .unwrap_or(self.default_action)
    }

    /// Check rule-set invariants: no duplicate names, and every name resolves
    /// on at least one vendored architecture table.
    pub fn validate(&self) -> Result<(), SeccompError> {
        let mut seen = std::collections::HashSet::new();
        for (name, _) in &self.rules {
            if !seen.insert(name.as_str()) {
                return Err(SeccompError::DuplicateRule { name: name.clone() });
            }
            if !tables::known_anywhere(name) {
                return Err(SeccompError::UnknownSyscall {
                    name: name.clone(),
                    arch: "any",
                });
            }
        }
        Ok(())
    }

    /// Rule counts per action class, for plan rendering.
    pub fn rule_counts(&self) -> RuleCounts {
        let mut counts = RuleCounts::default();
        for (_, action) in &self.rules {
            match action {
                Action::Allow => counts.allow += 1,
                Action::Kill => counts.kill += 1,
                Action::Errno(_) => counts.errno += 1,
                Action::Log => counts.log += 1,
            }
        }
        counts
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct RuleCounts {
    pub allow: usize,
    pub kill: usize,
    pub errno: usize,
    pub log: usize,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SeccompError {
    #[error("unknown syscall `{name}` for architecture {arch}")]
    UnknownSyscall { name: String, arch: &'static str },
    #[error("syscall `{name}` appears twice in the rule set")]
    DuplicateRule { name: String },
    #[error("compiled program would exceed {max} instructions")]
    ProgramTooLarge { max: usize },
    #[error("malformed filter program: {reason}")]
    MalformedProgram { reason: String },
}

/// Resolve a syscall name to its number on `arch`.
pub fn resolve_syscall(name: &str, arch: &ArchTable) -> Result<u32, SeccompError> {
    arch.resolve(name)
}
