//! orbitjail: a sandbox supervisor for middleware-architecture satellite
//! payload software.
//!
//! The crate launches application nodes inside Linux-feature-based isolation
//! environments described by declarative policy files, and ships a miniature
//! pub/sub + client/server middleware testbed plus an attack harness that
//! demonstrates command-injection containment.
//!
//! Main pieces:
//!
//! - [`policy`]: the declarative sandbox policy model, its line-oriented file
//!   format, and validation.
//! - [`resilient`]: a triple-redundant, CRC-guarded container format so a
//!   policy file survives isolated bit flips in storage.
//! - [`seccomp`]: a symbolic syscall policy compiled into an
//!   architecture-checked filter program, with a reference interpreter that
//!   doubles as the enforcement-semantics oracle.
//! - [`plan`] and [`jail`]: an ordered, renderable launch plan and its
//!   executor, which spawns and supervises confined children rootlessly via
//!   user namespaces.
//! - [`wire`], [`broker`], [`node`]: a small star-topology middleware layer
//!   (publish/subscribe plus request/response) over local stream sockets.
//! - [`harness`]: a deliberately vulnerable command-parser node and the
//!   attack client that exercises it jailed and unjailed.
//! - [`verifier`]: an in-jail probe program that empirically checks every
//!   confinement claim and emits a machine-readable report.
//!
//! Plan building, policy handling, the filter compiler, and the wire format
//! are portable; jail execution and the probes are Linux-only.

pub mod caps;
pub mod errno;
pub mod policy;
pub mod resilient;
pub mod seccomp;

pub mod plan;

pub mod jail;

pub mod broker;
pub mod node;
pub mod wire;

pub mod harness;
pub mod verifier;

pub mod testkit;

pub use policy::{parse_policy, serialize_policy, SandboxPolicy};
pub use resilient::{decode_resilient, encode_resilient};
pub use seccomp::{compile_filter, evaluate, resolve_syscall};
