//! orbitjail: launch, supervise, and probe sandboxed payload nodes.
//!
//! Exit codes are part of the contract (command schedulers act on them):
//! 0 success / child exit 0; 10+n child exited n; 64 setup failure;
//! 65 filter kill; 2 usage errors; 1 other errors. `verify` instead forwards
//! the probe's code: 0 all pass, 1 any fail, 2 harness failure, 3 skips.

mod commands;
mod fixtures;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use orbitjail::jail::Mode;

#[derive(Parser)]
#[command(name = "orbitjail", version, about = "Sandbox supervisor for payload nodes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a policy and print its launch plan without any privileges.
    Plan {
        policy: PathBuf,
        /// Target command, after `--`.
        #[arg(last = true, required = true)]
        argv: Vec<String>,
    },
    /// Launch the target inside the jail and supervise it.
    Run {
        /// enforce: kernel filter; observe: traced, attributed violations.
        #[arg(long, default_value = "enforce", value_parser = parse_mode)]
        mode: Mode,
        /// Print the supervision record as JSON.
        #[arg(long)]
        json: bool,
        /// One fresh jail per line read from stdin instead of a single run.
        #[arg(long, requires = "stdin_commands")]
        per_command: bool,
        #[arg(long)]
        stdin_commands: bool,
        policy: PathBuf,
        #[arg(last = true)]
        argv: Vec<String>,
    },
    /// Launch the isolation prober inside the jail and forward its verdict.
    Verify {
        #[arg(long)]
        json: bool,
        /// Behave as if the kernel had no user namespaces (CI rehearsal).
        #[arg(long, hide = true)]
        assume_no_userns: bool,
        policy: PathBuf,
    },
    /// Run the middleware broker on one address.
    Broker {
        /// unix:<path>, tcp:<host:port>, or a bare socket path.
        #[arg(long)]
        listen: String,
    },
    /// Middleware and harness nodes.
    Node {
        #[command(subcommand)]
        node: NodeCommand,
    },
    /// Orchestrate broker, command node, and attacker; print the outcome.
    AttackSim {
        #[arg(long, group = "scenario", required = true)]
        jailed: bool,
        #[arg(long, group = "scenario")]
        unjailed: bool,
        #[arg(long)]
        json: bool,
        /// Scratch tree for secret, socket, and jail root.
        #[arg(long)]
        scratch: Option<PathBuf>,
        #[arg(long, default_value = "enforce", value_parser = parse_mode)]
        mode: Mode,
        /// Confinement posture for the jailed scenario.
        policy: PathBuf,
    },
    /// Wrap a file in the triple-redundant container.
    Pack { input: PathBuf, output: PathBuf },
    /// Recover a file from a (possibly corrupted) container.
    Unpack { input: PathBuf, output: PathBuf },
    /// Internal: the in-jail probe runner.
    #[command(hide = true)]
    Probe {
        #[arg(long)]
        expect: String,
    },
    /// Internal: deterministic workloads for containment tests.
    #[command(hide = true)]
    Fixture {
        #[command(subcommand)]
        fixture: fixtures::FixtureCommand,
    },
}

#[derive(Subcommand)]
enum NodeCommand {
    /// Serve a service that echoes request payloads.
    Echo {
        #[arg(long)]
        broker: Option<String>,
        #[arg(long, default_value = "echo")]
        service: String,
    },
    /// The command-parser node. The RAW exec path stays disabled unless
    /// --vulnerable acknowledges the deliberately injected flaw.
    Vuln {
        #[arg(long)]
        broker: Option<String>,
        #[arg(long)]
        vulnerable: bool,
    },
    /// Send the benign suite plus the exploit payload and report what the
    /// responses show.
    Attack {
        #[arg(long)]
        broker: Option<String>,
        /// Path of the planted secret to exfiltrate.
        #[arg(long)]
        secret: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::parse(s).ok_or_else(|| format!("expected enforce|observe, got `{s}`"))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Plan { policy, argv } => commands::plan(&policy, &argv),
        Command::Run {
            mode,
            json,
            per_command,
            stdin_commands,
            policy,
            argv,
        } => commands::run(mode, json, per_command && stdin_commands, &policy, &argv),
        Command::Verify {
            json,
            assume_no_userns,
            policy,
        } => commands::verify(json, assume_no_userns, &policy),
        Command::Broker { listen } => commands::broker(&listen),
        Command::Node { node } => match node {
            NodeCommand::Echo { broker, service } => commands::node_echo(broker, &service),
            NodeCommand::Vuln { broker, vulnerable } => commands::node_vuln(broker, vulnerable),
            NodeCommand::Attack { broker, secret } => commands::node_attack(broker, &secret),
        },
        Command::AttackSim {
            jailed,
            unjailed,
            json,
            scratch,
            mode,
            policy,
        } => commands::attack_sim(jailed && !unjailed, json, scratch, mode, &policy),
        Command::Pack { input, output } => commands::pack(&input, &output),
        Command::Unpack { input, output } => commands::unpack(&input, &output),
        Command::Probe { expect } => commands::probe(&expect),
        Command::Fixture { fixture } => fixtures::run(fixture),
    };
    std::process::exit(code);
}
