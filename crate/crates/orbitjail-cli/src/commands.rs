//! Subcommand bodies: thin adapters over the library API.

use std::path::{Path, PathBuf};

use orbitjail::broker::{Broker, BrokerAddr};
use orbitjail::harness::{self, Scenario};
use orbitjail::jail::{self, ExecuteOptions, Mode};
use orbitjail::node::NodeConn;
use orbitjail::plan::{build_plan, render_plan};
use orbitjail::policy::{parse_policy, MountKind, MountSpec, Namespace, SandboxPolicy};
use orbitjail::verifier;
use orbitjail::{decode_resilient, encode_resilient};

const EXIT_OK: i32 = 0;
const EXIT_ERROR: i32 = 1;
const EXIT_SETUP: i32 = 64;
const EXIT_FILTER_KILL: i32 = 65;

fn load_policy(path: &Path) -> Result<SandboxPolicy, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    parse_policy(&text).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn plan(policy_path: &Path, argv: &[String]) -> i32 {
    let result = load_policy(policy_path)
        .and_then(|policy| build_plan(&policy, argv).map_err(|e| e.to_string()));
    match result {
        Ok(plan) => {
            print!("{}", render_plan(&plan));
            EXIT_OK
        }
        Err(e) => {
            eprintln!("orbitjail plan: {e}");
            EXIT_SETUP
        }
    }
}

fn record_exit(record: &jail::SupervisionRecord, json: bool) -> i32 {
    if json {
        println!("{}", serde_json::to_string(record).unwrap());
    } else {
        let status = match record.status {
            jail::ChildStatus::Exited(n) => format!("exited {n}"),
            jail::ChildStatus::Signaled(s) => format!("signaled {s}"),
        };
        println!(
            "jail={} pid={} status={status} filter_kill={} violations={}",
            record.jail,
            record.pid,
            record.filter_kill,
            record.violations.len()
        );
        for v in &record.violations {
            println!("  [{:?}] {}", v.kind, v.detail);
        }
    }
    record.supervisor_exit_code()
}

pub fn run(mode: Mode, json: bool, per_command: bool, policy_path: &Path, argv: &[String]) -> i32 {
    let policy = match load_policy(policy_path) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("orbitjail run: {e}");
            return EXIT_SETUP;
        }
    };

    if per_command {
        let mut worst = EXIT_OK;
        let stdin = std::io::stdin();
        for line in std::io::BufRead::lines(stdin.lock()) {
            let line = match line {
                Ok(l) => l,
                Err(_) => break,
            };
            if line.trim().is_empty() {
                continue;
            }
            match jail::spawn_per_command(&policy, &line, mode) {
                Ok(record) => {
                    let code = record_exit(&record, json);
                    if worst == EXIT_OK {
                        worst = code;
                    }
                }
                Err(e) => {
                    eprintln!("orbitjail run: {e}");
                    worst = EXIT_SETUP;
                }
            }
        }
        return worst;
    }

    if argv.is_empty() {
        eprintln!("orbitjail run: no command given (append `-- <argv...>`)");
        return EXIT_SETUP;
    }
    let plan = match build_plan(&policy, argv) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("orbitjail run: {e}");
            return EXIT_SETUP;
        }
    };
    match jail::execute_blocking(
        &plan,
        ExecuteOptions {
            mode,
            ..Default::default()
        },
    ) {
        Ok(record) => record_exit(&record, json),
        Err(e) => {
            eprintln!("orbitjail run: {e}");
            match e {
                jail::JailError::SetupFailure { .. }
                | jail::JailError::UnsupportedKernel { .. } => EXIT_SETUP,
                _ => EXIT_SETUP,
            }
        }
    }
}

pub fn verify(json: bool, assume_no_userns: bool, policy_path: &Path) -> i32 {
    let policy = match load_policy(policy_path) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("orbitjail verify: {e}");
            return 2;
        }
    };
    let expectations = verifier::expectations_from_policy(&policy);

    let userns_needed = policy.namespaces.contains(&Namespace::User);
    let userns_missing = !Path::new("/proc/self/ns/user").exists();
    if assume_no_userns || (userns_needed && userns_missing) {
        let report = verifier::all_skipped_report(&expectations, "user-ns-unavailable");
        emit_report(&report, json);
        return report.exit_code();
    }

    let exe = match std::env::current_exe() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("orbitjail verify: cannot locate own binary: {e}");
            return 2;
        }
    };
    let expect_json = serde_json::to_string(&expectations).unwrap();

    // The prober must exist inside the jail: bind its directory read-only at
    // a reserved path. Everything else the probe sees comes from the policy.
    let mut augmented = policy.clone();
    let argv = if augmented.chroot_root == "/" {
        vec![
            exe.to_str().unwrap().to_string(),
            "probe".to_string(),
            "--expect".to_string(),
            expect_json,
        ]
    } else {
        let exe_dir = exe.parent().unwrap_or(Path::new("/"));
        let exe_name = exe.file_name().unwrap().to_string_lossy().into_owned();
        augmented.mounts.push(MountSpec {
            kind: MountKind::Bind,
            source: exe_dir.to_str().unwrap().to_string(),
            dest: "/.orbitjail".to_string(),
            read_only: true,
        });
        vec![
            format!("/.orbitjail/{exe_name}"),
            "probe".to_string(),
            "--expect".to_string(),
            expect_json,
        ]
    };

    let plan = match build_plan(&augmented, &argv) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("orbitjail verify: {e}");
            return 2;
        }
    };
    let record = match jail::execute_blocking(
        &plan,
        ExecuteOptions {
            mode: Mode::Enforce,
            capture_stdout: true,
            ..Default::default()
        },
    ) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("orbitjail verify: {e}");
            return 2;
        }
    };
    // The report rode out on the probe's stdout; forward it.
    let raw = String::from_utf8_lossy(record.stdout_bytes()).into_owned();
    if json {
        print!("{raw}");
    } else if let Ok(report) = serde_json::from_str::<verifier::IsolationReport>(&raw) {
        print_report_human(&report);
    } else {
        print!("{raw}");
    }
    match record.status {
        jail::ChildStatus::Exited(code) => code,
        jail::ChildStatus::Signaled(_) => 2,
    }
}

fn emit_report(report: &verifier::IsolationReport, json: bool) {
    if json {
        println!("{}", serde_json::to_string(report).unwrap());
    } else {
        print_report_human(report);
    }
}

fn print_report_human(report: &verifier::IsolationReport) {
    println!("policy: {}", report.policy);
    for c in &report.checks {
        let verdict = match c.verdict {
            verifier::Verdict::Pass => "pass",
            verifier::Verdict::Fail => "FAIL",
            verifier::Verdict::Skipped => "skip",
        };
        let reason = c
            .reason
            .as_deref()
            .map(|r| format!(" ({r})"))
            .unwrap_or_default();
        println!(
            "  {verdict}  {:<28} expected: {} observed: {}{reason}",
            c.check, c.expected, c.observed
        );
    }
}

pub fn probe(expect: &str) -> i32 {
    let expectations: verifier::Expectations = match serde_json::from_str(expect) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("orbitjail probe: bad expectations: {e}");
            return 2;
        }
    };
    let report = verifier::run_probes(&expectations);
    println!("{}", serde_json::to_string(&report).unwrap());
    report.exit_code()
}

pub fn broker(listen: &str) -> i32 {
    let addr = match BrokerAddr::parse(listen) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("orbitjail broker: {e}");
            return EXIT_ERROR;
        }
    };
    match Broker::bind(&addr) {
        Ok(broker) => {
            println!("listening on {}", broker.addr());
            loop {
                std::thread::park();
            }
        }
        Err(e) => {
            eprintln!("orbitjail broker: bind failed: {e}");
            EXIT_ERROR
        }
    }
}

fn resolve_broker(flag: Option<String>) -> Result<BrokerAddr, String> {
    if let Some(s) = flag {
        return BrokerAddr::parse(&s);
    }
    BrokerAddr::from_env()
        .ok_or_else(|| "no --broker flag and ORBITJAIL_BROKER is unset".to_string())
}

pub fn node_echo(broker: Option<String>, service: &str) -> i32 {
    let addr = match resolve_broker(broker) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("orbitjail node echo: {e}");
            return EXIT_ERROR;
        }
    };
    match NodeConn::connect(&addr) {
        Ok(conn) => {
            let _ = conn.serve(service, |payload| payload.to_vec());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("orbitjail node echo: connect failed: {e}");
            EXIT_ERROR
        }
    }
}

pub fn node_vuln(broker: Option<String>, vulnerable: bool) -> i32 {
    if !vulnerable {
        eprintln!(
            "orbitjail node vuln: refusing to start without --vulnerable; this node \
             deliberately contains a command-injection flaw for containment experiments"
        );
        return EXIT_ERROR;
    }
    let addr = match resolve_broker(broker) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("orbitjail node vuln: {e}");
            return EXIT_ERROR;
        }
    };
    match harness::run_command_node(&addr, true) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("orbitjail node vuln: {e}");
            EXIT_ERROR
        }
    }
}

pub fn node_attack(broker: Option<String>, secret: &Path) -> i32 {
    let addr = match resolve_broker(broker) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("orbitjail node attack: {e}");
            return EXIT_ERROR;
        }
    };
    match harness::standalone_attack(&addr, secret) {
        Ok(outcome) => {
            println!("{}", serde_json::to_string(&outcome).unwrap());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("orbitjail node attack: {e}");
            EXIT_ERROR
        }
    }
}

pub fn attack_sim(
    jailed: bool,
    json: bool,
    scratch: Option<PathBuf>,
    mode: Mode,
    policy_path: &Path,
) -> i32 {
    let base_policy = match load_policy(policy_path) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("orbitjail attack-sim: {e}");
            return EXIT_ERROR;
        }
    };
    let scratch = scratch.unwrap_or_else(|| {
        std::env::temp_dir().join(format!("orbitjail-attack-sim-{}", std::process::id()))
    });
    let exe = std::env::current_exe().unwrap_or_else(|_| PathBuf::from("/proc/self/exe"));
    let scenario = Scenario {
        scratch,
        base_policy,
        exe,
        mode,
    };
    let outcome = if jailed {
        scenario.run_jailed()
    } else {
        scenario.run_unjailed()
    };
    match outcome {
        Ok(result) => {
            if json {
                println!("{}", serde_json::to_string(&result.attack).unwrap());
            } else {
                println!(
                    "exploited={} reason={:?} violations={}",
                    result.attack.exploited, result.attack.reason, result.attack.violations
                );
                println!("evidence: {}", result.attack.evidence.trim_end());
                println!(
                    "benign continuity: {} before, {} after",
                    result.benign_before.len(),
                    result.benign_after.len()
                );
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("orbitjail attack-sim: {e}");
            EXIT_ERROR
        }
    }
}

pub fn pack(input: &Path, output: &Path) -> i32 {
    match std::fs::read(input) {
        Ok(payload) => match std::fs::write(output, encode_resilient(&payload)) {
            Ok(()) => EXIT_OK,
            Err(e) => {
                eprintln!("orbitjail pack: write {}: {e}", output.display());
                EXIT_ERROR
            }
        },
        Err(e) => {
            eprintln!("orbitjail pack: read {}: {e}", input.display());
            EXIT_ERROR
        }
    }
}

pub fn unpack(input: &Path, output: &Path) -> i32 {
    let container = match std::fs::read(input) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("orbitjail unpack: read {}: {e}", input.display());
            return EXIT_ERROR;
        }
    };
    match decode_resilient(&container) {
        Ok(recovered) => {
            if let orbitjail::resilient::RecoveryPath::Majority = recovered.path {
                eprintln!("orbitjail unpack: recovered via majority vote");
            }
            match std::fs::write(output, &recovered.payload) {
                Ok(()) => EXIT_OK,
                Err(e) => {
                    eprintln!("orbitjail unpack: write {}: {e}", output.display());
                    EXIT_ERROR
                }
            }
        }
        Err(e) => {
            eprintln!("orbitjail unpack: {e}");
            EXIT_ERROR
        }
    }
}

// Keep the unused constant tied to its documentation value.
#[allow(dead_code)]
const _: i32 = EXIT_FILTER_KILL;
