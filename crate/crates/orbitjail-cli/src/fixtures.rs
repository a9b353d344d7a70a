//! Deterministic workloads for containment experiments.

use clap::Subcommand;

#[derive(Subcommand)]
pub enum FixtureCommand {
    /// Allocate and touch memory until done or killed by a cap.
    Memhog {
        #[arg(long, default_value_t = 128)]
        mib: usize,
    },
    /// Fork as many children as allowed; print how many succeeded.
    Forkbomb {
        #[arg(long, default_value_t = 64)]
        procs: u32,
        #[arg(long, default_value_t = 500)]
        hold_ms: u64,
    },
    /// Exit immediately.
    Noop,
    /// Invoke the sysinfo syscall a fixed number of times.
    Logcalls {
        #[arg(long, default_value_t = 5)]
        count: u32,
    },
    /// Sleep, then exit.
    Sleep {
        #[arg(long, default_value_t = 1000)]
        ms: u64,
    },
}

pub fn run(fixture: FixtureCommand) -> i32 {
    match fixture {
        FixtureCommand::Memhog { mib } => memhog(mib),
        FixtureCommand::Forkbomb { procs, hold_ms } => forkbomb(procs, hold_ms),
        FixtureCommand::Noop => 0,
        FixtureCommand::Logcalls { count } => logcalls(count),
        FixtureCommand::Sleep { ms } => {
            std::thread::sleep(std::time::Duration::from_millis(ms));
            0
        }
    }
}

fn memhog(mib: usize) -> i32 {
    let mut hoard: Vec<Vec<u8>> = Vec::new();
    for i in 0..mib {
        // Touch every page so the allocation is real.
        let mut chunk = vec![0u8; 1 << 20];
        for page in chunk.chunks_mut(4096) {
            page[0] = (i & 0xFF) as u8;
        }
        hoard.push(chunk);
    }
    println!("allocated {} MiB", hoard.len());
    0
}

fn forkbomb(procs: u32, hold_ms: u64) -> i32 {
    let mut children = Vec::new();
    let mut denied = false;
    for _ in 0..procs {
        let pid = unsafe { libc::fork() };
        if pid == 0 {
            std::thread::sleep(std::time::Duration::from_millis(hold_ms));
            unsafe { libc::_exit(0) };
        }
        if pid < 0 {
            denied = true;
            break;
        }
        children.push(pid);
    }
    println!("spawned={} denied={}", children.len(), denied);
    for pid in children {
        let mut status = 0;
        unsafe {
            libc::waitpid(pid, &mut status, 0);
        }
    }
    0
}

fn logcalls(count: u32) -> i32 {
    for _ in 0..count {
        let mut info: libc::sysinfo = unsafe { std::mem::zeroed() };
        unsafe {
            libc::sysinfo(&mut info);
        }
    }
    0
}
