//! Kernel emission for compiled filter programs.
//!
//! Translates the abstract instruction stream one-to-one into classic BPF
//! `sock_filter` words for `prctl(PR_SET_SECCOMP, SECCOMP_MODE_FILTER)`. The
//! instruction shapes line up exactly (load absolute word, jump-equal with
//! relative skips, return constant), so the interpreter in
//! [`crate::seccomp::evaluate`] remains the semantics definition for what the
//! kernel enforces.
//!
//! The Log action has no portable in-kernel form with retrievable records;
//! enforce mode admits those syscalls (observe mode is where logging is
//! implemented, supervisor-side).

use crate::seccomp::{Action, FilterProgram, Instruction};

const BPF_LD: u16 = 0x00;
const BPF_W: u16 = 0x00;
const BPF_ABS: u16 = 0x20;
const BPF_JMP: u16 = 0x05;
const BPF_JEQ: u16 = 0x10;
const BPF_K: u16 = 0x00;
const BPF_RET: u16 = 0x06;

const SECCOMP_RET_ALLOW: u32 = 0x7fff_0000;
const SECCOMP_RET_KILL: u32 = 0x0000_0000;
const SECCOMP_RET_ERRNO: u32 = 0x0005_0000;
const SECCOMP_RET_DATA: u32 = 0x0000_ffff;

// struct seccomp_data field offsets: nr at 0, arch at 4.
const DATA_NR_OFFSET: u32 = 0;
const DATA_ARCH_OFFSET: u32 = 4;

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SockFilter {
    pub code: u16,
    pub jt: u8,
    pub jf: u8,
    pub k: u32,
}

#[repr(C)]
pub struct SockFprog {
    pub len: libc::c_ushort,
    pub filter: *const SockFilter,
}

fn ret_code(action: Action) -> u32 {
    match action {
        Action::Allow | Action::Log => SECCOMP_RET_ALLOW,
        Action::Kill => SECCOMP_RET_KILL,
        Action::Errno(e) => SECCOMP_RET_ERRNO | (e.number() & SECCOMP_RET_DATA),
    }
}

/// Emit the kernel form of a filter program.
pub fn emit(program: &FilterProgram) -> Vec<SockFilter> {
    program
        .instructions()
        .iter()
        .map(|instr| match *instr {
            Instruction::LoadArch => SockFilter {
                code: BPF_LD | BPF_W | BPF_ABS,
                jt: 0,
                jf: 0,
                k: DATA_ARCH_OFFSET,
            },
            Instruction::LoadNr => SockFilter {
                code: BPF_LD | BPF_W | BPF_ABS,
                jt: 0,
                jf: 0,
                k: DATA_NR_OFFSET,
            },
            Instruction::JumpEqual {
                value,
                then_skip,
                else_skip,
            } => SockFilter {
                code: BPF_JMP | BPF_JEQ | BPF_K,
                jt: then_skip,
                jf: else_skip,
                k: value,
            },
            Instruction::Return(action) => SockFilter {
                code: BPF_RET | BPF_K,
                jt: 0,
                jf: 0,
                k: ret_code(action),
            },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::errno;
    use crate::seccomp::{compile_filter, tables, SeccompPolicy};

    #[test]
    fn emission_is_one_to_one() {
        let policy = SeccompPolicy {
            default_action: Action::Kill,
            rules: vec![
                ("read".to_string(), Action::Allow),
                ("mkdir".to_string(), Action::Errno(errno::by_name("EACCES").unwrap())),
                ("socket".to_string(), Action::Log),
            ],
        };
        let program = compile_filter(&policy, tables::x86_64()).unwrap();
        let words = emit(&program);
        assert_eq!(words.len(), program.len());
        // Arch load reads offset 4; nr load reads offset 0.
        assert_eq!(words[0].code, 0x20);
        assert_eq!(words[0].k, 4);
        assert_eq!(words[3].code, 0x20);
        assert_eq!(words[3].k, 0);
        // Errno return carries the errno in the data bits.
        let eacces = words
            .iter()
            .find(|w| w.code == 0x06 && (w.k & 0xffff_0000) == SECCOMP_RET_ERRNO)
            .unwrap();
        assert_eq!(eacces.k & 0xffff, 13);
        // Log maps to allow in kernel form.
        let allows = words
            .iter()
            .filter(|w| w.code == 0x06 && w.k == SECCOMP_RET_ALLOW)
            .count();
        assert_eq!(allows, 2);
    }
}
