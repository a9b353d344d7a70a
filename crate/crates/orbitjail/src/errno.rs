//! Symbolic errno table for filter actions.
//!
//! Filter rules that deny a syscall with an error carry the errno by symbolic
//! name, so policy files never embed raw numbers that differ across libcs.

/// (symbolic name, Linux errno value).
pub const ERRNO_TABLE: [(&str, u32); 28] = [
    ("EPERM", 1),
    ("ENOENT", 2),
    ("EINTR", 4),
    ("EIO", 5),
    ("EBADF", 9),
    ("EAGAIN", 11),
    ("ENOMEM", 12),
    ("EACCES", 13),
    ("EFAULT", 14),
    ("EBUSY", 16),
    ("EEXIST", 17),
    ("ENODEV", 19),
    ("ENOTDIR", 20),
    ("EISDIR", 21),
    ("EINVAL", 22),
    ("ENFILE", 23),
    ("EMFILE", 24),
    ("ENOSPC", 28),
    ("EROFS", 30),
    ("EMLINK", 31),
    ("EPIPE", 32),
    ("ERANGE", 34),
    ("ENOSYS", 38),
    ("ENOTEMPTY", 39),
    ("ELOOP", 40),
    ("EOPNOTSUPP", 95),
    ("ETIMEDOUT", 110),
    ("ECONNREFUSED", 111),
];

/// A symbolic errno drawn from the fixed table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SymbolicErrno {
    name: &'static str,
    number: u32,
}

impl SymbolicErrno {
    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn number(&self) -> u32 {
        self.number
    }
}

impl std::fmt::Display for SymbolicErrno {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name)
    }
}

/// Look up a symbolic errno by name.
pub fn by_name(name: &str) -> Option<SymbolicErrno> {
    ERRNO_TABLE
        .iter()
        .find(|(n, _)| *n == name)
        .map(|&(name, number)| SymbolicErrno { name, number })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookups() {
        assert_eq!(by_name("EPERM").unwrap().number(), 1);
        assert_eq!(by_name("EROFS").unwrap().number(), 30);
        assert_eq!(by_name("ENOSYS").unwrap().number(), 38);
        assert!(by_name("EWHATEVER").is_none());
    }
}
