//! Error categories and their exit codes.

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FailKind {
    Config,
    Checkpoint,
    Data,
    Other,
}

impl FailKind {
    pub fn exit_code(self) -> u8 {
        match self {
            FailKind::Other => 1,
            FailKind::Config => 2,
            FailKind::Checkpoint => 3,
            FailKind::Data => 4,
        }
    }

    fn label(self) -> &'static str {
        match self {
            FailKind::Config => "config",
            FailKind::Checkpoint => "checkpoint",
            FailKind::Data => "data",
            FailKind::Other => "other",
        }
    }
}

#[derive(Debug)]
pub struct Fail {
    pub kind: FailKind,
    pub msg: String,
}

impl Fail {
    pub fn new(kind: FailKind, msg: impl Into<String>) -> Self {
        Fail { kind, msg: msg.into() }
    }
}

impl fmt::Display for Fail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.kind.label(), self.msg)
    }
}

impl From<agat::Error> for Fail {
    fn from(e: agat::Error) -> Self {
        let kind = match &e {
            agat::Error::Config(_) => FailKind::Config,
            agat::Error::Checkpoint { .. } => FailKind::Checkpoint,
            agat::Error::Format { .. } | agat::Error::DataIo { .. } => FailKind::Data,
            _ => FailKind::Other,
        };
        Fail::new(kind, e.to_string())
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail::new(FailKind::Other, e.to_string())
    }
}
