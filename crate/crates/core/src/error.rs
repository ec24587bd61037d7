use std::fmt;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown {kind} id {id}")]
    UnknownId { kind: EntityKind, id: u64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invariant violated by {kind} {id}: {reason}")]
    Invariant {
        kind: EntityKind,
        id: u64,
        reason: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("routing error: {0}")]
    Routing(String),

    #[error("query error: {0}")]
    Query(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("simulation error at tick {tick}: {reason}")]
    Simulation { tick: u32, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityKind {
    Intersection,
    Segment,
    Lane,
    Vehicle,
    Phase,
    Flow,
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EntityKind::Intersection => "intersection",
            EntityKind::Segment => "segment",
            EntityKind::Lane => "lane",
            EntityKind::Vehicle => "vehicle",
            EntityKind::Phase => "phase",
            EntityKind::Flow => "flow",
        };
        f.write_str(s)
    }
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn unknown(kind: EntityKind, id: impl Into<u64>) -> Self {
        Error::UnknownId { kind, id: id.into() }
    }

    pub(crate) fn invariant(kind: EntityKind, id: impl Into<u64>, reason: impl Into<String>) -> Self {
        Error::Invariant {
            kind,
            id: id.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
