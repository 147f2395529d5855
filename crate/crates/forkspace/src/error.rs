use std::path::PathBuf;

use thiserror::Error;

use crate::ids::{BranchId, ImageId, VersionId, VmaId};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown branch {0}")]
    UnknownBranch(BranchId),
    #[error("unknown version {0}")]
    UnknownVersion(VersionId),
    #[error("branch {0} is terminal (discarded or promoted)")]
    BranchTerminal(BranchId),
    #[error("branch {0} is not running")]
    NotRunning(BranchId),
    #[error("branch {0} is already frozen")]
    DoubleFreeze(BranchId),
    #[error("branch {0} was never frozen")]
    NotFrozen(BranchId),
    #[error("fork of {requested} branches exceeds the configured cap of {cap}")]
    BranchCapExceeded { requested: usize, cap: usize },
    #[error("version {0} is not in the lineage of branch {1}")]
    NotInLineage(VersionId, BranchId),
    #[error("checkpoint {0} failed durably: {1}")]
    CheckpointFailed(ImageId, String),
    #[error("checkpoint chain broken: image {0} references missing ancestor {1}")]
    BrokenChain(ImageId, ImageId),
    #[error("unknown process {0} in branch {1}")]
    UnknownProcess(u32, BranchId),
    #[error("unknown vma {0}")]
    UnknownVma(VmaId),
    #[error("slot {slot} out of range for vma of {len} pages")]
    SlotOutOfRange { slot: u64, len: u64 },
    #[error("vma {0} is not anonymous; file-backed and shared regions take other paths")]
    NotAnonymous(VmaId),
    #[error("path not present in filesystem view: {0}")]
    MissingPath(String),
    #[error("page {page} out of range for {path} ({pages} pages)")]
    PageOutOfRange { path: String, page: u64, pages: u64 },
    #[error("an overlay branch layer cannot be forked from another branch layer")]
    BranchOfBranch,
    #[error("invalid workspace spec: {0}")]
    InvalidSpec(String),
    #[error("unknown application {0:?} in profile registry")]
    UnknownApp(String),
    #[error("application {0:?} carries a privileged profile and cannot be auto-composed")]
    PrivilegedApp(String),
    #[error("trace was not recorded from a human-operated session")]
    AgentTrace,
    #[error("branches share no common ancestor version")]
    NoCommonAncestor,
    #[error("merge rejected by policy: {0}")]
    PolicyRejected(String),
    #[error("connection endpoint process {0} missing in destination branch")]
    MissingEndpoint(u32),
    #[error("port {port} already bound in namespace {ns}")]
    PortCollision { ns: u64, port: u16 },
    #[error("outbox release requires the promoted (user-visible) branch")]
    OutboxNotReleasable,
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
