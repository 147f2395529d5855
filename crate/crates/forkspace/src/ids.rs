//! Newtype identifiers used across the engine.
//!
//! Host pids and namespace ids are identity, not state: they are allocated
//! engine-wide, never reused, and excluded from state equality.

use std::fmt;
use std::num::NonZeroU64;

use serde::{Deserialize, Serialize};

macro_rules! id_u64 {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_u64!(
    /// A live branch (runnable workspace instance).
    BranchId
);
id_u64!(
    /// A recorded version node in the version tree.
    VersionId
);
id_u64!(
    /// A virtual memory area within one process.
    VmaId
);
id_u64!(
    /// Engine-wide process identity; never preserved across fork.
    HostPid
);
id_u64!(
    /// An isolated namespace token (pid/net/mount scope of one branch).
    NamespaceId
);
id_u64!(
    /// A sealed page-cache layer.
    LayerId
);
id_u64!(
    /// One immutable filesystem version (extent map).
    FsVersionId
);
id_u64!(
    /// An immutable run of file blocks.
    ExtentId
);
id_u64!(
    /// A durable checkpoint image.
    ImageId
);
id_u64!(
    /// A GUI buffer instance; fresh per branch.
    GuiId
);
id_u64!(
    /// A connection record.
    ConnId
);
id_u64!(
    /// A per-process snapshot holder.
    HolderId
);

/// Namespace-local process id; preserved bit-exactly across fork.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LocalPid(pub u32);

impl fmt::Display for LocalPid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A reference-counted page in the page store. Non-zero so that an
/// `Option<PageId>` table slot stays 8 bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PageId(NonZeroU64);

impl PageId {
    pub(crate) fn new(raw: u64) -> Self {
        PageId(NonZeroU64::new(raw).expect("page ids start at 1"))
    }

    pub fn raw(self) -> u64 {
        self.0.get()
    }
}

impl fmt::Display for PageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
