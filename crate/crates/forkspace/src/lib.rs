//! A user-space versioned-workspace engine.
//!
//! The engine models a live interactive workspace — a process tree,
//! copy-on-write memory pages, a layered filesystem with a versioned page
//! cache, network connections, and GUI buffers — and gives it a
//! fork/rollback/commit lifecycle. Branch creation shares unchanged state
//! copy-on-write and never copies page contents on the critical path;
//! durable checkpointing runs on a background dump daemon.
//!
//! The [`harness`] module drives the engine through agent-style traces and
//! emits the scalability, ablation, and layer-depth datasets under pluggable
//! clone strategies ([`strategy`]).

pub mod checkpoint;
pub mod engine;
pub mod error;
pub mod fs;
pub mod harness;
pub mod ids;
pub mod io;
pub mod model;
pub mod oracle;
pub mod pagestore;
pub mod process;
pub mod security;
pub mod strategy;
pub mod version;

pub use engine::{Engine, EngineConfig};
pub use error::{Error, Result};
pub use ids::*;
pub use model::{build_workspace, diff, validate, WorkspaceSpec, WorkspaceState};
pub use strategy::{CloneStrategy, CostModel};

/// Engine-wide page size in bytes. Every memory slot, GUI buffer page, and
/// file-cache page is exactly this long.
pub const PAGE_SIZE: usize = 4096;

/// Pages per filesystem extent (256 KiB).
pub const EXTENT_PAGES: u64 = 64;

/// A single page of content.
pub type Page = [u8; PAGE_SIZE];

/// Boxed page, the owned form used in resolved workspace snapshots.
pub type PageBuf = Box<Page>;
