//! Process-tree freeze, metadata capture, and reconstruction into a fresh
//! namespace.
//!
//! Freezing captures hierarchy, descriptors, and register/TLS/signal/futex
//! state; it performs zero page-content work, so the freeze interval depends
//! only on process and descriptor counts. Reconstruction replays the
//! recorded topology inside an independent namespace: namespace-local pids
//! are preserved bit-exactly, host pids are always fresh. Frozen processes
//! are addressed through stable handles carrying engine-wide identity,
//! because a restorer in a fresh pid namespace cannot name source processes
//! by their integer local pids.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::ids::{BranchId, HostPid, LocalPid, NamespaceId};
use crate::model::ProcMeta;

/// Stable reference to one frozen process, resolvable from any namespace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProcHandle {
    pub host_pid: HostPid,
}

/// Everything captured while the source is stopped.
#[derive(Debug, Clone)]
pub struct FrozenMeta {
    pub branch: BranchId,
    pub frozen_at_ms: u64,
    pub namespaces: BTreeSet<u64>,
    pub records: Vec<ProcMeta>,
    pub proc_handles: Vec<ProcHandle>,
}

impl FrozenMeta {
    pub fn from_records(branch: BranchId, namespace: NamespaceId, records: Vec<ProcMeta>) -> Self {
        let proc_handles = records
            .iter()
            .map(|r| ProcHandle {
                host_pid: HostPid(r.host_pid),
            })
            .collect();
        FrozenMeta {
            branch,
            frozen_at_ms: 0,
            namespaces: [namespace.0].into(),
            records,
            proc_handles,
        }
    }

    /// Metadata work performed by capture: one operation per process plus
    /// one per descriptor. Page counts never appear here.
    pub fn metadata_ops(&self) -> u64 {
        self.records.len() as u64
            + self
                .records
                .iter()
                .map(|r| r.descriptors.len() as u64)
                .sum::<u64>()
    }
}

/// Ordered creation plan: parents precede children, siblings ascend by
/// local pid. Host pids are identity and therefore absent from the image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessTreeImage {
    pub entries: Vec<ProcMeta>,
}

impl ProcessTreeImage {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Turn frozen metadata into a topologically ordered creation plan.
pub fn capture_metadata(frozen: &FrozenMeta) -> ProcessTreeImage {
    let mut children: BTreeMap<Option<LocalPid>, Vec<&ProcMeta>> = BTreeMap::new();
    for r in &frozen.records {
        children.entry(r.parent).or_default().push(r);
    }
    for v in children.values_mut() {
        v.sort_by_key(|r| r.local_pid);
    }
    let mut entries = Vec::with_capacity(frozen.records.len());
    let mut stack: Vec<&ProcMeta> = children.remove(&None).unwrap_or_default();
    stack.reverse();
    while let Some(r) = stack.pop() {
        let mut rec = r.clone();
        rec.host_pid = 0;
        entries.push(rec);
        if let Some(mut kids) = children.remove(&Some(r.local_pid)) {
            kids.reverse();
            stack.extend(kids);
        }
    }
    debug_assert_eq!(entries.len(), frozen.records.len(), "tree is connected");
    ProcessTreeImage { entries }
}

/// Replay a creation plan inside a fresh namespace. Local pids are the
/// recorded ones; host pids come from the engine-wide allocator.
pub fn reconstruct_tree(
    image: &ProcessTreeImage,
    _dest: NamespaceId,
    mut alloc_host_pid: impl FnMut() -> HostPid,
) -> Result<Vec<ProcMeta>> {
    let mut seen: BTreeSet<LocalPid> = BTreeSet::new();
    let mut out = Vec::with_capacity(image.entries.len());
    for entry in &image.entries {
        if let Some(parent) = entry.parent {
            if !seen.contains(&parent) {
                return Err(Error::Invariant(format!(
                    "creation plan not topologically ordered: {} before parent {}",
                    entry.local_pid, parent
                )));
            }
        }
        if !seen.insert(entry.local_pid) {
            // Impossible in a fresh namespace; a collision is an internal error.
            return Err(Error::Invariant(format!(
                "local pid collision on {} in fresh namespace",
                entry.local_pid
            )));
        }
        let mut rec = entry.clone();
        rec.host_pid = alloc_host_pid().0;
        out.push(rec);
    }
    Ok(out)
}
