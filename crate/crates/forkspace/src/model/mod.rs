//! The modeled workspace: resolved state snapshots, the synthetic workload
//! generator, a validator, and the deep-equality differ used as the
//! correctness oracle by every other module.
//!
//! [`WorkspaceState`] is the exchange form: all page, file, and buffer
//! content fully materialized. Live branches resolve to this form for
//! comparison; the eager oracle in [`crate::oracle`] operates on it
//! directly. Values are immutable once handed to [`diff`].

mod build;
mod diff;
mod spec;

pub use build::build_workspace;
pub(crate) use build::fill_page;
#[cfg(test)]
pub(crate) use build::file_content;
pub use diff::{diff, DiffEntry, DiffReport, GuiField, ProcField};
pub use spec::{ConnMix, FileSpec, GuiBufferSpec, WorkspaceSpec};

use serde::{Deserialize, Serialize};

use crate::ids::{ConnId, GuiId, LocalPid, VmaId};
use crate::{PageBuf, PAGE_SIZE};

/// Memory classes; only anonymous memory is shared copy-on-write across
/// branches, file-backed memory is coordinated with the filesystem view,
/// and shared segments stay branch-local.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MemoryClass {
    Anonymous,
    FileBacked,
    Shared,
}

/// What an open descriptor points at. Severed external connections keep
/// their slot (restored closed) so descriptor tables stay index-stable.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DescTarget {
    File { path: String },
    Conn { id: ConnId },
    Device { name: String },
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Descriptor {
    pub index: u32,
    pub target: DescTarget,
}

/// Per-process metadata captured at freeze and preserved bit-exactly across
/// fork. Register/TLS/signal/futex state is opaque to the engine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcMeta {
    pub host_pid: u64,
    pub local_pid: LocalPid,
    pub parent: Option<LocalPid>,
    pub descriptors: Vec<Descriptor>,
    pub registers: Vec<u8>,
    pub tls: Vec<u8>,
    pub signals: Vec<u8>,
    pub futex: Vec<u8>,
}

/// A resolved memory region: shape plus materialized page contents.
/// Absent slots model never-touched pages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionState {
    pub vma_id: VmaId,
    pub class: MemoryClass,
    pub start_page: u64,
    pub len_pages: u64,
    pub backing_file: Option<String>,
    /// Page offset of this region within its backing file.
    pub backing_page_offset: u64,
    pub pages: Vec<Option<PageBuf>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessState {
    pub meta: ProcMeta,
    pub regions: Vec<RegionState>,
}

/// Where a connection endpoint resolves: a process inside the workspace or
/// a remote address.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EndpointHost {
    Process { local_pid: LocalPid },
    Remote { addr: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub host: EndpointHost,
    pub port: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConnKind {
    Internal,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConnStatus {
    Established,
    Closed,
}

/// Transport state: sequence numbers and in-flight buffered bytes, restored
/// bit-exactly for internal connections.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtoState {
    pub next_send_seq: u64,
    pub delivered_seq: u64,
    pub inflight: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnState {
    pub id: ConnId,
    pub kind: ConnKind,
    pub local: Endpoint,
    pub remote: Endpoint,
    pub status: ConnStatus,
    pub proto: ProtoState,
}

/// A GUI buffer; always branch-local, never shared copy-on-write.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuiState {
    pub id: GuiId,
    pub pages: Vec<PageBuf>,
    pub mutation_rate_hint: u32,
}

impl GuiState {
    pub fn bytes(&self) -> u64 {
        (self.pages.len() * PAGE_SIZE) as u64
    }
}

/// Fully resolved workspace snapshot. `namespace_id`, `fs_view`, and host
/// pids are identity tokens, excluded from state equality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkspaceState {
    pub namespace_id: u64,
    pub fs_view: u64,
    pub processes: Vec<ProcessState>,
    pub files: std::collections::BTreeMap<String, Vec<u8>>,
    pub connections: Vec<ConnState>,
    pub gui_buffers: Vec<GuiState>,
}

impl WorkspaceState {
    pub fn process(&self, pid: LocalPid) -> Option<&ProcessState> {
        self.processes.iter().find(|p| p.meta.local_pid == pid)
    }

    pub fn total_present_pages(&self) -> u64 {
        self.processes
            .iter()
            .flat_map(|p| &p.regions)
            .map(|r| r.pages.iter().filter(|s| s.is_some()).count() as u64)
            .sum()
    }
}

/// Re-check every structural invariant of a workspace state. Returns the
/// list of violations, empty when valid.
pub fn validate(ws: &WorkspaceState) -> Vec<String> {
    let mut errs = Vec::new();
    let mut pids = std::collections::BTreeSet::new();
    let mut roots = 0u32;
    for p in &ws.processes {
        if !pids.insert(p.meta.local_pid) {
            errs.push(format!("duplicate local pid {}", p.meta.local_pid));
        }
    }
    for p in &ws.processes {
        match p.meta.parent {
            None => roots += 1,
            Some(parent) => {
                if !pids.contains(&parent) {
                    errs.push(format!(
                        "process {} has missing parent {}",
                        p.meta.local_pid, parent
                    ));
                }
            }
        }
    }
    if roots != 1 && !ws.processes.is_empty() {
        errs.push(format!("expected exactly one root process, found {roots}"));
    }
    // Parent links must form a tree (no cycles): walk to root from every node.
    let parent_of: std::collections::BTreeMap<_, _> = ws
        .processes
        .iter()
        .map(|p| (p.meta.local_pid, p.meta.parent))
        .collect();
    for p in &ws.processes {
        let mut cur = p.meta.local_pid;
        let mut hops = 0usize;
        while let Some(Some(next)) = parent_of.get(&cur) {
            cur = *next;
            hops += 1;
            if hops > ws.processes.len() {
                errs.push(format!("cycle in parent links at {}", p.meta.local_pid));
                break;
            }
        }
    }
    let mut vmas = std::collections::BTreeSet::new();
    for p in &ws.processes {
        for r in &p.regions {
            if !vmas.insert(r.vma_id) {
                errs.push(format!("vma {} appears in more than one region", r.vma_id));
            }
            if (r.class == MemoryClass::FileBacked) != r.backing_file.is_some() {
                errs.push(format!(
                    "vma {}: class {:?} inconsistent with backing_file {:?}",
                    r.vma_id, r.class, r.backing_file
                ));
            }
            if r.pages.len() as u64 != r.len_pages {
                errs.push(format!(
                    "vma {}: {} page slots for length {}",
                    r.vma_id,
                    r.pages.len(),
                    r.len_pages
                ));
            }
        }
    }
    let mut gui_ids = std::collections::BTreeSet::new();
    for g in &ws.gui_buffers {
        if !gui_ids.insert(g.id) {
            errs.push(format!("duplicate gui buffer id {}", g.id));
        }
    }
    let mut conn_ids = std::collections::BTreeSet::new();
    for c in &ws.connections {
        if !conn_ids.insert(c.id) {
            errs.push(format!("duplicate connection id {}", c.id));
        }
        let internal = matches!(
            (&c.local.host, &c.remote.host),
            (EndpointHost::Process { .. }, EndpointHost::Process { .. })
        );
        let endpoints_resolve = match (&c.local.host, &c.remote.host) {
            (
                EndpointHost::Process { local_pid: a },
                EndpointHost::Process { local_pid: b },
            ) => pids.contains(a) && pids.contains(b),
            _ => false,
        };
        if (c.kind == ConnKind::Internal) != (internal && endpoints_resolve) {
            errs.push(format!(
                "connection {}: kind {:?} inconsistent with endpoints",
                c.id, c.kind
            ));
        }
    }
    errs
}
