//! Deep-equality differ over resolved workspace states.
//!
//! Host pids, namespace ids, and filesystem-view identity tokens are
//! excluded from the comparison: they are identity, not state, and differ
//! across branches.
//! The report is symmetric in content — both directions list the same set
//! of divergent locations.

use std::collections::BTreeSet;

use crate::ids::{ConnId, LocalPid, VmaId};

use super::WorkspaceState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ProcField {
    Presence,
    Parent,
    Descriptors,
    Registers,
    Tls,
    Signals,
    Futex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum GuiField {
    Presence,
    /// Same position, different buffer instance (fresh id after fork).
    Identity,
    Content,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum DiffEntry {
    Process {
        local_pid: LocalPid,
        field: ProcField,
    },
    RegionShape {
        local_pid: LocalPid,
        vma_id: VmaId,
    },
    Page {
        local_pid: LocalPid,
        vma_id: VmaId,
        slot: u64,
    },
    FilePresence {
        path: String,
    },
    FileRange {
        path: String,
        start: u64,
        len: u64,
    },
    Connection {
        id: ConnId,
        external: bool,
    },
    Gui {
        index: usize,
        field: GuiField,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DiffReport {
    pub entries: BTreeSet<DiffEntry>,
}

impl DiffReport {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// True when the report contains only the divergences a fresh fork is
    /// allowed to show: severed external connections and fresh GUI buffer
    /// identity.
    pub fn only_fork_artifacts(&self) -> bool {
        self.entries.iter().all(|e| {
            matches!(e, DiffEntry::Connection { external: true, .. })
                || matches!(
                    e,
                    DiffEntry::Gui {
                        field: GuiField::Identity,
                        ..
                    }
                )
        })
    }

    pub fn page_entries(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e, DiffEntry::Page { .. }))
            .count()
    }
}

impl std::fmt::Display for DiffReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_empty() {
            return write!(f, "(identical)");
        }
        for e in &self.entries {
            writeln!(f, "{e:?}")?;
        }
        Ok(())
    }
}

/// Compare two workspace states and list every divergent process, page,
/// file byte range, connection, and GUI buffer. Empty iff the states are
/// observationally identical.
pub fn diff(a: &WorkspaceState, b: &WorkspaceState) -> DiffReport {
    let mut entries = BTreeSet::new();

    let pids: BTreeSet<LocalPid> = a
        .processes
        .iter()
        .chain(&b.processes)
        .map(|p| p.meta.local_pid)
        .collect();
    for pid in pids {
        match (a.process(pid), b.process(pid)) {
            (None, None) => unreachable!(),
            (Some(_), None) | (None, Some(_)) => {
                entries.insert(DiffEntry::Process {
                    local_pid: pid,
                    field: ProcField::Presence,
                });
            }
            (Some(pa), Some(pb)) => {
                let ma = &pa.meta;
                let mb = &pb.meta;
                if ma.parent != mb.parent {
                    entries.insert(DiffEntry::Process {
                        local_pid: pid,
                        field: ProcField::Parent,
                    });
                }
                if ma.descriptors != mb.descriptors {
                    entries.insert(DiffEntry::Process {
                        local_pid: pid,
                        field: ProcField::Descriptors,
                    });
                }
                for (field, xa, xb) in [
                    (ProcField::Registers, &ma.registers, &mb.registers),
                    (ProcField::Tls, &ma.tls, &mb.tls),
                    (ProcField::Signals, &ma.signals, &mb.signals),
                    (ProcField::Futex, &ma.futex, &mb.futex),
                ] {
                    if xa != xb {
                        entries.insert(DiffEntry::Process {
                            local_pid: pid,
                            field,
                        });
                    }
                }
                diff_regions(pid, pa, pb, &mut entries);
            }
        }
    }

    let paths: BTreeSet<&String> = a.files.keys().chain(b.files.keys()).collect();
    for path in paths {
        match (a.files.get(path), b.files.get(path)) {
            (Some(ca), Some(cb)) => diff_bytes(path, ca, cb, &mut entries),
            (None, None) => unreachable!(),
            _ => {
                entries.insert(DiffEntry::FilePresence { path: path.clone() });
            }
        }
    }

    let conn_ids: BTreeSet<ConnId> = a
        .connections
        .iter()
        .chain(&b.connections)
        .map(|c| c.id)
        .collect();
    for id in conn_ids {
        let ca = a.connections.iter().find(|c| c.id == id);
        let cb = b.connections.iter().find(|c| c.id == id);
        let external = ca
            .or(cb)
            .map(|c| c.kind == super::ConnKind::External)
            .unwrap_or(false);
        if ca != cb {
            entries.insert(DiffEntry::Connection { id, external });
        }
    }

    let gui_len = a.gui_buffers.len().max(b.gui_buffers.len());
    for i in 0..gui_len {
        match (a.gui_buffers.get(i), b.gui_buffers.get(i)) {
            (Some(ga), Some(gb)) => {
                if ga.id != gb.id {
                    entries.insert(DiffEntry::Gui {
                        index: i,
                        field: GuiField::Identity,
                    });
                }
                if ga.pages != gb.pages || ga.mutation_rate_hint != gb.mutation_rate_hint {
                    entries.insert(DiffEntry::Gui {
                        index: i,
                        field: GuiField::Content,
                    });
                }
            }
            (None, None) => unreachable!(),
            _ => {
                entries.insert(DiffEntry::Gui {
                    index: i,
                    field: GuiField::Presence,
                });
            }
        }
    }

    DiffReport { entries }
}

fn diff_regions(
    pid: LocalPid,
    pa: &super::ProcessState,
    pb: &super::ProcessState,
    entries: &mut BTreeSet<DiffEntry>,
) {
    let vmas: BTreeSet<VmaId> = pa
        .regions
        .iter()
        .chain(&pb.regions)
        .map(|r| r.vma_id)
        .collect();
    for vma in vmas {
        let ra = pa.regions.iter().find(|r| r.vma_id == vma);
        let rb = pb.regions.iter().find(|r| r.vma_id == vma);
        match (ra, rb) {
            (Some(ra), Some(rb)) => {
                if ra.class != rb.class
                    || ra.start_page != rb.start_page
                    || ra.len_pages != rb.len_pages
                    || ra.backing_file != rb.backing_file
                    || ra.backing_page_offset != rb.backing_page_offset
                {
                    entries.insert(DiffEntry::RegionShape {
                        local_pid: pid,
                        vma_id: vma,
                    });
                    continue;
                }
                for (slot, (sa, sb)) in ra.pages.iter().zip(&rb.pages).enumerate() {
                    if sa != sb {
                        entries.insert(DiffEntry::Page {
                            local_pid: pid,
                            vma_id: vma,
                            slot: slot as u64,
                        });
                    }
                }
            }
            _ => {
                entries.insert(DiffEntry::RegionShape {
                    local_pid: pid,
                    vma_id: vma,
                });
            }
        }
    }
}

/// Emit maximal contiguous differing byte runs between two file contents.
fn diff_bytes(path: &str, a: &[u8], b: &[u8], entries: &mut BTreeSet<DiffEntry>) {
    let len = a.len().max(b.len());
    let mut run_start: Option<usize> = None;
    for i in 0..=len {
        let differs = i < len && a.get(i) != b.get(i);
        match (differs, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(start)) => {
                entries.insert(DiffEntry::FileRange {
                    path: path.to_string(),
                    start: start as u64,
                    len: (i - start) as u64,
                });
                run_start = None;
            }
            _ => {}
        }
    }
}
