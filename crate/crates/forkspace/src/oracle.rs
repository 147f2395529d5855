//! Eager deep-copy reference engine.
//!
//! Implements the same observable lifecycle semantics as the engine by the
//! most direct means available: every fork and every recorded version is a
//! full deep copy of the workspace state, every rollback restores one. No
//! page store, no extents, no layers — values all the way down. Replaying
//! a trace here and diffing the final branches against the engine is the
//! oracle-equivalence check.
//!
//! Identifier allocation (branch ids, version ids, GUI buffer ids) mirrors
//! the engine's deterministic sequences so snapshots line up entry for
//! entry.

use std::collections::BTreeMap;

use crate::engine::gui_id_for_pub as gui_id_for;
use crate::error::{Error, Result};
use crate::ids::{BranchId, ConnId, LocalPid, VersionId, VmaId};
use crate::model::{ConnStatus, EndpointHost, MemoryClass, WorkspaceState};
use crate::{Page, PAGE_SIZE};

struct OracleBranch {
    state: WorkspaceState,
    live: bool,
    current_version: Option<VersionId>,
}

struct OracleVersion {
    snapshot: WorkspaceState,
    parent: Option<VersionId>,
}

pub struct OracleEngine {
    branches: BTreeMap<BranchId, OracleBranch>,
    versions: BTreeMap<VersionId, OracleVersion>,
    human: BranchId,
    next_branch: u64,
    next_version: u64,
    next_namespace: u64,
}

impl OracleEngine {
    pub fn launch(ws: &WorkspaceState) -> Self {
        let human = BranchId(1);
        let mut state = ws.clone();
        state.namespace_id = 1;
        for (i, g) in state.gui_buffers.iter_mut().enumerate() {
            g.id = gui_id_for(human, i);
        }
        let mut branches = BTreeMap::new();
        branches.insert(
            human,
            OracleBranch {
                state,
                live: true,
                current_version: None,
            },
        );
        OracleEngine {
            branches,
            versions: BTreeMap::new(),
            human,
            next_branch: 2,
            next_version: 1,
            next_namespace: 2,
        }
    }

    pub fn human(&self) -> BranchId {
        self.human
    }

    fn branch(&self, id: BranchId) -> Result<&OracleBranch> {
        self.branches
            .get(&id)
            .filter(|b| b.live)
            .ok_or(Error::UnknownBranch(id))
    }

    fn branch_mut(&mut self, id: BranchId) -> Result<&mut OracleBranch> {
        self.branches
            .get_mut(&id)
            .filter(|b| b.live)
            .ok_or(Error::UnknownBranch(id))
    }

    pub fn record(&mut self, branch: BranchId) -> Result<VersionId> {
        let parent = self.branch(branch)?.current_version;
        let snapshot = self.branch(branch)?.state.clone();
        let id = VersionId(self.next_version);
        self.next_version += 1;
        self.versions.insert(id, OracleVersion { snapshot, parent });
        self.branch_mut(branch)?.current_version = Some(id);
        Ok(id)
    }

    pub fn fork(&mut self, version: VersionId, n: usize) -> Result<Vec<BranchId>> {
        let snapshot = self
            .versions
            .get(&version)
            .ok_or(Error::UnknownVersion(version))?
            .snapshot
            .clone();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let id = BranchId(self.next_branch);
            self.next_branch += 1;
            let ns = self.next_namespace;
            self.next_namespace += 1;
            let mut state = snapshot.clone();
            state.namespace_id = ns;
            for p in &mut state.processes {
                p.meta.host_pid = 0;
            }
            for c in &mut state.connections {
                let internal = matches!(
                    (&c.local.host, &c.remote.host),
                    (EndpointHost::Process { .. }, EndpointHost::Process { .. })
                );
                if !internal {
                    c.status = ConnStatus::Closed;
                    c.proto = Default::default();
                }
            }
            for (i, g) in state.gui_buffers.iter_mut().enumerate() {
                g.id = gui_id_for(id, i);
            }
            self.branches.insert(
                id,
                OracleBranch {
                    state,
                    live: true,
                    current_version: Some(version),
                },
            );
            out.push(id);
        }
        Ok(out)
    }

    pub fn rollback(&mut self, branch: BranchId, version: VersionId) -> Result<()> {
        if !self.lineage(branch).contains(&version) {
            return Err(Error::NotInLineage(version, branch));
        }
        let snapshot = self.versions[&version].snapshot.clone();
        let b = self.branch_mut(branch)?;
        let ns = b.state.namespace_id;
        b.state = snapshot;
        b.state.namespace_id = ns;
        b.current_version = Some(version);
        Ok(())
    }

    pub fn lineage(&self, branch: BranchId) -> Vec<VersionId> {
        let mut out = Vec::new();
        let mut cur = self
            .branches
            .get(&branch)
            .and_then(|b| b.current_version);
        while let Some(v) = cur {
            out.push(v);
            cur = self.versions.get(&v).and_then(|n| n.parent);
        }
        out
    }

    pub fn discard(&mut self, branch: BranchId) -> Result<()> {
        self.branch_mut(branch)?.live = false;
        Ok(())
    }

    pub fn promote(&mut self, branch: BranchId) -> Result<()> {
        if branch == self.human {
            return Ok(());
        }
        let state = self.branch(branch)?.state.clone();
        let version = self.branch(branch)?.current_version;
        self.branch_mut(branch)?.live = false;
        let human = self.human;
        let h = self.branch_mut(human)?;
        h.state = state;
        h.current_version = version;
        Ok(())
    }

    pub fn write_page(
        &mut self,
        branch: BranchId,
        pid: LocalPid,
        vma: VmaId,
        slot: u64,
        bytes: &Page,
    ) -> Result<()> {
        let b = self.branch_mut(branch)?;
        let region = b
            .state
            .processes
            .iter_mut()
            .find(|p| p.meta.local_pid == pid)
            .ok_or(Error::UnknownProcess(pid.0, branch))?
            .regions
            .iter_mut()
            .find(|r| r.vma_id == vma)
            .ok_or(Error::UnknownVma(vma))?;
        let cell = region
            .pages
            .get_mut(slot as usize)
            .ok_or(Error::SlotOutOfRange {
                slot,
                len: region.len_pages,
            })?;
        *cell = Some(Box::new(*bytes));
        Ok(())
    }

    pub fn fs_write(&mut self, branch: BranchId, path: &str, page: u64, bytes: &Page) -> Result<()> {
        let b = self.branch_mut(branch)?;
        let content = b
            .state
            .files
            .get_mut(path)
            .ok_or_else(|| Error::MissingPath(path.to_string()))?;
        let start = (page as usize) * PAGE_SIZE;
        if start + PAGE_SIZE > content.len() {
            return Err(Error::PageOutOfRange {
                path: path.to_string(),
                page,
                pages: (content.len() / PAGE_SIZE) as u64,
            });
        }
        content[start..start + PAGE_SIZE].copy_from_slice(bytes);
        Ok(())
    }

    pub fn gui_write(&mut self, branch: BranchId, buffer: usize, page: u64, bytes: &Page) -> Result<()> {
        let b = self.branch_mut(branch)?;
        let buf = b
            .state
            .gui_buffers
            .get_mut(buffer)
            .ok_or_else(|| Error::Invariant(format!("no gui buffer {buffer}")))?;
        let len = buf.pages.len() as u64;
        let cell = buf
            .pages
            .get_mut(page as usize)
            .ok_or(Error::SlotOutOfRange { slot: page, len })?;
        **cell = *bytes;
        Ok(())
    }

    pub fn conn_send(&mut self, branch: BranchId, conn: ConnId, bytes: &[u8]) -> Result<()> {
        let b = self.branch_mut(branch)?;
        let c = b
            .state
            .connections
            .iter_mut()
            .find(|c| c.id == conn)
            .ok_or_else(|| Error::Invariant(format!("unknown connection {conn}")))?;
        crate::io::stream::send(&mut c.proto, bytes);
        Ok(())
    }

    pub fn conn_deliver(&mut self, branch: BranchId, conn: ConnId) -> Result<(u64, Vec<u8>)> {
        let b = self.branch_mut(branch)?;
        let c = b
            .state
            .connections
            .iter_mut()
            .find(|c| c.id == conn)
            .ok_or_else(|| Error::Invariant(format!("unknown connection {conn}")))?;
        Ok(crate::io::stream::deliver(&mut c.proto))
    }

    /// Resolve a branch to the comparison form: never-touched file-backed
    /// slots read through the branch's file contents, matching the engine's
    /// snapshot resolution.
    pub fn snapshot(&self, branch: BranchId) -> Result<WorkspaceState> {
        let b = self.branch(branch)?;
        let mut out = b.state.clone();
        for p in &mut out.processes {
            for r in &mut p.regions {
                if r.class != MemoryClass::FileBacked {
                    continue;
                }
                let path = r.backing_file.as_deref().expect("file-backed");
                let Some(content) = b.state.files.get(path) else {
                    continue;
                };
                for (slot, cell) in r.pages.iter_mut().enumerate() {
                    if cell.is_none() {
                        let page = (r.backing_page_offset + slot as u64) as usize;
                        let start = page * PAGE_SIZE;
                        if start + PAGE_SIZE <= content.len() {
                            let mut buf = Box::new([0u8; PAGE_SIZE]);
                            buf.copy_from_slice(&content[start..start + PAGE_SIZE]);
                            *cell = Some(buf);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
