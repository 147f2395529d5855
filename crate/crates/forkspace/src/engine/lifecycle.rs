//! Lifecycle operations: freeze/resume, snapshot holders, record, fork,
//! rollback, discard, and the per-branch data-plane ops (page writes,
//! filesystem reads/writes, GUI repaints, connection streams).

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::checkpoint::{self, CheckpointHandle, DumpJob, ImageGui, ImageMeta, ImageProc, ImageVma};
use crate::error::{Error, Result};
use crate::fs::{FsState, ReadStats};
use crate::ids::*;
use crate::io::{restore_connections, PolicyEvent, PortRegistry};
use crate::model::{ConnState, MemoryClass, ProcMeta};
use crate::pagestore::{CopyCause, PageStore, SharedTable, VmaTable};
use crate::process::{capture_metadata, reconstruct_tree, FrozenMeta, ProcessTreeImage};
use crate::security::SecurityProfile;
use crate::{Page, PAGE_SIZE};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;

use super::{
    gui_id_for, Branch, BranchStatus, Core, Engine, EngineEvent, EngineState, GuiBuf, HolderRec,
    HolderState, Proc, Region, VersionNode,
};

/// Work performed during one freeze interval. Everything here is metadata-
/// or VMA-granular; page contents are never copied while the source is
/// stopped, so the totals are independent of workspace memory size.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FreezeReport {
    pub metadata_records: u64,
    pub descriptor_records: u64,
    pub holder_creations: u64,
    pub vma_shares: u64,
    /// CoW-managed page bytes copied inside the interval; always zero.
    pub page_bytes_copied: u64,
}

impl FreezeReport {
    pub fn total_ops(&self) -> u64 {
        self.metadata_records + self.descriptor_records + self.holder_creations + self.vma_shares
    }
}

impl Engine {
    /// Freeze a running branch: no mutation is observable until resume.
    /// Returns the captured hierarchy, descriptors, and opaque state blobs.
    pub fn freeze(&self, branch: BranchId) -> Result<FrozenMeta> {
        let mut state = self.lock();
        let b = state.branch_mut(branch)?;
        match b.status {
            BranchStatus::Running => {}
            BranchStatus::Frozen => return Err(Error::DoubleFreeze(branch)),
            _ => return Err(Error::BranchTerminal(branch)),
        }
        b.status = BranchStatus::Frozen;
        let ns = b.namespace;
        let records: Vec<ProcMeta> = b.procs.values().map(|p| p.meta.clone()).collect();
        let ops = records.len() as u64
            + records.iter().map(|r| r.descriptors.len() as u64).sum::<u64>();
        self.core
            .freeze_ops
            .fetch_add(ops, std::sync::atomic::Ordering::Relaxed);
        let mut meta = FrozenMeta::from_records(branch, ns, records);
        meta.frozen_at_ms = Core::now_ms();
        Ok(meta)
    }

    /// Resume a frozen branch; durable serialization in flight is unaffected.
    pub fn resume(&self, branch: BranchId) -> Result<()> {
        let mut state = self.lock();
        let b = state.branch_mut(branch)?;
        match b.status {
            BranchStatus::Frozen => {
                b.status = BranchStatus::Running;
                Ok(())
            }
            BranchStatus::Running => Err(Error::NotFrozen(branch)),
            _ => Err(Error::BranchTerminal(branch)),
        }
    }

    /// Capture the frozen branch's creation plan (topologically ordered).
    pub fn capture_tree(&self, branch: BranchId) -> Result<ProcessTreeImage> {
        let state = self.lock();
        let b = state.branch(branch)?;
        if b.status != BranchStatus::Frozen {
            return Err(Error::NotFrozen(branch));
        }
        let records: Vec<ProcMeta> = b.procs.values().map(|p| p.meta.clone()).collect();
        Ok(capture_metadata(&FrozenMeta::from_records(
            branch,
            b.namespace,
            records,
        )))
    }

    /// Create one snapshot holder per process of a frozen branch. Holder
    /// views resolve the freeze-instant bytes forever, at zero copy cost.
    pub fn create_snapshot_holders(&self, branch: BranchId) -> Result<Vec<HolderId>> {
        let mut state = self.lock();
        let b = state.branch(branch)?;
        if b.status != BranchStatus::Frozen {
            return Err(Error::NotFrozen(branch));
        }
        let mut holders = Vec::new();
        let mut ops = 0u64;
        let mut new_recs = Vec::new();
        for (pid, proc) in &b.procs {
            let tables: BTreeMap<VmaId, SharedTable> = proc
                .regions
                .iter()
                .map(|(vma, r)| (*vma, Arc::clone(&r.table)))
                .collect();
            ops += 1 + tables.len() as u64;
            new_recs.push((*pid, tables));
        }
        for (pid, tables) in new_recs {
            let id = HolderId(state.next_holder);
            state.next_holder += 1;
            state.holders.insert(
                id,
                HolderRec {
                    local_pid: pid,
                    state: HolderState::Held,
                    tables,
                },
            );
            holders.push(id);
        }
        self.core
            .freeze_ops
            .fetch_add(ops, std::sync::atomic::Ordering::Relaxed);
        Ok(holders)
    }

    pub fn holder_state(&self, holder: HolderId) -> Result<super::HolderState> {
        self.lock()
            .holders
            .get(&holder)
            .map(|h| h.state)
            .ok_or_else(|| Error::Invariant(format!("unknown holder {holder}")))
    }

    /// The process a holder snapshots.
    pub fn holder_process(&self, holder: HolderId) -> Result<LocalPid> {
        self.lock()
            .holders
            .get(&holder)
            .map(|h| h.local_pid)
            .ok_or_else(|| Error::Invariant(format!("unknown holder {holder}")))
    }

    /// Resolve one page through a holder's frozen view.
    pub fn holder_page(&self, holder: HolderId, vma: VmaId, slot: u64) -> Result<Option<Arc<Page>>> {
        let state = self.lock();
        let h = state
            .holders
            .get(&holder)
            .ok_or_else(|| Error::Invariant(format!("unknown holder {holder}")))?;
        let table = h.tables.get(&vma).ok_or(Error::UnknownVma(vma))?;
        if slot as usize >= table.slots.len() {
            return Err(Error::SlotOutOfRange {
                slot,
                len: table.slots.len() as u64,
            });
        }
        Ok(table.slots[slot as usize].map(|p| self.core.pages.read(p)))
    }

    /// Release holders without dumping them; refcounts return to their
    /// pre-create values.
    pub fn reclaim_holders(&self, holders: &[HolderId]) -> Result<()> {
        let mut state = self.lock();
        for id in holders {
            let h = state
                .holders
                .get_mut(id)
                .ok_or_else(|| Error::Invariant(format!("unknown holder {id}")))?;
            let tables = std::mem::take(&mut h.tables);
            h.state = HolderState::Reclaimed;
            for (_, t) in tables {
                self.core.pages.release_table(t);
            }
        }
        Ok(())
    }

    /// Per-VMA copy-on-write share of an anonymous region from a frozen
    /// source process into a destination process of another branch. Both
    /// sides end up write-protected behind shared pages; refcounts rise,
    /// contents are never copied.
    pub fn share_vma_cow(
        &self,
        src_branch: BranchId,
        src_pid: LocalPid,
        dst_branch: BranchId,
        dst_pid: LocalPid,
        vma: VmaId,
    ) -> Result<()> {
        let mut state = self.lock();
        {
            let src = state.branch(src_branch)?;
            if src.status != BranchStatus::Frozen {
                return Err(Error::NotFrozen(src_branch));
            }
            let dst = state.branch(dst_branch)?;
            if src.namespace == dst.namespace {
                return Err(Error::Invariant(
                    "cross-branch share requires distinct namespaces".into(),
                ));
            }
        }
        let src_region = {
            let src = state.branch(src_branch)?;
            let proc = src
                .procs
                .get(&src_pid)
                .ok_or(Error::UnknownProcess(src_pid.0, src_branch))?;
            let r = proc.regions.get(&vma).ok_or(Error::UnknownVma(vma))?;
            if r.class != MemoryClass::Anonymous {
                return Err(Error::NotAnonymous(vma));
            }
            (
                r.class,
                r.start_page,
                r.len_pages,
                Arc::clone(&r.table),
            )
        };
        // Eager per-page accounting for the standalone op: the destination
        // gets its own table object referencing the same pages.
        let cloned = VmaTable {
            slots: src_region.3.slots.clone(),
            present: src_region.3.present,
        };
        for p in cloned.slots.iter().flatten() {
            self.core.pages.incref(*p);
        }
        self.core
            .freeze_ops
            .fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let dst = state.branch_mut(dst_branch)?;
        let proc = dst
            .procs
            .get_mut(&dst_pid)
            .ok_or(Error::UnknownProcess(dst_pid.0, dst_branch))?;
        if let Some(old) = proc.regions.remove(&vma) {
            self.core.pages.release_table(old.table);
        }
        proc.regions.insert(
            vma,
            Region {
                class: src_region.0,
                start_page: src_region.1,
                len_pages: src_region.2,
                backing_file: None,
                backing_page_offset: 0,
                table: Arc::new(cloned),
            },
        );
        Ok(())
    }

    /// Store refcount of the page mapped at a slot, if materialized.
    pub fn page_refcount(
        &self,
        branch: BranchId,
        pid: LocalPid,
        vma: VmaId,
        slot: u64,
    ) -> Result<Option<u32>> {
        let state = self.lock();
        let b = state.branch(branch)?;
        let r = b
            .procs
            .get(&pid)
            .ok_or(Error::UnknownProcess(pid.0, branch))?
            .regions
            .get(&vma)
            .ok_or(Error::UnknownVma(vma))?;
        Ok(r.table
            .slots
            .get(slot as usize)
            .copied()
            .flatten()
            .map(|p| self.core.pages.refs(p)))
    }

    /// Whether a slot is write-protected: its table is shared or its page
    /// is referenced by more than one owner.
    pub fn is_write_protected(
        &self,
        branch: BranchId,
        pid: LocalPid,
        vma: VmaId,
        slot: u64,
    ) -> Result<bool> {
        let state = self.lock();
        let b = state.branch(branch)?;
        let r = b
            .procs
            .get(&pid)
            .ok_or(Error::UnknownProcess(pid.0, branch))?
            .regions
            .get(&vma)
            .ok_or(Error::UnknownVma(vma))?;
        if Arc::strong_count(&r.table) > 1 {
            return Ok(true);
        }
        Ok(match r.table.slots.get(slot as usize) {
            Some(Some(p)) => self.core.pages.refs(*p) > 1,
            _ => false,
        })
    }

    /// Record a version of the branch: freeze, capture metadata, snapshot
    /// the filesystem, seal the page-cache layer, create snapshot holders,
    /// resume, and hand durable serialization to the background daemon.
    /// The branch resumes before the checkpoint is durable.
    pub fn record_version(&self, branch: BranchId) -> Result<VersionId> {
        let job = {
            let mut state = self.lock();
            let state = &mut *state;
            let b = state
                .branches
                .get_mut(&branch)
                .ok_or(Error::UnknownBranch(branch))?;
            match b.status {
                BranchStatus::Running => {}
                BranchStatus::Frozen => return Err(Error::DoubleFreeze(branch)),
                _ => return Err(Error::BranchTerminal(branch)),
            }
            b.status = BranchStatus::Frozen;

            let mut report = FreezeReport::default();
            report.metadata_records = b.procs.len() as u64;
            report.descriptor_records = b
                .procs
                .values()
                .map(|p| p.meta.descriptors.len() as u64)
                .sum();

            // Frozen metadata capture.
            let processes: Vec<ImageProc> = b
                .procs
                .values()
                .map(|p| {
                    let mut meta = p.meta.clone();
                    meta.host_pid = 0;
                    ImageProc {
                        meta,
                        vmas: p
                            .regions
                            .iter()
                            .map(|(vma, r)| ImageVma {
                                vma_id: *vma,
                                class: r.class,
                                start_page: r.start_page,
                                len_pages: r.len_pages,
                                backing_file: r.backing_file.clone(),
                                backing_page_offset: r.backing_page_offset,
                            })
                            .collect(),
                    }
                })
                .collect();
            let connections: Vec<ConnState> = b.conns.values().cloned().collect();
            // GUI buffers are branch-local: captured eagerly (never CoW
            // shared, never refcounted above 1).
            let gui: Vec<ImageGui> = b
                .gui
                .iter()
                .map(|g| {
                    let mut bytes = Vec::with_capacity(g.pages.len() * PAGE_SIZE);
                    for p in &g.pages {
                        bytes.extend_from_slice(&self.core.pages.read(*p)[..]);
                    }
                    ImageGui {
                        id: g.id,
                        mutation_rate_hint: g.mutation_rate_hint,
                        pages: g.pages.len() as u64,
                        content_b64: B64.encode(&bytes),
                    }
                })
                .collect();

            // Filesystem snapshot + sealed layer at the branch point.
            let fs_version = state.fs.snapshot_version(b.view.fs_version);
            let layer_head = state.fs.seal_layer(&mut b.view, fs_version);
            state.fs.retain_layer(layer_head); // version node's reference

            // Snapshot holders: per-process, per-VMA table shares.
            let mut holder_ids = Vec::new();
            let mut holder_recs = Vec::new();
            for (pid, proc) in &b.procs {
                let tables: BTreeMap<VmaId, SharedTable> = proc
                    .regions
                    .iter()
                    .map(|(vma, r)| (*vma, Arc::clone(&r.table)))
                    .collect();
                report.holder_creations += 1;
                report.vma_shares += tables.len() as u64;
                holder_recs.push((*pid, tables));
            }

            let present_pages = b.present_pages();
            let dirty = std::mem::take(&mut b.dirty);
            let parent_image = b.base_image;
            let parent_version = b.current_version;

            let version_id = VersionId(state.next_version);
            state.next_version += 1;
            let image_id = ImageId(state.next_image);
            state.next_image += 1;

            let meta = Arc::new(ImageMeta {
                format: checkpoint::IMAGE_FORMAT,
                image: image_id,
                parent: parent_image,
                version: version_id,
                created_at_ms: Core::now_ms(),
                processes,
                connections,
                gui,
            });

            // Job tables are fresh Arc clones, released by the completion
            // path under this same lock.
            let mut job_tables = BTreeMap::new();
            for (pid, tables) in &holder_recs {
                job_tables.insert(
                    *pid,
                    tables
                        .iter()
                        .map(|(vma, t)| (*vma, Arc::clone(t)))
                        .collect::<BTreeMap<_, _>>(),
                );
            }
            for (pid, tables) in holder_recs {
                let id = HolderId(state.next_holder);
                state.next_holder += 1;
                state.holders.insert(
                    id,
                    HolderRec {
                        local_pid: pid,
                        state: HolderState::Held,
                        tables,
                    },
                );
                holder_ids.push(id);
            }

            self.core
                .freeze_ops
                .fetch_add(report.total_ops(), std::sync::atomic::Ordering::Relaxed);

            // Warm tables for zero-copy forks from this version; an extra
            // set of Arc clones alongside the holders'.
            let mut live_tables = BTreeMap::new();
            for (pid, tables) in &job_tables {
                live_tables.insert(
                    *pid,
                    tables
                        .iter()
                        .map(|(vma, t)| (*vma, Arc::clone(t)))
                        .collect::<BTreeMap<_, _>>(),
                );
            }
            // The predecessor version this branch created goes cold now;
            // forks from it fall back to the durable image.
            if let Some(pv) = parent_version {
                let release = state
                    .versions
                    .get(&pv)
                    .map(|node| node.created_by == branch)
                    .unwrap_or(false);
                if release {
                    if let Some(tables) = state.versions.get_mut(&pv).unwrap().live_tables.take() {
                        for (_, vmas) in tables {
                            for (_, t) in vmas {
                                self.core.pages.release_table(t);
                            }
                        }
                    }
                }
            }

            let handle = CheckpointHandle::new();
            state.versions.insert(
                version_id,
                VersionNode {
                    id: version_id,
                    parent: parent_version,
                    created_by: branch,
                    fs_version,
                    layer_head: Some(layer_head),
                    image: image_id,
                    handle: handle.clone(),
                    created_at_ms: meta.created_at_ms,
                    meta: Arc::clone(&meta),
                    holder_ids,
                    live_tables: Some(live_tables),
                    present_pages,
                    freeze_report: report,
                },
            );

            let b = state.branches.get_mut(&branch).unwrap();
            b.current_version = Some(version_id);
            b.base_image = Some(image_id);
            b.status = BranchStatus::Running; // resume

            DumpJob {
                image: image_id,
                version: version_id,
                dir: checkpoint::image_dir(&self.core.images_root(), image_id),
                meta: (*meta).clone(),
                tables: job_tables,
                dirty: parent_image.is_some().then_some(dirty),
                handle,
            }
        };
        let version = job.version;
        self.daemon.submit(job);
        Ok(version)
    }

    pub fn version_freeze_report(&self, version: VersionId) -> Result<FreezeReport> {
        Ok(self.lock().version(version)?.freeze_report)
    }

    pub fn version_present_pages(&self, version: VersionId) -> Result<u64> {
        Ok(self.lock().version(version)?.present_pages)
    }

    /// Fork `n` runnable branches from a version. Warm versions (holders
    /// still held) share every page copy-on-write with zero content copies;
    /// versions whose holders were reclaimed are rebuilt from the durable
    /// image chain once and shared across the new branches.
    pub fn fork(
        &self,
        version: VersionId,
        n: usize,
        profile: SecurityProfile,
    ) -> Result<Vec<BranchId>> {
        if n == 0 {
            return Err(Error::InvalidSpec("fork of zero branches".into()));
        }
        let mut state = self.lock();
        let state = &mut *state;
        if state.live_branch_count() + n > self.core.config.branch_cap {
            return Err(Error::BranchCapExceeded {
                requested: n,
                cap: self.core.config.branch_cap,
            });
        }
        let v = state
            .versions
            .get(&version)
            .ok_or(Error::UnknownVersion(version))?;

        let warm = v.live_tables.is_some();
        let tables_source: BTreeMap<LocalPid, BTreeMap<VmaId, SharedTable>> = if warm {
            let mut out = BTreeMap::new();
            for (pid, tables) in v.live_tables.as_ref().unwrap() {
                out.insert(
                    *pid,
                    tables
                        .iter()
                        .map(|(vma, t)| (*vma, Arc::clone(t)))
                        .collect(),
                );
            }
            out
        } else {
            // Cold fork: materialize the chain once, share across branches.
            let (meta, flat) =
                checkpoint::flatten_chain(&self.core.images_root(), v.image)?;
            build_tables_from_flat(&meta, &flat, &self.core.pages, CopyCause::Restore)
        };

        let meta = Arc::clone(&v.meta);
        let fs_version = v.fs_version;
        let layer_head = v.layer_head;
        let image = v.image;

        let gui_payload = decode_gui(&meta.gui)?;

        let mut out = Vec::with_capacity(n);
        let mut all_events = Vec::new();
        for _ in 0..n {
            let branch_id = BranchId(state.next_branch);
            state.next_branch += 1;
            let ns = NamespaceId(state.next_namespace);
            state.next_namespace += 1;
            let (id, events) = build_branch(
                state,
                &self.core,
                &meta,
                &tables_source,
                false,
                &gui_payload,
                fs_version,
                layer_head,
                version,
                image,
                profile.clone(),
                (branch_id, ns),
                false,
            )?;
            all_events.extend(events);
            out.push(id);
        }
        // Temporary cold-fork master tables are released here; branch
        // clones keep the shared objects alive.
        if !warm {
            for (_, vmas) in tables_source {
                for (_, t) in vmas {
                    self.core.pages.release_table(t);
                }
            }
        }
        for ev in &all_events {
            state.policy_events.push(ev.clone());
        }
        self.append_policy_events(&all_events);
        Ok(out)
    }

    /// Append one line to a branch's JSON-lines audit log.
    pub(crate) fn append_branch_log(&self, branch: BranchId, line: &str) {
        use std::io::Write;
        let path = self
            .core
            .data_dir
            .join(format!("audit-branch-{}.jsonl", branch.0));
        if let Ok(mut f) = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
        {
            let _ = writeln!(f, "{line}");
        }
    }

    pub(crate) fn append_policy_events(&self, events: &[PolicyEvent]) {
        for ev in events {
            let branch = match ev {
                PolicyEvent::SeveredExternal { branch, .. }
                | PolicyEvent::EgressDenied { branch, .. }
                | PolicyEvent::EgressQueued { branch, .. }
                | PolicyEvent::EgressReleased { branch, .. } => *branch,
            };
            if let Ok(line) = serde_json::to_string(ev) {
                self.append_branch_log(branch, &line);
            }
        }
    }

    /// Return a branch to an earlier recorded version of its lineage. Waits
    /// for the checkpoint to become durable, then restores process, memory,
    /// connection, GUI, and filesystem state exactly as recorded. No other
    /// branch is affected.
    pub fn rollback(&self, branch: BranchId, version: VersionId) -> Result<()> {
        let (handle, image) = {
            let state = self.lock();
            let b = state.branch(branch)?;
            b.require_running()?;
            if !state.lineage(branch).contains(&version) {
                return Err(Error::NotInLineage(version, branch));
            }
            let v = state.version(version)?;
            (v.handle.clone(), v.image)
        };
        handle.wait_durable(image)?;

        let mut state = self.lock();
        let state = &mut *state;
        let b = state
            .branches
            .get_mut(&branch)
            .ok_or(Error::UnknownBranch(branch))?;
        b.require_running()?;
        let v = state
            .versions
            .get(&version)
            .ok_or(Error::UnknownVersion(version))?;
        let meta = Arc::clone(&v.meta);
        let fs_version = v.fs_version;
        let layer_head = v.layer_head;
        let v_image = v.image;

        let (meta_disk, flat) = checkpoint::flatten_chain(&self.core.images_root(), v_image)?;
        debug_assert_eq!(meta_disk.image, meta.image);

        // Tear down the branch's live state.
        let ns = b.namespace;
        let old_procs = std::mem::take(&mut b.procs);
        for (_, proc) in old_procs {
            for (_, r) in proc.regions {
                self.core.pages.release_table(r.table);
            }
        }
        for g in b.gui.drain(..) {
            for p in g.pages {
                self.core.pages.decref(p);
            }
        }
        b.conns.clear();
        state.ports.release_namespace(ns);
        let branch_fs = state.fs.snapshot_version(fs_version);
        let fresh_view = state.fs.new_view(branch_fs, layer_head);
        let old_view = std::mem::replace(&mut b.view, fresh_view);
        state.fs.release_view(old_view, &self.core.pages);

        // Rebuild from the flattened image chain.
        let tables = build_tables_from_flat(&meta, &flat, &self.core.pages, CopyCause::Restore);
        let plan = plan_from_meta(&meta);
        let recs = reconstruct_tree(&plan, ns, || self.core.alloc_host_pid())?;
        b.procs = assemble_procs(&meta, recs, &tables);
        for c in &meta.connections {
            for ep in [&c.local, &c.remote] {
                if matches!(ep.host, crate::model::EndpointHost::Process { .. }) {
                    state.ports.bind(ns, ep.port, c.id)?;
                }
            }
            b.conns.insert(c.id, c.clone());
        }
        let gui_payload = decode_gui(&meta.gui)?;
        b.gui = gui_payload
            .iter()
            .map(|(id, hint, bytes)| GuiBuf {
                id: *id,
                pages: alloc_gui_pages(&self.core.pages, bytes, CopyCause::Restore),
                mutation_rate_hint: *hint,
            })
            .collect();
        b.dirty.clear();
        b.current_version = Some(version);
        b.base_image = Some(v_image);
        Ok(())
    }

    /// Discard a branch: all branch-private pages, cache entries, layers,
    /// and namespace ids are reclaimed; shared refcounts drop back.
    pub fn discard(&self, branch: BranchId) -> Result<()> {
        let mut state = self.lock();
        let state = &mut *state;
        let b = state
            .branches
            .get_mut(&branch)
            .ok_or(Error::UnknownBranch(branch))?;
        if b.status.is_terminal() {
            return Err(Error::BranchTerminal(branch));
        }
        if branch == state.human {
            return Err(Error::Invariant(
                "the user-visible workspace cannot be discarded".into(),
            ));
        }
        release_branch_state(b, &mut state.fs, &mut state.ports, &self.core.pages);
        b.status = BranchStatus::Discarded;
        state.events.push(EngineEvent::BranchDiscarded { branch });
        Ok(())
    }

    /// Write one page of a memory region. Shared pages break copy-on-write;
    /// sole-owner pages are written in place. The write lands in the dirty
    /// log either way.
    pub fn write_page(
        &self,
        branch: BranchId,
        pid: LocalPid,
        vma: VmaId,
        slot: u64,
        bytes: &Page,
    ) -> Result<()> {
        let mut state = self.lock();
        let b = state.branch_mut(branch)?;
        b.require_running()?;
        let proc = b
            .procs
            .get_mut(&pid)
            .ok_or(Error::UnknownProcess(pid.0, branch))?;
        let region = proc.regions.get_mut(&vma).ok_or(Error::UnknownVma(vma))?;
        if slot >= region.len_pages {
            return Err(Error::SlotOutOfRange {
                slot,
                len: region.len_pages,
            });
        }
        self.core.pages.own_table(&mut region.table);
        let table = Arc::get_mut(&mut region.table).expect("table owned after divergence");
        match table.slots[slot as usize] {
            Some(p) if self.core.pages.refs(p) > 1 => {
                // CoW break: private page for the writer, the other owners
                // keep reading the original bytes.
                let fresh = self.core.pages.alloc_copy(bytes, CopyCause::CowBreak);
                self.core.pages.decref(p);
                table.slots[slot as usize] = Some(fresh);
            }
            Some(p) => {
                self.core
                    .pages
                    .write_in_place(p, |pg| pg.copy_from_slice(bytes));
            }
            None => {
                table.slots[slot as usize] = Some(self.core.pages.alloc(Arc::new(*bytes)));
                table.present += 1;
            }
        }
        b.dirty.insert((pid, vma, slot));
        Ok(())
    }

    /// Read one page of a memory region. Never-touched anonymous and shared
    /// slots read as zeroes; never-touched file-backed slots read through
    /// the branch's filesystem view.
    pub fn read_page(
        &self,
        branch: BranchId,
        pid: LocalPid,
        vma: VmaId,
        slot: u64,
    ) -> Result<Arc<Page>> {
        let mut state = self.lock();
        let state = &mut *state;
        let b = state
            .branches
            .get_mut(&branch)
            .ok_or(Error::UnknownBranch(branch))?;
        let proc = b
            .procs
            .get(&pid)
            .ok_or(Error::UnknownProcess(pid.0, branch))?;
        let region = proc.regions.get(&vma).ok_or(Error::UnknownVma(vma))?;
        if slot >= region.len_pages {
            return Err(Error::SlotOutOfRange {
                slot,
                len: region.len_pages,
            });
        }
        match region.table.slots[slot as usize] {
            Some(p) => Ok(self.core.pages.read(p)),
            None => match region.class {
                MemoryClass::FileBacked => {
                    let path = region.backing_file.clone().expect("file-backed");
                    let page = region.backing_page_offset + slot;
                    let (bytes, _) = state.fs.read(&mut b.view, &self.core.pages, &path, page)?;
                    Ok(bytes)
                }
                _ => Ok(super::zeroed_page()),
            },
        }
    }

    /// Read a file page through the branch's view (cache, layer chain,
    /// storage, in that order).
    pub fn fs_read(
        &self,
        branch: BranchId,
        path: &str,
        page: u64,
    ) -> Result<(Arc<Page>, ReadStats)> {
        let mut state = self.lock();
        let state = &mut *state;
        let b = state
            .branches
            .get_mut(&branch)
            .ok_or(Error::UnknownBranch(branch))?;
        b.require_running()?;
        state.fs.read(&mut b.view, &self.core.pages, path, page)
    }

    pub fn fs_write(&self, branch: BranchId, path: &str, page: u64, bytes: &Page) -> Result<()> {
        let mut state = self.lock();
        let state = &mut *state;
        let b = state
            .branches
            .get_mut(&branch)
            .ok_or(Error::UnknownBranch(branch))?;
        b.require_running()?;
        state.fs.write(&mut b.view, &self.core.pages, path, page, bytes)
    }

    pub fn fs_paths(&self, branch: BranchId) -> Result<Vec<String>> {
        let state = self.lock();
        let b = state.branch(branch)?;
        Ok(state.fs.version_paths(b.view.fs_version))
    }

    pub fn fs_file_pages(&self, branch: BranchId, path: &str) -> Result<u64> {
        let state = self.lock();
        let b = state.branch(branch)?;
        state
            .fs
            .file_pages(b.view.fs_version, path)
            .ok_or_else(|| Error::MissingPath(path.to_string()))
    }

    /// Repaint one GUI buffer page. GUI pages are branch-local, always
    /// sole-owner, so this never takes a CoW fault.
    pub fn gui_write(&self, branch: BranchId, buffer: usize, page: u64, bytes: &Page) -> Result<()> {
        let mut state = self.lock();
        let b = state.branch_mut(branch)?;
        b.require_running()?;
        let buf = b
            .gui
            .get_mut(buffer)
            .ok_or_else(|| Error::Invariant(format!("no gui buffer {buffer}")))?;
        let pid = *buf
            .pages
            .get(page as usize)
            .ok_or(Error::SlotOutOfRange {
                slot: page,
                len: buf.pages.len() as u64,
            })?;
        debug_assert_eq!(self.core.pages.refs(pid), 1, "gui pages never shared");
        self.core
            .pages
            .write_in_place(pid, |pg| pg.copy_from_slice(bytes));
        Ok(())
    }

    pub fn gui_buffer_count(&self, branch: BranchId) -> Result<usize> {
        Ok(self.lock().branch(branch)?.gui.len())
    }

    /// Queue bytes on a connection's send side.
    pub fn conn_send(&self, branch: BranchId, conn: ConnId, bytes: &[u8]) -> Result<u64> {
        let mut state = self.lock();
        let b = state.branch_mut(branch)?;
        b.require_running()?;
        let c = b
            .conns
            .get_mut(&conn)
            .ok_or_else(|| Error::Invariant(format!("unknown connection {conn}")))?;
        crate::io::stream::send(&mut c.proto, bytes);
        Ok(c.proto.next_send_seq)
    }

    /// Drain a connection's in-flight bytes to the receiver side.
    pub fn conn_deliver(&self, branch: BranchId, conn: ConnId) -> Result<(u64, Vec<u8>)> {
        let mut state = self.lock();
        let b = state.branch_mut(branch)?;
        b.require_running()?;
        let c = b
            .conns
            .get_mut(&conn)
            .ok_or_else(|| Error::Invariant(format!("unknown connection {conn}")))?;
        Ok(crate::io::stream::deliver(&mut c.proto))
    }

    /// Phase B of strategy clones: assemble branches in slot order with
    /// pre-allocated ids, under one coordinator lock acquisition.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble_clones(
        &self,
        meta: &ImageMeta,
        cow_source: Option<&BTreeMap<LocalPid, BTreeMap<VmaId, SharedTable>>>,
        prebuilt: &[Option<BTreeMap<LocalPid, BTreeMap<VmaId, SharedTable>>>],
        fs_version: crate::ids::FsVersionId,
        layer_head: Option<crate::ids::LayerId>,
        version: VersionId,
        image: ImageId,
        profile: SecurityProfile,
        ids: &[(BranchId, NamespaceId)],
        deep_copy_fs: bool,
    ) -> Result<Vec<BranchId>> {
        let gui_payload = decode_gui(&meta.gui)?;
        let mut state = self.lock();
        let state = &mut *state;
        let mut out = Vec::with_capacity(ids.len());
        let mut all_events = Vec::new();
        for (slot, id_pair) in ids.iter().enumerate() {
            let (source, is_prebuilt) = match &prebuilt[slot] {
                Some(t) => (t, true),
                None => (
                    cow_source.ok_or_else(|| {
                        Error::Invariant("cow clone without a table source".into())
                    })?,
                    false,
                ),
            };
            let (id, events) = build_branch(
                state,
                &self.core,
                meta,
                source,
                is_prebuilt,
                &gui_payload,
                fs_version,
                layer_head,
                version,
                image,
                profile.clone(),
                *id_pair,
                deep_copy_fs,
            )?;
            all_events.extend(events);
            out.push(id);
        }
        for ev in &all_events {
            state.policy_events.push(ev.clone());
        }
        self.append_policy_events(&all_events);
        Ok(out)
    }

    pub fn lineage_of(&self, branch: BranchId) -> Vec<VersionId> {
        self.lock().lineage(branch)
    }
}

/// Release all branch-private state: region tables, GUI pages, connection
/// port bindings, and the filesystem view.
pub(crate) fn release_branch_state(
    b: &mut Branch,
    fs: &mut FsState,
    ports: &mut PortRegistry,
    pages: &PageStore,
) {
    let old_procs = std::mem::take(&mut b.procs);
    for (_, proc) in old_procs {
        for (_, r) in proc.regions {
            pages.release_table(r.table);
        }
    }
    for g in b.gui.drain(..) {
        for p in g.pages {
            pages.decref(p);
        }
    }
    b.conns.clear();
    ports.release_namespace(b.namespace);
    // Swap in a dead view; the branch is terminal afterwards.
    let dead = FsViewPlaceholder::take(fs, b);
    fs.release_view(dead, pages);
    b.dirty.clear();
}

/// Helper to swap a terminal branch's view out for release. The
/// placeholder view points at a fresh empty version so the Branch struct
/// stays well-formed.
struct FsViewPlaceholder;

impl FsViewPlaceholder {
    fn take(fs: &mut FsState, b: &mut Branch) -> crate::fs::FsView {
        let empty = fs.create_version(&BTreeMap::new());
        let placeholder = fs.new_view(empty, None);
        std::mem::replace(&mut b.view, placeholder)
    }
}

pub(crate) fn plan_from_meta(meta: &ImageMeta) -> ProcessTreeImage {
    let records: Vec<ProcMeta> = meta.processes.iter().map(|p| p.meta.clone()).collect();
    capture_metadata(&FrozenMeta::from_records(
        BranchId(0),
        NamespaceId(0),
        records,
    ))
}

/// Build per-process region tables from a flattened image chain.
pub(crate) fn build_tables_from_flat(
    meta: &ImageMeta,
    flat: &BTreeMap<(LocalPid, VmaId, u64), crate::PageBuf>,
    pages: &PageStore,
    cause: CopyCause,
) -> BTreeMap<LocalPid, BTreeMap<VmaId, SharedTable>> {
    let mut out = BTreeMap::new();
    for ip in &meta.processes {
        let pid = ip.meta.local_pid;
        let mut vmas = BTreeMap::new();
        for shape in &ip.vmas {
            let mut slots: Vec<Option<PageId>> = vec![None; shape.len_pages as usize];
            let lo = (pid, shape.vma_id, 0u64);
            let hi = (pid, shape.vma_id, u64::MAX);
            let mut targets = Vec::new();
            let mut contents: Vec<Arc<crate::Page>> = Vec::new();
            for ((_, _, slot), content) in flat.range(lo..=hi) {
                targets.push(*slot as usize);
                contents.push(Arc::new(**content));
            }
            for (slot, id) in targets
                .into_iter()
                .zip(pages.alloc_batch(contents, Some(cause)))
            {
                slots[slot] = Some(id);
            }
            vmas.insert(shape.vma_id, Arc::new(VmaTable::from_slots(slots)));
        }
        out.insert(pid, vmas);
    }
    out
}

pub(crate) fn decode_gui(gui: &[ImageGui]) -> Result<Vec<(GuiId, u32, Vec<u8>)>> {
    gui.iter()
        .map(|g| {
            let bytes = B64
                .decode(&g.content_b64)
                .map_err(|e| Error::Invariant(format!("gui payload: {e}")))?;
            Ok((g.id, g.mutation_rate_hint, bytes))
        })
        .collect()
}

pub(crate) fn alloc_gui_pages(pages: &PageStore, bytes: &[u8], cause: CopyCause) -> Vec<PageId> {
    bytes
        .chunks_exact(PAGE_SIZE)
        .map(|chunk| {
            let mut page = [0u8; PAGE_SIZE];
            page.copy_from_slice(chunk);
            pages.alloc_copy(&page, cause)
        })
        .collect()
}

/// Construct one branch from a version's captured metadata and table
/// source. With `prebuilt` tables every class is taken as-is (eager
/// restores build private tables beforehand); otherwise anonymous and
/// file-backed-private tables are shared copy-on-write, shared-memory
/// segments are reconstructed as independent per-branch segments, and GUI
/// buffers become fresh branch-local copies.
#[allow(clippy::too_many_arguments)]
pub(crate) fn build_branch(
    state: &mut EngineState,
    core: &Core,
    meta: &ImageMeta,
    tables_source: &BTreeMap<LocalPid, BTreeMap<VmaId, SharedTable>>,
    prebuilt: bool,
    gui_payload: &[(GuiId, u32, Vec<u8>)],
    fs_version: FsVersionId,
    layer_head: Option<LayerId>,
    version: VersionId,
    image: ImageId,
    profile: SecurityProfile,
    ids: (BranchId, NamespaceId),
    deep_copy_fs: bool,
) -> Result<(BranchId, Vec<PolicyEvent>)> {
    let (branch_id, ns) = ids;

    // Reconstruct the process tree inside the fresh namespace: recorded
    // local pids, fresh host pids.
    let plan = plan_from_meta(meta);
    let recs = reconstruct_tree(&plan, ns, || core.alloc_host_pid())?;
    let mut tables = BTreeMap::new();
    for ip in &meta.processes {
        let pid = ip.meta.local_pid;
        let src = tables_source
            .get(&pid)
            .ok_or_else(|| Error::Invariant(format!("no table source for pid {pid}")))?;
        let mut vmas: BTreeMap<VmaId, SharedTable> = BTreeMap::new();
        for shape in &ip.vmas {
            let src_table = src
                .get(&shape.vma_id)
                .ok_or_else(|| Error::Invariant(format!("no table for vma {}", shape.vma_id)))?;
            let table = if prebuilt {
                Arc::clone(src_table)
            } else {
                match shape.class {
                    // Shareable classes: copy-on-write, zero page copies.
                    MemoryClass::Anonymous | MemoryClass::FileBacked => Arc::clone(src_table),
                    // POSIX shared segments are rebuilt as independent
                    // per-branch segments.
                    MemoryClass::Shared => {
                        let mut slots: Vec<Option<PageId>> =
                            Vec::with_capacity(src_table.slots.len());
                        for s in &src_table.slots {
                            match s {
                                Some(p) => slots.push(Some(
                                    core.pages
                                        .alloc_copy(&core.pages.read(*p), CopyCause::BranchLocal),
                                )),
                                None => slots.push(None),
                            }
                        }
                        Arc::new(VmaTable::from_slots(slots))
                    }
                }
            };
            vmas.insert(shape.vma_id, table);
        }
        tables.insert(pid, vmas);
    }

    let procs = assemble_procs(meta, recs, &tables);
    let pids: BTreeSet<LocalPid> = procs.keys().copied().collect();
    let (conns, events) =
        restore_connections(&meta.connections, &pids, branch_id, ns, &mut state.ports)?;

    let gui = gui_payload
        .iter()
        .enumerate()
        .map(|(i, (_, hint, bytes))| GuiBuf {
            id: gui_id_for(branch_id, i),
            pages: alloc_gui_pages(&core.pages, bytes, CopyCause::BranchLocal),
            mutation_rate_hint: *hint,
        })
        .collect();

    // An eager whole-machine clone gets a fully independent filesystem: a
    // deep extent copy and no shared cache layers.
    let (branch_fs, head) = if deep_copy_fs {
        (state.fs.deep_copy_version(fs_version), None)
    } else {
        (state.fs.snapshot_version(fs_version), layer_head)
    };
    let view = state.fs.new_view(branch_fs, head);

    state.branches.insert(
        branch_id,
        Branch {
            id: branch_id,
            status: BranchStatus::Running,
            namespace: ns,
            profile,
            egress: core.config.egress_policy,
            current_version: Some(version),
            base_image: Some(image),
            procs,
            conns: conns.into_iter().map(|c| (c.id, c)).collect(),
            gui,
            view,
            dirty: BTreeSet::new(),
            outbox: Vec::new(),
        },
    );
    Ok((branch_id, events))
}

pub(crate) fn assemble_procs(
    meta: &ImageMeta,
    recs: Vec<ProcMeta>,
    tables: &BTreeMap<LocalPid, BTreeMap<VmaId, SharedTable>>,
) -> BTreeMap<LocalPid, Proc> {
    let mut procs = BTreeMap::new();
    for rec in recs {
        let pid = rec.local_pid;
        let ip = meta
            .processes
            .iter()
            .find(|p| p.meta.local_pid == pid)
            .expect("plan pid exists");
        let regions = ip
            .vmas
            .iter()
            .map(|shape| {
                (
                    shape.vma_id,
                    Region {
                        class: shape.class,
                        start_page: shape.start_page,
                        len_pages: shape.len_pages,
                        backing_file: shape.backing_file.clone(),
                        backing_page_offset: shape.backing_page_offset,
                        table: tables[&pid][&shape.vma_id].clone(),
                    },
                )
            })
            .collect();
        procs.insert(pid, Proc { meta: rec, regions });
    }
    procs
}
