//! The engine: owns the page store, filesystem state, version tree, and
//! branch registry, and serializes lifecycle operations through a single
//! coordinator lock. Durable checkpointing runs on the background dump
//! daemon and never blocks lifecycle operations; the daemon's completion
//! path re-enters the coordinator lock so table refcount accounting stays
//! serialized with forks.

mod commit;
mod lifecycle;

pub use commit::{Approver, MergePolicy, MergeReport, MergeRule};
pub use lifecycle::FreezeReport;
pub(crate) use lifecycle::build_tables_from_flat;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use crate::checkpoint::{CheckpointHandle, CheckpointStatus, DumpDaemon, DumpOutcome, ImageMeta};
use crate::error::{Error, Result};
use crate::fs::{FsState, FsView};
use crate::ids::*;
use crate::io::{EgressPolicy, OutboxEntry, PolicyEvent, PortRegistry};
use crate::model::{
    build_workspace, ConnState, GuiState, MemoryClass, ProcMeta, ProcessState, RegionState,
    WorkspaceSpec, WorkspaceState,
};
use crate::pagestore::{PageStore, SharedTable, VmaTable};
use crate::security::{AuditLog, PathPattern, SecurityProfile};
use crate::strategy::CostModel;
use crate::{Page, PageBuf, PAGE_SIZE};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Root for checkpoint images and audit logs. A scratch directory under
    /// the system temp dir is created (and removed on drop) when unset.
    pub data_dir: Option<PathBuf>,
    /// Cap on simultaneously live branches.
    pub branch_cap: usize,
    /// Egress policy attached to forked branches.
    pub egress_policy: EgressPolicy,
    pub cost_model: CostModel,
    /// Modeled latency of one planning/grounding/judging call in a trace.
    pub model_call_ms: f64,
    /// Path patterns whose merge conflicts always require approval.
    pub sensitive_paths: Vec<PathPattern>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            data_dir: None,
            branch_cap: 64,
            egress_policy: EgressPolicy::DelayedCommit,
            cost_model: CostModel::default(),
            model_call_ms: 2000.0,
            sensitive_paths: vec![
                PathPattern("/home/*/.ssh".into()),
                PathPattern("/home/*/.config/credentials".into()),
                PathPattern("/etc/secrets".into()),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchStatus {
    Running,
    Frozen,
    Discarded,
    Promoted,
}

impl BranchStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, BranchStatus::Discarded | BranchStatus::Promoted)
    }
}

/// One memory region of a live process. The table is shared (`Arc`) with
/// holders and sibling branches until the first write diverges it.
pub(crate) struct Region {
    pub class: MemoryClass,
    pub start_page: u64,
    pub len_pages: u64,
    pub backing_file: Option<String>,
    pub backing_page_offset: u64,
    pub table: SharedTable,
}

pub(crate) struct Proc {
    pub meta: ProcMeta,
    pub regions: BTreeMap<VmaId, Region>,
}

pub(crate) struct GuiBuf {
    pub id: GuiId,
    pub pages: Vec<PageId>,
    pub mutation_rate_hint: u32,
}

pub(crate) struct Branch {
    pub id: BranchId,
    pub status: BranchStatus,
    pub namespace: NamespaceId,
    pub profile: SecurityProfile,
    pub egress: EgressPolicy,
    pub current_version: Option<VersionId>,
    /// Parent image for the next incremental checkpoint.
    pub base_image: Option<ImageId>,
    pub procs: BTreeMap<LocalPid, Proc>,
    pub conns: BTreeMap<ConnId, ConnState>,
    pub gui: Vec<GuiBuf>,
    pub view: FsView,
    pub dirty: BTreeSet<(LocalPid, VmaId, u64)>,
    pub outbox: Vec<OutboxEntry>,
}

impl Branch {
    pub(crate) fn require_running(&self) -> Result<()> {
        match self.status {
            BranchStatus::Running => Ok(()),
            BranchStatus::Frozen => Err(Error::NotRunning(self.id)),
            _ => Err(Error::BranchTerminal(self.id)),
        }
    }

    pub(crate) fn present_pages(&self) -> u64 {
        self.procs
            .values()
            .flat_map(|p| p.regions.values())
            .map(|r| r.table.present)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HolderState {
    Held,
    Dumped,
    Reclaimed,
}

/// Per-process snapshot holder: a frozen view of the process's page tables
/// at zero copy cost. Immutable by construction — shared pages are never
/// mutated in place.
pub(crate) struct HolderRec {
    pub local_pid: LocalPid,
    pub state: HolderState,
    pub tables: BTreeMap<VmaId, SharedTable>,
}

pub(crate) struct VersionNode {
    pub id: VersionId,
    pub parent: Option<VersionId>,
    pub created_by: BranchId,
    pub fs_version: FsVersionId,
    pub layer_head: Option<LayerId>,
    pub image: ImageId,
    pub handle: CheckpointHandle,
    pub created_at_ms: u64,
    pub meta: Arc<ImageMeta>,
    pub holder_ids: Vec<HolderId>,
    /// Warm snapshot tables for zero-copy forks. Held until the creating
    /// branch records a newer version, so fork warmth depends on operation
    /// order, never on dump-daemon timing.
    pub live_tables: Option<BTreeMap<LocalPid, BTreeMap<VmaId, SharedTable>>>,
    /// Present pages at the freeze instant (cost accounting).
    pub present_pages: u64,
    pub freeze_report: FreezeReport,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EngineEvent {
    AddressSpaceReplaced {
        branch: BranchId,
        process: LocalPid,
    },
    BranchDiscarded {
        branch: BranchId,
    },
}

pub(crate) struct EngineState {
    pub branches: BTreeMap<BranchId, Branch>,
    pub versions: BTreeMap<VersionId, VersionNode>,
    pub holders: BTreeMap<HolderId, HolderRec>,
    pub fs: FsState,
    pub ports: PortRegistry,
    pub audit: AuditLog,
    pub policy_events: Vec<PolicyEvent>,
    pub events: Vec<EngineEvent>,
    pub human: BranchId,
    pub next_branch: u64,
    pub next_version: u64,
    pub next_image: u64,
    pub next_holder: u64,
    pub next_namespace: u64,
    pub next_outbox: u64,
}

impl EngineState {
    pub(crate) fn branch(&self, id: BranchId) -> Result<&Branch> {
        self.branches.get(&id).ok_or(Error::UnknownBranch(id))
    }

    pub(crate) fn branch_mut(&mut self, id: BranchId) -> Result<&mut Branch> {
        self.branches.get_mut(&id).ok_or(Error::UnknownBranch(id))
    }

    pub(crate) fn version(&self, id: VersionId) -> Result<&VersionNode> {
        self.versions.get(&id).ok_or(Error::UnknownVersion(id))
    }

    pub(crate) fn live_branch_count(&self) -> usize {
        self.branches
            .values()
            .filter(|b| !b.status.is_terminal())
            .count()
    }

    /// Ancestor versions of a branch, nearest first.
    pub(crate) fn lineage(&self, branch: BranchId) -> Vec<VersionId> {
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
}

pub(crate) struct Core {
    pub state: Mutex<EngineState>,
    pub pages: Arc<PageStore>,
    pub config: EngineConfig,
    pub data_dir: PathBuf,
    owns_data_dir: bool,
    pub next_host_pid: AtomicU64,
    /// Freeze-interval work: metadata records, holder creations, per-VMA
    /// table shares. Never page-granular.
    pub freeze_ops: AtomicU64,
    pub dump_pages_written: AtomicU64,
}

impl Core {
    pub(crate) fn alloc_host_pid(&self) -> HostPid {
        HostPid(self.next_host_pid.fetch_add(1, Ordering::Relaxed))
    }

    pub(crate) fn images_root(&self) -> PathBuf {
        self.data_dir.join("images")
    }

    pub(crate) fn now_ms() -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

impl Drop for Core {
    fn drop(&mut self) {
        if self.owns_data_dir {
            let _ = std::fs::remove_dir_all(&self.data_dir);
        }
    }
}

/// Handle to one engine instance. All methods take `&self`; lifecycle
/// operations serialize on the internal coordinator lock.
pub struct Engine {
    // Declared before `core` so the daemon joins (releasing its Arc) before
    // the core tears down the data dir.
    pub(crate) daemon: DumpDaemon,
    pub(crate) core: Arc<Core>,
}

static SCRATCH_COUNTER: AtomicU64 = AtomicU64::new(0);

impl Engine {
    /// Build the workspace described by `spec` and install it as the human
    /// (user-visible) branch.
    pub fn launch(config: EngineConfig, spec: &WorkspaceSpec) -> Result<Engine> {
        let ws = build_workspace(spec)?;
        Self::launch_state(config, &ws)
    }

    /// Install an already-built workspace state as the human branch.
    pub fn launch_state(config: EngineConfig, ws: &WorkspaceState) -> Result<Engine> {
        let (data_dir, owns) = match &config.data_dir {
            Some(d) => (d.clone(), false),
            None => {
                let d = std::env::temp_dir().join(format!(
                    "forkspace-{}-{}",
                    std::process::id(),
                    SCRATCH_COUNTER.fetch_add(1, Ordering::Relaxed)
                ));
                (d, true)
            }
        };
        std::fs::create_dir_all(data_dir.join("images"))
            .map_err(|e| Error::io(data_dir.join("images"), e))?;

        let core = Arc::new(Core {
            state: Mutex::new(EngineState {
                branches: BTreeMap::new(),
                versions: BTreeMap::new(),
                holders: BTreeMap::new(),
                fs: FsState::new(),
                ports: PortRegistry::default(),
                audit: AuditLog::default(),
                policy_events: Vec::new(),
                events: Vec::new(),
                human: BranchId(1),
                next_branch: 1,
                next_version: 1,
                next_image: 1,
                next_holder: 1,
                next_namespace: 1,
                next_outbox: 1,
            }),
            pages: Arc::new(PageStore::new()),
            config,
            data_dir,
            owns_data_dir: owns,
            next_host_pid: AtomicU64::new(1),
            freeze_ops: AtomicU64::new(0),
            dump_pages_written: AtomicU64::new(0),
        });

        let daemon_core = Arc::clone(&core);
        let daemon = DumpDaemon::spawn(Arc::clone(&core.pages), move |outcome| {
            Engine::complete_dump(&daemon_core, outcome);
        });

        let engine = Engine { daemon, core };
        engine.install_human(ws)?;
        Ok(engine)
    }

    /// Dump-daemon completion: release the job's table references and the
    /// version's holders under the coordinator lock, then flip the handle.
    fn complete_dump(core: &Arc<Core>, outcome: DumpOutcome) {
        let mut state = core.state.lock().unwrap();
        for (_, vmas) in outcome.tables {
            for (_, table) in vmas {
                core.pages.release_table(table);
            }
        }
        match outcome.result {
            Ok(stats) => {
                core.dump_pages_written
                    .fetch_add(stats.pages_written, Ordering::Relaxed);
                let holder_ids = state
                    .versions
                    .get(&outcome.version)
                    .map(|v| v.holder_ids.clone())
                    .unwrap_or_default();
                for hid in holder_ids {
                    if let Some(h) = state.holders.get_mut(&hid) {
                        h.state = HolderState::Dumped;
                        let tables = std::mem::take(&mut h.tables);
                        for (_, t) in tables {
                            core.pages.release_table(t);
                        }
                        h.state = HolderState::Reclaimed;
                    }
                }
                drop(state);
                outcome.handle.set(CheckpointStatus::Durable);
            }
            Err(e) => {
                // Storage failure: holders stay held so the version remains
                // forkable on the fast path; rollback will surface the error.
                drop(state);
                outcome.handle.set(CheckpointStatus::Failed(e));
            }
        }
    }

    fn install_human(&self, ws: &WorkspaceState) -> Result<()> {
        let mut state = self.lock();
        let branch_id = BranchId(state.next_branch);
        state.next_branch += 1;
        let ns = NamespaceId(state.next_namespace);
        state.next_namespace += 1;
        state.human = branch_id;

        let fs_version = state.fs.create_version(&ws.files);
        let view = state.fs.new_view(fs_version, None);

        let mut procs = BTreeMap::new();
        for p in &ws.processes {
            let mut meta = p.meta.clone();
            meta.host_pid = self.core.alloc_host_pid().0;
            let mut regions = BTreeMap::new();
            for r in &p.regions {
                regions.insert(r.vma_id, self.install_region(r));
            }
            procs.insert(meta.local_pid, Proc { meta, regions });
        }

        let mut conns = BTreeMap::new();
        for c in &ws.connections {
            for ep in [&c.local, &c.remote] {
                if matches!(ep.host, crate::model::EndpointHost::Process { .. }) {
                    state.ports.bind(ns, ep.port, c.id)?;
                }
            }
            conns.insert(c.id, c.clone());
        }

        let gui = ws
            .gui_buffers
            .iter()
            .enumerate()
            .map(|(i, g)| GuiBuf {
                id: gui_id_for(branch_id, i),
                pages: g
                    .pages
                    .iter()
                    .map(|p| self.core.pages.alloc(Arc::new(**p)))
                    .collect(),
                mutation_rate_hint: g.mutation_rate_hint,
            })
            .collect();

        state.branches.insert(
            branch_id,
            Branch {
                id: branch_id,
                status: BranchStatus::Running,
                namespace: ns,
                profile: SecurityProfile::audit_all(),
                egress: self.core.config.egress_policy,
                current_version: None,
                base_image: None,
                procs,
                conns,
                gui,
                view,
                dirty: BTreeSet::new(),
                outbox: Vec::new(),
            },
        );
        Ok(())
    }

    fn install_region(&self, r: &RegionState) -> Region {
        let mut targets = Vec::new();
        let mut contents: Vec<Arc<Page>> = Vec::new();
        for (i, slot) in r.pages.iter().enumerate() {
            if let Some(content) = slot {
                targets.push(i);
                contents.push(Arc::new(**content));
            }
        }
        let ids = self.core.pages.alloc_batch(contents, None);
        let mut slots: Vec<Option<PageId>> = vec![None; r.pages.len()];
        for (i, id) in targets.into_iter().zip(ids) {
            slots[i] = Some(id);
        }
        Region {
            class: r.class,
            start_page: r.start_page,
            len_pages: r.len_pages,
            backing_file: r.backing_file.clone(),
            backing_page_offset: r.backing_page_offset,
            table: Arc::new(VmaTable::from_slots(slots)),
        }
    }

    pub(crate) fn lock(&self) -> MutexGuard<'_, EngineState> {
        self.core.state.lock().unwrap()
    }

    pub(crate) fn pages(&self) -> &Arc<PageStore> {
        &self.core.pages
    }

    pub fn human(&self) -> BranchId {
        self.lock().human
    }

    pub fn config(&self) -> &EngineConfig {
        &self.core.config
    }

    pub fn data_dir(&self) -> &Path {
        &self.core.data_dir
    }

    pub fn branch_status(&self, branch: BranchId) -> Result<BranchStatus> {
        Ok(self.lock().branch(branch)?.status)
    }

    pub fn live_branches(&self) -> Vec<BranchId> {
        self.lock()
            .branches
            .values()
            .filter(|b| !b.status.is_terminal())
            .map(|b| b.id)
            .collect()
    }

    pub fn branch_profile(&self, branch: BranchId) -> Result<SecurityProfile> {
        Ok(self.lock().branch(branch)?.profile.clone())
    }

    pub fn events(&self) -> Vec<EngineEvent> {
        self.lock().events.clone()
    }

    pub fn policy_events(&self) -> Vec<PolicyEvent> {
        self.lock().policy_events.clone()
    }

    pub fn audit_records(&self) -> Vec<crate::security::AuditRecord> {
        self.lock().audit.records.clone()
    }

    pub fn counters(&self) -> crate::pagestore::CopySnapshot {
        self.core.pages.counters.snapshot()
    }

    /// Filesystem counters: (layer probes, storage reads).
    pub fn fs_counters(&self) -> (u64, u64) {
        let state = self.lock();
        (state.fs.counters.probes, state.fs.counters.storage_reads)
    }

    pub fn freeze_ops(&self) -> u64 {
        self.core.freeze_ops.load(Ordering::Relaxed)
    }

    pub fn stall_dumps(&self) {
        self.daemon.stall();
    }

    pub fn unstall_dumps(&self) {
        self.daemon.unstall();
    }

    pub fn inject_dump_failure(&self) {
        self.daemon.inject_failure();
    }

    /// Block until a version's checkpoint is durable.
    pub fn wait_durable(&self, version: VersionId) -> Result<()> {
        let (handle, image) = {
            let state = self.lock();
            let v = state.version(version)?;
            (v.handle.clone(), v.image)
        };
        handle.wait_durable(image)
    }

    pub fn checkpoint_status(&self, version: VersionId) -> Result<CheckpointStatus> {
        let state = self.lock();
        Ok(state.version(version)?.handle.status())
    }

    pub fn version_image(&self, version: VersionId) -> Result<ImageId> {
        Ok(self.lock().version(version)?.image)
    }

    pub fn version_parent(&self, version: VersionId) -> Result<Option<VersionId>> {
        Ok(self.lock().version(version)?.parent)
    }

    /// Resolve a branch to the exchange form: every page, file, and buffer
    /// fully materialized. Identity tokens (host pids, namespace, view id)
    /// ride along but are excluded from equality by the differ.
    pub fn snapshot_state(&self, branch: BranchId) -> Result<WorkspaceState> {
        let state = self.lock();
        let b = state.branch(branch)?;
        if b.status.is_terminal() {
            return Err(Error::BranchTerminal(branch));
        }
        let mut processes = Vec::new();
        for (pid, proc) in &b.procs {
            let mut regions = Vec::new();
            for (vma, r) in &proc.regions {
                let mut pages: Vec<Option<PageBuf>> = Vec::with_capacity(r.table.slots.len());
                for (slot, entry) in r.table.slots.iter().enumerate() {
                    match entry {
                        Some(pid) => pages.push(Some(Box::new(*self.core.pages.read(*pid)))),
                        None => {
                            if r.class == MemoryClass::FileBacked {
                                let path = r.backing_file.as_deref().expect("file-backed");
                                let page = r.backing_page_offset + slot as u64;
                                pages.push(
                                    state
                                        .fs
                                        .resolve_page(b.view.fs_version, path, page)
                                        .map(Box::new),
                                );
                            } else {
                                pages.push(None);
                            }
                        }
                    }
                }
                regions.push(RegionState {
                    vma_id: *vma,
                    class: r.class,
                    start_page: r.start_page,
                    len_pages: r.len_pages,
                    backing_file: r.backing_file.clone(),
                    backing_page_offset: r.backing_page_offset,
                    pages,
                });
            }
            let _ = pid;
            processes.push(ProcessState {
                meta: proc.meta.clone(),
                regions,
            });
        }
        let mut files = BTreeMap::new();
        for path in state.fs.version_paths(b.view.fs_version) {
            files.insert(
                path.clone(),
                state
                    .fs
                    .resolve_file(b.view.fs_version, &path)
                    .expect("listed path resolves"),
            );
        }
        let gui_buffers = b
            .gui
            .iter()
            .map(|g| GuiState {
                id: g.id,
                pages: g
                    .pages
                    .iter()
                    .map(|p| Box::new(*self.core.pages.read(*p)))
                    .collect(),
                mutation_rate_hint: g.mutation_rate_hint,
            })
            .collect();
        Ok(WorkspaceState {
            namespace_id: b.namespace.0,
            fs_view: b.view.id,
            processes,
            files,
            connections: b.conns.values().cloned().collect(),
            gui_buffers,
        })
    }

    /// Engine-wide footprint: unique page and extent bytes plus per-branch
    /// bookkeeping. Under copy-on-write sharing, growth tracks divergence
    /// rather than workspace size.
    pub fn footprint(&self) -> FootprintReport {
        let state = self.lock();
        let mut table_meta_bytes = 0u64;
        let mut seen: BTreeSet<*const VmaTable> = BTreeSet::new();
        let mut bookkeeping = 0u64;
        for b in state.branches.values() {
            if b.status.is_terminal() {
                continue;
            }
            bookkeeping += 4096
                + b.procs.len() as u64 * 128
                + b.conns.len() as u64 * 64
                + b.outbox.len() as u64 * 32;
            for p in b.procs.values() {
                for r in p.regions.values() {
                    if seen.insert(Arc::as_ptr(&r.table)) {
                        table_meta_bytes += r.table.slots.len() as u64 * 8;
                    }
                }
            }
        }
        for h in state.holders.values() {
            for t in h.tables.values() {
                if seen.insert(Arc::as_ptr(t)) {
                    table_meta_bytes += t.slots.len() as u64 * 8;
                }
            }
        }
        for v in state.versions.values() {
            if let Some(vt) = &v.live_tables {
                for vmas in vt.values() {
                    for t in vmas.values() {
                        if seen.insert(Arc::as_ptr(t)) {
                            table_meta_bytes += t.slots.len() as u64 * 8;
                        }
                    }
                }
            }
        }
        FootprintReport {
            page_bytes: self.core.pages.unique_bytes(),
            extent_bytes: state.fs.unique_extent_bytes(),
            table_meta_bytes,
            bookkeeping_bytes: bookkeeping,
        }
    }

    /// Full cross-subsystem refcount and admission audit.
    pub fn audit(&self) -> Result<()> {
        let state = self.lock();
        let mut tables: Vec<SharedTable> = Vec::new();
        let mut direct: Vec<PageId> = Vec::new();
        for b in state.branches.values() {
            if b.status.is_terminal() {
                continue;
            }
            for p in b.procs.values() {
                for r in p.regions.values() {
                    tables.push(Arc::clone(&r.table));
                }
            }
            for g in &b.gui {
                direct.extend(g.pages.iter().copied());
            }
            direct.extend(b.view.cache.values().copied());
        }
        for h in state.holders.values() {
            for t in h.tables.values() {
                tables.push(Arc::clone(t));
            }
        }
        for v in state.versions.values() {
            if let Some(vt) = &v.live_tables {
                for vmas in vt.values() {
                    for t in vmas.values() {
                        tables.push(Arc::clone(t));
                    }
                }
            }
        }
        direct.extend(state.fs.layer_page_refs());
        self.core
            .pages
            .audit(tables.into_iter(), direct.into_iter())
            .map_err(Error::Invariant)?;
        state.fs.audit_extents().map_err(Error::Invariant)?;
        state.fs.audit_admissions().map_err(Error::Invariant)?;
        Ok(())
    }

    /// Content hashes of every live sealed layer, for immutability checks.
    pub fn layer_hashes(&self) -> BTreeMap<u64, [u8; 32]> {
        let state = self.lock();
        state
            .fs
            .layer_ids()
            .into_iter()
            .map(|l| (l.0, state.fs.layer_hash(l, &self.core.pages)))
            .collect()
    }

    /// GUI buffer page ids of a branch with their store refcounts.
    pub fn gui_page_refcounts(&self, branch: BranchId) -> Result<Vec<(PageId, u32)>> {
        let state = self.lock();
        let b = state.branch(branch)?;
        Ok(b.gui
            .iter()
            .flat_map(|g| g.pages.iter())
            .map(|p| (*p, self.core.pages.refs(*p)))
            .collect())
    }

    pub fn connection_ids(&self, branch: BranchId) -> Result<Vec<(ConnId, crate::model::ConnKind, crate::model::ConnStatus)>> {
        let state = self.lock();
        let b = state.branch(branch)?;
        Ok(b.conns
            .values()
            .map(|c| (c.id, c.kind, c.status))
            .collect())
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        self.daemon.shutdown();
    }
}

pub(crate) fn gui_id_for(branch: BranchId, index: usize) -> GuiId {
    GuiId((branch.0 << 16) | (index as u64 + 1))
}

/// GUI buffer id allocation scheme, shared with the reference oracle so
/// snapshots line up.
pub fn gui_id_for_pub(branch: BranchId, index: usize) -> GuiId {
    gui_id_for(branch, index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FootprintReport {
    pub page_bytes: u64,
    pub extent_bytes: u64,
    pub table_meta_bytes: u64,
    pub bookkeeping_bytes: u64,
}

impl FootprintReport {
    pub fn total(&self) -> u64 {
        self.page_bytes + self.extent_bytes + self.table_meta_bytes + self.bookkeeping_bytes
    }

    /// Content bytes only (pages + extents); the ratio checks in the
    /// scalability experiments compare these.
    pub fn content_bytes(&self) -> u64 {
        self.page_bytes + self.extent_bytes
    }
}

pub(crate) fn zeroed_page() -> Arc<Page> {
    Arc::new([0u8; PAGE_SIZE])
}
