//! Pluggable branch-creation strategies under a shared cost-accounting
//! model.
//!
//! Every strategy produces observationally identical branches; the strategy
//! decides only how much work sits on the branch-creation critical path.
//! The baseline (`sync-restore`) performs a synchronous dump followed by
//! serial eager restores; each cumulative flag then enables one mechanism:
//! parallel restores, dump/restore overlap, copy-on-write page sharing, and
//! finally moving durable dumping off the creation path entirely (`fast`).
//! `eager-copy` models whole-machine cloning: eager memory plus a deep
//! filesystem copy per branch.
//!
//! Modeled costs are derived from executed operation counts (pages dumped,
//! pages copied, processes restored) times calibrated per-unit costs, so
//! reports are deterministic; wall-clock fields are measured alongside.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::ids::{BranchId, LocalPid, NamespaceId, PageId, VersionId, VmaId};
use crate::pagestore::{CopyCause, SharedTable, VmaTable};
use crate::security::SecurityProfile;
use crate::PAGE_SIZE;

/// Branch-creation mechanism flags. The fast path has all four mechanism
/// flags enabled; the sync-restore baseline has all disabled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloneStrategy {
    pub name: String,
    pub parallel_restore: bool,
    pub overlap_dump_restore: bool,
    pub cow_memory: bool,
    pub async_dump: bool,
    /// Whole-machine baseline: also deep-copies the filesystem per branch.
    pub copy_filesystem: bool,
}

impl CloneStrategy {
    pub fn sync_restore() -> Self {
        CloneStrategy {
            name: "sync-restore".into(),
            parallel_restore: false,
            overlap_dump_restore: false,
            cow_memory: false,
            async_dump: false,
            copy_filesystem: false,
        }
    }

    pub fn parallel_restore() -> Self {
        CloneStrategy {
            name: "parallel-restore".into(),
            parallel_restore: true,
            ..Self::sync_restore()
        }
    }

    pub fn overlap_dump() -> Self {
        CloneStrategy {
            name: "overlap-dump-restore".into(),
            overlap_dump_restore: true,
            ..Self::parallel_restore()
        }
    }

    pub fn cow_memory() -> Self {
        CloneStrategy {
            name: "cow-memory".into(),
            cow_memory: true,
            ..Self::overlap_dump()
        }
    }

    /// The engine's native path: all mechanisms on.
    pub fn fast() -> Self {
        CloneStrategy {
            name: "fast".into(),
            async_dump: true,
            ..Self::cow_memory()
        }
    }

    pub fn eager_copy() -> Self {
        CloneStrategy {
            name: "eager-copy".into(),
            copy_filesystem: true,
            ..Self::sync_restore()
        }
    }

    /// The five cumulative configurations of the mechanism ablation.
    pub fn ablation_stages() -> Vec<CloneStrategy> {
        vec![
            Self::sync_restore(),
            Self::parallel_restore(),
            Self::overlap_dump(),
            Self::cow_memory(),
            Self::fast(),
        ]
    }

    pub fn by_name(name: &str) -> Option<CloneStrategy> {
        match name {
            "sync-restore" => Some(Self::sync_restore()),
            "parallel-restore" => Some(Self::parallel_restore()),
            "overlap-dump-restore" => Some(Self::overlap_dump()),
            "cow-memory" => Some(Self::cow_memory()),
            "fast" => Some(Self::fast()),
            "eager-copy" => Some(Self::eager_copy()),
            _ => None,
        }
    }

    pub fn known_names() -> &'static [&'static str] {
        &[
            "fast",
            "sync-restore",
            "parallel-restore",
            "overlap-dump-restore",
            "cow-memory",
            "eager-copy",
        ]
    }
}

/// Calibrated per-unit costs in milliseconds. Absolute values are
/// calibration knobs; experiments assert ratios and shapes, never absolute
/// magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    /// Restore-side copy of one page (image read-back plus install).
    pub per_page_copy_ms: f64,
    /// Serializing one page to durable storage.
    pub per_page_dump_ms: f64,
    /// Per-process metadata collection during restore.
    pub per_proc_meta_ms: f64,
    /// Superlinear growth of metadata collection with the total number of
    /// managed workspaces (the sync-restore path scans them all).
    pub meta_managed_factor: f64,
    /// One freeze-interval metadata operation.
    pub per_meta_op_ms: f64,
    /// Fixed namespace setup per branch.
    pub ns_setup_ms: f64,
    /// Efficiency loss per extra concurrent restore.
    pub parallel_overhead: f64,
    /// One layer probe during a chain walk.
    pub per_layer_probe_ms: f64,
    /// Storage (extent) access on a cache miss.
    pub storage_read_ms: f64,
    /// Flat cost of reads/writes on branch-materialized pages.
    pub materialized_read_ms: f64,
    pub materialized_write_ms: f64,
    /// Fixed per-read cost outside the layer walk.
    pub read_base_ms: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            per_page_copy_ms: 0.05,
            per_page_dump_ms: 0.03,
            per_proc_meta_ms: 0.8,
            meta_managed_factor: 0.25,
            per_meta_op_ms: 0.02,
            ns_setup_ms: 100.0,
            parallel_overhead: 0.05,
            per_layer_probe_ms: 0.088,
            storage_read_ms: 0.1,
            materialized_read_ms: 1.4,
            materialized_write_ms: 2.5,
            read_base_ms: 1.212,
        }
    }
}

impl CostModel {
    pub fn from_json(json: &str) -> Result<Self> {
        let model: CostModel = serde_json::from_str(json)?;
        model.check()?;
        Ok(model)
    }

    /// All costs must be nonnegative.
    pub fn check(&self) -> Result<()> {
        let fields = [
            self.per_page_copy_ms,
            self.per_page_dump_ms,
            self.per_proc_meta_ms,
            self.meta_managed_factor,
            self.per_meta_op_ms,
            self.ns_setup_ms,
            self.parallel_overhead,
            self.per_layer_probe_ms,
            self.storage_read_ms,
            self.materialized_read_ms,
            self.materialized_write_ms,
            self.read_base_ms,
        ];
        if fields.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::InvalidSpec(
                "cost model values must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn overlay_costs(&self) -> crate::fs::overlay::OverlayCosts {
        crate::fs::overlay::OverlayCosts {
            read_base_ms: self.read_base_ms,
            probe_ms: self.per_layer_probe_ms,
            materialized_read_ms: self.materialized_read_ms,
            materialized_write_ms: self.materialized_write_ms,
        }
    }

    /// Modeled cost of restoring a branch from an image chain (rollback).
    pub fn restore_ms(&self, pages: u64, procs: u64) -> f64 {
        pages as f64 * self.per_page_copy_ms
            + procs as f64 * self.per_proc_meta_ms
            + self.ns_setup_ms
    }
}

/// Decomposed branch-creation cost. Modeled fields are deterministic;
/// `wall_ms` is measured.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub strategy: String,
    pub n: usize,
    pub freeze_ms: f64,
    pub dump_ms: f64,
    pub dump_on_path: bool,
    /// Dump cost charged to the critical path; zero when dumping is
    /// asynchronous.
    pub dump_on_path_ms: f64,
    pub restore_total_ms: f64,
    pub restore_max_ms: f64,
    pub memory_copy_ms: f64,
    pub metadata_ms: f64,
    pub ns_ms: f64,
    pub critical_path_ms: f64,
    pub wall_ms: f64,
    pub pages_present: u64,
    /// CoW-managed page bytes copied during branch creation; zero on the
    /// fast path.
    pub cow_copied_bytes: u64,
    /// GUI and shared-segment bytes rebuilt branch-locally.
    pub branch_local_bytes: u64,
}

enum RestoreSource {
    /// Share holder tables copy-on-write (zero copies).
    Cow(BTreeMap<LocalPid, BTreeMap<VmaId, SharedTable>>),
    /// Copy pages out of holder tables through a transfer buffer
    /// (dump/restore overlap: the page-server model).
    HolderTransfer(BTreeMap<LocalPid, BTreeMap<VmaId, SharedTable>>),
    /// Read pages back from the durable image chain.
    Image,
}

impl Engine {
    /// Create `n` branches from a version under a given strategy, with full
    /// cost accounting. Branches are observationally identical across all
    /// strategies; only the cost differs.
    pub fn clone_with(
        &self,
        strategy: &CloneStrategy,
        version: VersionId,
        n: usize,
        profile: SecurityProfile,
    ) -> Result<(Vec<BranchId>, CostReport)> {
        if n == 0 {
            return Err(Error::InvalidSpec("clone of zero branches".into()));
        }
        let model = self.core.config.cost_model;
        let wall_start = Instant::now();
        let counters_before = self.core.pages.counters.snapshot();

        // Gather version state and pre-allocate deterministic ids.
        let gathered = {
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
            let holder_tables = v.live_tables.as_ref().map(|live| {
                let mut out = BTreeMap::new();
                for (pid, tables) in live {
                    out.insert(
                        *pid,
                        tables
                            .iter()
                            .map(|(vma, t)| (*vma, Arc::clone(t)))
                            .collect::<BTreeMap<_, _>>(),
                    );
                }
                out
            });
            let mut ids = Vec::with_capacity(n);
            for _ in 0..n {
                let b = BranchId(state.next_branch);
                state.next_branch += 1;
                let ns = NamespaceId(state.next_namespace);
                state.next_namespace += 1;
                ids.push((b, ns));
            }
            (
                Arc::clone(&v.meta),
                v.fs_version,
                v.layer_head,
                v.image,
                v.present_pages,
                v.freeze_report,
                holder_tables,
                ids,
                state.live_branch_count() as u64,
                state.fs.version_total_pages(v.fs_version),
            )
        };
        let (
            meta,
            fs_version,
            layer_head,
            image,
            present_pages,
            freeze_report,
            holder_tables,
            ids,
            managed_before,
            fs_pages,
        ) = gathered;
        let procs = meta.processes.len() as u64;

        // Synchronous dump on the critical path, unless overlapped with the
        // restore phase below.
        let mut dump_wall_pending = !strategy.async_dump;
        if dump_wall_pending && !strategy.overlap_dump_restore {
            self.wait_durable(version)?;
            dump_wall_pending = false;
        }

        // Prepare the restore source.
        let source = if strategy.cow_memory {
            match holder_tables {
                Some(t) => RestoreSource::Cow(t),
                None => {
                    // Cold version: rebuild once from the image and share.
                    self.wait_durable(version)?;
                    dump_wall_pending = false;
                    let (m, flat) = checkpoint::flatten_chain(&self.core.images_root(), image)?;
                    RestoreSource::Cow(crate::engine::build_tables_from_flat(
                        &m,
                        &flat,
                        &self.core.pages,
                        CopyCause::Restore,
                    ))
                }
            }
        } else if strategy.overlap_dump_restore && holder_tables.is_some() {
            RestoreSource::HolderTransfer(holder_tables.unwrap())
        } else {
            // Restores read the durable image; wait for it first.
            self.wait_durable(version)?;
            dump_wall_pending = false;
            RestoreSource::Image
        };

        // Phase A: materialize per-branch tables (the heavy copies), in
        // parallel when the strategy allows.
        let prebuilt: Vec<Option<BTreeMap<LocalPid, BTreeMap<VmaId, SharedTable>>>> = match &source
        {
            RestoreSource::Cow(_) => (0..n).map(|_| None).collect(),
            RestoreSource::HolderTransfer(tables) => {
                run_phase(n, strategy.parallel_restore, |_slot| {
                    transfer_copy_tables(self, tables)
                })?
                .into_iter()
                .map(Some)
                .collect()
            }
            RestoreSource::Image => {
                let images_root = self.core.images_root();
                run_phase(n, strategy.parallel_restore, |_slot| {
                    let (m, flat) = checkpoint::flatten_chain(&images_root, image)?;
                    Ok(crate::engine::build_tables_from_flat(
                        &m,
                        &flat,
                        &self.core.pages,
                        CopyCause::EagerClone,
                    ))
                })?
                .into_iter()
                .map(Some)
                .collect()
            }
        };

        // Phase B: assemble branches under the coordinator lock, in slot
        // order with the pre-allocated ids.
        let branches = self.assemble_clones(
            &meta,
            match &source {
                RestoreSource::Cow(t) => Some(t),
                _ => None,
            },
            &prebuilt,
            fs_version,
            layer_head,
            version,
            image,
            profile,
            &ids,
            strategy.copy_filesystem,
        )?;

        // Overlapped synchronous dump: the clone completes on the slower of
        // dump and restore.
        if dump_wall_pending {
            self.wait_durable(version)?;
        }

        // Release master tables not owned by branches (cold-fork masters and
        // holder-transfer sources); warm holder clones are non-last drops.
        match source {
            RestoreSource::Cow(tables) | RestoreSource::HolderTransfer(tables) => {
                for (_, vmas) in tables {
                    for (_, t) in vmas {
                        self.core.pages.release_table(t);
                    }
                }
            }
            RestoreSource::Image => {}
        }

        let wall_ms = wall_start.elapsed().as_secs_f64() * 1000.0;
        let counters_after = self.core.pages.counters.snapshot();

        // Modeled cost assembly from executed counts.
        let freeze_ms = freeze_report.total_ops() as f64 * model.per_meta_op_ms;
        let dump_ms = present_pages as f64 * model.per_page_dump_ms;
        let copy_pages_per_branch = if strategy.cow_memory {
            0
        } else {
            present_pages + if strategy.copy_filesystem { fs_pages } else { 0 }
        };
        let mut restore_costs = Vec::with_capacity(n);
        let mut metadata_ms = 0.0;
        let mut memory_copy_ms = 0.0;
        for i in 0..n {
            let managed = managed_before + i as u64;
            let meta_cost = if strategy.async_dump {
                procs as f64 * model.per_proc_meta_ms
            } else {
                procs as f64
                    * model.per_proc_meta_ms
                    * (1.0 + model.meta_managed_factor * managed as f64)
            };
            let copy_cost = copy_pages_per_branch as f64 * model.per_page_copy_ms;
            metadata_ms += meta_cost;
            memory_copy_ms += copy_cost;
            restore_costs.push(meta_cost + copy_cost + model.ns_setup_ms);
        }
        let restore_total: f64 = restore_costs.iter().sum();
        let restore_max = restore_costs.iter().cloned().fold(0.0, f64::max);
        let restore_path = if strategy.parallel_restore {
            restore_max * (1.0 + model.parallel_overhead * (n as f64 - 1.0))
        } else {
            restore_total
        };
        let (critical, dump_on_path_ms) = if strategy.async_dump {
            (freeze_ms + restore_path, 0.0)
        } else if strategy.overlap_dump_restore {
            (freeze_ms + dump_ms.max(restore_path), dump_ms)
        } else {
            (freeze_ms + dump_ms + restore_path, dump_ms)
        };

        let report = CostReport {
            strategy: strategy.name.clone(),
            n,
            freeze_ms,
            dump_ms,
            dump_on_path: !strategy.async_dump,
            dump_on_path_ms,
            restore_total_ms: restore_total,
            restore_max_ms: restore_max,
            memory_copy_ms,
            metadata_ms,
            ns_ms: model.ns_setup_ms * n as f64,
            critical_path_ms: critical,
            wall_ms,
            pages_present: present_pages,
            cow_copied_bytes: counters_after.cow_managed() - counters_before.cow_managed(),
            branch_local_bytes: counters_after.branch_local - counters_before.branch_local,
        };
        Ok((branches, report))
    }
}

/// Copy pages out of holder tables via an intermediate transfer buffer,
/// modeling the page-server path: source page -> transfer buffer -> fresh
/// private page.
fn transfer_copy_tables(
    engine: &Engine,
    tables: &BTreeMap<LocalPid, BTreeMap<VmaId, SharedTable>>,
) -> Result<BTreeMap<LocalPid, BTreeMap<VmaId, SharedTable>>> {
    let pages = engine.pages();
    let mut out = BTreeMap::new();
    let mut buffer = [0u8; PAGE_SIZE];
    for (pid, vmas) in tables {
        let mut new_vmas = BTreeMap::new();
        for (vma, table) in vmas {
            let mut targets = Vec::new();
            let mut contents: Vec<Arc<crate::Page>> = Vec::new();
            for (slot, entry) in table.slots.iter().enumerate() {
                if let Some(p) = entry {
                    buffer.copy_from_slice(&pages.read(*p)[..]);
                    contents.push(Arc::new(buffer));
                    targets.push(slot);
                }
            }
            let mut slots: Vec<Option<PageId>> = vec![None; table.slots.len()];
            for (slot, id) in targets
                .into_iter()
                .zip(pages.alloc_batch(contents, Some(CopyCause::EagerClone)))
            {
                slots[slot] = Some(id);
            }
            new_vmas.insert(*vma, Arc::new(VmaTable::from_slots(slots)));
        }
        out.insert(*pid, new_vmas);
    }
    Ok(out)
}

/// Run `n` restores serially or on real parallel threads.
fn run_phase<T: Send>(
    n: usize,
    parallel: bool,
    f: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if !parallel || n == 1 {
        return (0..n).map(&f).collect();
    }
    let mut out: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (slot, cell) in out.iter_mut().enumerate() {
            let f = &f;
            handles.push(scope.spawn(move || {
                *cell = Some(f(slot));
            }));
        }
        for h in handles {
            let _ = h.join();
        }
    });
    out.into_iter()
        .map(|r| r.expect("phase completed"))
        .collect()
}
