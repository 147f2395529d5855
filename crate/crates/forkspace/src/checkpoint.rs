//! Durable checkpoint images and the background dump daemon.
//!
//! A version's logical snapshot (holder page tables plus captured metadata)
//! is serialized off the critical path: `dump_async` returns a pending
//! handle immediately and the daemon writes the image, marks it durable,
//! and reclaims the holders. Successive checkpoints of one lineage chain
//! through dirty-page tracking: an image with a parent contains exactly the
//! pages dirtied since the parent's freeze instant, and chain resolution
//! walks ancestors for absent pages.
//!
//! On-disk layout per image:
//!   `<id>/meta.json`  — parent id, process list, vma table, connections,
//!                       GUI buffer contents
//!   `<id>/pages.bin`  — fixed-size records: local_pid, vma_id, slot (u64
//!                       little-endian each) + 4096 bytes of content

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{GuiId, ImageId, LocalPid, VersionId, VmaId};
use crate::model::{ConnState, MemoryClass, ProcMeta};
use crate::pagestore::{PageStore, SharedTable};
use crate::{PageBuf, PAGE_SIZE};

pub const IMAGE_FORMAT: u32 = 1;
const PAGE_RECORD_LEN: usize = 24 + PAGE_SIZE;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageVma {
    pub vma_id: VmaId,
    pub class: MemoryClass,
    pub start_page: u64,
    pub len_pages: u64,
    pub backing_file: Option<String>,
    pub backing_page_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageProc {
    pub meta: ProcMeta,
    pub vmas: Vec<ImageVma>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageGui {
    pub id: GuiId,
    pub mutation_rate_hint: u32,
    pub pages: u64,
    pub content_b64: String,
}

/// The metadata blob of one checkpoint image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub format: u32,
    pub image: ImageId,
    pub parent: Option<ImageId>,
    pub version: VersionId,
    pub created_at_ms: u64,
    pub processes: Vec<ImageProc>,
    pub connections: Vec<ConnState>,
    pub gui: Vec<ImageGui>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageRecord {
    pub local_pid: LocalPid,
    pub vma_id: VmaId,
    pub slot: u64,
    pub content: PageBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckpointStatus {
    Pending,
    Durable,
    Failed(String),
}

/// Shared handle to a checkpoint's durability state.
#[derive(Clone)]
pub struct CheckpointHandle {
    inner: Arc<(Mutex<CheckpointStatus>, Condvar)>,
}

impl Default for CheckpointHandle {
    fn default() -> Self {
        Self::new()
    }
}

impl CheckpointHandle {
    pub fn new() -> Self {
        CheckpointHandle {
            inner: Arc::new((Mutex::new(CheckpointStatus::Pending), Condvar::new())),
        }
    }

    pub fn status(&self) -> CheckpointStatus {
        self.inner.0.lock().unwrap().clone()
    }

    pub fn set(&self, status: CheckpointStatus) {
        *self.inner.0.lock().unwrap() = status;
        self.inner.1.notify_all();
    }

    /// Block until the checkpoint is durable; a failed dump is an error.
    pub fn wait_durable(&self, image: ImageId) -> Result<()> {
        let mut g = self.inner.0.lock().unwrap();
        loop {
            match &*g {
                CheckpointStatus::Durable => return Ok(()),
                CheckpointStatus::Failed(e) => {
                    return Err(Error::CheckpointFailed(image, e.clone()))
                }
                CheckpointStatus::Pending => g = self.inner.1.wait(g).unwrap(),
            }
        }
    }
}

/// One dump request: everything the daemon needs to serialize a version.
pub struct DumpJob {
    pub image: ImageId,
    pub version: VersionId,
    pub dir: PathBuf,
    pub meta: ImageMeta,
    /// Holder page tables, one map per process.
    pub tables: BTreeMap<LocalPid, BTreeMap<VmaId, SharedTable>>,
    /// `Some` for incremental images: exactly the slots dirtied since the
    /// parent's freeze instant.
    pub dirty: Option<BTreeSet<(LocalPid, VmaId, u64)>>,
    pub handle: CheckpointHandle,
}

/// What the daemon hands back after writing (or failing to write) an image.
/// The completion sink owns releasing the job's table references under the
/// engine lock, so refcount accounting stays serialized with forks.
pub struct DumpOutcome {
    pub image: ImageId,
    pub version: VersionId,
    pub tables: BTreeMap<LocalPid, BTreeMap<VmaId, SharedTable>>,
    pub handle: CheckpointHandle,
    pub result: std::result::Result<DumpStats, String>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DumpStats {
    pub pages_written: u64,
    pub bytes_written: u64,
}

enum DaemonMsg {
    Job(Box<DumpJob>),
    Shutdown,
}

struct Gate {
    stalled: Mutex<bool>,
    cv: Condvar,
}

/// Background dump daemon. Jobs are serialized to storage in submission
/// order; `stall` parks the worker before the next job, which tests use to
/// prove the fork path never waits on durability.
pub struct DumpDaemon {
    tx: Mutex<Option<Sender<DaemonMsg>>>,
    join: Mutex<Option<JoinHandle<()>>>,
    gate: Arc<Gate>,
    fail_next: Arc<Mutex<bool>>,
}

impl DumpDaemon {
    pub fn spawn(
        pages: Arc<PageStore>,
        on_complete: impl Fn(DumpOutcome) + Send + 'static,
    ) -> Self {
        let gate = Arc::new(Gate {
            stalled: Mutex::new(false),
            cv: Condvar::new(),
        });
        let fail_next = Arc::new(Mutex::new(false));
        let (tx, rx) = channel::<DaemonMsg>();
        let worker_gate = Arc::clone(&gate);
        let worker_fail = Arc::clone(&fail_next);
        let join = std::thread::Builder::new()
            .name("dump-daemon".into())
            .spawn(move || {
                while let Ok(msg) = rx.recv() {
                    let job = match msg {
                        DaemonMsg::Job(job) => job,
                        DaemonMsg::Shutdown => break,
                    };
                    // Park while artificially stalled.
                    {
                        let mut stalled = worker_gate.stalled.lock().unwrap();
                        while *stalled {
                            stalled = worker_gate.cv.wait(stalled).unwrap();
                        }
                    }
                    let inject = std::mem::take(&mut *worker_fail.lock().unwrap());
                    let DumpJob {
                        image,
                        version,
                        dir,
                        meta,
                        tables,
                        dirty,
                        handle,
                    } = *job;
                    let result = if inject {
                        Err("injected storage failure".to_string())
                    } else {
                        write_image(&dir, &meta, &tables, dirty.as_ref(), &pages)
                            .map_err(|e| e.to_string())
                    };
                    on_complete(DumpOutcome {
                        image,
                        version,
                        tables,
                        handle,
                        result,
                    });
                }
            })
            .expect("spawn dump daemon");
        DumpDaemon {
            tx: Mutex::new(Some(tx)),
            join: Mutex::new(Some(join)),
            gate,
            fail_next,
        }
    }

    pub fn submit(&self, job: DumpJob) {
        self.tx
            .lock()
            .unwrap()
            .as_ref()
            .expect("daemon running")
            .send(DaemonMsg::Job(Box::new(job)))
            .expect("daemon alive");
    }

    pub fn stall(&self) {
        *self.gate.stalled.lock().unwrap() = true;
    }

    pub fn unstall(&self) {
        *self.gate.stalled.lock().unwrap() = false;
        self.gate.cv.notify_all();
    }

    /// Make the next job fail as if storage writes errored.
    pub fn inject_failure(&self) {
        *self.fail_next.lock().unwrap() = true;
    }

    pub fn shutdown(&self) {
        if let Some(tx) = self.tx.lock().unwrap().take() {
            let _ = tx.send(DaemonMsg::Shutdown);
        }
        self.unstall();
        if let Some(join) = self.join.lock().unwrap().take() {
            let _ = join.join();
        }
    }
}

impl Drop for DumpDaemon {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Serialize one image directory. Page records are sorted by
/// (local_pid, vma_id, slot) so the layout is deterministic.
pub fn write_image(
    dir: &Path,
    meta: &ImageMeta,
    tables: &BTreeMap<LocalPid, BTreeMap<VmaId, SharedTable>>,
    dirty: Option<&BTreeSet<(LocalPid, VmaId, u64)>>,
    pages: &PageStore,
) -> Result<DumpStats> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_vec_pretty(meta)?;
    std::fs::write(&meta_path, &json).map_err(|e| Error::io(&meta_path, e))?;

    let bin_path = dir.join("pages.bin");
    let file = std::fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut w = BufWriter::new(file);
    let mut stats = DumpStats::default();
    let mut emit = |pid: LocalPid, vma: VmaId, slot: u64, content: &[u8]| -> Result<()> {
        w.write_all(&(pid.0 as u64).to_le_bytes())
            .and_then(|_| w.write_all(&vma.0.to_le_bytes()))
            .and_then(|_| w.write_all(&slot.to_le_bytes()))
            .and_then(|_| w.write_all(content))
            .map_err(|e| Error::io(&bin_path, e))?;
        stats.pages_written += 1;
        stats.bytes_written += PAGE_RECORD_LEN as u64;
        Ok(())
    };
    match dirty {
        Some(dirty) => {
            for (pid, vma, slot) in dirty {
                let table = tables
                    .get(pid)
                    .and_then(|vmas| vmas.get(vma))
                    .ok_or_else(|| {
                        Error::Invariant(format!("dirty slot for missing vma {vma}"))
                    })?;
                let page = table.slots[*slot as usize].ok_or_else(|| {
                    Error::Invariant(format!("dirty slot {pid}/{vma}/{slot} absent"))
                })?;
                emit(*pid, *vma, *slot, &pages.read(page)[..])?;
            }
        }
        None => {
            for (pid, vmas) in tables {
                for (vma, table) in vmas {
                    for (slot, entry) in table.slots.iter().enumerate() {
                        if let Some(page) = entry {
                            emit(*pid, *vma, slot as u64, &pages.read(*page)[..])?;
                        }
                    }
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(&bin_path, e))?;
    Ok(stats)
}

pub fn read_meta(dir: &Path) -> Result<ImageMeta> {
    let meta_path = dir.join("meta.json");
    let raw = std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    Ok(serde_json::from_slice(&raw)?)
}

pub fn read_pages(dir: &Path) -> Result<Vec<PageRecord>> {
    let bin_path = dir.join("pages.bin");
    let mut f = std::fs::File::open(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut raw = Vec::new();
    f.read_to_end(&mut raw).map_err(|e| Error::io(&bin_path, e))?;
    if raw.len() % PAGE_RECORD_LEN != 0 {
        return Err(Error::Invariant(format!(
            "pages.bin length {} is not a whole number of records",
            raw.len()
        )));
    }
    let mut out = Vec::with_capacity(raw.len() / PAGE_RECORD_LEN);
    for rec in raw.chunks_exact(PAGE_RECORD_LEN) {
        let pid = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        let vma = u64::from_le_bytes(rec[8..16].try_into().unwrap());
        let slot = u64::from_le_bytes(rec[16..24].try_into().unwrap());
        let mut content = Box::new([0u8; PAGE_SIZE]);
        content.copy_from_slice(&rec[24..]);
        out.push(PageRecord {
            local_pid: LocalPid(pid as u32),
            vma_id: VmaId(vma),
            slot,
            content,
        });
    }
    Ok(out)
}

/// Resolve an image chain: walk to the root, then apply each image's page
/// records from the root down to reconstruct the full page map.
pub fn flatten_chain(
    images_root: &Path,
    target: ImageId,
) -> Result<(ImageMeta, BTreeMap<(LocalPid, VmaId, u64), PageBuf>)> {
    let mut chain = Vec::new();
    let mut cur = Some(target);
    while let Some(id) = cur {
        let dir = image_dir(images_root, id);
        if !dir.join("meta.json").exists() {
            return Err(Error::BrokenChain(target, id));
        }
        let meta = read_meta(&dir)?;
        cur = meta.parent;
        chain.push((dir, meta));
    }
    chain.reverse();
    let target_meta = chain.last().expect("nonempty chain").1.clone();
    let mut pages = BTreeMap::new();
    for (dir, _) in &chain {
        for rec in read_pages(dir)? {
            pages.insert((rec.local_pid, rec.vma_id, rec.slot), rec.content);
        }
    }
    Ok((target_meta, pages))
}

pub fn image_dir(images_root: &Path, image: ImageId) -> PathBuf {
    images_root.join(format!("img-{:08}", image.0))
}
