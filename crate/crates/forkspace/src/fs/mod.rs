//! Versioned filesystem: extent-level block CoW plus the lazy, sealed
//! page-cache layer chain and the extent-sharing admission check.
//!
//! A filesystem version maps each file to an ordered list of slices into
//! immutable extents. Snapshots share all extents; a write replaces the
//! covering extent range with a fresh extent in the writing version only.
//! At branch creation the source's current page cache is sealed into a
//! read-only layer; a reader first consults its private cache, then walks
//! the layer chain, then falls back to its own on-disk extents. A cached
//! page is served from a layer only when the admission check confirms the
//! backing extent is still shared between the layer's origin version and
//! the reader's version.
//!
//! Writes in this model are write-through: the private cache page and the
//! backing extent are updated together, so the cache never holds dirty
//! not-yet-flushed pages and sealed layer entries always match durable
//! extents.

pub mod overlay;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{ExtentId, FsVersionId, LayerId, PageId};
use crate::pagestore::{CopyCause, PageStore};
use crate::{Page, EXTENT_PAGES, PAGE_SIZE};

/// A contiguous run of pages inside one extent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slice {
    pub extent: ExtentId,
    /// Page offset within the extent.
    pub offset: u64,
    /// Length in pages.
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileMeta {
    pub pages: u64,
    pub slices: Vec<Slice>,
}

impl FileMeta {
    /// Locate the slice covering `page`: (slice index, offset inside slice).
    fn locate(&self, page: u64) -> Option<(usize, u64)> {
        let mut base = 0u64;
        for (i, s) in self.slices.iter().enumerate() {
            if page < base + s.len {
                return Some((i, page - base));
            }
            base += s.len;
        }
        None
    }
}

struct ExtentEntry {
    content: Arc<Vec<u8>>,
    /// One reference per slice occurrence in a live version.
    refs: u32,
}

struct VersionEntry {
    files: BTreeMap<String, FileMeta>,
    refs: u32,
}

/// A sealed, immutable page-cache layer shared by related filesystem views.
pub struct Layer {
    pub entries: BTreeMap<(String, u64), PageId>,
    pub parent: Option<LayerId>,
    /// The frozen version the cache matched when the layer was sealed;
    /// admission compares against it.
    pub origin: FsVersionId,
    pub sealed: bool,
    refs: u32,
}

/// A branch's private filesystem view: private cache shadowing the shared
/// layer chain, over a private extent-map version.
#[derive(Debug)]
pub struct FsView {
    pub id: u64,
    pub fs_version: FsVersionId,
    pub head: Option<LayerId>,
    pub cache: BTreeMap<(String, u64), PageId>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReadStats {
    pub probes: u32,
    pub storage: bool,
    pub cache_hit: bool,
}

/// One served layer hit, recorded for the admission-soundness audit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdmissionRecord {
    pub layer: LayerId,
    pub path: String,
    pub page: u64,
    pub layer_extent: ExtentId,
    pub view_extent: ExtentId,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FsCounters {
    pub probes: u64,
    pub storage_reads: u64,
    /// Per-file metadata operations performed by snapshots.
    pub snapshot_meta_ops: u64,
    pub extent_bytes_copied: u64,
}

pub struct FsState {
    extents: HashMap<u64, ExtentEntry>,
    versions: HashMap<u64, VersionEntry>,
    layers: HashMap<u64, Layer>,
    next_extent: u64,
    next_version: u64,
    next_layer: u64,
    next_view: u64,
    pub counters: FsCounters,
    pub admission_log: Vec<AdmissionRecord>,
}

impl Default for FsState {
    fn default() -> Self {
        Self::new()
    }
}

impl FsState {
    pub fn new() -> Self {
        FsState {
            extents: HashMap::new(),
            versions: HashMap::new(),
            layers: HashMap::new(),
            next_extent: 1,
            next_version: 1,
            next_layer: 1,
            next_view: 1,
            counters: FsCounters::default(),
            admission_log: Vec::new(),
        }
    }

    fn alloc_extent(&mut self, content: Vec<u8>) -> ExtentId {
        debug_assert_eq!(content.len() % PAGE_SIZE, 0);
        let id = self.next_extent;
        self.next_extent += 1;
        self.extents.insert(
            id,
            ExtentEntry {
                content: Arc::new(content),
                refs: 1,
            },
        );
        ExtentId(id)
    }

    fn incref_extent(&mut self, id: ExtentId) {
        self.extents.get_mut(&id.0).expect("extent").refs += 1;
    }

    fn decref_extent(&mut self, id: ExtentId) {
        let e = self.extents.get_mut(&id.0).expect("extent");
        e.refs -= 1;
        if e.refs == 0 {
            self.extents.remove(&id.0);
        }
    }

    pub fn extent_refs(&self, id: ExtentId) -> u32 {
        self.extents[&id.0].refs
    }

    /// Build the initial version from full file contents, chunked into
    /// fixed-size extents.
    pub fn create_version(&mut self, files: &BTreeMap<String, Vec<u8>>) -> FsVersionId {
        let mut map = BTreeMap::new();
        for (path, content) in files {
            debug_assert_eq!(content.len() % PAGE_SIZE, 0, "files sized in pages");
            let pages = (content.len() / PAGE_SIZE) as u64;
            let mut slices = Vec::new();
            let mut page = 0u64;
            while page < pages {
                let len = EXTENT_PAGES.min(pages - page);
                let start = (page as usize) * PAGE_SIZE;
                let end = start + (len as usize) * PAGE_SIZE;
                let extent = self.alloc_extent(content[start..end].to_vec());
                slices.push(Slice {
                    extent,
                    offset: 0,
                    len,
                });
                page += len;
            }
            map.insert(path.clone(), FileMeta { pages, slices });
        }
        let id = self.next_version;
        self.next_version += 1;
        self.versions.insert(id, VersionEntry { files: map, refs: 1 });
        FsVersionId(id)
    }

    /// Snapshot a version: new version sharing every extent. O(metadata)
    /// work, zero content copies.
    pub fn snapshot_version(&mut self, src: FsVersionId) -> FsVersionId {
        let files = self.versions[&src.0].files.clone();
        for meta in files.values() {
            for s in &meta.slices {
                self.incref_extent(s.extent);
            }
        }
        self.counters.snapshot_meta_ops += files.len() as u64;
        let id = self.next_version;
        self.next_version += 1;
        self.versions.insert(id, VersionEntry { files, refs: 1 });
        FsVersionId(id)
    }

    /// Duplicate a version with fresh extents (eager whole-machine copy).
    pub fn deep_copy_version(&mut self, src: FsVersionId) -> FsVersionId {
        let files = self.versions[&src.0].files.clone();
        let mut map = BTreeMap::new();
        for (path, meta) in files {
            let mut slices = Vec::new();
            for s in &meta.slices {
                let content = {
                    let src_content = &self.extents[&s.extent.0].content;
                    let start = (s.offset as usize) * PAGE_SIZE;
                    let end = start + (s.len as usize) * PAGE_SIZE;
                    src_content[start..end].to_vec()
                };
                self.counters.extent_bytes_copied += content.len() as u64;
                let extent = self.alloc_extent(content);
                slices.push(Slice {
                    extent,
                    offset: 0,
                    len: s.len,
                });
            }
            map.insert(
                path,
                FileMeta {
                    pages: meta.pages,
                    slices,
                },
            );
        }
        let id = self.next_version;
        self.next_version += 1;
        self.versions.insert(id, VersionEntry { files: map, refs: 1 });
        FsVersionId(id)
    }

    pub fn retain_version(&mut self, id: FsVersionId) {
        self.versions.get_mut(&id.0).expect("version").refs += 1;
    }

    pub fn release_version(&mut self, id: FsVersionId) {
        let entry = self.versions.get_mut(&id.0).expect("version");
        entry.refs -= 1;
        if entry.refs == 0 {
            let files = self.versions.remove(&id.0).unwrap().files;
            for meta in files.values() {
                for s in &meta.slices {
                    self.decref_extent(s.extent);
                }
            }
        }
    }

    /// Total file pages across a version (eager-copy cost accounting).
    pub fn version_total_pages(&self, version: FsVersionId) -> u64 {
        self.versions[&version.0]
            .files
            .values()
            .map(|m| m.pages)
            .sum()
    }

    pub fn version_paths(&self, version: FsVersionId) -> Vec<String> {
        self.versions[&version.0].files.keys().cloned().collect()
    }

    pub fn file_pages(&self, version: FsVersionId, path: &str) -> Option<u64> {
        self.versions[&version.0].files.get(path).map(|m| m.pages)
    }

    /// The extent backing (path, page) in a version, if present.
    pub fn extent_at(&self, version: FsVersionId, path: &str, page: u64) -> Option<ExtentId> {
        let meta = self.versions[&version.0].files.get(path)?;
        let (idx, _) = meta.locate(page)?;
        Some(meta.slices[idx].extent)
    }

    fn storage_bytes(&self, version: FsVersionId, path: &str, page: u64) -> Result<Page> {
        let meta = self.versions[&version.0]
            .files
            .get(path)
            .ok_or_else(|| Error::MissingPath(path.to_string()))?;
        if page >= meta.pages {
            return Err(Error::PageOutOfRange {
                path: path.to_string(),
                page,
                pages: meta.pages,
            });
        }
        let (idx, within) = meta.locate(page).expect("page within file");
        let s = &meta.slices[idx];
        let content = &self.extents[&s.extent.0].content;
        let start = ((s.offset + within) as usize) * PAGE_SIZE;
        let mut out = [0u8; PAGE_SIZE];
        out.copy_from_slice(&content[start..start + PAGE_SIZE]);
        Ok(out)
    }

    /// Resolve one page through a version's extents without touching any
    /// cache state.
    pub fn resolve_page(&self, version: FsVersionId, path: &str, page: u64) -> Option<Page> {
        self.storage_bytes(version, path, page).ok()
    }

    /// Resolve a full file through a version's extents.
    pub fn resolve_file(&self, version: FsVersionId, path: &str) -> Option<Vec<u8>> {
        let meta = self.versions[&version.0].files.get(path)?;
        let mut out = Vec::with_capacity((meta.pages as usize) * PAGE_SIZE);
        for s in &meta.slices {
            let content = &self.extents[&s.extent.0].content;
            let start = (s.offset as usize) * PAGE_SIZE;
            out.extend_from_slice(&content[start..start + (s.len as usize) * PAGE_SIZE]);
        }
        Some(out)
    }

    pub fn new_view(&mut self, version: FsVersionId, head: Option<LayerId>) -> FsView {
        if let Some(h) = head {
            self.retain_layer(h);
        }
        let id = self.next_view;
        self.next_view += 1;
        FsView {
            id,
            fs_version: version,
            head,
            cache: BTreeMap::new(),
        }
    }

    /// Seal the view's current private cache into a new read-only layer
    /// whose parent is the previous chain head. The view continues on top
    /// of the new layer with an empty private cache.
    pub fn seal_layer(&mut self, view: &mut FsView, origin: FsVersionId) -> LayerId {
        self.retain_version(origin);
        let entries = std::mem::take(&mut view.cache);
        let parent = view.head;
        let id = self.next_layer;
        self.next_layer += 1;
        self.layers.insert(
            id,
            Layer {
                entries,
                parent,
                origin,
                sealed: true,
                refs: 1, // the sealing view's head reference
            },
        );
        // The view's reference on the old head transfers to the new layer's
        // parent link.
        view.head = Some(LayerId(id));
        LayerId(id)
    }

    pub fn retain_layer(&mut self, id: LayerId) {
        self.layers.get_mut(&id.0).expect("layer").refs += 1;
    }

    pub fn release_layer(&mut self, id: LayerId, pages: &PageStore) {
        let mut cur = Some(id);
        while let Some(lid) = cur {
            let layer = self.layers.get_mut(&lid.0).expect("layer");
            layer.refs -= 1;
            if layer.refs > 0 {
                break;
            }
            let layer = self.layers.remove(&lid.0).unwrap();
            for page in layer.entries.values() {
                pages.decref(*page);
            }
            self.release_version(layer.origin);
            cur = layer.parent;
        }
    }

    pub fn layer(&self, id: LayerId) -> Option<&Layer> {
        self.layers.get(&id.0)
    }

    /// Stable content hash of a sealed layer (entry map plus resolved page
    /// bytes), used by the immutability-under-fuzzing checks.
    pub fn layer_hash(&self, id: LayerId, pages: &PageStore) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let layer = &self.layers[&id.0];
        let mut h = Sha256::new();
        for ((path, page), pid) in &layer.entries {
            h.update(path.as_bytes());
            h.update(page.to_le_bytes());
            h.update(&pages.read(*pid)[..]);
        }
        h.finalize().into()
    }

    /// The admission check: a layer entry may be served to a view only when
    /// the backing extent of (path, page) is the same in the layer's origin
    /// version and the view's version.
    pub fn admit(&self, layer: LayerId, view: &FsView, path: &str, page: u64) -> bool {
        let origin = self.layers[&layer.0].origin;
        match (
            self.extent_at(origin, path, page),
            self.extent_at(view.fs_version, path, page),
        ) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        }
    }

    /// Read one page through a view: private cache, then the layer chain
    /// (admission-checked), then the view's own storage extents. Chain hits
    /// and storage fills are mapped into the private cache, so repeat reads
    /// cost zero probes.
    pub fn read(
        &mut self,
        view: &mut FsView,
        pages: &PageStore,
        path: &str,
        page: u64,
    ) -> Result<(Arc<Page>, ReadStats)> {
        if !self.versions[&view.fs_version.0].files.contains_key(path) {
            return Err(Error::MissingPath(path.to_string()));
        }
        let key = (path.to_string(), page);
        if let Some(pid) = view.cache.get(&key) {
            return Ok((
                pages.read(*pid),
                ReadStats {
                    probes: 0,
                    storage: false,
                    cache_hit: true,
                },
            ));
        }
        let mut probes = 0u32;
        let mut cur = view.head;
        while let Some(lid) = cur {
            probes += 1;
            self.counters.probes += 1;
            let layer = &self.layers[&lid.0];
            if let Some(pid) = layer.entries.get(&key).copied() {
                if self.admit(lid, view, path, page) {
                    let layer_extent = self
                        .extent_at(self.layers[&lid.0].origin, path, page)
                        .expect("admitted extent");
                    let view_extent = self
                        .extent_at(view.fs_version, path, page)
                        .expect("admitted extent");
                    self.admission_log.push(AdmissionRecord {
                        layer: lid,
                        path: path.to_string(),
                        page,
                        layer_extent,
                        view_extent,
                    });
                    // Map the shared page read-only into the view.
                    pages.incref(pid);
                    view.cache.insert(key, pid);
                    return Ok((
                        pages.read(pid),
                        ReadStats {
                            probes,
                            storage: false,
                            cache_hit: false,
                        },
                    ));
                }
            }
            cur = layer.parent;
        }
        // Fall back to the view's own extents.
        self.counters.storage_reads += 1;
        let bytes = self.storage_bytes(view.fs_version, path, page)?;
        let pid = pages.alloc_copy(&bytes, CopyCause::CacheFill);
        view.cache.insert(key, pid);
        Ok((
            pages.read(pid),
            ReadStats {
                probes,
                storage: true,
                cache_hit: false,
            },
        ))
    }

    /// Write one page through a view: materialize a private cache page and
    /// replace the covering extent range with fresh extents in the view's
    /// version only. Sealed layers and sibling views are never touched.
    pub fn write(
        &mut self,
        view: &mut FsView,
        pages: &PageStore,
        path: &str,
        page: u64,
        bytes: &Page,
    ) -> Result<()> {
        {
            let meta = self.versions[&view.fs_version.0]
                .files
                .get(path)
                .ok_or_else(|| Error::MissingPath(path.to_string()))?;
            if page >= meta.pages {
                return Err(Error::PageOutOfRange {
                    path: path.to_string(),
                    page,
                    pages: meta.pages,
                });
            }
        }
        let key = (path.to_string(), page);
        match view.cache.get(&key).copied() {
            Some(pid) if pages.refs(pid) == 1 => {
                pages.write_in_place(pid, |p| p.copy_from_slice(bytes));
            }
            Some(pid) => {
                // Shared with a layer or a holder of some kind: copy out.
                let fresh = pages.alloc_copy(bytes, CopyCause::CowBreak);
                pages.decref(pid);
                view.cache.insert(key, fresh);
            }
            None => {
                let fresh = pages.alloc(Arc::new(*bytes));
                view.cache.insert(key, fresh);
            }
        }
        self.replace_extent_range(view.fs_version, path, page, bytes);
        Ok(())
    }

    /// Split the slice covering `page` and point the written page at a
    /// fresh single-page extent.
    fn replace_extent_range(&mut self, version: FsVersionId, path: &str, page: u64, bytes: &Page) {
        let meta = self
            .versions
            .get_mut(&version.0)
            .expect("version")
            .files
            .get_mut(path)
            .expect("checked above");
        let (idx, within) = meta.locate(page).expect("page within file");
        let old = meta.slices[idx].clone();
        let mut replacement = Vec::with_capacity(3);
        if within > 0 {
            replacement.push(Slice {
                extent: old.extent,
                offset: old.offset,
                len: within,
            });
        }
        // Fresh extent for the written page; content allocated below once
        // the borrow of the file meta ends.
        replacement.push(Slice {
            extent: ExtentId(0), // patched after allocation
            offset: 0,
            len: 1,
        });
        if within + 1 < old.len {
            replacement.push(Slice {
                extent: old.extent,
                offset: old.offset + within + 1,
                len: old.len - within - 1,
            });
        }
        let fresh_idx = usize::from(within > 0);
        let old_occurrences = replacement
            .iter()
            .filter(|s| s.extent == old.extent)
            .count() as i64;
        meta.slices.splice(idx..=idx, replacement);
        self.counters.extent_bytes_copied += PAGE_SIZE as u64;
        let fresh = self.alloc_extent(bytes.to_vec());
        let meta = self
            .versions
            .get_mut(&version.0)
            .unwrap()
            .files
            .get_mut(path)
            .unwrap();
        meta.slices[idx + fresh_idx].extent = fresh;
        // Balance the old extent's slice-occurrence refcount.
        match old_occurrences {
            0 => self.decref_extent(old.extent),
            1 => {}
            2 => self.incref_extent(old.extent),
            _ => unreachable!(),
        }
    }

    pub fn release_view(&mut self, view: FsView, pages: &PageStore) {
        for pid in view.cache.values() {
            pages.decref(*pid);
        }
        if let Some(h) = view.head {
            self.release_layer(h, pages);
        }
        self.release_version(view.fs_version);
    }

    pub fn unique_extent_bytes(&self) -> u64 {
        self.extents.values().map(|e| e.content.len() as u64).sum()
    }

    pub fn extent_count(&self) -> usize {
        self.extents.len()
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_ids(&self) -> Vec<LayerId> {
        let mut ids: Vec<LayerId> = self.layers.keys().map(|k| LayerId(*k)).collect();
        ids.sort();
        ids
    }

    /// Page references held by sealed layers and counted in the store audit.
    pub fn layer_page_refs(&self) -> Vec<PageId> {
        self.layers
            .values()
            .flat_map(|l| l.entries.values().copied())
            .collect()
    }

    /// Extent refcount audit: every extent's refcount must equal its slice
    /// occurrences across live versions.
    pub fn audit_extents(&self) -> std::result::Result<(), String> {
        let mut expected: HashMap<u64, u32> = HashMap::new();
        for v in self.versions.values() {
            for meta in v.files.values() {
                for s in &meta.slices {
                    *expected.entry(s.extent.0).or_insert(0) += 1;
                }
            }
        }
        for (id, e) in &self.extents {
            let want = expected.get(id).copied().unwrap_or(0);
            if e.refs != want {
                return Err(format!(
                    "extent {id}: refcount {} but {want} slice occurrences",
                    e.refs
                ));
            }
        }
        for (id, want) in &expected {
            if !self.extents.contains_key(id) {
                return Err(format!("extent {id}: {want} occurrences but missing"));
            }
        }
        Ok(())
    }

    /// Verify every served layer hit matched extent ids at serve time.
    pub fn audit_admissions(&self) -> std::result::Result<(), String> {
        for rec in &self.admission_log {
            if rec.layer_extent != rec.view_extent {
                return Err(format!(
                    "layer {} served ({}, {}) with diverged extents {} vs {}",
                    rec.layer, rec.path, rec.page, rec.layer_extent, rec.view_extent
                ));
            }
        }
        Ok(())
    }

    /// Persist the extent store to a directory of content-addressed block
    /// files plus an index.
    pub fn persist_extents(&self, dir: &std::path::Path) -> Result<()> {
        use sha2::{Digest, Sha256};
        let blocks = dir.join("blocks");
        std::fs::create_dir_all(&blocks).map_err(|e| Error::io(&blocks, e))?;
        let mut index: BTreeMap<u64, ExtentIndexEntry> = BTreeMap::new();
        for (id, e) in &self.extents {
            let hash = hex::encode(Sha256::digest(e.content.as_slice()));
            let path = blocks.join(format!("{hash}.bin"));
            if !path.exists() {
                let mut f = std::fs::File::create(&path).map_err(|er| Error::io(&path, er))?;
                f.write_all(&e.content).map_err(|er| Error::io(&path, er))?;
            }
            index.insert(
                *id,
                ExtentIndexEntry {
                    hash,
                    pages: (e.content.len() / PAGE_SIZE) as u64,
                    refs: e.refs,
                },
            );
        }
        let index_path = dir.join("index.json");
        let json = serde_json::to_vec_pretty(&index)?;
        std::fs::write(&index_path, json).map_err(|e| Error::io(&index_path, e))?;
        Ok(())
    }

    /// Load a persisted extent store into this (empty) state.
    pub fn load_extents(&mut self, dir: &std::path::Path) -> Result<()> {
        let index_path = dir.join("index.json");
        let raw = std::fs::read(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: BTreeMap<u64, ExtentIndexEntry> = serde_json::from_slice(&raw)?;
        for (id, entry) in index {
            let path = dir.join("blocks").join(format!("{}.bin", entry.hash));
            let content = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            self.extents.insert(
                id,
                ExtentEntry {
                    content: Arc::new(content),
                    refs: entry.refs,
                },
            );
            self.next_extent = self.next_extent.max(id + 1);
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ExtentIndexEntry {
    hash: String,
    pages: u64,
    refs: u32,
}
