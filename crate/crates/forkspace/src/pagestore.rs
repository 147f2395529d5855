//! Reference-counted page pool and shared per-VMA page tables.
//!
//! Sharing model: a [`VmaTable`] maps slots to page ids. Tables are handed
//! out as `Arc<VmaTable>`; forking a region or creating a snapshot holder
//! clones the `Arc`, so branch creation does no per-page work at all. A
//! page's refcount counts slot references from *distinct* table objects
//! (plus direct owners such as cache entries and GUI buffers). The first
//! write through a shared table first diverges the table — clones it and
//! bumps the refcount of every page it maps — and only then decides between
//! an in-place write (sole owner) and a copy-on-write break.
//!
//! Invariant: a page referenced by more than one owner is never mutated in
//! place, so every holder and sealed layer resolves the bytes it was created
//! over, forever.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use crate::ids::PageId;
use crate::{Page, PAGE_SIZE};

/// One per-VMA page table: slot -> page. Absent slots model never-touched
/// pages. Shared between branches and snapshot holders via `Arc`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VmaTable {
    pub slots: Vec<Option<PageId>>,
    /// Materialized slot count, maintained by writers so freeze-time
    /// bookkeeping never scans slots.
    pub present: u64,
}

impl VmaTable {
    pub fn empty(len_pages: u64) -> Self {
        VmaTable {
            slots: vec![None; len_pages as usize],
            present: 0,
        }
    }

    pub fn from_slots(slots: Vec<Option<PageId>>) -> Self {
        let present = slots.iter().filter(|s| s.is_some()).count() as u64;
        VmaTable { slots, present }
    }
}

pub type SharedTable = Arc<VmaTable>;

struct PageEntry {
    content: Arc<Page>,
    refs: u32,
}

struct Inner {
    pages: HashMap<u64, PageEntry>,
    next: u64,
}

/// Why a page-content copy happened; each cause has its own counter so the
/// zero-copy fork discipline is checkable independently of cache fills and
/// branch-local (GUI / shared-segment) reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CopyCause {
    /// Copy-on-write break on first write to a shared page.
    CowBreak,
    /// Eager clone-time materialization (baseline strategies).
    EagerClone,
    /// Restore from a durable checkpoint image.
    Restore,
    /// Filesystem cache fill from storage extents.
    CacheFill,
    /// Branch-local reconstruction: GUI buffers and shared-memory segments.
    BranchLocal,
}

#[derive(Debug, Default)]
pub struct CopyCounters {
    pub cow_break: AtomicU64,
    pub eager_clone: AtomicU64,
    pub restore: AtomicU64,
    pub cache_fill: AtomicU64,
    pub branch_local: AtomicU64,
}

impl CopyCounters {
    fn add(&self, cause: CopyCause, bytes: u64) {
        let c = match cause {
            CopyCause::CowBreak => &self.cow_break,
            CopyCause::EagerClone => &self.eager_clone,
            CopyCause::Restore => &self.restore,
            CopyCause::CacheFill => &self.cache_fill,
            CopyCause::BranchLocal => &self.branch_local,
        };
        c.fetch_add(bytes, Ordering::Relaxed);
    }

    /// Bytes copied through the CoW-managed path. This is the counter the
    /// zero-copy fork discipline asserts on; cache fills and branch-local
    /// buffers are tracked separately.
    pub fn cow_managed_bytes(&self) -> u64 {
        self.cow_break.load(Ordering::Relaxed)
            + self.eager_clone.load(Ordering::Relaxed)
            + self.restore.load(Ordering::Relaxed)
    }

    pub fn snapshot(&self) -> CopySnapshot {
        CopySnapshot {
            cow_break: self.cow_break.load(Ordering::Relaxed),
            eager_clone: self.eager_clone.load(Ordering::Relaxed),
            restore: self.restore.load(Ordering::Relaxed),
            cache_fill: self.cache_fill.load(Ordering::Relaxed),
            branch_local: self.branch_local.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CopySnapshot {
    pub cow_break: u64,
    pub eager_clone: u64,
    pub restore: u64,
    pub cache_fill: u64,
    pub branch_local: u64,
}

impl CopySnapshot {
    pub fn cow_managed(&self) -> u64 {
        self.cow_break + self.eager_clone + self.restore
    }
}

/// Reference-counted page pool shared by all branches, holders, layers, and
/// GUI buffers of one engine.
pub struct PageStore {
    inner: RwLock<Inner>,
    pub counters: CopyCounters,
}

impl Default for PageStore {
    fn default() -> Self {
        Self::new()
    }
}

impl PageStore {
    pub fn new() -> Self {
        PageStore {
            inner: RwLock::new(Inner {
                pages: HashMap::new(),
                next: 1,
            }),
            counters: CopyCounters::default(),
        }
    }

    /// Insert a page with refcount 1. The caller supplies the content
    /// already materialized so heavy copies happen outside the lock.
    pub fn alloc(&self, content: Arc<Page>) -> PageId {
        let mut g = self.inner.write().unwrap();
        let id = g.next;
        g.next += 1;
        g.pages.insert(id, PageEntry { content, refs: 1 });
        PageId::new(id)
    }

    /// Allocate a page whose content is copied from `src`, attributing the
    /// copy to `cause`.
    pub fn alloc_copy(&self, src: &Page, cause: CopyCause) -> PageId {
        let content: Arc<Page> = Arc::new(*src);
        self.counters.add(cause, PAGE_SIZE as u64);
        self.alloc(content)
    }

    /// Allocate many pages under one lock acquisition. The contents are
    /// materialized by the caller beforehand; parallel restores would
    /// otherwise serialize on per-page inserts.
    pub fn alloc_batch(&self, contents: Vec<Arc<Page>>, cause: Option<CopyCause>) -> Vec<PageId> {
        if let Some(cause) = cause {
            self.counters
                .add(cause, (contents.len() * PAGE_SIZE) as u64);
        }
        let mut g = self.inner.write().unwrap();
        let mut out = Vec::with_capacity(contents.len());
        for content in contents {
            let id = g.next;
            g.next += 1;
            g.pages.insert(id, PageEntry { content, refs: 1 });
            out.push(PageId::new(id));
        }
        out
    }

    pub fn incref(&self, id: PageId) {
        let mut g = self.inner.write().unwrap();
        g.pages
            .get_mut(&id.raw())
            .expect("incref of missing page")
            .refs += 1;
    }

    /// Drop one reference; frees the page at zero.
    pub fn decref(&self, id: PageId) {
        let mut g = self.inner.write().unwrap();
        let entry = g.pages.get_mut(&id.raw()).expect("decref of missing page");
        entry.refs -= 1;
        if entry.refs == 0 {
            g.pages.remove(&id.raw());
        }
    }

    pub fn refs(&self, id: PageId) -> u32 {
        self.inner.read().unwrap().pages[&id.raw()].refs
    }

    pub fn read(&self, id: PageId) -> Arc<Page> {
        Arc::clone(&self.inner.read().unwrap().pages[&id.raw()].content)
    }

    /// In-place mutation of a sole-owner page. Panics when the page is
    /// shared; callers must break CoW first.
    pub fn write_in_place(&self, id: PageId, f: impl FnOnce(&mut Page)) {
        let mut g = self.inner.write().unwrap();
        let entry = g
            .pages
            .get_mut(&id.raw())
            .expect("write to missing page");
        assert_eq!(entry.refs, 1, "in-place write to a shared page");
        // A transient reader may still hold the content Arc; make_mut then
        // copies for the writer and the reader keeps its stable view.
        f(Arc::make_mut(&mut entry.content));
    }

    pub fn page_count(&self) -> usize {
        self.inner.read().unwrap().pages.len()
    }

    pub fn unique_bytes(&self) -> u64 {
        (self.page_count() as u64) * PAGE_SIZE as u64
    }

    /// Divergence point of the table-sharing scheme: ensure `table` is
    /// exclusively owned, cloning it and bumping the refcount of every page
    /// it maps when it was shared. Returns true when a clone happened.
    ///
    /// All clone/drop sites of a table family are serialized by the engine
    /// state lock, so the strong count is a reliable sharing test here.
    pub fn own_table(&self, table: &mut SharedTable) -> bool {
        if Arc::strong_count(table) == 1 {
            return false;
        }
        let cloned = VmaTable {
            slots: table.slots.clone(),
            present: table.present,
        };
        {
            let mut g = self.inner.write().unwrap();
            for id in cloned.slots.iter().flatten() {
                g.pages.get_mut(&id.raw()).expect("shared table page").refs += 1;
            }
        }
        *table = Arc::new(cloned);
        true
    }

    /// Release one ownership of a table. Only the last owner returns the
    /// mapped pages' references.
    pub fn release_table(&self, table: SharedTable) {
        if Arc::strong_count(&table) == 1 {
            let mut g = self.inner.write().unwrap();
            for id in table.slots.iter().flatten() {
                let entry = g.pages.get_mut(&id.raw()).expect("released table page");
                entry.refs -= 1;
                if entry.refs == 0 {
                    g.pages.remove(&id.raw());
                }
            }
        }
        drop(table);
    }

    /// Full refcount audit: every page's refcount must equal the number of
    /// slot references from distinct table objects plus the direct
    /// references reported by the caller, and no other pages may exist.
    pub fn audit(
        &self,
        tables: impl Iterator<Item = SharedTable>,
        direct_refs: impl Iterator<Item = PageId>,
    ) -> std::result::Result<(), String> {
        let mut expected: HashMap<u64, u32> = HashMap::new();
        let mut seen: HashMap<*const VmaTable, ()> = HashMap::new();
        for t in tables {
            let ptr = Arc::as_ptr(&t);
            if seen.insert(ptr, ()).is_some() {
                continue;
            }
            for id in t.slots.iter().flatten() {
                *expected.entry(id.raw()).or_insert(0) += 1;
            }
        }
        for id in direct_refs {
            *expected.entry(id.raw()).or_insert(0) += 1;
        }
        let g = self.inner.read().unwrap();
        for (id, entry) in &g.pages {
            let want = expected.get(id).copied().unwrap_or(0);
            if entry.refs != want {
                return Err(format!(
                    "page {id}: refcount {} but {} live references",
                    entry.refs, want
                ));
            }
        }
        for (id, want) in &expected {
            if !g.pages.contains_key(id) {
                return Err(format!("page {id}: {want} references but not in store"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn page(fill: u8) -> Arc<Page> {
        Arc::new([fill; PAGE_SIZE])
    }

    #[test]
    fn alloc_read_release() {
        let store = PageStore::new();
        let id = store.alloc(page(7));
        assert_eq!(store.refs(id), 1);
        assert_eq!(store.read(id)[0], 7);
        store.decref(id);
        assert_eq!(store.page_count(), 0);
    }

    #[test]
    fn shared_table_divergence_bumps_refcounts() {
        let store = PageStore::new();
        let a = store.alloc(page(1));
        let b = store.alloc(page(2));
        let mut table: SharedTable = Arc::new(VmaTable::from_slots(vec![Some(a), None, Some(b)]));
        let holder = Arc::clone(&table);

        assert_eq!(store.refs(a), 1);
        assert!(store.own_table(&mut table));
        assert_eq!(store.refs(a), 2);
        assert_eq!(store.refs(b), 2);
        // Now two distinct table objects; releasing each returns its refs.
        store.release_table(table);
        assert_eq!(store.refs(a), 1);
        store.release_table(holder);
        assert_eq!(store.page_count(), 0);
    }

    #[test]
    fn own_table_is_noop_when_unshared() {
        let store = PageStore::new();
        let a = store.alloc(page(1));
        let mut table: SharedTable = Arc::new(VmaTable::from_slots(vec![Some(a)]));
        assert!(!store.own_table(&mut table));
        assert_eq!(store.refs(a), 1);
        store.release_table(table);
    }

    #[test]
    fn release_of_shared_table_keeps_pages() {
        let store = PageStore::new();
        let a = store.alloc(page(9));
        let table: SharedTable = Arc::new(VmaTable::from_slots(vec![Some(a)]));
        let dup = Arc::clone(&table);
        store.release_table(dup);
        assert_eq!(store.refs(a), 1);
        store.release_table(table);
        assert_eq!(store.page_count(), 0);
    }

    #[test]
    fn audit_detects_leak() {
        let store = PageStore::new();
        let a = store.alloc(page(3));
        let table: SharedTable = Arc::new(VmaTable::from_slots(vec![Some(a)]));
        assert!(store
            .audit([Arc::clone(&table)].into_iter(), std::iter::empty())
            .is_ok());
        // A stray incref must be caught.
        store.incref(a);
        assert!(store
            .audit([Arc::clone(&table)].into_iter(), std::iter::empty())
            .is_err());
        store.decref(a);
        store.release_table(table);
    }

    #[test]
    #[should_panic(expected = "in-place write to a shared page")]
    fn in_place_write_refuses_shared_pages() {
        let store = PageStore::new();
        let a = store.alloc(page(0));
        store.incref(a);
        store.write_in_place(a, |p| p[0] = 1);
    }
}
