//! Synthetic workload generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    ConnKind, ConnState, ConnStatus, DescTarget, Descriptor, Endpoint, EndpointHost, GuiState,
    MemoryClass, ProcMeta, ProcessState, ProtoState, RegionState, WorkspaceSpec, WorkspaceState,
};
use crate::error::Result;
use crate::ids::{ConnId, GuiId, LocalPid, VmaId};
use crate::{PageBuf, PAGE_SIZE};

/// Deterministic page fill: cheap non-cryptographic spread of the seed so
/// multi-gigabyte fixtures build at memory speed.
pub(crate) fn fill_page(seed: u64) -> PageBuf {
    let mut page = Box::new([0u8; PAGE_SIZE]);
    let mut x = seed ^ 0x9e37_79b9_7f4a_7c15;
    for chunk in page.chunks_exact_mut(8) {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        chunk.copy_from_slice(&x.to_le_bytes());
    }
    page
}

pub(crate) fn file_content(seed: u64, path: &str, pages: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity((pages as usize) * PAGE_SIZE);
    let path_hash = path
        .bytes()
        .fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
    for p in 0..pages {
        out.extend_from_slice(&fill_page(seed ^ path_hash ^ (p << 24))[..]);
    }
    out
}

fn blob(rng: &mut ChaCha8Rng, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    rng.fill(&mut v[..]);
    v
}

/// Transport state mid-stream: delivered plus in-flight bytes, with the
/// send sequence coherent with both.
fn seeded_proto(rng: &mut ChaCha8Rng) -> ProtoState {
    let delivered = rng.gen_range(0..1u64 << 20);
    let len = rng.gen_range(0..32);
    let inflight = blob(rng, len);
    ProtoState {
        next_send_seq: delivered + inflight.len() as u64,
        delivered_seq: delivered,
        inflight,
    }
}

/// Build a workspace from a spec. The result satisfies every model
/// invariant and is bit-identical across calls with the same spec.
///
/// Host pids are left unassigned (zero); the engine allocates them when the
/// workspace is installed.
pub fn build_workspace(spec: &WorkspaceSpec) -> Result<WorkspaceState> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.tree_seed);
    let n = spec.processes as usize;
    let total_anon = spec.total_anon_pages()?;

    // Process tree: pid 1 is the root, every later pid attaches to a random
    // earlier one.
    let mut parents: Vec<Option<LocalPid>> = vec![None];
    for i in 1..n {
        let parent = rng.gen_range(0..i) as u32 + 1;
        parents.push(Some(LocalPid(parent)));
    }

    // Distribute anonymous pages over processes and 1-4 regions each.
    let base_share = total_anon / n as u64;
    let remainder = total_anon % n as u64;
    let mut vma_counter = 1u64;
    let mut processes = Vec::with_capacity(n);
    for (i, parent) in parents.iter().enumerate() {
        let pid = LocalPid(i as u32 + 1);
        let mut regions = Vec::new();
        let mut anon_share = base_share + if (i as u64) < remainder { 1 } else { 0 };
        let region_count = if anon_share == 0 {
            0
        } else {
            rng.gen_range(1..=4u64).min(anon_share)
        };
        // Region lengths come from fixed-modulus weights so the generator's
        // draw stream (and with it the workspace's structural shape) is
        // identical across address-space sizes.
        let weights: Vec<u64> = (0..region_count).map(|_| rng.gen_range(1..=100u64)).collect();
        let weight_sum: u64 = weights.iter().sum::<u64>().max(1);
        let total_share = anon_share;
        let mut start_page = 0x1000u64;
        for r in 0..region_count {
            let len = if r == region_count - 1 {
                anon_share
            } else {
                let proportional = (total_share * weights[r as usize] / weight_sum).max(1);
                proportional.min(anon_share - (region_count - r - 1))
            };
            anon_share -= len;
            let resident = (len as f64 * spec.resident_fraction).round() as u64;
            let mut pages: Vec<Option<PageBuf>> = Vec::with_capacity(len as usize);
            for slot in 0..len {
                if slot < resident {
                    pages.push(Some(fill_page(
                        spec.tree_seed ^ (vma_counter << 32) ^ slot,
                    )));
                } else {
                    pages.push(None);
                }
            }
            regions.push(RegionState {
                vma_id: VmaId(vma_counter),
                class: MemoryClass::Anonymous,
                start_page,
                len_pages: len,
                backing_file: None,
                backing_page_offset: 0,
                pages,
            });
            start_page += len + 16;
            vma_counter += 1;
        }
        processes.push(ProcessState {
            meta: ProcMeta {
                host_pid: 0,
                local_pid: pid,
                parent: *parent,
                descriptors: Vec::new(),
                registers: blob(&mut rng, 64),
                tls: blob(&mut rng, 32),
                signals: blob(&mut rng, 16),
                futex: blob(&mut rng, 16),
            },
            regions,
        });
    }

    // Files, plus one file-backed region per mapped file on a random process.
    let mut files = std::collections::BTreeMap::new();
    for f in &spec.file_manifest {
        files.insert(f.path.clone(), file_content(spec.tree_seed, &f.path, f.pages));
    }
    let mapped: Vec<&super::FileSpec> = spec
        .file_manifest
        .iter()
        .filter(|f| f.pages > 0)
        .take(8)
        .collect();
    for f in &mapped {
        let owner = rng.gen_range(0..n);
        let map_pages = f.pages.min(4);
        let start_page = 0x8000 + vma_counter * 64;
        // File-backed regions start with no private pages; clean content
        // reads through the filesystem view.
        processes[owner].regions.push(RegionState {
            vma_id: VmaId(vma_counter),
            class: MemoryClass::FileBacked,
            start_page,
            len_pages: map_pages,
            backing_file: Some(f.path.clone()),
            backing_page_offset: 0,
            pages: vec![None; map_pages as usize],
        });
        let idx = processes[owner].meta.descriptors.len() as u32;
        processes[owner].meta.descriptors.push(Descriptor {
            index: idx,
            target: DescTarget::File {
                path: f.path.clone(),
            },
        });
        vma_counter += 1;
    }

    // Shared-memory segments, spread over processes.
    let mut shared_left = spec.shared_pages;
    let mut shared_idx = 0u64;
    while shared_left > 0 {
        let owner = rng.gen_range(0..n);
        let len = shared_left.min(rng.gen_range(1..=64u64));
        shared_left -= len;
        let pages = (0..len)
            .map(|slot| {
                Some(fill_page(
                    spec.tree_seed ^ 0xABCD ^ (vma_counter << 32) ^ slot,
                ))
            })
            .collect();
        processes[owner].regions.push(RegionState {
            vma_id: VmaId(vma_counter),
            class: MemoryClass::Shared,
            start_page: 0x4000_0000 + shared_idx * 4096,
            len_pages: len,
            backing_file: None,
            backing_page_offset: 0,
            pages,
        });
        vma_counter += 1;
        shared_idx += 1;
    }

    // Connections: internal loopback pairs between two workspace processes,
    // external ones to remote services.
    let mut connections = Vec::new();
    let mut conn_id = 1u64;
    for i in 0..spec.conn_mix.internal {
        let a = LocalPid(rng.gen_range(0..n) as u32 + 1);
        let b = LocalPid(rng.gen_range(0..n) as u32 + 1);
        let port = 40000 + i as u16;
        connections.push(ConnState {
            id: ConnId(conn_id),
            kind: ConnKind::Internal,
            local: Endpoint {
                host: EndpointHost::Process { local_pid: a },
                port,
            },
            remote: Endpoint {
                host: EndpointHost::Process { local_pid: b },
                port: 50000 + i as u16,
            },
            status: ConnStatus::Established,
            proto: seeded_proto(&mut rng),
        });
        conn_id += 1;
    }
    for i in 0..spec.conn_mix.external {
        let a = LocalPid(rng.gen_range(0..n) as u32 + 1);
        connections.push(ConnState {
            id: ConnId(conn_id),
            kind: ConnKind::External,
            local: Endpoint {
                host: EndpointHost::Process { local_pid: a },
                port: 32768 + i as u16,
            },
            remote: Endpoint {
                host: EndpointHost::Remote {
                    addr: format!("203.0.113.{}", i + 1),
                },
                port: 443,
            },
            status: ConnStatus::Established,
            proto: seeded_proto(&mut rng),
        });
        conn_id += 1;
    }
    // Wire connection descriptors into their local endpoint processes.
    for c in &connections {
        if let EndpointHost::Process { local_pid } = c.local.host {
            let p = processes
                .iter_mut()
                .find(|p| p.meta.local_pid == local_pid)
                .expect("endpoint pid exists");
            p.meta.descriptors.push(Descriptor {
                index: p.meta.descriptors.len() as u32,
                target: DescTarget::Conn { id: c.id },
            });
        }
    }

    let gui_buffers = spec
        .gui_buffers
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let pages = g.bytes / PAGE_SIZE as u64;
            GuiState {
                id: GuiId(i as u64 + 1),
                pages: (0..pages)
                    .map(|p| fill_page(spec.tree_seed ^ 0xF00D ^ ((i as u64) << 40) ^ p))
                    .collect(),
                mutation_rate_hint: g.mutation_rate_hint,
            }
        })
        .collect();

    Ok(WorkspaceState {
        namespace_id: 0,
        fs_view: 0,
        processes,
        files,
        connections,
        gui_buffers,
    })
}
