//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured evidence. Run with `--nocapture` to see the lines:
//!
//! ```text
//! cargo test -p forkspace --test acceptance -- --nocapture
//! ```

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use forkspace::checkpoint::{flatten_chain, image_dir, read_meta, read_pages, write_image};
use forkspace::harness::{
    gen_random, page_from_seed, replay, run_ablation, run_layer_bench, run_scalability,
    LayerModel, LayerOp, Workload,
};
use forkspace::model::{diff, ConnKind, ConnStatus, MemoryClass, WorkspaceSpec};
use forkspace::security::{
    compose_profile, record_profile, AccessEvent, ProfileRegistry, SecurityProfile, TraceOrigin,
};
use forkspace::{CloneStrategy, Engine, EngineConfig, LocalPid, VmaId, PAGE_SIZE};

fn pass(criterion: u32, name: &str, detail: String) {
    println!("ACCEPTANCE {criterion:02} ({name}): PASS — {detail}");
}

/// Least-squares slope and R^2 of y over x.
fn linear_fit(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points
        .iter()
        .map(|p| (p.1 - (slope * p.0 + intercept)).powi(2))
        .sum();
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    (slope, r2)
}

fn anon_targets(e: &Engine, b: forkspace::BranchId) -> Vec<(LocalPid, VmaId, u64)> {
    let ws = e.snapshot_state(b).unwrap();
    let mut out = Vec::new();
    for p in &ws.processes {
        for r in &p.regions {
            if r.class == MemoryClass::Anonymous {
                for slot in 0..r.len_pages {
                    out.push((p.meta.local_pid, r.vma_id, slot));
                }
            }
        }
    }
    out
}

#[test]
fn c01_oracle_equivalence_1000_traces() {
    let start = Instant::now();
    let config = EngineConfig {
        branch_cap: 8,
        ..EngineConfig::default()
    };
    let mut total_events = 0usize;
    let mut checked = 0usize;
    for seed in 0..1000u64 {
        let spec = WorkspaceSpec::small(seed % 7);
        // Mostly short traces, a long tail up to the 10^4-event cap.
        let max_events = match seed {
            0 => 10_000,
            s if s % 100 == 1 => 1_000,
            _ => 160,
        };
        let trace = gen_random(seed, max_events, &spec);
        total_events += trace.events.len();
        let workload = Workload {
            seed,
            workspace: spec,
            traces: vec![trace],
        };
        let rows = replay(&workload, &CloneStrategy::fast(), &config, true).unwrap();
        assert_eq!(
            rows[0].verify_diffs, 0,
            "trace {seed} diverged from the eager oracle"
        );
        checked += 1;
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        elapsed < 300.0,
        "runtime target exceeded: {elapsed:.1}s >= 300s"
    );
    pass(
        1,
        "oracle equivalence",
        format!("{checked} randomized traces ({total_events} events) bit-identical to the eager oracle in {elapsed:.1}s"),
    );
}

#[test]
fn c02_zero_copy_fork_and_freeze_size_independence() {
    // Browser-heavy fixture: 168 processes over 2 GiB of modeled address
    // space. fork(n=4) must copy zero CoW-managed page bytes.
    let spec = WorkspaceSpec::browser_heavy();
    assert_eq!(spec.processes, 168);
    assert_eq!(spec.total_anon_pages().unwrap() * PAGE_SIZE as u64, 2 << 30);
    let e = Engine::launch(EngineConfig::default(), &spec).unwrap();
    let v = e.record_version(e.human()).unwrap();
    let before = e.counters();
    let (branches, report) = e
        .clone_with(&CloneStrategy::fast(), v, 4, SecurityProfile::audit_all())
        .unwrap();
    let after = e.counters();
    assert_eq!(branches.len(), 4);
    assert_eq!(report.cow_copied_bytes, 0, "fork copied page content");
    assert_eq!(after.cow_managed(), before.cow_managed());
    drop(e);

    // Freeze-interval work over 10^3..10^6 anonymous pages: slope zero.
    let mut points = Vec::new();
    for pages in [1_000u64, 10_000, 100_000, 1_000_000] {
        let mut spec = WorkspaceSpec::small(2);
        spec.anon_pages = pages;
        spec.resident_fraction = (1000.0 / pages as f64).min(1.0);
        let e = Engine::launch(EngineConfig::default(), &spec).unwrap();
        let before = e.counters();
        let v = e.record_version(e.human()).unwrap();
        let afterc = e.counters();
        assert_eq!(afterc.cow_managed(), before.cow_managed());
        let ops = e.version_freeze_report(v).unwrap().total_ops();
        points.push((pages as f64, ops as f64));
    }
    let (slope, _) = linear_fit(&points);
    assert!(
        slope.abs() < 1e-9,
        "freeze work depends on page count: slope {slope}"
    );
    let ops: Vec<u64> = points.iter().map(|p| p.1 as u64).collect();
    assert!(ops.windows(2).all(|w| w[0] == w[1]));
    pass(
        2,
        "zero-copy fork",
        format!(
            "fork(n=4) copied 0 bytes on the 168-process fixture; freeze ops {:?} constant over 10^3..10^6 pages (slope {slope:.2e})",
            ops
        ),
    );
}

#[test]
fn c03_snapshot_holder_consistency_100_runs() {
    for run in 0..100u64 {
        let spec = WorkspaceSpec::small(run);
        let e = Engine::launch(EngineConfig::default(), &spec).unwrap();
        let human = e.human();
        let frozen = e.snapshot_state(human).unwrap();
        let v = e.record_version(human).unwrap();

        // Overwrite 100% of the source's anonymous pages after resume.
        let mut rng = ChaCha8Rng::seed_from_u64(run ^ 0xC0FFEE);
        for (pid, vma, slot) in anon_targets(&e, human) {
            e.write_page(human, pid, vma, slot, &page_from_seed(rng.gen()))
                .unwrap();
        }
        e.wait_durable(v).unwrap();
        // The eventually-durable image restores bit-identically to the
        // frozen state.
        e.rollback(human, v).unwrap();
        let restored = e.snapshot_state(human).unwrap();
        let report = diff(&frozen, &restored);
        assert!(report.is_empty(), "run {run}: {report}");
    }
    pass(
        3,
        "snapshot-holder consistency",
        "100 randomized full-overwrite runs; durable image bit-identical to frozen state".into(),
    );
}

#[test]
fn c04_incremental_checkpoints_exact_k() {
    for k in [0usize, 1, 1_000, 100_000] {
        let spec = WorkspaceSpec {
            processes: 4,
            tree_seed: 31,
            anon_pages: 110_000,
            anon_bytes: None,
            resident_fraction: 0.01,
            shared_pages: 0,
            file_manifest: vec![],
            conn_mix: Default::default(),
            gui_buffers: vec![],
        };
        let e = Engine::launch(EngineConfig::default(), &spec).unwrap();
        let human = e.human();
        let v1 = e.record_version(human).unwrap();
        e.wait_durable(v1).unwrap();
        let img1 = e.version_image(v1).unwrap();
        let images_root = e.data_dir().join("images");
        let first: BTreeMap<(LocalPid, VmaId, u64), Vec<u8>> = read_pages(&image_dir(&images_root, img1))
            .unwrap()
            .into_iter()
            .map(|r| ((r.local_pid, r.vma_id, r.slot), r.content.to_vec()))
            .collect();

        // Dirty exactly k randomly chosen distinct pages.
        let targets = anon_targets(&e, human);
        assert!(targets.len() >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64 ^ 0xD127);
        let chosen = sample(&mut rng, targets.len(), k);
        let mut written: BTreeMap<(LocalPid, VmaId, u64), u64> = BTreeMap::new();
        for idx in chosen.iter() {
            let (pid, vma, slot) = targets[idx];
            let seed: u64 = rng.gen();
            e.write_page(human, pid, vma, slot, &page_from_seed(seed)).unwrap();
            written.insert((pid, vma, slot), seed);
        }
        let v2 = e.record_version(human).unwrap();
        e.wait_durable(v2).unwrap();
        let img2 = e.version_image(v2).unwrap();
        let records = read_pages(&image_dir(&images_root, img2)).unwrap();
        assert_eq!(records.len(), k, "chained image must hold exactly k records");

        // Chain-flatten equals the full-image oracle: first image overlaid
        // with exactly the written pages.
        let (_, flat) = flatten_chain(&images_root, img2).unwrap();
        let mut expected = first.clone();
        for (key, seed) in &written {
            expected.insert(*key, page_from_seed(*seed).to_vec());
        }
        assert_eq!(flat.len(), expected.len());
        for (key, content) in &flat {
            assert_eq!(
                &content[..],
                expected[key].as_slice(),
                "mismatch at {key:?}"
            );
        }
    }
    pass(
        4,
        "incremental checkpoints",
        "k ∈ {0, 1, 10^3, 10^5}: chained image holds exactly k records; flatten equals full-image oracle".into(),
    );
}

#[test]
fn c05_scalability_trend() {
    let config = EngineConfig::default();
    let rows = run_scalability(16, &config).unwrap();
    let get = |strategy: &str, n: usize| {
        rows.iter()
            .find(|r| r.strategy == strategy && r.n == n)
            .unwrap()
    };

    let ratio16 = get("sync-restore", 16).critical_path_ms / get("fast", 16).critical_path_ms;
    let ratio2 = get("sync-restore", 2).critical_path_ms / get("fast", 2).critical_path_ms;
    assert!(ratio16 >= 3.0, "latency ratio at n=16 is {ratio16:.2}, need >= 3");
    assert!(ratio16 > ratio2, "gap must widen with clone count");

    let fast16 = get("fast", 16);
    let fast_ratio = fast16.footprint_content_bytes as f64 / fast16.base_content_bytes as f64;
    assert!(
        fast_ratio < 1.3,
        "CoW footprint at n=16 with 1% divergence is {fast_ratio:.2}x base"
    );
    let eager16 = get("eager-copy", 16);
    let eager_ratio = eager16.footprint_content_bytes as f64 / eager16.base_content_bytes as f64;
    assert!(
        eager_ratio >= 16.0,
        "eager footprint at n=16 is {eager_ratio:.2}x base"
    );
    for n in 1..=16usize {
        assert!(
            get("fast", n).footprint_content_bytes < get("eager-copy", n).footprint_content_bytes,
            "CoW footprint must stay below eager at n={n}"
        );
    }
    pass(
        5,
        "scalability trend",
        format!(
            "latency ratio {ratio16:.1}x at n=16 (vs {ratio2:.1}x at n=2); footprint {fast_ratio:.2}x vs eager {eager_ratio:.1}x base"
        ),
    );
}

#[test]
fn c06_ablation_ordering() {
    let config = EngineConfig::default();
    let rows = run_ablation(&config, 3).unwrap();
    assert_eq!(rows.len(), 5);
    let expected_order = [
        "sync-restore",
        "parallel-restore",
        "overlap-dump-restore",
        "cow-memory",
        "fast",
    ];
    for (row, want) in rows.iter().zip(expected_order) {
        assert_eq!(row.strategy, want);
        assert_eq!(row.n, 4);
    }
    // Modeled critical path: non-increasing, strictly decreasing at the
    // CoW and async-dump steps.
    for w in rows.windows(2) {
        assert!(
            w[1].critical_path_ms <= w[0].critical_path_ms + 1e-9,
            "critical path increased {} -> {}",
            w[0].strategy,
            w[1].strategy
        );
    }
    assert!(rows[3].critical_path_ms < rows[2].critical_path_ms, "CoW step must strictly reduce");
    assert!(rows[4].critical_path_ms < rows[3].critical_path_ms, "async step must strictly reduce");
    // Final configuration: zero dump cost on the critical path, zero page
    // bytes copied at fork.
    assert_eq!(rows[4].dump_on_path_ms, 0.0);
    assert_eq!(rows[4].cow_copied_bytes, 0);
    // Measured wall clock follows the ordering within tolerance. The
    // copy-elimination and async-dump transitions hold on any host; the
    // serial-to-parallel transitions need real cores to show up in wall
    // time, so they are asserted only where parallelism exists.
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let wall_from = if cores >= 2 { 0 } else { 2 };
    for (i, w) in rows.windows(2).enumerate() {
        if i < wall_from {
            continue;
        }
        assert!(
            w[1].wall_ms_median <= w[0].wall_ms_median * 1.25 + 20.0,
            "measured wall clock regressed {} ({:.1}ms) -> {} ({:.1}ms)",
            w[0].strategy,
            w[0].wall_ms_median,
            w[1].strategy,
            w[1].wall_ms_median
        );
    }
    let path: Vec<String> = rows.iter().map(|r| format!("{:.0}", r.critical_path_ms)).collect();
    let walls: Vec<String> = rows.iter().map(|r| format!("{:.0}", r.wall_ms_median)).collect();
    pass(
        6,
        "ablation ordering",
        format!(
            "critical path ms across stages: {} (wall: {}; wall ordering asserted from stage {} on a {}-core host)",
            path.join(" → "),
            walls.join(" → "),
            wall_from,
            cores
        ),
    );
}

#[test]
fn c07_layer_depth_shape() {
    let config = EngineConfig::default();
    let rows = run_layer_bench(50, &config).unwrap();
    for model in [LayerModel::Overlay, LayerModel::Chain] {
        let of = |op: LayerOp| -> Vec<(f64, f64)> {
            rows.iter()
                .filter(|r| r.model == model && r.op == op)
                .map(|r| (r.depth as f64, r.latency_ms))
                .collect()
        };
        // Materialized reads and writes flat within 10% across depth.
        for op in [LayerOp::ReadMaterialized, LayerOp::WriteMaterialized] {
            let lat: Vec<f64> = of(op).iter().map(|p| p.1).collect();
            let (min, max) = lat
                .iter()
                .fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
            assert!(
                max <= min * 1.10,
                "{model:?} {op:?} varies more than 10%: {min:.3}..{max:.3}"
            );
        }
        // Cold shared reads grow linearly with positive slope, R^2 > 0.9.
        let cold = of(LayerOp::ReadCold);
        let (slope, r2) = linear_fit(&cold);
        assert!(slope > 0.0, "{model:?} cold-read slope {slope}");
        assert!(r2 > 0.9, "{model:?} cold-read fit R^2 {r2}");
        // Depth-0 cold read within 2x of the materialized read.
        let d0 = cold[0].1;
        let rw0 = of(LayerOp::ReadMaterialized)[0].1;
        assert!(d0 <= rw0 * 2.0 && rw0 <= d0 * 2.0);
        // Repeat reads after materialization are depth-independent: zero
        // probes everywhere.
        assert!(rows
            .iter()
            .filter(|r| r.model == LayerModel::Chain && r.op == LayerOp::ReadMaterialized)
            .all(|r| r.probes == 0));
    }
    let chain_cold: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.model == LayerModel::Chain && r.op == LayerOp::ReadCold)
        .map(|r| (r.depth as f64, r.latency_ms))
        .collect();
    let (slope, r2) = linear_fit(&chain_cold);
    pass(
        7,
        "layer-depth shape",
        format!(
            "cold reads linear over depth 0..50 (chain slope {slope:.4} ms/layer, R^2 {r2:.4}); materialized ops flat"
        ),
    );
}

#[test]
fn c08_isolation_suite() {
    let e = Engine::launch(EngineConfig::default(), &WorkspaceSpec::small(8)).unwrap();
    let human = e.human();
    let paths = e.fs_paths(human).unwrap();
    // Warm the cache so sealed layers have content to protect.
    for path in &paths {
        let pages = e.fs_file_pages(human, path).unwrap();
        for page in 0..pages.min(4) {
            e.fs_read(human, path, page).unwrap();
        }
    }
    let v = e.record_version(human).unwrap();
    let branches = e.fork(v, 3, SecurityProfile::audit_all()).unwrap();
    let hashes_before = e.layer_hashes();

    // No freshly forked branch holds a live external connection.
    for b in &branches {
        for (_, kind, status) in e.connection_ids(*b).unwrap() {
            if kind == ConnKind::External {
                assert_eq!(status, ConnStatus::Closed);
            }
        }
    }

    let all: Vec<_> = std::iter::once(human).chain(branches.iter().copied()).collect();
    let coords = anon_targets(&e, human);
    let mut rng = ChaCha8Rng::seed_from_u64(0x150);
    let mut pairs = 0usize;
    while pairs < 10_000 {
        let victim = all[rng.gen_range(0..all.len())];
        let observer = all[rng.gen_range(0..all.len())];
        if victim == observer {
            continue;
        }
        let before = e.snapshot_state(observer).unwrap();
        match rng.gen_range(0..4u32) {
            0 | 1 => {
                let (pid, vma, slot) = coords[rng.gen_range(0..coords.len())];
                e.write_page(victim, pid, vma, slot, &page_from_seed(rng.gen())).unwrap();
            }
            2 => {
                let path = &paths[rng.gen_range(0..paths.len())];
                let pages = e.fs_file_pages(victim, path).unwrap();
                if pages > 0 {
                    let page = rng.gen_range(0..pages);
                    e.fs_write(victim, path, page, &page_from_seed(rng.gen())).unwrap();
                }
            }
            _ => {
                e.gui_write(victim, 0, 0, &page_from_seed(rng.gen())).unwrap();
            }
        }
        let after = e.snapshot_state(observer).unwrap();
        assert!(
            diff(&before, &after).is_empty(),
            "pair {pairs}: op on {victim} disturbed {observer}"
        );
        pairs += 1;
    }

    // Sealed layers byte-stable through all of it.
    let hashes_after = e.layer_hashes();
    for (layer, h) in &hashes_before {
        assert_eq!(hashes_after.get(layer), Some(h), "layer {layer} mutated");
    }
    // GUI buffer pages never shared.
    for b in &all {
        for (_, refs) in e.gui_page_refcounts(*b).unwrap() {
            assert_eq!(refs, 1);
        }
    }
    e.audit().unwrap();
    pass(
        8,
        "isolation suite",
        "10^4 fuzzed operation pairs with empty observer diffs; sealed-layer hashes constant; GUI refcounts == 1; externals severed".into(),
    );
}

#[test]
fn c09_security_profiles() {
    // Synthetic universe at the motivating scale: 400 syscalls, 10^5 files.
    const SYSCALL_UNIVERSE: u32 = 400;
    const FILE_UNIVERSE: u64 = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EC);
    let touched = sample(&mut rng, SYSCALL_UNIVERSE as usize, 100);
    let mut events: Vec<AccessEvent> = Vec::new();
    // Replay each touched syscall several times; the profile keeps the set.
    for nr in touched.iter() {
        for _ in 0..3 {
            events.push(AccessEvent::syscall(nr as u32));
        }
    }
    let file_count = 180u64;
    for i in 0..file_count {
        events.push(AccessEvent::file(&format!("/fs/dir{}/f{}", i % 40, i)));
    }
    let profile = record_profile(TraceOrigin::Human, events, "browser").unwrap();
    assert_eq!(profile.syscalls.len(), 100, "exactly a quarter of 400");
    assert_eq!(profile.paths.len(), file_count as usize);

    // Union laws.
    let mut reg = ProfileRegistry::default();
    let a = record_profile(
        TraceOrigin::Human,
        (0..60u32).map(AccessEvent::syscall),
        "a",
    )
    .unwrap();
    let b = record_profile(
        TraceOrigin::Human,
        (40..90u32).map(AccessEvent::syscall),
        "b",
    )
    .unwrap();
    reg.register("a", a.clone());
    reg.register("b", b.clone());
    let ab = compose_profile(&["a".into(), "b".into()], &reg).unwrap();
    let ba = compose_profile(&["b".into(), "a".into()], &reg).unwrap();
    assert_eq!(ab, ba);
    assert_eq!(
        ab.syscalls,
        a.syscalls.union(&b.syscalls).copied().collect()
    );

    // Enforcement soundness: a denied event mutates nothing.
    let e = Engine::launch(EngineConfig::default(), &WorkspaceSpec::small(9)).unwrap();
    let v = e.record_version(e.human()).unwrap();
    let locked = e.fork(v, 1, SecurityProfile::empty()).unwrap()[0];
    let before = e.snapshot_state(locked).unwrap();
    let path = e.fs_paths(locked).unwrap()[0].clone();
    assert_eq!(
        e.attempt_access(locked, &AccessEvent::file(&path)).unwrap(),
        forkspace::security::Decision::Deny
    );
    assert_eq!(
        e.attempt_access(locked, &AccessEvent::syscall(31)).unwrap(),
        forkspace::security::Decision::Deny
    );
    let after = e.snapshot_state(locked).unwrap();
    assert!(diff(&before, &after).is_empty());
    // Both denials logged exactly once each.
    assert_eq!(e.audit_records().len(), 2);

    let syscall_ratio = profile.syscalls.len() as f64 / SYSCALL_UNIVERSE as f64;
    let file_ratio = profile.paths.len() as f64 / FILE_UNIVERSE as f64;
    pass(
        9,
        "security profiles",
        format!(
            "profile footprint: {}/{} syscalls ({:.0}%), {}/{} files ({:.3}%); union laws hold; denied events mutate nothing",
            profile.syscalls.len(),
            SYSCALL_UNIVERSE,
            syscall_ratio * 100.0,
            profile.paths.len(),
            FILE_UNIVERSE,
            file_ratio * 100.0
        ),
    );
}

#[test]
fn c10_round_trip_fidelity() {
    // Checkpoint image directory: read + rewrite is byte-identical.
    let e = Engine::launch(EngineConfig::default(), &WorkspaceSpec::small(10)).unwrap();
    let human = e.human();
    let v1 = e.record_version(human).unwrap();
    let (pid, vma, slot) = anon_targets(&e, human)[0];
    e.write_page(human, pid, vma, slot, &page_from_seed(5)).unwrap();
    let v2 = e.record_version(human).unwrap();
    e.wait_durable(v1).unwrap();
    e.wait_durable(v2).unwrap();
    let images_root = e.data_dir().join("images");
    for v in [v1, v2] {
        let img = e.version_image(v).unwrap();
        let dir = image_dir(&images_root, img);
        let meta_bytes = std::fs::read(dir.join("meta.json")).unwrap();
        let pages_bytes = std::fs::read(dir.join("pages.bin")).unwrap();
        let meta = read_meta(&dir).unwrap();
        let records = read_pages(&dir).unwrap();
        // Rewrite from the parsed form into a sibling directory.
        let copy = e.data_dir().join(format!("rt-{}", img.0));
        let mut tables: BTreeMap<LocalPid, BTreeMap<VmaId, forkspace::pagestore::SharedTable>> =
            BTreeMap::new();
        let store = forkspace::pagestore::PageStore::new();
        let mut dirty = std::collections::BTreeSet::new();
        for r in &records {
            let vmas = tables.entry(r.local_pid).or_default();
            let table = vmas.entry(r.vma_id).or_insert_with(|| {
                std::sync::Arc::new(forkspace::pagestore::VmaTable::empty(
                    (r.slot + 1).max(1024),
                ))
            });
            let t = std::sync::Arc::get_mut(table).unwrap();
            if t.slots.len() <= r.slot as usize {
                t.slots.resize(r.slot as usize + 1, None);
            }
            t.slots[r.slot as usize] = Some(store.alloc(std::sync::Arc::new(*r.content)));
            t.present += 1;
            dirty.insert((r.local_pid, r.vma_id, r.slot));
        }
        // Incremental images carry only their dirty records; full images
        // rewrite every present slot. Either way the directory bytes must
        // round-trip exactly.
        let dirty_filter = meta.parent.is_some().then_some(&dirty);
        write_image(&copy, &meta, &tables, dirty_filter, &store).unwrap();
        assert_eq!(std::fs::read(copy.join("meta.json")).unwrap(), meta_bytes);
        assert_eq!(std::fs::read(copy.join("pages.bin")).unwrap(), pages_bytes);
    }

    // Profile JSON: serialize/deserialize is a fixed point.
    let profile = record_profile(
        TraceOrigin::Human,
        (0..40u32)
            .map(AccessEvent::syscall)
            .chain([AccessEvent::file("/opt/app"), AccessEvent::device("input0")]),
        "app",
    )
    .unwrap();
    let json = profile.to_json();
    let back = SecurityProfile::from_json(&json).unwrap();
    assert_eq!(profile, back);
    assert_eq!(json, back.to_json());

    // Version-tree export/import: fixed point of the JSON form.
    let b = e.fork(v2, 2, SecurityProfile::audit_all()).unwrap();
    e.discard(b[1]).unwrap();
    let tree = e.export_tree();
    let exported = tree.to_json();
    let imported = forkspace::version::VersionTreeExport::from_json(&exported).unwrap();
    assert_eq!(tree, imported);
    assert_eq!(exported, imported.to_json());

    pass(
        10,
        "round-trip fidelity",
        "image directories byte-identical after read/rewrite; profile JSON and version-tree export are fixed points".into(),
    );
}

#[test]
fn c05b_end_to_end_replay_gap() {
    // End-to-end check with default calibration: a best-of-4 workload is at
    // least 1.5x faster under the fast path than under sync-restore, and a
    // model-call-only trace costs the same everywhere.
    let spec = WorkspaceSpec::browser_heavy();
    let workload = Workload {
        seed: 3,
        workspace: spec.clone(),
        traces: vec![forkspace::harness::gen_best_of_n(3, 4, 3, &spec)],
    };
    let config = EngineConfig::default();
    let fast = replay(&workload, &CloneStrategy::fast(), &config, false).unwrap();
    let sync = replay(&workload, &CloneStrategy::sync_restore(), &config, false).unwrap();
    assert_eq!(fast[0].model_ms, sync[0].model_ms, "same model time");
    let ratio = sync[0].e2e_ms / fast[0].e2e_ms;
    assert!(ratio >= 1.5, "end-to-end gap {ratio:.2}x below 1.5x");

    let model_only = Workload {
        seed: 4,
        workspace: WorkspaceSpec::small(4),
        traces: vec![forkspace::harness::Trace {
            seed: 4,
            events: (0..10)
                .map(|step| forkspace::harness::TraceEvent {
                    step,
                    action: forkspace::harness::TraceAction::ModelCall { ms: 0 },
                })
                .collect(),
        }],
    };
    let a = replay(&model_only, &CloneStrategy::fast(), &config, false).unwrap();
    let b = replay(&model_only, &CloneStrategy::sync_restore(), &config, false).unwrap();
    assert_eq!(a[0].e2e_ms, b[0].e2e_ms, "no substrate work, no gap");
    pass(
        5,
        "end-to-end replay gap",
        format!("best-of-4 end-to-end {ratio:.2}x faster under the fast path; model-only traces identical"),
    );
}
