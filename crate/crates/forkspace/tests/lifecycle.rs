//! Engine lifecycle integration: fork/rollback/discard/promote/merge
//! semantics, snapshot-holder consistency, checkpoint chaining, and the
//! policy boundaries.

use forkspace::engine::{Approver, BranchStatus, EngineEvent, MergePolicy};
use forkspace::harness::page_from_seed;
use forkspace::io::{EgressPolicy, OutboxStatus};
use forkspace::model::{diff, ConnKind, ConnStatus, DiffEntry, GuiField};
use forkspace::security::{AccessEvent, Decision, SecurityProfile};
use forkspace::{
    Engine, EngineConfig, Error, LocalPid, VmaId, WorkspaceSpec, PAGE_SIZE,
};

fn engine(seed: u64) -> Engine {
    Engine::launch(EngineConfig::default(), &WorkspaceSpec::small(seed)).unwrap()
}

fn restricted_engine(seed: u64) -> Engine {
    let config = EngineConfig {
        egress_policy: EgressPolicy::Restricted,
        ..EngineConfig::default()
    };
    Engine::launch(config, &WorkspaceSpec::small(seed)).unwrap()
}

fn first_anon_target(e: &Engine, b: forkspace::BranchId) -> (LocalPid, VmaId, u64) {
    let ws = e.snapshot_state(b).unwrap();
    for p in &ws.processes {
        for r in &p.regions {
            if r.class == forkspace::model::MemoryClass::Anonymous && r.len_pages > 0 {
                return (p.meta.local_pid, r.vma_id, 0);
            }
        }
    }
    panic!("no anonymous region");
}

#[test]
fn fork_diff_is_empty_except_artifacts() {
    let e = engine(1);
    let human = e.human();
    let v = e.record_version(human).unwrap();
    let before = e.counters();
    let branches = e.fork(v, 1, SecurityProfile::audit_all()).unwrap();
    let after = e.counters();
    assert_eq!(
        after.cow_managed(),
        before.cow_managed(),
        "zero CoW-managed bytes copied at fork"
    );

    let src = e.snapshot_state(human).unwrap();
    let dst = e.snapshot_state(branches[0]).unwrap();
    let report = diff(&src, &dst);
    assert!(
        report.only_fork_artifacts(),
        "unexpected entries: {report}"
    );
    // The artifacts are exactly the severed live externals plus fresh GUI
    // buffer identity.
    let external_live = src
        .connections
        .iter()
        .filter(|c| c.kind == ConnKind::External && c.status == ConnStatus::Established)
        .count();
    let conn_entries = report
        .entries
        .iter()
        .filter(|e| matches!(e, DiffEntry::Connection { external: true, .. }))
        .count();
    assert_eq!(conn_entries, external_live);
    let gui_entries = report
        .entries
        .iter()
        .filter(|e| matches!(e, DiffEntry::Gui { field: GuiField::Identity, .. }))
        .count();
    assert_eq!(gui_entries, src.gui_buffers.len());
    e.audit().unwrap();
}

#[test]
fn no_live_external_connection_in_fresh_fork() {
    let e = engine(2);
    let v = e.record_version(e.human()).unwrap();
    let b = e.fork(v, 1, SecurityProfile::audit_all()).unwrap()[0];
    for (_, kind, status) in e.connection_ids(b).unwrap() {
        if kind == ConnKind::External {
            assert_eq!(status, ConnStatus::Closed);
        }
    }
    // Severed-external policy events were appended to the audit log.
    assert!(e
        .policy_events()
        .iter()
        .any(|ev| matches!(ev, forkspace::io::PolicyEvent::SeveredExternal { .. })));
}

#[test]
fn fork_source_writes_do_not_leak_into_branch() {
    let e = engine(3);
    let human = e.human();
    let v = e.record_version(human).unwrap();
    let b = e.fork(v, 1, SecurityProfile::audit_all()).unwrap()[0];
    let branch_before = e.snapshot_state(b).unwrap();

    // Source diverges: memory, file, gui.
    let (pid, vma, slot) = first_anon_target(&e, human);
    e.write_page(human, pid, vma, slot, &page_from_seed(99)).unwrap();
    let path = e.fs_paths(human).unwrap()[0].clone();
    e.fs_write(human, &path, 0, &page_from_seed(98)).unwrap();
    e.gui_write(human, 0, 0, &page_from_seed(97)).unwrap();

    let branch_after = e.snapshot_state(b).unwrap();
    assert!(diff(&branch_before, &branch_after).is_empty(), "symmetric CoW");
    e.audit().unwrap();
}

#[test]
fn n_way_fork_equals_sequential_forks() {
    // Same version, same fork count: one 4-way call vs four 1-way calls on
    // twin engines must yield pairwise-identical branch states.
    let spec = WorkspaceSpec::small(4);
    let a = Engine::launch(EngineConfig::default(), &spec).unwrap();
    let b = Engine::launch(EngineConfig::default(), &spec).unwrap();
    let va = a.record_version(a.human()).unwrap();
    let vb = b.record_version(b.human()).unwrap();
    let batch = a.fork(va, 4, SecurityProfile::audit_all()).unwrap();
    let mut sequential = Vec::new();
    for _ in 0..4 {
        sequential.extend(b.fork(vb, 1, SecurityProfile::audit_all()).unwrap());
    }
    for (x, y) in batch.iter().zip(&sequential) {
        let sx = a.snapshot_state(*x).unwrap();
        let sy = b.snapshot_state(*y).unwrap();
        assert!(diff(&sx, &sy).is_empty());
    }
}

#[test]
fn fork_completes_while_dump_daemon_stalled() {
    let e = engine(5);
    e.stall_dumps();
    let v = e.record_version(e.human()).unwrap();
    let branches = e.fork(v, 4, SecurityProfile::audit_all()).unwrap();
    assert_eq!(branches.len(), 4);
    assert_eq!(
        e.checkpoint_status(v).unwrap(),
        forkspace::checkpoint::CheckpointStatus::Pending
    );
    e.unstall_dumps();
    e.wait_durable(v).unwrap();
}

#[test]
fn branch_cap_enforced() {
    let config = EngineConfig {
        branch_cap: 3,
        ..EngineConfig::default()
    };
    let e = Engine::launch(config, &WorkspaceSpec::small(6)).unwrap();
    let v = e.record_version(e.human()).unwrap();
    assert!(matches!(
        e.fork(v, 3, SecurityProfile::audit_all()),
        Err(Error::BranchCapExceeded { .. })
    ));
    assert_eq!(e.fork(v, 2, SecurityProfile::audit_all()).unwrap().len(), 2);
}

#[test]
fn snapshot_holder_consistency_under_full_overwrite() {
    let e = engine(7);
    let human = e.human();
    let frozen_state = e.snapshot_state(human).unwrap();
    let v = e.record_version(human).unwrap();

    // Overwrite every present anonymous page after resume.
    let ws = e.snapshot_state(human).unwrap();
    for p in &ws.processes {
        for r in &p.regions {
            if r.class != forkspace::model::MemoryClass::Anonymous {
                continue;
            }
            for (slot, cell) in r.pages.iter().enumerate() {
                if cell.is_some() {
                    e.write_page(human, p.meta.local_pid, r.vma_id, slot as u64, &page_from_seed(slot as u64 ^ 0xAA))
                        .unwrap();
                }
            }
        }
    }
    e.wait_durable(v).unwrap();

    // The durable image must equal the frozen state: fork from the durable
    // version on a fresh engine path (cold restore) and compare pages.
    let b = e.fork(v, 1, SecurityProfile::audit_all()).unwrap()[0];
    let restored = e.snapshot_state(b).unwrap();
    let report = diff(&frozen_state, &restored);
    assert!(report.only_fork_artifacts(), "{report}");
}

#[test]
fn incremental_image_counts_exact_dirty_pages() {
    let e = engine(8);
    let human = e.human();
    let v1 = e.record_version(human).unwrap();
    e.wait_durable(v1).unwrap();

    // No writes: second image holds zero page records.
    let v2 = e.record_version(human).unwrap();
    e.wait_durable(v2).unwrap();
    let img2 = e.version_image(v2).unwrap();
    let records = forkspace::checkpoint::read_pages(
        &forkspace::checkpoint::image_dir(&e.data_dir().join("images"), img2),
    )
    .unwrap();
    assert_eq!(records.len(), 0);

    // Dirty exactly 3 distinct pages.
    let ws = e.snapshot_state(human).unwrap();
    let mut targets = Vec::new();
    'outer: for p in &ws.processes {
        for r in &p.regions {
            if r.class == forkspace::model::MemoryClass::Anonymous {
                for slot in 0..r.len_pages {
                    targets.push((p.meta.local_pid, r.vma_id, slot));
                    if targets.len() == 3 {
                        break 'outer;
                    }
                }
            }
        }
    }
    assert_eq!(targets.len(), 3);
    for (i, (pid, vma, slot)) in targets.iter().enumerate() {
        e.write_page(human, *pid, *vma, *slot, &page_from_seed(i as u64)).unwrap();
    }
    let v3 = e.record_version(human).unwrap();
    e.wait_durable(v3).unwrap();
    let img3 = e.version_image(v3).unwrap();
    let records = forkspace::checkpoint::read_pages(
        &forkspace::checkpoint::image_dir(&e.data_dir().join("images"), img3),
    )
    .unwrap();
    assert_eq!(records.len(), 3);
}

#[test]
fn rollback_restores_recorded_state_exactly() {
    let e = engine(9);
    let human = e.human();
    let recorded = e.snapshot_state(human).unwrap();
    let v = e.record_version(human).unwrap();

    let (pid, vma, slot) = first_anon_target(&e, human);
    e.write_page(human, pid, vma, slot, &page_from_seed(1)).unwrap();
    let path = e.fs_paths(human).unwrap()[0].clone();
    e.fs_write(human, &path, 1, &page_from_seed(2)).unwrap();
    e.gui_write(human, 0, 1, &page_from_seed(3)).unwrap();

    e.rollback(human, v).unwrap();
    let back = e.snapshot_state(human).unwrap();
    assert!(diff(&recorded, &back).is_empty(), "{}", diff(&recorded, &back));
    e.audit().unwrap();
}

#[test]
fn rollback_leaves_siblings_untouched() {
    let e = engine(10);
    let human = e.human();
    let v = e.record_version(human).unwrap();
    let branches = e.fork(v, 2, SecurityProfile::audit_all()).unwrap();
    let (b, sibling) = (branches[0], branches[1]);

    let (pid, vma, slot) = first_anon_target(&e, b);
    e.write_page(b, pid, vma, slot, &page_from_seed(5)).unwrap();
    let sib_before = e.snapshot_state(sibling).unwrap();
    e.rollback(b, v).unwrap();
    let sib_after = e.snapshot_state(sibling).unwrap();
    assert!(diff(&sib_before, &sib_after).is_empty());
}

#[test]
fn rollback_across_chained_checkpoints_matches_flatten_oracle() {
    let e = engine(11);
    let human = e.human();
    let (pid, vma, _) = first_anon_target(&e, human);

    let _v1 = e.record_version(human).unwrap();
    e.write_page(human, pid, vma, 0, &page_from_seed(10)).unwrap();
    let _v2 = e.record_version(human).unwrap();
    e.write_page(human, pid, vma, 1, &page_from_seed(11)).unwrap();
    let v3 = e.record_version(human).unwrap();
    let expect = e.snapshot_state(human).unwrap();
    e.write_page(human, pid, vma, 0, &page_from_seed(12)).unwrap();
    e.write_page(human, pid, vma, 2, &page_from_seed(13)).unwrap();

    // Independent oracle: flatten the image chain and compare the page map
    // against the restored state.
    e.rollback(human, v3).unwrap();
    let rolled = e.snapshot_state(human).unwrap();
    assert!(diff(&expect, &rolled).is_empty());

    let img = e.version_image(v3).unwrap();
    let (_, flat) =
        forkspace::checkpoint::flatten_chain(&e.data_dir().join("images"), img).unwrap();
    let page0 = flat.get(&(pid, vma, 0)).expect("page 0 in chain");
    assert_eq!(&page0[..], &page_from_seed(10)[..]);
    let page1 = flat.get(&(pid, vma, 1)).expect("page 1 in chain");
    assert_eq!(&page1[..], &page_from_seed(11)[..]);
}

#[test]
fn rollback_requires_lineage_and_liveness() {
    let e = engine(12);
    let human = e.human();
    let v = e.record_version(human).unwrap();
    let b = e.fork(v, 1, SecurityProfile::audit_all()).unwrap()[0];
    // A version recorded by the *branch* is not in the human lineage.
    let bv = e.record_version(b).unwrap();
    assert!(matches!(
        e.rollback(human, bv),
        Err(Error::NotInLineage(..))
    ));
    e.discard(b).unwrap();
    assert!(matches!(e.rollback(b, v), Err(Error::BranchTerminal(_))));
}

#[test]
fn discard_returns_footprint_to_base() {
    let e = engine(13);
    let human = e.human();
    let v = e.record_version(human).unwrap();
    e.wait_durable(v).unwrap();
    let base = e.footprint();
    let branches = e.fork(v, 4, SecurityProfile::audit_all()).unwrap();
    // Divergence inflates the footprint.
    for b in &branches {
        let (pid, vma, slot) = first_anon_target(&e, *b);
        e.write_page(*b, pid, vma, slot, &page_from_seed(b.0)).unwrap();
    }
    assert!(e.footprint().content_bytes() > base.content_bytes());
    for b in &branches {
        e.discard(*b).unwrap();
    }
    let after = e.footprint();
    assert_eq!(
        after.content_bytes(),
        base.content_bytes(),
        "content bytes return to base after all siblings are discarded"
    );
    e.audit().unwrap();
}

#[test]
fn discard_one_sibling_leaves_others_alone() {
    let e = engine(14);
    let v = e.record_version(e.human()).unwrap();
    let branches = e.fork(v, 4, SecurityProfile::audit_all()).unwrap();
    let snaps: Vec<_> = branches[1..]
        .iter()
        .map(|b| e.snapshot_state(*b).unwrap())
        .collect();
    e.discard(branches[0]).unwrap();
    for (b, before) in branches[1..].iter().zip(&snaps) {
        let after = e.snapshot_state(*b).unwrap();
        assert!(diff(before, &after).is_empty());
    }
    assert_eq!(e.branch_status(branches[0]).unwrap(), BranchStatus::Discarded);
}

#[test]
fn promote_makes_branch_user_visible_and_keeps_outbox_held() {
    let e = engine(15);
    let human = e.human();
    let v = e.record_version(human).unwrap();
    let branches = e.fork(v, 3, SecurityProfile::audit_all()).unwrap();
    let chosen = branches[1];

    let (pid, vma, slot) = first_anon_target(&e, chosen);
    e.write_page(chosen, pid, vma, slot, &page_from_seed(42)).unwrap();
    assert_eq!(
        e.attempt_external(chosen, "send-email").unwrap(),
        OutboxStatus::Held
    );
    let chosen_state = e.snapshot_state(chosen).unwrap();

    e.commit_promote(chosen).unwrap();
    assert_eq!(e.branch_status(chosen).unwrap(), BranchStatus::Promoted);
    let visible = e.snapshot_state(human).unwrap();
    assert!(diff(&visible, &chosen_state).is_empty());

    // Promotion is recorded as per-process address-space replacement.
    let replaced = e
        .events()
        .iter()
        .filter(|ev| matches!(ev, EngineEvent::AddressSpaceReplaced { .. }))
        .count();
    assert_eq!(replaced, chosen_state.processes.len());

    // Held actions stay held through promotion; release is explicit and
    // only valid on the user-visible workspace.
    let outbox = e.outbox(human).unwrap();
    assert!(outbox.iter().all(|o| o.status == OutboxStatus::Held));
    assert!(matches!(
        e.release_outbox(branches[0]),
        Err(Error::OutboxNotReleasable)
    ));
    let released = e.release_outbox(human).unwrap();
    assert_eq!(released.len(), 1);

    // Siblings remain live until discarded, and diverge where they diverged.
    for b in [branches[0], branches[2]] {
        assert_eq!(e.branch_status(b).unwrap(), BranchStatus::Running);
        let sib = e.snapshot_state(b).unwrap();
        assert!(!diff(&visible, &sib).is_empty());
    }
    e.audit().unwrap();
}

#[test]
fn terminal_branches_reject_operations() {
    let e = engine(16);
    let v = e.record_version(e.human()).unwrap();
    let b = e.fork(v, 1, SecurityProfile::audit_all()).unwrap()[0];
    e.discard(b).unwrap();
    let (pid, vma, slot) = first_anon_target(&e, e.human());
    assert!(matches!(
        e.write_page(b, pid, vma, slot, &page_from_seed(0)),
        Err(Error::BranchTerminal(_)) | Err(Error::NotRunning(_)) | Err(Error::UnknownProcess(..))
    ));
    assert!(e.record_version(b).is_err());
    assert!(e.discard(b).is_err());
}

#[test]
fn merge_disjoint_edits_equals_sequential_apply() {
    let e = engine(17);
    let human = e.human();
    let v = e.record_version(human).unwrap();
    let branches = e.fork(v, 2, SecurityProfile::audit_all()).unwrap();
    let paths = e.fs_paths(human).unwrap();
    let (fa, fb) = (paths[0].clone(), paths[1].clone());

    let pa = page_from_seed(100);
    let pb = page_from_seed(200);
    e.fs_write(branches[0], &fa, 0, &pa).unwrap();
    e.fs_write(branches[1], &fb, 3, &pb).unwrap();

    // Sequential-apply oracle: both edit sets applied to the ancestor.
    let mut expect = e.snapshot_state(human).unwrap().files;
    expect.get_mut(&fa).unwrap()[0..PAGE_SIZE].copy_from_slice(&pa);
    let start = 3 * PAGE_SIZE;
    expect.get_mut(&fb).unwrap()[start..start + PAGE_SIZE].copy_from_slice(&pb);

    let policy = MergePolicy::with_sensitive(&[]);
    let report = e.commit_merge(&branches, &policy).unwrap();
    assert_eq!(report.conflicted, Vec::<String>::new());
    assert_eq!(report.approval_gated, Vec::<String>::new());
    assert_eq!(report.merged.len(), 2);

    let merged = e.snapshot_state(human).unwrap();
    assert_eq!(merged.files, expect);
}

#[test]
fn merge_conflict_requires_approval_by_default() {
    let e = engine(18);
    let human = e.human();
    let v = e.record_version(human).unwrap();
    let branches = e.fork(v, 2, SecurityProfile::audit_all()).unwrap();
    let path = e.fs_paths(human).unwrap()[0].clone();
    let before = e.snapshot_state(human).unwrap().files[&path].clone();

    e.fs_write(branches[0], &path, 0, &page_from_seed(1)).unwrap();
    e.fs_write(branches[1], &path, 0, &page_from_seed(2)).unwrap();

    let policy = MergePolicy::with_sensitive(&[]);
    let report = e.commit_merge(&branches, &policy).unwrap();
    assert_eq!(report.conflicted, vec![path.clone()]);
    assert_eq!(report.approval_gated, vec![path.clone()]);
    // Withheld: the user-visible file still has the ancestor content.
    assert_eq!(e.snapshot_state(human).unwrap().files[&path], before);

    // Approving the path resolves in favor of the designated branch.
    let e2 = engine(18);
    let human2 = e2.human();
    let v2 = e2.record_version(human2).unwrap();
    let branches2 = e2.fork(v2, 2, SecurityProfile::audit_all()).unwrap();
    e2.fs_write(branches2[0], &path, 0, &page_from_seed(1)).unwrap();
    e2.fs_write(branches2[1], &path, 0, &page_from_seed(2)).unwrap();
    let policy = MergePolicy {
        approver: Approver::AcceptAll,
        designated: 1,
        ..MergePolicy::with_sensitive(&[])
    };
    let report = e2.commit_merge(&branches2, &policy).unwrap();
    assert_eq!(report.conflicted, vec![path.clone()]);
    assert!(report.approval_gated.is_empty());
    let merged = e2.snapshot_state(human2).unwrap();
    assert_eq!(&merged.files[&path][..PAGE_SIZE], &page_from_seed(2)[..]);
}

#[test]
fn merge_sensitive_paths_gated_even_without_conflict() {
    let e = engine(19);
    let human = e.human();
    let sensitive = forkspace::security::PathPattern("/home/user/.config".into());
    let v = e.record_version(human).unwrap();
    let branches = e.fork(v, 2, SecurityProfile::audit_all()).unwrap();
    let path = "/home/user/.config/app/settings".to_string();
    e.fs_write(branches[0], &path, 0, &page_from_seed(7)).unwrap();

    let policy = MergePolicy::with_sensitive(&[sensitive]);
    let report = e.commit_merge(&branches, &policy).unwrap();
    assert_eq!(report.approval_gated, vec![path]);
    assert!(report.conflicted.is_empty());
}

#[test]
fn merge_requires_common_ancestor_and_strict_mode_rejects() {
    let e = engine(20);
    let human = e.human();
    // Human has no recorded version yet: no common ancestor with anything.
    assert!(matches!(
        e.commit_merge(&[human], &MergePolicy::with_sensitive(&[])),
        Err(Error::NoCommonAncestor)
    ));

    let v = e.record_version(human).unwrap();
    let branches = e.fork(v, 2, SecurityProfile::audit_all()).unwrap();
    let path = e.fs_paths(human).unwrap()[0].clone();
    e.fs_write(branches[0], &path, 0, &page_from_seed(1)).unwrap();
    e.fs_write(branches[1], &path, 0, &page_from_seed(2)).unwrap();
    let policy = MergePolicy {
        strict: true,
        ..MergePolicy::with_sensitive(&[])
    };
    assert!(matches!(
        e.commit_merge(&branches, &policy),
        Err(Error::PolicyRejected(_))
    ));
}

#[test]
fn restricted_egress_denied_and_logged() {
    let e = restricted_engine(21);
    let v = e.record_version(e.human()).unwrap();
    let b = e.fork(v, 1, SecurityProfile::audit_all()).unwrap()[0];
    assert_eq!(
        e.attempt_external(b, "post-form").unwrap(),
        OutboxStatus::Denied
    );
    assert!(e
        .policy_events()
        .iter()
        .any(|ev| matches!(ev, forkspace::io::PolicyEvent::EgressDenied { .. })));
    assert!(e.outbox(b).unwrap().is_empty());
}

#[test]
fn enforce_mode_denial_mutates_nothing() {
    let e = engine(22);
    let human = e.human();
    let v = e.record_version(human).unwrap();
    // Branch profile allows nothing.
    let b = e.fork(v, 1, SecurityProfile::empty()).unwrap()[0];
    let before = e.snapshot_state(b).unwrap();
    let path = e.fs_paths(b).unwrap()[0].clone();
    let decision = e.attempt_access(b, &AccessEvent::file(&path)).unwrap();
    assert_eq!(decision, Decision::Deny);
    let after = e.snapshot_state(b).unwrap();
    assert!(diff(&before, &after).is_empty(), "denied access mutated state");
    // Exactly one audit record for the denial.
    assert_eq!(e.audit_records().len(), 1);

    // The same access under an allowing profile mutates the file.
    let mut allowing = SecurityProfile::empty();
    allowing
        .paths
        .insert(forkspace::security::PathPattern(path.clone()));
    let b2 = e.fork(v, 1, allowing).unwrap()[0];
    let before = e.snapshot_state(b2).unwrap();
    assert_eq!(
        e.attempt_access(b2, &AccessEvent::file(&path)).unwrap(),
        Decision::Allow
    );
    let after = e.snapshot_state(b2).unwrap();
    assert!(!diff(&before, &after).is_empty());
}

#[test]
fn dump_failure_keeps_fork_fast_path_but_blocks_rollback() {
    let e = engine(23);
    let human = e.human();
    e.inject_dump_failure();
    let v = e.record_version(human).unwrap();
    // Wait for the failure to land.
    assert!(e.wait_durable(v).is_err());
    // Fast path unaffected: the version is still forkable.
    let branches = e.fork(v, 2, SecurityProfile::audit_all()).unwrap();
    assert_eq!(branches.len(), 2);
    let report = diff(
        &e.snapshot_state(human).unwrap(),
        &e.snapshot_state(branches[0]).unwrap(),
    );
    assert!(report.only_fork_artifacts());
    // Rollback surfaces the failure.
    assert!(matches!(
        e.rollback(human, v),
        Err(Error::CheckpointFailed(..))
    ));
}

#[test]
fn share_vma_cow_contract() {
    let e = engine(24);
    let human = e.human();
    let v = e.record_version(human).unwrap();
    let b = e.fork(v, 1, SecurityProfile::audit_all()).unwrap()[0];

    // Anonymous-only: a shared or file-backed region is rejected.
    let ws = e.snapshot_state(human).unwrap();
    let shared_vma = ws
        .processes
        .iter()
        .flat_map(|p| p.regions.iter().map(move |r| (p.meta.local_pid, r)))
        .find(|(_, r)| r.class == forkspace::model::MemoryClass::Shared)
        .map(|(pid, r)| (pid, r.vma_id));
    if let Some((pid, vma)) = shared_vma {
        e.freeze(human).unwrap();
        assert!(matches!(
            e.share_vma_cow(human, pid, b, pid, vma),
            Err(Error::NotAnonymous(_))
        ));
        e.resume(human).unwrap();
    }

    // Sharing requires a frozen source.
    let (pid, vma, _) = first_anon_target(&e, human);
    assert!(matches!(
        e.share_vma_cow(human, pid, b, pid, vma),
        Err(Error::NotFrozen(_))
    ));
    e.freeze(human).unwrap();
    e.share_vma_cow(human, pid, b, pid, vma).unwrap();
    e.resume(human).unwrap();

    // Both sides write-protected; a write on one side leaves the other
    // reading original bytes.
    assert!(e.is_write_protected(human, pid, vma, 0).unwrap());
    assert!(e.is_write_protected(b, pid, vma, 0).unwrap());
    let original = e.read_page(human, pid, vma, 0).unwrap();
    e.write_page(b, pid, vma, 0, &page_from_seed(77)).unwrap();
    assert_eq!(&e.read_page(human, pid, vma, 0).unwrap()[..], &original[..]);
    assert_eq!(&e.read_page(b, pid, vma, 0).unwrap()[..], &page_from_seed(77)[..]);
    e.audit().unwrap();
}

#[test]
fn holders_survive_full_overwrite_and_reclaim_returns_refcounts() {
    let e = engine(25);
    let human = e.human();
    let (pid, vma, _) = first_anon_target(&e, human);
    let original = e.read_page(human, pid, vma, 0).unwrap();

    e.freeze(human).unwrap();
    let holders = e.create_snapshot_holders(human).unwrap();
    e.resume(human).unwrap();

    e.write_page(human, pid, vma, 0, &page_from_seed(123)).unwrap();
    // Holder still resolves the freeze-instant bytes.
    let mut holder_view = None;
    for h in &holders {
        if let Ok(Some(bytes)) = e.holder_page(*h, vma, 0) {
            holder_view = Some(bytes);
        }
    }
    assert_eq!(&holder_view.expect("holder covers vma")[..], &original[..]);

    e.reclaim_holders(&holders).unwrap();
    e.audit().unwrap();
}

#[test]
fn freeze_interval_is_size_independent_and_copy_free() {
    let mut small = WorkspaceSpec::small(26);
    small.anon_pages = 1000;
    small.resident_fraction = 0.05;
    let mut large = WorkspaceSpec::small(26);
    large.anon_pages = 1_000_000;
    large.resident_fraction = 0.00005;

    let mut ops = Vec::new();
    for spec in [small, large] {
        let e = Engine::launch(EngineConfig::default(), &spec).unwrap();
        let before = e.counters();
        let v = e.record_version(e.human()).unwrap();
        let after = e.counters();
        assert_eq!(
            after.cow_managed(),
            before.cow_managed(),
            "no page-content copies inside the freeze interval"
        );
        ops.push(e.version_freeze_report(v).unwrap().total_ops());
    }
    assert_eq!(ops[0], ops[1], "freeze work independent of page count");
}

#[test]
fn write_protection_reported_correctly() {
    let e = engine(27);
    let human = e.human();
    let (pid, vma, _) = first_anon_target(&e, human);
    // Unshared, sole-owner: not write-protected.
    assert!(!e.is_write_protected(human, pid, vma, 0).unwrap());
    let _v = e.record_version(human).unwrap();
    // Shared with the version's holders now.
    assert!(e.is_write_protected(human, pid, vma, 0).unwrap());
    e.write_page(human, pid, vma, 0, &page_from_seed(1)).unwrap();
    // Private again after the CoW break.
    assert!(!e.is_write_protected(human, pid, vma, 0).unwrap());
}

#[test]
fn host_pids_unique_across_live_workspaces() {
    let e = engine(28);
    let v = e.record_version(e.human()).unwrap();
    let branches = e.fork(v, 4, SecurityProfile::audit_all()).unwrap();
    let mut seen = std::collections::BTreeSet::new();
    for b in std::iter::once(e.human()).chain(branches) {
        for p in &e.snapshot_state(b).unwrap().processes {
            assert!(seen.insert(p.meta.host_pid), "host pid reused");
        }
    }
}

#[test]
fn gui_pages_never_shared() {
    let e = engine(29);
    let v = e.record_version(e.human()).unwrap();
    let branches = e.fork(v, 3, SecurityProfile::audit_all()).unwrap();
    for b in std::iter::once(e.human()).chain(branches) {
        for (_, refs) in e.gui_page_refcounts(b).unwrap() {
            assert_eq!(refs, 1);
        }
    }
}

#[test]
fn double_freeze_and_record_interactions() {
    let e = engine(30);
    let human = e.human();
    e.freeze(human).unwrap();
    assert!(matches!(e.freeze(human), Err(Error::DoubleFreeze(_))));
    assert!(matches!(e.record_version(human), Err(Error::DoubleFreeze(_))));
    e.resume(human).unwrap();
    assert!(matches!(e.resume(human), Err(Error::NotFrozen(_))));
    e.record_version(human).unwrap();
}

#[test]
fn connection_stream_survives_fork_with_sequence_continuity() {
    let e = engine(31);
    let human = e.human();
    // Find an internal connection and queue bytes on it.
    let conn = e
        .connection_ids(human)
        .unwrap()
        .into_iter()
        .find(|(_, kind, _)| *kind == ConnKind::Internal)
        .map(|(id, _, _)| id)
        .expect("fixture has internal connections");
    e.conn_send(human, conn, b"hello").unwrap();

    let v = e.record_version(human).unwrap();
    let b = e.fork(v, 1, SecurityProfile::audit_all()).unwrap()[0];
    // The branch's restored endpoint drains the in-flight bytes, then the
    // stream continues with contiguous sequence numbers.
    let (_, first) = e.conn_deliver(b, conn).unwrap();
    assert!(first.ends_with(b"hello"));
    let seq_after = e.conn_send(b, conn, b"world").unwrap();
    let (start, second) = e.conn_deliver(b, conn).unwrap();
    assert_eq!(second, b"world");
    assert_eq!(start + second.len() as u64, seq_after);
}

#[test]
fn share_to_four_destinations_refcounts_and_isolation() {
    let e = engine(32);
    let human = e.human();
    let v = e.record_version(human).unwrap();
    let dests = e.fork(v, 4, SecurityProfile::audit_all()).unwrap();
    let (pid, vma, _) = first_anon_target(&e, human);
    let original = e.read_page(human, pid, vma, 0).unwrap();

    // Standalone per-VMA share into all four destinations: the page's
    // refcount climbs 1 -> 5 (the recorded version's holders share the
    // source table object, so they do not add page references here).
    assert_eq!(e.page_refcount(human, pid, vma, 0).unwrap(), Some(1));
    e.freeze(human).unwrap();
    for (i, d) in dests.iter().enumerate() {
        e.share_vma_cow(human, pid, *d, pid, vma).unwrap();
        assert_eq!(
            e.page_refcount(human, pid, vma, 0).unwrap(),
            Some(2 + i as u32)
        );
    }
    e.resume(human).unwrap();
    assert_eq!(e.page_refcount(human, pid, vma, 0).unwrap(), Some(5));

    // A write on one side leaves the other four reading original bytes.
    e.write_page(dests[0], pid, vma, 0, &page_from_seed(500)).unwrap();
    for other in std::iter::once(&human).chain(&dests[1..]) {
        assert_eq!(&e.read_page(*other, pid, vma, 0).unwrap()[..], &original[..]);
    }
    e.audit().unwrap();
}

#[test]
fn sole_owner_write_is_in_place() {
    let e = Engine::launch(EngineConfig::default(), &WorkspaceSpec::small(33)).unwrap();
    let human = e.human();
    let (pid, vma, slot) = first_anon_target(&e, human);
    // No version recorded: the page has a single owner.
    let counters_before = e.counters();
    let pages_before = e.footprint().page_bytes;
    e.write_page(human, pid, vma, slot, &page_from_seed(7)).unwrap();
    let counters_after = e.counters();
    assert_eq!(
        counters_after.cow_break, counters_before.cow_break,
        "no CoW break for a sole-owner page"
    );
    assert_eq!(e.footprint().page_bytes, pages_before, "no allocation");
}

#[test]
fn policy_events_append_to_per_branch_jsonl() {
    let e = engine(34);
    let v = e.record_version(e.human()).unwrap();
    let b = e.fork(v, 1, SecurityProfile::audit_all()).unwrap()[0];
    e.attempt_external(b, "push-commit").unwrap();
    let log = e.data_dir().join(format!("audit-branch-{}.jsonl", b.0));
    let content = std::fs::read_to_string(&log).unwrap();
    // Both the queued outbox entry and its policy event land in the log.
    assert!(content.lines().count() >= 2);
    let mut outbox_lines = 0;
    let mut event_lines = 0;
    for line in content.lines() {
        if serde_json::from_str::<forkspace::io::OutboxEntry>(line).is_ok() {
            outbox_lines += 1;
        } else {
            let _: forkspace::io::PolicyEvent = serde_json::from_str(line).unwrap();
            event_lines += 1;
        }
    }
    assert!(outbox_lines >= 1 && event_lines >= 1);
}

#[test]
fn forks_of_distinct_branches_run_concurrently() {
    let e = engine(35);
    let human = e.human();
    let v = e.record_version(human).unwrap();
    let pair = e.fork(v, 2, SecurityProfile::audit_all()).unwrap();
    let v0 = e.record_version(pair[0]).unwrap();
    let v1 = e.record_version(pair[1]).unwrap();
    std::thread::scope(|s| {
        let ea = &e;
        let a = s.spawn(move || ea.fork(v0, 2, SecurityProfile::audit_all()).unwrap());
        let b = s.spawn(move || ea.fork(v1, 2, SecurityProfile::audit_all()).unwrap());
        assert_eq!(a.join().unwrap().len(), 2);
        assert_eq!(b.join().unwrap().len(), 2);
    });
    e.audit().unwrap();
}
