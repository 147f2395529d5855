//! Commit support: wholesale promotion, policy-gated three-way merge, the
//! external-action outbox, and access enforcement against the branch's
//! security profile.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ids::{BranchId, LocalPid};
use crate::io::{EgressPolicy, OutboxEntry, OutboxStatus, PolicyEvent};
use crate::model::EndpointHost;
use crate::security::{
    enforce, AccessEvent, AccessKind, AuditRecord, Decision, EnforcementMode, PathPattern,
};
use crate::{Page, PAGE_SIZE};

use super::lifecycle::release_branch_state;
use super::{Engine, EngineEvent, GuiBuf, Proc, Region};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeRule {
    /// Resolve automatically in favor of the designated branch.
    Auto,
    /// Route to the approval decision point.
    RequireApproval,
}

/// Programmatic stand-in for the human approval decision point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Approver {
    RejectAll,
    AcceptAll,
    AcceptPaths(BTreeSet<String>),
}

impl Approver {
    fn approves(&self, path: &str) -> bool {
        match self {
            Approver::RejectAll => false,
            Approver::AcceptAll => true,
            Approver::AcceptPaths(set) => set.contains(path),
        }
    }
}

/// Merge policy: per-path rules for sensitive paths, a conflict rule, the
/// designated branch supplying volatile process state, and the approver.
#[derive(Debug, Clone)]
pub struct MergePolicy {
    pub path_rules: Vec<(PathPattern, MergeRule)>,
    pub conflict_rule: MergeRule,
    /// Index into the merged branch list; volatile state and Auto-conflict
    /// winners come from this branch.
    pub designated: usize,
    pub approver: Approver,
    /// Fail the whole merge when any path ends up approval-gated.
    pub strict: bool,
}

impl MergePolicy {
    /// Default policy: conflicts and configured sensitive paths require
    /// approval, everything else merges automatically.
    pub fn with_sensitive(sensitive: &[PathPattern]) -> Self {
        MergePolicy {
            path_rules: sensitive
                .iter()
                .map(|p| (p.clone(), MergeRule::RequireApproval))
                .collect(),
            conflict_rule: MergeRule::RequireApproval,
            designated: 0,
            approver: Approver::RejectAll,
            strict: false,
        }
    }

    fn rule_for(&self, path: &str) -> Option<MergeRule> {
        self.path_rules
            .iter()
            .find(|(pat, _)| pat.matches(path))
            .map(|(_, r)| *r)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeReport {
    pub merged: Vec<String>,
    pub conflicted: Vec<String>,
    pub approval_gated: Vec<String>,
}

impl Engine {
    /// Promote a branch wholesale: its state becomes the user-visible
    /// workspace via per-process address-space replacement. Siblings remain
    /// until discarded; held external actions stay held.
    pub fn commit_promote(&self, branch: BranchId) -> Result<()> {
        let mut state = self.lock();
        let state = &mut *state;
        let human = state.human;
        if branch == human {
            return Ok(());
        }
        {
            let b = state
                .branches
                .get(&branch)
                .ok_or(Error::UnknownBranch(branch))?;
            b.require_running()?;
        }
        // Tear down the current user-visible state.
        let mut old_human = state.branches.remove(&human).expect("human branch exists");
        release_branch_state(
            &mut old_human,
            &mut state.fs,
            &mut state.ports,
            &self.core.pages,
        );
        let mut chosen = state.branches.remove(&branch).expect("checked above");

        // Address-space replacement, process by process.
        for pid in chosen.procs.keys() {
            state.events.push(EngineEvent::AddressSpaceReplaced {
                branch: human,
                process: *pid,
            });
        }

        let mut outbox = std::mem::take(&mut old_human.outbox);
        outbox.extend(std::mem::take(&mut chosen.outbox));

        // The chosen branch's workspace (namespace included) becomes the
        // user-visible one; the chosen handle turns terminal and keeps the
        // released-state placeholder view as its husk.
        old_human.namespace = chosen.namespace;
        old_human.procs = std::mem::take(&mut chosen.procs);
        old_human.conns = std::mem::take(&mut chosen.conns);
        old_human.gui = std::mem::take(&mut chosen.gui);
        std::mem::swap(&mut old_human.view, &mut chosen.view);
        old_human.current_version = chosen.current_version;
        old_human.base_image = chosen.base_image;
        old_human.dirty = std::mem::take(&mut chosen.dirty);
        old_human.outbox = outbox;
        old_human.status = super::BranchStatus::Running;
        chosen.status = super::BranchStatus::Promoted;

        state.branches.insert(human, old_human);
        state.branches.insert(branch, chosen);
        Ok(())
    }

    /// Three-way merge of branch filesystem state against the nearest
    /// common ancestor version, with volatile process state taken wholesale
    /// from the designated branch. Conflicting and sensitive paths route
    /// through the policy decision point.
    pub fn commit_merge(
        &self,
        branches: &[BranchId],
        policy: &MergePolicy,
    ) -> Result<MergeReport> {
        if branches.is_empty() {
            return Err(Error::InvalidSpec("merge of zero branches".into()));
        }
        if policy.designated >= branches.len() {
            return Err(Error::InvalidSpec(format!(
                "designated index {} out of range",
                policy.designated
            )));
        }
        let mut state = self.lock();
        let state = &mut *state;
        for b in branches {
            state.branch(*b)?.require_running()?;
        }

        // Nearest common ancestor version across all branch lineages.
        let mut common: Option<Vec<_>> = None;
        for b in branches {
            let lineage = state.lineage(*b);
            let set: BTreeSet<_> = lineage.iter().copied().collect();
            common = Some(match common {
                None => lineage,
                Some(prev) => prev.into_iter().filter(|v| set.contains(v)).collect(),
            });
        }
        let ancestor_version = common
            .unwrap_or_default()
            .first()
            .copied()
            .ok_or(Error::NoCommonAncestor)?;
        let ancestor_fs = state.versions[&ancestor_version].fs_version;

        // Per-path page edits of each branch relative to the ancestor.
        let mut paths: BTreeSet<String> = state
            .fs
            .version_paths(ancestor_fs)
            .into_iter()
            .collect();
        for b in branches {
            let fsv = state.branches[b].view.fs_version;
            paths.extend(state.fs.version_paths(fsv));
        }

        struct Edit {
            branch_idx: usize,
            pages: BTreeMap<u64, Page>,
        }
        let mut report = MergeReport::default();
        let mut merged_content: BTreeMap<String, Vec<u8>> = BTreeMap::new();

        for path in &paths {
            let base = state.fs.resolve_file(ancestor_fs, path);
            let mut edits: Vec<Edit> = Vec::new();
            for (idx, b) in branches.iter().enumerate() {
                let fsv = state.branches[b].view.fs_version;
                let cur = state.fs.resolve_file(fsv, path);
                match (&base, &cur) {
                    (Some(base), Some(cur)) => {
                        let mut pages = BTreeMap::new();
                        for (i, (bp, cp)) in base
                            .chunks(PAGE_SIZE)
                            .zip(cur.chunks(PAGE_SIZE))
                            .enumerate()
                        {
                            if bp != cp {
                                let mut page = [0u8; PAGE_SIZE];
                                page.copy_from_slice(cp);
                                pages.insert(i as u64, page);
                            }
                        }
                        if !pages.is_empty() {
                            edits.push(Edit {
                                branch_idx: idx,
                                pages,
                            });
                        }
                    }
                    (None, Some(cur)) => {
                        let mut pages = BTreeMap::new();
                        for (i, cp) in cur.chunks(PAGE_SIZE).enumerate() {
                            let mut page = [0u8; PAGE_SIZE];
                            page.copy_from_slice(cp);
                            pages.insert(i as u64, page);
                        }
                        edits.push(Edit {
                            branch_idx: idx,
                            pages,
                        });
                    }
                    _ => {}
                }
            }
            if edits.is_empty() {
                continue;
            }
            // Overlap: two branches touching the same page with different
            // content.
            let mut conflict = false;
            let mut combined: BTreeMap<u64, (usize, Page)> = BTreeMap::new();
            for e in &edits {
                for (page, content) in &e.pages {
                    match combined.get(page) {
                        Some((_, existing)) if existing != content => conflict = true,
                        _ => {}
                    }
                    combined.entry(*page).or_insert((e.branch_idx, *content));
                }
            }
            let sensitive_rule = policy.rule_for(path);
            let needs_approval = match (conflict, sensitive_rule) {
                (_, Some(MergeRule::RequireApproval)) => true,
                (true, _) => policy.conflict_rule == MergeRule::RequireApproval,
                (false, _) => false,
            };
            if conflict {
                report.conflicted.push(path.clone());
            }
            if needs_approval && !policy.approver.approves(path) {
                report.approval_gated.push(path.clone());
                continue;
            }
            // Apply: on conflict the designated branch's full content wins;
            // otherwise union of page edits over the base.
            let content = if conflict {
                let fsv = state.branches[&branches[policy.designated]].view.fs_version;
                state
                    .fs
                    .resolve_file(fsv, path)
                    .or_else(|| base.clone())
                    .unwrap_or_default()
            } else {
                let mut content = base.clone().unwrap_or_default();
                let max_page = combined.keys().max().copied().unwrap_or(0);
                let needed = ((max_page + 1) as usize) * PAGE_SIZE;
                if content.len() < needed {
                    content.resize(needed, 0);
                }
                for (page, (_, bytes)) in &combined {
                    let start = (*page as usize) * PAGE_SIZE;
                    content[start..start + PAGE_SIZE].copy_from_slice(bytes);
                }
                content
            };
            merged_content.insert(path.clone(), content);
            report.merged.push(path.clone());
        }

        if policy.strict && !report.approval_gated.is_empty() {
            return Err(Error::PolicyRejected(format!(
                "{} path(s) await approval",
                report.approval_gated.len()
            )));
        }

        // Materialize the merged filesystem: ancestor snapshot plus edits.
        let merged_fs = state.fs.snapshot_version(ancestor_fs);
        let mut merged_view = state.fs.new_view(merged_fs, None);
        for (path, content) in &merged_content {
            debug_assert_eq!(content.len() % PAGE_SIZE, 0);
            for (i, chunk) in content.chunks(PAGE_SIZE).enumerate() {
                let mut page = [0u8; PAGE_SIZE];
                page.copy_from_slice(chunk);
                // Paths absent from the ancestor cannot be written through
                // the extent map; the merge result only covers ancestor
                // paths plus per-branch edits of them.
                if state.fs.file_pages(merged_fs, path).is_some() {
                    state
                        .fs
                        .write(&mut merged_view, &self.core.pages, path, i as u64, &page)?;
                }
            }
        }

        // Volatile process state wholesale from the designated branch,
        // shared copy-on-write into the user-visible workspace.
        let designated = branches[policy.designated];
        let human = state.human;
        let (new_procs, new_gui, new_conns, des_ns): (
            BTreeMap<LocalPid, Proc>,
            Vec<GuiBuf>,
            Vec<crate::model::ConnState>,
            _,
        ) = {
            let des = state.branches.get_mut(&designated).expect("validated");
            let mut procs = BTreeMap::new();
            for (pid, p) in &mut des.procs {
                let mut regions = BTreeMap::new();
                for (vma, r) in &mut p.regions {
                    regions.insert(
                        *vma,
                        Region {
                            class: r.class,
                            start_page: r.start_page,
                            len_pages: r.len_pages,
                            backing_file: r.backing_file.clone(),
                            backing_page_offset: r.backing_page_offset,
                            table: Arc::clone(&r.table),
                        },
                    );
                }
                procs.insert(*pid, Proc {
                    meta: p.meta.clone(),
                    regions,
                });
            }
            let gui = des
                .gui
                .iter()
                .map(|g| GuiBuf {
                    id: g.id,
                    pages: g
                        .pages
                        .iter()
                        .map(|p| {
                            self.core.pages.alloc_copy(
                                &self.core.pages.read(*p),
                                crate::pagestore::CopyCause::BranchLocal,
                            )
                        })
                        .collect(),
                    mutation_rate_hint: g.mutation_rate_hint,
                })
                .collect();
            (
                procs,
                gui,
                des.conns.values().cloned().collect(),
                des.namespace,
            )
        };

        let human_branch = state.branches.get_mut(&human).expect("human exists");
        release_branch_state(
            human_branch,
            &mut state.fs,
            &mut state.ports,
            &self.core.pages,
        );
        for pid in new_procs.keys() {
            state.events.push(EngineEvent::AddressSpaceReplaced {
                branch: human,
                process: *pid,
            });
        }
        let human_branch = state.branches.get_mut(&human).expect("human exists");
        human_branch.procs = new_procs;
        human_branch.gui = new_gui;
        human_branch.namespace = des_ns;
        for c in new_conns {
            for ep in [&c.local, &c.remote] {
                if matches!(ep.host, EndpointHost::Process { .. }) {
                    state.ports.bind(des_ns, ep.port, c.id)?;
                }
            }
            state
                .branches
                .get_mut(&human)
                .unwrap()
                .conns
                .insert(c.id, c);
        }
        let human_branch = state.branches.get_mut(&human).expect("human exists");
        let old_view = std::mem::replace(&mut human_branch.view, merged_view);
        human_branch.status = super::BranchStatus::Running;
        state.fs.release_view(old_view, &self.core.pages);

        report.merged.sort();
        report.conflicted.sort();
        report.approval_gated.sort();
        Ok(report)
    }

    /// An external side effect attempted by a branch. Routed by the
    /// branch's egress policy; external effects are never auto-committed.
    pub fn attempt_external(&self, branch: BranchId, action: &str) -> Result<OutboxStatus> {
        let mut state = self.lock();
        let (status, event) = {
            let seq_src = state.next_outbox;
            let b = state.branch_mut(branch)?;
            b.require_running()?;
            match b.egress {
                EgressPolicy::Restricted => (
                    OutboxStatus::Denied,
                    PolicyEvent::EgressDenied {
                        branch,
                        action: action.to_string(),
                    },
                ),
                EgressPolicy::DelayedCommit | EgressPolicy::RequireApproval => {
                    let seq = seq_src;
                    b.outbox.push(OutboxEntry {
                        seq,
                        branch,
                        action: action.to_string(),
                        status: OutboxStatus::Held,
                    });
                    (OutboxStatus::Held, PolicyEvent::EgressQueued { branch, seq })
                }
            }
        };
        let entry_line = if matches!(status, OutboxStatus::Held) {
            state.next_outbox += 1;
            state
                .branch(branch)?
                .outbox
                .last()
                .and_then(|e| serde_json::to_string(e).ok())
        } else {
            None
        };
        state.policy_events.push(event.clone());
        drop(state);
        if let Some(line) = entry_line {
            self.append_branch_log(branch, &line);
        }
        self.append_policy_events(&[event]);
        Ok(status)
    }

    pub fn outbox(&self, branch: BranchId) -> Result<Vec<OutboxEntry>> {
        Ok(self.lock().branch(branch)?.outbox.clone())
    }

    /// Release held external actions. Only the user-visible workspace can
    /// release; promotion alone never releases.
    pub fn release_outbox(&self, branch: BranchId) -> Result<Vec<u64>> {
        let mut state = self.lock();
        if branch != state.human {
            return Err(Error::OutboxNotReleasable);
        }
        let b = state.branch_mut(branch)?;
        let mut released = Vec::new();
        let mut events = Vec::new();
        for e in &mut b.outbox {
            if e.status == OutboxStatus::Held {
                e.status = OutboxStatus::Released;
                released.push(e.seq);
                events.push(PolicyEvent::EgressReleased { branch, seq: e.seq });
            }
        }
        state.policy_events.extend(events.clone());
        drop(state);
        self.append_policy_events(&events);
        Ok(released)
    }

    /// Enforce the branch's security profile on one access event. Denied
    /// events in enforce mode mutate nothing; audit mode logs and lets the
    /// access through.
    pub fn attempt_access(&self, branch: BranchId, event: &AccessEvent) -> Result<Decision> {
        let (decision, mode) = {
            let mut state = self.lock();
            let b = state.branch(branch)?;
            b.require_running()?;
            let decision = enforce(&b.profile, event);
            let mode = b.profile.mode;
            if decision == Decision::Deny || mode == EnforcementMode::Audit {
                state.audit.append(AuditRecord {
                    branch,
                    event: event.clone(),
                    decision,
                    mode,
                });
            }
            (decision, mode)
        };
        let blocked = decision == Decision::Deny && mode == EnforcementMode::Enforce;
        if !blocked && event.kind == AccessKind::File {
            // Allowed file access touches the file (first page marker
            // write), the modeled state effect of the access.
            let mut marker = [0u8; PAGE_SIZE];
            marker[..8].copy_from_slice(b"touched\n");
            match self.fs_write(branch, &event.target, 0, &marker) {
                Ok(()) | Err(Error::MissingPath(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(decision)
    }
}
