//! Benchmark harness: agent-style trace replay against pluggable clone
//! strategies, plus the scalability, ablation, and layer-depth experiments.
//!
//! Traces are replayable deterministically from a seed: event targets
//! (which branch, which file) are drawn from a seeded generator during
//! replay, so the same (seed, config) pair produces the same metrics, and
//! the eager oracle replays the identical decision sequence for
//! verification. Model calls (planning/grounding/judging) are pure modeled
//! delays.

mod csv;
mod experiments;
mod gen;

pub use csv::{rows_to_csv, CsvTable};
pub use experiments::{
    run_ablation, run_layer_bench, run_scalability, AblationRow, LayerBenchRow, LayerModel,
    LayerOp, ScalabilityRow,
};
pub use gen::{gen_beam, gen_best_of_n, gen_random, gen_rollback_heavy};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Engine, EngineConfig};
use crate::error::{Error, Result};
use crate::ids::{BranchId, LocalPid, VersionId, VmaId};
use crate::model::{build_workspace, diff, WorkspaceSpec, WorkspaceState};
use crate::oracle::OracleEngine;
use crate::strategy::CloneStrategy;
use crate::{Page, PAGE_SIZE};

/// One trace action. Branch and file targets are chosen by the replay
/// generator; memory writes carry explicit coordinates sampled from the
/// workspace at generation time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum TraceAction {
    Record,
    Fork { n: u32 },
    Write { process: u32, vma: u64, slot: u64 },
    FsRead,
    FsWrite,
    Rollback { version: u32 },
    Discard,
    Promote,
    ModelCall { ms: u64 },
    ExternalAttempt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub step: u32,
    #[serde(flatten)]
    pub action: TraceAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub seed: u64,
    pub events: Vec<TraceEvent>,
}

/// A replayable workload file: one workspace spec plus one or more traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub seed: u64,
    pub workspace: WorkspaceSpec,
    pub traces: Vec<Trace>,
}

impl Workload {
    pub fn from_json(json: &str) -> Result<Self> {
        let w: Workload = serde_json::from_str(json)
            .map_err(|e| Error::MalformedTrace(e.to_string()))?;
        w.workspace.check()?;
        Ok(w)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("workload serializes")
    }
}

/// Per-trace replay metrics. Modeled latency columns are deterministic for
/// a fixed (seed, config); `wall_ms` is measured.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub experiment: String,
    pub strategy: String,
    pub trace: usize,
    pub seed: u64,
    pub events: usize,
    pub branches_peak: usize,
    pub model_ms: f64,
    pub substrate_ms: f64,
    pub e2e_ms: f64,
    pub cow_copied_bytes: u64,
    pub fs_probes: u64,
    pub footprint_bytes: u64,
    pub verify_diffs: i64,
    pub wall_ms: f64,
}

impl MetricsRow {
    pub const HEADER: &'static [&'static str] = &[
        "experiment",
        "strategy",
        "trace",
        "seed",
        "events",
        "branches_peak",
        "model_ms",
        "substrate_ms",
        "e2e_ms",
        "cow_copied_bytes",
        "fs_probes",
        "footprint_bytes",
        "verify_diffs",
        "wall_ms",
    ];

    pub fn to_fields(&self) -> Vec<String> {
        vec![
            self.experiment.clone(),
            self.strategy.clone(),
            self.trace.to_string(),
            self.seed.to_string(),
            self.events.to_string(),
            self.branches_peak.to_string(),
            format!("{:.4}", self.model_ms),
            format!("{:.4}", self.substrate_ms),
            format!("{:.4}", self.e2e_ms),
            self.cow_copied_bytes.to_string(),
            self.fs_probes.to_string(),
            self.footprint_bytes.to_string(),
            self.verify_diffs.to_string(),
            format!("{:.4}", self.wall_ms),
        ]
    }
}

/// Deterministic page content for trace writes.
pub fn page_from_seed(seed: u64) -> Page {
    *crate::model::fill_page(seed)
}

/// Replay a workload under a strategy. With `verify`, the eager deep-copy
/// oracle replays the identical decision sequence and every live branch is
/// diffed bit-exactly at the end of each trace.
pub fn replay(
    workload: &Workload,
    strategy: &CloneStrategy,
    config: &EngineConfig,
    verify: bool,
) -> Result<Vec<MetricsRow>> {
    let ws = build_workspace(&workload.workspace)?;
    let mut rows = Vec::with_capacity(workload.traces.len());
    for (idx, trace) in workload.traces.iter().enumerate() {
        let row = replay_trace(&ws, trace, idx, strategy, config, verify)?;
        rows.push(row);
    }
    // CDF form: sorted by end-to-end latency.
    rows.sort_by(|a, b| {
        a.e2e_ms
            .partial_cmp(&b.e2e_ms)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.trace.cmp(&b.trace))
    });
    Ok(rows)
}

fn replay_trace(
    ws: &WorkspaceState,
    trace: &Trace,
    trace_idx: usize,
    strategy: &CloneStrategy,
    config: &EngineConfig,
    verify: bool,
) -> Result<MetricsRow> {
    let wall_start = std::time::Instant::now();
    let engine = Engine::launch_state(config.clone(), ws)?;
    let mut oracle = verify.then(|| OracleEngine::launch(ws));
    let model = config.cost_model;
    let mut rng = ChaCha8Rng::seed_from_u64(trace.seed);

    let human = engine.human();
    let mut live: Vec<BranchId> = vec![human];
    let mut model_ms = 0.0f64;
    let mut substrate_ms = 0.0f64;
    let mut branches_peak = 1usize;
    let counters_before = engine.counters();

    let paths: Vec<String> = engine.fs_paths(human)?;
    for event in &trace.events {
        let pick = |rng: &mut ChaCha8Rng, live: &[BranchId]| -> BranchId {
            live[rng.gen_range(0..live.len())]
        };
        match &event.action {
            TraceAction::Record => {
                let b = pick(&mut rng, &live);
                let v = engine.record_version(b)?;
                substrate_ms +=
                    engine.version_freeze_report(v)?.total_ops() as f64 * model.per_meta_op_ms;
                if let Some(o) = oracle.as_mut() {
                    let ov = o.record(b)?;
                    debug_assert_eq!(ov, v);
                }
            }
            TraceAction::Fork { n } => {
                let b = pick(&mut rng, &live);
                let cap_left = config.branch_cap.saturating_sub(live.len());
                let n_eff = (*n as usize).min(cap_left);
                if n_eff == 0 {
                    continue;
                }
                let v = engine.record_version(b)?;
                substrate_ms +=
                    engine.version_freeze_report(v)?.total_ops() as f64 * model.per_meta_op_ms;
                let (children, report) = engine.clone_with(
                    strategy,
                    v,
                    n_eff,
                    crate::security::SecurityProfile::audit_all(),
                )?;
                substrate_ms += report.critical_path_ms;
                if let Some(o) = oracle.as_mut() {
                    let ov = o.record(b)?;
                    debug_assert_eq!(ov, v);
                    let oc = o.fork(v, n_eff)?;
                    debug_assert_eq!(oc, children);
                }
                live.extend(children);
                branches_peak = branches_peak.max(live.len());
            }
            TraceAction::Write { process, vma, slot } => {
                let b = pick(&mut rng, &live);
                let bytes = page_from_seed(rng.gen());
                let pid = LocalPid(*process);
                let vma = VmaId(*vma);
                engine.write_page(b, pid, vma, *slot, &bytes)?;
                if let Some(o) = oracle.as_mut() {
                    o.write_page(b, pid, vma, *slot, &bytes)?;
                }
            }
            TraceAction::FsRead => {
                if paths.is_empty() {
                    continue;
                }
                let b = pick(&mut rng, &live);
                let path = &paths[rng.gen_range(0..paths.len())];
                let pages = engine.fs_file_pages(b, path)?;
                if pages == 0 {
                    continue;
                }
                let page = rng.gen_range(0..pages);
                let (_, stats) = engine.fs_read(b, path, page)?;
                substrate_ms += model.read_base_ms
                    + stats.probes as f64 * model.per_layer_probe_ms
                    + if stats.storage { model.storage_read_ms } else { 0.0 };
            }
            TraceAction::FsWrite => {
                if paths.is_empty() {
                    continue;
                }
                let b = pick(&mut rng, &live);
                let path = &paths[rng.gen_range(0..paths.len())];
                let pages = engine.fs_file_pages(b, path)?;
                if pages == 0 {
                    continue;
                }
                let page = rng.gen_range(0..pages);
                let bytes = page_from_seed(rng.gen());
                engine.fs_write(b, path, page, &bytes)?;
                substrate_ms += model.materialized_write_ms;
                if let Some(o) = oracle.as_mut() {
                    o.fs_write(b, path, page, &bytes)?;
                }
            }
            TraceAction::Rollback { version } => {
                let b = pick(&mut rng, &live);
                let lineage = engine.lineage_of(b);
                if lineage.is_empty() {
                    continue;
                }
                let target: VersionId = lineage[*version as usize % lineage.len()];
                let pages = engine.version_present_pages(target)?;
                let procs = ws.processes.len() as u64;
                engine.rollback(b, target)?;
                substrate_ms += model.restore_ms(pages, procs);
                if let Some(o) = oracle.as_mut() {
                    let olin = o.lineage(b);
                    debug_assert_eq!(olin, lineage);
                    o.rollback(b, target)?;
                }
            }
            TraceAction::Discard => {
                let candidates: Vec<BranchId> =
                    live.iter().copied().filter(|b| *b != human).collect();
                if candidates.is_empty() {
                    continue;
                }
                let b = candidates[rng.gen_range(0..candidates.len())];
                engine.discard(b)?;
                if let Some(o) = oracle.as_mut() {
                    o.discard(b)?;
                }
                live.retain(|x| *x != b);
            }
            TraceAction::Promote => {
                let b = pick(&mut rng, &live);
                engine.commit_promote(b)?;
                if let Some(o) = oracle.as_mut() {
                    o.promote(b)?;
                }
                if b != human {
                    live.retain(|x| *x != b);
                }
            }
            TraceAction::ModelCall { ms } => {
                model_ms += if *ms == 0 {
                    config.model_call_ms
                } else {
                    *ms as f64
                };
            }
            TraceAction::ExternalAttempt => {
                let b = pick(&mut rng, &live);
                engine.attempt_external(b, "external-action")?;
            }
        }
    }

    let mut verify_diffs: i64 = -1;
    if let Some(o) = oracle.as_ref() {
        let mut total = 0usize;
        for b in &live {
            let got = engine.snapshot_state(*b)?;
            let want = o.snapshot(*b)?;
            total += diff(&got, &want).len();
        }
        verify_diffs = total as i64;
        engine.audit()?;
    }

    let counters_after = engine.counters();
    let (fs_probes, _) = engine.fs_counters();
    let footprint = engine.footprint().total();
    Ok(MetricsRow {
        experiment: "replay".into(),
        strategy: strategy.name.clone(),
        trace: trace_idx,
        seed: trace.seed,
        events: trace.events.len(),
        branches_peak,
        model_ms,
        substrate_ms,
        e2e_ms: model_ms + substrate_ms,
        cow_copied_bytes: counters_after.cow_managed() - counters_before.cow_managed(),
        fs_probes,
        footprint_bytes: footprint,
        verify_diffs,
        wall_ms: wall_start.elapsed().as_secs_f64() * 1000.0,
    })
}

/// Stable hash of a config for CSV provenance lines.
pub fn config_hash(config: &EngineConfig) -> String {
    use sha2::{Digest, Sha256};
    let canon = serde_json::to_string(config).expect("config serializes");
    hex::encode(&Sha256::digest(canon.as_bytes())[..8])
}

pub(crate) fn bytes_page(byte: u8) -> Page {
    [byte; PAGE_SIZE]
}
