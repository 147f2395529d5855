//! The three microbenchmark experiments: clone scalability and footprint,
//! the mechanism ablation, and layer-depth file-operation latency.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::engine::{Engine, EngineConfig};
use crate::error::Result;
use crate::fs::overlay::{FileOp, OverlayModel};
use crate::model::{ConnMix, FileSpec, GuiBufferSpec, MemoryClass, WorkspaceSpec};
use crate::security::SecurityProfile;
use crate::strategy::CloneStrategy;
use crate::PAGE_SIZE;

use super::{bytes_page, page_from_seed};

/// Mid-size fixture for the scalability sweep: big enough that copies
/// dominate bookkeeping, small enough that sixteen eager clones fit in
/// memory.
pub fn scalability_fixture() -> WorkspaceSpec {
    WorkspaceSpec {
        processes: 12,
        tree_seed: 21,
        anon_pages: 3072,
        anon_bytes: None,
        resident_fraction: 1.0,
        shared_pages: 32,
        file_manifest: (0..12)
            .map(|i| FileSpec {
                path: format!("/opt/app/part{i:02}.bin"),
                pages: 48,
            })
            .collect(),
        conn_mix: ConnMix {
            internal: 2,
            external: 2,
        },
        gui_buffers: vec![GuiBufferSpec {
            bytes: 2 * PAGE_SIZE as u64,
            mutation_rate_hint: 60,
        }],
    }
}

/// Fixture for the layer-depth experiment: one 1 MiB contiguous file.
pub fn layer_fixture(max_depth: u32) -> WorkspaceSpec {
    let pages = 256.max(max_depth as u64 + 2);
    WorkspaceSpec {
        processes: 1,
        tree_seed: 4,
        anon_pages: 8,
        anon_bytes: None,
        resident_fraction: 1.0,
        shared_pages: 0,
        file_manifest: vec![FileSpec {
            path: "/data/blob.bin".into(),
            pages,
        }],
        conn_mix: ConnMix::default(),
        gui_buffers: vec![],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalabilityRow {
    pub strategy: String,
    pub n: usize,
    pub critical_path_ms: f64,
    pub dump_on_path_ms: f64,
    pub cow_copied_bytes: u64,
    pub base_content_bytes: u64,
    pub footprint_content_bytes: u64,
    pub footprint_total_bytes: u64,
    pub wall_ms: f64,
}

impl ScalabilityRow {
    pub const HEADER: &'static [&'static str] = &[
        "strategy",
        "n",
        "critical_path_ms",
        "dump_on_path_ms",
        "cow_copied_bytes",
        "base_content_bytes",
        "footprint_content_bytes",
        "footprint_total_bytes",
        "wall_ms",
    ];

    pub fn to_fields(&self) -> Vec<String> {
        vec![
            self.strategy.clone(),
            self.n.to_string(),
            format!("{:.4}", self.critical_path_ms),
            format!("{:.4}", self.dump_on_path_ms),
            self.cow_copied_bytes.to_string(),
            self.base_content_bytes.to_string(),
            self.footprint_content_bytes.to_string(),
            self.footprint_total_bytes.to_string(),
            format!("{:.4}", self.wall_ms),
        ]
    }
}

/// Clone-latency and footprint sweep over 1..=max_clones per strategy, with
/// 1% per-branch divergence applied before the footprint sample.
pub fn run_scalability(max_clones: usize, config: &EngineConfig) -> Result<Vec<ScalabilityRow>> {
    let spec = scalability_fixture();
    let mut rows = Vec::new();
    for strategy in [
        CloneStrategy::fast(),
        CloneStrategy::sync_restore(),
        CloneStrategy::eager_copy(),
    ] {
        for n in 1..=max_clones {
            let engine = Engine::launch(config.clone(), &spec)?;
            let human = engine.human();
            let base = engine.footprint();
            let v = engine.record_version(human)?;
            let (branches, report) =
                engine.clone_with(&strategy, v, n, SecurityProfile::audit_all())?;
            // Keep footprint comparable across strategies: measure after
            // the dump image is durable and holders are reclaimed.
            engine.wait_durable(v)?;
            dirty_fraction(&engine, &branches, 0.01, 1000 + n as u64)?;
            let after = engine.footprint();
            engine.audit()?;
            rows.push(ScalabilityRow {
                strategy: strategy.name.clone(),
                n,
                critical_path_ms: report.critical_path_ms,
                dump_on_path_ms: report.dump_on_path_ms,
                cow_copied_bytes: report.cow_copied_bytes,
                base_content_bytes: base.content_bytes(),
                footprint_content_bytes: after.content_bytes(),
                footprint_total_bytes: after.total(),
                wall_ms: report.wall_ms,
            });
        }
    }
    Ok(rows)
}

/// Dirty a deterministic fraction of each branch's anonymous slots.
fn dirty_fraction(
    engine: &Engine,
    branches: &[crate::ids::BranchId],
    fraction: f64,
    seed: u64,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for b in branches {
        let ws = engine.snapshot_state(*b)?;
        let mut targets = Vec::new();
        for p in &ws.processes {
            for r in &p.regions {
                if r.class != MemoryClass::Anonymous {
                    continue;
                }
                for slot in 0..r.len_pages {
                    targets.push((p.meta.local_pid, r.vma_id, slot));
                }
            }
        }
        let count = ((targets.len() as f64) * fraction).ceil() as usize;
        for _ in 0..count {
            let (pid, vma, slot) = targets[rng.gen_range(0..targets.len())];
            engine.write_page(*b, pid, vma, slot, &page_from_seed(rng.gen()))?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub stage: usize,
    pub strategy: String,
    pub n: usize,
    pub critical_path_ms: f64,
    pub dump_ms: f64,
    pub dump_on_path_ms: f64,
    pub memory_copy_ms: f64,
    pub metadata_ms: f64,
    pub cow_copied_bytes: u64,
    pub wall_ms_median: f64,
}

impl AblationRow {
    pub const HEADER: &'static [&'static str] = &[
        "stage",
        "strategy",
        "n",
        "critical_path_ms",
        "dump_ms",
        "dump_on_path_ms",
        "memory_copy_ms",
        "metadata_ms",
        "cow_copied_bytes",
        "wall_ms_median",
    ];

    pub fn to_fields(&self) -> Vec<String> {
        vec![
            self.stage.to_string(),
            self.strategy.clone(),
            self.n.to_string(),
            format!("{:.4}", self.critical_path_ms),
            format!("{:.4}", self.dump_ms),
            format!("{:.4}", self.dump_on_path_ms),
            format!("{:.4}", self.memory_copy_ms),
            format!("{:.4}", self.metadata_ms),
            self.cow_copied_bytes.to_string(),
            format!("{:.4}", self.wall_ms_median),
        ]
    }
}

/// Mechanism ablation: the five cumulative strategy configurations creating
/// four branches of the browser-heavy fixture. Modeled critical paths are
/// deterministic; wall clock is the median of `reps` runs.
pub fn run_ablation(config: &EngineConfig, reps: usize) -> Result<Vec<AblationRow>> {
    let spec = WorkspaceSpec::browser_heavy();
    let mut rows = Vec::new();
    for (stage, strategy) in CloneStrategy::ablation_stages().into_iter().enumerate() {
        let mut walls = Vec::new();
        let mut kept: Option<AblationRow> = None;
        for _ in 0..reps.max(1) {
            let engine = Engine::launch(config.clone(), &spec)?;
            let human = engine.human();
            let v = engine.record_version(human)?;
            let (_, report) = engine.clone_with(&strategy, v, 4, SecurityProfile::audit_all())?;
            engine.audit()?;
            walls.push(report.wall_ms);
            kept = Some(AblationRow {
                stage,
                strategy: strategy.name.clone(),
                n: 4,
                critical_path_ms: report.critical_path_ms,
                dump_ms: report.dump_ms,
                dump_on_path_ms: report.dump_on_path_ms,
                memory_copy_ms: report.memory_copy_ms,
                metadata_ms: report.metadata_ms,
                cow_copied_bytes: report.cow_copied_bytes,
                wall_ms_median: 0.0,
            });
        }
        walls.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut row = kept.expect("at least one rep");
        row.wall_ms_median = walls[walls.len() / 2];
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerModel {
    Overlay,
    Chain,
}

impl LayerModel {
    fn name(&self) -> &'static str {
        match self {
            LayerModel::Overlay => "overlay",
            LayerModel::Chain => "chain",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOp {
    ReadCold,
    ReadMaterialized,
    WriteMaterialized,
}

impl LayerOp {
    fn name(&self) -> &'static str {
        match self {
            LayerOp::ReadCold => "read_cold",
            LayerOp::ReadMaterialized => "read_materialized",
            LayerOp::WriteMaterialized => "write_materialized",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerBenchRow {
    pub model: LayerModel,
    pub depth: u32,
    pub op: LayerOp,
    pub probes: u32,
    pub latency_ms: f64,
}

impl LayerBenchRow {
    pub const HEADER: &'static [&'static str] = &["model", "depth", "op", "probes", "latency_ms"];

    pub fn to_fields(&self) -> Vec<String> {
        vec![
            self.model.name().to_string(),
            self.depth.to_string(),
            self.op.name().to_string(),
            self.probes.to_string(),
            format!("{:.4}", self.latency_ms),
        ]
    }
}

/// Layer-depth experiment over the 1 MiB file fixture. The overlay model is
/// evaluated analytically; the chain side drives the real layer-chain
/// implementation by forking a branch chain and counting probes, converting
/// counts to latency through the same calibrated costs.
pub fn run_layer_bench(max_depth: u32, config: &EngineConfig) -> Result<Vec<LayerBenchRow>> {
    let model = config.cost_model;
    let overlay_costs = model.overlay_costs();
    let mut rows = Vec::new();
    for depth in 0..=max_depth {
        let m = OverlayModel::at_depth(overlay_costs, depth);
        for (op, fop) in [
            (LayerOp::ReadCold, FileOp::ColdSharedRead),
            (LayerOp::ReadMaterialized, FileOp::MaterializedRead),
            (LayerOp::WriteMaterialized, FileOp::MaterializedWrite),
        ] {
            rows.push(LayerBenchRow {
                model: LayerModel::Overlay,
                depth,
                op,
                probes: m.probes(fop),
                latency_ms: m.lookup(fop),
            });
        }
    }

    let spec = layer_fixture(max_depth);
    let path = "/data/blob.bin";
    let engine = Engine::launch(config.clone(), &spec)?;
    let mut cur = engine.human();
    // Warm the source cache so the first sealed layer holds every probe
    // target; later layers stay empty and only add walk depth.
    for page in 0..=max_depth as u64 {
        engine.fs_read(cur, path, page)?;
    }
    for depth in 0..=max_depth {
        if depth > 0 {
            let v = engine.record_version(cur)?;
            let children = engine.fork(v, 1, SecurityProfile::audit_all())?;
            cur = children[0];
        }
        let page = depth as u64;
        let (_, cold) = engine.fs_read(cur, path, page)?;
        rows.push(LayerBenchRow {
            model: LayerModel::Chain,
            depth,
            op: LayerOp::ReadCold,
            probes: cold.probes,
            latency_ms: model.read_base_ms
                + cold.probes as f64 * model.per_layer_probe_ms
                + if cold.storage { model.storage_read_ms } else { 0.0 },
        });
        let (_, repeat) = engine.fs_read(cur, path, page)?;
        debug_assert!(repeat.cache_hit);
        rows.push(LayerBenchRow {
            model: LayerModel::Chain,
            depth,
            op: LayerOp::ReadMaterialized,
            probes: repeat.probes,
            latency_ms: model.materialized_read_ms,
        });
        engine.fs_write(cur, path, page, &bytes_page(depth as u8))?;
        rows.push(LayerBenchRow {
            model: LayerModel::Chain,
            depth,
            op: LayerOp::WriteMaterialized,
            probes: 1,
            latency_ms: model.materialized_write_ms,
        });
    }
    engine.audit()?;
    Ok(rows)
}
