//! Benchmark and profile CLI for the forkspace engine.
//!
//! Subcommands replay agent-style traces against a chosen clone strategy
//! and emit the scalability, ablation, and layer-depth datasets as CSV;
//! `profile` records, composes, and enforces security profiles. All output
//! goes to stdout or `--out`; the process exits nonzero on any invariant
//! violation.

use std::io::Read;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use forkspace::harness::{
    config_hash, replay, rows_to_csv, run_ablation, run_layer_bench, run_scalability, CsvTable,
    MetricsRow, Workload,
};
use forkspace::harness::{AblationRow, LayerBenchRow, ScalabilityRow};
use forkspace::security::{
    compose_profile, enforce, load_trace, record_profile, AuditLog, AuditRecord, Decision,
    ProfileRegistry, SecurityProfile,
};
use forkspace::{CloneStrategy, EngineConfig};

#[derive(Parser)]
#[command(
    name = "forkspace",
    about = "Versioned-workspace engine benchmarks and profile tooling",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Engine/cost configuration as a JSON file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Write output here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a workload file against a clone strategy and emit per-trace
    /// metrics as a sorted-latency CSV.
    Replay {
        #[command(flatten)]
        common: CommonArgs,
        /// Workload JSON file (workspace spec plus traces).
        #[arg(long)]
        trace: PathBuf,
        /// Clone strategy: fast, sync-restore, parallel-restore,
        /// overlap-dump-restore, cow-memory, or eager-copy.
        #[arg(long, default_value = "fast")]
        strategy: String,
        /// Cross-check final branch states against the eager deep-copy
        /// oracle; exits nonzero on any diff.
        #[arg(long)]
        verify: bool,
        /// Override the workload seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Clone latency and footprint versus concurrent clone count.
    Scalability {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long = "max-clones", default_value_t = 16)]
        max_clones: usize,
    },
    /// Mechanism ablation: five cumulative strategy configurations cloning
    /// four branches of the browser-heavy fixture.
    Ablation {
        #[command(flatten)]
        common: CommonArgs,
        /// Wall-clock repetitions per configuration (median reported).
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// File-operation latency versus layer-chain depth, for the overlay
    /// baseline and the sealed-layer chain.
    LayerBench {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long = "max-depth", default_value_t = 50)]
        max_depth: u32,
    },
    /// Security profile tooling.
    Profile {
        #[command(subcommand)]
        command: ProfileCommand,
    },
}

#[derive(Subcommand)]
enum ProfileCommand {
    /// Record a profile from a human-operated JSON-lines access trace.
    Record {
        #[command(flatten)]
        common: CommonArgs,
        /// JSON-lines trace: a header line, then one AccessEvent per line.
        #[arg(long)]
        trace: PathBuf,
        /// Application the trace belongs to.
        #[arg(long)]
        app: String,
    },
    /// Compose registered application profiles by field-wise union.
    Compose {
        #[command(flatten)]
        common: CommonArgs,
        /// Registry JSON file mapping application names to profiles.
        #[arg(long)]
        registry: PathBuf,
        /// Comma-separated application names.
        #[arg(long, value_delimiter = ',')]
        apps: Vec<String>,
    },
    /// Enforce a profile over a JSON-lines event file; emits one decision
    /// line per event and an optional audit log.
    Enforce {
        #[command(flatten)]
        common: CommonArgs,
        /// Profile JSON file.
        #[arg(long)]
        profile: PathBuf,
        /// JSON-lines AccessEvent file (with header line).
        #[arg(long)]
        events: PathBuf,
        /// Append denied/audited events to this JSON-lines file.
        #[arg(long = "audit-log")]
        audit_log: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<EngineConfig> {
    match path {
        None => Ok(EngineConfig::default()),
        Some(p) => {
            let raw = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            let config: EngineConfig = serde_json::from_str(&raw)
                .with_context(|| format!("parsing config {}", p.display()))?;
            config.cost_model.check()?;
            Ok(config)
        }
    }
}

fn emit(common: &CommonArgs, content: &str) -> Result<()> {
    match &common.out {
        None => {
            print!("{content}");
            Ok(())
        }
        Some(p) => std::fs::write(p, content)
            .with_context(|| format!("writing output {}", p.display())),
    }
}

fn read_file(path: &PathBuf) -> Result<String> {
    let mut raw = String::new();
    std::fs::File::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .read_to_string(&mut raw)?;
    Ok(raw)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Replay {
            common,
            trace,
            strategy,
            verify,
            seed,
        } => {
            let config = load_config(&common.config)?;
            let strategy = CloneStrategy::by_name(&strategy).ok_or_else(|| {
                anyhow!(
                    "unknown strategy {strategy:?}; expected one of {}",
                    CloneStrategy::known_names().join(", ")
                )
            })?;
            let mut workload = Workload::from_json(&read_file(&trace)?)?;
            if let Some(seed) = seed {
                workload.seed = seed;
                for (i, t) in workload.traces.iter_mut().enumerate() {
                    t.seed = seed.wrapping_add(i as u64);
                }
            }
            let rows = replay(&workload, &strategy, &config, verify)?;
            let table = rows_to_csv(
                MetricsRow::HEADER,
                &rows,
                MetricsRow::to_fields,
                config_hash(&config),
            );
            emit(&common, &table.to_string())?;
            if verify {
                let diffs: i64 = rows.iter().map(|r| r.verify_diffs.max(0)).sum();
                if diffs > 0 {
                    bail!("oracle verification found {diffs} divergent entries");
                }
            }
            Ok(())
        }
        Command::Scalability { common, max_clones } => {
            if max_clones < 1 {
                bail!("--max-clones must be at least 1");
            }
            let config = load_config(&common.config)?;
            let rows = run_scalability(max_clones, &config)?;
            let table: CsvTable = rows_to_csv(
                ScalabilityRow::HEADER,
                &rows,
                ScalabilityRow::to_fields,
                config_hash(&config),
            );
            emit(&common, &table.to_string())
        }
        Command::Ablation { common, reps } => {
            let config = load_config(&common.config)?;
            let rows = run_ablation(&config, reps)?;
            let table = rows_to_csv(
                AblationRow::HEADER,
                &rows,
                AblationRow::to_fields,
                config_hash(&config),
            );
            emit(&common, &table.to_string())
        }
        Command::LayerBench { common, max_depth } => {
            let config = load_config(&common.config)?;
            let rows = run_layer_bench(max_depth, &config)?;
            let table = rows_to_csv(
                LayerBenchRow::HEADER,
                &rows,
                LayerBenchRow::to_fields,
                config_hash(&config),
            );
            emit(&common, &table.to_string())
        }
        Command::Profile { command } => match command {
            ProfileCommand::Record { common, trace, app } => {
                let raw = read_file(&trace)?;
                let (header, events) = load_trace(raw.as_bytes())?;
                let profile = record_profile(header.origin, events, &app)?;
                emit(&common, &(profile.to_json() + "\n"))
            }
            ProfileCommand::Compose {
                common,
                registry,
                apps,
            } => {
                let registry: ProfileRegistry = serde_json::from_str(&read_file(&registry)?)?;
                let profile = compose_profile(&apps, &registry)?;
                emit(&common, &(profile.to_json() + "\n"))
            }
            ProfileCommand::Enforce {
                common,
                profile,
                events,
                audit_log,
            } => {
                let profile = SecurityProfile::from_json(&read_file(&profile)?)?;
                let raw = read_file(&events)?;
                let (_, events) = load_trace(raw.as_bytes())?;
                let mut log = AuditLog::default();
                let mut out = String::from("kind,target,decision\n");
                for ev in events {
                    let decision = enforce(&profile, &ev);
                    if decision == Decision::Deny
                        || profile.mode == forkspace::security::EnforcementMode::Audit
                    {
                        log.append(AuditRecord {
                            branch: forkspace::BranchId(ev.branch),
                            event: ev.clone(),
                            decision,
                            mode: profile.mode,
                        });
                    }
                    out.push_str(&format!(
                        "{:?},{},{}\n",
                        ev.kind,
                        ev.target,
                        match decision {
                            Decision::Allow => "allow",
                            Decision::Deny => "deny",
                        }
                    ));
                }
                if let Some(path) = audit_log {
                    let f = std::fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&path)
                        .with_context(|| format!("opening audit log {}", path.display()))?;
                    log.write_jsonl(f)?;
                }
                emit(&common, &out)
            }
        },
    }
}
