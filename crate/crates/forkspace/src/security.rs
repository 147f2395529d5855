//! Per-application allowlist profiles recorded from human access traces and
//! enforced on branch access events.
//!
//! A profile is the exact set of syscalls, paths, and devices a human
//! session touched while operating an application. Profiles compose by
//! field-wise union and are attached to a branch at fork time; enforcement
//! either blocks and logs (enforce mode) or only logs (audit mode). Traces
//! flagged as agent-recorded are rejected, so a confused or malicious agent
//! never builds its own authority. OS-configuration and package-management
//! profiles form a separate privileged class that automatic composition
//! refuses.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::BranchId;

/// Path allowlist pattern: literal path components, with `*` matching
/// exactly one component. A pattern matches a path when it is a
/// component-wise prefix of it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PathPattern(pub String);

impl PathPattern {
    pub fn matches(&self, path: &str) -> bool {
        let pat: Vec<&str> = self.0.split('/').filter(|c| !c.is_empty()).collect();
        let comps: Vec<&str> = path.split('/').filter(|c| !c.is_empty()).collect();
        if pat.len() > comps.len() {
            return false;
        }
        pat.iter()
            .zip(&comps)
            .all(|(p, c)| *p == "*" || p == c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnforcementMode {
    Enforce,
    Audit,
}

/// Application profiles are recorded from ordinary human operation;
/// privileged profiles (OS configuration, package management) require
/// separate policy and are never auto-composed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileClass {
    Application,
    Privileged,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecurityProfile {
    pub apps: BTreeSet<String>,
    pub syscalls: BTreeSet<u32>,
    pub paths: BTreeSet<PathPattern>,
    pub devices: BTreeSet<String>,
    pub mode: EnforcementMode,
    pub class: ProfileClass,
}

impl SecurityProfile {
    /// Deny-all profile in enforce mode.
    pub fn empty() -> Self {
        SecurityProfile {
            apps: BTreeSet::new(),
            syscalls: BTreeSet::new(),
            paths: BTreeSet::new(),
            devices: BTreeSet::new(),
            mode: EnforcementMode::Enforce,
            class: ProfileClass::Application,
        }
    }

    /// Allow-everything profile in audit mode; the human workspace runs
    /// under this.
    pub fn audit_all() -> Self {
        SecurityProfile {
            mode: EnforcementMode::Audit,
            ..SecurityProfile::empty()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    Syscall,
    File,
    Device,
}

/// One observed access, from a recorded trace or a live branch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessEvent {
    pub branch: u64,
    pub kind: AccessKind,
    /// Syscall number for syscalls; path or device name otherwise.
    pub target: String,
    pub timestamp_ms: u64,
}

impl AccessEvent {
    pub fn syscall(nr: u32) -> Self {
        AccessEvent {
            branch: 0,
            kind: AccessKind::Syscall,
            target: nr.to_string(),
            timestamp_ms: 0,
        }
    }

    pub fn file(path: &str) -> Self {
        AccessEvent {
            branch: 0,
            kind: AccessKind::File,
            target: path.to_string(),
            timestamp_ms: 0,
        }
    }

    pub fn device(name: &str) -> Self {
        AccessEvent {
            branch: 0,
            kind: AccessKind::Device,
            target: name.to_string(),
            timestamp_ms: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceOrigin {
    Human,
    Agent,
}

/// Header line of a JSON-lines trace file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceHeader {
    pub origin: TraceOrigin,
    #[serde(default)]
    pub app: Option<String>,
}

/// Build a profile from a recorded access trace. The profile contains
/// exactly the distinct resources the trace touched. Agent-recorded traces
/// are rejected.
pub fn record_profile(
    origin: TraceOrigin,
    events: impl IntoIterator<Item = AccessEvent>,
    app: &str,
) -> Result<SecurityProfile> {
    if origin != TraceOrigin::Human {
        return Err(Error::AgentTrace);
    }
    let mut profile = SecurityProfile::empty();
    profile.apps.insert(app.to_string());
    for ev in events {
        match ev.kind {
            AccessKind::Syscall => {
                let nr = ev.target.parse::<u32>().map_err(|_| {
                    Error::MalformedTrace(format!("syscall target {:?}", ev.target))
                })?;
                profile.syscalls.insert(nr);
            }
            AccessKind::File => {
                profile.paths.insert(PathPattern(ev.target));
            }
            AccessKind::Device => {
                profile.devices.insert(ev.target);
            }
        }
    }
    Ok(profile)
}

/// Parse a JSON-lines trace file: a header line followed by one
/// [`AccessEvent`] per line.
pub fn load_trace(reader: impl std::io::Read) -> Result<(TraceHeader, Vec<AccessEvent>)> {
    let buf = std::io::BufReader::new(reader);
    let mut lines = buf.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::MalformedTrace("empty trace file".into()))?
        .map_err(|e| Error::MalformedTrace(e.to_string()))?;
    let header: TraceHeader = serde_json::from_str(&header_line)?;
    let mut events = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::MalformedTrace(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(serde_json::from_str(&line)?);
    }
    Ok((header, events))
}

/// Registry of recorded per-application profiles; serializes to JSON.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ProfileRegistry {
    pub apps: std::collections::BTreeMap<String, SecurityProfile>,
}

impl ProfileRegistry {
    pub fn register(&mut self, app: &str, profile: SecurityProfile) {
        self.apps.insert(app.to_string(), profile);
    }
}

/// Field-wise union of the registered profiles of `apps`. Deterministic and
/// commutative. Privileged profiles refuse automatic composition.
pub fn compose_profile(apps: &[String], registry: &ProfileRegistry) -> Result<SecurityProfile> {
    let mut out = SecurityProfile::empty();
    for app in apps {
        let p = registry
            .apps
            .get(app)
            .ok_or_else(|| Error::UnknownApp(app.clone()))?;
        if p.class == ProfileClass::Privileged {
            return Err(Error::PrivilegedApp(app.clone()));
        }
        out.apps.extend(p.apps.iter().cloned());
        out.syscalls.extend(p.syscalls.iter().copied());
        out.paths.extend(p.paths.iter().cloned());
        out.devices.extend(p.devices.iter().cloned());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Allow,
    Deny,
}

/// Pure allowlist check of one event against a profile.
pub fn enforce(profile: &SecurityProfile, event: &AccessEvent) -> Decision {
    let allowed = match event.kind {
        AccessKind::Syscall => event
            .target
            .parse::<u32>()
            .map(|nr| profile.syscalls.contains(&nr))
            .unwrap_or(false),
        AccessKind::File => profile.paths.iter().any(|p| p.matches(&event.target)),
        AccessKind::Device => profile.devices.contains(&event.target),
    };
    if allowed {
        Decision::Allow
    } else {
        Decision::Deny
    }
}

/// One enforcement outcome in the audit log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub branch: BranchId,
    pub event: AccessEvent,
    pub decision: Decision,
    pub mode: EnforcementMode,
}

/// Append-only audit log with an optional JSON-lines sink. Enforce-mode
/// denials and every audit-mode event land here exactly once.
#[derive(Debug, Default)]
pub struct AuditLog {
    pub records: Vec<AuditRecord>,
}

impl AuditLog {
    pub fn append(&mut self, record: AuditRecord) {
        self.records.push(record);
    }

    pub fn write_jsonl(&self, mut sink: impl Write) -> Result<()> {
        for r in &self.records {
            let line = serde_json::to_string(r)?;
            sink.write_all(line.as_bytes())
                .and_then(|_| sink.write_all(b"\n"))
                .map_err(|e| Error::io("audit log", e))?;
        }
        Ok(())
    }
}
