//! Version tree export/import for harness inspection.

use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointStatus;
use crate::engine::{BranchStatus, Engine};
use crate::error::{Error, Result};
use crate::ids::{BranchId, FsVersionId, VersionId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeExport {
    pub version: VersionId,
    pub parent: Option<VersionId>,
    pub created_by: BranchId,
    pub fs_version: FsVersionId,
    pub checkpoint: String,
    pub created_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchExport {
    pub branch: BranchId,
    pub status: BranchStatus,
    pub current_version: Option<VersionId>,
    pub namespace: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionTreeExport {
    pub nodes: Vec<NodeExport>,
    pub branches: Vec<BranchExport>,
}

impl VersionTreeExport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree serializes")
    }

    /// Parse and validate an exported tree. Import-then-export is a fixed
    /// point of the JSON form.
    pub fn from_json(json: &str) -> Result<Self> {
        let tree: VersionTreeExport = serde_json::from_str(json)?;
        tree.validate()?;
        Ok(tree)
    }

    pub fn validate(&self) -> Result<()> {
        let ids: std::collections::BTreeSet<VersionId> =
            self.nodes.iter().map(|n| n.version).collect();
        if ids.len() != self.nodes.len() {
            return Err(Error::Invariant("duplicate version ids in export".into()));
        }
        for n in &self.nodes {
            if let Some(p) = n.parent {
                if !ids.contains(&p) {
                    return Err(Error::Invariant(format!(
                        "node {} references missing parent {}",
                        n.version, p
                    )));
                }
            }
        }
        // Acyclicity: walk each node to a root.
        let parent: std::collections::BTreeMap<_, _> =
            self.nodes.iter().map(|n| (n.version, n.parent)).collect();
        for n in &self.nodes {
            let mut cur = Some(n.version);
            let mut hops = 0;
            while let Some(v) = cur {
                cur = parent.get(&v).copied().flatten();
                hops += 1;
                if hops > self.nodes.len() {
                    return Err(Error::Invariant("cycle in version tree".into()));
                }
            }
        }
        for b in &self.branches {
            if let Some(v) = b.current_version {
                if !ids.contains(&v) {
                    return Err(Error::Invariant(format!(
                        "branch {} maps to missing version {}",
                        b.branch, v
                    )));
                }
            }
        }
        Ok(())
    }
}

impl Engine {
    pub fn export_tree(&self) -> VersionTreeExport {
        let state = self.lock();
        let nodes = state
            .versions
            .values()
            .map(|v| NodeExport {
                version: v.id,
                parent: v.parent,
                created_by: v.created_by,
                fs_version: v.fs_version,
                checkpoint: match v.handle.status() {
                    CheckpointStatus::Pending => "pending".into(),
                    CheckpointStatus::Durable => "durable".into(),
                    CheckpointStatus::Failed(_) => "failed".into(),
                },
                created_at_ms: v.created_at_ms,
            })
            .collect();
        let branches = state
            .branches
            .values()
            .map(|b| BranchExport {
                branch: b.id,
                status: b.status,
                current_version: b.current_version,
                namespace: b.namespace.0,
            })
            .collect();
        VersionTreeExport { nodes, branches }
    }
}
