//! Cost model of a conventional union/overlay container filesystem, used as
//! the baseline in the layer-depth experiment.
//!
//! The model captures the two structural properties that matter for
//! branch-heavy workloads: a cold read of an unmaterialized page probes
//! every layer from the writable top down to the layer holding the page, so
//! lookup cost grows with stack depth; and each layer is a mountpoint, so a
//! branch cannot be forked from another branch's layer stack.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileOp {
    /// Cold read of a page resident only in the bottom layer.
    ColdSharedRead,
    /// Read of a page already materialized branch-local.
    MaterializedRead,
    /// Write to a page already materialized branch-local.
    MaterializedWrite,
}

/// Per-operation cost knobs in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlayCosts {
    /// Fixed per-read cost outside the layer walk.
    pub read_base_ms: f64,
    /// Cost of probing one layer during lookup.
    pub probe_ms: f64,
    pub materialized_read_ms: f64,
    pub materialized_write_ms: f64,
}

impl Default for OverlayCosts {
    fn default() -> Self {
        // Defaults calibrated so a depth-0 cold read costs ~1.3 ms, a
        // depth-50 one ~5.7 ms, and materialized reads/writes sit flat at
        // ~1.4 ms and ~2.5 ms.
        OverlayCosts {
            read_base_ms: 1.212,
            probe_ms: 0.088,
            materialized_read_ms: 1.4,
            materialized_write_ms: 2.5,
        }
    }
}

/// One overlay mount: a writable upper layer over a read-only lower stack.
#[derive(Debug, Clone)]
pub struct OverlayModel {
    pub costs: OverlayCosts,
    /// Read-only lower layers under the writable top.
    pub depth: u32,
    /// True for mounts created by forking; such mounts cannot be forked
    /// again because each layer stack is a mountpoint.
    pub is_branch: bool,
}

impl OverlayModel {
    pub fn base(costs: OverlayCosts) -> Self {
        OverlayModel {
            costs,
            depth: 0,
            is_branch: false,
        }
    }

    /// Fork a branch mount from this one. Only the base mount can be
    /// forked; a branch-of-branch request is structurally invalid.
    pub fn fork(&self) -> Result<OverlayModel> {
        if self.is_branch {
            return Err(Error::BranchOfBranch);
        }
        Ok(OverlayModel {
            costs: self.costs,
            depth: self.depth + 1,
            is_branch: true,
        })
    }

    /// A branch mount at an arbitrary lower-stack depth.
    pub fn at_depth(costs: OverlayCosts, depth: u32) -> Self {
        OverlayModel {
            costs,
            depth,
            is_branch: depth > 0,
        }
    }

    /// Number of layer probes an operation performs at this depth.
    pub fn probes(&self, op: FileOp) -> u32 {
        match op {
            // Walks the upper layer plus every lower layer.
            FileOp::ColdSharedRead => self.depth + 1,
            FileOp::MaterializedRead | FileOp::MaterializedWrite => 1,
        }
    }

    /// Modeled latency of one operation at this depth.
    pub fn lookup(&self, op: FileOp) -> f64 {
        match op {
            FileOp::ColdSharedRead => {
                self.costs.read_base_ms + self.costs.probe_ms * self.probes(op) as f64
            }
            FileOp::MaterializedRead => self.costs.materialized_read_ms,
            FileOp::MaterializedWrite => self.costs.materialized_write_ms,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_zero_cold_read_is_one_probe() {
        let m = OverlayModel::base(OverlayCosts::default());
        assert_eq!(m.probes(FileOp::ColdSharedRead), 1);
    }

    #[test]
    fn deep_cold_read_matches_expected_ratio() {
        let costs = OverlayCosts::default();
        let d0 = OverlayModel::at_depth(costs, 0).lookup(FileOp::ColdSharedRead);
        let d50 = OverlayModel::at_depth(costs, 50).lookup(FileOp::ColdSharedRead);
        assert_eq!(OverlayModel::at_depth(costs, 50).probes(FileOp::ColdSharedRead), 51);
        let ratio = d50 / d0;
        assert!((ratio - 4.4).abs() < 0.15, "ratio {ratio}");
    }

    #[test]
    fn materialized_ops_flat_across_depth() {
        let costs = OverlayCosts::default();
        for depth in [0, 10, 50] {
            let m = OverlayModel::at_depth(costs, depth);
            assert_eq!(m.lookup(FileOp::MaterializedRead), costs.materialized_read_ms);
            assert_eq!(m.lookup(FileOp::MaterializedWrite), costs.materialized_write_ms);
            assert_eq!(m.probes(FileOp::MaterializedRead), 1);
        }
    }

    #[test]
    fn branch_of_branch_rejected() {
        let base = OverlayModel::base(OverlayCosts::default());
        let branch = base.fork().unwrap();
        assert!(matches!(branch.fork(), Err(Error::BranchOfBranch)));
    }
}
