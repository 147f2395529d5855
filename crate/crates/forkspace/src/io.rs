//! Connection classification and per-branch restoration, plus branch-local
//! GUI buffer reconstruction and the external-effect policy boundary.
//!
//! Internal connections (both endpoints inside the workspace) are restored
//! into the destination branch with identical transport state; each branch
//! has an independent loopback and address space, so reused ports never
//! collide across branches. External connections are severed at branch
//! creation — their descriptors are restored closed so descriptor tables
//! stay index-stable — and every external effect a branch attempts flows
//! through a policy gate: restricted, delayed commit, or explicit approval.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{BranchId, ConnId, LocalPid, NamespaceId};
use crate::model::{ConnState, ConnStatus, EndpointHost};

/// How a branch may touch the world outside the workspace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EgressPolicy {
    /// All egress denied and logged.
    Restricted,
    /// Egress queued in the branch outbox, released only after promotion
    /// plus an explicit release call.
    DelayedCommit,
    /// Egress queued until an approval decision.
    RequireApproval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutboxStatus {
    Held,
    Released,
    Denied,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutboxEntry {
    pub seq: u64,
    pub branch: BranchId,
    pub action: String,
    pub status: OutboxStatus,
}

/// Audit trail of policy-relevant events; appended to a JSON-lines log per
/// branch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum PolicyEvent {
    SeveredExternal { branch: BranchId, conn: ConnId },
    EgressDenied { branch: BranchId, action: String },
    EgressQueued { branch: BranchId, seq: u64 },
    EgressReleased { branch: BranchId, seq: u64 },
}

/// Partition a connection set into internal and external. A connection is
/// internal iff both endpoints resolve to processes present in `pids`.
pub fn classify_connections<'a>(
    conns: impl IntoIterator<Item = &'a ConnState>,
    pids: &BTreeSet<LocalPid>,
) -> (Vec<ConnId>, Vec<ConnId>) {
    let mut internal = Vec::new();
    let mut external = Vec::new();
    for c in conns {
        if is_internal(c, pids) {
            internal.push(c.id);
        } else {
            external.push(c.id);
        }
    }
    (internal, external)
}

pub fn is_internal(conn: &ConnState, pids: &BTreeSet<LocalPid>) -> bool {
    match (&conn.local.host, &conn.remote.host) {
        (EndpointHost::Process { local_pid: a }, EndpointHost::Process { local_pid: b }) => {
            pids.contains(a) && pids.contains(b)
        }
        _ => false,
    }
}

/// Tracks port bindings per namespace so reconstruction can prove ports
/// reused across sibling branches never collide within one namespace.
#[derive(Debug, Default)]
pub struct PortRegistry {
    bound: BTreeMap<(NamespaceId, u16), ConnId>,
}

impl PortRegistry {
    pub fn bind(&mut self, ns: NamespaceId, port: u16, conn: ConnId) -> Result<()> {
        if let Some(existing) = self.bound.get(&(ns, port)) {
            if *existing != conn {
                return Err(Error::PortCollision { ns: ns.0, port });
            }
        }
        self.bound.insert((ns, port), conn);
        Ok(())
    }

    pub fn release_namespace(&mut self, ns: NamespaceId) {
        self.bound.retain(|(n, _), _| *n != ns);
    }

    pub fn bound_in(&self, ns: NamespaceId) -> usize {
        self.bound.keys().filter(|(n, _)| *n == ns).count()
    }
}

/// Restore captured connections into a destination branch namespace.
/// Internal connections are re-established with bit-identical transport
/// state; external ones are restored closed and reported for the policy
/// log.
pub fn restore_connections(
    captured: &[ConnState],
    pids: &BTreeSet<LocalPid>,
    dest_branch: BranchId,
    dest_ns: NamespaceId,
    ports: &mut PortRegistry,
) -> Result<(Vec<ConnState>, Vec<PolicyEvent>)> {
    let mut out = Vec::with_capacity(captured.len());
    let mut events = Vec::new();
    for c in captured {
        if is_internal(c, pids) {
            for ep in [&c.local, &c.remote] {
                if let EndpointHost::Process { local_pid } = ep.host {
                    if !pids.contains(&local_pid) {
                        return Err(Error::MissingEndpoint(local_pid.0));
                    }
                    ports.bind(dest_ns, ep.port, c.id)?;
                }
            }
            out.push(c.clone());
        } else {
            // Live externals are severed with a policy event; already-closed
            // records are carried over unchanged (descriptor-stable).
            let was_live = c.status == ConnStatus::Established;
            let mut severed = c.clone();
            severed.status = ConnStatus::Closed;
            severed.proto = Default::default();
            if was_live {
                events.push(PolicyEvent::SeveredExternal {
                    branch: dest_branch,
                    conn: c.id,
                });
            }
            out.push(severed);
        }
    }
    Ok((out, events))
}

/// Byte-stream helpers over the modeled transport state; used by the
/// sequence-continuity checks.
pub mod stream {
    use crate::model::ProtoState;

    /// Queue bytes on the sender side; sequence numbers advance immediately.
    pub fn send(proto: &mut ProtoState, bytes: &[u8]) {
        proto.inflight.extend_from_slice(bytes);
        proto.next_send_seq += bytes.len() as u64;
    }

    /// Drain everything in flight to the receiver. Returns the byte run and
    /// the sequence number of its first byte.
    pub fn deliver(proto: &mut ProtoState) -> (u64, Vec<u8>) {
        let start = proto.delivered_seq;
        let bytes = std::mem::take(&mut proto.inflight);
        proto.delivered_seq += bytes.len() as u64;
        (start, bytes)
    }
}
