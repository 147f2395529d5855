//! Workload specification, loadable from JSON.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::PAGE_SIZE;

/// Declarative description of a synthetic workspace. Deterministic for a
/// fixed `tree_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceSpec {
    /// Number of processes; must be at least 1.
    pub processes: u32,
    /// Seed for the tree shape and all generated content.
    pub tree_seed: u64,
    /// Total anonymous address-space pages across all processes.
    #[serde(default)]
    pub anon_pages: u64,
    /// Alternative byte-denominated form; must be page-aligned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anon_bytes: Option<u64>,
    /// Fraction of anonymous slots materialized with content; the rest stay
    /// never-touched. 1.0 materializes everything.
    #[serde(default = "default_resident")]
    pub resident_fraction: f64,
    /// Shared-memory (IPC segment) pages, branch-local after fork.
    #[serde(default)]
    pub shared_pages: u64,
    #[serde(default)]
    pub file_manifest: Vec<FileSpec>,
    #[serde(default)]
    pub conn_mix: ConnMix,
    #[serde(default)]
    pub gui_buffers: Vec<GuiBufferSpec>,
}

fn default_resident() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileSpec {
    pub path: String,
    pub pages: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnMix {
    pub internal: u32,
    pub external: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuiBufferSpec {
    /// Buffer size in bytes; must be page-aligned.
    pub bytes: u64,
    /// Workload metadata: expected repaint writes per second.
    #[serde(default)]
    pub mutation_rate_hint: u32,
}

impl WorkspaceSpec {
    /// Minimal single-process workspace with no memory.
    pub fn minimal() -> Self {
        WorkspaceSpec {
            processes: 1,
            tree_seed: 0,
            anon_pages: 0,
            anon_bytes: None,
            resident_fraction: 1.0,
            shared_pages: 0,
            file_manifest: Vec::new(),
            conn_mix: ConnMix::default(),
            gui_buffers: Vec::new(),
        }
    }

    /// Small general-purpose fixture for unit tests and fuzzed traces.
    pub fn small(seed: u64) -> Self {
        WorkspaceSpec {
            processes: 4,
            tree_seed: seed,
            anon_pages: 96,
            anon_bytes: None,
            resident_fraction: 1.0,
            shared_pages: 8,
            file_manifest: vec![
                FileSpec {
                    path: "/home/user/doc.txt".into(),
                    pages: 8,
                },
                FileSpec {
                    path: "/usr/lib/libapp.so".into(),
                    pages: 16,
                },
                FileSpec {
                    path: "/home/user/.config/app/settings".into(),
                    pages: 2,
                },
            ],
            conn_mix: ConnMix {
                internal: 2,
                external: 2,
            },
            gui_buffers: vec![GuiBufferSpec {
                bytes: 4 * PAGE_SIZE as u64,
                mutation_rate_hint: 60,
            }],
        }
    }

    /// The browser-heavy benchmark fixture: 168 processes and 2 GiB of
    /// modeled anonymous address space. Only a slice of the slots is
    /// materialized so the fixture stays desk-scale; address-space shape and
    /// per-process metadata are full size.
    pub fn browser_heavy() -> Self {
        WorkspaceSpec {
            processes: 168,
            tree_seed: 7,
            anon_pages: 0,
            anon_bytes: Some(2 * 1024 * 1024 * 1024),
            resident_fraction: 1.0 / 16.0,
            shared_pages: 512,
            file_manifest: (0..96)
                .map(|i| FileSpec {
                    path: format!("/opt/browser/res/pack{i:03}.bin"),
                    pages: 16,
                })
                .chain([
                    FileSpec {
                        path: "/opt/browser/browser.bin".into(),
                        pages: 256,
                    },
                    FileSpec {
                        path: "/home/user/profile/history.db".into(),
                        pages: 64,
                    },
                ])
                .collect(),
            conn_mix: ConnMix {
                internal: 6,
                external: 4,
            },
            gui_buffers: vec![
                GuiBufferSpec {
                    bytes: 256 * PAGE_SIZE as u64,
                    mutation_rate_hint: 120,
                },
                GuiBufferSpec {
                    bytes: 64 * PAGE_SIZE as u64,
                    mutation_rate_hint: 30,
                },
            ],
        }
    }

    /// Total anonymous pages after resolving the byte-denominated form.
    pub fn total_anon_pages(&self) -> Result<u64> {
        match self.anon_bytes {
            None => Ok(self.anon_pages),
            Some(bytes) => {
                if bytes % PAGE_SIZE as u64 != 0 {
                    return Err(Error::InvalidSpec(format!(
                        "anon_bytes {bytes} is not page-aligned"
                    )));
                }
                Ok(bytes / PAGE_SIZE as u64)
            }
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.processes == 0 {
            return Err(Error::InvalidSpec("zero processes".into()));
        }
        if !(0.0..=1.0).contains(&self.resident_fraction) {
            return Err(Error::InvalidSpec(format!(
                "resident_fraction {} outside [0, 1]",
                self.resident_fraction
            )));
        }
        self.total_anon_pages()?;
        for g in &self.gui_buffers {
            if g.bytes % PAGE_SIZE as u64 != 0 {
                return Err(Error::InvalidSpec(format!(
                    "gui buffer size {} is not page-aligned",
                    g.bytes
                )));
            }
        }
        let mut paths = std::collections::BTreeSet::new();
        for f in &self.file_manifest {
            if !paths.insert(&f.path) {
                return Err(Error::InvalidSpec(format!(
                    "duplicate manifest path {}",
                    f.path
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let spec: WorkspaceSpec = serde_json::from_str(json)?;
        spec.check()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }
}
