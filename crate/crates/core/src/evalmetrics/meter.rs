use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const BYTES_PER_MB: f64 = 1024.0 * 1024.0;

/// Resource state at the end of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceSnapshot {
    /// Deterministic accounting: parameters + replay memory + peak activations.
    pub ram_bytes: u64,
    /// Measured process residency, when enabled. Report-only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured_rss_bytes: Option<u64>,
    /// Extra data written during training (replay dumps, checkpoints).
    pub disk_bytes: u64,
}

/// Byte counts feeding one snapshot.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Usage {
    pub param_bytes: usize,
    pub memory_bytes: usize,
    pub activation_bytes: usize,
}

impl Usage {
    pub fn total(&self) -> u64 {
        (self.param_bytes + self.memory_bytes + self.activation_bytes) as u64
    }
}

/// Run-local resource meter; one snapshot per epoch.
#[derive(Debug, Clone, Default)]
pub struct ResourceMeter {
    snapshots: Vec<ResourceSnapshot>,
    disk_bytes: u64,
    disk_dir: Option<PathBuf>,
    measure_rss: bool,
}

impl ResourceMeter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Disk usage is read from this directory's files instead of the
    /// in-process counter.
    pub fn with_disk_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.disk_dir = Some(dir.into());
        self
    }

    pub fn with_measured_rss(mut self, on: bool) -> Self {
        self.measure_rss = on;
        self
    }

    pub fn disk_dir(&self) -> Option<&Path> {
        self.disk_dir.as_deref()
    }

    /// Sets the current size of extra data kept on disk.
    pub fn set_disk_bytes(&mut self, bytes: u64) {
        self.disk_bytes = bytes;
    }

    pub fn snapshot(&mut self, usage: Usage) -> &ResourceSnapshot {
        let disk_bytes = match &self.disk_dir {
            Some(dir) => dir_bytes(dir),
            None => self.disk_bytes,
        };
        self.snapshots.push(ResourceSnapshot {
            ram_bytes: usage.total(),
            measured_rss_bytes: self.measure_rss.then(process_rss_bytes).flatten(),
            disk_bytes,
        });
        self.snapshots.last().expect("just pushed")
    }

    pub fn snapshots(&self) -> &[ResourceSnapshot] {
        &self.snapshots
    }

    pub fn into_snapshots(self) -> Vec<ResourceSnapshot> {
        self.snapshots
    }
}

/// (avg, max) in MB of a per-epoch series.
pub fn avg_max_mb(values: impl Iterator<Item = u64>) -> (f64, f64) {
    let (mut n, mut sum, mut max) = (0usize, 0f64, 0u64);
    for v in values {
        n += 1;
        sum += v as f64;
        max = max.max(v);
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    (sum / n as f64 / BYTES_PER_MB, max as f64 / BYTES_PER_MB)
}

fn dir_bytes(dir: &Path) -> u64 {
    let Ok(entries) = std::fs::read_dir(dir) else {
        return 0;
    };
    entries
        .filter_map(|e| e.ok()?.metadata().ok())
        .filter(|m| m.is_file())
        .map(|m| m.len())
        .sum()
}

#[cfg(target_os = "linux")]
fn process_rss_bytes() -> Option<u64> {
    let statm = std::fs::read_to_string("/proc/self/statm").ok()?;
    let pages: u64 = statm.split_whitespace().nth(1)?.parse().ok()?;
    Some(pages * 4096)
}

#[cfg(not(target_os = "linux"))]
fn process_rss_bytes() -> Option<u64> {
    None
}
