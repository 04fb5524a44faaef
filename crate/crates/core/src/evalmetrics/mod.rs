//! Competition metrics, per-board min-max normalization, the weighted
//! CL score and ranking.
//!
//! A board normalizes each raw column over exactly the rows it holds:
//! accuracies are benefit columns, time/RAM/disk are cost columns, and a
//! constant column normalizes to 1. The score is
//!
//! ```text
//! 0.3 n_test + 0.1 n_val + 0.15 n_time
//!   + 0.125 mean(n_ram_avg, n_ram_max) + 0.125 mean(n_disk_avg, n_disk_max)
//! ```
//!
//! with no division by the weight total.

mod meter;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::strategies::TrainLog;

pub use meter::{avg_max_mb, ResourceMeter, ResourceSnapshot, Usage, BYTES_PER_MB};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Track {
    Ni,
    #[serde(alias = "mt-nc")]
    Mtnc,
    Nic,
    All,
}

impl fmt::Display for Track {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ni => "NI",
            Self::Mtnc => "MT-NC",
            Self::Nic => "NIC",
            Self::All => "ALL",
        })
    }
}

impl std::str::FromStr for Track {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ni" => Ok(Self::Ni),
            "mtnc" | "mt-nc" | "nc" => Ok(Self::Mtnc),
            "nic" => Ok(Self::Nic),
            "all" => Ok(Self::All),
            other => Err(Error::Config(format!("unknown track {other:?}"))),
        }
    }
}

/// Raw values of the five competition metrics (seven columns).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics<T = f64> {
    pub test_acc: T,
    pub val_acc_avg: T,
    pub run_time_minutes: T,
    pub ram_avg_mb: T,
    pub ram_max_mb: T,
    pub disk_avg_mb: T,
    pub disk_max_mb: T,
}

impl<T: Real> RunMetrics<T> {
    fn columns(&self) -> [T; 7] {
        [
            self.test_acc,
            self.val_acc_avg,
            self.run_time_minutes,
            self.ram_avg_mb,
            self.ram_max_mb,
            self.disk_avg_mb,
            self.disk_max_mb,
        ]
    }

    fn from_columns(c: [T; 7]) -> Self {
        Self {
            test_acc: c[0],
            val_acc_avg: c[1],
            run_time_minutes: c[2],
            ram_avg_mb: c[3],
            ram_max_mb: c[4],
            disk_avg_mb: c[5],
            disk_max_mb: c[6],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.columns();
        if c.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::Precondition("metrics must be finite and nonnegative".into()));
        }
        if self.test_acc > T::one() || self.val_acc_avg > T::one() {
            return Err(Error::Precondition("accuracies must lie in [0, 1]".into()));
        }
        if self.ram_max_mb < self.ram_avg_mb || self.disk_max_mb < self.disk_avg_mb {
            return Err(Error::Precondition("max must be >= avg for RAM and disk".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights<T = f64> {
    pub test: T,
    pub val: T,
    pub time: T,
    pub ram: T,
    pub disk: T,
}

impl<T: Real> Default for ScoreWeights<T> {
    fn default() -> Self {
        Self {
            test: T::lit(0.3),
            val: T::lit(0.1),
            time: T::lit(0.15),
            ram: T::lit(0.125),
            disk: T::lit(0.125),
        }
    }
}

/// Min-max normalized columns in [0, 1], higher is better.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedRow<T = f64> {
    pub test_acc: T,
    pub val_acc_avg: T,
    pub run_time: T,
    pub ram_avg: T,
    pub ram_max: T,
    pub disk_avg: T,
    pub disk_max: T,
}

const BENEFIT: [bool; 7] = [true, true, false, false, false, false, false];

/// Normalizes every column over the given rows. Fewer than two rows, or a
/// constant column, normalize to 1.
pub fn normalize_scoreboard<T: Real>(rows: &[RunMetrics<T>]) -> Vec<NormalizedRow<T>> {
    let cols: Vec<[T; 7]> = rows.iter().map(RunMetrics::columns).collect();
    let mut lo = [T::infinity(); 7];
    let mut hi = [T::neg_infinity(); 7];
    for c in &cols {
        for k in 0..7 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    cols.iter()
        .map(|c| {
            let mut n = [T::one(); 7];
            if rows.len() >= 2 {
                for k in 0..7 {
                    let range = hi[k] - lo[k];
                    if range > T::zero() {
                        let v = (c[k] - lo[k]) / range;
                        n[k] = if BENEFIT[k] { v } else { T::one() - v };
                    }
                }
            }
            NormalizedRow {
                test_acc: n[0],
                val_acc_avg: n[1],
                run_time: n[2],
                ram_avg: n[3],
                ram_max: n[4],
                disk_avg: n[5],
                disk_max: n[6],
            }
        })
        .collect()
}

pub fn cl_score<T: Real>(row: &NormalizedRow<T>, w: &ScoreWeights<T>) -> T {
    let half = T::lit(0.5);
    w.test * row.test_acc
        + w.val * row.val_acc_avg
        + w.time * row.run_time
        + w.ram * half * (row.ram_avg + row.ram_max)
        + w.disk * half * (row.disk_avg + row.disk_max)
}

/// Clock used for the run-time metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeBasis {
    /// Measured wall-clock minutes; varies between machines.
    WallClock,
    /// Deterministic work units (rows x parameters per step) scaled by
    /// `WORK_UNITS_PER_MINUTE`.
    #[default]
    Work,
}

/// Scale of the deterministic clock. Only ratios matter once a board is
/// normalized.
pub const WORK_UNITS_PER_MINUTE: f64 = 1e9;

/// The seven raw metric columns of a finished run. RAM uses the accounting
/// model of the resource snapshots. A run stopped by its budget before any
/// batch finished has a validation accuracy of 0.
pub fn run_metrics(log: &TrainLog, basis: TimeBasis) -> Result<RunMetrics> {
    let (ram_avg_mb, ram_max_mb) = avg_max_mb(log.resources.iter().map(|r| r.ram_bytes));
    let (disk_avg_mb, disk_max_mb) = avg_max_mb(log.resources.iter().map(|r| r.disk_bytes));
    let run_time_minutes = match basis {
        TimeBasis::WallClock => log.wall_clock_seconds / 60.0,
        TimeBasis::Work => log.work_units as f64 / WORK_UNITS_PER_MINUTE,
    };
    let m = RunMetrics {
        test_acc: log.final_test_acc,
        val_acc_avg: if log.over_budget && log.val_acc.is_empty() {
            0.0
        } else {
            avg_val_accuracy(log)?
        },
        run_time_minutes,
        ram_avg_mb,
        ram_max_mb,
        disk_avg_mb,
        disk_max_mb,
    };
    m.validate()?;
    Ok(m)
}

/// Arithmetic mean of the per-batch validation accuracies.
pub fn avg_val_accuracy(log: &TrainLog) -> Result<f64> {
    if log.val_acc.is_empty() {
        return Err(Error::Precondition("training log has no validation entries".into()));
    }
    Ok(log.val_acc.iter().sum::<f64>() / log.val_acc.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoardRow {
    pub name: String,
    pub metrics: RunMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub published: Option<f64>,
    /// Over-budget rows get the worst normalized time.
    #[serde(default)]
    pub over_budget: bool,
}

impl BoardRow {
    pub fn new(name: impl Into<String>, metrics: RunMetrics) -> Self {
        Self {
            name: name.into(),
            metrics,
            published: None,
            over_budget: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRow {
    pub rank: usize,
    pub name: String,
    pub metrics: RunMetrics,
    pub normalized: NormalizedRow,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub published: Option<f64>,
    #[serde(default)]
    pub over_budget: bool,
}

/// Rows of one track, scored and ranked together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scoreboard {
    pub track: Option<Track>,
    pub weights: ScoreWeights,
    pub rows: Vec<ScoredRow>,
}

impl Scoreboard {
    pub fn build(track: Option<Track>, rows: &[BoardRow], weights: ScoreWeights) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Precondition("a scoreboard needs at least one row".into()));
        }
        let raw: Vec<RunMetrics> = rows.iter().map(|r| r.metrics).collect();
        let normalized = normalize_scoreboard(&raw);
        let scored = rows
            .iter()
            .zip(normalized)
            .map(|(r, mut n)| {
                if r.over_budget {
                    n.run_time = 0.0;
                }
                ScoredRow {
                    rank: 0,
                    name: r.name.clone(),
                    metrics: r.metrics,
                    normalized: n,
                    score: cl_score(&n, &weights),
                    published: r.published,
                    over_budget: r.over_budget,
                }
            })
            .collect();
        Ok(Self {
            track,
            weights,
            rows: rank(scored),
        })
    }

    pub fn row(&self, name: &str) -> Option<&ScoredRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Largest |computed - published| over rows that carry a published score.
    pub fn max_published_deviation(&self) -> Option<f64> {
        self.rows
            .iter()
            .filter_map(|r| r.published.map(|p| (r.score - p).abs()))
            .reduce(f64::max)
    }

    /// Spearman correlation between computed and published scores.
    pub fn published_rank_correlation(&self) -> Option<f64> {
        let (a, b): (Vec<f64>, Vec<f64>) = self
            .rows
            .iter()
            .filter_map(|r| r.published.map(|p| (r.score, p)))
            .unzip();
        (a.len() >= 2).then(|| spearman(&a, &b))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "rank", "team", "test_acc", "val_acc_avg", "run_time", "ram_avg", "ram_max",
            "disk_avg", "disk_max", "cl_score", "published_score", "over_budget",
        ])?;
        for r in &self.rows {
            let m = &r.metrics;
            w.write_record([
                r.rank.to_string(),
                r.name.clone(),
                m.test_acc.to_string(),
                m.val_acc_avg.to_string(),
                m.run_time_minutes.to_string(),
                m.ram_avg_mb.to_string(),
                m.ram_max_mb.to_string(),
                m.disk_avg_mb.to_string(),
                m.disk_max_mb.to_string(),
                format!("{:.4}", r.score),
                r.published.map(|p| p.to_string()).unwrap_or_default(),
                r.over_budget.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Stable descending sort by score; ties broken by test accuracy (higher
/// first) and then by name. Assigns ranks from 1.
pub fn rank(mut rows: Vec<ScoredRow>) -> Vec<ScoredRow> {
    rows.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| {
                b.metrics
                    .test_acc
                    .partial_cmp(&a.metrics.test_acc)
                    .unwrap_or(Ordering::Equal)
            })
            .then_with(|| a.name.cmp(&b.name))
    });
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    rows
}

/// Ranks with ties sharing the mean of their positions (1-based).
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs paired samples");
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

#[derive(Debug, Deserialize)]
struct FixtureRecord {
    team: String,
    test_acc: f64,
    val_acc_avg: f64,
    run_time: f64,
    ram_avg: f64,
    ram_max: f64,
    disk_avg: f64,
    disk_max: f64,
    published_score: Option<f64>,
}

/// Reads a table fixture CSV with columns
/// `team,test_acc,val_acc_avg,run_time,ram_avg,ram_max,disk_avg,disk_max,published_score`.
pub fn read_fixture<R: Read>(input: R) -> Result<Vec<BoardRow>> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut rows = Vec::new();
    for rec in rd.deserialize::<FixtureRecord>() {
        let r = rec.map_err(|e| Error::Format(format!("malformed fixture: {e}")))?;
        let metrics = RunMetrics {
            test_acc: r.test_acc,
            val_acc_avg: r.val_acc_avg,
            run_time_minutes: r.run_time,
            ram_avg_mb: r.ram_avg,
            ram_max_mb: r.ram_max,
            disk_avg_mb: r.disk_avg,
            disk_max_mb: r.disk_max,
        };
        metrics
            .validate()
            .map_err(|e| Error::Format(format!("fixture row {:?}: {e}", r.team)))?;
        rows.push(BoardRow {
            name: r.team,
            metrics,
            published: r.published_score,
            over_budget: false,
        });
    }
    if rows.is_empty() {
        return Err(Error::Format("fixture has no rows".into()));
    }
    Ok(rows)
}

/// ALL-track rows: per-column means of the raw metrics of every name present
/// in all three main tracks, in NI order. Names missing a track are dropped.
pub fn all_track_aggregate(ni: &[BoardRow], mtnc: &[BoardRow], nic: &[BoardRow]) -> Vec<BoardRow> {
    let index = |rows: &[BoardRow]| -> BTreeMap<String, BoardRow> {
        rows.iter().map(|r| (r.name.clone(), r.clone())).collect()
    };
    let (b, c) = (index(mtnc), index(nic));
    ni.iter()
        .filter_map(|a| {
            let (b, c) = (b.get(&a.name)?, c.get(&a.name)?);
            let (ca, cb, cc) = (a.metrics.columns(), b.metrics.columns(), c.metrics.columns());
            let mut mean = [0.0; 7];
            for k in 0..7 {
                mean[k] = (ca[k] + cb[k] + cc[k]) / 3.0;
            }
            Some(BoardRow {
                name: a.name.clone(),
                metrics: RunMetrics::from_columns(mean),
                published: None,
                over_budget: a.over_budget || b.over_budget || c.over_budget,
            })
        })
        .collect()
}
