//! Experiment specs, the run executor, scoreboards and reports.
//!
//! Exit codes used by the `clb` binary (see [`exit_code`]):
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | other failure |
//! | 2 | invalid configuration or input file |
//! | 3 | a run hit its budget (records are still written) |
//! | 4 | numeric failure (non-finite loss) |
//! | 5 | I/O failure |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalmetrics::{
    read_fixture, run_metrics, BoardRow, ResourceMeter, RunMetrics, ScoreWeights, Scoreboard,
    TimeBasis, Track,
};
use crate::strategies::{
    train, Budget, ModelConfig, RunOptions, StrategyConfig, StrategyKind, TrainLog,
};
use crate::streamgen::{
    generate_world, make_mtnc_stream, make_nic_stream, make_ni_stream, Protocol, Stream,
    WorldConfig,
};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable that replaces a spec's seed list with one seed.
pub const SEED_ENV: &str = "CLB_SEED";

/// Class-split parameters of the generated streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamShape {
    pub mtnc_first_task_classes: usize,
    pub mtnc_later_task_classes: usize,
    pub nic_first_batch_classes: usize,
}

impl Default for StreamShape {
    /// CORe50 splits: 10 + 8 x 5 classes for MT-NC, 10 classes first in NIC.
    fn default() -> Self {
        Self {
            mtnc_first_task_classes: 10,
            mtnc_later_task_classes: 5,
            nic_first_batch_classes: 10,
        }
    }
}

impl StreamShape {
    pub fn desk() -> Self {
        Self {
            mtnc_first_task_classes: 2,
            mtnc_later_task_classes: 2,
            nic_first_batch_classes: 2,
        }
    }
}

/// Builds the stream of one track; `All` has no single stream.
pub fn build_stream(track: Track, world: &WorldConfig, shape: &StreamShape) -> Result<Stream> {
    let w = generate_world(world)?;
    match track {
        Track::Ni => make_ni_stream(&w, world),
        Track::Mtnc => make_mtnc_stream(
            &w,
            world,
            shape.mtnc_first_task_classes,
            shape.mtnc_later_task_classes,
        ),
        Track::Nic => make_nic_stream(&w, world, shape.nic_first_batch_classes),
        Track::All => Err(Error::Config("the ALL track expands to three streams".into())),
    }
}

pub fn protocol_track(p: Protocol) -> Track {
    match p {
        Protocol::Ni => Track::Ni,
        Protocol::MtNc => Track::Mtnc,
        Protocol::Nic => Track::Nic,
    }
}

fn default_name() -> String {
    "experiment".into()
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// One experiment: a strategy on a track over a list of seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub track: Track,
    /// Unset fields take the defaults of the chosen `kind`.
    #[serde(default, deserialize_with = "strategy_with_kind_defaults")]
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub stream: StreamShape,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub budget: Budget,
    #[serde(default)]
    pub time_basis: TimeBasis,
    /// Scratch files of strategies that keep data on disk go here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn strategy_with_kind_defaults<'de, D: Deserializer<'de>>(
    d: D,
) -> std::result::Result<StrategyConfig, D::Error> {
    let mut user = serde_json::Map::<String, Value>::deserialize(d)?;
    let kind: StrategyKind = match user.get("kind") {
        Some(v) => serde_json::from_value(v.clone()).map_err(D::Error::custom)?,
        None => StrategyKind::Naive,
    };
    let mut merged = serde_json::to_value(StrategyConfig::of(kind)).map_err(D::Error::custom)?;
    let base = merged.as_object_mut().expect("struct serializes to a map");
    base.append(&mut user);
    serde_json::from_value(merged).map_err(D::Error::custom)
}

impl ExperimentSpec {
    pub fn new(track: Track, strategy: StrategyConfig) -> Self {
        Self {
            name: default_name(),
            track,
            strategy,
            model: ModelConfig::default(),
            world: WorldConfig::default(),
            stream: StreamShape::default(),
            seeds: default_seeds(),
            budget: Budget::default(),
            time_basis: TimeBasis::default(),
            output_dir: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Switches world and stream shape to the small preset.
    pub fn desk(mut self) -> Self {
        self.world = WorldConfig::desk();
        self.stream = StreamShape::desk();
        self
    }

    /// Replaces the seed list with the value of `CLB_SEED`, when given.
    pub fn with_seed_override(mut self, value: Option<&str>) -> Result<Self> {
        if let Some(v) = value {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an integer, got {v:?}")))?;
            self.seeds = vec![seed];
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("spec needs at least one seed".into()));
        }
        self.budget.validate()?;
        self.world.validate()?;
        self.strategy.validate()?;
        if self.strategy.kind == StrategyKind::Multihead && self.track != Track::Mtnc {
            return Err(Error::Config(format!(
                "the multi-head pipeline needs task labels; track {} has none",
                self.track
            )));
        }
        Ok(())
    }

    fn tracks(&self) -> Vec<Track> {
        match self.track {
            Track::All => vec![Track::Ni, Track::Mtnc, Track::Nic],
            t => vec![t],
        }
    }
}

/// Result of one (track, seed) run, or the ALL aggregate of three.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub spec: ExperimentSpec,
    pub track: Track,
    pub seed: u64,
    pub metrics: RunMetrics,
    pub over_budget: bool,
    /// Absent on ALL aggregates.
    pub stream_hash: Option<String>,
    pub log: Option<TrainLog>,
    pub engine_version: String,
}

impl RunRecord {
    /// Row label used on scoreboards and reports.
    pub fn label(&self) -> String {
        format!("{}:{}", self.spec.name, self.spec.strategy.kind)
    }

    /// The record with machine-dependent fields (timings, measured RSS, the
    /// output directory) cleared.
    pub fn without_wall_clock(&self) -> Self {
        let mut out = self.clone();
        out.spec.output_dir = None;
        if let Some(log) = &mut out.log {
            *log = log.without_wall_clock();
        }
        if self.spec.time_basis == TimeBasis::WallClock {
            out.metrics.run_time_minutes = 0.0;
        }
        out
    }

    /// SHA-256 of the record's JSON with wall-clock fields excluded.
    pub fn fingerprint(&self) -> Result<String> {
        let json = serde_json::to_vec(&self.without_wall_clock())?;
        Ok(hex::encode(Sha256::digest(&json)))
    }

    pub fn file_name(&self) -> String {
        let track = serde_json::to_value(self.track).expect("unit variant");
        format!(
            "{}-{}-{}-seed{}.json",
            self.spec.name,
            track.as_str().unwrap_or("track"),
            self.spec.strategy.kind,
            self.seed
        )
    }
}

struct Unit {
    track: Track,
    seed: u64,
}

fn run_unit(spec: &ExperimentSpec, unit: &Unit) -> Result<RunRecord> {
    let world = spec.world.clone().with_seed(unit.seed);
    let stream = build_stream(unit.track, &world, &spec.stream)?;
    let cfg = spec.strategy.clone().with_seed(unit.seed);
    let mut meter = ResourceMeter::new();
    if let Some(dir) = &spec.output_dir {
        let scratch = dir.join("scratch").join(format!(
            "{}-{}-seed{}",
            spec.name, unit.track, unit.seed
        ));
        if scratch.exists() {
            std::fs::remove_dir_all(&scratch)?;
        }
        meter = meter.with_disk_dir(scratch);
    }
    let trained = train(
        &stream,
        &spec.model,
        &cfg,
        RunOptions {
            budget: spec.budget,
            meter,
        },
    )?;
    let log = trained.log;
    let metrics = run_metrics(&log, spec.time_basis)?;
    Ok(RunRecord {
        spec: spec.clone(),
        track: unit.track,
        seed: unit.seed,
        metrics,
        over_budget: log.over_budget,
        stream_hash: Some(log.stream_hash_before.clone()),
        log: Some(log),
        engine_version: ENGINE_VERSION.into(),
    })
}

fn mean_metrics(ms: &[RunMetrics]) -> RunMetrics {
    let n = ms.len() as f64;
    let avg = |f: fn(&RunMetrics) -> f64| ms.iter().map(f).sum::<f64>() / n;
    RunMetrics {
        test_acc: avg(|m| m.test_acc),
        val_acc_avg: avg(|m| m.val_acc_avg),
        run_time_minutes: avg(|m| m.run_time_minutes),
        ram_avg_mb: avg(|m| m.ram_avg_mb),
        ram_max_mb: avg(|m| m.ram_max_mb),
        disk_avg_mb: avg(|m| m.disk_avg_mb),
        disk_max_mb: avg(|m| m.disk_max_mb),
    }
}

/// Runs every (track, seed) of the spec on up to `jobs` worker threads.
/// Records come back in seed order, tracks in NI, MT-NC, NIC order, with
/// each seed's ALL aggregate after its three children.
pub fn run_experiment(spec: &ExperimentSpec, jobs: usize) -> Result<Vec<RunRecord>> {
    spec.validate()?;
    let units: Vec<Unit> = spec
        .seeds
        .iter()
        .flat_map(|&seed| spec.tracks().into_iter().map(move |track| Unit { track, seed }))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<Result<RunRecord>> = pool.install(|| {
        use rayon::prelude::*;
        units.par_iter().map(|u| run_unit(spec, u)).collect()
    });
    let records = results.into_iter().collect::<Result<Vec<_>>>()?;
    if spec.track != Track::All {
        return Ok(records);
    }
    let mut out = Vec::with_capacity(records.len() / 3 * 4);
    for children in records.chunks(3) {
        let metrics = mean_metrics(&children.iter().map(|r| r.metrics).collect::<Vec<_>>());
        let aggregate = RunRecord {
            spec: spec.clone(),
            track: Track::All,
            seed: children[0].seed,
            metrics,
            over_budget: children.iter().any(|r| r.over_budget),
            stream_hash: None,
            log: None,
            engine_version: ENGINE_VERSION.into(),
        };
        out.extend_from_slice(children);
        out.push(aggregate);
    }
    Ok(out)
}

pub fn write_records(dir: &Path, records: &[RunRecord]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    records
        .iter()
        .map(|r| {
            let path = dir.join(r.file_name());
            std::fs::write(&path, serde_json::to_vec_pretty(r)?)?;
            Ok(path)
        })
        .collect()
}

pub fn read_record(path: &Path) -> Result<RunRecord> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Scores a published-table fixture. The track is taken from the file stem
/// when it names one (`ni.csv`, `mtnc.csv`, ...).
pub fn score_fixture(path: &Path) -> Result<Scoreboard> {
    let rows = read_fixture(std::fs::File::open(path)?)?;
    let track = path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse().ok());
    Scoreboard::build(track, &rows, ScoreWeights::default())
}

/// Scores run records on one board; all must belong to the same track.
pub fn score_records(records: &[RunRecord]) -> Result<Scoreboard> {
    let first = records.first().ok_or_else(|| {
        Error::Precondition(
            "no records to score; pass record files or --fixture <csv>".into(),
        )
    })?;
    if let Some(other) = records.iter().find(|r| r.track != first.track) {
        return Err(Error::Config(format!(
            "boards are per track: got {} and {}",
            first.track, other.track
        )));
    }
    let rows: Vec<BoardRow> = records
        .iter()
        .map(|r| BoardRow {
            name: format!("{}#seed{}", r.label(), r.seed),
            metrics: r.metrics,
            published: None,
            over_budget: r.over_budget,
        })
        .collect();
    Scoreboard::build(Some(first.track), &rows, ScoreWeights::default())
}

/// Writes `<stem>.json` and `<stem>.csv`.
pub fn write_scoreboard(board: &Scoreboard, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let json = dir.join(format!("{stem}.json"));
    let csv = dir.join(format!("{stem}.csv"));
    std::fs::write(&json, board.to_json()?)?;
    board.write_csv(std::fs::File::create(&csv)?)?;
    Ok((json, csv))
}

/// CSV series for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    /// `record,track,seed,batch,val_acc,batch_loss,memory_items`
    pub series: String,
    /// `record,track,seed,batch,inner,cosine`
    pub alignment: String,
    /// `track,label,baseline,seed,test_acc,baseline_test_acc,delta`, with a
    /// `mean` row closing each pair.
    pub paired: String,
}

/// Builds the report series. The first label seen in each track is the
/// baseline that every other label is paired against, seed by seed.
pub fn report(records: &[RunRecord]) -> Report {
    let mut series = String::from("record,track,seed,batch,val_acc,batch_loss,memory_items\n");
    let mut alignment = String::from("record,track,seed,batch,inner,cosine\n");
    for r in records {
        let Some(log) = &r.log else { continue };
        for (b, acc) in log.val_acc.iter().enumerate() {
            let _ = writeln!(
                series,
                "{},{},{},{b},{acc},{},{}",
                r.label(),
                r.track,
                r.seed,
                log.batch_loss.get(b).copied().unwrap_or(f64::NAN),
                log.memory_items.get(b).copied().unwrap_or(0)
            );
        }
        for a in &log.alignment {
            let _ = writeln!(
                alignment,
                "{},{},{},{},{},{}",
                r.label(),
                r.track,
                r.seed,
                a.batch,
                a.inner,
                a.cosine
            );
        }
    }

    let mut paired =
        String::from("track,label,baseline,seed,test_acc,baseline_test_acc,delta\n");
    let mut by_track: BTreeMap<Track, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        by_track.entry(r.track).or_default().push(r);
    }
    for (track, rs) in by_track {
        let mut labels: Vec<String> = Vec::new();
        for r in &rs {
            if !labels.contains(&r.label()) {
                labels.push(r.label());
            }
        }
        let acc: BTreeMap<(String, u64), f64> = rs
            .iter()
            .map(|r| ((r.label(), r.seed), r.metrics.test_acc))
            .collect();
        let base = &labels[0];
        for label in &labels[1..] {
            let mut deltas = Vec::new();
            for ((l, seed), &a) in &acc {
                if l != label {
                    continue;
                }
                if let Some(&b) = acc.get(&(base.clone(), *seed)) {
                    let _ = writeln!(paired, "{track},{label},{base},{seed},{a},{b},{}", a - b);
                    deltas.push((a, b));
                }
            }
            if !deltas.is_empty() {
                let n = deltas.len() as f64;
                let ma = deltas.iter().map(|d| d.0).sum::<f64>() / n;
                let mb = deltas.iter().map(|d| d.1).sum::<f64>() / n;
                let _ = writeln!(paired, "{track},{label},{base},mean,{ma},{mb},{}", ma - mb);
            }
        }
    }
    Report {
        series,
        alignment,
        paired,
    }
}

/// Generates one protocol's stream in the CLB1 format.
pub fn gen_stream(protocol: Protocol, world: &WorldConfig, shape: &StreamShape) -> Result<Vec<u8>> {
    build_stream(protocol_track(protocol), world, shape)?.to_bytes()
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Format(_)
        | Error::Protocol(_)
        | Error::Precondition(_)
        | Error::Json(_)
        | Error::Csv(_) => 2,
        Error::OverBudget(_) => 3,
        Error::Numeric(_) => 4,
        Error::Io(_) => 5,
        Error::Shape(_) => 1,
    }
}
