//! Synthetic worlds of class prototypes and the NI, MT-NC and NIC stream
//! protocols built on top of them.
//!
//! A world is a two-level hierarchy: category means, then class prototypes
//! scattered around their category mean. Each session applies its own affine
//! perturbation (planar rotations plus a shift), standing in for changes of
//! lighting, background and pose. Training batches use the first
//! `n_train_sessions` sessions; the fixed test set uses the rest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{PayloadKind, Reader, Writer, NO_TASK};
use crate::error::{config, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_classes: usize,
    pub n_categories: usize,
    pub n_sessions: usize,
    pub n_train_sessions: usize,
    pub feature_dim: usize,
    pub examples_per_class_session: usize,
    /// Scale of the mean shared by every class.
    pub shared_spread: f64,
    pub category_spread: f64,
    pub class_spread: f64,
    pub session_shift_scale: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    /// CORe50-scale shape: 50 objects in 10 categories, 11 sessions of which
    /// 8 are used for training, 300 frames per object and session.
    fn default() -> Self {
        Self {
            n_classes: 50,
            n_categories: 10,
            n_sessions: 11,
            n_train_sessions: 8,
            feature_dim: 64,
            examples_per_class_session: 300,
            shared_spread: 0.0,
            category_spread: 1.0,
            class_spread: 0.7,
            session_shift_scale: 0.25,
            noise_scale: 0.45,
            seed: 0,
        }
    }
}

impl WorldConfig {
    /// Small preset: 10 classes, 5 categories, 5 sessions (3 for training),
    /// 32 features, 30 examples per class and session. Classes share a
    /// strong common mean, as pooled CNN features do, which is what makes
    /// plain fine-tuning forget.
    pub fn desk() -> Self {
        Self {
            n_classes: 10,
            n_categories: 5,
            n_sessions: 5,
            n_train_sessions: 3,
            feature_dim: 32,
            examples_per_class_session: 30,
            shared_spread: 3.0,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_categories == 0 {
            return Err(crate::error::config("n_classes and n_categories must be positive"));
        }
        if self.n_classes % self.n_categories != 0 {
            return Err(crate::error::config(format!(
                "n_classes ({}) not divisible by n_categories ({})",
                self.n_classes, self.n_categories
            )));
        }
        if self.n_sessions == 0 || self.n_train_sessions == 0 {
            return Err(crate::error::config("session counts must be positive"));
        }
        if self.n_train_sessions > self.n_sessions {
            return Err(crate::error::config(format!(
                "n_train_sessions ({}) exceeds n_sessions ({})",
                self.n_train_sessions, self.n_sessions
            )));
        }
        if self.feature_dim == 0 {
            return Err(crate::error::config("feature_dim must be positive"));
        }
        if self.examples_per_class_session == 0 {
            return Err(crate::error::config("examples_per_class_session must be at least 1"));
        }
        let spreads = [
            ("shared_spread", self.shared_spread),
            ("category_spread", self.category_spread),
            ("class_spread", self.class_spread),
            ("session_shift_scale", self.session_shift_scale),
            ("noise_scale", self.noise_scale),
        ];
        for (name, v) in spreads {
            if !(v.is_finite() && v >= 0.0) {
                return Err(crate::error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.n_classes > u32::MAX as usize || self.n_sessions > u32::MAX as usize {
            return Err(crate::error::config("class/session counts must fit in 32 bits"));
        }
        Ok(())
    }

    pub fn classes_per_category(&self) -> usize {
        self.n_classes / self.n_categories
    }

    pub fn test_sessions(&self) -> std::ops::Range<usize> {
        self.n_train_sessions..self.n_sessions
    }
}

/// Rotation in coordinate planes `(2k, 2k+1)` followed by a shift.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionTransform {
    pub shift: Vec<f64>,
    pub angles: Vec<f64>,
}

impl SessionTransform {
    pub fn is_identity(&self) -> bool {
        self.shift.iter().all(|&s| s == 0.0) && self.angles.iter().all(|&a| a == 0.0)
    }

    pub fn apply(&self, x: &mut [f64]) {
        for (k, &theta) in self.angles.iter().enumerate() {
            if theta == 0.0 {
                continue;
            }
            let (s, c) = theta.sin_cos();
            let (a, b) = (x[2 * k], x[2 * k + 1]);
            x[2 * k] = c * a - s * b;
            x[2 * k + 1] = s * a + c * b;
        }
        for (xi, si) in x.iter_mut().zip(&self.shift) {
            *xi += si;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub category_means: Vec<Vec<f64>>,
    pub class_prototypes: Vec<Vec<f64>>,
    pub session_transforms: Vec<SessionTransform>,
}

impl World {
    pub fn category_of(&self, class: usize) -> usize {
        class / (self.class_prototypes.len() / self.category_means.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f32>,
    pub label: u32,
    pub session: u32,
    pub task: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub examples: Vec<Example>,
    pub task: Option<u32>,
}

impl Batch {
    pub fn labels(&self) -> BTreeSet<u32> {
        self.examples.iter().map(|e| e.label).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "ni", alias = "NI")]
    Ni,
    #[serde(rename = "mtnc", alias = "MT-NC", alias = "mt-nc")]
    MtNc,
    #[serde(rename = "nic", alias = "NIC")]
    Nic,
}

impl Protocol {
    fn tag(self) -> u8 {
        match self {
            Self::Ni => 0,
            Self::MtNc => 1,
            Self::Nic => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Self::Ni),
            1 => Ok(Self::MtNc),
            2 => Ok(Self::Nic),
            t => Err(Error::Format(format!("unknown protocol tag {t}"))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ni => "NI",
            Self::MtNc => "MT-NC",
            Self::Nic => "NIC",
        })
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ni" => Ok(Self::Ni),
            "mtnc" | "mt-nc" | "nc" => Ok(Self::MtNc),
            "nic" => Ok(Self::Nic),
            other => Err(config(format!("unknown protocol {other:?}"))),
        }
    }
}

/// An ordered, immutable sequence of training batches plus the fixed test set.
///
/// There is no mutation API: strategies borrow batches read-only.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    protocol: Protocol,
    feature_dim: usize,
    seed: u64,
    batches: Vec<Batch>,
    test_set: Vec<Example>,
}

impl Stream {
    pub fn new(
        protocol: Protocol,
        feature_dim: usize,
        seed: u64,
        batches: Vec<Batch>,
        test_set: Vec<Example>,
    ) -> Result<Self> {
        if batches.is_empty() {
            return Err(Error::Protocol("stream has no batches".into()));
        }
        for (i, b) in batches.iter().enumerate() {
            if b.examples.is_empty() {
                return Err(Error::Protocol(format!("batch {i} is empty")));
            }
        }
        let all = batches.iter().flat_map(|b| &b.examples).chain(&test_set);
        for e in all {
            if e.features.len() != feature_dim {
                return Err(Error::Shape(format!(
                    "example has {} features, stream declares {feature_dim}",
                    e.features.len()
                )));
            }
            if (protocol == Protocol::MtNc) != e.task.is_some() {
                return Err(Error::Protocol(format!(
                    "task ids must be present iff protocol is MT-NC ({protocol})"
                )));
            }
        }
        Ok(Self {
            protocol,
            feature_dim,
            seed,
            batches,
            test_set,
        })
    }

    pub fn protocol(&self) -> Protocol {
        self.protocol
    }
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn batches(&self) -> &[Batch] {
        &self.batches
    }
    pub fn test_set(&self) -> &[Example] {
        &self.test_set
    }

    pub fn n_classes(&self) -> usize {
        self.batches
            .iter()
            .flat_map(|b| &b.examples)
            .chain(&self.test_set)
            .map(|e| e.label as usize + 1)
            .max()
            .unwrap_or(0)
    }

    /// Class sets per task id (MT-NC only; empty otherwise).
    pub fn task_classes(&self) -> BTreeMap<u32, Vec<u32>> {
        let mut out: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
        for b in &self.batches {
            if let Some(t) = b.task {
                out.entry(t).or_default().extend(b.labels());
            }
        }
        out.into_iter()
            .map(|(t, s)| (t, s.into_iter().collect()))
            .collect()
    }

    /// A new stream holding the first `n` batches and the same test set.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        Self::new(
            self.protocol,
            self.feature_dim,
            self.seed,
            self.batches[..n.min(self.batches.len())].to_vec(),
            self.test_set.clone(),
        )
    }

    /// Hex SHA-256 of the serialized stream.
    pub fn content_hash(&self) -> String {
        let bytes = self.to_bytes().expect("validated stream serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Serializes to the CLB1 stream payload:
    ///
    /// ```text
    /// u8  protocol (0 = NI, 1 = MT-NC, 2 = NIC)
    /// u32 feature_dim
    /// u64 seed
    /// u32 n_batches, then per batch: u32 task (0xFFFFFFFF = none), u32 n, n records
    /// u32 n_test, n_test records
    /// record = feature_dim x f32, u32 label, u32 session, u32 task
    /// ```
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::with_header(PayloadKind::Stream);
        w.put_u8(self.protocol.tag());
        w.put_len(self.feature_dim)?;
        w.put_u64(self.seed);
        w.put_len(self.batches.len())?;
        for b in &self.batches {
            w.put_u32(b.task.unwrap_or(NO_TASK));
            w.put_len(b.examples.len())?;
            for e in &b.examples {
                write_record(&mut w, e);
            }
        }
        w.put_len(self.test_set.len())?;
        for e in &self.test_set {
            write_record(&mut w, e);
        }
        Ok(w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, PayloadKind::Stream)?;
        let protocol = Protocol::from_tag(r.u8()?)?;
        let feature_dim = r.u32()? as usize;
        if feature_dim == 0 {
            return Err(Error::Format("feature_dim is zero".into()));
        }
        let seed = r.u64()?;
        let record = 4 * feature_dim + 12;
        let n_batches = r.len(8)?;
        let mut batches = Vec::with_capacity(n_batches);
        for _ in 0..n_batches {
            let task = opt_task(r.u32()?);
            let n = r.len(record)?;
            let examples = (0..n)
                .map(|_| read_record(&mut r, feature_dim))
                .collect::<Result<Vec<_>>>()?;
            batches.push(Batch { examples, task });
        }
        let n_test = r.len(record)?;
        let test_set = (0..n_test)
            .map(|_| read_record(&mut r, feature_dim))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Self::new(protocol, feature_dim, seed, batches, test_set)
            .map_err(|e| Error::Format(format!("invalid stream: {e}")))
    }
}

fn opt_task(raw: u32) -> Option<u32> {
    (raw != NO_TASK).then_some(raw)
}

fn write_record(w: &mut Writer, e: &Example) {
    for &x in &e.features {
        w.put_f32(x);
    }
    w.put_u32(e.label);
    w.put_u32(e.session);
    w.put_u32(e.task.unwrap_or(NO_TASK));
}

fn read_record(r: &mut Reader<'_>, dim: usize) -> Result<Example> {
    let features = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    Ok(Example {
        features,
        label: r.u32()?,
        session: r.u32()?,
        task: opt_task(r.u32()?),
    })
}

/// SplitMix64-style mixing of a base seed with a path of integers.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

const TAG_WORLD: u64 = 1;
const TAG_SAMPLES: u64 = 2;
const TAG_ORDER: u64 = 3;
const TAG_SHUFFLE: u64 = 4;

fn rng_for(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

fn gaussian_vec(rng: &mut impl Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let d = config.feature_dim;
    let mut rng = rng_for(config.seed, &[TAG_WORLD]);
    let shared = gaussian_vec(&mut rng, d, config.shared_spread);
    let category_means: Vec<Vec<f64>> = (0..config.n_categories)
        .map(|_| {
            gaussian_vec(&mut rng, d, config.category_spread)
                .into_iter()
                .zip(&shared)
                .map(|(c, s)| c + s)
                .collect()
        })
        .collect();
    let per_cat = config.classes_per_category();
    let class_prototypes = (0..config.n_classes)
        .map(|c| {
            let offset = gaussian_vec(&mut rng, d, config.class_spread);
            category_means[c / per_cat]
                .iter()
                .zip(offset)
                .map(|(m, o)| m + o)
                .collect()
        })
        .collect();
    let max_angle = 0.5 * config.session_shift_scale;
    let session_transforms = (0..config.n_sessions)
        .map(|_| {
            let shift = gaussian_vec(&mut rng, d, config.session_shift_scale);
            let angles = (0..d / 2)
                .map(|_| {
                    if max_angle == 0.0 {
                        0.0
                    } else {
                        rng.random_range(-max_angle..=max_angle)
                    }
                })
                .collect();
            SessionTransform { shift, angles }
        })
        .collect();
    Ok(World {
        category_means,
        class_prototypes,
        session_transforms,
    })
}

/// Examples of one (class, session) pair; a pure function of the pair and seed.
pub fn sample_class_session(
    world: &World,
    config: &WorldConfig,
    class: usize,
    session: usize,
    task: Option<u32>,
) -> Vec<Example> {
    let mut rng = rng_for(config.seed, &[TAG_SAMPLES, class as u64, session as u64]);
    let proto = &world.class_prototypes[class];
    let transform = &world.session_transforms[session];
    (0..config.examples_per_class_session)
        .map(|_| {
            let mut x: Vec<f64> = proto
                .iter()
                .map(|&p| p + config.noise_scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            transform.apply(&mut x);
            Example {
                features: x.into_iter().map(|v| v as f32).collect(),
                label: class as u32,
                session: session as u32,
                task,
            }
        })
        .collect()
}

fn class_order(config: &WorldConfig) -> Vec<usize> {
    let mut order: Vec<usize> = (0..config.n_classes).collect();
    order.shuffle(&mut rng_for(config.seed, &[TAG_ORDER]));
    order
}

fn shuffled(mut examples: Vec<Example>, seed: u64, path: &[u64]) -> Vec<Example> {
    examples.shuffle(&mut rng_for(seed, path));
    examples
}

fn check_world(world: &World, config: &WorldConfig) -> Result<()> {
    config.validate()?;
    if world.class_prototypes.len() != config.n_classes
        || world.session_transforms.len() != config.n_sessions
    {
        return Err(config_mismatch());
    }
    Ok(())
}

fn config_mismatch() -> Error {
    config("world does not match configuration")
}

/// Held-out sessions of every class, in (session, class) order.
pub fn make_test_set(world: &World, config: &WorldConfig) -> Result<Vec<Example>> {
    check_world(world, config)?;
    if config.n_sessions <= config.n_train_sessions {
        return Err(crate::error::config(
            "no held-out sessions: n_sessions must exceed n_train_sessions",
        ));
    }
    Ok(config
        .test_sessions()
        .flat_map(|s| (0..config.n_classes).map(move |c| (c, s)))
        .flat_map(|(c, s)| sample_class_session(world, config, c, s, None))
        .collect())
}

/// New Instances: one batch per training session, each with every class.
pub fn make_ni_stream(world: &World, config: &WorldConfig) -> Result<Stream> {
    let test_set = make_test_set(world, config)?;
    let batches = (0..config.n_train_sessions)
        .map(|s| {
            let examples = (0..config.n_classes)
                .flat_map(|c| sample_class_session(world, config, c, s, None))
                .collect();
            Batch {
                examples: shuffled(examples, config.seed, &[TAG_SHUFFLE, 0, s as u64]),
                task: None,
            }
        })
        .collect();
    Stream::new(Protocol::Ni, config.feature_dim, config.seed, batches, test_set)
}

/// Multi-Task New Classes: a disjoint class partition, one batch per task,
/// task ids on every training and test example.
pub fn make_mtnc_stream(
    world: &World,
    config: &WorldConfig,
    first_task_classes: usize,
    later_task_classes: usize,
) -> Result<Stream> {
    let mut test_set = make_test_set(world, config)?;
    let c = config.n_classes;
    if first_task_classes == 0 || first_task_classes > c {
        return Err(crate::error::config(format!(
            "first_task_classes must be in 1..={c}, got {first_task_classes}"
        )));
    }
    let rest = c - first_task_classes;
    if rest > 0 && (later_task_classes == 0 || rest % later_task_classes != 0) {
        return Err(crate::error::config(format!(
            "{c} classes cannot be split into {first_task_classes} + k x {later_task_classes}"
        )));
    }
    let order = class_order(config);
    let mut task_of = vec![0u32; c];
    let mut groups = vec![&order[..first_task_classes]];
    if rest > 0 {
        groups.extend(order[first_task_classes..].chunks(later_task_classes));
    }
    let batches = groups
        .iter()
        .enumerate()
        .map(|(t, classes)| {
            let task = t as u32;
            let examples = classes
                .iter()
                .flat_map(|&cls| {
                    task_of[cls] = task;
                    (0..config.n_train_sessions)
                        .flat_map(move |s| sample_class_session(world, config, cls, s, Some(task)))
                })
                .collect::<Vec<_>>();
            Batch {
                examples: shuffled(examples, config.seed, &[TAG_SHUFFLE, 1, t as u64]),
                task: Some(task),
            }
        })
        .collect::<Vec<_>>();
    for e in &mut test_set {
        e.task = Some(task_of[e.label as usize]);
    }
    Stream::new(Protocol::MtNc, config.feature_dim, config.seed, batches, test_set)
}

/// New Instances and Classes: the first batch aggregates one session of
/// `first_batch_classes` classes; every later batch is a single
/// (class, session) group, in a seed-determined order.
pub fn make_nic_stream(
    world: &World,
    config: &WorldConfig,
    first_batch_classes: usize,
) -> Result<Stream> {
    let test_set = make_test_set(world, config)?;
    if first_batch_classes == 0 || first_batch_classes > config.n_classes {
        return Err(crate::error::config(format!(
            "first_batch_classes must be in 1..={}, got {first_batch_classes}",
            config.n_classes
        )));
    }
    let order = class_order(config);
    let first_classes = &order[..first_batch_classes];
    let first = first_classes
        .iter()
        .flat_map(|&c| sample_class_session(world, config, c, 0, None))
        .collect();
    let mut pairs: Vec<(usize, usize)> = (0..config.n_classes)
        .flat_map(|c| (0..config.n_train_sessions).map(move |s| (c, s)))
        .filter(|&(c, s)| !(s == 0 && first_classes.contains(&c)))
        .collect();
    pairs.shuffle(&mut rng_for(config.seed, &[TAG_ORDER, 2]));
    let mut batches = vec![Batch {
        examples: shuffled(first, config.seed, &[TAG_SHUFFLE, 2, 0]),
        task: None,
    }];
    batches.extend(pairs.into_iter().map(|(c, s)| Batch {
        examples: sample_class_session(world, config, c, s, None),
        task: None,
    }));
    Stream::new(Protocol::Nic, config.feature_dim, config.seed, batches, test_set)
}

/// Expected NIC batch count for a configuration.
pub fn nic_batch_count(config: &WorldConfig, first_batch_classes: usize) -> usize {
    config.n_classes * config.n_train_sessions - first_batch_classes + 1
}

/// Splits the test set into a validation part (the first `fraction` of each
/// class's items, rounded up) and the disjoint final-test part.
pub fn split_validation(test_set: &[Example], fraction: f64) -> (Vec<Example>, Vec<Example>) {
    let mut per_class: BTreeMap<u32, usize> = BTreeMap::new();
    for e in test_set {
        *per_class.entry(e.label).or_default() += 1;
    }
    let quota: BTreeMap<u32, usize> = per_class
        .iter()
        .map(|(&c, &n)| (c, ((n as f64) * fraction).ceil() as usize))
        .collect();
    let mut taken: BTreeMap<u32, usize> = BTreeMap::new();
    let (mut val, mut test) = (Vec::new(), Vec::new());
    for e in test_set {
        let t = taken.entry(e.label).or_default();
        if *t < quota[&e.label] {
            *t += 1;
            val.push(e.clone());
        } else {
            test.push(e.clone());
        }
    }
    (val, test)
}
