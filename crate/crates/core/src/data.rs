//! Synthetic set-based identity benchmarks.
//!
//! Items are feature vectors rather than pixels. Each identity has a
//! prototype inside a shared low-dimensional appearance subspace; every set
//! is recorded by one camera of a scene, which adds a camera-specific offset,
//! and every item carries Gaussian perceptual noise whose strength is
//! jittered per item. With probability `outlier_rate` an item is replaced by
//! an item of a different identity of the same world while the set keeps its
//! own label; such items are flagged in the ground truth.
//!
//! Flags are analysis-only. Training code receives a [`TrainingView`], which
//! has no access to them.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Shared appearance subspace: prototypes are `basis * u` with `u ~ N(0, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Appearance {
    input_dim: usize,
    latent_dim: usize,
    /// Row-major `input_dim x latent_dim`.
    basis: Vec<f64>,
}

impl Appearance {
    /// Every input direction carries identity signal.
    pub fn isotropic(input_dim: usize) -> Self {
        let mut basis = vec![0.0; input_dim * input_dim];
        for i in 0..input_dim {
            basis[i * input_dim + i] = 1.0;
        }
        Self {
            input_dim,
            latent_dim: input_dim,
            basis,
        }
    }

    /// Random subspace of dimension `latent_dim`, scaled so prototypes have
    /// unit variance per input coordinate on average.
    pub fn random(input_dim: usize, latent_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || latent_dim == 0 || latent_dim > input_dim {
            return Err(Error::Config(format!(
                "appearance subspace of dim {latent_dim} in input dim {input_dim}"
            )));
        }
        let mut rng = rng::stream(seed, "appearance", 0);
        let scale = 1.0 / (latent_dim as f64).sqrt();
        let basis = (0..input_dim * latent_dim)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                scale * v
            })
            .collect();
        Ok(Self {
            input_dim,
            latent_dim,
            basis,
        })
    }

    fn project(&self, latent: &[f64]) -> Vec<f64> {
        (0..self.input_dim)
            .map(|r| {
                self.basis[r * self.latent_dim..(r + 1) * self.latent_dim]
                    .iter()
                    .zip(latent)
                    .map(|(a, u)| a * u)
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub scene_id: u32,
    pub num_cameras: usize,
    /// Standard deviation of each camera offset coordinate.
    pub camera_shift: f64,
}

/// A recording environment: one additive offset per camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: u32,
    pub camera_offsets: Vec<Vec<f64>>,
}

impl Scene {
    pub fn generate(spec: &SceneSpec, input_dim: usize, seed: u64) -> Result<Self> {
        if spec.num_cameras == 0 || !(spec.camera_shift >= 0.0) {
            return Err(Error::Config(
                "scene needs >= 1 camera and a non-negative shift".into(),
            ));
        }
        let mut rng = rng::stream(seed, "scene", u64::from(spec.scene_id));
        let camera_offsets = (0..spec.num_cameras)
            .map(|_| gaussian_vec(&mut rng, input_dim, spec.camera_shift))
            .collect();
        Ok(Self {
            scene_id: spec.scene_id,
            camera_offsets,
        })
    }

    /// Single camera without offset.
    pub fn plain(input_dim: usize) -> Self {
        Self {
            scene_id: 0,
            camera_offsets: vec![vec![0.0; input_dim]],
        }
    }

    pub fn num_cameras(&self) -> usize {
        self.camera_offsets.len()
    }
}

fn gaussian_vec<R: Rng>(rng: &mut R, n: usize, sigma: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            sigma * e
        })
        .collect()
}

/// Identities of one split with their prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityWorld {
    pub num_identities: usize,
    pub input_dim: usize,
    /// Global label of the world's first identity.
    pub first_label: usize,
    pub prototypes: Vec<Vec<f64>>,
    pub scene: Scene,
    pub seed: u64,
}

/// Isotropic prototypes, one camera, labels `0..num_ids`.
pub fn generate_world(num_ids: usize, input_dim: usize, seed: u64) -> Result<IdentityWorld> {
    IdentityWorld::generate(
        num_ids,
        0,
        &Appearance::isotropic(input_dim),
        Scene::plain(input_dim),
        seed,
    )
}

impl IdentityWorld {
    pub fn generate(
        num_ids: usize,
        first_label: usize,
        appearance: &Appearance,
        scene: Scene,
        seed: u64,
    ) -> Result<Self> {
        if num_ids < 2 {
            return Err(Error::Config(format!(
                "a world needs >= 2 identities, got {num_ids}"
            )));
        }
        let input_dim = appearance.input_dim;
        if input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if scene.camera_offsets.iter().any(|o| o.len() != input_dim) {
            return Err(Error::dim(
                "generate_world",
                "camera offsets do not match input_dim",
            ));
        }
        let mut rng = rng::stream(seed, "prototypes", first_label as u64);
        let prototypes: Vec<Vec<f64>> = (0..num_ids)
            .map(|_| appearance.project(&gaussian_vec(&mut rng, appearance.latent_dim, 1.0)))
            .collect();
        let world = Self {
            num_identities: num_ids,
            input_dim,
            first_label,
            prototypes,
            scene,
            seed,
        };
        let min = world.min_prototype_distance();
        if !(min > 0.0) {
            return Err(Error::Degenerate(format!(
                "prototypes collide (min distance {min})"
            )));
        }
        Ok(world)
    }

    pub fn labels(&self) -> std::ops::Range<usize> {
        self.first_label..self.first_label + self.num_identities
    }

    pub fn contains(&self, label: usize) -> bool {
        self.labels().contains(&label)
    }

    pub fn prototype(&self, label: usize) -> Result<&[f64]> {
        if !self.contains(label) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.first_label + self.num_identities,
            });
        }
        Ok(&self.prototypes[label - self.first_label])
    }

    pub fn min_prototype_distance(&self) -> f64 {
        let mut min = f64::INFINITY;
        for i in 0..self.prototypes.len() {
            for j in i + 1..self.prototypes.len() {
                let d: f64 = self.prototypes[i]
                    .iter()
                    .zip(&self.prototypes[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                min = min.min(d);
            }
        }
        min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    /// Base standard deviation of the additive item noise.
    pub perceptual_noise_sigma: f64,
    /// Probability that an item is replaced by another identity's item.
    pub outlier_rate: f64,
    /// Per-item noise multiplier is drawn uniformly from this range.
    pub severity_jitter: (f64, f64),
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            perceptual_noise_sigma: 2.5,
            outlier_rate: 0.2,
            severity_jitter: (0.5, 1.5),
        }
    }
}

impl CorruptionSpec {
    pub fn clean() -> Self {
        Self {
            perceptual_noise_sigma: 0.0,
            outlier_rate: 0.0,
            severity_jitter: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return Err(Error::Config(format!(
                "outlier_rate {} not in [0, 1)",
                self.outlier_rate
            )));
        }
        if !(self.perceptual_noise_sigma >= 0.0) || !self.perceptual_noise_sigma.is_finite() {
            return Err(Error::Config("perceptual_noise_sigma must be >= 0".into()));
        }
        let (lo, hi) = self.severity_jitter;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!(
                "severity_jitter ({lo}, {hi}) is not a valid range"
            )));
        }
        Ok(())
    }
}

/// One image set with its analysis-only corruption flags.
#[derive(Debug, Clone, PartialEq)]
pub struct SetSample {
    pub items: Vec<Vec<f64>>,
    pub set_label: usize,
    pub camera_id: usize,
    pub corruption_flags: Vec<bool>,
}

impl SetSample {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn outlier_count(&self) -> usize {
        self.corruption_flags.iter().filter(|&&f| f).count()
    }
}

/// Draws one set of `n` items of `identity` from camera `camera`.
pub fn sample_set_from_camera(
    world: &IdentityWorld,
    identity: usize,
    camera: usize,
    n: usize,
    spec: &CorruptionSpec,
    seed: u64,
) -> Result<SetSample> {
    spec.validate()?;
    world.prototype(identity)?;
    if n == 0 {
        return Err(Error::Config("a set needs at least one item".into()));
    }
    let offset = world
        .scene
        .camera_offsets
        .get(camera)
        .ok_or_else(|| Error::Config(format!("camera {camera} not in scene")))?;
    let mut rng = rng::stream(seed, "set", 0);
    let (lo, hi) = spec.severity_jitter;
    let mut items = Vec::with_capacity(n);
    let mut flags = Vec::with_capacity(n);
    for _ in 0..n {
        let outlier = spec.outlier_rate > 0.0 && rng.random_bool(spec.outlier_rate);
        let source = if outlier {
            let k = rng.random_range(0..world.num_identities - 1);
            let other = world.first_label + k;
            if other >= identity {
                other + 1
            } else {
                other
            }
        } else {
            identity
        };
        let severity = if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        };
        let sigma = spec.perceptual_noise_sigma * severity;
        let proto = world.prototype(source)?;
        let item = proto
            .iter()
            .zip(offset)
            .map(|(p, o)| {
                let e: f64 = StandardNormal.sample(&mut rng);
                p + o + sigma * e
            })
            .collect();
        items.push(item);
        flags.push(outlier);
    }
    Ok(SetSample {
        items,
        set_label: identity,
        camera_id: camera,
        corruption_flags: flags,
    })
}

/// [`sample_set_from_camera`] with camera 0.
pub fn sample_set(
    world: &IdentityWorld,
    identity: usize,
    n: usize,
    spec: &CorruptionSpec,
    seed: u64,
) -> Result<SetSample> {
    sample_set_from_camera(world, identity, 0, n, spec, seed)
}

/// A collection of sets drawn from one world.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub name: String,
    pub scene_id: u32,
    pub identities: Vec<usize>,
    pub sets: Vec<SetSample>,
}

impl Split {
    pub fn identity_set(&self) -> BTreeSet<usize> {
        self.identities.iter().copied().collect()
    }

    /// Labels and items only; the corruption flags stay behind.
    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView { split: self }
    }

    pub fn outlier_fraction(&self) -> f64 {
        let (o, n) = self
            .sets
            .iter()
            .fold((0, 0), |(o, n), s| (o + s.outlier_count(), n + s.len()));
        o as f64 / n.max(1) as f64
    }
}

/// Flag-free read access to a training split.
#[derive(Debug, Clone, Copy)]
pub struct TrainingView<'a> {
    split: &'a Split,
}

impl<'a> TrainingView<'a> {
    pub fn num_sets(&self) -> usize {
        self.split.sets.len()
    }

    pub fn items(&self, set: usize) -> &'a [Vec<f64>] {
        &self.split.sets[set].items
    }

    pub fn label(&self, set: usize) -> usize {
        self.split.sets[set].set_label
    }

    pub fn camera(&self, set: usize) -> usize {
        self.split.sets[set].camera_id
    }

    /// Set indices grouped by label, labels ascending.
    pub fn sets_by_identity(&self) -> Vec<(usize, Vec<usize>)> {
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, s) in self.split.sets.iter().enumerate() {
            groups.entry(s.set_label).or_default().push(i);
        }
        groups.into_iter().collect()
    }
}

/// One set of a mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSet {
    pub items: Vec<Vec<f64>>,
    pub label: usize,
}

impl AsRef<[Vec<f64>]> for BatchSet {
    fn as_ref(&self) -> &[Vec<f64>] {
        &self.items
    }
}

/// `persons x sets_per_person` sets, person-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub sets: Vec<BatchSet>,
    pub persons: usize,
    pub sets_per_person: usize,
}

impl MiniBatch {
    pub fn num_sets(&self) -> usize {
        self.sets.len()
    }

    pub fn num_items(&self) -> usize {
        self.sets.iter().map(|s| s.items.len()).sum()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.sets.iter().map(|s| s.label).collect()
    }

    /// `(positive, negative)` counts over all unordered set pairs.
    pub fn pair_counts(&self) -> (usize, usize) {
        let labels = self.labels();
        crate::losses::set_pairs(labels.len()).fold((0, 0), |(p, n), (j, k)| {
            if labels[j] == labels[k] {
                (p + 1, n)
            } else {
                (p, n + 1)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchShape {
    pub persons: usize,
    pub sets_per_person: usize,
    pub items_per_set: usize,
}

impl Default for BatchShape {
    fn default() -> Self {
        Self {
            persons: 3,
            sets_per_person: 2,
            items_per_set: 9,
        }
    }
}

/// Draws `persons` identities, `sets_per_person` of their sets, and
/// `items_per_set` items from each full set (without replacement when the
/// set is large enough).
pub fn sample_minibatch<R: Rng>(
    view: &TrainingView<'_>,
    shape: BatchShape,
    rng: &mut R,
) -> Result<MiniBatch> {
    if shape.persons == 0 || shape.sets_per_person == 0 || shape.items_per_set == 0 {
        return Err(Error::Config(
            "mini-batch dimensions must be positive".into(),
        ));
    }
    let eligible: Vec<(usize, Vec<usize>)> = view
        .sets_by_identity()
        .into_iter()
        .filter(|(_, sets)| sets.len() >= shape.sets_per_person)
        .collect();
    if eligible.len() < shape.persons {
        return Err(Error::Config(format!(
            "need {} identities with >= {} sets, have {}",
            shape.persons,
            shape.sets_per_person,
            eligible.len()
        )));
    }
    let mut sets = Vec::with_capacity(shape.persons * shape.sets_per_person);
    for p in sample_indices(rng, eligible.len(), shape.persons).into_iter() {
        let (label, set_ids) = &eligible[p];
        for s in sample_indices(rng, set_ids.len(), shape.sets_per_person).into_iter() {
            let full = view.items(set_ids[s]);
            let items = if full.len() >= shape.items_per_set {
                sample_indices(rng, full.len(), shape.items_per_set)
                    .into_iter()
                    .map(|i| full[i].clone())
                    .collect()
            } else {
                (0..shape.items_per_set)
                    .map(|_| full[rng.random_range(0..full.len())].clone())
                    .collect()
            };
            sets.push(BatchSet {
                items,
                label: *label,
            });
        }
    }
    Ok(MiniBatch {
        sets,
        persons: shape.persons,
        sets_per_person: shape.sets_per_person,
    })
}

/// Scene regime of the optional cross-scene test split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossSceneSpec {
    pub identities: usize,
    pub scene: SceneSpec,
    pub corruption: CorruptionSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub train_identities: usize,
    pub test_identities: usize,
    pub sets_per_identity: usize,
    pub items_per_set: usize,
    pub input_dim: usize,
    /// Dimension of the appearance subspace holding identity signal.
    pub latent_dim: usize,
    pub scene: SceneSpec,
    pub corruption: CorruptionSpec,
    pub cross_scene: Option<CrossSceneSpec>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            train_identities: 60,
            test_identities: 30,
            sets_per_identity: 4,
            items_per_set: 40,
            input_dim: 32,
            latent_dim: 8,
            scene: SceneSpec {
                scene_id: 0,
                num_cameras: 4,
                camera_shift: 0.5,
            },
            corruption: CorruptionSpec::default(),
            cross_scene: Some(CrossSceneSpec {
                identities: 30,
                scene: SceneSpec {
                    scene_id: 1,
                    num_cameras: 4,
                    camera_shift: 1.0,
                },
                corruption: CorruptionSpec::default(),
            }),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_identities < 2 || self.test_identities < 2 {
            return Err(Error::Config(
                "train and test splits need >= 2 identities".into(),
            ));
        }
        if self.sets_per_identity < 2 || self.items_per_set == 0 {
            return Err(Error::Config(
                "need >= 2 sets per identity and >= 1 item per set".into(),
            ));
        }
        if self.input_dim == 0 || self.latent_dim == 0 || self.latent_dim > self.input_dim {
            return Err(Error::Config("latent_dim must be in 1..=input_dim".into()));
        }
        self.corruption.validate()?;
        if let Some(cross) = &self.cross_scene {
            if cross.scene.scene_id == self.scene.scene_id {
                return Err(Error::Config(
                    "cross-scene split must use a different scene_id".into(),
                ));
            }
            if cross.identities < 2 {
                return Err(Error::Config(
                    "cross-scene split needs >= 2 identities".into(),
                ));
            }
            cross.corruption.validate()?;
        }
        Ok(())
    }

    pub fn with_outlier_rate(mut self, rate: f64) -> Self {
        self.corruption.outlier_rate = rate;
        if let Some(cross) = &mut self.cross_scene {
            cross.corruption.outlier_rate = rate;
        }
        self
    }
}

/// Train, test and optional cross-scene splits with disjoint identities.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub seed: u64,
    pub train: Split,
    pub test: Split,
    pub cross: Option<Split>,
}

fn sample_split(
    name: &str,
    world: &IdentityWorld,
    sets_per_identity: usize,
    items_per_set: usize,
    corruption: &CorruptionSpec,
    seed: u64,
) -> Result<Split> {
    let cameras = world.scene.num_cameras();
    let mut sets = Vec::with_capacity(world.num_identities * sets_per_identity);
    for (k, label) in world.labels().enumerate() {
        for s in 0..sets_per_identity {
            let index = (k * sets_per_identity + s) as u64;
            let set_seed = rng::derive_seed(seed, name, index);
            sets.push(sample_set_from_camera(
                world,
                label,
                s % cameras,
                items_per_set,
                corruption,
                set_seed,
            )?);
        }
    }
    Ok(Split {
        name: name.to_owned(),
        scene_id: world.scene.scene_id,
        identities: world.labels().collect(),
        sets,
    })
}

pub fn build_benchmark(config: &BenchmarkConfig, seed: u64) -> Result<Benchmark> {
    config.validate()?;
    let appearance = Appearance::random(config.input_dim, config.latent_dim, seed)?;
    let home = Scene::generate(&config.scene, config.input_dim, seed)?;

    let train_world =
        IdentityWorld::generate(config.train_identities, 0, &appearance, home.clone(), seed)?;
    let test_world = IdentityWorld::generate(
        config.test_identities,
        config.train_identities,
        &appearance,
        home,
        seed,
    )?;
    let train = sample_split(
        "train",
        &train_world,
        config.sets_per_identity,
        config.items_per_set,
        &config.corruption,
        seed,
    )?;
    let test = sample_split(
        "test",
        &test_world,
        config.sets_per_identity,
        config.items_per_set,
        &config.corruption,
        seed,
    )?;
    let cross = match &config.cross_scene {
        Some(spec) => {
            let scene = Scene::generate(&spec.scene, config.input_dim, seed)?;
            let world = IdentityWorld::generate(
                spec.identities,
                config.train_identities + config.test_identities,
                &appearance,
                scene,
                seed,
            )?;
            Some(sample_split(
                "cross",
                &world,
                config.sets_per_identity,
                config.items_per_set,
                &spec.corruption,
                seed,
            )?)
        }
        None => None,
    };
    let bench = Benchmark {
        config: config.clone(),
        seed,
        train,
        test,
        cross,
    };
    bench.check_disjoint()?;
    Ok(bench)
}

impl Benchmark {
    pub fn splits(&self) -> impl Iterator<Item = &Split> {
        [&self.train, &self.test]
            .into_iter()
            .chain(self.cross.as_ref())
    }

    /// Fails if any two splits share an identity.
    pub fn check_disjoint(&self) -> Result<()> {
        let splits: Vec<&Split> = self.splits().collect();
        for i in 0..splits.len() {
            for j in i + 1..splits.len() {
                let a = splits[i].identity_set();
                if let Some(shared) = splits[j].identities.iter().find(|l| a.contains(l)) {
                    return Err(Error::Config(format!(
                        "identity {shared} appears in both `{}` and `{}`",
                        splits[i].name, splits[j].name
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// On-disk format
// ---------------------------------------------------------------------------

pub const BENCHMARK_FORMAT_VERSION: u32 = 1;
const SPLIT_MAGIC: &[u8; 8] = b"IDESPLIT";
const FLAGS_MAGIC: &[u8; 8] = b"IDEFLAGS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub scene_id: u32,
    pub identities: Vec<usize>,
    pub num_sets: usize,
    pub records: String,
    pub flags: String,
}

/// `manifest.json` of a benchmark directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_fingerprint: String,
    pub seed: u64,
    pub benchmark: BenchmarkConfig,
    pub splits: Vec<SplitEntry>,
}

/// Records file: magic, version u32, num_sets u32, input_dim u32, then per
/// set `set_label u32, camera_id u32, n u32, n * input_dim f64`, all
/// little-endian.
pub fn encode_split(split: &Split, input_dim: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SPLIT_MAGIC);
    out.extend_from_slice(&BENCHMARK_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(split.sets.len() as u32).to_le_bytes());
    out.extend_from_slice(&(input_dim as u32).to_le_bytes());
    for set in &split.sets {
        out.extend_from_slice(&(set.set_label as u32).to_le_bytes());
        out.extend_from_slice(&(set.camera_id as u32).to_le_bytes());
        out.extend_from_slice(&(set.items.len() as u32).to_le_bytes());
        for item in &set.items {
            for v in item {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// Flags file: magic, version u32, num_sets u32, then per set `n u32` and
/// `n` bytes of 0/1.
pub fn encode_flags(split: &Split) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FLAGS_MAGIC);
    out.extend_from_slice(&BENCHMARK_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(split.sets.len() as u32).to_le_bytes());
    for set in &split.sets {
        out.extend_from_slice(&(set.corruption_flags.len() as u32).to_le_bytes());
        out.extend(set.corruption_flags.iter().map(|&f| u8::from(f)));
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 8]) -> std::result::Result<(), String> {
        if self.take(8)? != magic {
            return Err("bad magic".into());
        }
        let version = self.u32()? as u32;
        if version != BENCHMARK_FORMAT_VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        Ok(())
    }

    fn finish(&self) -> std::result::Result<(), String> {
        if self.pos != self.buf.len() {
            return Err(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

/// Decodes a records file; flags come back all `false`.
pub fn decode_split(bytes: &[u8]) -> std::result::Result<(Vec<SetSample>, usize), String> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    c.header(SPLIT_MAGIC)?;
    let num_sets = c.u32()?;
    let dim = c.u32()?;
    let mut sets = Vec::with_capacity(num_sets);
    for _ in 0..num_sets {
        let set_label = c.u32()?;
        let camera_id = c.u32()?;
        let n = c.u32()?;
        let items = (0..n)
            .map(|_| {
                (0..dim)
                    .map(|_| c.f64())
                    .collect::<std::result::Result<Vec<_>, _>>()
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        sets.push(SetSample {
            items,
            set_label,
            camera_id,
            corruption_flags: vec![false; n],
        });
    }
    c.finish()?;
    Ok((sets, dim))
}

pub fn decode_flags(bytes: &[u8]) -> std::result::Result<Vec<Vec<bool>>, String> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    c.header(FLAGS_MAGIC)?;
    let num_sets = c.u32()?;
    let mut out = Vec::with_capacity(num_sets);
    for _ in 0..num_sets {
        let n = c.u32()?;
        let raw = c.take(n)?;
        out.push(raw.iter().map(|&b| b != 0).collect());
    }
    c.finish()?;
    Ok(out)
}

fn format_err(path: &Path, reason: String) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason,
    }
}

/// Writes `manifest.json`, `<split>.records` and `<split>.flags` into `dir`.
pub fn write_benchmark(
    bench: &Benchmark,
    dir: &Path,
    config_fingerprint: &str,
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut splits = Vec::new();
    for split in bench.splits() {
        let records = format!("{}.records", split.name);
        let flags = format!("{}.flags", split.name);
        fs::write(
            dir.join(&records),
            encode_split(split, bench.config.input_dim),
        )?;
        fs::write(dir.join(&flags), encode_flags(split))?;
        splits.push(SplitEntry {
            name: split.name.clone(),
            scene_id: split.scene_id,
            identities: split.identities.clone(),
            num_sets: split.sets.len(),
            records,
            flags,
        });
    }
    let manifest = Manifest {
        format_version: BENCHMARK_FORMAT_VERSION,
        config_fingerprint: config_fingerprint.to_owned(),
        seed: bench.seed,
        benchmark: bench.config.clone(),
        splits,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Reads a benchmark directory. Flags are loaded only when `with_flags`.
pub fn read_benchmark(dir: &Path, with_flags: bool) -> Result<(Manifest, Benchmark)> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingInput(manifest_path));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)
        .map_err(|e| format_err(&manifest_path, e.to_string()))?;
    if manifest.format_version != BENCHMARK_FORMAT_VERSION {
        return Err(format_err(
            &manifest_path,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    let mut splits = Vec::new();
    for entry in &manifest.splits {
        let path: PathBuf = dir.join(&entry.records);
        if !path.exists() {
            return Err(Error::MissingInput(path));
        }
        let (mut sets, dim) = decode_split(&fs::read(&path)?).map_err(|e| format_err(&path, e))?;
        if dim != manifest.benchmark.input_dim || sets.len() != entry.num_sets {
            return Err(format_err(&path, "does not match manifest".into()));
        }
        if with_flags {
            let fpath = dir.join(&entry.flags);
            let flags = decode_flags(&fs::read(&fpath)?).map_err(|e| format_err(&fpath, e))?;
            if flags.len() != sets.len() {
                return Err(format_err(&fpath, "set count differs from records".into()));
            }
            for (set, f) in sets.iter_mut().zip(flags) {
                if f.len() != set.items.len() {
                    return Err(format_err(&fpath, "item count differs from records".into()));
                }
                set.corruption_flags = f;
            }
        }
        splits.push(Split {
            name: entry.name.clone(),
            scene_id: entry.scene_id,
            identities: entry.identities.clone(),
            sets,
        });
    }
    let mut take = |name: &str| {
        splits
            .iter()
            .position(|s| s.name == name)
            .map(|i| splits.remove(i))
    };
    let train = take("train").ok_or_else(|| format_err(&manifest_path, "no train split".into()))?;
    let test = take("test").ok_or_else(|| format_err(&manifest_path, "no test split".into()))?;
    let cross = take("cross");
    let bench = Benchmark {
        config: manifest.benchmark.clone(),
        seed: manifest.seed,
        train,
        test,
        cross,
    };
    bench.check_disjoint()?;
    Ok((manifest, bench))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn world_is_deterministic() {
        let a = generate_world(5, 8, 42).unwrap();
        let b = generate_world(5, 8, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_world(5, 8, 43).unwrap();
        assert_ne!(a.prototypes, c.prototypes);
    }

    #[test]
    fn two_identity_world_is_distinct() {
        let w = generate_world(2, 3, 1).unwrap();
        assert_ne!(w.prototypes[0], w.prototypes[1]);
        assert!(generate_world(1, 3, 1).is_err());
        assert!(generate_world(3, 0, 1).is_err());
    }

    #[test]
    fn hundred_identities_have_positive_separation() {
        let w = generate_world(100, 32, 5).unwrap();
        // exhaustive pairwise check, independent of the world's own helper
        for i in 0..100 {
            for j in 0..i {
                let d2: f64 = (0..32)
                    .map(|k| (w.prototypes[i][k] - w.prototypes[j][k]).powi(2))
                    .sum();
                assert!(d2 > 0.0);
            }
        }
    }

    #[test]
    fn clean_set_equals_prototype() {
        let w = generate_world(4, 6, 2).unwrap();
        let s = sample_set(&w, 1, 7, &CorruptionSpec::clean(), 9).unwrap();
        assert!(s
            .items
            .iter()
            .all(|x| x.as_slice() == w.prototypes[1].as_slice()));
        assert!(s.corruption_flags.iter().all(|f| !f));
        assert_eq!(s.set_label, 1);
    }

    #[test]
    fn noisy_set_without_outliers() {
        let w = generate_world(4, 6, 2).unwrap();
        let spec = CorruptionSpec {
            perceptual_noise_sigma: 0.3,
            outlier_rate: 0.0,
            severity_jitter: (0.5, 1.5),
        };
        let s = sample_set(&w, 2, 20, &spec, 9).unwrap();
        assert!(s
            .items
            .iter()
            .all(|x| x.as_slice() != w.prototypes[2].as_slice()));
        assert_eq!(s.outlier_count(), 0);
    }

    #[test]
    fn outlier_rate_law_of_large_numbers() {
        let w = generate_world(10, 4, 3).unwrap();
        let spec = CorruptionSpec {
            outlier_rate: 0.3,
            ..CorruptionSpec::default()
        };
        let s = sample_set(&w, 0, 10_000, &spec, 17).unwrap();
        let frac = s.outlier_count() as f64 / 10_000.0;
        assert!((frac - 0.3).abs() < 0.02, "fraction {frac}");
        // outliers keep the set label
        assert_eq!(s.set_label, 0);
    }

    #[test]
    fn invalid_requests() {
        let w = generate_world(3, 4, 3).unwrap();
        assert!(sample_set(&w, 3, 5, &CorruptionSpec::default(), 1).is_err());
        assert!(sample_set(&w, 0, 0, &CorruptionSpec::default(), 1).is_err());
        let bad = CorruptionSpec {
            outlier_rate: 1.0,
            ..CorruptionSpec::default()
        };
        assert!(sample_set(&w, 0, 5, &bad, 1).is_err());
    }

    fn small_bench() -> Benchmark {
        let cfg = BenchmarkConfig {
            train_identities: 6,
            test_identities: 4,
            items_per_set: 12,
            ..BenchmarkConfig::default()
        };
        build_benchmark(&cfg, 77).unwrap()
    }

    #[test]
    fn minibatch_shapes() {
        let bench = small_bench();
        let view = bench.train.training_view();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_minibatch(&view, BatchShape::default(), &mut rng).unwrap();
        assert_eq!(b.num_sets(), 6);
        assert_eq!(b.num_items(), 54);
        assert_eq!(b.pair_counts(), (3, 12));

        let shape = BatchShape {
            persons: 2,
            sets_per_person: 2,
            items_per_set: 1,
        };
        let b = sample_minibatch(&view, shape, &mut rng).unwrap();
        assert_eq!(b.num_sets(), 4);
        assert_eq!(b.pair_counts(), (2, 4));

        let too_many = BatchShape {
            persons: 7,
            ..BatchShape::default()
        };
        assert!(sample_minibatch(&view, too_many, &mut rng).is_err());
    }

    #[test]
    fn benchmark_splits_are_disjoint_and_deterministic() {
        let a = small_bench();
        let b = small_bench();
        assert_eq!(a, b);
        assert_eq!(a.train.identities, (0..6).collect::<Vec<_>>());
        assert_eq!(a.test.identities, (6..10).collect::<Vec<_>>());
        let cross = a.cross.as_ref().unwrap();
        assert_ne!(cross.scene_id, a.train.scene_id);
        assert!(a.check_disjoint().is_ok());

        let mut broken = a.clone();
        broken.test.identities.push(0);
        assert!(broken.check_disjoint().is_err());
    }

    #[test]
    fn split_round_trip() {
        let bench = small_bench();
        let bytes = encode_split(&bench.test, bench.config.input_dim);
        let (sets, dim) = decode_split(&bytes).unwrap();
        assert_eq!(dim, bench.config.input_dim);
        let flags = decode_flags(&encode_flags(&bench.test)).unwrap();
        for ((a, b), f) in bench.test.sets.iter().zip(&sets).zip(&flags) {
            assert_eq!(a.items, b.items);
            assert_eq!(a.set_label, b.set_label);
            assert_eq!(&a.corruption_flags, f);
        }
        assert!(decode_split(&bytes[..bytes.len() - 1]).is_err());
    }
}
