//! Seeded synthetic world: a fully annotated source domain, a weakly
//! labeled target domain, and region candidates with feature vectors.
//!
//! Every category has a unit prototype. Source prototypes are orthonormal;
//! each target prototype has cosine `prototype_affinity` with one source
//! prototype and is otherwise orthogonal to everything. An object's feature
//! is its prototype plus isotropic noise. A fraction `leak_rate` of source
//! images also holds a target-category object that is never annotated.
//!
//! Candidates are the true boxes, jittered copies of them and random
//! distractors. A candidate's feature blends the best-overlapping object's
//! feature with a background draw, weighted by that IoU (zero below 0.3).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Annotation, CategoryId, Dataset, Domain, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::kv::KvFile;
use crate::ocud::{Candidate, CandidateSource};
use crate::rng;

/// Below this IoU a candidate carries no object signal.
pub const BLEND_MIN_IOU: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub feature_dim: usize,
    pub n_source_cats: usize,
    pub n_target_cats: usize,
    pub prototype_affinity: f64,
    pub feature_noise_sigma: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    pub n_source_images: usize,
    pub n_target_train_images: usize,
    pub n_target_test_images: usize,
    pub leak_rate: f64,
    /// Jittered copies generated around every object.
    pub jitter_copies: usize,
    /// Corner noise, as a fraction of box width/height.
    pub jitter_sigma: f64,
    pub distractors_per_image: usize,
    /// Offset of the background mean along its own direction.
    pub background_offset: f64,
    pub background_sigma: f64,
    pub image_size: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            n_source_cats: 24,
            n_target_cats: 4,
            prototype_affinity: 0.8,
            feature_noise_sigma: 0.2,
            objects_min: 1,
            objects_max: 4,
            n_source_images: 200,
            n_target_train_images: 100,
            n_target_test_images: 100,
            leak_rate: 0.3,
            jitter_copies: 1,
            jitter_sigma: 0.25,
            distractors_per_image: 6,
            background_offset: 0.0,
            background_sigma: 0.3,
            image_size: 100.0,
            seed: 42,
        }
    }
}

macro_rules! kv_fields {
    ($cfg:ident, $kv:ident, $($field:ident),* $(,)?) => {
        $( $kv.take(stringify!($field), &mut $cfg.$field)?; )*
    };
}

impl WorldConfig {
    /// Reads world keys from `kv`, leaving other keys in place.
    pub fn take_from(kv: &mut KvFile) -> Result<Self> {
        let mut cfg = Self::default();
        kv_fields!(
            cfg,
            kv,
            feature_dim,
            n_source_cats,
            n_target_cats,
            prototype_affinity,
            feature_noise_sigma,
            objects_min,
            objects_max,
            n_source_images,
            n_target_train_images,
            n_target_test_images,
            leak_rate,
            jitter_copies,
            jitter_sigma,
            distractors_per_image,
            background_offset,
            background_sigma,
            image_size,
            seed,
        );
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut kv = KvFile::load(path)?;
        let cfg = Self::take_from(&mut kv)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_source_cats == 0 || self.n_target_cats == 0 {
            return bad("category counts must be positive".into());
        }
        if self.feature_dim < self.n_source_cats + self.n_target_cats + 1 {
            return bad(format!(
                "feature_dim {} too small for {} orthogonal directions",
                self.feature_dim,
                self.n_source_cats + self.n_target_cats + 1
            ));
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return bad("need 1 <= objects_min <= objects_max".into());
        }
        if self.n_source_images == 0 || self.n_target_train_images == 0 || self.n_target_test_images == 0 {
            return bad("image counts must be positive".into());
        }
        for (name, v) in [("prototype_affinity", self.prototype_affinity), ("leak_rate", self.leak_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        for (name, v) in [
            ("feature_noise_sigma", self.feature_noise_sigma),
            ("jitter_sigma", self.jitter_sigma),
            ("background_sigma", self.background_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a non-negative number"));
            }
        }
        if !(self.image_size >= 10.0 && self.image_size.is_finite()) {
            return bad("image_size must be at least 10".into());
        }
        Ok(())
    }

    pub fn source_categories(&self) -> Vec<CategoryId> {
        (0..self.n_source_cats as CategoryId).collect()
    }

    pub fn target_categories(&self) -> Vec<CategoryId> {
        let s = self.n_source_cats as CategoryId;
        (s..s + self.n_target_cats as CategoryId).collect()
    }

    fn category_names(&self) -> Vec<String> {
        (0..self.n_source_cats)
            .map(|i| format!("source_{i}"))
            .chain((0..self.n_target_cats).map(|i| format!("target_{i}")))
            .collect()
    }
}

/// A simulated object: its box, category and feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntity {
    pub bbox: BBox,
    pub category: CategoryId,
    pub feature: Vec<f64>,
}

/// Category prototypes plus the background direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub source: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
    /// Source index each target prototype is aligned with.
    pub pairing: Vec<usize>,
    pub background: Vec<f64>,
}

impl Prototypes {
    pub fn build(cfg: &WorldConfig) -> Self {
        let mut rng = rng::stream(cfg.seed, "world-prototypes", 0);
        let (s, t, d) = (cfg.n_source_cats, cfg.n_target_cats, cfg.feature_dim);
        let mut basis = gram_schmidt(&mut rng, s + t + 1, d);
        let background = basis.pop().expect("basis has s + t + 1 vectors");
        let mut order: Vec<usize> = (0..s).collect();
        order.shuffle(&mut rng);
        let pairing: Vec<usize> = (0..t).map(|j| order[j % s]).collect();
        let a = cfg.prototype_affinity;
        let ortho = (1.0 - a * a).max(0.0).sqrt();
        let target = (0..t)
            .map(|j| {
                let p = &basis[pairing[j]];
                let u = &basis[s + j];
                p.iter().zip(u).map(|(x, y)| a * x + ortho * y).collect()
            })
            .collect();
        basis.truncate(s);
        Self {
            source: basis,
            target,
            pairing,
            background,
        }
    }

    /// Prototype of a global category id (source ids first).
    pub fn of(&self, category: CategoryId) -> &[f64] {
        let c = category as usize;
        if c < self.source.len() {
            &self.source[c]
        } else {
            &self.target[c - self.source.len()]
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `n` orthonormal vectors in `d` dimensions from Gaussian draws, with a
/// second orthogonalization pass for accuracy.
fn gram_schmidt(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        for _ in 0..2 {
            for e in &basis {
                let proj: f64 = v.iter().zip(e).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(e) {
                    *x -= proj * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn random_box(rng: &mut ChaCha8Rng, size: f64) -> BBox {
    let w = rng.random_range(0.2..0.45) * size;
    let h = rng.random_range(0.2..0.45) * size;
    let x1 = rng.random_range(0.0..size - w);
    let y1 = rng.random_range(0.0..size - h);
    BBox::new(x1, y1, x1 + w, y1 + h).expect("positive extent")
}

/// A box that overlaps the given ones by at most IoU 0.1, if one is found.
fn place_object(rng: &mut ChaCha8Rng, size: f64, taken: &[BBox]) -> BBox {
    let mut candidate = random_box(rng, size);
    for _ in 0..50 {
        if taken.iter().all(|t| iou(t, &candidate) <= 0.1) {
            break;
        }
        candidate = random_box(rng, size);
    }
    candidate
}

fn object_feature(rng: &mut ChaCha8Rng, prototype: &[f64], sigma: f64) -> Vec<f64> {
    prototype.iter().map(|p| p + sigma * gaussian(rng)).collect()
}

fn jitter(rng: &mut ChaCha8Rng, b: &BBox, sigma: f64, size: f64) -> BBox {
    let (w, h) = (b.width(), b.height());
    for _ in 0..20 {
        let x1 = (b.x1() + sigma * w * gaussian(rng)).clamp(0.0, size);
        let y1 = (b.y1() + sigma * h * gaussian(rng)).clamp(0.0, size);
        let x2 = (b.x2() + sigma * w * gaussian(rng)).clamp(0.0, size);
        let y2 = (b.y2() + sigma * h * gaussian(rng)).clamp(0.0, size);
        if x2 - x1 >= 1.0 && y2 - y1 >= 1.0 {
            return BBox::new(x1, y1, x2, y2).expect("checked extent");
        }
    }
    *b
}

/// Background feature draw.
fn background_feature(rng: &mut ChaCha8Rng, cfg: &WorldConfig, direction: &[f64]) -> Vec<f64> {
    direction
        .iter()
        .map(|e| cfg.background_offset * e + cfg.background_sigma * gaussian(rng))
        .collect()
}

/// Blending weight of an object for a candidate box: the IoU when it reaches
/// [`BLEND_MIN_IOU`], else zero.
pub fn blend_weight(candidate: &BBox, object: &BBox) -> f64 {
    let v = iou(candidate, object);
    if v >= BLEND_MIN_IOU {
        v
    } else {
        0.0
    }
}

/// Builds the feature for a candidate box given the image's objects.
pub fn candidate_feature(bbox: &BBox, objects: &[ObjectEntity], background: Vec<f64>) -> Vec<f64> {
    let mut nearest: Option<(&ObjectEntity, f64)> = None;
    for o in objects {
        let v = iou(bbox, &o.bbox);
        if nearest.is_none_or(|(_, best)| v > best) {
            nearest = Some((o, v));
        }
    }
    match nearest {
        Some((o, _)) => {
            let alpha = blend_weight(bbox, &o.bbox);
            if alpha == 0.0 {
                return background;
            }
            o.feature
                .iter()
                .zip(background)
                .map(|(f, g)| alpha * f + (1.0 - alpha) * g)
                .collect()
        }
        None => background,
    }
}

/// Candidate regions of one image: each true box, `jitter_copies` jittered
/// copies of it, then `distractors_per_image` random boxes.
pub fn candidate_boxes(
    objects: &[ObjectEntity],
    cfg: &WorldConfig,
    background_direction: &[f64],
    rng: &mut ChaCha8Rng,
) -> Vec<Candidate> {
    let mut boxes = Vec::with_capacity(objects.len() * (1 + cfg.jitter_copies) + cfg.distractors_per_image);
    for o in objects {
        boxes.push(o.bbox);
        for _ in 0..cfg.jitter_copies {
            boxes.push(jitter(rng, &o.bbox, cfg.jitter_sigma, cfg.image_size));
        }
    }
    for _ in 0..cfg.distractors_per_image {
        boxes.push(random_box(rng, cfg.image_size));
    }
    boxes
        .into_iter()
        .map(|bbox| {
            let bg = background_feature(rng, cfg, background_direction);
            Candidate {
                feature: candidate_feature(&bbox, objects, bg),
                bbox,
            }
        })
        .collect()
}

/// Candidates of every image, keyed by image id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateBank {
    by_image: HashMap<String, Vec<Candidate>>,
}

impl CandidateBank {
    pub fn insert(&mut self, image_id: impl Into<String>, candidates: Vec<Candidate>) {
        self.by_image.insert(image_id.into(), candidates);
    }

    pub fn len(&self) -> usize {
        self.by_image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_image.is_empty()
    }
}

impl CandidateSource for CandidateBank {
    fn candidates(&self, image_id: &str) -> &[Candidate] {
        self.by_image.get(image_id).map_or(&[], Vec::as_slice)
    }
}

/// A generated world: the three splits, the simulated objects behind them,
/// and precomputed candidates.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub prototypes: Prototypes,
    pub source_train: Dataset,
    pub target_train: Dataset,
    pub target_test: Dataset,
    pub objects: BTreeMap<String, Vec<ObjectEntity>>,
    pub candidates: CandidateBank,
}

impl CandidateSource for World {
    fn candidates(&self, image_id: &str) -> &[Candidate] {
        self.candidates.candidates(image_id)
    }
}

impl World {
    /// Objects present in source images whose category is a target one.
    /// They are in `hidden_gt` but never in `annotations`.
    pub fn leaked_objects(&self) -> Vec<&ObjectEntity> {
        let first_target = self.config.n_source_cats as CategoryId;
        self.source_train
            .images
            .iter()
            .flat_map(|img| self.objects.get(&img.id).into_iter().flatten())
            .filter(|o| o.category >= first_target)
            .collect()
    }

    pub fn write_datasets(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::data::save_dataset(&self.source_train, dir.join("source_train.json"))?;
        crate::data::save_dataset(&self.target_train, dir.join("target_train.json"))?;
        crate::data::save_dataset(&self.target_test, dir.join("target_test.json"))
    }
}

struct SplitSpec {
    split: Split,
    prefix: &'static str,
    count: usize,
}

/// Generates the world. A pure function of `cfg`.
pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let prototypes = Prototypes::build(cfg);
    let names = cfg.category_names();
    let source_cats = cfg.source_categories();
    let target_cats = cfg.target_categories();

    let mut objects = BTreeMap::new();
    let mut candidates = CandidateBank::default();
    let mut datasets = Vec::with_capacity(3);
    let specs = [
        SplitSpec {
            split: Split::SourceTrain,
            prefix: "src",
            count: cfg.n_source_images,
        },
        SplitSpec {
            split: Split::TargetTrain,
            prefix: "ttr",
            count: cfg.n_target_train_images,
        },
        SplitSpec {
            split: Split::TargetTest,
            prefix: "tte",
            count: cfg.n_target_test_images,
        },
    ];
    for spec in specs {
        let is_source = spec.split == Split::SourceTrain;
        let pool = if is_source { &source_cats } else { &target_cats };
        let mut images = Vec::with_capacity(spec.count);
        for i in 0..spec.count {
            let id = format!("{}-{i:05}", spec.prefix);
            let mut rng = rng::stream(cfg.seed, spec.prefix, i as u64);
            let n = rng.random_range(cfg.objects_min..=cfg.objects_max);
            let mut objs: Vec<ObjectEntity> = Vec::with_capacity(n + 1);
            let add = |rng: &mut ChaCha8Rng, category: CategoryId, objs: &mut Vec<ObjectEntity>| {
                let taken: Vec<BBox> = objs.iter().map(|o| o.bbox).collect();
                let bbox = place_object(rng, cfg.image_size, &taken);
                let feature = object_feature(rng, prototypes.of(category), cfg.feature_noise_sigma);
                objs.push(ObjectEntity {
                    bbox,
                    category,
                    feature,
                });
            };
            for _ in 0..n {
                let c = *pool.choose(&mut rng).expect("non-empty pool");
                add(&mut rng, c, &mut objs);
            }
            if is_source && rng.random_bool(cfg.leak_rate) {
                let c = *target_cats.choose(&mut rng).expect("non-empty pool");
                add(&mut rng, c, &mut objs);
            }

            let hidden_gt: Vec<Annotation> = objs
                .iter()
                .map(|o| Annotation::original(o.bbox, o.category))
                .collect();
            let (domain, labels, annotations) = match spec.split {
                Split::SourceTrain => (
                    Domain::Source,
                    BTreeSet::new(),
                    hidden_gt
                        .iter()
                        .filter(|a| source_cats.contains(&a.category))
                        .cloned()
                        .collect(),
                ),
                Split::TargetTrain => (
                    Domain::Target,
                    hidden_gt.iter().map(|a| a.category).collect(),
                    Vec::new(),
                ),
                Split::TargetTest => (Domain::Target, BTreeSet::new(), Vec::new()),
            };

            let mut cand_rng = rng::stream(cfg.seed, &format!("candidates-{}", spec.prefix), i as u64);
            candidates.insert(
                id.clone(),
                candidate_boxes(&objs, cfg, &prototypes.background, &mut cand_rng),
            );
            objects.insert(id.clone(), objs);
            images.push(ImageRecord {
                id,
                domain,
                width: cfg.image_size,
                height: cfg.image_size,
                labels,
                annotations,
                hidden_gt,
            });
        }
        let ds = Dataset {
            categories: names.clone(),
            split: spec.split,
            images,
        };
        ds.validate()?;
        datasets.push(ds);
    }
    let target_test = datasets.pop().expect("three splits");
    let target_train = datasets.pop().expect("three splits");
    let source_train = datasets.pop().expect("three splits");
    Ok(World {
        config: cfg.clone(),
        prototypes,
        source_train,
        target_train,
        target_test,
        objects,
        candidates,
    })
}

/// Hidden truth of a dataset keyed by image id (evaluation only).
pub fn hidden_truth(ds: &Dataset) -> BTreeMap<String, Vec<Annotation>> {
    ds.images
        .iter()
        .map(|i| (i.id.clone(), i.hidden_gt.clone()))
        .collect()
}
