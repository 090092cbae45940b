//! The progressive transfer loop.
//!
//! 1. Train the OCUD on the source set.
//! 2. Train the MIL classifier on the target set, using OCUD proposals.
//! 3. For each refinement: mine pseudo boxes in the original source and
//!    target sets with the current detector, refine the OCUD from its last
//!    weights on both augmented sets, then refine the MIL classifier.
//!
//! Every iteration is evaluated on the target test split (mAP) and the
//! target training split (CorLoc).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Annotation, CategoryId, Dataset, TrainImage};
use crate::error::{Error, Result};
use crate::eval::{evaluate_corloc, evaluate_map, ApMethod, CategoryAp, CategoryCorLoc};
use crate::kv::KvFile;
use crate::mil::{train_mil, FusionOrder, MilParams, MilTrainConfig, TargetDetector};
use crate::mining::{mine_source, mine_target, mining_stats, MiningConfig, MiningStats};
use crate::ocud::{ocud_score, train_ocud, CandidateSource, OcudParams, OcudTrainConfig, ProposalConfig};
use crate::rng;
use crate::sgd::Init;
use crate::synth::{generate_world, hidden_truth, World, WorldConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    /// Number of refinement rounds.
    pub refinements: usize,
    pub beta: f64,
    pub lambda: f64,
    pub eta: f64,
    pub tau: f64,
    pub o: f64,
    /// Per-category NMS threshold of the target detector.
    pub nms_iou: f64,
    pub proposal_nms_iou: f64,
    pub max_proposals: usize,
    pub ocud_steps: usize,
    pub ocud_refine_steps: usize,
    pub ocud_lr: f64,
    pub mil_steps: usize,
    pub mil_refine_steps: usize,
    pub mil_lr: f64,
    pub lr_drop_at: f64,
    pub match_iou: f64,
    pub neg_pos_ratio: f64,
    pub mil_warm_start: bool,
    /// Keep the source set in OCUD refinement.
    pub include_source: bool,
    /// Fraction of source images kept; smaller fractions are nested in larger ones.
    pub source_fraction: f64,
    pub ap_method: ApMethod,
    pub fusion_order: FusionOrder,
    pub seed: u64,
    /// World generator settings. Its seed is replaced by `seed` at run time.
    pub world: WorldConfig,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            refinements: 5,
            beta: 5.0,
            lambda: 0.2,
            eta: 0.5,
            tau: 0.8,
            o: 0.1,
            nms_iou: 0.4,
            proposal_nms_iou: 0.7,
            max_proposals: 20,
            ocud_steps: 3000,
            ocud_refine_steps: 857,
            ocud_lr: 0.5,
            mil_steps: 1000,
            mil_refine_steps: 400,
            mil_lr: 0.5,
            lr_drop_at: 0.7,
            match_iou: 0.5,
            neg_pos_ratio: 3.0,
            mil_warm_start: true,
            include_source: true,
            source_fraction: 1.0,
            ap_method: ApMethod::ElevenPoint,
            fusion_order: FusionOrder::BeforeNms,
            seed: 42,
            world: WorldConfig::default(),
        }
    }
}

impl LoopConfig {
    /// Loads a flat key-value file. World settings come either from a
    /// `world = <path>` key (relative to this file) or from world keys given
    /// inline. Unknown keys are errors.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut kv = KvFile::load(path)?;
        let mut cfg = Self::default();
        let mut ap_method = String::from("eleven_point");
        let mut fusion = String::from("before_nms");
        kv.take("refinements", &mut cfg.refinements)?;
        kv.take("beta", &mut cfg.beta)?;
        kv.take("lambda", &mut cfg.lambda)?;
        kv.take("eta", &mut cfg.eta)?;
        kv.take("tau", &mut cfg.tau)?;
        kv.take("o", &mut cfg.o)?;
        kv.take("nms_iou", &mut cfg.nms_iou)?;
        kv.take("proposal_nms_iou", &mut cfg.proposal_nms_iou)?;
        kv.take("max_proposals", &mut cfg.max_proposals)?;
        kv.take("ocud_steps", &mut cfg.ocud_steps)?;
        kv.take("ocud_refine_steps", &mut cfg.ocud_refine_steps)?;
        kv.take("ocud_lr", &mut cfg.ocud_lr)?;
        kv.take("mil_steps", &mut cfg.mil_steps)?;
        kv.take("mil_refine_steps", &mut cfg.mil_refine_steps)?;
        kv.take("mil_lr", &mut cfg.mil_lr)?;
        kv.take("lr_drop_at", &mut cfg.lr_drop_at)?;
        kv.take("match_iou", &mut cfg.match_iou)?;
        kv.take("neg_pos_ratio", &mut cfg.neg_pos_ratio)?;
        kv.take("mil_warm_start", &mut cfg.mil_warm_start)?;
        kv.take("include_source", &mut cfg.include_source)?;
        kv.take("source_fraction", &mut cfg.source_fraction)?;
        kv.take("ap_method", &mut ap_method)?;
        kv.take("fusion_order", &mut fusion)?;
        kv.take("seed", &mut cfg.seed)?;
        cfg.ap_method = ap_method.parse().map_err(Error::InvalidConfig)?;
        cfg.fusion_order = fusion.parse().map_err(Error::InvalidConfig)?;
        match kv.take_raw("world") {
            Some(rel) => {
                let base = path.parent().unwrap_or_else(|| Path::new("."));
                let world_path: PathBuf = base.join(rel);
                cfg.world = WorldConfig::load(world_path)?;
            }
            None => cfg.world = WorldConfig::take_from(&mut kv)?,
        }
        kv.finish()?;
        cfg.world.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        MiningConfig {
            tau: self.tau,
            o: self.o,
        }
        .validate()?;
        if !(self.beta > 0.0) {
            return bad(format!("beta {} must be positive", self.beta));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        for (name, v) in [
            ("eta", self.eta),
            ("nms_iou", self.nms_iou),
            ("proposal_nms_iou", self.proposal_nms_iou),
            ("lr_drop_at", self.lr_drop_at),
            ("match_iou", self.match_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        if !(self.source_fraction > 0.0 && self.source_fraction <= 1.0) {
            return bad(format!("source_fraction {} outside (0, 1]", self.source_fraction));
        }
        if !(self.ocud_lr > 0.0 && self.mil_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.max_proposals == 0 {
            return bad("max_proposals must be positive".into());
        }
        if !(self.neg_pos_ratio > 0.0) {
            return bad("neg_pos_ratio must be positive".into());
        }
        self.world.validate()
    }

    fn mining(&self) -> MiningConfig {
        MiningConfig {
            tau: self.tau,
            o: self.o,
        }
    }

    fn proposals(&self) -> ProposalConfig {
        ProposalConfig {
            nms_iou: self.proposal_nms_iou,
            max_proposals: self.max_proposals,
        }
    }

    fn ocud_train(&self, iteration: usize, init: Init<OcudParams>) -> OcudTrainConfig {
        OcudTrainConfig {
            steps: if iteration == 0 {
                self.ocud_steps
            } else {
                self.ocud_refine_steps
            },
            lr: self.ocud_lr,
            lr_drop_at: self.lr_drop_at,
            match_iou: self.match_iou,
            neg_pos_ratio: self.neg_pos_ratio,
            init,
            seed: rng::derive_seed(self.seed, "ocud", iteration as u64),
        }
    }

    fn mil_train(&self, iteration: usize, previous: Option<&MilParams>) -> MilTrainConfig {
        let (steps, init) = match previous {
            Some(p) if self.mil_warm_start => (self.mil_refine_steps, Init::WarmStart(p.clone())),
            _ => (self.mil_steps, Init::Scratch),
        };
        MilTrainConfig {
            steps,
            lr: self.mil_lr,
            lr_drop_at: self.lr_drop_at,
            beta: self.beta,
            lambda: self.lambda,
            init,
            seed: rng::derive_seed(self.seed, "mil", iteration as u64),
        }
    }
}

/// Metrics for one iteration of the loop; iteration 0 is the initial detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub map: f64,
    pub ap_per_category: Vec<CategoryAp>,
    pub corloc: f64,
    pub corloc_per_category: Vec<CategoryCorLoc>,
    /// Mining quality for the pseudo boxes that fed this iteration.
    pub source_mining: Option<MiningStats>,
    pub target_mining: Option<MiningStats>,
    pub mined_source_boxes: usize,
    pub mined_target_boxes: usize,
    pub ocud_loss_trace: Vec<f64>,
    pub mil_loss_trace: Vec<f64>,
    pub mil_skipped_images: usize,
    /// Mean OCUD objectness over unannotated target objects in source images.
    pub leaked_objectness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: LoopConfig,
    pub seed: u64,
    pub iterations: Vec<IterationReport>,
}

impl RunReport {
    pub fn final_map(&self) -> f64 {
        self.iterations.last().map_or(0.0, |i| i.map)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per iteration.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "iteration,map,corloc,source_precision,source_recall,target_precision,target_recall,mined_source,mined_target,leaked_objectness\n",
        );
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for it in &self.iterations {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{},{},{},{},{},{},{}",
                it.iteration,
                it.map,
                it.corloc,
                opt(it.source_mining.map(|s| s.precision)),
                opt(it.source_mining.map(|s| s.recall)),
                opt(it.target_mining.map(|s| s.precision)),
                opt(it.target_mining.map(|s| s.recall)),
                it.mined_source_boxes,
                it.mined_target_boxes,
                opt(it.leaked_objectness),
            );
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| K | mAP | CorLoc | src P | src R | tgt P | tgt R | mined src | mined tgt |\n|---|---|---|---|---|---|---|---|---|\n",
        );
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x));
        for it in &self.iterations {
            let _ = writeln!(
                out,
                "| {} | {:.2} | {:.2} | {} | {} | {} | {} | {} | {} |",
                it.iteration,
                100.0 * it.map,
                100.0 * it.corloc,
                pct(it.source_mining.map(|s| s.precision)),
                pct(it.source_mining.map(|s| s.recall)),
                pct(it.target_mining.map(|s| s.precision)),
                pct(it.target_mining.map(|s| s.recall)),
                it.mined_source_boxes,
                it.mined_target_boxes,
            );
        }
        out
    }
}

/// Pseudo boxes mined in one refinement round.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MinedBoxes {
    pub source: BTreeMap<String, Vec<Annotation>>,
    pub target: BTreeMap<String, Vec<Annotation>>,
}

/// Step-by-step driver of the loop over a generated world.
pub struct Pipeline<'w> {
    cfg: LoopConfig,
    world: &'w World,
    source: Dataset,
    target_categories: Vec<CategoryId>,
    detector: Option<TargetDetector>,
    iteration: usize,
}

impl<'w> Pipeline<'w> {
    pub fn new(cfg: LoopConfig, world: &'w World) -> Result<Self> {
        cfg.validate()?;
        let mut keep_rng = rng::stream(cfg.seed, "source-fraction", 0);
        let fraction = cfg.source_fraction;
        // One uniform draw per image, so a smaller fraction keeps a subset.
        let draws: Vec<f64> = (0..world.source_train.images.len())
            .map(|_| keep_rng.random::<f64>())
            .collect();
        let source = if fraction >= 1.0 {
            world.source_train.clone()
        } else {
            world.source_train.filter_images(|i, _| draws[i] < fraction)
        };
        Ok(Self {
            target_categories: world.config.target_categories(),
            cfg,
            world,
            source,
            detector: None,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &LoopConfig {
        &self.cfg
    }

    /// Source images in use after subsampling.
    pub fn source(&self) -> &Dataset {
        &self.source
    }

    pub fn detector(&self) -> Option<&TargetDetector> {
        self.detector.as_ref()
    }

    fn make_detector(&self, ocud: OcudParams, mil: MilParams) -> TargetDetector {
        TargetDetector {
            ocud,
            mil,
            eta: self.cfg.eta,
            nms_iou: self.cfg.nms_iou,
            proposals: self.cfg.proposals(),
            fusion: self.cfg.fusion_order,
        }
    }

    /// Initial OCUD and MIL training.
    pub fn initialize(&mut self) -> Result<IterationReport> {
        let source_views = self.source.views();
        let target_views = self.world.target_train.views();
        let ocud = train_ocud(&[&source_views], self.world, &self.cfg.ocud_train(0, Init::Scratch))?;
        let mil = train_mil(
            &target_views,
            self.world,
            &ocud.params,
            &self.cfg.proposals(),
            &self.target_categories,
            &self.cfg.mil_train(0, None),
        )?;
        let detector = self.make_detector(ocud.params, mil.params);
        let mut report = self.evaluate(&detector)?;
        report.ocud_loss_trace = ocud.loss_trace;
        report.mil_loss_trace = mil.loss_trace;
        report.mil_skipped_images = mil.skipped_images;
        self.detector = Some(detector);
        self.iteration = 0;
        Ok(report)
    }

    /// One refinement round. Requires [`Pipeline::initialize`] first.
    pub fn refine(&mut self) -> Result<(IterationReport, MinedBoxes)> {
        let Some(current) = self.detector.take() else {
            return Err(Error::InvalidConfig("refine called before initialize".into()));
        };
        let k = self.iteration + 1;
        let result = self.refine_from(&current, k);
        match result {
            Ok((detector, report, mined)) => {
                self.detector = Some(detector);
                self.iteration = k;
                Ok((report, mined))
            }
            Err(e) => {
                self.detector = Some(current);
                Err(e)
            }
        }
    }

    fn refine_from(
        &self,
        current: &TargetDetector,
        k: usize,
    ) -> Result<(TargetDetector, IterationReport, MinedBoxes)> {
        let world = self.world;
        let mining = self.cfg.mining();
        let detect = |img: &TrainImage<'_>| current.detect(world.candidates(img.id));

        let source_views = self.source.views();
        let target_views = world.target_train.views();
        let mined = MinedBoxes {
            source: if self.cfg.include_source {
                mine_source(&source_views, detect, &mining)?
            } else {
                BTreeMap::new()
            },
            target: mine_target(&target_views, detect, &mining)?,
        };
        let source_plus = self.source.augment(&mined.source)?;
        let target_plus = world.target_train.augment(&mined.target)?;
        let sp_views = source_plus.views();
        let tp_views = target_plus.views();
        let sets: Vec<&[TrainImage<'_>]> = if self.cfg.include_source {
            vec![&sp_views, &tp_views]
        } else {
            vec![&tp_views]
        };
        let ocud = train_ocud(
            &sets,
            world,
            &self.cfg.ocud_train(k, Init::WarmStart(current.ocud.clone())),
        )?;
        let mil = train_mil(
            &target_views,
            world,
            &ocud.params,
            &self.cfg.proposals(),
            &self.target_categories,
            &self.cfg.mil_train(k, Some(&current.mil)),
        )?;
        let detector = self.make_detector(ocud.params, mil.params);
        let mut report = self.evaluate(&detector)?;
        report.iteration = k;
        report.ocud_loss_trace = ocud.loss_trace;
        report.mil_loss_trace = mil.loss_trace;
        report.mil_skipped_images = mil.skipped_images;
        report.mined_source_boxes = mined.source.values().map(Vec::len).sum();
        report.mined_target_boxes = mined.target.values().map(Vec::len).sum();
        let targets: BTreeSet<CategoryId> = self.target_categories.iter().copied().collect();
        if self.cfg.include_source {
            report.source_mining = Some(mining_stats(
                &mined.source,
                &hidden_truth(&self.source),
                0.5,
                Some(&targets),
            ));
        }
        report.target_mining = Some(mining_stats(
            &mined.target,
            &hidden_truth(&world.target_train),
            0.5,
            None,
        ));
        Ok((detector, report, mined))
    }

    fn evaluate(&self, detector: &TargetDetector) -> Result<IterationReport> {
        let world = self.world;
        let ids = |ds: &'w Dataset| ds.images.iter().map(|i| i.id.as_str());
        let test_dets = detector.detect_all(ids(&world.target_test), world)?;
        let train_dets = detector.detect_all(ids(&world.target_train), world)?;
        let map = evaluate_map(
            &test_dets,
            &hidden_truth(&world.target_test),
            &self.target_categories,
            0.5,
            self.cfg.ap_method,
        );
        let corloc = evaluate_corloc(
            &train_dets,
            &hidden_truth(&world.target_train),
            &self.target_categories,
        );
        Ok(IterationReport {
            iteration: 0,
            map: map.map,
            ap_per_category: map.per_category,
            corloc: corloc.mean,
            corloc_per_category: corloc.per_category,
            source_mining: None,
            target_mining: None,
            mined_source_boxes: 0,
            mined_target_boxes: 0,
            ocud_loss_trace: Vec::new(),
            mil_loss_trace: Vec::new(),
            mil_skipped_images: 0,
            leaked_objectness: self.leaked_objectness(&detector.ocud)?,
        })
    }

    fn leaked_objectness(&self, ocud: &OcudParams) -> Result<Option<f64>> {
        let first_target = self.world.config.n_source_cats as CategoryId;
        let mut scores = Vec::new();
        for img in &self.source.images {
            for o in self.world.objects.get(&img.id).into_iter().flatten() {
                if o.category >= first_target {
                    scores.push(ocud_score(ocud, &o.feature)?);
                }
            }
        }
        Ok((!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64))
    }
}

/// Runs the loop on an existing world.
pub fn run_on_world(cfg: &LoopConfig, world: &World) -> Result<RunReport> {
    let mut pipeline = Pipeline::new(cfg.clone(), world)?;
    let mut iterations = Vec::with_capacity(cfg.refinements + 1);
    iterations.push(pipeline.initialize().map_err(|e| at_iteration(0, e))?);
    for k in 1..=cfg.refinements {
        let (report, _) = pipeline.refine().map_err(|e| at_iteration(k, e))?;
        iterations.push(report);
    }
    Ok(RunReport {
        config: cfg.clone(),
        seed: cfg.seed,
        iterations,
    })
}

fn at_iteration(iteration: usize, e: Error) -> Error {
    Error::Iteration {
        iteration,
        source: Box::new(e),
    }
}

/// Generates the world for `cfg` (seeded by `cfg.seed`) and runs the loop.
pub fn run(cfg: &LoopConfig) -> Result<RunReport> {
    let world = generate_world(&world_config(cfg))?;
    run_on_world(cfg, &world)
}

fn world_config(cfg: &LoopConfig) -> WorldConfig {
    WorldConfig {
        seed: cfg.seed,
        ..cfg.world.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Tau,
    Beta,
    Lambda,
    Eta,
    SourceInclusion,
    SourceFraction,
}

impl std::str::FromStr for AblationAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "tau" => Self::Tau,
            "beta" => Self::Beta,
            "lambda" => Self::Lambda,
            "eta" => Self::Eta,
            "source_inclusion" => Self::SourceInclusion,
            "source_fraction" => Self::SourceFraction,
            other => return Err(format!("unknown ablation axis `{other}`")),
        })
    }
}

impl AblationAxis {
    /// Returns `base` with this axis set to `value`.
    pub fn apply(self, base: &LoopConfig, value: &str) -> Result<LoopConfig> {
        let num = || {
            value
                .parse::<f64>()
                .map_err(|e| Error::InvalidConfig(format!("bad ablation value `{value}`: {e}")))
        };
        let mut cfg = base.clone();
        match self {
            Self::Tau => cfg.tau = num()?,
            Self::Beta => cfg.beta = num()?,
            Self::Lambda => cfg.lambda = num()?,
            Self::Eta => cfg.eta = num()?,
            Self::SourceFraction => cfg.source_fraction = num()?,
            Self::SourceInclusion => {
                cfg.include_source = match value {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    other => {
                        return Err(Error::InvalidConfig(format!(
                            "source_inclusion expects true/false, got `{other}`"
                        )))
                    }
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One full run per value, all on the same world and seed.
pub fn run_ablation(base: &LoopConfig, axis: AblationAxis, values: &[&str]) -> Result<Vec<RunReport>> {
    let configs = values
        .iter()
        .map(|v| axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    let world = generate_world(&world_config(base))?;
    configs.iter().map(|cfg| run_on_world(cfg, &world)).collect()
}
