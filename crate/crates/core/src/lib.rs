//! Weakly supervised object detection with progressive knowledge transfer,
//! on a seeded synthetic world.
//!
//! A one-class objectness detector trained on a fully annotated source
//! domain proposes regions in a weakly labeled target domain; a two-branch
//! MIL classifier scores them per category. The combined detector then mines
//! pseudo boxes in both domains, which refine the objectness detector, and
//! the cycle repeats.

pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod kv;
pub mod mil;
pub mod mining;
pub mod ocud;
pub mod pipeline;
pub mod rng;
pub mod sgd;
pub mod synth;

pub use data::{
    load_dataset, load_detections, save_dataset, save_detections, Annotation, CategoryId, Dataset,
    Detection, Domain, ImageRecord, Origin, Split, TrainImage,
};
pub use error::{Error, Result};
pub use eval::{evaluate_corloc, evaluate_map, voc_ap, ApMethod, MetricsReport};
pub use geometry::{iou, nms, overlap_over_pred, BBox};
pub use mil::{fuse_scores, mil_forward, mil_grad, mil_loss, MilParams, TargetDetector};
pub use mining::{mine_source, mine_target, mining_stats, MiningConfig, MiningStats};
pub use ocud::{detect_objectness, ocud_score, train_ocud, Candidate, CandidateSource, OcudParams, Proposal};
pub use pipeline::{run, run_ablation, run_on_world, AblationAxis, LoopConfig, Pipeline, RunReport};
pub use sgd::Init;
pub use synth::{generate_world, World, WorldConfig};
