//! Desk-scale multi-task unsupervised domain adaptation with foundation-model
//! oracles: EMA self-training for segmentation with mask-vote pseudo-label
//! refinement, scale/shift-invariant pseudo-depth supervision, a procedural
//! scene generator that stands in for the usual synthetic-to-real benchmarks,
//! and the matching evaluation protocol (mIoU, median-scaled depth RMSE).

pub mod augment;
pub mod depthloss;
pub mod eval;
pub mod grid;
pub mod maskcache;
pub mod model;
pub mod refine;
pub mod rng;
pub mod selftrain;
pub mod synthworld;

pub use grid::{DepthMap, GridError, Image, LabelMap, ProbMap, IGNORE};
pub use maskcache::{Mask, MaskSet};
pub use model::{MultiTaskModel, TrainConfig};
pub use rng::Rng;
