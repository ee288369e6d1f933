//! Non-neural core of a multi-modal screening mammography system.
//!
//! The crate consumes model outputs (bounding boxes, score grids, feature
//! maps, image-level probabilities) as data and provides:
//!
//! * [`geometry`]: identifiers, boxes, masks and augmentation geometry.
//! * [`detect`]: NMS, Max-Slice-Selection for tomosynthesis stacks,
//!   FFDM/C-View/DBT triplet matching and multi-modal box ensembling.
//! * [`head`]: score fusion, top-K feature selection, gated attention,
//!   the image-level logistic head and training-loss composition.
//! * [`metrics`]: AUROC, AUPRC, FROC and AUFROC over `[0, 1]` FP/image.
//! * [`stats`]: bootstrap intervals, permutation tests, the two-proportion
//!   z-test, Cohen's h, sample size and reduction of error.
//! * [`ensemble`]: breast-level averaging, greedy ensemble selection,
//!   operating points, triage and recall-savings tables.
//! * [`cohort`]: pathology label windows and test-set exam filtering.
//! * [`cli`]: wire formats, run configuration, synthetic data, hyperparameter
//!   sampling and report emission used by the `mammoscreen` binary.

pub mod cli;
pub mod cohort;
pub mod detect;
pub mod ensemble;
pub mod error;
pub mod geometry;
pub mod head;
pub mod metrics;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use geometry::{BBox2D, DetBox, ImageKey, Laterality, Mask, Modality, Target, View};
