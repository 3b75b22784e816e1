//! Hybrid pseudo-labeling domain adaptation for event-based semantic
//! segmentation.
//!
//! A labeled image domain is adapted to an unlabeled event domain by
//! self-training an EMA teacher/student pair. A small share of target event
//! samples also gets a reconstructed intensity image. The student's label
//! map for that image is mixed with the teacher's event prediction into a
//! refined soft label, and soft prototype assignments align image and event
//! features through Jensen–Shannon losses.
//!
//! Numeric code below the training loop is generic over [`Scalar`]
//! (`f32`/`f64`). The training loop runs in `f64`; the `f64` instantiations
//! are re-exported here under short names.

// Validation uses negated comparisons so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod events;
pub mod formats;
pub mod gradcheck;
pub mod labeling;
pub mod numeric;
pub mod scalar;
pub mod seed;
pub mod segnet;
pub mod spa;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = numeric::Tensor<f64>;
pub type ProbMap = numeric::ProbMap<f64>;
pub type SegNetParams = segnet::SegNetParams<f64>;
pub type SegNetGrads = segnet::SegNetParams<f64>;
pub type ForwardTrace = segnet::ForwardTrace<f64>;
pub type PrototypeBank = spa::PrototypeBank<f64>;
pub type SoftAssignment = spa::SoftAssignment<f64>;

pub type Tensor32 = numeric::Tensor<f32>;
pub type ProbMap32 = numeric::ProbMap<f32>;
pub type SegNetParams32 = segnet::SegNetParams<f32>;

pub use numeric::LabelMap;
