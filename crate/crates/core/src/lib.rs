//! Multi-level out-of-distribution detection over multi-exit classifiers.
//!
//! Each input is routed to an exit by how well it compresses: simple inputs
//! are scored by an early classifier, complex ones by a deep one. At the
//! chosen exit an adjusted energy score (free energy minus its ID mean at that
//! exit) is compared with one global threshold.
//!
//! Modules:
//! * [`complexity`]: lossless bit length, normalization and exit routing
//! * [`scoring`]: energy, adjusted energy, MSP, temperature-scaled ODIN and
//!   threshold calibration
//! * [`exitnet`]: a small built-in multi-exit network and cost models
//! * [`detector`]: MOOD, greedy, randomized and constant exit strategies
//! * [`metrics`]: AUROC, FPR at a target TPR, ID accuracy, FLOPs, reports
//! * [`datastore`]: file formats
//! * [`pipeline`]: file-to-file inference, calibration and evaluation

pub mod complexity;
pub mod datastore;
pub mod detector;
pub mod error;
pub mod exitnet;
pub mod metrics;
pub mod pipeline;
pub mod scoring;

pub use complexity::{CodecId, ComplexityScore, ImageBuffer};
pub use detector::{Decision, DetectionOutcome, SplitMix64, Strategy, StrategySpec};
pub use error::{MoodError, Result};
pub use exitnet::{ExitCostModel, ExitNetWeights};
pub use metrics::{AccuracyMode, EvalReport};
pub use scoring::{CalibrationProfile, LogitsRecord, ScoreFunction};
