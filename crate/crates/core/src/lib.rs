//! Tracking-by-detection with selective appearance (ReID) feature extraction.
//!
//! Detections that have exactly one plausible confirmed track nearby skip the
//! expensive feature extraction and borrow the candidate's embedding for
//! matching. Tracks keep an exponential moving average of their embedding with
//! a decay that accounts for frames where no feature was extracted.

pub mod appearance;
pub mod assignment;
pub mod cli;
pub mod gating;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod motion;
pub mod synth;
pub mod tracker;

pub use appearance::{cosine_distance, EmaState, FeatureVector};
pub use assignment::{solve, Assignment, CostMatrix};
pub use gating::{classify, GateConfig, GateMode, RiskLabel};
pub use geometry::BBox;
pub use motion::KalmanState;
pub use tracker::{
    run_sequence, Detection, FeatureProvider, MatchConfig, MatchStrategy, RunStats, Tracker,
    TrackerConfig,
};
