//! Metric induction from free-text feedback on agent trajectories.
//!
//! Feedback is grounded into signed aspects, aspects are clustered into
//! metrics, a model judge rates trajectories against the metrics, and
//! coverage/redundancy measure how well the resulting traits explain the
//! original feedback. An optimizer searches over metric-set sizes and a
//! ladder loop uses the metrics to rewrite an agent prompt.

pub mod clustering;
pub mod error;
pub mod fraction;
pub mod gateway;
pub mod grounding;
pub mod io;
pub mod judging;
pub mod ladder;
pub mod metaeval;
pub mod model;
pub mod optimizer;
pub mod text;
pub mod workspace;

pub use error::{Error, Result};
pub use fraction::Fraction;
pub use model::*;
