//! Content- and action-level metrics.

pub mod action;
pub mod aggregate;
pub mod drop;
pub mod heuristic;
pub mod similarity;
pub mod sql;

use serde::{Deserialize, Serialize};

pub use action::{action_metrics, ActionScores};
pub use aggregate::{aggregate_trajectory_metrics, ScoredTrajectory};
pub use drop::drop_f1;
pub use heuristic::{build_heuristic, Heuristic, HeuristicContext};
pub use similarity::{JaccardSimilarity, SimilarityBackend};
pub use sql::{execution_match, ExecOutcome, SqlEnvironment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricOutcome {
    pub name: String,
    pub value: f64,
    pub support: usize,
}

impl MetricOutcome {
    pub fn new(name: impl Into<String>, value: f64, support: usize) -> Self {
        debug_assert!((0.0..=1.0).contains(&value), "metric value {value} outside [0, 1]");
        MetricOutcome {
            name: name.into(),
            value,
            support,
        }
    }
}
