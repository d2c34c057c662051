//! Turn-level, trajectory-level and post-clarification aggregates.

use serde::{Deserialize, Serialize};

use super::MetricOutcome;

pub const TURN_LEVEL: &str = "turn_level";
pub const TRAJECTORY_LEVEL: &str = "trajectory_level";
pub const POST_CLARIFICATION: &str = "post_clarification";

/// One evaluated trajectory. `turn_score` is `None` when the row's prompt
/// was already scored at turn level by another row (goal-set iteration).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrajectory {
    pub turn_score: Option<f64>,
    pub trajectory_score: f64,
    pub had_clarify: bool,
}

/// Mean computed over sorted values so the result does not depend on input order.
pub fn order_free_mean(values: impl IntoIterator<Item = f64>) -> MetricOutcome {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(f64::total_cmp);
    let support = v.len();
    let value = if support == 0 {
        0.0
    } else {
        v.iter().sum::<f64>() / support as f64
    };
    MetricOutcome::new("", value, support)
}

fn named(name: &str, mut m: MetricOutcome) -> MetricOutcome {
    m.name = name.to_string();
    m
}

/// `[turn_level, trajectory_level, post_clarification]`. An empty subset
/// yields value 0 with support 0.
pub fn aggregate_trajectory_metrics(rows: &[ScoredTrajectory]) -> Vec<MetricOutcome> {
    vec![
        named(TURN_LEVEL, order_free_mean(rows.iter().filter_map(|r| r.turn_score))),
        named(TRAJECTORY_LEVEL, order_free_mean(rows.iter().map(|r| r.trajectory_score))),
        named(
            POST_CLARIFICATION,
            order_free_mean(rows.iter().filter(|r| r.had_clarify).map(|r| r.trajectory_score)),
        ),
    ]
}
