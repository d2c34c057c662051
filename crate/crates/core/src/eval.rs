//! Multi-turn evaluation: sample a response per query, simulate the rest of
//! the conversation whenever it is a clarifying question, and score both
//! the first turn and the trajectory outcome.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clients::{ActionClassifier, UserSimulator};
use crate::conversation::{digest_bytes, Action, ConversationTurnState, Speaker};
use crate::error::{Error, Result};
use crate::metrics::aggregate::{aggregate_trajectory_metrics, ScoredTrajectory};
use crate::metrics::{action_metrics, ActionScores, Heuristic, MetricOutcome};
use crate::policy::Policy;
use crate::trainer::{derive_seed, roll_out_trajectory};

/// Largest tolerated fraction of examples excluded for backend failures.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskKind {
    TabularQa,
    ReadingComprehension,
    TextToSql,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalProtocol {
    pub task_kind: TaskKind,
    pub content_metric: String,
    #[serde(default)]
    pub iterate_goal_set: bool,
    #[serde(default = "default_cap")]
    pub clarify_cap: usize,
}

fn default_cap() -> usize {
    5
}

impl EvalProtocol {
    pub fn new(task_kind: TaskKind, content_metric: &str) -> Self {
        EvalProtocol {
            task_kind,
            content_metric: content_metric.to_string(),
            iterate_goal_set: task_kind == TaskKind::ReadingComprehension,
            clarify_cap: default_cap(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterate_goal_set && self.task_kind != TaskKind::ReadingComprehension {
            return Err(Error::Config(
                "goal-set iteration applies to reading-comprehension tasks only".into(),
            ));
        }
        if self.clarify_cap == 0 {
            return Err(Error::Config("clarify_cap must be at least 1".into()));
        }
        Ok(())
    }
}

/// One evaluated (query, goal) combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub example: usize,
    pub goal: String,
    pub sampled: String,
    pub sampled_action: Action,
    pub gold_action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn_score: Option<f64>,
    pub trajectory_score: f64,
    pub clarify_rounds: usize,
    pub cap_exceeded: bool,
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub example: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentScores {
    pub turn_level: MetricOutcome,
    pub trajectory_level: MetricOutcome,
    pub post_clarification: MetricOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_digest: String,
    pub seed: u64,
    pub policy_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_kind: TaskKind,
    pub content_metric: String,
    pub action: ActionScores,
    pub content: ContentScores,
    pub n_examples: usize,
    pub n_rows: usize,
    pub n_clarify_trajectories: usize,
    pub n_excluded: usize,
    /// False when more than [`MAX_EXCLUDED_FRACTION`] of examples were excluded.
    pub valid: bool,
    pub run_metadata: RunMetadata,
}

impl EvalReport {
    pub fn digest(&self) -> Result<String> {
        Ok(digest_bytes(&serde_json::to_vec(self)?))
    }

    /// Metric name and value pairs in a fixed order.
    pub fn metric_values(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("action_accuracy", self.action.accuracy),
            ("action_weighted_f1", self.action.weighted_f1),
            ("action_macro_f1", self.action.macro_f1),
            ("turn_level", self.content.turn_level.value),
            ("trajectory_level", self.content.trajectory_level.value),
            ("post_clarification", self.content.post_clarification.value),
        ]
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task: {:?}  metric: {}", self.task_kind, self.content_metric);
        for (k, v) in self.metric_values() {
            let _ = writeln!(s, "{k:<22} {v:.4}");
        }
        let _ = writeln!(
            s,
            "examples {}  rows {}  clarify trajectories {}  excluded {}{}",
            self.n_examples,
            self.n_rows,
            self.n_clarify_trajectories,
            self.n_excluded,
            if self.valid { "" } else { "  INVALID" }
        );
        let _ = writeln!(
            s,
            "config {}  seed {}  policy {}",
            self.run_metadata.config_digest, self.run_metadata.seed, self.run_metadata.policy_digest
        );
        s
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub rows: Vec<EvalRow>,
    pub exclusions: Vec<Exclusion>,
}

/// Drops every clarifying system turn and the user reply that follows it.
pub fn strip_clarification_turns(
    state: &ConversationTurnState,
    classifier: &dyn ActionClassifier,
) -> Result<ConversationTurnState> {
    let mut kept = Vec::with_capacity(state.history.len());
    let mut skip_reply = false;
    for (i, m) in state.history.iter().enumerate() {
        if skip_reply && m.speaker == Speaker::User && i + 1 < state.history.len() {
            skip_reply = false;
            continue;
        }
        skip_reply = false;
        if m.speaker == Speaker::System {
            let mut prefix = state.clone();
            prefix.history.truncate(i);
            if i + 2 < state.history.len() && classifier.classify(&prefix, &m.text)? == Action::Clarify {
                skip_reply = true;
                continue;
            }
        }
        kept.push(m.clone());
    }
    ConversationTurnState::new(
        state.task_info.clone(),
        kept,
        state.gold_response.clone(),
        state.trajectory_goal.clone(),
        state.gold_action,
        state.goal_set.clone(),
    )
}

fn state_seed(base: u64, state: &ConversationTurnState, goal: usize) -> u64 {
    let fp = state.fingerprint();
    let key = u64::from_str_radix(&fp[..16], 16).expect("hex fingerprint");
    derive_seed(base, &[key, goal as u64])
}

#[allow(clippy::too_many_arguments)]
fn evaluate_example(
    policy: &dyn Policy,
    index: usize,
    state: &ConversationTurnState,
    classifier: &dyn ActionClassifier,
    simulator: &dyn UserSimulator,
    heuristic: &dyn Heuristic,
    protocol: &EvalProtocol,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let goals: Vec<String> = if protocol.iterate_goal_set {
        state.goal_set.clone()
    } else {
        vec![state.trajectory_goal.clone()]
    };
    let base = if protocol.iterate_goal_set {
        strip_clarification_turns(state, classifier)?
    } else {
        state.clone()
    };
    let mut rows = Vec::with_capacity(goals.len());
    for (g, goal) in goals.iter().enumerate() {
        let s = if protocol.iterate_goal_set {
            base.with_goal(goal)?
        } else {
            base.clone()
        };
        let sseed = state_seed(seed, state, g);
        let sampled = policy.sample_response(&s, sseed)?;
        let action = classifier.classify(&s, &sampled)?;
        let traj = roll_out_trajectory(
            policy,
            &s,
            &sampled,
            classifier,
            simulator,
            protocol.clarify_cap,
            derive_seed(sseed, &[1]),
        )?;
        // a clarifying question is not an executable gold query
        let sql_question = protocol.task_kind == TaskKind::TextToSql && s.gold_action == Action::Clarify;
        let turn_score = if g == 0 && !sql_question {
            Some(heuristic.score(&s, &sampled, &s.gold_response)?)
        } else {
            None
        };
        let trajectory_score = if traj.cap_exceeded {
            0.0
        } else {
            heuristic.score(&s, &traj.outcome, goal)?
        };
        rows.push(EvalRow {
            example: index,
            goal: goal.clone(),
            sampled,
            sampled_action: action,
            gold_action: state.gold_action,
            turn_score,
            trajectory_score,
            clarify_rounds: traj.clarify_rounds,
            cap_exceeded: traj.cap_exceeded,
            outcome: traj.outcome,
        });
    }
    Ok(rows)
}

/// Evaluates `policy` on `testset`. Backend failures exclude the example;
/// any other error aborts.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    policy: &dyn Policy,
    testset: &[ConversationTurnState],
    classifier: &dyn ActionClassifier,
    simulator: &dyn UserSimulator,
    heuristic: &dyn Heuristic,
    protocol: &EvalProtocol,
    seed: u64,
    config_digest: &str,
) -> Result<EvalOutcome> {
    protocol.validate()?;
    if heuristic.id() != protocol.content_metric {
        return Err(Error::Config(format!(
            "protocol metric {} but heuristic {}",
            protocol.content_metric,
            heuristic.id()
        )));
    }
    if testset.is_empty() {
        return Err(Error::Precondition("empty test set".into()));
    }
    let digest_before = policy.parameter_digest();
    let results: Vec<Result<Vec<EvalRow>>> = testset
        .par_iter()
        .enumerate()
        .map(|(i, s)| evaluate_example(policy, i, s, classifier, simulator, heuristic, protocol, seed))
        .collect();
    let mut rows = Vec::new();
    let mut exclusions = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(r) => rows.extend(r),
            Err(e) if e.is_backend() => {
                log::warn!("excluding example {i}: {e}");
                exclusions.push(Exclusion {
                    example: i,
                    error: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    if policy.parameter_digest() != digest_before {
        return Err(Error::Contract("evaluation changed the policy parameters".into()));
    }
    if rows.is_empty() {
        return Err(Error::Precondition("every example was excluded".into()));
    }
    let firsts: Vec<&EvalRow> = rows.iter().filter(|r| r.turn_score.is_some()).collect();
    let predicted: Vec<Action> = firsts.iter().map(|r| r.sampled_action).collect();
    let gold: Vec<Action> = firsts.iter().map(|r| r.gold_action).collect();
    let scored: Vec<ScoredTrajectory> = rows
        .iter()
        .map(|r| ScoredTrajectory {
            turn_score: r.turn_score,
            trajectory_score: r.trajectory_score,
            had_clarify: r.clarify_rounds > 0,
        })
        .collect();
    let mut agg = aggregate_trajectory_metrics(&scored).into_iter();
    let content = ContentScores {
        turn_level: agg.next().expect("three aggregates"),
        trajectory_level: agg.next().expect("three aggregates"),
        post_clarification: agg.next().expect("three aggregates"),
    };
    let excluded_fraction = exclusions.len() as f64 / testset.len() as f64;
    let report = EvalReport {
        task_kind: protocol.task_kind,
        content_metric: protocol.content_metric.clone(),
        action: action_metrics(&predicted, &gold)?,
        n_clarify_trajectories: content.post_clarification.support,
        content,
        n_examples: testset.len(),
        n_rows: rows.len(),
        n_excluded: exclusions.len(),
        valid: excluded_fraction <= MAX_EXCLUDED_FRACTION,
        run_metadata: RunMetadata {
            config_digest: config_digest.to_string(),
            seed,
            policy_digest: digest_before,
        },
    };
    if !report.valid {
        log::warn!(
            "{} of {} examples excluded; run marked invalid",
            exclusions.len(),
            testset.len()
        );
    }
    Ok(EvalOutcome {
        report,
        rows,
        exclusions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    /// `(metric, value, value − first report's value)`.
    pub metrics: Vec<(String, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub task_kind: TaskKind,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let Some(first) = self.rows.first() else {
            return s;
        };
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
        let _ = write!(s, "{:<width$}", "run");
        for (name, _, _) in &first.metrics {
            let _ = write!(s, "  {name:>20}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<width$}", r.label);
            for (_, v, d) in &r.metrics {
                let cell = format!("{v:.4} ({d:+.4})");
                let _ = write!(s, "  {cell:>20}");
            }
            s.push('\n');
        }
        s
    }
}

/// Side-by-side metrics with deltas against the first report.
pub fn compare_runs(reports: &[(String, EvalReport)]) -> Result<Comparison> {
    let Some((_, first)) = reports.first() else {
        return Err(Error::Precondition("no reports to compare".into()));
    };
    if reports.iter().any(|(_, r)| r.task_kind != first.task_kind) {
        return Err(Error::Precondition("reports cover different task kinds".into()));
    }
    let base = first.metric_values();
    let rows = reports
        .iter()
        .map(|(label, r)| ComparisonRow {
            label: label.clone(),
            metrics: r
                .metric_values()
                .into_iter()
                .zip(&base)
                .map(|((k, v), (_, b))| (k.to_string(), v, v - b))
                .collect(),
        })
        .collect();
    Ok(Comparison {
        task_kind: first.task_kind,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{RuleClassifier, ScriptTable, ScriptedSimulator};
    use crate::conversation::DialogueMessage;
    use crate::metrics::heuristic::DropF1;

    /// Answers every state with its gold response.
    struct Oracle;

    impl Policy for Oracle {
        fn sample_response(&self, state: &ConversationTurnState, _seed: u64) -> Result<String> {
            Ok(state.gold_response.clone())
        }
        fn sequence_logprob(&self, state: &ConversationTurnState, response: &str) -> Result<f64> {
            Ok(if response == state.gold_response { 0.0 } else { f64::NEG_INFINITY })
        }
        fn parameter_digest(&self) -> String {
            "oracle".into()
        }
    }

    fn answer_state(q: &str, gold: &str) -> ConversationTurnState {
        ConversationTurnState::single_goal("[Table] x", vec![DialogueMessage::user(q).unwrap()], gold, gold, Action::Answer)
            .unwrap()
    }

    #[test]
    fn oracle_upper_bound() {
        let data = vec![answer_state("a?", "$909"), answer_state("b?", "$1,305")];
        let out = evaluate(
            &Oracle,
            &data,
            &RuleClassifier,
            &ScriptedSimulator::default(),
            &DropF1,
            &EvalProtocol::new(TaskKind::TabularQa, "drop_f1"),
            0,
            "cfg",
        )
        .unwrap();
        assert_eq!(out.report.action.accuracy, 1.0);
        assert_eq!(out.report.content.turn_level.value, 1.0);
        assert_eq!(out.report.content.post_clarification.support, 0);
        assert!(out.report.valid);
    }

    #[test]
    fn goal_set_iteration_emits_one_row_per_goal() {
        let state = ConversationTurnState::new(
            "Story text",
            vec![
                DialogueMessage::user("Where did she go?").unwrap(),
                DialogueMessage::system("Do you mean in the morning or the evening?").unwrap(),
                DialogueMessage::user("The morning.").unwrap(),
                DialogueMessage::system("The park.").unwrap(),
                DialogueMessage::user("What did he eat?").unwrap(),
            ],
            "Do you mean breakfast or dinner?",
            "eggs",
            Action::Clarify,
            vec!["eggs".into(), "soup".into()],
        )
        .unwrap();
        let stripped = strip_clarification_turns(&state, &RuleClassifier).unwrap();
        assert_eq!(stripped.history.len(), 3);
        assert_eq!(stripped.history[1].text, "The park.");
        let mut replies = ScriptTable::new();
        replies.insert("eggs", "Breakfast.");
        replies.insert("soup", "Dinner.");
        let out = evaluate(
            &Oracle,
            &[state],
            &RuleClassifier,
            &ScriptedSimulator::goal_grounded(replies),
            &DropF1,
            &EvalProtocol::new(TaskKind::ReadingComprehension, "drop_f1"),
            0,
            "cfg",
        );
        // the oracle keeps asking: every row is a cap-exceeded clarification
        let out = out.unwrap();
        assert_eq!(out.rows.len(), 2);
        assert_eq!(out.report.n_clarify_trajectories, 2);
        assert_eq!(out.rows.iter().filter(|r| r.turn_score.is_some()).count(), 1);
    }

    #[test]
    fn backend_failures_are_excluded() {
        let mut data: Vec<_> = (0..10).map(|i| answer_state(&format!("q{i}?"), "$909")).collect();
        data[3] = ConversationTurnState::single_goal(
            "[Table] x",
            vec![DialogueMessage::user("q?").unwrap()],
            "Which year?",
            "$909",
            Action::Clarify,
        )
        .unwrap();
        let out = evaluate(
            &Oracle,
            &data,
            &RuleClassifier,
            &ScriptedSimulator::default(),
            &DropF1,
            &EvalProtocol::new(TaskKind::TabularQa, "drop_f1"),
            0,
            "cfg",
        )
        .unwrap();
        assert_eq!(out.report.n_excluded, 1);
        assert!(!out.report.valid);
        assert_eq!(out.report.n_examples, 10);
    }

    #[test]
    fn comparison_deltas() {
        let data = vec![answer_state("a?", "$909")];
        let r = evaluate(
            &Oracle,
            &data,
            &RuleClassifier,
            &ScriptedSimulator::default(),
            &DropF1,
            &EvalProtocol::new(TaskKind::TabularQa, "drop_f1"),
            0,
            "cfg",
        )
        .unwrap()
        .report;
        let c = compare_runs(&[("a".into(), r.clone()), ("b".into(), r)]).unwrap();
        assert!(c.rows.iter().all(|row| row.metrics.iter().all(|m| m.2 == 0.0)));
        assert!(c.to_table().contains("trajectory_level"));
    }
}
