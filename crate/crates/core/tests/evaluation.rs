//! Multi-turn evaluation on reading-comprehension states with goal sets.

use act_core::clients::RuleClassifier;
use act_core::eval::{evaluate, EvalOutcome, EvalProtocol, TaskKind};
use act_core::fixtures::goal_set::{goal_set_fixture, goal_set_policy, GoalSetFixture};
use act_core::metrics::heuristic::DropF1;
use act_core::policy::{Policy, ToyPolicy, TrainablePolicy};
use act_core::Action;
use rand::seq::SliceRandom;
use rand::SeedableRng;

fn policy(f: &GoalSetFixture) -> ToyPolicy {
    goal_set_policy(f).unwrap()
}

fn run(f: &GoalSetFixture, p: &ToyPolicy, states: &[act_core::ConversationTurnState], iterate: bool) -> EvalOutcome {
    let mut protocol = EvalProtocol::new(TaskKind::ReadingComprehension, "drop_f1");
    protocol.iterate_goal_set = iterate;
    evaluate(p, states, &RuleClassifier, &f.simulator, &DropF1, &protocol, 9, "cfg").unwrap()
}

#[test]
fn one_row_per_goal() {
    let f = goal_set_fixture().unwrap();
    let p = policy(&f);
    let out = run(&f, &p, &f.states, true);
    let expected: usize = f.states.iter().map(|s| s.goal_set.len()).sum();
    assert_eq!(out.rows.len(), expected);
    assert_eq!(out.report.n_rows, expected);
    assert!(out.exclusions.is_empty());
    for (i, s) in f.states.iter().enumerate() {
        let goals: Vec<&str> = out.rows.iter().filter(|r| r.example == i).map(|r| r.goal.as_str()).collect();
        let want: Vec<&str> = s.goal_set.iter().map(String::as_str).collect();
        assert_eq!(goals, want, "example {i}");
    }
    // the first turn is scored once per query
    assert_eq!(out.rows.iter().filter(|r| r.turn_score.is_some()).count(), f.states.len());
    assert_eq!(out.report.content.turn_level.support, f.states.len());

    let single = run(&f, &p, &f.states, false);
    assert_eq!(single.rows.len(), f.states.len());
}

#[test]
fn post_clarification_covers_clarifying_trajectories_only() {
    let f = goal_set_fixture().unwrap();
    let out = run(&f, &policy(&f), &f.states, true);
    let clarifying: Vec<f64> = out.rows.iter().filter(|r| r.clarify_rounds > 0).map(|r| r.trajectory_score).collect();
    assert!(!clarifying.is_empty() && clarifying.len() < out.rows.len());
    let post = &out.report.content.post_clarification;
    assert_eq!(post.support, clarifying.len());
    assert_eq!(out.report.n_clarify_trajectories, clarifying.len());
    let mean = clarifying.iter().sum::<f64>() / clarifying.len() as f64;
    assert!((post.value - mean).abs() < 1e-12);
    let all = out.rows.iter().map(|r| r.trajectory_score).sum::<f64>() / out.rows.len() as f64;
    assert!((out.report.content.trajectory_level.value - all).abs() < 1e-12);
    // after a clarification the reply names the goal and the policy can find it
    assert!(post.value > 0.8, "{}", post.value);
}

#[test]
fn cap_exceeded_trajectories_score_zero() {
    let f = goal_set_fixture().unwrap();
    let base = policy(&f);
    let mut theta = base.parameters().to_vec();
    theta[base.action_offset(Action::Clarify)] = 50.0;
    let asker = base.with_parameters(theta).unwrap();
    let out = run(&f, &asker, &f.states, true);
    assert!(out.rows.iter().all(|r| r.cap_exceeded && r.trajectory_score == 0.0));
    assert_eq!(out.report.action.accuracy, 0.5);
}

#[test]
fn evaluation_leaves_the_policy_untouched() {
    let f = goal_set_fixture().unwrap();
    let p = policy(&f);
    let before = p.parameter_digest();
    let out = run(&f, &p, &f.states, true);
    assert_eq!(p.parameter_digest(), before);
    assert_eq!(out.report.run_metadata.policy_digest, before);
}

#[test]
fn reports_are_reproducible_and_order_free() {
    let f = goal_set_fixture().unwrap();
    let p = policy(&f);
    let a = run(&f, &p, &f.states, true).report;
    let b = run(&f, &p, &f.states, true).report;
    assert_eq!(a.digest().unwrap(), b.digest().unwrap());
    let mut shuffled = f.states.clone();
    shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
    let c = run(&f, &p, &shuffled, true).report;
    assert_eq!(a.metric_values(), c.metric_values());
    assert_eq!(a.digest().unwrap(), c.digest().unwrap());
}
