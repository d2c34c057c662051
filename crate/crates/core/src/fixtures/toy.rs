//! Random DPO problems on the toy policy, for gradient checks and benches.

use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::synthetic::{synthetic_losing, synthetic_states, synthetic_tasks};
use crate::conversation::{Action, DialogueMessage, PairOrigin, PreferencePair, Provenance, Response, Speaker, Trajectory};
use crate::error::Result;
use crate::policy::{PolicyDecoding, ReferenceSnapshot, SyntheticCandidates, ToyPolicy, TrainablePolicy};
use crate::prompts::{PromptRegistry, STANDARD};
use crate::policy::candidates::{table_rows, YEAR_QUESTION};

pub struct ToyProblem {
    pub policy: ToyPolicy,
    pub reference: ReferenceSnapshot,
    pub batch: Vec<PreferencePair>,
    pub beta: f64,
}

/// Winning side of a clarification turn as a full exchange: the question,
/// the user's year, then the value for that year.
fn clarify_trajectory(pair: &PreferencePair) -> Result<Trajectory> {
    let state = &pair.state;
    let year = table_rows(&state.task_info)
        .into_iter()
        .find(|r| r.1 == state.trajectory_goal)
        .map(|r| r.0)
        .unwrap_or_default();
    let msg = |s, t: &str, p| DialogueMessage::with_provenance(s, t, p);
    Trajectory::new(
        vec![
            msg(Speaker::System, YEAR_QUESTION, Provenance::PolicySampled)?,
            msg(Speaker::User, &year, Provenance::SimulatedUser)?,
            msg(Speaker::System, &state.trajectory_goal, Provenance::PolicySampled)?,
        ],
        1,
        false,
    )
}

fn random_theta(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()
}

/// A random batch of 1 to 6 pairs (some with trajectory winners), random
/// policy and reference parameters, and β in [0.05, 2).
pub fn random_problem(seed: u64) -> Result<ToyProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tasks = synthetic_tasks(4, seed);
    let mut pool = Vec::new();
    for s in synthetic_states(&tasks)? {
        let mut pair = PreferencePair::offline(s.clone(), synthetic_losing(&s))?;
        if s.gold_action == Action::Clarify && rng.random_bool(0.5) {
            let mut t = clarify_trajectory(&pair)?;
            t.success = Some(true);
            pair.winning = Response::Trajectory(t);
            pair.origin = PairOrigin::OnpolicyWinReplaced;
        }
        pool.push(pair);
    }
    let n = rng.random_range(1..=6);
    let batch: Vec<PreferencePair> = (0..n).map(|_| pool.choose(&mut rng).expect("non-empty").clone()).collect();
    let base = ToyPolicy::new(
        Arc::new(SyntheticCandidates),
        Arc::new(PromptRegistry::builtin()),
        STANDARD,
        PolicyDecoding::default(),
    )?;
    let reference = base.clone().with_parameters(random_theta(&mut rng, base.dim()))?.snapshot();
    let policy = base.clone().with_parameters(random_theta(&mut rng, base.dim()))?;
    Ok(ToyProblem {
        policy,
        reference,
        batch,
        beta: rng.random_range(0.05..2.0),
    })
}
