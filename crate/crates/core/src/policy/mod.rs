//! Conversational policies π_θ: sampling, sequence and trajectory scoring,
//! gradients, and frozen reference snapshots.
//!
//! A policy receives the full [`ConversationTurnState`] rather than an
//! already rendered prompt; the prompt is the deterministic rendering of the
//! state through the policy's template and is what sequence-length limits
//! are enforced on.

pub mod autodiff;
pub mod candidates;
pub mod checkpoint;
pub mod toy;

use std::sync::Arc;

use crate::conversation::{extend_state, ConversationTurnState, Response, Speaker, Trajectory};
use crate::error::Result;

pub use autodiff::{Dual, Scalar};
pub use candidates::{Candidate, CandidateSpace, CorpusCandidates, FixedCandidates, SyntheticCandidates};
pub use checkpoint::Checkpoint;
pub use toy::{PolicyDecoding, ToyPolicy};

/// Default sequence-length limit in whitespace units.
pub const DEFAULT_MAX_SEQUENCE_UNITS: usize = 1280;

pub trait Policy: Send + Sync {
    /// One decoded response; identical (parameters, state, seed) give identical output.
    fn sample_response(&self, state: &ConversationTurnState, seed: u64) -> Result<String>;

    /// `log π(response | state)`, always ≤ 0.
    fn sequence_logprob(&self, state: &ConversationTurnState, response: &str) -> Result<f64>;

    /// Digest of the parameters, for provenance and immutability checks.
    fn parameter_digest(&self) -> String;

    /// Sum of the system turns' scores, each conditioned on the state
    /// extended by every earlier trajectory message. User turns are masked.
    fn trajectory_logprob(&self, state: &ConversationTurnState, traj: &Trajectory) -> Result<f64> {
        let mut total = 0.0;
        for (ctx, text) in system_turn_contexts(state, traj)? {
            total += self.sequence_logprob(&ctx, text)?;
        }
        Ok(total)
    }

    fn response_logprob(&self, state: &ConversationTurnState, response: &Response) -> Result<f64> {
        match response {
            Response::Text(t) => self.sequence_logprob(state, t),
            Response::Trajectory(t) => self.trajectory_logprob(state, t),
        }
    }
}

/// Each system message of `traj` paired with the state it responds to.
pub fn system_turn_contexts<'a>(
    state: &ConversationTurnState,
    traj: &'a Trajectory,
) -> Result<Vec<(ConversationTurnState, &'a str)>> {
    let mut out = Vec::new();
    for (i, m) in traj.messages.iter().enumerate() {
        if m.speaker == Speaker::System {
            out.push((extend_state(state, &traj.messages[..i])?, m.text.as_str()));
        }
    }
    Ok(out)
}

/// A policy whose parameters are a flat real vector.
pub trait TrainablePolicy: Policy {
    fn parameters(&self) -> &[f64];

    /// Replaces θ; the length must match.
    fn set_parameters(&mut self, theta: Vec<f64>) -> Result<()>;

    /// `log π(response | state)` and its closed-form gradient.
    fn sequence_logprob_grad(
        &self,
        state: &ConversationTurnState,
        response: &str,
    ) -> Result<(f64, Vec<f64>)>;

    /// `log π(response | state)` evaluated at dual-number parameters.
    fn sequence_logprob_dual(
        &self,
        theta: &[Dual],
        state: &ConversationTurnState,
        response: &str,
    ) -> Result<Dual>;

    /// A frozen copy of the current policy.
    fn snapshot(&self) -> ReferenceSnapshot;

    fn response_logprob_grad(
        &self,
        state: &ConversationTurnState,
        response: &Response,
    ) -> Result<(f64, Vec<f64>)> {
        match response {
            Response::Text(t) => self.sequence_logprob_grad(state, t),
            Response::Trajectory(traj) => {
                let mut total = 0.0;
                let mut grad = vec![0.0; self.parameters().len()];
                for (ctx, text) in system_turn_contexts(state, traj)? {
                    let (lp, g) = self.sequence_logprob_grad(&ctx, text)?;
                    total += lp;
                    grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                Ok((total, grad))
            }
        }
    }

    fn response_logprob_dual(
        &self,
        theta: &[Dual],
        state: &ConversationTurnState,
        response: &Response,
    ) -> Result<Dual> {
        match response {
            Response::Text(t) => self.sequence_logprob_dual(theta, state, t),
            Response::Trajectory(traj) => {
                let mut total = Dual::constant(0.0);
                for (ctx, text) in system_turn_contexts(state, traj)? {
                    total = total + self.sequence_logprob_dual(theta, &ctx, text)?;
                }
                Ok(total)
            }
        }
    }
}

/// Frozen π_ref. Cloning shares the same underlying copy.
#[derive(Clone)]
pub struct ReferenceSnapshot(Arc<dyn Policy>);

impl ReferenceSnapshot {
    pub fn new(policy: Arc<dyn Policy>) -> Self {
        ReferenceSnapshot(policy)
    }
}

impl Policy for ReferenceSnapshot {
    fn sample_response(&self, state: &ConversationTurnState, seed: u64) -> Result<String> {
        self.0.sample_response(state, seed)
    }
    fn sequence_logprob(&self, state: &ConversationTurnState, response: &str) -> Result<f64> {
        self.0.sequence_logprob(state, response)
    }
    fn parameter_digest(&self) -> String {
        self.0.parameter_digest()
    }
    fn trajectory_logprob(&self, state: &ConversationTurnState, traj: &Trajectory) -> Result<f64> {
        self.0.trajectory_logprob(state, traj)
    }
}
