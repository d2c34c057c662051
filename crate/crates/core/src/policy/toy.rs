//! A log-linear policy over a finite candidate set.
//!
//! `logit(c | s) = θ_act[a(c)] · φ(s) + θ_cand · ψ(c, s)` and
//! `π(c | s) = softmax(logit)`. θ is laid out as `[θ_act[CLARIFY] (F),
//! θ_act[ANSWER] (F), θ_cand (G)]`. Infinite parameters are allowed; a zero
//! feature never multiplies a parameter, so `-inf` entries pin a candidate's
//! probability to zero without producing NaNs.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::autodiff::{log_sum_exp, Dual, Scalar};
use super::candidates::{Candidate, CandidateSpace};
use super::{Policy, ReferenceSnapshot, TrainablePolicy, DEFAULT_MAX_SEQUENCE_UNITS};
use crate::conversation::{digest_bytes, Action, ConversationTurnState};
use crate::error::{Error, Result};
use crate::prompts::{count_units, render_prompt, PromptRegistry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyDecoding {
    /// Softmax temperature for sampling; 0 selects the most likely candidate.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_units")]
    pub max_sequence_units: usize,
}

fn default_temperature() -> f64 {
    1.0
}

fn default_max_units() -> usize {
    DEFAULT_MAX_SEQUENCE_UNITS
}

impl PolicyDecoding {
    pub fn validate(&self) -> Result<()> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::Config("policy temperature must be finite and non-negative".into()));
        }
        if self.max_sequence_units == 0 {
            return Err(Error::Config("max_sequence_units must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for PolicyDecoding {
    fn default() -> Self {
        PolicyDecoding {
            temperature: default_temperature(),
            max_sequence_units: default_max_units(),
        }
    }
}

#[derive(Clone)]
pub struct ToyPolicy {
    theta: Arc<Vec<f64>>,
    space: Arc<dyn CandidateSpace>,
    registry: Arc<PromptRegistry>,
    template_id: String,
    pub decoding: PolicyDecoding,
}

impl ToyPolicy {
    /// All-zero parameters, i.e. uniform over each state's candidates.
    pub fn new(
        space: Arc<dyn CandidateSpace>,
        registry: Arc<PromptRegistry>,
        template_id: &str,
        decoding: PolicyDecoding,
    ) -> Result<Self> {
        registry.template(template_id)?;
        decoding.validate()?;
        let dim = 2 * space.state_dim() + space.candidate_dim();
        Ok(ToyPolicy {
            theta: Arc::new(vec![0.0; dim]),
            space,
            registry,
            template_id: template_id.to_string(),
            decoding,
        })
    }

    pub fn with_parameters(mut self, theta: Vec<f64>) -> Result<Self> {
        self.set_parameters(theta)?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn space(&self) -> &Arc<dyn CandidateSpace> {
        &self.space
    }

    /// Offset of the action block for `a`.
    pub fn action_offset(&self, a: Action) -> usize {
        a.index() * self.space.state_dim()
    }

    pub fn candidate_offset(&self) -> usize {
        2 * self.space.state_dim()
    }

    pub fn prompt(&self, state: &ConversationTurnState) -> Result<String> {
        render_prompt(&self.registry, state, &self.template_id)
    }

    fn check_length(&self, state: &ConversationTurnState, response: &str) -> Result<()> {
        let units = count_units(&self.prompt(state)?) + count_units(response);
        let limit = self.decoding.max_sequence_units;
        if units > limit {
            return Err(Error::SequenceLength { units, limit });
        }
        Ok(())
    }

    fn check_features(&self, phi: &[f64], cands: &[Candidate]) -> Result<()> {
        if phi.len() != self.space.state_dim()
            || cands.iter().any(|c| c.features.len() != self.space.candidate_dim())
        {
            return Err(Error::Scoring("candidate space returned features of the wrong size".into()));
        }
        Ok(())
    }

    /// Full feature vector of a candidate in parameter coordinates.
    fn feature_vector(&self, phi: &[f64], cand: &Candidate) -> Vec<f64> {
        let mut f = vec![0.0; self.dim()];
        let a = self.action_offset(cand.action);
        f[a..a + phi.len()].copy_from_slice(phi);
        let o = self.candidate_offset();
        f[o..o + cand.features.len()].copy_from_slice(&cand.features);
        f
    }

    fn logits<S: Scalar>(&self, theta: &[S], state: &ConversationTurnState) -> Result<(Vec<Candidate>, Vec<S>)> {
        if theta.len() != self.dim() {
            return Err(Error::Parameter(format!(
                "expected {} parameters, got {}",
                self.dim(),
                theta.len()
            )));
        }
        let phi = self.space.state_features(state);
        let cands = self.space.candidates(state)?;
        self.check_features(&phi, &cands)?;
        let logits = cands
            .iter()
            .map(|c| {
                let f = self.feature_vector(&phi, c);
                let mut acc = S::constant(0.0);
                for (t, x) in theta.iter().zip(&f) {
                    if *x != 0.0 {
                        acc = acc + t.scale(*x);
                    }
                }
                acc
            })
            .collect();
        Ok((cands, logits))
    }

    fn logprob_generic<S: Scalar>(&self, theta: &[S], state: &ConversationTurnState, response: &str) -> Result<S> {
        self.check_length(state, response)?;
        let (cands, logits) = self.logits(theta, state)?;
        let idx = cands.iter().position(|c| c.text == response).ok_or_else(|| {
            Error::Scoring(format!("response {response:?} is not among the policy's candidates"))
        })?;
        let z = log_sum_exp(&logits)
            .ok_or_else(|| Error::Scoring("every candidate has probability zero".into()))?;
        Ok(logits[idx].clone() - z)
    }

    /// Candidates with their probabilities at temperature 1.
    pub fn distribution(&self, state: &ConversationTurnState) -> Result<Vec<(Candidate, f64)>> {
        let (cands, logits) = self.logits(&self.theta, state)?;
        let z = log_sum_exp(&logits)
            .ok_or_else(|| Error::Scoring("every candidate has probability zero".into()))?;
        Ok(cands
            .into_iter()
            .zip(logits)
            .map(|(c, l)| (c, (l - z).exp()))
            .collect())
    }
}

impl Policy for ToyPolicy {
    fn sample_response(&self, state: &ConversationTurnState, seed: u64) -> Result<String> {
        let units = count_units(&self.prompt(state)?);
        if units > self.decoding.max_sequence_units {
            return Err(Error::SequenceLength {
                units,
                limit: self.decoding.max_sequence_units,
            });
        }
        let (cands, logits) = self.logits(&self.theta, state)?;
        let t = self.decoding.temperature;
        let best = logits
            .iter()
            .enumerate()
            .fold(0, |b, (i, l)| if *l > logits[b] { i } else { b });
        if !logits[best].is_finite() {
            return Err(Error::Scoring("every candidate has probability zero".into()));
        }
        let pick = if t == 0.0 {
            best
        } else {
            let scaled: Vec<f64> = logits.iter().map(|l| (l - logits[best]) / t).collect();
            let weights: Vec<f64> = scaled.iter().map(|s| s.exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut r = ChaCha8Rng::seed_from_u64(seed).random::<f64>() * total;
            let mut pick = best;
            for (i, w) in weights.iter().enumerate() {
                if *w == 0.0 {
                    continue;
                }
                if r < *w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        };
        Ok(cands[pick].text.clone())
    }

    fn sequence_logprob(&self, state: &ConversationTurnState, response: &str) -> Result<f64> {
        self.logprob_generic(&self.theta, state, response)
    }

    fn parameter_digest(&self) -> String {
        let mut bytes: Vec<u8> = self.space.descriptor().into_bytes();
        for t in self.theta.iter() {
            bytes.extend_from_slice(&t.to_le_bytes());
        }
        digest_bytes(&bytes)
    }
}

impl TrainablePolicy for ToyPolicy {
    fn parameters(&self) -> &[f64] {
        &self.theta
    }

    fn set_parameters(&mut self, theta: Vec<f64>) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::Parameter(format!(
                "expected {} parameters, got {}",
                self.dim(),
                theta.len()
            )));
        }
        if theta.iter().any(|t| t.is_nan()) {
            return Err(Error::Numeric("parameters contain NaN".into()));
        }
        self.theta = Arc::new(theta);
        Ok(())
    }

    /// `∇ log π(y | s) = f(y) − Σ_c π(c | s) f(c)` with `f` the candidate's
    /// feature vector in parameter coordinates.
    fn sequence_logprob_grad(&self, state: &ConversationTurnState, response: &str) -> Result<(f64, Vec<f64>)> {
        let lp = self.sequence_logprob(state, response)?;
        let phi = self.space.state_features(state);
        let dist = self.distribution(state)?;
        let mut grad = vec![0.0; self.dim()];
        for (c, p) in &dist {
            let f = self.feature_vector(&phi, c);
            let own = c.text == response;
            for (g, x) in grad.iter_mut().zip(f) {
                if x != 0.0 {
                    *g += if own { x } else { 0.0 } - p * x;
                }
            }
        }
        Ok((lp, grad))
    }

    fn sequence_logprob_dual(&self, theta: &[Dual], state: &ConversationTurnState, response: &str) -> Result<Dual> {
        self.logprob_generic(theta, state, response)
    }

    fn snapshot(&self) -> ReferenceSnapshot {
        ReferenceSnapshot::new(Arc::new(self.clone()))
    }
}
