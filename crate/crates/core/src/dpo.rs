//! Direct preference optimization: implicit rewards, the pairwise loss, its
//! gradient by two independent routes, reward margins and the optimizer step.
//!
//! For a pair with winning `y_w` and losing `y_l`:
//!
//! ```text
//! R̂(y)  = β (log π(y|p) − log π_ref(y|p))
//! m     = R̂(y_w) − R̂(y_l)
//! loss  = mean softplus(−m)
//! ∇loss = −β mean[σ(R̂(y_l) − R̂(y_w)) (∇log π(y_w|p) − ∇log π(y_l|p))]
//! ```
//!
//! The batch reduction is the mean.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conversation::PreferencePair;
use crate::error::{Error, Result};
use crate::policy::autodiff::{sigmoid, softplus_f64, Dual, Scalar};
use crate::policy::{Policy, TrainablePolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoConfig {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta() -> f64 {
    0.01
}
fn default_lr() -> f64 {
    5e-7
}
fn default_batch() -> usize {
    4
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::AdamW
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta: default_beta(),
            learning_rate: default_lr(),
            batch_size: default_batch(),
            optimizer: default_optimizer(),
            weight_decay: 0.0,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// The four log-probabilities entering one pair's loss term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub logp_w_policy: f64,
    pub logp_w_ref: f64,
    pub logp_l_policy: f64,
    pub logp_l_ref: f64,
}

impl ScoredPair {
    pub fn reward_w(&self, beta: f64) -> f64 {
        beta * (self.logp_w_policy - self.logp_w_ref)
    }

    pub fn reward_l(&self, beta: f64) -> f64 {
        beta * (self.logp_l_policy - self.logp_l_ref)
    }

    pub fn margin(&self, beta: f64) -> Result<f64> {
        let m = self.reward_w(beta) - self.reward_l(beta);
        if m.is_nan() {
            return Err(Error::Numeric(format!("undefined reward margin for {self:?}")));
        }
        Ok(m)
    }

    /// `σ(R̂_l − R̂_w)`, the factor multiplying this pair's gradient.
    pub fn gradient_weight(&self, beta: f64) -> Result<f64> {
        Ok(sigmoid(-self.margin(beta)?))
    }
}

pub fn implicit_reward(logp_policy: f64, logp_ref: f64, beta: f64) -> Result<f64> {
    if !logp_policy.is_finite() || !logp_ref.is_finite() || !beta.is_finite() {
        return Err(Error::Numeric(format!(
            "implicit reward of non-finite input ({logp_policy}, {logp_ref}, {beta})"
        )));
    }
    Ok(beta * (logp_policy - logp_ref))
}

pub fn dpo_loss(batch: &[ScoredPair], beta: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Precondition("DPO loss of an empty batch".into()));
    }
    let mut total = 0.0;
    for p in batch {
        total += softplus_f64(-p.margin(beta)?);
    }
    Ok(total / batch.len() as f64)
}

/// Scores a pair under the trained and the reference policy.
pub fn score_pair(pair: &PreferencePair, policy: &dyn Policy, reference: &dyn Policy) -> Result<ScoredPair> {
    Ok(ScoredPair {
        logp_w_policy: policy.response_logprob(&pair.state, &pair.winning)?,
        logp_w_ref: reference.response_logprob(&pair.state, &pair.winning)?,
        logp_l_policy: policy.response_logprob(&pair.state, &pair.losing)?,
        logp_l_ref: reference.response_logprob(&pair.state, &pair.losing)?,
    })
}

pub fn score_batch(batch: &[PreferencePair], policy: &dyn Policy, reference: &dyn Policy) -> Result<Vec<ScoredPair>> {
    batch
        .par_iter()
        .map(|p| score_pair(p, policy, reference))
        .collect()
}

/// Loss of `batch` under the current parameters of `policy`.
pub fn batch_loss(batch: &[PreferencePair], policy: &dyn Policy, reference: &dyn Policy, beta: f64) -> Result<f64> {
    dpo_loss(&score_batch(batch, policy, reference)?, beta)
}

/// Mean `R̂(y_w) − R̂(y_l)` over the batch.
pub fn reward_margin(batch: &[PreferencePair], policy: &dyn Policy, reference: &dyn Policy, beta: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Precondition("reward margin of an empty batch".into()));
    }
    let scored = score_batch(batch, policy, reference)?;
    let mut total = 0.0;
    for s in &scored {
        total += s.margin(beta)?;
    }
    Ok(total / scored.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoGradient {
    pub loss: f64,
    pub margin: f64,
    /// `σ(R̂_l − R̂_w)` per pair, in batch order.
    pub weights: Vec<f64>,
    pub grad: Vec<f64>,
}

impl DpoGradient {
    pub fn weight_mean(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.weights.len() as f64
    }
}

/// Closed-form gradient of the batch loss.
pub fn dpo_gradient(
    batch: &[PreferencePair],
    policy: &dyn TrainablePolicy,
    reference: &dyn Policy,
    beta: f64,
) -> Result<DpoGradient> {
    if batch.is_empty() {
        return Err(Error::Precondition("DPO gradient of an empty batch".into()));
    }
    let dim = policy.parameters().len();
    let per_pair: Vec<(ScoredPair, Vec<f64>, Vec<f64>)> = batch
        .par_iter()
        .map(|p| {
            let (lw, gw) = policy.response_logprob_grad(&p.state, &p.winning)?;
            let (ll, gl) = policy.response_logprob_grad(&p.state, &p.losing)?;
            let scored = ScoredPair {
                logp_w_policy: lw,
                logp_w_ref: reference.response_logprob(&p.state, &p.winning)?,
                logp_l_policy: ll,
                logp_l_ref: reference.response_logprob(&p.state, &p.losing)?,
            };
            Ok((scored, gw, gl))
        })
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut grad = vec![0.0; dim];
    let mut weights = Vec::with_capacity(batch.len());
    let mut loss = 0.0;
    let mut margin = 0.0;
    for (s, gw, gl) in &per_pair {
        let m = s.margin(beta)?;
        let w = sigmoid(-m);
        loss += softplus_f64(-m);
        margin += m;
        weights.push(w);
        for ((g, a), b) in grad.iter_mut().zip(gw).zip(gl) {
            let d = a - b;
            if d != 0.0 {
                *g -= beta * w * d / n;
            }
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite DPO gradient".into()));
    }
    Ok(DpoGradient {
        loss: loss / n,
        margin: margin / n,
        weights,
        grad,
    })
}

/// The batch loss evaluated with dual-number parameters.
pub fn dpo_loss_dual(
    batch: &[PreferencePair],
    policy: &dyn TrainablePolicy,
    reference: &dyn Policy,
    beta: f64,
) -> Result<Dual> {
    if batch.is_empty() {
        return Err(Error::Precondition("DPO loss of an empty batch".into()));
    }
    let theta = Dual::variables(policy.parameters());
    let terms: Vec<Dual> = batch
        .par_iter()
        .map(|p| {
            let lw = policy.response_logprob_dual(&theta, &p.state, &p.winning)?;
            let ll = policy.response_logprob_dual(&theta, &p.state, &p.losing)?;
            let rw = reference.response_logprob(&p.state, &p.winning)?;
            let rl = reference.response_logprob(&p.state, &p.losing)?;
            let m = (lw - Dual::constant(rw) - (ll - Dual::constant(rl))).scale(beta);
            Ok((-m).softplus())
        })
        .collect::<Result<_>>()?;
    let total = terms.into_iter().fold(Dual::constant(0.0), |a, b| a + b);
    Ok(total.scale(1.0 / batch.len() as f64))
}

/// Gradient obtained by forward-mode differentiation of the loss.
pub fn dpo_gradient_autodiff(
    batch: &[PreferencePair],
    policy: &dyn TrainablePolicy,
    reference: &dyn Policy,
    beta: f64,
) -> Result<Vec<f64>> {
    let loss = dpo_loss_dual(batch, policy, reference, beta)?;
    Ok(loss.gradient(policy.parameters().len()))
}

/// First-order optimizer state carried across updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(dim: usize) -> Self {
        OptimizerState {
            step: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }
}

/// One optimizer step on θ. The reference snapshot is a separate copy and is
/// never touched here.
pub fn apply_update(
    policy: &mut dyn TrainablePolicy,
    grad: &[f64],
    cfg: &DpoConfig,
    state: &mut OptimizerState,
) -> Result<()> {
    let theta = policy.parameters();
    if grad.len() != theta.len() || state.m.len() != theta.len() {
        return Err(Error::Parameter(format!(
            "gradient has {} entries, parameters {}, optimizer state {}",
            grad.len(),
            theta.len(),
            state.m.len()
        )));
    }
    let lr = cfg.learning_rate;
    state.step += 1;
    let next: Vec<f64> = match cfg.optimizer {
        OptimizerKind::Sgd => theta.iter().zip(grad).map(|(t, g)| t - lr * g).collect(),
        OptimizerKind::AdamW => {
            let t = state.step as i32;
            let c1 = 1.0 - OptimizerState::BETA1.powi(t);
            let c2 = 1.0 - OptimizerState::BETA2.powi(t);
            theta
                .iter()
                .zip(grad)
                .zip(state.m.iter_mut().zip(state.v.iter_mut()))
                .map(|((th, g), (m, v))| {
                    *m = OptimizerState::BETA1 * *m + (1.0 - OptimizerState::BETA1) * g;
                    *v = OptimizerState::BETA2 * *v + (1.0 - OptimizerState::BETA2) * g * g;
                    let decayed = if cfg.weight_decay > 0.0 {
                        th - lr * cfg.weight_decay * th
                    } else {
                        *th
                    };
                    if *m == 0.0 {
                        decayed
                    } else {
                        decayed - lr * (*m / c1) / ((*v / c2).sqrt() + OptimizerState::EPS)
                    }
                })
                .collect()
        }
    };
    policy.set_parameters(next)
}

/// One line of the per-step metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub margin: f64,
    pub weight_mean: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(w: f64, wr: f64, l: f64, lr: f64) -> ScoredPair {
        ScoredPair {
            logp_w_policy: w,
            logp_w_ref: wr,
            logp_l_policy: l,
            logp_l_ref: lr,
        }
    }

    #[test]
    fn loss_at_zero_margin_is_ln2() {
        let l = dpo_loss(&[pair(-1.0, -1.0, -2.0, -2.0)], 0.01).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn loss_asymptotics() {
        assert!(dpo_loss(&[pair(0.0, -1e6, -1e6, 0.0)], 1.0).unwrap() < 1e-300);
        let big = dpo_loss(&[pair(-1e3, 0.0, 0.0, -1e3)], 1.0).unwrap();
        assert!((big - 2e3).abs() < 1e-9);
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(matches!(dpo_loss(&[], 0.1), Err(Error::Precondition(_))));
    }

    #[test]
    fn implicit_reward_examples() {
        assert_eq!(implicit_reward(-3.0, -3.0, 7.0).unwrap(), 0.0);
        assert!((implicit_reward(-1.0, -2.0, 0.01).unwrap() - 0.01).abs() < 1e-18);
        assert!(implicit_reward(f64::NEG_INFINITY, -1.0, 0.1).is_err());
    }

    #[test]
    fn weights_at_zero_and_saturated_margins() {
        assert_eq!(pair(-1.0, -1.0, -1.0, -1.0).gradient_weight(0.5).unwrap(), 0.5);
        assert!(pair(0.0, -20.0, 0.0, 0.0).gradient_weight(1.0).unwrap() < 1e-8);
    }

    #[test]
    fn config_validation() {
        assert!(DpoConfig::default().validate().is_ok());
        let bad = DpoConfig {
            beta: 0.0,
            ..DpoConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn loss_decreases_in_winning_logprob(w in -20.0f64..-0.1, d in 0.01f64..5.0, wr in -20.0f64..0.0, l in -20.0f64..0.0, lr in -20.0f64..0.0, beta in 0.01f64..2.0) {
            let a = dpo_loss(&[pair(w - d, wr, l, lr)], beta).unwrap();
            let b = dpo_loss(&[pair(w, wr, l, lr)], beta).unwrap();
            proptest::prop_assert!(b < a);
            proptest::prop_assert!(b >= 0.0);
        }

        #[test]
        fn margin_linear_in_beta(w in -20.0f64..0.0, wr in -20.0f64..0.0, l in -20.0f64..0.0, lr in -20.0f64..0.0, beta in 0.01f64..2.0, c in 0.1f64..10.0) {
            let p = pair(w, wr, l, lr);
            let a = p.margin(beta * c).unwrap();
            let b = c * p.margin(beta).unwrap();
            proptest::prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }
}
