//! End-to-end runs of the toy policy on the synthetic task: offline pairs,
//! training in one of the ablation modes, then held-out evaluation.

use std::sync::Arc;

use super::synthetic::{split_tasks, synthetic_losing, synthetic_simulator, synthetic_states, synthetic_tasks};
use crate::clients::RuleClassifier;
use crate::conversation::{ConversationTurnState, PreferencePair};
use crate::dpo::{DpoConfig, OptimizerKind};
use crate::error::Result;
use crate::eval::{evaluate, EvalOutcome, EvalProtocol, TaskKind};
use crate::metrics::heuristic::DropF1;
use crate::policy::{CandidateSpace, PolicyDecoding, SyntheticCandidates, ToyPolicy};
use crate::prompts::{PromptRegistry, STANDARD};
use crate::trainer::{act_train, ActConfig, Oracles, TrainMode, TrainOptions, TrainOutcome};

/// SGD with a large step: every penalized response's logprob moves down
/// after each update, and a few hundred updates are enough to converge.
pub fn toy_dpo() -> DpoConfig {
    DpoConfig {
        beta: 0.5,
        learning_rate: 1.0,
        batch_size: 4,
        optimizer: OptimizerKind::Sgd,
        weight_decay: 0.0,
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub train_tasks: usize,
    pub validation_tasks: usize,
    pub test_tasks: usize,
    pub num_batches: usize,
    pub temperature: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            train_tasks: 40,
            validation_tasks: 10,
            test_tasks: 60,
            num_batches: 40,
            temperature: 1.0,
        }
    }
}

pub struct Experiment {
    pub train: Vec<PreferencePair>,
    pub validation: Vec<PreferencePair>,
    pub test: Vec<ConversationTurnState>,
    pub policy: ToyPolicy,
    cfg: ExperimentConfig,
    simulator: crate::clients::ScriptedSimulator,
}

pub struct ExperimentResult {
    pub training: TrainOutcome,
    pub evaluation: EvalOutcome,
    pub policy: ToyPolicy,
}

fn offline_pairs(states: &[ConversationTurnState]) -> Result<Vec<PreferencePair>> {
    states.iter().map(|s| PreferencePair::offline(s.clone(), synthetic_losing(s))).collect()
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let all = synthetic_tasks(cfg.train_tasks + cfg.validation_tasks + cfg.test_tasks, cfg.seed);
        let simulator = synthetic_simulator(&all);
        let (rest, test) = split_tasks(all, cfg.test_tasks, cfg.seed);
        let (train, validation) = split_tasks(rest, cfg.validation_tasks, cfg.seed.wrapping_add(1));
        let policy = ToyPolicy::new(
            Arc::new(SyntheticCandidates),
            Arc::new(PromptRegistry::builtin()),
            STANDARD,
            PolicyDecoding {
                temperature: cfg.temperature,
                ..PolicyDecoding::default()
            },
        )?;
        Ok(Experiment {
            train: offline_pairs(&synthetic_states(&train)?)?,
            validation: offline_pairs(&synthetic_states(&validation)?)?,
            test: synthetic_states(&test)?,
            policy,
            cfg,
            simulator,
        })
    }

    pub fn act_config(&self, mode: TrainMode) -> ActConfig {
        ActConfig::new(self.cfg.num_batches, crate::metrics::heuristic::DROP_F1, mode, self.cfg.seed)
    }

    pub fn train(&self, mode: TrainMode, options: &TrainOptions) -> Result<(ToyPolicy, TrainOutcome)> {
        let mut policy = self.policy.clone();
        let oracles = Oracles {
            classifier: &RuleClassifier,
            simulator: &self.simulator,
            heuristic: &DropF1,
        };
        let descriptor = SyntheticCandidates.descriptor();
        let out = act_train(
            &mut policy,
            &descriptor,
            &self.train,
            &self.validation,
            oracles,
            &self.act_config(mode),
            &toy_dpo(),
            options,
        )?;
        Ok((policy, out))
    }

    pub fn evaluate(&self, policy: &ToyPolicy) -> Result<EvalOutcome> {
        evaluate(
            policy,
            &self.test,
            &RuleClassifier,
            &self.simulator,
            &DropF1,
            &EvalProtocol::new(TaskKind::Synthetic, crate::metrics::heuristic::DROP_F1),
            self.cfg.seed,
            "experiment",
        )
    }

    pub fn run(&self, mode: TrainMode) -> Result<ExperimentResult> {
        let (policy, training) = self.train(mode, &TrainOptions::default())?;
        let evaluation = self.evaluate(&policy)?;
        Ok(ExperimentResult {
            training,
            evaluation,
            policy,
        })
    }
}
