//! Content heuristics H, addressed by id, used both to gate trajectory
//! reassignment during training and as evaluation content metrics.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::drop::drop_f1;
use super::similarity::SimilarityBackend;
use super::sql::{database_id_from_task_info, execution_match, SqlEnvironment};
use crate::conversation::ConversationTurnState;
use crate::error::{Error, Result};

pub const DROP_F1: &str = "drop_f1";
pub const SIMILARITY: &str = "similarity";
pub const EXECUTION_MATCH: &str = "execution_match";

pub trait Heuristic: Send + Sync {
    fn id(&self) -> &str;

    /// Score of `prediction` against `gold` in `[0, 1]`.
    fn score(&self, state: &ConversationTurnState, prediction: &str, gold: &str) -> Result<f64>;
}

pub struct DropF1;

impl Heuristic for DropF1 {
    fn id(&self) -> &str {
        DROP_F1
    }

    fn score(&self, _state: &ConversationTurnState, prediction: &str, gold: &str) -> Result<f64> {
        Ok(drop_f1(prediction, gold))
    }
}

pub struct Similarity(pub Arc<dyn SimilarityBackend>);

impl Heuristic for Similarity {
    fn id(&self) -> &str {
        SIMILARITY
    }

    fn score(&self, _state: &ConversationTurnState, prediction: &str, gold: &str) -> Result<f64> {
        self.0.similarity(prediction, gold)
    }
}

/// Execution match on the database named by the state's grounding text.
pub struct ExecutionMatch {
    pub environments: BTreeMap<String, SqlEnvironment>,
}

impl ExecutionMatch {
    pub fn environment(&self, state: &ConversationTurnState) -> Result<&SqlEnvironment> {
        let id = database_id_from_task_info(&state.task_info).ok_or_else(|| {
            Error::Precondition("state grounding does not name a database".into())
        })?;
        self.environments
            .get(id)
            .ok_or_else(|| Error::Environment(format!("no fixture database for {id:?}")))
    }
}

impl Heuristic for ExecutionMatch {
    fn id(&self) -> &str {
        EXECUTION_MATCH
    }

    fn score(&self, state: &ConversationTurnState, prediction: &str, gold: &str) -> Result<f64> {
        let env = self.environment(state)?;
        let out = execution_match(prediction, gold, env)?;
        if out.timed_out {
            log::warn!("prediction timed out on {}", env.database_id);
        }
        Ok(if out.matched { 1.0 } else { 0.0 })
    }
}

/// Resources a heuristic may need.
#[derive(Default, Clone)]
pub struct HeuristicContext {
    pub similarity: Option<Arc<dyn SimilarityBackend>>,
    pub sql_environments: BTreeMap<String, SqlEnvironment>,
}

pub fn registered_ids() -> [&'static str; 3] {
    [DROP_F1, SIMILARITY, EXECUTION_MATCH]
}

pub fn build_heuristic(id: &str, ctx: &HeuristicContext) -> Result<Arc<dyn Heuristic>> {
    match id {
        DROP_F1 => Ok(Arc::new(DropF1)),
        SIMILARITY => {
            let backend = ctx
                .similarity
                .clone()
                .ok_or_else(|| Error::Config("similarity heuristic needs a similarity backend".into()))?;
            Ok(Arc::new(Similarity(backend)))
        }
        EXECUTION_MATCH => {
            if ctx.sql_environments.is_empty() {
                return Err(Error::Config("execution_match heuristic needs fixture databases".into()));
            }
            Ok(Arc::new(ExecutionMatch {
                environments: ctx.sql_environments.clone(),
            }))
        }
        other => Err(Error::Config(format!(
            "unknown heuristic {other:?}; registered: {:?}",
            registered_ids()
        ))),
    }
}

/// Default tolerance ε for a heuristic. Not published values.
pub fn default_epsilon(id: &str) -> f64 {
    match id {
        EXECUTION_MATCH => 0.5,
        _ => 0.8,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::similarity::JaccardSimilarity;

    #[test]
    fn registry_resolves_ids() {
        let ctx = HeuristicContext {
            similarity: Some(Arc::new(JaccardSimilarity)),
            ..Default::default()
        };
        assert_eq!(build_heuristic(DROP_F1, &ctx).unwrap().id(), DROP_F1);
        assert_eq!(build_heuristic(SIMILARITY, &ctx).unwrap().id(), SIMILARITY);
        assert!(matches!(build_heuristic(EXECUTION_MATCH, &ctx), Err(Error::Config(_))));
        assert!(matches!(build_heuristic("bleu", &ctx), Err(Error::Config(_))));
        assert!(build_heuristic(SIMILARITY, &HeuristicContext::default()).is_err());
    }

    #[test]
    fn epsilon_defaults() {
        assert_eq!(default_epsilon(DROP_F1), 0.8);
        assert_eq!(default_epsilon(SIMILARITY), 0.8);
        assert_eq!(default_epsilon(EXECUTION_MATCH), 0.5);
    }
}
