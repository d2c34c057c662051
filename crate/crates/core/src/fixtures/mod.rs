//! Deterministic fixture corpora and the scripted backends that go with
//! them. Used by the test suites and by `act fixtures`.

pub mod experiment;
pub mod goal_set;
pub mod metric_cases;
pub mod toy;
pub mod spider;
pub mod synthetic;

use std::sync::Arc;

use crate::clients::{ConditionalGenerator, DecodingSettings, ScriptTable, ScriptedBackend};
use crate::conversation::ConversationTurnState;
use crate::error::Result;
use crate::prompts::PromptRegistry;

/// Script table answering each state's losing-response prompt with
/// `losing(state)`.
pub fn generator_script(
    states: &[ConversationTurnState],
    registry: Arc<PromptRegistry>,
    decoding: &DecodingSettings,
    losing: impl Fn(&ConversationTurnState) -> String,
) -> Result<ScriptTable> {
    let probe = ConditionalGenerator::new(
        Arc::new(ScriptedBackend::new(ScriptTable::new())),
        registry,
        decoding.clone(),
    );
    let mut table = ScriptTable::new();
    for s in states {
        table.insert(&probe.prompt_for(s, s.gold_action.complement())?, losing(s));
    }
    Ok(table)
}

/// Size of the preference-construction fixture corpus.
pub const PREFERENCE_FIXTURE_TURNS: usize = 50;

/// Fifty decision points of the synthetic task, mixing clarification and
/// answer turns.
pub fn preference_fixture_states(seed: u64) -> Result<Vec<ConversationTurnState>> {
    let tasks = synthetic::synthetic_tasks(PREFERENCE_FIXTURE_TURNS.div_ceil(3), seed);
    let mut states = synthetic::synthetic_states(&tasks)?;
    states.truncate(PREFERENCE_FIXTURE_TURNS);
    Ok(states)
}
