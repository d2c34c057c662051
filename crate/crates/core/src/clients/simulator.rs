//! The user simulator U: summarizes what the user is after, then answers
//! clarifying questions consistently with that intent.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{DecodingSettings, GenerationRequest, ScriptTable, TextGenerator};
use crate::conversation::{ConversationTurnState, DialogueMessage, Speaker};
use crate::error::{Error, Result};
use crate::prompts::{self, serialize_history, PromptRegistry};

/// Number of in-context examples for intent summaries and replies.
pub const SIMULATE_SHOTS: usize = 3;

pub trait UserSimulator: Send + Sync {
    fn summarize_intent(&self, state: &ConversationTurnState) -> Result<String>;

    /// The user's reply to `system_msg`, which was appended after `state`'s
    /// history and classified as a clarification.
    fn simulate_user_turn(
        &self,
        state: &ConversationTurnState,
        intent: &str,
        system_msg: &str,
    ) -> Result<String>;
}

/// What the simulator's replies are grounded on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Grounding {
    /// Summarize the conversation's information-seeking intents first.
    Summarize,
    /// Use the trajectory goal (the target SQL query) directly as the intent.
    TargetQuery,
}

#[derive(Clone)]
pub struct PromptedSimulator {
    backend: Arc<dyn TextGenerator>,
    registry: Arc<PromptRegistry>,
    decoding: DecodingSettings,
    grounding: Grounding,
}

fn non_empty(text: String, what: &str) -> Result<String> {
    let t = text.trim();
    if t.is_empty() {
        Err(Error::DegenerateGeneration(format!("empty {what}")))
    } else {
        Ok(t.to_string())
    }
}

impl PromptedSimulator {
    pub fn new(
        backend: Arc<dyn TextGenerator>,
        registry: Arc<PromptRegistry>,
        decoding: DecodingSettings,
        grounding: Grounding,
    ) -> Self {
        PromptedSimulator {
            backend,
            registry,
            decoding,
            grounding,
        }
    }

    pub fn intent_prompt(&self, state: &ConversationTurnState) -> Result<String> {
        let mut examples = String::new();
        for ex in self.registry.exemplars.intent_summary.iter().take(SIMULATE_SHOTS) {
            examples.push_str(&format!(
                "{}\n{}\n[Information]\n{}\n\n",
                ex.task_info,
                serialize_history(&ex.history),
                ex.summary
            ));
        }
        self.registry.render(
            prompts::INTENT_SUMMARY,
            &[
                ("examples", &examples),
                ("task_info", &state.task_info),
                ("history", &serialize_history(&state.history)),
            ],
        )
    }

    pub fn reply_prompt(
        &self,
        state: &ConversationTurnState,
        intent: &str,
        system_msg: &str,
    ) -> Result<String> {
        let mut history = state.history.clone();
        history.push(DialogueMessage::with_provenance(
            Speaker::System,
            system_msg,
            Default::default(),
        )?);
        let history = serialize_history(&history);
        let mut examples = String::new();
        match self.grounding {
            Grounding::Summarize => {
                for ex in self.registry.exemplars.simulate_user.iter().take(SIMULATE_SHOTS) {
                    examples.push_str(&format!(
                        "The following is a conversation between a User and an Assistant. The User is asking some questions. {}\n{}\n{}\n\n",
                        ex.intent,
                        ex.task_info,
                        serialize_history(&ex.history)
                    ));
                }
                self.registry.render(
                    prompts::SIMULATE_USER,
                    &[
                        ("examples", &examples),
                        ("intent", intent),
                        ("task_info", &state.task_info),
                        ("history", &history),
                    ],
                )
            }
            Grounding::TargetQuery => {
                for ex in self.registry.exemplars.simulate_user_sql.iter().take(SIMULATE_SHOTS) {
                    examples.push_str(&format!(
                        "Target query: {}\n{}\n\n",
                        ex.intent,
                        serialize_history(&ex.history)
                    ));
                }
                self.registry.render(
                    prompts::SIMULATE_USER_SQL,
                    &[("examples", &examples), ("intent", intent), ("history", &history)],
                )
            }
        }
    }

    fn complete(&self, prompt: String) -> Result<String> {
        let req = GenerationRequest::new(prompt, &self.decoding)?;
        self.backend.generate(&req)
    }
}

impl UserSimulator for PromptedSimulator {
    fn summarize_intent(&self, state: &ConversationTurnState) -> Result<String> {
        match self.grounding {
            Grounding::TargetQuery => Ok(state.trajectory_goal.clone()),
            Grounding::Summarize => {
                non_empty(self.complete(self.intent_prompt(state)?)?, "intent summary")
            }
        }
    }

    fn simulate_user_turn(
        &self,
        state: &ConversationTurnState,
        intent: &str,
        system_msg: &str,
    ) -> Result<String> {
        non_empty(
            self.complete(self.reply_prompt(state, intent, system_msg)?)?,
            "simulated user turn",
        )
    }
}

/// Table-driven simulator. Intents are looked up by state fingerprint, or
/// taken to be the trajectory goal when no intent table is given; replies
/// are looked up by intent text.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScriptedSimulator {
    #[serde(default)]
    pub intents: Option<ScriptTable>,
    pub replies: ScriptTable,
}

impl ScriptedSimulator {
    pub fn goal_grounded(replies: ScriptTable) -> Self {
        ScriptedSimulator {
            intents: None,
            replies,
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("read simulator script {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)
            .map_err(|e| Error::io(format!("write simulator script {}", path.display()), e))
    }
}

impl UserSimulator for ScriptedSimulator {
    fn summarize_intent(&self, state: &ConversationTurnState) -> Result<String> {
        match &self.intents {
            None => Ok(state.trajectory_goal.clone()),
            Some(t) => t
                .0
                .get(&state.fingerprint())
                .cloned()
                .ok_or_else(|| {
                    Error::TransientBackend(format!(
                        "scripted simulator has no intent for state {}",
                        state.fingerprint()
                    ))
                }),
        }
    }

    fn simulate_user_turn(
        &self,
        _state: &ConversationTurnState,
        intent: &str,
        _system_msg: &str,
    ) -> Result<String> {
        self.replies.lookup(intent).map(str::to_string).ok_or_else(|| {
            Error::TransientBackend(format!("scripted simulator has no reply for intent {intent:?}"))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::ScriptedBackend;
    use crate::conversation::Action;

    fn pacific_state() -> ConversationTurnState {
        ConversationTurnState::single_goal(
            "[Table] IMFT | 2019: $909 | 2018: $1,305",
            vec![DialogueMessage::user("What were the total liabilities of IMFT?").unwrap()],
            "Which year are you asking about?",
            "$1,305",
            Action::Clarify,
        )
        .unwrap()
    }

    fn prompted(table: ScriptTable, grounding: Grounding) -> PromptedSimulator {
        PromptedSimulator::new(
            Arc::new(ScriptedBackend::new(table)),
            Arc::new(PromptRegistry::builtin()),
            DecodingSettings::default(),
            grounding,
        )
    }

    #[test]
    fn summary_goes_through_backend() {
        let s = pacific_state();
        let probe = prompted(ScriptTable::new(), Grounding::Summarize);
        let prompt = probe.intent_prompt(&s).unwrap();
        assert_eq!(prompt.matches("[Information]").count(), 4);
        let mut t = ScriptTable::new();
        t.insert(&prompt, " The user wants to know: 1. The total liabilities of IMFT in 2018.");
        let sim = prompted(t, Grounding::Summarize);
        assert!(sim.summarize_intent(&s).unwrap().starts_with("The user wants to know: 1."));
    }

    #[test]
    fn sql_grounding_uses_target_query_verbatim() {
        let s = ConversationTurnState::single_goal(
            "[Database Schema]",
            vec![DialogueMessage::user("Tell me about the singers.").unwrap()],
            "What would you like to know about the singers?",
            "SELECT count(*) FROM singer",
            Action::Clarify,
        )
        .unwrap();
        let sim = prompted(ScriptTable::new(), Grounding::TargetQuery);
        assert_eq!(sim.summarize_intent(&s).unwrap(), "SELECT count(*) FROM singer");
        let p = sim.reply_prompt(&s, "SELECT count(*) FROM singer", "What would you like to know?").unwrap();
        assert!(p.contains("The command that the assistant should ultimately return is as follows:\nSELECT count(*) FROM singer"));
        assert!(p.ends_with("Assistant: What would you like to know?\nUser:"));
    }

    #[test]
    fn prompted_reply() {
        let s = pacific_state();
        let probe = prompted(ScriptTable::new(), Grounding::Summarize);
        let intent = "The user wants to know: 1. The total liabilities of IMFT in 2018.";
        let p = probe.reply_prompt(&s, intent, "Which year are you asking about?").unwrap();
        let mut t = ScriptTable::new();
        t.insert(&p, "2018");
        let sim = prompted(t, Grounding::Summarize);
        assert_eq!(sim.simulate_user_turn(&s, intent, "Which year are you asking about?").unwrap(), "2018");
    }

    #[test]
    fn scripted_simulator_lookup() {
        let mut replies = ScriptTable::new();
        replies.insert("$1,305", "2018");
        let sim = ScriptedSimulator::goal_grounded(replies);
        let s = pacific_state();
        let intent = sim.summarize_intent(&s).unwrap();
        assert_eq!(intent, "$1,305");
        assert_eq!(sim.simulate_user_turn(&s, &intent, "Which year are you asking about?").unwrap(), "2018");
        assert!(matches!(
            sim.simulate_user_turn(&s, "unknown", "q?"),
            Err(Error::TransientBackend(_))
        ));
    }

    #[test]
    fn scripted_intents_keyed_by_state_fingerprint() {
        let s = pacific_state();
        let mut intents = ScriptTable::new();
        intents.0.insert(s.fingerprint(), "The user wants to know: 1. x".into());
        let sim = ScriptedSimulator { intents: Some(intents), replies: ScriptTable::new() };
        assert_eq!(sim.summarize_intent(&s).unwrap(), "The user wants to know: 1. x");
        let other = s.with_goal("$1,305").unwrap();
        assert_eq!(sim.summarize_intent(&other).unwrap(), "The user wants to know: 1. x");
    }
}
