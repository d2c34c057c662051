//! The conditional generator M used to write losing responses.
//!
//! Prompts follow the mixed-initiative layout: every system turn in the
//! in-context conversations and in the current history is preceded by a
//! narration of its action, and the final narration names the action the
//! generated turn must take.

use std::sync::Arc;

use super::{DecodingSettings, GenerationRequest, TextGenerator};
use crate::conversation::{Action, ConversationTurnState};
use crate::error::{Error, Result};
use crate::prompts::{self, action_narration, narrated_history, PromptRegistry};

/// Number of in-context conversations placed in a generation prompt.
pub const GENERATE_SHOTS: usize = 10;

#[derive(Clone)]
pub struct ConditionalGenerator {
    backend: Arc<dyn TextGenerator>,
    registry: Arc<PromptRegistry>,
    pub decoding: DecodingSettings,
}

impl ConditionalGenerator {
    pub fn new(
        backend: Arc<dyn TextGenerator>,
        registry: Arc<PromptRegistry>,
        decoding: DecodingSettings,
    ) -> Self {
        ConditionalGenerator {
            backend,
            registry,
            decoding,
        }
    }

    pub fn registry(&self) -> &PromptRegistry {
        &self.registry
    }

    /// The exact prompt sent to the backend for `(state, action)`.
    pub fn prompt_for(&self, state: &ConversationTurnState, action: Action) -> Result<String> {
        let mut shots = String::new();
        for ex in self.registry.exemplars.generate.iter().take(GENERATE_SHOTS) {
            shots.push_str(&ex.task_info);
            shots.push('\n');
            shots.push_str(&narrated_history(&ex.history));
            shots.push_str("\n\n");
        }
        self.registry.render(
            prompts::GENERATE,
            &[
                ("shots", &shots),
                ("task_info", &state.task_info),
                ("history", &narrated_history(&state.history)),
                ("narration", action_narration(action)),
            ],
        )
    }

    /// Raw completion of an arbitrary prompt with this generator's settings.
    pub fn complete(&self, prompt: &str) -> Result<String> {
        let req = GenerationRequest::new(prompt, &self.decoding)?;
        self.backend.generate(&req)
    }

    /// A response intended to realize `rejected`, the complement of the gold action.
    pub fn generate_losing_response(
        &self,
        state: &ConversationTurnState,
        rejected: Action,
    ) -> Result<String> {
        if rejected != state.gold_action.complement() {
            return Err(Error::Precondition(format!(
                "rejected action {rejected} is not the complement of gold action {}",
                state.gold_action
            )));
        }
        let text = self.complete(&self.prompt_for(state, rejected)?)?;
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::DegenerateGeneration("generator returned empty text".into()));
        }
        Ok(text.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{classifier::rule_action, ScriptTable, ScriptedBackend};
    use crate::conversation::DialogueMessage;

    fn state(gold: &str, action: Action) -> ConversationTurnState {
        ConversationTurnState::single_goal(
            "[Table] IMFT | 2019: $909 | 2018: $1,305",
            vec![DialogueMessage::user("What were the total liabilities of IMFT in 2018?").unwrap()],
            gold,
            gold,
            action,
        )
        .unwrap()
    }

    fn generator(entries: &[(String, &str)]) -> ConditionalGenerator {
        let mut t = ScriptTable::new();
        for (k, v) in entries {
            t.insert(k, *v);
        }
        ConditionalGenerator::new(
            Arc::new(ScriptedBackend::new(t)),
            Arc::new(PromptRegistry::builtin()),
            DecodingSettings::default(),
        )
    }

    #[test]
    fn prompt_interleaves_action_narration() {
        let g = generator(&[]);
        let p = g.prompt_for(&state("$1,305", Action::Answer), Action::Clarify).unwrap();
        assert!(p.ends_with(
            "User: What were the total liabilities of IMFT in 2018?\nThe user's last question was ambiguous. The Assistant asks a clarifying question.\nAssistant:"
        ));
        assert_eq!(p.matches("[Table and Passage]").count(), 5);
    }

    #[test]
    fn losing_clarification_for_answer_turn() {
        let s = state("$1,305", Action::Answer);
        let probe = generator(&[]);
        let prompt = probe.prompt_for(&s, Action::Clarify).unwrap();
        let g = generator(&[(prompt, "Which year are you asking about?")]);
        let out = g.generate_losing_response(&s, Action::Clarify).unwrap();
        assert_eq!(out, "Which year are you asking about?");
        assert_eq!(rule_action(&out), Action::Clarify);
    }

    #[test]
    fn missing_fingerprint_is_backend_error() {
        let g = generator(&[]);
        let r = g.generate_losing_response(&state("$1,305", Action::Answer), Action::Clarify);
        assert!(matches!(r, Err(Error::TransientBackend(_))));
    }

    #[test]
    fn blank_generation_is_degenerate() {
        let s = state("$1,305", Action::Answer);
        let prompt = generator(&[]).prompt_for(&s, Action::Clarify).unwrap();
        let g = generator(&[(prompt, "   ")]);
        assert!(matches!(
            g.generate_losing_response(&s, Action::Clarify),
            Err(Error::DegenerateGeneration(_))
        ));
    }

    #[test]
    fn rejected_must_be_complement() {
        let g = generator(&[]);
        assert!(matches!(
            g.generate_losing_response(&state("$1,305", Action::Answer), Action::Answer),
            Err(Error::Precondition(_))
        ));
    }
}
