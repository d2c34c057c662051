//! The action classifier A: is a system utterance a clarifying question or
//! an answer attempt?

use std::sync::Arc;

use super::{DecodingSettings, GenerationRequest, TextGenerator};
use crate::conversation::{Action, ConversationTurnState, DialogueMessage, Speaker};
use crate::error::{Error, Result};
use crate::prompts::{self, serialize_history, PromptRegistry};

/// Number of labelled examples placed in a classification prompt.
pub const CLASSIFY_SHOTS: usize = 10;

const CLARIFY_PHRASE: &str = "clarifying question";
const ANSWER_PHRASE: &str = "direct answer";

const INTERROGATIVES: &[&str] = &[
    "what", "which", "who", "whom", "whose", "when", "where", "why", "how", "do", "does", "did",
    "is", "are", "was", "were", "can", "could", "would", "will", "should", "shall", "may",
    "might", "have", "has",
];

pub trait ActionClassifier: Send + Sync {
    fn classify(&self, state: &ConversationTurnState, candidate: &str) -> Result<Action>;
}

/// Deterministic rule. A candidate starting with `SELECT` (any case) is an
/// answer. Otherwise it is a clarification when it ends with `?` or starts
/// with an interrogative word, and an answer in every other case. Bracket
/// and quote wrappers (`['...']`) are ignored.
pub fn rule_action(candidate: &str) -> Action {
    let core = candidate
        .trim()
        .trim_start_matches(['[', '\'', '"', ' '])
        .trim_end_matches([']', '\'', '"', ' ']);
    let first = core
        .split(|c: char| !c.is_alphanumeric() && c != '\'')
        .next()
        .unwrap_or("")
        .to_ascii_lowercase();
    if first == "select" {
        return Action::Answer;
    }
    if core.ends_with('?') || INTERROGATIVES.contains(&first.as_str()) {
        Action::Clarify
    } else {
        Action::Answer
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RuleClassifier;

impl ActionClassifier for RuleClassifier {
    fn classify(&self, _state: &ConversationTurnState, candidate: &str) -> Result<Action> {
        if candidate.trim().is_empty() {
            return Err(Error::Precondition("cannot classify an empty candidate".into()));
        }
        Ok(rule_action(candidate))
    }
}

/// Parses the first occurrence of either label phrase.
pub fn parse_classification(completion: &str) -> Result<Action> {
    let lower = completion.to_ascii_lowercase();
    match (lower.find(CLARIFY_PHRASE), lower.find(ANSWER_PHRASE)) {
        (Some(c), Some(a)) if c < a => Ok(Action::Clarify),
        (Some(_), Some(_)) => Ok(Action::Answer),
        (Some(_), None) => Ok(Action::Clarify),
        (None, Some(_)) => Ok(Action::Answer),
        (None, None) => Err(Error::ClassifierParse(format!(
            "no action phrase in completion {completion:?}"
        ))),
    }
}

fn label(action: Action) -> &'static str {
    match action {
        Action::Clarify => "a clarifying question.",
        Action::Answer => "a direct answer.",
    }
}

/// Few-shot prompted classifier over a text backend.
#[derive(Clone)]
pub struct PromptedClassifier {
    backend: Arc<dyn TextGenerator>,
    registry: Arc<PromptRegistry>,
    decoding: DecodingSettings,
    retry_limit: u32,
}

impl PromptedClassifier {
    pub fn new(
        backend: Arc<dyn TextGenerator>,
        registry: Arc<PromptRegistry>,
        decoding: DecodingSettings,
        retry_limit: u32,
    ) -> Self {
        PromptedClassifier {
            backend,
            registry,
            decoding,
            retry_limit,
        }
    }

    pub fn prompt_for(&self, state: &ConversationTurnState, candidate: &str) -> Result<String> {
        let mut examples = String::new();
        for ex in self.registry.exemplars.classify.iter().take(CLASSIFY_SHOTS) {
            examples.push_str(&ex.task_info);
            examples.push('\n');
            examples.push_str(&serialize_history(&ex.history));
            examples.push_str("\nThe last Assistant utterance is ");
            examples.push_str(label(ex.action));
            examples.push_str("\n\n");
        }
        let mut history = state.history.clone();
        history.push(DialogueMessage::with_provenance(
            Speaker::System,
            candidate,
            Default::default(),
        )?);
        self.registry.render(
            prompts::CLASSIFY,
            &[
                ("examples", &examples),
                ("task_info", &state.task_info),
                ("history", &serialize_history(&history)),
            ],
        )
    }
}

impl ActionClassifier for PromptedClassifier {
    fn classify(&self, state: &ConversationTurnState, candidate: &str) -> Result<Action> {
        if candidate.trim().is_empty() {
            return Err(Error::Precondition("cannot classify an empty candidate".into()));
        }
        let req = GenerationRequest::new(self.prompt_for(state, candidate)?, &self.decoding)?;
        let mut last = None;
        for _ in 0..=self.retry_limit {
            match parse_classification(&self.backend.generate(&req)?) {
                Ok(a) => return Ok(a),
                Err(e) => {
                    log::warn!("{e}");
                    last = Some(e);
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{ScriptTable, ScriptedBackend};

    fn state() -> ConversationTurnState {
        ConversationTurnState::single_goal(
            "[Database Schema]",
            vec![DialogueMessage::user("How many singers do we have?").unwrap()],
            "SELECT count(*) FROM singer",
            "SELECT count(*) FROM singer",
            Action::Answer,
        )
        .unwrap()
    }

    #[test]
    fn rule_examples() {
        assert_eq!(rule_action("Which year are you asking about?"), Action::Clarify);
        assert_eq!(rule_action("SELECT count(*) FROM singer"), Action::Answer);
        assert_eq!(rule_action("select name from singer"), Action::Answer);
        assert_eq!(rule_action("['What kind of change are you asking about?']"), Action::Clarify);
        assert_eq!(rule_action("['$(39,145)', '$49,361']"), Action::Answer);
        assert_eq!(rule_action("Do you mean that morning or the night before"), Action::Clarify);
        assert_eq!(rule_action("$1,305"), Action::Answer);
    }

    #[test]
    fn empty_candidate_is_precondition_error() {
        assert!(matches!(
            RuleClassifier.classify(&state(), ""),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn parse_first_phrase_wins() {
        assert_eq!(parse_classification(" a clarifying question.").unwrap(), Action::Clarify);
        assert_eq!(parse_classification("a direct answer, not a clarifying question").unwrap(), Action::Answer);
        assert!(matches!(parse_classification("unsure"), Err(Error::ClassifierParse(_))));
    }

    fn prompted(table: ScriptTable, retry_limit: u32) -> PromptedClassifier {
        PromptedClassifier::new(
            Arc::new(ScriptedBackend::new(table)),
            Arc::new(PromptRegistry::builtin()),
            DecodingSettings::default(),
            retry_limit,
        )
    }

    #[test]
    fn prompted_classifier_uses_ten_examples() {
        let c = prompted(ScriptTable::new(), 0);
        let p = c.prompt_for(&state(), "SELECT count(*) FROM singer").unwrap();
        assert_eq!(p.matches("The last Assistant utterance is").count(), 11);
        assert!(p.ends_with("Assistant: SELECT count(*) FROM singer\nThe last Assistant utterance is"));
    }

    #[test]
    fn prompted_classifier_parses_completion() {
        let probe = prompted(ScriptTable::new(), 0);
        let mut t = ScriptTable::new();
        t.insert(&probe.prompt_for(&state(), "Which year?").unwrap(), " a clarifying question.");
        let c = prompted(t, 0);
        assert_eq!(c.classify(&state(), "Which year?").unwrap(), Action::Clarify);
    }

    #[test]
    fn unparseable_completion_after_retries() {
        let probe = prompted(ScriptTable::new(), 0);
        let mut t = ScriptTable::new();
        t.insert(&probe.prompt_for(&state(), "x").unwrap(), "no idea");
        let c = prompted(t, 2);
        assert!(matches!(c.classify(&state(), "x"), Err(Error::ClassifierParse(_))));
    }
}
