//! Prompt templates, in-context exemplars and prompt rendering.
//!
//! Templates are plain text with `{{name}}` placeholders. The built-in set is
//! compiled into the binary; [`PromptRegistry::from_dir`] layers `*.txt`
//! overrides from a directory on top of it.
//!
//! History serialization: each message becomes `<label> <text>` on its own
//! line, where the label is `User:` or `Assistant:`. Line breaks inside a
//! message are written as a newline followed by two spaces, so the rendering
//! can be inverted as long as no line of `task_info` starts with a speaker
//! label.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::clients::classifier::rule_action;
use crate::conversation::{
    Action, ConversationTurnState, DialogueMessage, Speaker, ASSISTANT_LABEL, USER_LABEL,
};
use crate::error::{Error, Result};

pub const STANDARD: &str = "standard";
pub const PACIFIC: &str = "pacific";
pub const ABGCOQA: &str = "abgcoqa";
pub const AMBIGSQL: &str = "ambigsql";
pub const SQL_ANSWER: &str = "sql_answer";
pub const GENERATE: &str = "generate";
pub const CLASSIFY: &str = "classify";
pub const INTENT_SUMMARY: &str = "intent_summary";
pub const SIMULATE_USER: &str = "simulate_user";
pub const SIMULATE_USER_SQL: &str = "simulate_user_sql";
pub const PERTURB: &str = "perturb";

/// Most in-context conversations a baseline prompt may carry.
pub const MAX_SHOTS: usize = 10;

const BUILTIN: &[(&str, &str)] = &[
    (STANDARD, include_str!("../templates/standard.txt")),
    (PACIFIC, include_str!("../templates/pacific.txt")),
    (ABGCOQA, include_str!("../templates/abgcoqa.txt")),
    (AMBIGSQL, include_str!("../templates/ambigsql.txt")),
    (SQL_ANSWER, include_str!("../templates/sql_answer.txt")),
    (GENERATE, include_str!("../templates/generate.txt")),
    (CLASSIFY, include_str!("../templates/classify.txt")),
    (INTENT_SUMMARY, include_str!("../templates/intent_summary.txt")),
    (SIMULATE_USER, include_str!("../templates/simulate_user.txt")),
    (SIMULATE_USER_SQL, include_str!("../templates/simulate_user_sql.txt")),
    (PERTURB, include_str!("../templates/perturb.txt")),
];

const BASELINE_HEADER: &str = "You are an Assistant answering questions from a User. You should either attempt to answer the question or ask a clarifying question if there is any ambiguity.";
const COT_INSTRUCTION: &str = "Instruction: If the user's question is ambiguous, ask an appropriate clarifying question. Otherwise, directly answer the user's question using the information from the passage context and the table. Let's think step by step.";
const PROACTIVE_ACTIONS: &str = "Actions: [\"Directly Answer\", \"Ask a Clarification Question\"]";
const PROACTIVE_CUE: &str = "Prompt: Given the task background and the conversation history, please use appropriate actions to generate the response.";

/// Narrative instruction stating which action the next system turn takes.
pub fn action_narration(action: Action) -> &'static str {
    match action {
        Action::Clarify => "The user's last question was ambiguous. The Assistant asks a clarifying question.",
        Action::Answer => "The user's last question was unambiguous. The Assistant directly answers the question.",
    }
}

fn cot_reasoning(action: Action) -> &'static str {
    match action {
        Action::Clarify => "Reasoning: The user's question was ambiguous.",
        Action::Answer => "Reasoning: The user's question is not ambiguous.",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BaselineStyle {
    Standard,
    Cot,
    ProactiveMiprompt,
}

impl std::str::FromStr for BaselineStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "standard" => Ok(BaselineStyle::Standard),
            "cot" | "chain_of_thought" => Ok(BaselineStyle::Cot),
            "proactive_miprompt" | "proactive" => Ok(BaselineStyle::ProactiveMiprompt),
            other => Err(Error::Config(format!("unknown baseline style {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct ClassifyExemplar {
    pub task_info: String,
    pub history: Vec<DialogueMessage>,
    pub action: Action,
}

#[derive(Debug, Clone, Deserialize)]
pub struct IntentExemplar {
    pub task_info: String,
    pub history: Vec<DialogueMessage>,
    pub summary: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SimulateExemplar {
    pub intent: String,
    #[serde(default)]
    pub task_info: String,
    pub history: Vec<DialogueMessage>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PerturbExemplar {
    pub schema: String,
    pub sql: String,
    pub request: String,
    pub ambiguous: String,
    pub question: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct GenerateExemplar {
    pub task_info: String,
    pub history: Vec<DialogueMessage>,
}

/// In-context example sets used by the auxiliary model prompts.
#[derive(Debug, Clone)]
pub struct Exemplars {
    pub classify: Vec<ClassifyExemplar>,
    pub intent_summary: Vec<IntentExemplar>,
    pub simulate_user: Vec<SimulateExemplar>,
    pub simulate_user_sql: Vec<SimulateExemplar>,
    pub perturb_info: Vec<PerturbExemplar>,
    pub perturb_population: Vec<PerturbExemplar>,
    pub perturb_presentation: Vec<PerturbExemplar>,
    pub generate: Vec<GenerateExemplar>,
}

fn parse_builtin<T: DeserializeOwned>(name: &str, text: &str) -> Vec<T> {
    serde_json::from_str(text).unwrap_or_else(|e| panic!("built-in exemplar file {name}: {e}"))
}

impl Exemplars {
    pub fn builtin() -> Self {
        Exemplars {
            classify: parse_builtin("classify", include_str!("../templates/exemplars/classify.json")),
            intent_summary: parse_builtin(
                "intent_summary",
                include_str!("../templates/exemplars/intent_summary.json"),
            ),
            simulate_user: parse_builtin(
                "simulate_user",
                include_str!("../templates/exemplars/simulate_user.json"),
            ),
            simulate_user_sql: parse_builtin(
                "simulate_user_sql",
                include_str!("../templates/exemplars/simulate_user_sql.json"),
            ),
            perturb_info: parse_builtin(
                "perturb_info",
                include_str!("../templates/exemplars/perturb_info.json"),
            ),
            perturb_population: parse_builtin(
                "perturb_population",
                include_str!("../templates/exemplars/perturb_population.json"),
            ),
            perturb_presentation: parse_builtin(
                "perturb_presentation",
                include_str!("../templates/exemplars/perturb_presentation.json"),
            ),
            generate: parse_builtin("generate", include_str!("../templates/exemplars/generate.json")),
        }
    }
}

/// Template text addressed by id, plus the exemplar sets.
#[derive(Debug, Clone)]
pub struct PromptRegistry {
    templates: BTreeMap<String, String>,
    pub exemplars: Exemplars,
}

impl Default for PromptRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptRegistry {
    pub fn builtin() -> Self {
        PromptRegistry {
            templates: BUILTIN
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            exemplars: Exemplars::builtin(),
        }
    }

    /// Built-in templates overridden (or extended) by every `<id>.txt` in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut reg = Self::builtin();
        let entries =
            fs::read_dir(dir).map_err(|e| Error::io(format!("read {}", dir.display()), e))?;
        for entry in entries {
            let path = entry
                .map_err(|e| Error::io(format!("read {}", dir.display()), e))?
                .path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let text = fs::read_to_string(&path)
                .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
            reg.templates.insert(id.to_string(), text);
        }
        Ok(reg)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn template(&self, id: &str) -> Result<&str> {
        self.templates
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("unknown template id {id:?}")))
    }

    /// Substitutes every `{{name}}` placeholder. Unfilled placeholders are a
    /// configuration error; substituted values are not re-scanned.
    pub fn render(&self, id: &str, vars: &[(&str, &str)]) -> Result<String> {
        fill(self.template(id)?, vars).map_err(|name| {
            Error::Config(format!("template {id:?} has no value for placeholder {name:?}"))
        })
    }

    /// Digest over all template texts, for run provenance.
    pub fn digest(&self) -> String {
        let joined: String = self
            .templates
            .iter()
            .map(|(k, v)| format!("{k}\0{v}\0"))
            .collect();
        crate::conversation::fingerprint(&joined)
    }
}

fn fill(template: &str, vars: &[(&str, &str)]) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find("}}") else {
            out.push_str(&rest[start..]);
            return Ok(out);
        };
        let name = &after[..end];
        match vars.iter().find(|(k, _)| *k == name) {
            Some((_, v)) => out.push_str(v),
            None => return Err(name.to_string()),
        }
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

fn push_message(out: &mut String, speaker: Speaker, text: &str) {
    out.push_str(speaker.label());
    out.push(' ');
    let mut lines = text.split('\n');
    out.push_str(lines.next().unwrap_or(""));
    for line in lines {
        out.push_str("\n  ");
        out.push_str(line);
    }
}

/// Speaker-labelled lines, joined by newlines, without a trailing newline.
pub fn serialize_history(history: &[DialogueMessage]) -> String {
    let mut out = String::new();
    for (i, m) in history.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        push_message(&mut out, m.speaker, &m.text);
    }
    out
}

/// Inverse of [`serialize_history`].
pub fn parse_history(text: &str) -> Result<Vec<DialogueMessage>> {
    let mut out: Vec<(Speaker, String)> = Vec::new();
    for line in text.split('\n') {
        if let Some(cont) = line.strip_prefix("  ") {
            match out.last_mut() {
                Some((_, t)) => {
                    t.push('\n');
                    t.push_str(cont);
                }
                None => {
                    return Err(Error::InvalidTranscript(
                        "continuation line before any message".into(),
                    ))
                }
            }
        } else if let Some(t) = line.strip_prefix(USER_LABEL).and_then(|t| t.strip_prefix(' ')) {
            out.push((Speaker::User, t.to_string()));
        } else if let Some(t) = line
            .strip_prefix(ASSISTANT_LABEL)
            .and_then(|t| t.strip_prefix(' '))
        {
            out.push((Speaker::System, t.to_string()));
        } else {
            return Err(Error::InvalidTranscript(format!(
                "line without speaker label: {line:?}"
            )));
        }
    }
    out.into_iter()
        .map(|(s, t)| DialogueMessage::with_provenance(s, t, Default::default()))
        .collect()
}

/// Task grounding, serialized history and the template's trailing cue.
pub fn render_prompt(
    registry: &PromptRegistry,
    state: &ConversationTurnState,
    template_id: &str,
) -> Result<String> {
    registry.render(
        template_id,
        &[
            ("task_info", &state.task_info),
            ("history", &serialize_history(&state.history)),
        ],
    )
}

/// Whitespace-delimited units, the length measure used for sequence limits.
pub fn count_units(text: &str) -> usize {
    text.split_whitespace().count()
}

fn action_of(msg: &DialogueMessage) -> Action {
    rule_action(&msg.text)
}

/// History where system turns are annotated per `style`. Actions for
/// historical system turns come from the rule classifier; the shot's final
/// gold turn uses its labelled action.
fn annotated_history(
    out: &mut String,
    history: &[DialogueMessage],
    style: BaselineStyle,
    last: Option<(Action, &str)>,
) {
    let mut lines: Vec<String> = Vec::new();
    let system_turn = |lines: &mut Vec<String>, action: Action, text: &str| {
        let mut msg = String::new();
        push_message(&mut msg, Speaker::System, text);
        match style {
            BaselineStyle::Standard => lines.push(msg),
            BaselineStyle::Cot => {
                lines.push(COT_INSTRUCTION.to_string());
                lines.push(format!("{} {msg}", cot_reasoning(action)));
            }
            BaselineStyle::ProactiveMiprompt => {
                lines.push(action_narration(action).to_string());
                lines.push(msg);
            }
        }
    };
    for m in history {
        match m.speaker {
            Speaker::User => {
                let mut msg = String::new();
                push_message(&mut msg, Speaker::User, &m.text);
                lines.push(msg);
            }
            Speaker::System => system_turn(&mut lines, action_of(m), &m.text),
        }
    }
    if let Some((action, text)) = last {
        system_turn(&mut lines, action, text);
    }
    out.push_str(&lines.join("\n"));
}

/// In-context baseline prompt: instruction header, up to ten solved example
/// conversations, then the current conversation with a style-specific cue.
pub fn render_baseline_prompt(
    state: &ConversationTurnState,
    style: BaselineStyle,
    shots: &[ConversationTurnState],
) -> Result<String> {
    if shots.len() > MAX_SHOTS {
        return Err(Error::Precondition(format!(
            "{} in-context conversations given; at most {MAX_SHOTS} allowed",
            shots.len()
        )));
    }
    let mut out = String::from(BASELINE_HEADER);
    out.push('\n');
    for shot in shots {
        out.push_str(&shot.task_info);
        out.push('\n');
        annotated_history(
            &mut out,
            &shot.history,
            style,
            Some((shot.gold_action, &shot.gold_response)),
        );
        out.push_str("\n\n");
    }
    out.push_str(&state.task_info);
    out.push('\n');
    annotated_history(&mut out, &state.history, style, None);
    out.push('\n');
    match style {
        BaselineStyle::Standard => out.push_str(ASSISTANT_LABEL),
        BaselineStyle::Cot => {
            out.push_str(COT_INSTRUCTION);
            out.push_str("\nReasoning:");
        }
        BaselineStyle::ProactiveMiprompt => {
            out.push_str(PROACTIVE_ACTIONS);
            out.push('\n');
            out.push_str(PROACTIVE_CUE);
            out.push_str("\nResponse:");
        }
    }
    Ok(out)
}

/// History rendered with an action narration before every system turn, as
/// used by the conditional generator's in-context conversations.
pub fn narrated_history(history: &[DialogueMessage]) -> String {
    let mut out = String::new();
    annotated_history(&mut out, history, BaselineStyle::ProactiveMiprompt, None);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn msg(speaker: Speaker, text: &str) -> DialogueMessage {
        DialogueMessage::with_provenance(speaker, text, Default::default()).unwrap()
    }

    fn one_turn(q: &str) -> ConversationTurnState {
        ConversationTurnState::single_goal(
            "[Table]",
            vec![msg(Speaker::User, q)],
            "$1,305",
            "$1,305",
            Action::Answer,
        )
        .unwrap()
    }

    #[test]
    fn standard_template_minimal_layout() {
        let reg = PromptRegistry::builtin();
        let p = render_prompt(&reg, &one_turn("What were the total liabilities?"), STANDARD).unwrap();
        assert_eq!(p, "[Table]\nUser: What were the total liabilities?\nAssistant:");
    }

    #[test]
    fn pacific_template_has_instruction_header() {
        let reg = PromptRegistry::builtin();
        let p = render_prompt(&reg, &one_turn("q?"), PACIFIC).unwrap();
        assert!(p.starts_with("You are an Assistant answering questions from a User."));
        assert!(p.ends_with("User: q?\nAssistant:"));
    }

    #[test]
    fn unknown_template_is_config_error() {
        let reg = PromptRegistry::builtin();
        let err = render_prompt(&reg, &one_turn("q"), "nope").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn missing_placeholder_value_is_reported() {
        let reg = PromptRegistry::builtin();
        assert!(matches!(reg.render(STANDARD, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("standard.txt"), "X {{task_info}}|{{history}}").unwrap();
        fs::write(dir.path().join("extra.txt"), "E").unwrap();
        let reg = PromptRegistry::from_dir(dir.path()).unwrap();
        assert_eq!(render_prompt(&reg, &one_turn("q"), STANDARD).unwrap(), "X [Table]|User: q");
        assert_eq!(reg.template("extra").unwrap(), "E");
        assert!(reg.template(PACIFIC).is_ok());
    }

    #[test]
    fn exemplar_counts() {
        let ex = Exemplars::builtin();
        assert_eq!(ex.classify.len(), 10);
        assert_eq!(ex.intent_summary.len(), 3);
        assert_eq!(ex.simulate_user.len(), 3);
        assert_eq!(ex.simulate_user_sql.len(), 3);
        assert_eq!(ex.perturb_info.len(), 5);
        assert_eq!(ex.perturb_population.len(), 5);
        assert_eq!(ex.perturb_presentation.len(), 5);
        assert_eq!(ex.generate.len(), 10);
    }

    #[test]
    fn baseline_styles_carry_their_cues() {
        let state = one_turn("How much would the pension change?");
        let shot = ConversationTurnState::single_goal(
            "[Table and Passage]",
            vec![msg(Speaker::User, "How much would change in the discount rate?")],
            "['What kind of change are you asking about?']",
            "x",
            Action::Clarify,
        )
        .unwrap();
        let cot = render_baseline_prompt(&state, BaselineStyle::Cot, std::slice::from_ref(&shot)).unwrap();
        assert!(cot.contains("Let's think step by step."));
        assert!(cot.contains("Reasoning: The user's question was ambiguous. Assistant: ['What kind"));
        let pro =
            render_baseline_prompt(&state, BaselineStyle::ProactiveMiprompt, &[shot]).unwrap();
        assert!(pro.contains("use appropriate actions to generate the response"));
        assert!(pro.contains("Actions: [\"Directly Answer\", \"Ask a Clarification Question\"]"));
        assert!(pro.contains("The Assistant asks a clarifying question.\nAssistant: ['What kind"));
    }

    #[test]
    fn zero_shot_standard_is_header_plus_conversation() {
        let p = render_baseline_prompt(&one_turn("q?"), BaselineStyle::Standard, &[]).unwrap();
        assert_eq!(p, format!("{BASELINE_HEADER}\n[Table]\nUser: q?\nAssistant:"));
    }

    #[test]
    fn too_many_shots_rejected() {
        let s = one_turn("q");
        let shots = vec![s.clone(); 11];
        assert!(render_baseline_prompt(&s, BaselineStyle::Standard, &shots).is_err());
    }

    #[test]
    fn style_names_parse() {
        assert_eq!("cot".parse::<BaselineStyle>().unwrap(), BaselineStyle::Cot);
        assert!("fancy".parse::<BaselineStyle>().is_err());
    }

    fn arb_history() -> impl Strategy<Value = Vec<DialogueMessage>> {
        (1usize..6, prop::collection::vec("[a-zA-Z0-9 ?:\\n]{0,12}[a-z]", 6)).prop_map(
            |(n, texts)| {
                let n = if n % 2 == 0 { n + 1 } else { n };
                (0..n.min(texts.len()))
                    .map(|i| {
                        let speaker = if i % 2 == 0 { Speaker::User } else { Speaker::System };
                        msg(speaker, &texts[i])
                    })
                    .collect()
            },
        )
    }

    proptest! {
        #[test]
        fn history_serialization_round_trips(h in arb_history()) {
            let text = serialize_history(&h);
            prop_assert_eq!(parse_history(&text).unwrap(), h);
        }

        #[test]
        fn render_is_injective(a in arb_history(), b in arb_history(),
                               ta in "[A-Z][a-z ]{0,8}", tb in "[A-Z][a-z ]{0,8}") {
            let reg = PromptRegistry::builtin();
            let sa = ConversationTurnState::single_goal(ta, a, "g", "g", Action::Answer).unwrap();
            let sb = ConversationTurnState::single_goal(tb, b, "g", "g", Action::Answer).unwrap();
            let pa = render_prompt(&reg, &sa, STANDARD).unwrap();
            let pb = render_prompt(&reg, &sb, STANDARD).unwrap();
            let same_inputs = sa.task_info == sb.task_info && sa.history == sb.history;
            prop_assert_eq!(pa == pb, same_inputs);
        }
    }
}
