//! Conversation data model shared by every pipeline stage.
//!
//! A [`ConversationTurnState`] is one system-side decision point: the grounding
//! text, the dialogue so far (ending with the user's latest message), the gold
//! system response, the answer the surrounding trajectory should end with, and
//! the action the gold response expresses.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const USER_LABEL: &str = "User:";
pub const ASSISTANT_LABEL: &str = "Assistant:";

/// The binary dialogue-act space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Clarify,
    Answer,
}

impl Action {
    pub const ALL: [Action; 2] = [Action::Clarify, Action::Answer];

    /// The unique other action.
    pub fn complement(self) -> Action {
        match self {
            Action::Clarify => Action::Answer,
            Action::Answer => Action::Clarify,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Action::Clarify => 0,
            Action::Answer => 1,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Clarify => "CLARIFY",
            Action::Answer => "ANSWER",
        })
    }
}

pub fn complement_action(a: Action) -> Action {
    a.complement()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Speaker {
    User,
    System,
}

impl Speaker {
    pub fn label(self) -> &'static str {
        match self {
            Speaker::User => USER_LABEL,
            Speaker::System => ASSISTANT_LABEL,
        }
    }

    pub fn other(self) -> Speaker {
        match self {
            Speaker::User => Speaker::System,
            Speaker::System => Speaker::User,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Provenance {
    #[default]
    Dataset,
    PolicySampled,
    SimulatedUser,
    LlmGenerated,
}

impl Provenance {
    fn is_dataset(&self) -> bool {
        *self == Provenance::Dataset
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawMessage")]
pub struct DialogueMessage {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Provenance::is_dataset")]
    pub provenance: Provenance,
}

#[derive(Deserialize)]
struct RawMessage {
    speaker: Speaker,
    text: String,
    #[serde(default)]
    provenance: Provenance,
}

impl TryFrom<RawMessage> for DialogueMessage {
    type Error = Error;

    fn try_from(raw: RawMessage) -> Result<Self> {
        DialogueMessage::with_provenance(raw.speaker, raw.text, raw.provenance)
    }
}

impl DialogueMessage {
    pub fn with_provenance(
        speaker: Speaker,
        text: impl Into<String>,
        provenance: Provenance,
    ) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidTranscript(format!(
                "{speaker:?} message has empty text"
            )));
        }
        Ok(DialogueMessage {
            speaker,
            text,
            provenance,
        })
    }

    pub fn user(text: impl Into<String>) -> Result<Self> {
        Self::with_provenance(Speaker::User, text, Provenance::Dataset)
    }

    pub fn system(text: impl Into<String>) -> Result<Self> {
        Self::with_provenance(Speaker::System, text, Provenance::Dataset)
    }
}

fn check_alternation(messages: &[DialogueMessage]) -> Result<()> {
    for (i, pair) in messages.windows(2).enumerate() {
        if pair[0].speaker == pair[1].speaker {
            return Err(Error::InvalidTranscript(format!(
                "messages {i} and {} are both {:?}",
                i + 1,
                pair[0].speaker
            )));
        }
    }
    Ok(())
}

/// One system-side decision point of a conversation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawState")]
pub struct ConversationTurnState {
    pub task_info: String,
    pub history: Vec<DialogueMessage>,
    pub gold_response: String,
    pub trajectory_goal: String,
    pub gold_action: Action,
    pub goal_set: Vec<String>,
}

#[derive(Deserialize)]
struct RawState {
    task_info: String,
    history: Vec<DialogueMessage>,
    gold_response: String,
    trajectory_goal: String,
    gold_action: Action,
    goal_set: Vec<String>,
}

impl TryFrom<RawState> for ConversationTurnState {
    type Error = Error;

    fn try_from(raw: RawState) -> Result<Self> {
        ConversationTurnState::new(
            raw.task_info,
            raw.history,
            raw.gold_response,
            raw.trajectory_goal,
            raw.gold_action,
            raw.goal_set,
        )
    }
}

impl ConversationTurnState {
    pub fn new(
        task_info: impl Into<String>,
        history: Vec<DialogueMessage>,
        gold_response: impl Into<String>,
        trajectory_goal: impl Into<String>,
        gold_action: Action,
        goal_set: Vec<String>,
    ) -> Result<Self> {
        let state = ConversationTurnState {
            task_info: task_info.into(),
            history,
            gold_response: gold_response.into(),
            trajectory_goal: trajectory_goal.into(),
            gold_action,
            goal_set,
        };
        state.validate()?;
        Ok(state)
    }

    /// A state whose goal set is the single trajectory goal.
    pub fn single_goal(
        task_info: impl Into<String>,
        history: Vec<DialogueMessage>,
        gold_response: impl Into<String>,
        trajectory_goal: impl Into<String>,
        gold_action: Action,
    ) -> Result<Self> {
        let goal = trajectory_goal.into();
        Self::new(
            task_info,
            history,
            gold_response,
            goal.clone(),
            gold_action,
            vec![goal],
        )
    }

    pub fn validate(&self) -> Result<()> {
        check_alternation(&self.history)?;
        match self.history.last() {
            Some(m) if m.speaker == Speaker::User => {}
            Some(_) => {
                return Err(Error::InvalidTranscript(
                    "history must end with a USER message".into(),
                ))
            }
            None => return Err(Error::InvalidTranscript("history is empty".into())),
        }
        if self.gold_response.trim().is_empty() {
            return Err(Error::InvalidTranscript("gold_response is empty".into()));
        }
        if self.goal_set.is_empty() {
            return Err(Error::InvalidTranscript("goal_set is empty".into()));
        }
        if !self.goal_set.contains(&self.trajectory_goal) {
            return Err(Error::InvalidTranscript(
                "goal_set does not contain trajectory_goal".into(),
            ));
        }
        Ok(())
    }

    pub fn last_user_text(&self) -> &str {
        // validate() guarantees a trailing user message
        &self.history[self.history.len() - 1].text
    }

    pub fn user_texts(&self) -> impl Iterator<Item = &str> {
        self.history
            .iter()
            .filter(|m| m.speaker == Speaker::User)
            .map(|m| m.text.as_str())
    }

    /// Same state with a different trajectory goal (must be a member of the goal set).
    pub fn with_goal(&self, goal: &str) -> Result<Self> {
        if !self.goal_set.iter().any(|g| g == goal) {
            return Err(Error::Precondition(format!(
                "goal {goal:?} is not in the goal set"
            )));
        }
        let mut s = self.clone();
        s.trajectory_goal = goal.to_string();
        Ok(s)
    }

    /// Content hash over every field; stable across processes.
    pub fn fingerprint(&self) -> String {
        fingerprint(&serde_json::to_string(self).expect("state serialization is infallible"))
    }
}

/// Appends `msgs` to the state's history. Fails if alternation breaks or the
/// result no longer ends with a user message.
pub fn extend_state(
    state: &ConversationTurnState,
    msgs: &[DialogueMessage],
) -> Result<ConversationTurnState> {
    if msgs.is_empty() {
        return Ok(state.clone());
    }
    if let Some(last) = state.history.last() {
        if last.speaker == msgs[0].speaker {
            return Err(Error::InvalidTranscript(
                "extension does not alternate with existing history".into(),
            ));
        }
    }
    check_alternation(msgs)?;
    let mut next = state.clone();
    next.history.extend_from_slice(msgs);
    if next.history.last().map(|m| m.speaker) != Some(Speaker::User) {
        return Err(Error::InvalidTranscript(
            "extended history ends with a SYSTEM message; no user query to respond to".into(),
        ));
    }
    Ok(next)
}

/// A simulated exchange starting with a system response and ending with the
/// system's final answer (or its last clarification when the round cap hit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTrajectory")]
pub struct Trajectory {
    pub messages: Vec<DialogueMessage>,
    pub outcome: String,
    pub clarify_rounds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success: Option<bool>,
    #[serde(default)]
    pub cap_exceeded: bool,
}

#[derive(Deserialize)]
struct RawTrajectory {
    messages: Vec<DialogueMessage>,
    outcome: String,
    clarify_rounds: usize,
    #[serde(default)]
    success: Option<bool>,
    #[serde(default)]
    cap_exceeded: bool,
}

impl TryFrom<RawTrajectory> for Trajectory {
    type Error = Error;

    fn try_from(raw: RawTrajectory) -> Result<Self> {
        let mut t = Trajectory::new(raw.messages, raw.clarify_rounds, raw.cap_exceeded)?;
        if t.outcome != raw.outcome {
            return Err(Error::InvalidTranscript(
                "trajectory outcome differs from its final system message".into(),
            ));
        }
        t.success = raw.success;
        Ok(t)
    }
}

impl Trajectory {
    pub fn new(
        messages: Vec<DialogueMessage>,
        clarify_rounds: usize,
        cap_exceeded: bool,
    ) -> Result<Self> {
        if messages.first().map(|m| m.speaker) != Some(Speaker::System) {
            return Err(Error::InvalidTranscript(
                "trajectory must start with a SYSTEM message".into(),
            ));
        }
        if messages.last().map(|m| m.speaker) != Some(Speaker::System) {
            return Err(Error::InvalidTranscript(
                "trajectory must end with a SYSTEM message".into(),
            ));
        }
        check_alternation(&messages)?;
        let system_count = messages
            .iter()
            .filter(|m| m.speaker == Speaker::System)
            .count();
        if clarify_rounds > system_count {
            return Err(Error::InvalidTranscript(format!(
                "{clarify_rounds} clarify rounds but only {system_count} system messages"
            )));
        }
        let outcome = messages[messages.len() - 1].text.clone();
        Ok(Trajectory {
            messages,
            outcome,
            clarify_rounds,
            success: None,
            cap_exceeded,
        })
    }

    /// A trajectory consisting of one immediate system answer.
    pub fn single(text: impl Into<String>, provenance: Provenance) -> Result<Self> {
        let msg = DialogueMessage::with_provenance(Speaker::System, text, provenance)?;
        Trajectory::new(vec![msg], 0, false)
    }

    pub fn system_messages(&self) -> impl Iterator<Item = &DialogueMessage> {
        self.messages.iter().filter(|m| m.speaker == Speaker::System)
    }
}

/// A winning or losing side: a plain response or a full simulated trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Response {
    Text(String),
    Trajectory(Trajectory),
}

impl Response {
    pub fn as_text(&self) -> Option<&str> {
        match self {
            Response::Text(s) => Some(s),
            Response::Trajectory(_) => None,
        }
    }

    /// Text of the (final) system turn.
    pub fn final_text(&self) -> &str {
        match self {
            Response::Text(s) => s,
            Response::Trajectory(t) => &t.outcome,
        }
    }

    fn same_text(&self, other: &Response) -> bool {
        match (self, other) {
            (Response::Text(a), Response::Text(b)) => a.trim() == b.trim(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PairOrigin {
    Offline,
    OnpolicyLossReplaced,
    OnpolicyWinReplaced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub state: ConversationTurnState,
    pub rejected_action: Action,
    pub winning: Response,
    pub losing: Response,
    pub origin: PairOrigin,
}

impl PreferencePair {
    /// Offline pair: winning is the gold response verbatim.
    pub fn offline(state: ConversationTurnState, losing: impl Into<String>) -> Result<Self> {
        let pair = PreferencePair {
            rejected_action: state.gold_action.complement(),
            winning: Response::Text(state.gold_response.clone()),
            losing: Response::Text(losing.into()),
            origin: PairOrigin::Offline,
            state,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rejected_action != self.state.gold_action.complement() {
            return Err(Error::Contract(
                "rejected action is not the complement of the gold action".into(),
            ));
        }
        if self.origin == PairOrigin::Offline
            && self.winning.as_text() != Some(self.state.gold_response.as_str())
        {
            return Err(Error::Contract(
                "offline pair's winning response differs from the gold response".into(),
            ));
        }
        if self.winning.same_text(&self.losing) {
            return Err(Error::Contract(
                "winning and losing responses are identical".into(),
            ));
        }
        Ok(())
    }
}

/// Hex SHA-256 of a string.
pub fn fingerprint(text: &str) -> String {
    digest_bytes(text.as_bytes())
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes records one per line (trailing newline after each).
pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&to_jsonl(items)?)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| Error::Record {
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}
