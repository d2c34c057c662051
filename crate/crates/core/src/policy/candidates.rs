//! Finite per-state candidate sets and features for the toy policy.
//!
//! A candidate space supplies, for each state, the state features φ(s) and
//! the candidate responses with their action and candidate features ψ(c, s).

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::clients::rule_action;
use crate::conversation::{fingerprint, Action, ConversationTurnState, Speaker};
use crate::error::{Error, Result};
use crate::metrics::similarity::jaccard;

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub text: String,
    pub action: Action,
    pub features: Vec<f64>,
}

pub trait CandidateSpace: Send + Sync {
    /// Length of φ(s).
    fn state_dim(&self) -> usize;
    /// Length of ψ(c, s).
    fn candidate_dim(&self) -> usize;
    fn state_features(&self, state: &ConversationTurnState) -> Vec<f64>;
    /// Distinct candidate texts with their actions and features.
    fn candidates(&self, state: &ConversationTurnState) -> Result<Vec<Candidate>>;
    /// Stable identity of the space, recorded in checkpoints.
    fn descriptor(&self) -> String;
}

/// The same candidates for every state; φ is a constant bias and ψ a one-hot
/// candidate id, so every candidate has its own free logit.
#[derive(Debug, Clone)]
pub struct FixedCandidates {
    entries: Vec<(String, Action)>,
}

impl FixedCandidates {
    pub fn new(entries: Vec<(String, Action)>) -> Result<Self> {
        let distinct: BTreeSet<&String> = entries.iter().map(|(t, _)| t).collect();
        if entries.is_empty() || distinct.len() != entries.len() {
            return Err(Error::Config("fixed candidates must be non-empty and distinct".into()));
        }
        Ok(FixedCandidates { entries })
    }
}

impl CandidateSpace for FixedCandidates {
    fn state_dim(&self) -> usize {
        1
    }
    fn candidate_dim(&self) -> usize {
        self.entries.len()
    }
    fn state_features(&self, _state: &ConversationTurnState) -> Vec<f64> {
        vec![1.0]
    }
    fn candidates(&self, _state: &ConversationTurnState) -> Result<Vec<Candidate>> {
        let n = self.entries.len();
        Ok(self
            .entries
            .iter()
            .enumerate()
            .map(|(i, (text, action))| {
                let mut features = vec![0.0; n];
                features[i] = 1.0;
                Candidate {
                    text: text.clone(),
                    action: *action,
                    features,
                }
            })
            .collect())
    }
    fn descriptor(&self) -> String {
        let joined: Vec<String> = self.entries.iter().map(|(t, a)| format!("{a}:{t}")).collect();
        format!("fixed:{}", fingerprint(&joined.join("\n")))
    }
}

/// The clarifying question offered by [`SyntheticCandidates`].
pub const YEAR_QUESTION: &str = "Which year are you asking about?";

fn year_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(1[89]\d\d|20\d\d)\b").expect("valid regex"))
}

fn row_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(\d{4})\s*\|\s*(.+?)\s*$").expect("valid regex"))
}

/// `(year, value)` rows of a table grounding text (`2018 | $1,305`).
pub fn table_rows(task_info: &str) -> Vec<(String, String)> {
    task_info
        .lines()
        .filter_map(|l| row_regex().captures(l))
        .map(|c| (c[1].to_string(), c[2].to_string()))
        .collect()
}

fn years_in(text: &str) -> BTreeSet<String> {
    year_regex()
        .find_iter(text)
        .map(|m| m.as_str().to_string())
        .collect()
}

/// Candidates for the year-ambiguous table task: the year question plus one
/// answer per table row.
///
/// φ(s) is a one-hot over three dialogue situations: the last user message
/// names no table year and follows no question; it names a table year and
/// follows no question; it follows a system question. ψ(c, s) for an answer
/// candidate is `[its year was named by the user, another year was named
/// instead]`, and zero for the question.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticCandidates;

impl SyntheticCandidates {
    fn situation(state: &ConversationTurnState, table_years: &BTreeSet<String>) -> usize {
        let n = state.history.len();
        let follows_question = n >= 2
            && state.history[n - 2].speaker == Speaker::System
            && rule_action(&state.history[n - 2].text) == Action::Clarify;
        let names_year = years_in(state.last_user_text())
            .iter()
            .any(|y| table_years.contains(y));
        match (follows_question, names_year) {
            (true, _) => 2,
            (false, true) => 1,
            (false, false) => 0,
        }
    }
}

impl CandidateSpace for SyntheticCandidates {
    fn state_dim(&self) -> usize {
        3
    }
    fn candidate_dim(&self) -> usize {
        2
    }
    fn state_features(&self, state: &ConversationTurnState) -> Vec<f64> {
        let years: BTreeSet<String> = table_rows(&state.task_info).into_iter().map(|r| r.0).collect();
        let mut phi = vec![0.0; 3];
        phi[Self::situation(state, &years)] = 1.0;
        phi
    }
    fn candidates(&self, state: &ConversationTurnState) -> Result<Vec<Candidate>> {
        let rows = table_rows(&state.task_info);
        if rows.is_empty() {
            return Err(Error::Scoring("grounding text has no year rows".into()));
        }
        let table_years: BTreeSet<&str> = rows.iter().map(|r| r.0.as_str()).collect();
        let mentioned: BTreeSet<String> = state
            .user_texts()
            .flat_map(years_in)
            .filter(|y| table_years.contains(y.as_str()))
            .collect();
        let mut out = vec![Candidate {
            text: YEAR_QUESTION.to_string(),
            action: Action::Clarify,
            features: vec![0.0, 0.0],
        }];
        let mut seen = BTreeSet::new();
        for (year, value) in rows {
            if !seen.insert(value.clone()) {
                continue;
            }
            let named = mentioned.contains(&year);
            let other = !named && !mentioned.is_empty();
            out.push(Candidate {
                text: value,
                action: Action::Answer,
                features: vec![named as u8 as f64, other as u8 as f64],
            });
        }
        Ok(out)
    }
    fn descriptor(&self) -> String {
        "synthetic-year-table:v1".into()
    }
}

/// Fallback clarifying question available in every corpus pool.
pub const GENERIC_QUESTION: &str = "Could you clarify what you are asking about?";

/// Responses pooled per grounding text from a corpus; a retrieval-style
/// space for real datasets.
///
/// φ(s) = `[1, last user message ends with "?", previous system turn was a
/// question, ln(1 + user words) / 5]`. ψ(c, s) = Jaccard overlap of the
/// candidate with the whole user history, with the grounding text, and with
/// the last user message. Actions come from the rule classifier.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusCandidates {
    pools: BTreeMap<String, BTreeSet<String>>,
}

impl CorpusCandidates {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, task_info: &str, text: &str) {
        if text.trim().is_empty() {
            return;
        }
        self.pools
            .entry(task_info.to_string())
            .or_default()
            .insert(text.to_string());
    }

    /// Pools every system-side text of the given states.
    pub fn add_states<'a>(&mut self, states: impl IntoIterator<Item = &'a ConversationTurnState>) {
        for s in states {
            self.add(&s.task_info, &s.gold_response);
            for m in s.history.iter().filter(|m| m.speaker == Speaker::System) {
                self.add(&s.task_info, &m.text);
            }
        }
    }

    pub fn pool_count(&self) -> usize {
        self.pools.len()
    }
}

impl CandidateSpace for CorpusCandidates {
    fn state_dim(&self) -> usize {
        4
    }
    fn candidate_dim(&self) -> usize {
        3
    }
    fn state_features(&self, state: &ConversationTurnState) -> Vec<f64> {
        let n = state.history.len();
        let last = state.last_user_text();
        let prev_q = n >= 2 && rule_action(&state.history[n - 2].text) == Action::Clarify;
        let words: usize = state.user_texts().map(|t| t.split_whitespace().count()).sum();
        vec![
            1.0,
            last.trim_end().ends_with('?') as u8 as f64,
            prev_q as u8 as f64,
            (1.0 + words as f64).ln() / 5.0,
        ]
    }
    fn candidates(&self, state: &ConversationTurnState) -> Result<Vec<Candidate>> {
        let users: Vec<&str> = state.user_texts().collect();
        let user_text = users.join(" ");
        let last = state.last_user_text();
        let mut texts: BTreeSet<&str> = self
            .pools
            .get(&state.task_info)
            .map(|p| p.iter().map(String::as_str).collect())
            .unwrap_or_default();
        texts.insert(GENERIC_QUESTION);
        Ok(texts
            .into_iter()
            .map(|t| Candidate {
                text: t.to_string(),
                action: rule_action(t),
                features: vec![
                    jaccard(t, &user_text),
                    jaccard(t, &state.task_info),
                    jaccard(t, last),
                ],
            })
            .collect())
    }
    fn descriptor(&self) -> String {
        format!(
            "corpus:{}",
            fingerprint(&serde_json::to_string(&self.pools).expect("serializable pools"))
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conversation::DialogueMessage;

    const TABLE: &str = "[Table] total liabilities\nentity: IMFT\n2019 | $909\n2018 | $1,305";

    fn state(msgs: &[(Speaker, &str)]) -> ConversationTurnState {
        let history = msgs
            .iter()
            .map(|(s, t)| DialogueMessage::with_provenance(*s, *t, Default::default()).unwrap())
            .collect();
        ConversationTurnState::single_goal(TABLE, history, "$1,305", "$1,305", Action::Answer).unwrap()
    }

    #[test]
    fn synthetic_situations() {
        let sp = SyntheticCandidates;
        let amb = state(&[(Speaker::User, "What were the total liabilities of IMFT?")]);
        assert_eq!(sp.state_features(&amb), vec![1.0, 0.0, 0.0]);
        let explicit = state(&[(Speaker::User, "What were the total liabilities of IMFT in 2018?")]);
        assert_eq!(sp.state_features(&explicit), vec![0.0, 1.0, 0.0]);
        let after = state(&[
            (Speaker::User, "What were the total liabilities of IMFT?"),
            (Speaker::System, YEAR_QUESTION),
            (Speaker::User, "2018"),
        ]);
        assert_eq!(sp.state_features(&after), vec![0.0, 0.0, 1.0]);
        let c = sp.candidates(&after).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c[0].action, Action::Clarify);
        assert_eq!((c[1].text.as_str(), c[1].features.clone()), ("$909", vec![0.0, 1.0]));
        assert_eq!((c[2].text.as_str(), c[2].features.clone()), ("$1,305", vec![1.0, 0.0]));
        let c = sp.candidates(&amb).unwrap();
        assert!(c.iter().all(|c| c.features == vec![0.0, 0.0]));
    }

    #[test]
    fn fixed_candidates_one_hot() {
        let sp = FixedCandidates::new(vec![("a".into(), Action::Answer), ("b?".into(), Action::Clarify)]).unwrap();
        let c = sp.candidates(&state(&[(Speaker::User, "q")])).unwrap();
        assert_eq!(c[1].features, vec![0.0, 1.0]);
        assert!(FixedCandidates::new(vec![("a".into(), Action::Answer), ("a".into(), Action::Clarify)]).is_err());
    }

    #[test]
    fn corpus_pools_by_grounding() {
        let mut sp = CorpusCandidates::new();
        sp.add(TABLE, "$1,305");
        sp.add(TABLE, "$909");
        sp.add("other", "elsewhere");
        let c = sp.candidates(&state(&[(Speaker::User, "What in 2018?")])).unwrap();
        let texts: Vec<&str> = c.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, vec!["$1,305", "$909", GENERIC_QUESTION]);
        assert_eq!(c[2].action, Action::Clarify);
    }
}
