//! The year-ambiguous table task.
//!
//! Every task is a small table of one financial metric for one entity over
//! two or three years. It yields three decision points: a query naming no
//! year (gold: ask which year), a query naming a year (gold: that year's
//! value), and the same ambiguous query after the year question has been
//! answered (gold: the value of the year the user gave). The user's hidden
//! goal for the ambiguous query is one seeded year of the table.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clients::{ScriptTable, ScriptedSimulator};
use crate::conversation::{Action, ConversationTurnState, DialogueMessage};
use crate::error::Result;
use crate::policy::candidates::{table_rows, YEAR_QUESTION};

const ENTITIES: [&str; 16] = [
    "IMFT", "Norvel", "Castine", "Brightwater", "Ardent Labs", "Kestrel", "Morrow Foods", "Quillon",
    "Halcyon", "Tidewell", "Orison", "Vantor", "Pellham", "Sablewood", "Corvane", "Elmstead",
];

const METRICS: [&str; 6] = [
    "total liabilities",
    "revenue",
    "net income",
    "operating expenses",
    "total assets",
    "cash and cash equivalents",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub entity: String,
    pub metric: String,
    /// `(year, value)` with the most recent year first.
    pub rows: Vec<(String, String)>,
    /// Index into `rows` of the year the user has in mind.
    pub goal_row: usize,
}

/// `1305` → `$1,305`.
pub fn dollars(v: u64) -> String {
    let digits = v.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    format!("${out}")
}

impl SyntheticTask {
    pub fn task_info(&self) -> String {
        let mut s = format!("[Table] {}\nentity: {}", self.metric, self.entity);
        for (y, v) in &self.rows {
            s.push_str(&format!("\n{y} | {v}"));
        }
        s
    }

    pub fn goal(&self) -> &str {
        &self.rows[self.goal_row].1
    }

    pub fn goal_year(&self) -> &str {
        &self.rows[self.goal_row].0
    }

    pub fn ambiguous_query(&self) -> String {
        format!("What were the {} of {}?", self.metric, self.entity)
    }

    /// The three decision points, in dialogue order.
    pub fn states(&self) -> Result<Vec<ConversationTurnState>> {
        let info = self.task_info();
        let goal = self.goal().to_string();
        let ambiguous = ConversationTurnState::single_goal(
            &info,
            vec![DialogueMessage::user(self.ambiguous_query())?],
            YEAR_QUESTION,
            &goal,
            Action::Clarify,
        )?;
        let explicit = ConversationTurnState::single_goal(
            &info,
            vec![DialogueMessage::user(format!(
                "What were the {} of {} in {}?",
                self.metric,
                self.entity,
                self.goal_year()
            ))?],
            &goal,
            &goal,
            Action::Answer,
        )?;
        let followup = ConversationTurnState::single_goal(
            &info,
            vec![
                DialogueMessage::user(self.ambiguous_query())?,
                DialogueMessage::system(YEAR_QUESTION)?,
                DialogueMessage::user(self.goal_year())?,
            ],
            &goal,
            &goal,
            Action::Answer,
        )?;
        Ok(vec![ambiguous, explicit, followup])
    }
}

/// `n` tasks with values unique across the whole set, so that a goal value
/// identifies its task.
pub fn synthetic_tasks(n: usize, seed: u64) -> Vec<SyntheticTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = BTreeSet::new();
    (0..n)
        .map(|i| {
            let years = rng.random_range(2..=3);
            let last = rng.random_range(2017..=2022u32);
            let rows = (0..years)
                .map(|k| {
                    let value = loop {
                        let v = dollars(rng.random_range(100..100_000u64));
                        if used.insert(v.clone()) {
                            break v;
                        }
                    };
                    ((last - k as u32).to_string(), value)
                })
                .collect::<Vec<_>>();
            SyntheticTask {
                entity: ENTITIES[i % ENTITIES.len()].to_string(),
                metric: METRICS.choose(&mut rng).expect("non-empty").to_string(),
                goal_row: rng.random_range(0..years),
                rows,
            }
        })
        .collect()
}

/// All decision points of `tasks`, in task order.
pub fn synthetic_states(tasks: &[SyntheticTask]) -> Result<Vec<ConversationTurnState>> {
    let mut out = Vec::new();
    for t in tasks {
        out.extend(t.states()?);
    }
    Ok(out)
}

/// Losing response the scripted generator writes: a guess at the first
/// table value for a clarification turn, the year question for an answer turn.
pub fn synthetic_losing(state: &ConversationTurnState) -> String {
    match state.gold_action {
        Action::Clarify => table_rows(&state.task_info)
            .first()
            .map(|r| r.1.clone())
            .unwrap_or_default(),
        Action::Answer => YEAR_QUESTION.to_string(),
    }
}

/// A goal-grounded simulator that answers the year question with the
/// goal's year.
pub fn synthetic_simulator(tasks: &[SyntheticTask]) -> ScriptedSimulator {
    let mut replies = ScriptTable::new();
    for t in tasks {
        replies.insert(t.goal(), t.goal_year());
    }
    ScriptedSimulator::goal_grounded(replies)
}

/// Splits tasks into train and held-out parts with a seeded shuffle.
pub fn split_tasks(mut tasks: Vec<SyntheticTask>, held_out: usize, seed: u64) -> (Vec<SyntheticTask>, Vec<SyntheticTask>) {
    tasks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = tasks.split_off(tasks.len().saturating_sub(held_out));
    (tasks, test)
}
