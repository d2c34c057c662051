//! Reading-comprehension states with goal sets: each story has an ambiguous
//! question with several admissible answers and a plain follow-up.

use std::sync::Arc;

use crate::clients::{ScriptTable, ScriptedSimulator};
use crate::conversation::{Action, ConversationTurnState, DialogueMessage};
use crate::error::Result;
use crate::policy::{CorpusCandidates, PolicyDecoding, ToyPolicy};
use crate::prompts::{PromptRegistry, STANDARD};

struct Story {
    text: &'static str,
    opener: (&'static str, &'static str),
    ambiguous: &'static str,
    question: &'static str,
    goals: &'static [&'static str],
    plain: (&'static str, &'static str),
}

const STORIES: [Story; 6] = [
    Story {
        text: "Mara walked to the market in the morning and to the harbor at dusk. She bought eggs at the market and soup at the harbor.",
        opener: ("Who is the story about?", "Mara."),
        ambiguous: "What did she buy?",
        question: "Do you mean at the market or at the harbor?",
        goals: &["eggs", "soup"],
        plain: ("When did she go to the harbor?", "at dusk"),
    },
    Story {
        text: "The twins Ana and Ben entered the race. Ana finished second and Ben finished fifth.",
        opener: ("What did the twins enter?", "The race."),
        ambiguous: "Where did the twin finish?",
        question: "Which twin are you asking about, Ana or Ben?",
        goals: &["second", "fifth"],
        plain: ("Who finished fifth?", "Ben"),
    },
    Story {
        text: "The museum has three wings. The east wing holds statues, the west wing holds maps, and the north wing holds coins.",
        opener: ("How many wings does the museum have?", "Three."),
        ambiguous: "What does the wing hold?",
        question: "Which wing do you mean?",
        goals: &["statues", "maps", "coins"],
        plain: ("Which wing holds maps?", "the west wing"),
    },
    Story {
        text: "Tom owns a red bicycle and a blue kayak. He rides the bicycle to work and paddles the kayak on weekends.",
        opener: ("Who owns the kayak?", "Tom."),
        ambiguous: "What color is it?",
        question: "Are you asking about the bicycle or the kayak?",
        goals: &["red", "blue"],
        plain: ("When does he paddle?", "on weekends"),
    },
    Story {
        text: "The bakery sells bread on Monday and cakes on Friday. The bread costs two dollars and the cakes cost nine dollars.",
        opener: ("What does the bakery sell?", "Bread and cakes."),
        ambiguous: "How much does it cost?",
        question: "Do you mean the bread or the cakes?",
        goals: &["two dollars", "nine dollars"],
        plain: ("When are cakes sold?", "on Friday"),
    },
    Story {
        text: "Lena wrote a letter to her aunt in Oslo and a postcard to her friend in Rome.",
        opener: ("Who wrote the letter?", "Lena."),
        ambiguous: "Where does the recipient live?",
        question: "Which recipient do you mean, the aunt or the friend?",
        goals: &["Oslo", "Rome"],
        plain: ("What did she send to her friend?", "a postcard"),
    },
];

pub struct GoalSetFixture {
    pub states: Vec<ConversationTurnState>,
    pub simulator: ScriptedSimulator,
    pub candidates: CorpusCandidates,
}

/// Reply the simulator gives when it is asked to clarify towards `goal`.
pub fn goal_reply(goal: &str) -> String {
    format!("I mean the one with {goal}.")
}

pub fn goal_set_fixture() -> Result<GoalSetFixture> {
    let mut states = Vec::new();
    let mut replies = ScriptTable::new();
    let mut candidates = CorpusCandidates::new();
    for s in &STORIES {
        let opener = vec![DialogueMessage::user(s.opener.0)?, DialogueMessage::system(s.opener.1)?];
        let mut h = opener.clone();
        h.push(DialogueMessage::user(s.ambiguous)?);
        let goals: Vec<String> = s.goals.iter().map(|g| g.to_string()).collect();
        states.push(ConversationTurnState::new(s.text, h, s.question, &goals[0], Action::Clarify, goals.clone())?);
        let mut h = opener;
        h.push(DialogueMessage::user(s.plain.0)?);
        states.push(ConversationTurnState::single_goal(s.text, h, s.plain.1, s.plain.1, Action::Answer)?);
        for g in &goals {
            replies.insert(g, goal_reply(g));
            candidates.add(s.text, g);
        }
        replies.insert(s.plain.1, goal_reply(s.plain.1));
        candidates.add(s.text, s.question);
        candidates.add(s.text, s.plain.1);
        candidates.add(s.text, s.opener.1);
    }
    Ok(GoalSetFixture {
        states,
        simulator: ScriptedSimulator::goal_grounded(replies),
        candidates,
    })
}

/// A hand-set policy over the fixture's candidates. It clarifies a first
/// question about as often as it answers, and after a clarification picks
/// the candidate overlapping the user's reply.
pub fn goal_set_policy(f: &GoalSetFixture) -> Result<ToyPolicy> {
    let p = ToyPolicy::new(
        Arc::new(f.candidates.clone()),
        Arc::new(PromptRegistry::builtin()),
        STANDARD,
        PolicyDecoding::default(),
    )?;
    let mut theta = vec![0.0; p.dim()];
    theta[p.action_offset(Action::Clarify)] = 1.0;
    theta[p.action_offset(Action::Answer) + 2] = 4.0;
    theta[p.candidate_offset() + 2] = 30.0;
    p.with_parameters(theta)
}
