//! Ambiguous text-to-SQL synthesis.
//!
//! Every single-turn request becomes two conversations over the same gold
//! query: the original (answer immediately) and a perturbed one in which a
//! facet of the request is masked, so the right first move is a clarifying
//! question whose answer is the original request.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::clients::{ConditionalGenerator, DecodingSettings, GenerationRequest, TextGenerator};
use crate::conversation::{digest_bytes, fingerprint, to_jsonl, Action, ConversationTurnState, DialogueMessage};
use crate::error::{Error, Result};
use crate::metrics::sql::{database_id_from_task_info, execution_match, SqlEnvironment, DATABASE_LINE_PREFIX};
use crate::prompts::{render_prompt, PerturbExemplar, PromptRegistry, PERTURB, SQL_ANSWER};
use crate::trainer::derive_seed;

/// Number of in-context demonstrations per perturbation prompt.
pub const PERTURB_SHOTS: usize = 5;

/// Line that separates the ambiguous request from the clarifying question
/// in a perturbation completion.
pub const QUESTION_CUE: &str =
    "Here is an appropriate clarifying question to recover the clear request from the ambiguous request:";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlExample {
    pub schema_text: String,
    pub request: String,
    pub gold_sql: String,
    pub database_id: String,
}

impl SqlExample {
    pub fn task_info(&self) -> String {
        format!("{DATABASE_LINE_PREFIX}{}\n{}", self.database_id, self.schema_text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AmbiguityKind {
    InfoMask,
    PopulationMask,
    PresentationMask,
}

impl AmbiguityKind {
    pub const ALL: [AmbiguityKind; 3] = [
        AmbiguityKind::InfoMask,
        AmbiguityKind::PopulationMask,
        AmbiguityKind::PresentationMask,
    ];

    pub fn masking_phrase(self) -> &'static str {
        match self {
            AmbiguityKind::InfoMask => "underspecifying the target columns",
            AmbiguityKind::PopulationMask => "underspecifying the target population",
            AmbiguityKind::PresentationMask => "underspecifying how the results are presented",
        }
    }

    fn exemplars(self, registry: &PromptRegistry) -> &[PerturbExemplar] {
        let ex = &registry.exemplars;
        match self {
            AmbiguityKind::InfoMask => &ex.perturb_info,
            AmbiguityKind::PopulationMask => &ex.perturb_population,
            AmbiguityKind::PresentationMask => &ex.perturb_presentation,
        }
    }
}

/// The unambiguous single-state conversation.
pub fn wrap_unambiguous(ex: &SqlExample) -> Result<ConversationTurnState> {
    ConversationTurnState::single_goal(
        ex.task_info(),
        vec![DialogueMessage::user(&ex.request)?],
        &ex.gold_sql,
        &ex.gold_sql,
        Action::Answer,
    )
}

fn order_or_limit() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(order\s+by|limit)\b").expect("valid regex"))
}

fn select_list() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?is)^\s*select\s+(?:distinct\s+)?(.*?)\s+from\b").expect("valid regex"))
}

fn plain_column() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[A-Za-z_][A-Za-z0-9_]*(\.[A-Za-z_][A-Za-z0-9_]*)?$").expect("valid regex"))
}

/// Splits on commas outside parentheses.
fn top_level_items(list: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in list.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(list[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(list[start..].trim());
    out
}

/// Whether the query shapes how results are presented: an ordering clause,
/// a row limit, or a first projection naming two or more plain columns.
pub fn is_presentation_query(sql: &str) -> bool {
    if order_or_limit().is_match(sql) {
        return true;
    }
    select_list()
        .captures(sql)
        .map(|c| {
            top_level_items(c.get(1).map_or("", |m| m.as_str()))
                .into_iter()
                .filter(|item| plain_column().is_match(item))
                .count()
                >= 2
        })
        .unwrap_or(false)
}

pub fn choose_perturbation(ex: &SqlExample, seed: u64) -> AmbiguityKind {
    if is_presentation_query(&ex.gold_sql) {
        return AmbiguityKind::PresentationMask;
    }
    let key = fingerprint(&format!("{}\0{}\0{}", ex.database_id, ex.request, ex.gold_sql));
    let k = u64::from_str_radix(&key[..16], 16).expect("hex fingerprint");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[k]));
    if rng.random::<bool>() {
        AmbiguityKind::InfoMask
    } else {
        AmbiguityKind::PopulationMask
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perturbed {
    pub ambiguous_request: String,
    pub clarifying_question: String,
}

fn perturb_block(schema: &str, sql: &str, request: &str, phrase: &str) -> String {
    format!(
        "{schema}\nThe target SQL query is the following:\n{sql}\nHere is a clear request that would correspond to this SQL query:\n\"{request}\"\nHere is the same request converted into an ambiguous format by {phrase}:\n"
    )
}

/// The perturbation prompt: five demonstrations for `kind`, then the target.
pub fn perturbation_prompt(registry: &PromptRegistry, ex: &SqlExample, kind: AmbiguityKind) -> Result<String> {
    let shots = kind.exemplars(registry);
    if shots.len() < PERTURB_SHOTS {
        return Err(Error::Config(format!(
            "{kind:?} needs {PERTURB_SHOTS} exemplars, {} registered",
            shots.len()
        )));
    }
    let mut examples = String::new();
    for s in &shots[..PERTURB_SHOTS] {
        examples.push_str(&perturb_block(&s.schema, &s.sql, &s.request, kind.masking_phrase()));
        examples.push_str(&format!("\"{}\"\n{QUESTION_CUE}\n\"{}\"\n\n", s.ambiguous, s.question));
    }
    registry.render(
        PERTURB,
        &[
            ("examples", &examples),
            ("schema", &ex.schema_text),
            ("sql", &ex.gold_sql),
            ("request", &ex.request),
            ("masking_phrase", kind.masking_phrase()),
        ],
    )
}

/// The completion a model is expected to produce for a perturbation prompt.
pub fn format_perturbation(p: &Perturbed) -> String {
    format!("\"{}\"\n{QUESTION_CUE}\n\"{}\"", p.ambiguous_request, p.clarifying_question)
}

fn unquote(s: &str) -> &str {
    let s = s.trim();
    let s = s.strip_prefix(['"', '\u{201c}']).unwrap_or(s);
    s.strip_suffix(['"', '\u{201d}']).unwrap_or(s).trim()
}

pub fn parse_perturbation(text: &str) -> Result<Perturbed> {
    let (amb, rest) = text
        .split_once(QUESTION_CUE)
        .ok_or_else(|| Error::Synthesis("completion has no clarifying-question section".into()))?;
    let question = rest.trim().lines().next().unwrap_or("");
    let p = Perturbed {
        ambiguous_request: unquote(amb).to_string(),
        clarifying_question: unquote(question).to_string(),
    };
    if p.ambiguous_request.is_empty() || p.clarifying_question.is_empty() {
        return Err(Error::Synthesis("completion is missing a field".into()));
    }
    Ok(p)
}

/// Asks the generator for a perturbation; one retry on a malformed completion.
pub fn perturb_request(gen: &ConditionalGenerator, ex: &SqlExample, kind: AmbiguityKind) -> Result<Perturbed> {
    let prompt = perturbation_prompt(gen.registry(), ex, kind)?;
    let mut last = None;
    for _ in 0..2 {
        match parse_perturbation(&gen.complete(&prompt)?) {
            Ok(p) => return Ok(p),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("two attempts"))
}

/// `[t1, t2]`: the ambiguous request (gold: the clarifying question), then
/// the same conversation after the clarification exchange (gold: the query).
pub fn assemble_ambiguous(ex: &SqlExample, p: &Perturbed) -> Result<Vec<ConversationTurnState>> {
    let info = ex.task_info();
    let ambiguous = DialogueMessage::user(&p.ambiguous_request)?;
    let t1 = ConversationTurnState::single_goal(
        &info,
        vec![ambiguous.clone()],
        &p.clarifying_question,
        &ex.gold_sql,
        Action::Clarify,
    )?;
    let t2 = ConversationTurnState::single_goal(
        &info,
        vec![
            ambiguous,
            DialogueMessage::system(&p.clarifying_question)?,
            DialogueMessage::user(&ex.request)?,
        ],
        &ex.gold_sql,
        &ex.gold_sql,
        Action::Answer,
    )?;
    Ok(vec![t1, t2])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    FirstN,
    Random,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default)]
    pub seed: u64,
    /// How many input examples to use; all when unset.
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default)]
    pub selection: Selection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbigConversation {
    pub kind: AmbiguityKind,
    pub unambiguous: ConversationTurnState,
    /// `[t1, t2]` as built by [`assemble_ambiguous`].
    pub ambiguous: Vec<ConversationTurnState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthStats {
    pub selected: usize,
    pub unambiguous: usize,
    pub ambiguous: usize,
    pub unique_schemas: usize,
    pub kinds: BTreeMap<AmbiguityKind, usize>,
    /// Selected-example positions whose synthesis failed.
    pub skipped: Vec<usize>,
    pub selection: Selection,
    pub seed: u64,
    pub corpus_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbigCorpus {
    pub conversations: Vec<AmbigConversation>,
    pub stats: SynthStats,
}

impl AmbigCorpus {
    /// Every state: per conversation the unambiguous one, then t1 and t2.
    pub fn states(&self) -> Vec<ConversationTurnState> {
        self.conversations
            .iter()
            .flat_map(|c| std::iter::once(c.unambiguous.clone()).chain(c.ambiguous.iter().cloned()))
            .collect()
    }
}

fn select(examples: &[SqlExample], cfg: &SynthConfig) -> Vec<SqlExample> {
    let n = cfg.limit.unwrap_or(examples.len()).min(examples.len());
    match cfg.selection {
        Selection::FirstN => examples[..n].to_vec(),
        Selection::Random => {
            let mut idx: Vec<usize> = (0..examples.len()).collect();
            rand::seq::SliceRandom::shuffle(&mut idx[..], &mut ChaCha8Rng::seed_from_u64(cfg.seed));
            let mut keep = idx[..n].to_vec();
            keep.sort_unstable();
            keep.into_iter().map(|i| examples[i].clone()).collect()
        }
    }
}

/// Synthesizes the paired corpus. A failed synthesis drops both members of
/// the pair; backend failures abort.
pub fn synthesize(examples: &[SqlExample], gen: &ConditionalGenerator, cfg: &SynthConfig) -> Result<AmbigCorpus> {
    let chosen = select(examples, cfg);
    let results: Vec<Result<Option<AmbigConversation>>> = chosen
        .par_iter()
        .map(|ex| {
            let kind = choose_perturbation(ex, cfg.seed);
            let p = match perturb_request(gen, ex, kind) {
                Ok(p) => p,
                Err(Error::Synthesis(m)) => {
                    log::warn!("skipping {:?}: {m}", ex.request);
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            Ok(Some(AmbigConversation {
                kind,
                unambiguous: wrap_unambiguous(ex)?,
                ambiguous: assemble_ambiguous(ex, &p)?,
            }))
        })
        .collect();
    let mut conversations = Vec::new();
    let mut skipped = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r? {
            Some(c) => conversations.push(c),
            None => skipped.push(i),
        }
    }
    let mut kinds: BTreeMap<AmbiguityKind, usize> = BTreeMap::new();
    for c in &conversations {
        *kinds.entry(c.kind).or_default() += 1;
    }
    let schemas: BTreeSet<&str> = conversations.iter().map(|c| c.unambiguous.task_info.as_str()).collect();
    let unique_schemas = schemas.len();
    let corpus_digest = digest_bytes(&to_jsonl(&conversations)?);
    Ok(AmbigCorpus {
        stats: SynthStats {
            selected: chosen.len(),
            unambiguous: conversations.len(),
            ambiguous: conversations.len(),
            unique_schemas,
            kinds,
            skipped,
            selection: cfg.selection,
            seed: cfg.seed,
            corpus_digest,
        },
        conversations,
    })
}

/// A text-to-SQL model prompted with the answer-only template.
#[derive(Clone)]
pub struct SqlAnswerer {
    backend: Arc<dyn TextGenerator>,
    registry: Arc<PromptRegistry>,
    pub decoding: DecodingSettings,
}

impl SqlAnswerer {
    pub fn new(backend: Arc<dyn TextGenerator>, registry: Arc<PromptRegistry>, decoding: DecodingSettings) -> Self {
        SqlAnswerer {
            backend,
            registry,
            decoding,
        }
    }

    pub fn prompt_for(&self, state: &ConversationTurnState) -> Result<String> {
        render_prompt(&self.registry, state, SQL_ANSWER)
    }

    pub fn answer(&self, state: &ConversationTurnState) -> Result<String> {
        let req = GenerationRequest::new(self.prompt_for(state)?, &self.decoding)?;
        Ok(self.backend.generate(&req)?.trim().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    /// Execution match prompting with the ambiguous request alone, in [0, 1].
    pub no_clarify_match: f64,
    /// Execution match with the gold clarification exchange included.
    pub with_clarify_match: f64,
    pub support: usize,
}

/// Execution match of `answerer` on every ambiguous conversation, without
/// and with the clarification turns in the prompt.
pub fn gap_analysis(
    answerer: &SqlAnswerer,
    corpus: &[AmbigConversation],
    envs: &BTreeMap<String, SqlEnvironment>,
) -> Result<GapReport> {
    let scored: Vec<(bool, bool)> = corpus
        .par_iter()
        .map(|c| {
            let [t1, t2] = c.ambiguous.as_slice() else {
                return Err(Error::Precondition("ambiguous conversation must have two states".into()));
            };
            let db = database_id_from_task_info(&t1.task_info)
                .ok_or_else(|| Error::Precondition("state names no database".into()))?;
            let env = envs
                .get(db)
                .ok_or_else(|| Error::Environment(format!("no fixture database {db:?}")))?;
            let gold = &t1.trajectory_goal;
            let without = execution_match(&answerer.answer(t1)?, gold, env)?.matched;
            let with = execution_match(&answerer.answer(t2)?, gold, env)?.matched;
            Ok((without, with))
        })
        .collect::<Result<_>>()?;
    let n = scored.len();
    let rate = |f: fn(&(bool, bool)) -> bool| {
        if n == 0 {
            0.0
        } else {
            scored.iter().filter(|s| f(s)).count() as f64 / n as f64
        }
    };
    Ok(GapReport {
        no_clarify_match: rate(|s| s.0),
        with_clarify_match: rate(|s| s.1),
        support: n,
    })
}
