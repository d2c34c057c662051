//! A small Spider-style text-to-SQL corpus: four SQLite databases and forty
//! annotated requests. Each request carries hand-written masked variants so
//! the perturbation model and the answer-only SQL model can be scripted.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;

use crate::ambigsql::{
    choose_perturbation, format_perturbation, gap_analysis, perturbation_prompt, synthesize, AmbigConversation,
    AmbigCorpus, AmbiguityKind, GapReport, Perturbed, SqlAnswerer, SqlExample, SynthConfig,
};
use crate::clients::{ConditionalGenerator, DecodingSettings, ScriptTable, ScriptedBackend};
use crate::error::{Error, Result};
use crate::metrics::sql::SqlEnvironment;
use crate::prompts::PromptRegistry;

pub const DATABASES: [(&str, &str); 4] = [
    ("concert_singer", include_str!("../../fixtures/spider/concert_singer.sql")),
    ("flight_2", include_str!("../../fixtures/spider/flight_2.sql")),
    ("dog_kennels", include_str!("../../fixtures/spider/dog_kennels.sql")),
    ("employee_hire", include_str!("../../fixtures/spider/employee_hire.sql")),
];

const EXAMPLES: &str = include_str!("../../fixtures/spider/examples.json");

#[derive(Debug, Clone, Deserialize)]
pub struct AnnotatedExample {
    pub db: String,
    pub request: String,
    pub sql: String,
    #[serde(default)]
    pub info: Option<[String; 2]>,
    #[serde(default)]
    pub population: Option<[String; 2]>,
    #[serde(default)]
    pub presentation: Option<[String; 2]>,
    /// What an answer-only model plausibly writes from the masked request alone.
    pub guess: String,
}

impl AnnotatedExample {
    pub fn variant(&self, kind: AmbiguityKind) -> Option<Perturbed> {
        let pair = match kind {
            AmbiguityKind::InfoMask => &self.info,
            AmbiguityKind::PopulationMask => &self.population,
            AmbiguityKind::PresentationMask => &self.presentation,
        };
        pair.as_ref().map(|[a, q]| Perturbed {
            ambiguous_request: a.clone(),
            clarifying_question: q.clone(),
        })
    }
}

pub fn annotated_examples() -> Result<Vec<AnnotatedExample>> {
    Ok(serde_json::from_str(EXAMPLES)?)
}

/// Writes every fixture database under `dir` and opens it.
pub fn materialize_databases(dir: &Path, timeout: Duration) -> Result<BTreeMap<String, SqlEnvironment>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    DATABASES
        .iter()
        .map(|(id, seed)| {
            let env = SqlEnvironment::materialize(id, seed, &dir.join(format!("{id}.sqlite")), timeout)?;
            Ok((id.to_string(), env))
        })
        .collect()
}

/// Fixture requests as synthesis inputs, paired with their annotations.
pub fn spider_examples(envs: &BTreeMap<String, SqlEnvironment>) -> Result<Vec<(SqlExample, AnnotatedExample)>> {
    let mut schemas = BTreeMap::new();
    for (id, env) in envs {
        schemas.insert(id.clone(), env.schema_text()?);
    }
    annotated_examples()?
        .into_iter()
        .map(|a| {
            let schema_text = schemas
                .get(&a.db)
                .ok_or_else(|| Error::Environment(format!("no fixture database {:?}", a.db)))?
                .clone();
            Ok((
                SqlExample {
                    schema_text,
                    request: a.request.clone(),
                    gold_sql: a.sql.clone(),
                    database_id: a.db.clone(),
                },
                a,
            ))
        })
        .collect()
}

/// Scripted perturbation model: answers each example's prompt for the kind
/// chosen under `seed` with the hand-written variant.
pub fn perturbation_script(
    examples: &[(SqlExample, AnnotatedExample)],
    registry: &PromptRegistry,
    seed: u64,
) -> Result<ScriptTable> {
    let mut table = ScriptTable::new();
    for (ex, ann) in examples {
        let kind = choose_perturbation(ex, seed);
        let p = ann
            .variant(kind)
            .ok_or_else(|| Error::Precondition(format!("no {kind:?} variant for {:?}", ex.request)))?;
        table.insert(&perturbation_prompt(registry, ex, kind)?, format_perturbation(&p));
    }
    Ok(table)
}

/// Scripted answer-only SQL model: the annotated guess when prompted with
/// the masked request alone, the gold query once the clarification is in.
pub fn gap_script(
    corpus: &[AmbigConversation],
    examples: &[(SqlExample, AnnotatedExample)],
    registry: Arc<PromptRegistry>,
) -> Result<ScriptTable> {
    let guesses: BTreeMap<(&str, &str), &str> = examples
        .iter()
        .map(|(ex, a)| ((ex.request.as_str(), ex.gold_sql.as_str()), a.guess.as_str()))
        .collect();
    let probe = SqlAnswerer::new(
        Arc::new(ScriptedBackend::new(ScriptTable::new())),
        registry,
        DecodingSettings::default(),
    );
    let mut table = ScriptTable::new();
    for c in corpus {
        let [t1, t2] = c.ambiguous.as_slice() else {
            return Err(Error::Precondition("ambiguous conversation must have two states".into()));
        };
        let request = t2.last_user_text();
        let guess = guesses
            .get(&(request, t2.gold_response.as_str()))
            .ok_or_else(|| Error::Precondition(format!("no annotated guess for {request:?}")))?;
        table.insert(&probe.prompt_for(t1)?, *guess);
        table.insert(&probe.prompt_for(t2)?, t2.gold_response.clone());
    }
    Ok(table)
}

/// The fixture databases, examples and a corpus synthesized from them with
/// the scripted perturbation model.
pub struct ScriptedSynthesis {
    pub envs: BTreeMap<String, SqlEnvironment>,
    pub examples: Vec<(SqlExample, AnnotatedExample)>,
    pub corpus: AmbigCorpus,
    pub registry: Arc<PromptRegistry>,
}

pub fn scripted_synthesis(db_dir: &Path, seed: u64) -> Result<ScriptedSynthesis> {
    let envs = materialize_databases(db_dir, Duration::from_secs(5))?;
    let examples = spider_examples(&envs)?;
    let registry = Arc::new(PromptRegistry::builtin());
    let table = perturbation_script(&examples, &registry, seed)?;
    let gen = ConditionalGenerator::new(Arc::new(ScriptedBackend::new(table)), registry.clone(), DecodingSettings::default());
    let inputs: Vec<SqlExample> = examples.iter().map(|(e, _)| e.clone()).collect();
    let corpus = synthesize(&inputs, &gen, &SynthConfig { seed, ..Default::default() })?;
    Ok(ScriptedSynthesis {
        envs,
        examples,
        corpus,
        registry,
    })
}

impl ScriptedSynthesis {
    /// Execution-match gap of the scripted answer-only SQL model.
    pub fn gap(&self) -> Result<GapReport> {
        let table = gap_script(&self.corpus.conversations, &self.examples, self.registry.clone())?;
        let answerer = SqlAnswerer::new(Arc::new(ScriptedBackend::new(table)), self.registry.clone(), DecodingSettings::default());
        gap_analysis(&answerer, &self.corpus.conversations, &self.envs)
    }
}
