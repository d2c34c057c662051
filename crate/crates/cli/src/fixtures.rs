//! `act fixtures`: writes the bundled corpora with their scripted backends
//! and ready-to-run configs.
//!
//! ```text
//! <out>/synthetic/  train|validation|test.jsonl, generator.json, simulator.json, config.toml
//! <out>/ambigsql/   databases/*.sqlite, examples.jsonl, generator.json,
//!                   simulator.json, sql_answer.json, config.toml
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;

use act_core::ambigsql::{synthesize, SynthConfig, SqlExample};
use act_core::clients::{ConditionalGenerator, DecodingSettings, ScriptTable, ScriptedBackend, ScriptedSimulator};
use act_core::conversation::{write_jsonl, ConversationTurnState};
use act_core::fixtures::generator_script;
use act_core::fixtures::spider::{gap_script, materialize_databases, perturbation_script, spider_examples};
use act_core::fixtures::synthetic::{split_tasks, synthetic_losing, synthetic_simulator, synthetic_states, synthetic_tasks};
use act_core::prompts::PromptRegistry;

use crate::CliError;

pub const SYNTHETIC_TASKS: usize = 60;
pub const SYNTHETIC_TEST_TASKS: usize = 20;
pub const SYNTHETIC_VALIDATION_TASKS: usize = 10;

fn synthetic_config(seed: u64) -> String {
    format!(
        r#"profile = "toy"
seed = {seed}

[task]
kind = "SYNTHETIC"
heuristic = "drop_f1"

[data]
train = "train.jsonl"
validation = "validation.jsonl"
test = "test.jsonl"

[act]
num_batches = 60

[models.generator]
backend_kind = "SCRIPTED"
script_table = "generator.json"

[models.simulator]
kind = "SCRIPTED"
script = "simulator.json"
"#
    )
}

fn ambigsql_config(seed: u64) -> String {
    format!(
        r#"profile = "toy"
seed = {seed}

[task]
kind = "TEXT_TO_SQL"
heuristic = "execution_match"
candidate_space = "CORPUS"

[data]
databases = "databases"
sql_examples = "examples.jsonl"

[act]
num_batches = 40

[models.generator]
backend_kind = "SCRIPTED"
script_table = "generator.json"

[models.simulator]
kind = "SCRIPTED"
script = "simulator.json"
grounding = "TARGET_QUERY"

[models.sql_answer]
backend_kind = "SCRIPTED"
script_table = "sql_answer.json"

[synth]
seed = {seed}
"#
    )
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

pub fn write_synthetic(dir: &Path, seed: u64) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).with_context(|| format!("create {}", dir.display()))?;
    let tasks = synthetic_tasks(SYNTHETIC_TASKS, seed);
    let (rest, test) = split_tasks(tasks.clone(), SYNTHETIC_TEST_TASKS, seed);
    let (train, val) = split_tasks(rest, SYNTHETIC_VALIDATION_TASKS, seed.wrapping_add(1));
    let mut all = Vec::new();
    for (name, part) in [("train", &train), ("validation", &val), ("test", &test)] {
        let states = synthetic_states(part)?;
        write_jsonl(&dir.join(format!("{name}.jsonl")), &states)?;
        all.extend(states);
    }
    let registry = Arc::new(PromptRegistry::builtin());
    generator_script(&all, registry, &DecodingSettings::default(), synthetic_losing)?.save(&dir.join("generator.json"))?;
    synthetic_simulator(&tasks).save(&dir.join("simulator.json"))?;
    write(&dir.join("config.toml"), &synthetic_config(seed))
}

pub fn write_ambigsql(dir: &Path, seed: u64) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).with_context(|| format!("create {}", dir.display()))?;
    let envs = materialize_databases(&dir.join("databases"), Duration::from_secs(10))?;
    let examples = spider_examples(&envs)?;
    let inputs: Vec<SqlExample> = examples.iter().map(|(e, _)| e.clone()).collect();
    write_jsonl(&dir.join("examples.jsonl"), &inputs)?;

    let registry = Arc::new(PromptRegistry::builtin());
    let decoding = DecodingSettings::default();
    let mut table = perturbation_script(&examples, &registry, seed)?;
    // synthesize once here so the downstream scripts cover the exact corpus
    // `synth-ambigsql` will produce with this seed
    let gen = ConditionalGenerator::new(Arc::new(ScriptedBackend::new(table.clone())), registry.clone(), decoding.clone());
    let corpus = synthesize(&inputs, &gen, &SynthConfig { seed, ..Default::default() })?;

    let guesses: BTreeMap<(&str, &str), &str> = examples
        .iter()
        .map(|(e, a)| ((e.request.as_str(), e.gold_sql.as_str()), a.guess.as_str()))
        .collect();
    let mut losing: BTreeMap<String, String> = BTreeMap::new();
    let mut states: Vec<ConversationTurnState> = Vec::new();
    let mut replies = ScriptTable::new();
    for c in &corpus.conversations {
        let u = &c.unambiguous;
        let question = c.ambiguous[0].gold_response.clone();
        let guess = guesses[&(u.last_user_text(), u.gold_response.as_str())];
        losing.insert(u.fingerprint(), question.clone());
        losing.insert(c.ambiguous[0].fingerprint(), guess.to_string());
        losing.insert(c.ambiguous[1].fingerprint(), question);
        states.push(u.clone());
        states.extend(c.ambiguous.iter().cloned());
        replies.insert(&u.gold_response, u.last_user_text());
    }
    table.extend(generator_script(&states, registry.clone(), &decoding, |s| losing[&s.fingerprint()].clone())?);
    table.save(&dir.join("generator.json"))?;
    ScriptedSimulator::goal_grounded(replies).save(&dir.join("simulator.json"))?;
    gap_script(&corpus.conversations, &examples, registry)?.save(&dir.join("sql_answer.json"))?;
    write(&dir.join("config.toml"), &ambigsql_config(seed))
}

pub fn write_fixtures(out: &Path, seed: u64) -> Result<(), CliError> {
    write_synthetic(&out.join("synthetic"), seed)?;
    write_ambigsql(&out.join("ambigsql"), seed)?;
    println!("fixtures written to {}", out.display());
    Ok(())
}
