//! Subcommand implementations. Each validates its configuration, writes a
//! config snapshot into its run directory, and writes nothing elsewhere.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use act_core::ambigsql::{gap_analysis, synthesize, AmbigConversation, SqlAnswerer, SqlExample};
use act_core::clients::{
    ActionClassifier, ConditionalGenerator, PromptedClassifier, PromptedSimulator, RuleClassifier,
    ScriptedSimulator, TextGenerator, UserSimulator,
};
use act_core::conversation::{read_jsonl, write_jsonl, ConversationTurnState, PreferencePair, Response};
use act_core::eval::{compare_runs, evaluate, EvalReport};
use act_core::metrics::heuristic::{build_heuristic, HeuristicContext};
use act_core::metrics::similarity::RemoteEmbeddingSimilarity;
use act_core::metrics::{Heuristic, JaccardSimilarity, SqlEnvironment};
use act_core::policy::{CandidateSpace, Checkpoint, CorpusCandidates, Policy, SyntheticCandidates, ToyPolicy};
use act_core::prefs::{build_and_write, read_pairs, PAIRS_FILE};
use act_core::prompts::PromptRegistry;
use act_core::trainer::{act_train, Oracles, TrainOptions, BEST_CHECKPOINT, FINAL_CHECKPOINT};

use crate::config::{CandidateSpaceKind, RunConfig, SimulatorKind};
use crate::{CliError, Command, Common};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const RUN_RECORD: &str = "run.json";
pub const CANDIDATES_FILE: &str = "candidates.json";
pub const VALIDATION_DIR: &str = "validation";
pub const REPORT_FILE: &str = "report.json";
pub const CORPUS_FILE: &str = "corpus.jsonl";
const SQL_TIMEOUT: Duration = Duration::from_secs(10);

/// Written next to the config snapshot in every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config_digest: String,
    pub seed: u64,
    pub version: String,
    /// Digests of the stage's main outputs.
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
}

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::BuildPrefs { common, data } => build_prefs(&common, data.as_deref()),
        Command::SynthAmbigsql { common } => synth_ambigsql(&common),
        Command::Train { common, prefs, mode } => train(&common, &prefs, mode),
        Command::Evaluate {
            common,
            checkpoint,
            final_checkpoint,
            data,
        } => evaluate_cmd(&common, &checkpoint, final_checkpoint, data.as_deref()),
        Command::GapAnalysis { common, corpus } => gap(&common, &corpus),
        Command::Report { run_dir, runs } => report(&run_dir, &runs),
        Command::Fixtures { out, seed } => crate::fixtures::write_fixtures(&out, seed),
    }
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

/// Loads the config, applies command-line overrides, and validates.
fn load_config(common: &Common, tweak: impl FnOnce(&mut RunConfig)) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    tweak(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn use_split_dir(cfg: &mut RunConfig, dir: &Path) {
    cfg.data.train = Some(dir.join("train.jsonl"));
    cfg.data.validation = Some(dir.join("validation.jsonl"));
    cfg.data.test = Some(dir.join("test.jsonl"));
}

fn create_run_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).with_context(|| format!("create {}", dir.display()))?;
    Ok(())
}

fn write_record(dir: &Path, command: &str, cfg: &RunConfig, outputs: BTreeMap<String, String>) -> Result<RunRecord, CliError> {
    create_run_dir(dir)?;
    std::fs::write(dir.join(CONFIG_SNAPSHOT), cfg.to_toml()?).context("write config snapshot")?;
    let record = RunRecord {
        command: command.into(),
        config_digest: cfg.digest()?,
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").into(),
        outputs,
    };
    write_json(&dir.join(RUN_RECORD), &record)?;
    Ok(record)
}

pub fn read_record(dir: &Path) -> Result<RunRecord, CliError> {
    let path = dir.join(RUN_RECORD);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Config(format!("{} is not a run directory: {e}", dir.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    std::fs::write(path, text).with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn required<'a, T>(value: &'a Option<T>, field: &str) -> Result<&'a T, CliError> {
    value
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("{field}: required by this command")))
}

fn registry() -> Arc<PromptRegistry> {
    Arc::new(PromptRegistry::builtin())
}

fn backend(cfg: &Option<act_core::clients::ModelBackendConfig>, field: &str) -> Result<Arc<dyn TextGenerator>, CliError> {
    Ok(required(cfg, field)?.build(Path::new(""))?)
}

fn generator(cfg: &RunConfig, registry: Arc<PromptRegistry>) -> Result<ConditionalGenerator, CliError> {
    Ok(ConditionalGenerator::new(
        backend(&cfg.models.generator, "models.generator")?,
        registry,
        cfg.models.decoding.clone(),
    ))
}

fn classifier(cfg: &RunConfig, registry: Arc<PromptRegistry>) -> Result<Arc<dyn ActionClassifier>, CliError> {
    Ok(match &cfg.models.classifier {
        None => Arc::new(RuleClassifier),
        Some(b) => Arc::new(PromptedClassifier::new(
            b.build(Path::new(""))?,
            registry,
            cfg.models.decoding.clone(),
            b.retry_limit,
        )),
    })
}

fn simulator(cfg: &RunConfig, registry: Arc<PromptRegistry>) -> Result<Arc<dyn UserSimulator>, CliError> {
    let s = required(&cfg.models.simulator, "models.simulator")?;
    Ok(match s.kind {
        SimulatorKind::Scripted => Arc::new(ScriptedSimulator::load(required(&s.script, "models.simulator.script")?)?),
        SimulatorKind::Prompted => Arc::new(PromptedSimulator::new(
            backend(&s.backend, "models.simulator.backend")?,
            registry,
            cfg.models.decoding.clone(),
            s.grounding,
        )),
    })
}

pub fn sql_environments(dir: &Path) -> Result<BTreeMap<String, SqlEnvironment>, CliError> {
    let mut envs = BTreeMap::new();
    let entries = std::fs::read_dir(dir).with_context(|| format!("list {}", dir.display()))?;
    for entry in entries {
        let path = entry.map_err(runtime)?.path();
        if path.extension().is_some_and(|e| e == "sqlite") {
            let id = path.file_stem().expect("file name").to_string_lossy().into_owned();
            envs.insert(id.clone(), SqlEnvironment::open(&id, &path, SQL_TIMEOUT)?);
        }
    }
    Ok(envs)
}

fn heuristic(cfg: &RunConfig) -> Result<Arc<dyn Heuristic>, CliError> {
    let mut ctx = HeuristicContext {
        similarity: Some(Arc::new(JaccardSimilarity)),
        ..Default::default()
    };
    if let Some(s) = &cfg.models.similarity {
        let token = act_core::clients::remote::JsonEndpoint::token_from_env(s.auth_env_var.as_deref())?;
        ctx.similarity = Some(Arc::new(RemoteEmbeddingSimilarity::new(&s.endpoint, token, 2, SQL_TIMEOUT * 6)?));
    }
    if let Some(dir) = &cfg.data.databases {
        ctx.sql_environments = sql_environments(dir)?;
    }
    Ok(build_heuristic(&cfg.task.heuristic, &ctx)?)
}

fn states(path: &Option<PathBuf>, field: &str) -> Result<Vec<ConversationTurnState>, CliError> {
    let path = required(path, field)?;
    let out: Vec<ConversationTurnState> = read_jsonl(path)?;
    for s in &out {
        s.validate()?;
    }
    Ok(out)
}

fn build_prefs(common: &Common, data: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(common, |c| {
        if let Some(d) = data {
            use_split_dir(c, d);
        }
    })?;
    let train = states(&cfg.data.train, "data.train")?;
    let gen = generator(&cfg, registry())?;
    let dir = &common.run_dir;
    create_run_dir(dir)?;
    let ds = build_and_write(&train, &gen, dir)?;
    let mut outputs = BTreeMap::from([("prefs".to_string(), ds.digest()?)]);
    if cfg.data.validation.is_some() {
        let val = states(&cfg.data.validation, "data.validation")?;
        let vds = build_and_write(&val, &gen, &dir.join(VALIDATION_DIR))?;
        outputs.insert("validation_prefs".into(), vds.digest()?);
    }
    write_record(dir, "build-prefs", &cfg, outputs)?;
    println!(
        "{} pairs from {} turns ({} dropped, {} resampled)",
        ds.pairs.len(),
        train.len(),
        ds.dropped.len(),
        ds.resampled
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

fn flatten(convs: &[AmbigConversation]) -> Vec<ConversationTurnState> {
    convs
        .iter()
        .flat_map(|c| std::iter::once(c.unambiguous.clone()).chain(c.ambiguous.iter().cloned()))
        .collect()
}

fn synth_ambigsql(common: &Common) -> Result<(), CliError> {
    let cfg = load_config(common, |_| {})?;
    let examples: Vec<SqlExample> = read_jsonl(required(&cfg.data.sql_examples, "data.sql_examples")?)?;
    let gen = generator(&cfg, registry())?;
    let corpus = synthesize(&examples, &gen, &cfg.synth.synth)?;
    let dir = &common.run_dir;
    create_run_dir(dir)?;
    write_jsonl(&dir.join(CORPUS_FILE), &corpus.conversations)?;
    write_json(&dir.join("synth_stats.json"), &corpus.stats)?;

    // whole conversations go to one split so no request leaks across splits
    let mut order: Vec<usize> = (0..corpus.conversations.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.synth.synth.seed));
    let n = order.len();
    let n_test = (n as f64 * cfg.synth.test_fraction).round() as usize;
    let n_val = (n as f64 * cfg.synth.validation_fraction).round() as usize;
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| corpus.conversations[i].clone()).collect::<Vec<_>>()
    };
    let test = pick(&order[..n_test]);
    let val = pick(&order[n_test..n_test + n_val]);
    let train = pick(&order[n_test + n_val..]);
    for (name, part) in [("train", &train), ("validation", &val), ("test", &test)] {
        write_jsonl(&dir.join(format!("{name}.jsonl")), &flatten(part))?;
    }
    write_json(
        &dir.join("splits.json"),
        &SplitCounts {
            train: train.len(),
            validation: val.len(),
            test: test.len(),
        },
    )?;
    let outputs = BTreeMap::from([("corpus".to_string(), corpus.stats.corpus_digest.clone())]);
    write_record(dir, "synth-ambigsql", &cfg, outputs)?;
    println!(
        "{} unambiguous + {} ambiguous conversations over {} schemas; kinds {:?}; skipped {}",
        corpus.stats.unambiguous,
        corpus.stats.ambiguous,
        corpus.stats.unique_schemas,
        corpus.stats.kinds,
        corpus.stats.skipped.len()
    );
    Ok(())
}

fn response_texts(r: &Response) -> Vec<&str> {
    match r {
        Response::Text(t) => vec![t.as_str()],
        Response::Trajectory(t) => t.system_messages().map(|m| m.text.as_str()).collect(),
    }
}

fn corpus_space(pairs: &[PreferencePair]) -> CorpusCandidates {
    let mut space = CorpusCandidates::new();
    space.add_states(pairs.iter().map(|p| &p.state));
    for p in pairs {
        for t in response_texts(&p.winning).into_iter().chain(response_texts(&p.losing)) {
            space.add(&p.state.task_info, t);
        }
    }
    space
}

fn train(common: &Common, prefs: &Path, mode: Option<act_core::trainer::TrainMode>) -> Result<(), CliError> {
    let cfg = load_config(common, |c| {
        if let Some(m) = mode {
            c.act.mode = m;
        }
    })?;
    read_record(prefs)?;
    let pairs = read_pairs(&prefs.join(PAIRS_FILE))?;
    let val_path = prefs.join(VALIDATION_DIR).join(PAIRS_FILE);
    let validation = if val_path.exists() { read_pairs(&val_path)? } else { Vec::new() };
    let dir = &common.run_dir;
    create_run_dir(dir)?;
    let registry = registry();
    let space: Arc<dyn CandidateSpace> = match cfg.task.candidate_space {
        CandidateSpaceKind::Synthetic => Arc::new(SyntheticCandidates),
        CandidateSpaceKind::Corpus => {
            let all: Vec<PreferencePair> = pairs.iter().chain(&validation).cloned().collect();
            let space = corpus_space(&all);
            write_json(&dir.join(CANDIDATES_FILE), &space)?;
            Arc::new(space)
        }
    };
    let descriptor = space.descriptor();
    let mut policy = ToyPolicy::new(space, registry.clone(), cfg.task.template(), cfg.policy.clone())?;
    let classifier = classifier(&cfg, registry.clone())?;
    let simulator: Arc<dyn UserSimulator> = match &cfg.models.simulator {
        Some(_) => simulator(&cfg, registry)?,
        None if cfg.act.mode == act_core::trainer::TrainMode::FullAct => {
            return Err(CliError::Config("models.simulator: required for FULL_ACT training".into()))
        }
        None => Arc::new(ScriptedSimulator::default()),
    };
    let heuristic = heuristic(&cfg)?;
    let digest = cfg.digest()?;
    let oracles = Oracles {
        classifier: classifier.as_ref(),
        simulator: simulator.as_ref(),
        heuristic: heuristic.as_ref(),
    };
    let options = TrainOptions {
        run_dir: Some(dir.clone()),
        config_digest: digest,
    };
    let outcome = act_train(&mut policy, &descriptor, &pairs, &validation, oracles, &cfg.act(), &cfg.dpo()?, &options)?;
    let outputs = BTreeMap::from([("policy".to_string(), policy.parameter_digest())]);
    write_record(dir, "train", &cfg, outputs)?;
    println!(
        "{:?}: {} updates over {} epochs; selected step {} (validation margin {:?}); {} replacement events",
        cfg.act.mode,
        outcome.steps,
        outcome.epochs,
        outcome.selected_step,
        outcome.selected_margin,
        outcome.events.len()
    );
    Ok(())
}

/// Rebuilds the trained policy from a train run directory.
pub fn load_trained_policy(cfg: &RunConfig, train_dir: &Path, final_checkpoint: bool) -> Result<ToyPolicy, CliError> {
    let record = read_record(train_dir)?;
    let name = if final_checkpoint { FINAL_CHECKPOINT } else { BEST_CHECKPOINT };
    let path = train_dir.join(name);
    if !path.exists() {
        return Err(CliError::Config(format!("no checkpoint at {}", path.display())));
    }
    let ck = Checkpoint::load(&path, &record.config_digest)?;
    let space: Arc<dyn CandidateSpace> = match cfg.task.candidate_space {
        CandidateSpaceKind::Synthetic => Arc::new(SyntheticCandidates),
        CandidateSpaceKind::Corpus => Arc::new(read_json::<CorpusCandidates>(&train_dir.join(CANDIDATES_FILE))?),
    };
    if space.descriptor() != ck.candidate_space {
        return Err(CliError::Config(format!(
            "task.candidate_space: checkpoint was trained on {} but the config builds {}",
            ck.candidate_space,
            space.descriptor()
        )));
    }
    Ok(ToyPolicy::new(space, registry(), cfg.task.template(), cfg.policy.clone())?.with_parameters(ck.parameters)?)
}

fn evaluate_cmd(common: &Common, train_dir: &Path, final_checkpoint: bool, data: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(common, |c| {
        if let Some(d) = data {
            use_split_dir(c, d);
        }
    })?;
    let policy = load_trained_policy(&cfg, train_dir, final_checkpoint)?;
    let test = states(&cfg.data.test, "data.test")?;
    let registry = registry();
    let classifier = classifier(&cfg, registry.clone())?;
    let simulator = simulator(&cfg, registry)?;
    let heuristic = heuristic(&cfg)?;
    let dir = &common.run_dir;
    create_run_dir(dir)?;
    let out = evaluate(
        &policy,
        &test,
        classifier.as_ref(),
        simulator.as_ref(),
        heuristic.as_ref(),
        &cfg.protocol(),
        cfg.seed,
        &cfg.digest()?,
    )?;
    write_json(&dir.join(REPORT_FILE), &out.report)?;
    write_jsonl(&dir.join("rows.jsonl"), &out.rows)?;
    write_jsonl(&dir.join("exclusions.jsonl"), &out.exclusions)?;
    let table = out.report.to_table();
    std::fs::write(dir.join("report.txt"), &table).context("write report table")?;
    let digest = out.report.digest()?;
    write_record(dir, "evaluate", &cfg, BTreeMap::from([("report".to_string(), digest.clone())]))?;
    print!("{table}");
    println!("report digest {digest}");
    if !out.report.valid {
        return Err(runtime(anyhow::anyhow!(
            "{} of {} examples excluded for backend failures; run is invalid",
            out.report.n_excluded,
            out.report.n_examples
        )));
    }
    Ok(())
}

fn gap(common: &Common, corpus_dir: &Path) -> Result<(), CliError> {
    let cfg = load_config(common, |_| {})?;
    read_record(corpus_dir)?;
    let corpus: Vec<AmbigConversation> = read_jsonl(&corpus_dir.join(CORPUS_FILE))?;
    let envs = sql_environments(required(&cfg.data.databases, "data.databases")?)?;
    let answerer = SqlAnswerer::new(
        backend(&cfg.models.sql_answer, "models.sql_answer")?,
        registry(),
        cfg.models.decoding.clone(),
    );
    let report = gap_analysis(&answerer, &corpus, &envs)?;
    let dir = &common.run_dir;
    create_run_dir(dir)?;
    write_json(&dir.join("gap.json"), &report)?;
    write_record(dir, "gap-analysis", &cfg, BTreeMap::new())?;
    println!(
        "execution match over {} conversations: {:.1} without clarification, {:.1} with",
        report.support,
        100.0 * report.no_clarify_match,
        100.0 * report.with_clarify_match
    );
    Ok(())
}

fn report(run_dir: &Path, runs: &[String]) -> Result<(), CliError> {
    let mut named = Vec::new();
    for r in runs {
        let (name, path) = match r.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(r);
                let name = p.file_name().map_or_else(|| r.clone(), |n| n.to_string_lossy().into_owned());
                (name, p)
            }
        };
        let report: EvalReport = read_json(&path.join(REPORT_FILE))?;
        named.push((name, report));
    }
    let cmp = compare_runs(&named)?;
    create_run_dir(run_dir)?;
    write_json(&run_dir.join("comparison.json"), &cmp)?;
    let table = cmp.to_table();
    std::fs::write(run_dir.join("comparison.txt"), &table).context("write comparison table")?;
    let record = RunRecord {
        command: "report".into(),
        config_digest: String::new(),
        seed: 0,
        version: env!("CARGO_PKG_VERSION").into(),
        outputs: named
            .iter()
            .map(|(n, r)| Ok((n.clone(), r.digest()?)))
            .collect::<act_core::Result<_>>()?,
    };
    write_json(&run_dir.join(RUN_RECORD), &record)?;
    print!("{table}");
    Ok(())
}
