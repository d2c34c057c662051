//! Action-contrastive preference construction with a scripted generator.

use std::sync::Arc;

use act_core::clients::{rule_action, ConditionalGenerator, DecodingSettings, ScriptTable, ScriptedBackend};
use act_core::conversation::to_jsonl;
use act_core::fixtures::synthetic::synthetic_losing;
use act_core::fixtures::{generator_script, preference_fixture_states, PREFERENCE_FIXTURE_TURNS};
use act_core::prefs::{build_and_write, build_preference_dataset, read_manifest, BuildStatus, PAIRS_FILE};
use act_core::prompts::PromptRegistry;
use act_core::{ConversationTurnState, PairOrigin, Response};

fn generator(states: &[ConversationTurnState], table: Option<ScriptTable>) -> ConditionalGenerator {
    let registry = Arc::new(PromptRegistry::builtin());
    let decoding = DecodingSettings::default();
    let table = table.unwrap_or_else(|| generator_script(states, registry.clone(), &decoding, synthetic_losing).unwrap());
    ConditionalGenerator::new(Arc::new(ScriptedBackend::new(table)), registry, decoding)
}

#[test]
fn fifty_turns_give_fifty_contrastive_pairs() {
    let states = preference_fixture_states(11).unwrap();
    assert_eq!(states.len(), PREFERENCE_FIXTURE_TURNS);
    let ds = build_preference_dataset(&states, &generator(&states, None)).unwrap();
    assert_eq!(ds.pairs.len(), 50);
    assert!(ds.dropped.is_empty());
    for (p, s) in ds.pairs.iter().zip(&states) {
        assert_eq!(&p.state, s);
        assert_eq!(p.winning, Response::Text(s.gold_response.clone()));
        assert_eq!(p.rejected_action, s.gold_action.complement());
        let losing = p.losing.as_text().unwrap();
        assert_eq!(rule_action(losing), p.rejected_action, "{losing}");
        assert_eq!(p.origin, PairOrigin::Offline);
    }
}

#[test]
fn builds_are_byte_identical() {
    let states = preference_fixture_states(11).unwrap();
    let a = build_preference_dataset(&states, &generator(&states, None)).unwrap();
    let b = build_preference_dataset(&states, &generator(&states, None)).unwrap();
    assert_eq!(to_jsonl(&a.pairs).unwrap(), to_jsonl(&b.pairs).unwrap());
    assert_eq!(a.digest().unwrap(), b.digest().unwrap());

    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    build_and_write(&states, &generator(&states, None), d1.path()).unwrap();
    build_and_write(&states, &generator(&states, None), d2.path()).unwrap();
    let f1 = std::fs::read(d1.path().join(PAIRS_FILE)).unwrap();
    let f2 = std::fs::read(d2.path().join(PAIRS_FILE)).unwrap();
    assert_eq!(f1, f2);
    assert_eq!(read_manifest(d1.path()).unwrap().status, BuildStatus::Complete);
}

#[test]
fn missing_script_entry_aborts_with_prefix_written() {
    let states = preference_fixture_states(11).unwrap();
    let registry = Arc::new(PromptRegistry::builtin());
    let decoding = DecodingSettings::default();
    // script only the first ten turns
    let table = generator_script(&states[..10], registry, &decoding, synthetic_losing).unwrap();
    let d = tempfile::tempdir().unwrap();
    assert!(build_and_write(&states, &generator(&states, Some(table)), d.path()).is_err());
    let m = read_manifest(d.path()).unwrap();
    assert_eq!(m.status, BuildStatus::Aborted);
    assert_eq!(m.pairs, 10);
    assert!(m.error.is_some());
}
