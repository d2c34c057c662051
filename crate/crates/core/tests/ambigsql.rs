//! AmbigSQL synthesis over the Spider-style fixture with a scripted
//! perturbation model.

use std::collections::BTreeSet;
use std::sync::Arc;

use act_core::ambigsql::{
    choose_perturbation, perturbation_prompt, synthesize, AmbiguityKind, Selection, SqlExample, SynthConfig,
};
use act_core::clients::{ConditionalGenerator, DecodingSettings, ScriptedBackend};
use act_core::fixtures::spider::{perturbation_script, scripted_synthesis};
use act_core::metrics::sql::execution_match;
use act_core::Action;

#[test]
fn corpus_is_balanced_and_well_formed() {
    let d = tempfile::tempdir().unwrap();
    let syn = scripted_synthesis(d.path(), 7).unwrap();
    let c = &syn.corpus;
    assert_eq!((c.stats.unambiguous, c.stats.ambiguous), (40, 40));
    assert_eq!(c.states().len(), 120);
    for conv in &c.conversations {
        let [t1, t2] = conv.ambiguous.as_slice() else { panic!("two states") };
        assert_eq!((t1.gold_action, t2.gold_action), (Action::Clarify, Action::Answer));
        assert_eq!(t1.trajectory_goal, t2.gold_response);
        assert_eq!(t2.gold_response, conv.unambiguous.gold_response);
        assert_eq!(conv.unambiguous.gold_action, Action::Answer);
        assert_eq!(t2.history[0], t1.history[0]);
        assert_eq!(t2.history[1].text, t1.gold_response);
        assert_eq!(t2.history[2].text, conv.unambiguous.last_user_text());
        assert_ne!(t1.last_user_text(), conv.unambiguous.last_user_text());
        // the gold query still runs against its database
        let db = t1.task_info.lines().next().unwrap().trim_start_matches("database: ");
        let env = &syn.envs[db];
        assert!(execution_match(&t2.gold_response, &t2.gold_response, env).unwrap().matched);
    }
    let kinds: BTreeSet<AmbiguityKind> = c.conversations.iter().map(|c| c.kind).collect();
    assert_eq!(kinds.len(), 3);
    assert_eq!(c.stats.kinds.values().sum::<usize>(), 40);
}

#[test]
fn synthesis_is_bit_reproducible() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = scripted_synthesis(d1.path(), 7).unwrap().corpus;
    let b = scripted_synthesis(d2.path(), 7).unwrap().corpus;
    assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
    assert_eq!(a.stats.corpus_digest, b.stats.corpus_digest);
}

#[test]
fn kind_choice_depends_on_the_seed_only_for_non_presentation_queries() {
    let d = tempfile::tempdir().unwrap();
    let syn = scripted_synthesis(d.path(), 7).unwrap();
    let mut differs = false;
    for (ex, _) in &syn.examples {
        let a = choose_perturbation(ex, 7);
        let b = choose_perturbation(ex, 8);
        if a == AmbiguityKind::PresentationMask {
            assert_eq!(a, b);
        }
        differs |= a != b;
    }
    assert!(differs);
}

#[test]
fn random_selection_honours_the_limit() {
    let d = tempfile::tempdir().unwrap();
    let syn = scripted_synthesis(d.path(), 3).unwrap();
    let table = perturbation_script(&syn.examples, &syn.registry, 3).unwrap();
    let gen = ConditionalGenerator::new(Arc::new(ScriptedBackend::new(table)), syn.registry.clone(), DecodingSettings::default());
    let inputs: Vec<SqlExample> = syn.examples.iter().map(|(e, _)| e.clone()).collect();
    let cfg = SynthConfig {
        seed: 3,
        limit: Some(10),
        selection: Selection::Random,
    };
    let c = synthesize(&inputs, &gen, &cfg).unwrap();
    assert_eq!(c.conversations.len(), 10);
    assert_eq!(c.stats.selected, 10);
    let first: Vec<&str> = inputs[..10].iter().map(|e| e.request.as_str()).collect();
    let got: Vec<&str> = c.conversations.iter().map(|c| c.unambiguous.last_user_text()).collect();
    assert_ne!(got, first);
}

#[test]
fn malformed_perturbations_are_skipped() {
    let d = tempfile::tempdir().unwrap();
    let syn = scripted_synthesis(d.path(), 7).unwrap();
    let mut table = perturbation_script(&syn.examples, &syn.registry, 7).unwrap();
    let (ex, _) = &syn.examples[5];
    let prompt = perturbation_prompt(&syn.registry, ex, choose_perturbation(ex, 7)).unwrap();
    table.insert(&prompt, "no quoted request here");
    let gen = ConditionalGenerator::new(Arc::new(ScriptedBackend::new(table)), syn.registry.clone(), DecodingSettings::default());
    let inputs: Vec<SqlExample> = syn.examples.iter().map(|(e, _)| e.clone()).collect();
    let c = synthesize(&inputs, &gen, &SynthConfig { seed: 7, ..Default::default() }).unwrap();
    assert_eq!(c.stats.skipped, vec![5]);
    assert_eq!((c.stats.unambiguous, c.stats.ambiguous), (39, 39));
}

#[test]
fn clarification_closes_the_execution_gap() {
    let d = tempfile::tempdir().unwrap();
    let r = scripted_synthesis(d.path(), 7).unwrap().gap().unwrap();
    assert_eq!(r.support, 40);
    assert!(r.with_clarify_match - r.no_clarify_match >= 0.3);
}
