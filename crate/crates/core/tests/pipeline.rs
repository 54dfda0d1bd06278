use std::sync::Arc;

use proptest::prelude::*;
use slicefuzz::coverage::live_uncovered;
use slicefuzz::dataset::{read_records, write_records, DatasetOptions};
use slicefuzz::fuzzloop::{Campaign, CampaignOptions, Provenance};
use slicefuzz::modelclient::{ModelClient, OracleClient, OracleSearch};
use slicefuzz::slicer::{build_question, code_bodies, PromptMode, DEFAULT_PROMPT_BUDGET};
use slicefuzz::targets::{builtin_target, DEFAULT_TIME_LIMIT};
use slicefuzz::TargetAdapter;

fn oracle_campaign(name: &str, seed: u64, iterations: u64) -> (Arc<dyn TargetAdapter>, Campaign) {
    let target = builtin_target(name).unwrap();
    let model: Arc<dyn ModelClient> =
        Arc::new(OracleClient::new(target.clone(), OracleSearch::for_target(name, 3_000)));
    let opts = CampaignOptions {
        iterations,
        rng_seed: seed,
        consumer_interval: 50,
        ..CampaignOptions::default()
    };
    let c = Campaign::new(target.clone(), Some(model), opts).unwrap();
    let seeds = slicefuzz::targets::default_seeds(name).unwrap();
    let seeds: Vec<Vec<u8>> = seeds.iter().map(|s| s.as_bytes().to_vec()).collect();
    c.add_seeds(&seeds, Provenance::Initial).unwrap();
    (target, c)
}

#[test]
fn campaign_invariants_hold_on_both_targets() {
    for name in ["mini-calc", "mini-json"] {
        let (target, c) = oracle_campaign(name, 11, 5_000);
        let stats = c.run();
        assert!(stats
            .coverage_samples
            .windows(2)
            .all(|w| w[0].iteration <= w[1].iteration && w[0].covered_keys <= w[1].covered_keys));
        let cov = c.coverage();
        assert_eq!(stats.covered_keys, cov.len());
        for key in &stats.answered_branches {
            assert!(cov.contains(&key.parse().unwrap()), "{name}: {key}");
        }
        for e in c.corpus_entries() {
            let run = target.execute(&e.data, DEFAULT_TIME_LIMIT).unwrap();
            assert!(run.covered_keys().all(|k| cov.contains(&k)));
            if !matches!(e.provenance, Provenance::Initial | Provenance::Answer) {
                assert!(!e.new_keys.is_empty(), "{name}: {} saved without new coverage", e.id);
            }
        }
    }
}

#[test]
fn both_prompt_modes_nest_for_every_live_branch() {
    let (target, c) = oracle_campaign("mini-calc", 3, 3_000);
    c.run();
    let cov = c.coverage();
    let mut checked = 0;
    for e in c.corpus_entries() {
        let run = target.execute(&e.data, DEFAULT_TIME_LIMIT).unwrap();
        for ub in live_uncovered(&run, &cov) {
            let q = |mode| {
                build_question(target.name(), &ub, target.index(), &e.data, mode, DEFAULT_PROMPT_BUDGET).unwrap()
            };
            let (full, none) = (q(PromptMode::FullTrace), q(PromptMode::NoTrace));
            let fb = code_bodies(&full.prompt);
            let nb = code_bodies(&none.prompt);
            assert_eq!(nb.len(), 1);
            assert_eq!(fb.last(), nb.first());
            assert!(fb.len() >= nb.len());
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn dataset_files_round_trip() {
    let target = builtin_target("mini-json").unwrap();
    let seeds: Vec<Vec<u8>> = ["[1,2]", "{\"a\":[true,null]}", "-1.5e3"].iter().map(|s| s.as_bytes().to_vec()).collect();
    let records = slicefuzz::dataset::construct_dataset(target.as_ref(), &seeds, &DatasetOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_records(&records, &path).unwrap();
    assert_eq!(read_records(&path).unwrap(), records);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn single_threaded_campaigns_are_reproducible(seed in 0u64..1_000) {
        let stats = |s| oracle_campaign("mini-json", s, 400).1.run().to_json();
        prop_assert_eq!(stats(seed), stats(seed));
    }
}
