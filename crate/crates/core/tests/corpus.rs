use std::collections::{BTreeMap, HashSet};
use std::fs;

use proptest::prelude::*;

use ztrans_core::corpus::{
    generate_semantics, render, temperature_probabilities, CorpusConfig, Manifest, TemperatureSampler,
    FIRST_TAG, SPLIT_NAMES,
};
use ztrans_core::{DatasetSplits, LanguageSet};

fn small(num_languages: usize, seed: u64) -> CorpusConfig {
    CorpusConfig {
        num_languages,
        sentences_per_pair: 30,
        valid_per_pair: 5,
        test_per_pair: 12,
        seed,
        ..CorpusConfig::default()
    }
}

#[test]
fn saving_twice_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    DatasetSplits::build(&small(4, 9)).unwrap().save(a.path()).unwrap();
    DatasetSplits::build(&small(4, 9)).unwrap().save(b.path()).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), SPLIT_NAMES.len() + 1);
    for n in names {
        assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn manifest_counts_match_the_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = DatasetSplits::build(&small(4, 2)).unwrap();
    data.save(dir.path()).unwrap();
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    for (split, file) in &manifest.files {
        let text = fs::read_to_string(dir.path().join(file)).unwrap();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for line in text.lines() {
            let fields: Vec<&str> = line.split('\t').collect();
            assert_eq!(fields.len(), 3, "{line:?}");
            let src = data.languages.detect_language(&parse(fields[0])).unwrap();
            let tgt = data.languages.language_of_tag(fields[1].parse().unwrap()).unwrap();
            *counts.entry(format!("{src}-{tgt}")).or_default() += 1;
        }
        assert_eq!(&counts, &manifest.pair_counts[split], "{split}");
    }
    let reloaded = DatasetSplits::load(dir.path()).unwrap();
    assert_eq!(reloaded.train, data.train);
    assert_eq!(reloaded.test_identity, data.test_identity);
}

fn parse(field: &str) -> Vec<u32> {
    field.split(' ').map(|t| t.parse().unwrap()).collect()
}

#[test]
fn direction_counts_for_four_languages() {
    let data = DatasetSplits::build(&small(4, 1)).unwrap();
    let count = |e: &[ztrans_core::TaggedExample]| DatasetSplits::pair_counts(e).len();
    assert_eq!(count(&data.train), 6);
    assert_eq!(count(&data.valid), 6);
    assert_eq!(count(&data.test_supervised), 6);
    assert_eq!(count(&data.test_zero_shot), 6);
    assert_eq!(count(&data.test_identity), 4);
}

#[test]
fn render_by_hand() {
    let langs = LanguageSet::standard(3, 1000);
    assert_eq!(render(&[5, 9, 2], langs.get(0).unwrap()), {
        let off = langs.get(0).unwrap().vocab_offset;
        vec![off + 5, off + 9, off + 2]
    });
    let mut l = langs.get(1).unwrap().clone();
    l.vocab_offset = 2000;
    l.order_rule = ztrans_core::corpus::OrderRule::Reverse;
    assert_eq!(render(&[5, 9, 2], &l), vec![2002, 2009, 2005]);
}

#[test]
fn temperature_closed_forms() {
    let p = temperature_probabilities(&[400, 100], 1.0);
    assert!((p[0] - 0.8).abs() < 1e-12 && (p[1] - 0.2).abs() < 1e-12);
    let p = temperature_probabilities(&[400, 100], 5.0);
    assert!((p[0] - 0.5689).abs() < 1e-4 && (p[1] - 0.4311).abs() < 1e-4);
    let p = temperature_probabilities(&[1000, 100], 100.0);
    assert!(p.iter().all(|x| (x - 0.5).abs() <= 0.02));
}

#[test]
fn sampler_batches_are_a_function_of_step() {
    let data = DatasetSplits::build(&small(4, 3)).unwrap();
    let s = TemperatureSampler::new(&data.train, 5.0, 300, 17).unwrap();
    let again = TemperatureSampler::new(&data.train, 5.0, 300, 17).unwrap();
    let forward: Vec<_> = (1..20).map(|t| s.batch(t)).collect();
    let backward: Vec<_> = (1..20).rev().map(|t| again.batch(t)).collect();
    assert!(forward.iter().eq(backward.iter().rev()));
    assert_ne!(s.batch(1), s.batch(2));
    assert!(TemperatureSampler::new(&data.train, 0.5, 300, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn splits_respect_the_english_centric_contract(languages in 3usize..6, seed in any::<u64>()) {
        let data = DatasetSplits::build(&small(languages, seed)).unwrap();
        let langs = &data.languages;
        let check = |e: &ztrans_core::TaggedExample| {
            // every token belongs to the declared language, tags are outside all ranges
            e.source.iter().all(|&t| langs.language_of_token(t) == Some(e.src_lang))
                && e.target.iter().all(|&t| langs.language_of_token(t) == Some(e.tgt_lang))
                && langs.language_of_tag(e.tag) == Some(e.tgt_lang)
                && langs.language_of_token(e.tag).is_none()
                && e.tag >= FIRST_TAG
        };
        for split in [&data.train, &data.valid, &data.test_supervised, &data.test_zero_shot, &data.test_identity] {
            prop_assert!(split.iter().all(check));
        }
        for e in data.train.iter().chain(&data.valid) {
            prop_assert!(e.direction().is_supervised());
            prop_assert!((e.src_lang == 0) != (e.tgt_lang == 0));
        }
        prop_assert!(data.test_zero_shot.iter().all(|e| e.direction().is_zero_shot()));
        for e in &data.test_identity {
            prop_assert_eq!(&e.source, &e.target);
            prop_assert_eq!(e.src_lang, e.tgt_lang);
        }
        // every gold target is the rendering of the shared semantics
        for e in data.test_zero_shot.iter().chain(&data.test_supervised) {
            let concepts = langs.parse(&e.source, e.src_lang).unwrap();
            prop_assert_eq!(&render(&concepts, langs.get(e.tgt_lang).unwrap()), &e.target);
        }
        let train_sentences: HashSet<&Vec<u32>> = data.train.iter().map(|e| &e.source).collect();
        prop_assert!(data.test_supervised.iter().all(|e| !train_sentences.contains(&e.source)));
    }

    #[test]
    fn render_and_parse_are_inverse(languages in 1usize..8, seed in any::<u64>()) {
        let langs = LanguageSet::standard(languages.max(3), 64);
        for concepts in generate_semantics(20, (2, 9), 64, seed) {
            prop_assert!((2..=9).contains(&concepts.len()));
            for l in 0..langs.len() {
                let surface = render(&concepts, langs.get(l).unwrap());
                prop_assert_eq!(langs.detect_language(&surface), Some(l));
                prop_assert_eq!(langs.parse(&surface, l), Some(concepts.clone()));
            }
        }
    }

    #[test]
    fn temperature_ratios_follow_counts_to_one_over_t(
        counts in prop::collection::vec(1usize..1000, 1..8),
        t in 1.0f64..50.0,
    ) {
        let p = temperature_probabilities(&counts, t);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..counts.len() {
            for j in 0..counts.len() {
                let ratio = (counts[i] as f64 / counts[j] as f64).powf(1.0 / t);
                prop_assert!((p[i] / p[j] - ratio).abs() < 1e-10 * ratio);
            }
        }
    }
}
