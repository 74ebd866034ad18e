//! Synthetic multilingual corpus.
//!
//! Every language renders the same integer "concept" sequences: it reorders
//! them by its own rule and shifts them into a private, disjoint block of the
//! shared vocabulary. Language 0 plays the central (English) role; training
//! and validation data only cover directions into or out of it.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// First id after the special tokens; language tags start here.
pub const FIRST_TAG: u32 = 3;

/// The central language of the English-centric design.
pub const CENTRAL: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderRule {
    Identity,
    Reverse,
    SwapAdjacentPairs,
    RotateByOne,
}

impl OrderRule {
    pub fn apply<T: Copy>(self, seq: &[T]) -> Vec<T> {
        let mut out = seq.to_vec();
        match self {
            OrderRule::Identity => {}
            OrderRule::Reverse => out.reverse(),
            OrderRule::SwapAdjacentPairs => {
                for pair in out.chunks_mut(2) {
                    pair.reverse();
                }
            }
            OrderRule::RotateByOne => {
                if !out.is_empty() {
                    out.rotate_left(1);
                }
            }
        }
        out
    }

    pub fn invert<T: Copy>(self, seq: &[T]) -> Vec<T> {
        match self {
            OrderRule::RotateByOne => {
                let mut out = seq.to_vec();
                if !out.is_empty() {
                    out.rotate_right(1);
                }
                out
            }
            // the others are involutions
            other => other.apply(seq),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticLanguage {
    pub id: usize,
    pub name: String,
    pub tag_token: u32,
    pub vocab_offset: u32,
    pub order_rule: OrderRule,
}

/// Concept sequence rendered as surface tokens of `language`.
pub fn render(concepts: &[u32], language: &SyntheticLanguage) -> Vec<u32> {
    language
        .order_rule
        .apply(concepts)
        .into_iter()
        .map(|c| language.vocab_offset + c)
        .collect()
}

/// The language inventory and the shared vocabulary layout:
/// `[PAD, BOS, EOS, tag_0..tag_t, surface_0.., surface_1.., ...]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageSet {
    pub languages: Vec<SyntheticLanguage>,
    pub concept_vocab_size: u32,
}

const RULE_CYCLE: [OrderRule; 3] = [
    OrderRule::Reverse,
    OrderRule::SwapAdjacentPairs,
    OrderRule::RotateByOne,
];

impl LanguageSet {
    /// Language 0 ("en") keeps concept order; the others cycle through the
    /// reordering rules.
    pub fn standard(num_languages: usize, concept_vocab_size: u32) -> Self {
        let t = num_languages as u32;
        let languages = (0..num_languages)
            .map(|id| SyntheticLanguage {
                id,
                name: if id == CENTRAL {
                    "en".to_string()
                } else {
                    format!("l{id}")
                },
                tag_token: FIRST_TAG + id as u32,
                vocab_offset: FIRST_TAG + t + id as u32 * concept_vocab_size,
                order_rule: if id == CENTRAL {
                    OrderRule::Identity
                } else {
                    RULE_CYCLE[(id - 1) % RULE_CYCLE.len()]
                },
            })
            .collect();
        LanguageSet {
            languages,
            concept_vocab_size,
        }
    }

    pub fn len(&self) -> usize {
        self.languages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.languages.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&SyntheticLanguage> {
        self.languages.get(id)
    }

    pub fn vocab_size(&self) -> usize {
        self.languages
            .iter()
            .map(|l| (l.vocab_offset + self.concept_vocab_size) as usize)
            .chain(self.languages.iter().map(|l| l.tag_token as usize + 1))
            .max()
            .unwrap_or(FIRST_TAG as usize)
    }

    pub fn language_of_tag(&self, tag: u32) -> Option<usize> {
        self.languages.iter().position(|l| l.tag_token == tag)
    }

    pub fn tag_of(&self, language: usize) -> Option<u32> {
        self.get(language).map(|l| l.tag_token)
    }

    pub fn is_tag(&self, token: u32) -> bool {
        self.language_of_tag(token).is_some()
    }

    pub fn language_of_token(&self, token: u32) -> Option<usize> {
        self.languages.iter().position(|l| {
            token >= l.vocab_offset && token < l.vocab_offset + self.concept_vocab_size
        })
    }

    pub fn by_name(&self, name: &str) -> Option<usize> {
        self.languages.iter().position(|l| l.name == name)
    }

    /// Majority vote over surface-range membership. Ties and inputs without
    /// any surface token give `None`.
    pub fn detect_language(&self, tokens: &[u32]) -> Option<usize> {
        let mut counts = vec![0usize; self.len()];
        for &t in tokens {
            if let Some(l) = self.language_of_token(t) {
                counts[l] += 1;
            }
        }
        let best = *counts.iter().max()?;
        if best == 0 || counts.iter().filter(|&&c| c == best).count() > 1 {
            return None;
        }
        counts.iter().position(|&c| c == best)
    }

    /// Recovers concepts from a surface sentence of `language`.
    pub fn parse(&self, tokens: &[u32], language: usize) -> Option<Vec<u32>> {
        let lang = self.get(language)?;
        let concepts = tokens
            .iter()
            .map(|&t| {
                (t >= lang.vocab_offset && t < lang.vocab_offset + self.concept_vocab_size)
                    .then(|| t - lang.vocab_offset)
            })
            .collect::<Option<Vec<u32>>>()?;
        Some(lang.order_rule.invert(&concepts))
    }
}

/// One `(x, l, y)` instance.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TaggedExample {
    pub source: Vec<u32>,
    pub tag: u32,
    pub target: Vec<u32>,
    pub src_lang: usize,
    pub tgt_lang: usize,
}

impl TaggedExample {
    pub fn direction(&self) -> Direction {
        Direction {
            src: self.src_lang,
            tgt: self.tgt_lang,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Direction {
    pub src: usize,
    pub tgt: usize,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.src, self.tgt)
    }
}

impl Direction {
    pub fn is_supervised(self) -> bool {
        self.src != self.tgt && (self.src == CENTRAL || self.tgt == CENTRAL)
    }

    pub fn is_zero_shot(self) -> bool {
        self.src != self.tgt && self.src != CENTRAL && self.tgt != CENTRAL
    }

    pub fn is_identity(self) -> bool {
        self.src == self.tgt
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub num_languages: usize,
    pub sentences_per_pair: usize,
    pub valid_per_pair: usize,
    /// Size of the multi-way aligned test pool rendered into every direction.
    pub test_per_pair: usize,
    pub concept_vocab_size: u32,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_languages: 5,
            sentences_per_pair: 2000,
            valid_per_pair: 100,
            test_per_pair: 200,
            concept_vocab_size: 24,
            min_len: 3,
            max_len: 8,
            seed: 1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_languages < 3 {
            return Err(Error::Config("corpus.num_languages must be at least 3".into()));
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return Err(Error::Config(format!(
                "corpus length range [{}, {}] must satisfy 2 <= min <= max",
                self.min_len, self.max_len
            )));
        }
        if self.concept_vocab_size < 8 {
            return Err(Error::Config("corpus.concept_vocab_size must be at least 8".into()));
        }
        Ok(())
    }
}

/// Seeded concept sequences with lengths drawn uniformly from `length_range`
/// (inclusive) and concepts uniformly from `0..concept_vocab_size`.
pub fn generate_semantics(
    count: usize,
    length_range: (usize, usize),
    concept_vocab_size: u32,
    seed: u64,
) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let len = rng.random_range(length_range.0..=length_range.1);
            (0..len).map(|_| rng.random_range(0..concept_vocab_size)).collect()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub languages: LanguageSet,
    pub train: Vec<TaggedExample>,
    pub valid: Vec<TaggedExample>,
    pub test_supervised: Vec<TaggedExample>,
    pub test_zero_shot: Vec<TaggedExample>,
    pub test_identity: Vec<TaggedExample>,
    /// Sentences per test direction; example `i` of every test direction
    /// shares semantics `i`.
    pub test_pool_size: usize,
}

pub const SPLIT_NAMES: [&str; 5] = [
    "train",
    "valid",
    "test_supervised",
    "test_zero_shot",
    "test_identity",
];

fn make_example(languages: &LanguageSet, concepts: &[u32], src: usize, tgt: usize) -> TaggedExample {
    TaggedExample {
        source: render(concepts, &languages.languages[src]),
        tag: languages.languages[tgt].tag_token,
        target: render(concepts, &languages.languages[tgt]),
        src_lang: src,
        tgt_lang: tgt,
    }
}

/// Draws `count` sequences not already in `taken`, adding them to it.
fn fresh_semantics(
    count: usize,
    cfg: &CorpusConfig,
    seed: u64,
    taken: &mut HashSet<Vec<u32>>,
) -> Vec<Vec<u32>> {
    let mut out = Vec::with_capacity(count);
    let mut round = 0u64;
    while out.len() < count {
        let batch = generate_semantics(
            count - out.len(),
            (cfg.min_len, cfg.max_len),
            cfg.concept_vocab_size,
            seed.wrapping_add(round.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        for s in batch {
            if taken.insert(s.clone()) {
                out.push(s);
            }
        }
        round += 1;
        if round > 64 {
            break;
        }
    }
    out
}

pub(crate) fn stream_seed(base: u64, stream: u64) -> u64 {
    base.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl DatasetSplits {
    pub fn build(cfg: &CorpusConfig) -> Result<Self> {
        cfg.validate()?;
        let languages = LanguageSet::standard(cfg.num_languages, cfg.concept_vocab_size);
        let t = cfg.num_languages;
        let mut taken = HashSet::new();
        let test_pool = fresh_semantics(cfg.test_per_pair, cfg, stream_seed(cfg.seed, 1), &mut taken);
        let test_pool_size = test_pool.len();

        let supervised: Vec<Direction> = (1..t)
            .flat_map(|x| {
                [
                    Direction { src: CENTRAL, tgt: x },
                    Direction { src: x, tgt: CENTRAL },
                ]
            })
            .collect();

        let mut valid = Vec::new();
        for (i, d) in supervised.iter().enumerate() {
            let sems = fresh_semantics(
                cfg.valid_per_pair,
                cfg,
                stream_seed(cfg.seed, 100 + i as u64),
                &mut taken,
            );
            valid.extend(sems.iter().map(|s| make_example(&languages, s, d.src, d.tgt)));
        }
        let mut train = Vec::new();
        for (i, d) in supervised.iter().enumerate() {
            // training sentences may repeat across directions but never
            // overlap the validation or test pools
            let mut local = taken.clone();
            let sems = fresh_semantics(
                cfg.sentences_per_pair,
                cfg,
                stream_seed(cfg.seed, 1000 + i as u64),
                &mut local,
            );
            train.extend(sems.iter().map(|s| make_example(&languages, s, d.src, d.tgt)));
        }

        let mut test_supervised = Vec::new();
        let mut test_zero_shot = Vec::new();
        let mut test_identity = Vec::new();
        for src in 0..t {
            for tgt in 0..t {
                let d = Direction { src, tgt };
                let split = if d.is_identity() {
                    &mut test_identity
                } else if d.is_supervised() {
                    &mut test_supervised
                } else {
                    &mut test_zero_shot
                };
                split.extend(test_pool.iter().map(|s| make_example(&languages, s, src, tgt)));
            }
        }
        Ok(DatasetSplits {
            languages,
            train,
            valid,
            test_supervised,
            test_zero_shot,
            test_identity,
            test_pool_size,
        })
    }

    pub fn split(&self, name: &str) -> Option<&[TaggedExample]> {
        Some(match name {
            "train" => &self.train,
            "valid" => &self.valid,
            "test_supervised" => &self.test_supervised,
            "test_zero_shot" => &self.test_zero_shot,
            "test_identity" => &self.test_identity,
            _ => return None,
        })
    }

    /// Aligned test examples of one direction (index = semantics index).
    pub fn test_direction(&self, src: usize, tgt: usize) -> Vec<&TaggedExample> {
        let d = Direction { src, tgt };
        let split = if d.is_identity() {
            &self.test_identity
        } else if d.is_supervised() {
            &self.test_supervised
        } else {
            &self.test_zero_shot
        };
        split.iter().filter(|e| e.direction() == d).collect()
    }

    pub fn pair_counts(examples: &[TaggedExample]) -> BTreeMap<Direction, usize> {
        let mut counts = BTreeMap::new();
        for e in examples {
            *counts.entry(e.direction()).or_insert(0) += 1;
        }
        counts
    }

    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        let mut files = BTreeMap::new();
        let mut pair_counts = BTreeMap::new();
        for name in SPLIT_NAMES {
            let examples = self.split(name).expect("known split");
            let file = format!("{name}.tsv");
            write_atomic(&dir.join(&file), format_examples(examples).as_bytes())?;
            files.insert(name.to_string(), file);
            pair_counts.insert(
                name.to_string(),
                Self::pair_counts(examples)
                    .into_iter()
                    .map(|(d, n)| (d.to_string(), n))
                    .collect(),
            );
        }
        let manifest = Manifest {
            languages: self.languages.clone(),
            test_pool_size: self.test_pool_size,
            files,
            pair_counts,
        };
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&read_to_string(&dir.join(MANIFEST_FILE))?)?;
        let mut splits: BTreeMap<String, Vec<TaggedExample>> = BTreeMap::new();
        for name in SPLIT_NAMES {
            let file = manifest
                .files
                .get(name)
                .ok_or_else(|| Error::InvalidInput(format!("manifest lacks split {name}")))?;
            let path = dir.join(file);
            let text = read_to_string(&path)?;
            splits.insert(name.to_string(), parse_examples(&text, &manifest.languages, &path)?);
        }
        let mut take = |n: &str| splits.remove(n).unwrap_or_default();
        Ok(DatasetSplits {
            train: take("train"),
            valid: take("valid"),
            test_supervised: take("test_supervised"),
            test_zero_shot: take("test_zero_shot"),
            test_identity: take("test_identity"),
            languages: manifest.languages,
            test_pool_size: manifest.test_pool_size,
        })
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub languages: LanguageSet,
    pub test_pool_size: usize,
    /// split name → file name relative to the manifest
    pub files: BTreeMap<String, String>,
    /// split name → `"src-tgt"` → example count
    pub pair_counts: BTreeMap<String, BTreeMap<String, usize>>,
}

fn join_tokens(tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

/// `src_tokens TAB tag TAB tgt_tokens`, one example per line.
pub fn format_examples(examples: &[TaggedExample]) -> String {
    let mut out = String::new();
    for e in examples {
        out.push_str(&join_tokens(&e.source));
        out.push('\t');
        out.push_str(&e.tag.to_string());
        out.push('\t');
        out.push_str(&join_tokens(&e.target));
        out.push('\n');
    }
    out
}

pub fn parse_tokens(field: &str) -> std::result::Result<Vec<u32>, std::num::ParseIntError> {
    field.split_whitespace().map(str::parse).collect()
}

pub fn parse_examples(text: &str, languages: &LanguageSet, path: &Path) -> Result<Vec<TaggedExample>> {
    let bad = |line: usize, what: String| {
        Error::InvalidInput(format!("{}:{}: {what}", path.display(), line + 1))
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(bad(i, format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let source = parse_tokens(fields[0]).map_err(|e| bad(i, e.to_string()))?;
        let tag: u32 = fields[1].trim().parse().map_err(|e: std::num::ParseIntError| bad(i, e.to_string()))?;
        let target = parse_tokens(fields[2]).map_err(|e| bad(i, e.to_string()))?;
        let tgt_lang = languages.language_of_tag(tag).ok_or(Error::InvalidTag(tag))?;
        let src_lang = languages
            .detect_language(&source)
            .ok_or_else(|| bad(i, "source language is ambiguous".into()))?;
        out.push(TaggedExample {
            source,
            tag,
            target,
            src_lang,
            tgt_lang,
        });
    }
    Ok(out)
}

/// Pair-sampling probabilities `∝ q_i^{1/T}` from raw counts.
pub fn temperature_probabilities(counts: &[usize], temperature: f64) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    let weights: Vec<f64> = counts
        .iter()
        .map(|&c| (c as f64 / total as f64).powf(1.0 / temperature))
        .collect();
    let z: f64 = weights.iter().sum();
    weights.iter().map(|w| w / z).collect()
}

/// Temperature-based batch sampler over the training split.
///
/// Batches are a pure function of `(seed, step)`, so a resumed run sees the
/// same data as an uninterrupted one.
#[derive(Debug, Clone)]
pub struct TemperatureSampler {
    directions: Vec<Direction>,
    members: Vec<Vec<usize>>,
    probabilities: Vec<f64>,
    token_counts: Vec<usize>,
    batch_tokens: usize,
    seed: u64,
}

impl TemperatureSampler {
    pub fn new(
        examples: &[TaggedExample],
        temperature: f64,
        batch_tokens: usize,
        seed: u64,
    ) -> Result<Self> {
        if temperature < 1.0 {
            return Err(Error::InvalidInput(format!(
                "sampling temperature must be >= 1, got {temperature}"
            )));
        }
        if examples.is_empty() {
            return Err(Error::InvalidInput("cannot sample from an empty split".into()));
        }
        let mut groups: BTreeMap<Direction, Vec<usize>> = BTreeMap::new();
        for (i, e) in examples.iter().enumerate() {
            groups.entry(e.direction()).or_default().push(i);
        }
        let directions: Vec<Direction> = groups.keys().copied().collect();
        let members: Vec<Vec<usize>> = groups.into_values().collect();
        let counts: Vec<usize> = members.iter().map(Vec::len).collect();
        Ok(TemperatureSampler {
            directions,
            probabilities: temperature_probabilities(&counts, temperature),
            members,
            token_counts: examples
                .iter()
                .map(|e| e.source.len() + 1 + e.target.len() + 1)
                .collect(),
            batch_tokens: batch_tokens.max(1),
            seed,
        })
    }

    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    /// Example indices of the batch for `step`.
    pub fn batch(&self, step: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, step.wrapping_add(1 << 32)));
        let mut out = Vec::new();
        let mut tokens = 0;
        while tokens < self.batch_tokens {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = self.probabilities.len() - 1;
            for (i, p) in self.probabilities.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            let group = &self.members[pick];
            let idx = group[rng.random_range(0..group.len())];
            tokens += self.token_counts[idx];
            out.push(idx);
        }
        out
    }

    /// Endless stream of batches starting at step 1.
    pub fn iter(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        (1u64..).map(move |s| self.batch(s))
    }
}

/// Stream of temperature-sampled batches over `splits.train`.
pub fn temperature_batches(
    splits: &DatasetSplits,
    temperature: f64,
    batch_tokens: usize,
    seed: u64,
) -> Result<impl Iterator<Item = Vec<usize>> + '_> {
    let sampler = TemperatureSampler::new(&splits.train, temperature, batch_tokens, seed)?;
    Ok((1u64..).map(move |s| sampler.batch(s)))
}
