//! Corpus statistics: entity density of captions, per-type entity counts
//! and cross-source entity overlap.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EntityType, ProcessedSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsConfig {
    /// Captions sampled per source for the overlap matrix.
    pub overlap_sample: usize,
    pub seed: u64,
    /// Restrict the report to these sources (all when absent).
    pub sources: Option<Vec<String>>,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            overlap_sample: 50_000,
            seed: 0,
            sources: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub source: String,
    pub images: usize,
    pub articles: usize,
    pub avg_article_len: f64,
    pub avg_caption_len: f64,
    pub caption_tokens: usize,
    pub caption_sentences: usize,
    pub sentences_with_entity: usize,
    pub frac_sentences_with_entity: f64,
    pub entity_tokens: usize,
    pub frac_words_in_entity: f64,
    /// Mean mentions per caption for every one of the 18 types.
    pub entities_per_caption: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub sources: Vec<String>,
    pub sample_size: usize,
    /// `per_type[t][i][j]` = unique type-`t` entity strings shared by
    /// sources `i` and `j` (diagonal: unique strings of source `i`).
    pub per_type: BTreeMap<String, Vec<Vec<usize>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub per_source: Vec<SourceStats>,
    pub total: SourceStats,
    pub overlap: OverlapReport,
    pub warnings: Vec<String>,
}

/// Sentence ranges: a sentence ends after a `.`, `?` or `!` token.
fn sentences(tokens: &[String]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if matches!(t.as_str(), "." | "?" | "!") && i + 1 < tokens.len() {
            out.push((start, i + 1));
            start = i + 1;
        }
    }
    if start < tokens.len() {
        out.push((start, tokens.len()));
    }
    out
}

fn ratio(num: f64, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num / den as f64
    }
}

fn source_stats(name: &str, samples: &[&ProcessedSample]) -> SourceStats {
    let n = samples.len();
    let mut article_len = 0usize;
    let mut caption_tokens = 0usize;
    let mut caption_sentences = 0usize;
    let mut with_entity = 0usize;
    let mut entity_tokens = 0usize;
    let mut per_type = [0usize; 18];
    for s in samples {
        article_len += s.article_full_len;
        let len = s.caption_tokens.len();
        caption_tokens += len;
        let mut covered = vec![false; len];
        for e in &s.caption_entities {
            per_type[e.etype.index()] += 1;
            for c in &mut covered[e.start.min(len)..e.end.min(len)] {
                *c = true;
            }
        }
        entity_tokens += covered.iter().filter(|&&c| c).count();
        for (a, b) in sentences(&s.caption_tokens) {
            caption_sentences += 1;
            if s.caption_entities.iter().any(|e| e.start < b && e.end > a) {
                with_entity += 1;
            }
        }
    }
    SourceStats {
        source: name.to_string(),
        images: n,
        articles: n,
        avg_article_len: ratio(article_len as f64, n),
        avg_caption_len: ratio(caption_tokens as f64, n),
        caption_tokens,
        caption_sentences,
        sentences_with_entity: with_entity,
        frac_sentences_with_entity: ratio(with_entity as f64, caption_sentences),
        entity_tokens,
        frac_words_in_entity: ratio(entity_tokens as f64, caption_tokens),
        entities_per_caption: EntityType::ALL
            .iter()
            .map(|t| (t.name().to_string(), ratio(per_type[t.index()] as f64, n)))
            .collect(),
    }
}

pub fn dataset_stats(samples: &[ProcessedSample], config: &StatsConfig) -> StatsReport {
    let mut warnings = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&ProcessedSample>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.source.as_str()).or_default().push(s);
    }
    if let Some(wanted) = &config.sources {
        for w in wanted {
            if !groups.contains_key(w.as_str()) {
                warnings.push(format!("source {w:?} has no samples; omitted"));
            }
        }
        groups.retain(|k, _| wanted.iter().any(|w| w == k));
    }

    let per_source: Vec<SourceStats> = groups.iter().map(|(k, v)| source_stats(k, v)).collect();
    let all: Vec<&ProcessedSample> = groups.values().flatten().copied().collect();
    let total = source_stats("total", &all);

    let names: Vec<String> = groups.keys().map(|k| k.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let unique: Vec<BTreeMap<EntityType, BTreeSet<&str>>> = groups
        .values()
        .map(|members| {
            let picked: Vec<&ProcessedSample> = if members.len() > config.overlap_sample {
                let mut idx = sample(&mut rng, members.len(), config.overlap_sample).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| members[i]).collect()
            } else {
                members.clone()
            };
            let mut sets: BTreeMap<EntityType, BTreeSet<&str>> = BTreeMap::new();
            for s in picked {
                for e in &s.caption_entities {
                    sets.entry(e.etype).or_default().insert(e.text.as_str());
                }
            }
            sets
        })
        .collect();
    let empty = BTreeSet::new();
    let per_type = EntityType::ALL
        .iter()
        .map(|t| {
            let matrix = (0..names.len())
                .map(|i| {
                    let a = unique[i].get(t).unwrap_or(&empty);
                    (0..names.len())
                        .map(|j| a.intersection(unique[j].get(t).unwrap_or(&empty)).count())
                        .collect()
                })
                .collect();
            (t.name().to_string(), matrix)
        })
        .collect();

    StatsReport {
        per_source,
        total,
        overlap: OverlapReport {
            sources: names,
            sample_size: config.overlap_sample,
            per_type,
        },
        warnings,
    }
}
