//! Corpus ingestion: loading, filtering, tokenization, vocabulary, entity
//! handling and dataset statistics.

mod entities;
mod sample;
mod stats;
mod tokenize;
mod vocab;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use entities::{extract_entities, fallback_entities, fill_frequencies, replace_oov_entities};
pub use sample::{
    encode_article, encode_prepared, encode_sample, filter_reason, filter_sample, load_corpus, prepare_sample, preprocess,
    read_processed, write_processed, CorpusLoad, FilterConfig, FilterRule, PreparedSample, PreprocessOutput,
    Rejections, ARTICLE_WINDOW, MAX_CAPTION_TOKENS,
};
pub use stats::{dataset_stats, OverlapReport, SourceStats, StatsConfig, StatsReport};
pub use tokenize::tokenize;
pub use vocab::{build_vocab, Vocabulary, BOS, EOS, NUM_SPECIALS, PAD, UNK};

/// The 18 entity categories, in tag-id order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[allow(clippy::upper_case_acronyms, non_camel_case_types)]
pub enum EntityType {
    PERSON,
    NORP,
    FAC,
    ORG,
    GPE,
    LOC,
    PRODUCT,
    EVENT,
    WORK_OF_ART,
    LAW,
    LANGUAGE,
    DATE,
    TIME,
    PERCENT,
    MONEY,
    QUANTITY,
    ORDINAL,
    CARDINAL,
}

impl EntityType {
    pub const ALL: [EntityType; 18] = [
        EntityType::PERSON,
        EntityType::NORP,
        EntityType::FAC,
        EntityType::ORG,
        EntityType::GPE,
        EntityType::LOC,
        EntityType::PRODUCT,
        EntityType::EVENT,
        EntityType::WORK_OF_ART,
        EntityType::LAW,
        EntityType::LANGUAGE,
        EntityType::DATE,
        EntityType::TIME,
        EntityType::PERCENT,
        EntityType::MONEY,
        EntityType::QUANTITY,
        EntityType::ORDINAL,
        EntityType::CARDINAL,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EntityType::PERSON => "PERSON",
            EntityType::NORP => "NORP",
            EntityType::FAC => "FAC",
            EntityType::ORG => "ORG",
            EntityType::GPE => "GPE",
            EntityType::LOC => "LOC",
            EntityType::PRODUCT => "PRODUCT",
            EntityType::EVENT => "EVENT",
            EntityType::WORK_OF_ART => "WORK_OF_ART",
            EntityType::LAW => "LAW",
            EntityType::LANGUAGE => "LANGUAGE",
            EntityType::DATE => "DATE",
            EntityType::TIME => "TIME",
            EntityType::PERCENT => "PERCENT",
            EntityType::MONEY => "MONEY",
            EntityType::QUANTITY => "QUANTITY",
            EntityType::ORDINAL => "ORDINAL",
            EntityType::CARDINAL => "CARDINAL",
        }
    }

    /// Vocabulary token standing in for an OOV mention, e.g. `PERSON_`.
    pub fn tag(self) -> String {
        format!("{}_", self.name())
    }

    pub fn index(self) -> usize {
        EntityType::ALL.iter().position(|&t| t == self).expect("listed")
    }

    /// Parses a tag token such as `ORG_`.
    pub fn from_tag(token: &str) -> Option<EntityType> {
        token.strip_suffix('_').and_then(|n| n.parse().ok())
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EntityType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntityType::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown entity type {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

/// Span annotation as it appears in corpus files. `end` is exclusive.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub text: String,
    #[serde(rename = "type")]
    pub etype: EntityType,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityAnnotations {
    #[serde(default)]
    pub article: Vec<Annotation>,
    #[serde(default)]
    pub caption: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSample {
    pub id: String,
    pub article: String,
    pub caption: String,
    pub image: ImageSize,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entities: Option<EntityAnnotations>,
}

/// An entity mention over a token sequence; `end` is exclusive.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub text: String,
    #[serde(rename = "type")]
    pub etype: EntityType,
    pub start: usize,
    pub end: usize,
    /// Surface-identical mentions within the sample's (truncated) article.
    #[serde(default)]
    pub frequency: usize,
}

impl EntityMention {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// One encoded training example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessedSample {
    pub id: String,
    pub source: String,
    /// At most [`ARTICLE_WINDOW`] ids; OOV tokens map to UNK.
    pub article_ids: Vec<usize>,
    pub article_tokens: Vec<String>,
    /// Token count of the untruncated article.
    pub article_full_len: usize,
    /// Article mentions inside the truncated window.
    pub entity_set: Vec<EntityMention>,
    /// BOS, caption ids after tag substitution, EOS.
    pub caption_ids: Vec<usize>,
    /// Surface caption tokens before substitution (evaluation reference).
    pub caption_tokens: Vec<String>,
    pub caption_entities: Vec<EntityMention>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_ref: Option<String>,
}
