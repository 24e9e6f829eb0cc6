use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::EntityType;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token ↔ id map. Ids `0..4` are the specials, `4..22` the entity tags in
/// [`EntityType::ALL`] order, then corpus tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_freq: usize,
}

impl Vocabulary {
    fn with_reserved(min_freq: usize) -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
            min_freq,
        };
        for t in SPECIAL_TOKENS {
            v.push(t.to_string());
        }
        for t in EntityType::ALL {
            v.push(t.tag());
        }
        v
    }

    fn push(&mut self, token: String) {
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Id of `token`, or UNK.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tag_id(&self, etype: EntityType) -> usize {
        NUM_SPECIALS + etype.index()
    }

    /// Entity category of a tag id.
    pub fn tag_type(&self, id: usize) -> Option<EntityType> {
        id.checked_sub(NUM_SPECIALS)
            .and_then(|i| EntityType::ALL.get(i).copied())
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| {
                self.token(i).map(str::to_string).ok_or(Error::OutOfRange {
                    what: "vocabulary",
                    index: i,
                    size: self.len(),
                })
            })
            .collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// SHA-256 over the tokens in id order.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, usize> = self.tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        serde_json::to_string_pretty(&map).expect("string map serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, usize> = serde_json::from_str(text)?;
        let mut tokens = vec![None; map.len()];
        for (t, i) in map {
            match tokens.get_mut(i) {
                Some(slot @ None) => *slot = Some(t),
                _ => return Err(Error::InvalidInput(format!("vocabulary ids not a permutation (id {i})"))),
            }
        }
        let tokens: Vec<String> = tokens.into_iter().map(|t| t.expect("filled")).collect();
        let reserved = Vocabulary::with_reserved(0);
        if tokens.len() < reserved.len() || tokens[..reserved.len()] != reserved.tokens[..] {
            return Err(Error::InvalidInput("vocabulary lacks reserved special/tag ids".into()));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocabulary {
            tokens,
            index,
            min_freq: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_json(&text)
    }

    /// Vocabulary from an explicit token list (reserved entries prepended).
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut v = Vocabulary::with_reserved(0);
        for t in tokens {
            if !v.contains(&t) {
                v.push(t);
            }
        }
        v
    }
}

/// Builds the vocabulary: specials, the 18 tags, then every token seen at
/// least `min_freq` times, by descending count with lexicographic ties.
pub fn build_vocab<'a, I>(streams: I, min_freq: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a [String]>,
{
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut n_streams = 0;
    for s in streams {
        n_streams += 1;
        for t in s {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    if n_streams == 0 {
        return Err(Error::InvalidInput("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut vocab = Vocabulary::with_reserved(min_freq);
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_freq.max(1) && !vocab.contains(t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    for (t, _) in kept {
        vocab.push(t.to_string());
    }
    Ok(vocab)
}
