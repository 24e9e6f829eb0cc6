//! Replaces generated entity tags with article entities.

use crate::corpus::{EntityMention, EntityType};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagCleanOutput {
    pub tokens: Vec<String>,
    /// Tags with no article entity of their category, left in place.
    pub unresolved: usize,
}

/// Same-category entity with the highest frequency; ties go to the earliest
/// article occurrence.
pub fn pick_entity(etype: EntityType, entities: &[EntityMention]) -> Option<&EntityMention> {
    entities
        .iter()
        .filter(|e| e.etype == etype)
        .min_by_key(|e| (std::cmp::Reverse(e.frequency), e.start))
}

/// Substitutes every tag token (`PERSON_`, `GPE_`, ...) by the surface
/// tokens of [`pick_entity`]. Other tokens are untouched.
pub fn tag_clean(tokens: &[String], entities: &[EntityMention]) -> TagCleanOutput {
    let mut out = Vec::with_capacity(tokens.len());
    let mut unresolved = 0;
    for t in tokens {
        match EntityType::from_tag(t) {
            Some(etype) => match pick_entity(etype, entities) {
                Some(e) => out.extend(e.text.split_whitespace().map(String::from)),
                None => {
                    unresolved += 1;
                    out.push(t.clone());
                }
            },
            None => out.push(t.clone()),
        }
    }
    TagCleanOutput { tokens: out, unresolved }
}
