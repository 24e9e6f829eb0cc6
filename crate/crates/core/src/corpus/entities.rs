use std::collections::HashMap;

use super::{Annotation, EntityMention, EntityType, Vocabulary};
use crate::error::{Error, Result};

const STOPWORDS: &[&str] = &[
    "A", "An", "And", "As", "At", "But", "By", "For", "From", "He", "Her", "His", "I", "If", "In", "It", "Its", "On",
    "Or", "She", "So", "That", "The", "Their", "There", "These", "They", "This", "Those", "To", "We", "What", "When",
    "While", "With",
];

fn is_capitalized(tok: &str) -> bool {
    tok.as_bytes().first().is_some_and(u8::is_ascii_uppercase)
        && tok.bytes().any(|b| b.is_ascii_alphabetic())
        && EntityType::from_tag(tok).is_none()
}

fn is_year(tok: &str) -> bool {
    tok.len() == 4 && tok.bytes().all(|b| b.is_ascii_digit())
}

fn sentence_initial(tokens: &[String], i: usize) -> bool {
    i == 0 || matches!(tokens[i - 1].as_str(), "." | "!" | "?")
}

/// Capitalisation-based recognizer used when no annotations exist.
///
/// Maximal runs of capitalised tokens become `ORG` mentions (a leading
/// stopword at sentence start is not part of the run), and 4-digit numbers
/// become `DATE` mentions.
pub fn fallback_entities(tokens: &[String]) -> Vec<EntityMention> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if is_year(&tokens[i]) {
            out.push(mention(tokens, i, i + 1, EntityType::DATE));
            i += 1;
            continue;
        }
        if !is_capitalized(&tokens[i]) {
            i += 1;
            continue;
        }
        let mut start = i;
        let mut end = i;
        while end < tokens.len() && is_capitalized(&tokens[end]) {
            end += 1;
        }
        if sentence_initial(tokens, start) && STOPWORDS.contains(&tokens[start].as_str()) {
            start += 1;
        }
        if start < end {
            out.push(mention(tokens, start, end, EntityType::ORG));
        }
        i = end;
    }
    fill_frequencies(&mut out);
    out
}

fn mention(tokens: &[String], start: usize, end: usize, etype: EntityType) -> EntityMention {
    EntityMention {
        text: tokens[start..end].join(" "),
        etype,
        start,
        end,
        frequency: 0,
    }
}

/// Sets each mention's frequency to the number of surface-identical
/// mentions in the list.
pub fn fill_frequencies(mentions: &mut [EntityMention]) {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for m in mentions.iter() {
        *counts.entry(m.text.clone()).or_default() += 1;
    }
    for m in mentions.iter_mut() {
        m.frequency = counts[&m.text];
    }
}

/// Validated annotations, or the fallback recognizer when none are given.
pub fn extract_entities(tokens: &[String], annotations: Option<&[Annotation]>) -> Result<Vec<EntityMention>> {
    let Some(annotations) = annotations else {
        return Ok(fallback_entities(tokens));
    };
    let mut out = Vec::with_capacity(annotations.len());
    for a in annotations {
        if a.start >= a.end || a.end > tokens.len() {
            return Err(Error::OutOfRange {
                what: "entity span end",
                index: a.end,
                size: tokens.len(),
            });
        }
        out.push(EntityMention {
            text: a.text.clone(),
            etype: a.etype,
            start: a.start,
            end: a.end,
            frequency: 0,
        });
    }
    fill_frequencies(&mut out);
    Ok(out)
}

/// Replaces every mention containing an out-of-vocabulary token by its
/// category tag, and any remaining OOV token by `<unk>`.
pub fn replace_oov_entities(
    caption: &[String],
    entities: &[EntityMention],
    vocab: &Vocabulary,
) -> Result<Vec<String>> {
    let mut spans: Vec<&EntityMention> = entities.iter().collect();
    spans.sort_by_key(|m| (m.start, m.end));
    for m in &spans {
        if m.start >= m.end || m.end > caption.len() {
            return Err(Error::OutOfRange {
                what: "caption entity span",
                index: m.end,
                size: caption.len(),
            });
        }
    }
    for w in spans.windows(2) {
        if w[1].start < w[0].end {
            return Err(Error::InvalidInput(format!(
                "overlapping entity spans {}..{} and {}..{}",
                w[0].start, w[0].end, w[1].start, w[1].end
            )));
        }
    }

    let unk = vocab.token(super::UNK).expect("reserved").to_string();
    let mut out = Vec::with_capacity(caption.len());
    let mut next = spans.iter().peekable();
    let mut i = 0;
    while i < caption.len() {
        if let Some(m) = next.next_if(|m| m.start == i) {
            let span = &caption[m.start..m.end];
            if span.iter().all(|t| vocab.contains(t)) {
                out.extend(span.iter().cloned());
            } else {
                out.push(m.etype.tag());
            }
            i = m.end;
            continue;
        }
        let t = &caption[i];
        out.push(if vocab.contains(t) { t.clone() } else { unk.clone() });
        i += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn fallback_capitalisation_rule() {
        let t = toks("The mayor of Springfield spoke");
        let m = fallback_entities(&t);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].text, "Springfield");
        assert_eq!((m[0].start, m[0].end, m[0].etype), (3, 4, EntityType::ORG));
    }

    #[test]
    fn fallback_years_are_dates() {
        let t = toks("in 1999 he won");
        let m = fallback_entities(&t);
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].text.as_str(), m[0].etype), ("1999", EntityType::DATE));
    }

    #[test]
    fn fallback_runs_and_frequencies() {
        let t = toks("John Paul Jones Arena hosted fans . The White House and John Paul Jones Arena");
        let m = fallback_entities(&t);
        let texts: Vec<&str> = m.iter().map(|m| m.text.as_str()).collect();
        assert_eq!(texts, ["John Paul Jones Arena", "White House", "John Paul Jones Arena"]);
        assert_eq!(m[0].frequency, 2);
        assert_eq!(m[1].frequency, 1);
    }

    #[test]
    fn annotations_returned_with_frequencies() {
        let t = toks("Obama met Obama in Paris");
        let ann = vec![
            Annotation { text: "Obama".into(), etype: EntityType::PERSON, start: 0, end: 1 },
            Annotation { text: "Obama".into(), etype: EntityType::PERSON, start: 2, end: 3 },
            Annotation { text: "Paris".into(), etype: EntityType::GPE, start: 4, end: 5 },
        ];
        let m = extract_entities(&t, Some(&ann)).unwrap();
        assert_eq!(m.iter().map(|m| m.frequency).collect::<Vec<_>>(), [2, 2, 1]);
        assert_eq!(m[2].text, "Paris");

        let bad = vec![Annotation { text: "x".into(), etype: EntityType::ORG, start: 4, end: 9 }];
        assert!(extract_entities(&t, Some(&bad)).is_err());
    }

    fn vocab(words: &[&str]) -> Vocabulary {
        Vocabulary::from_tokens(words.iter().map(|w| w.to_string()))
    }

    #[test]
    fn oov_entity_becomes_single_tag() {
        let v = vocab(&["Fans", "cheer", "at", "."]);
        let cap = toks("Fans cheer at John Paul Jones Arena .");
        let ents = vec![EntityMention {
            text: "John Paul Jones Arena".into(),
            etype: EntityType::LOC,
            start: 3,
            end: 7,
            frequency: 1,
        }];
        let out = replace_oov_entities(&cap, &ents, &v).unwrap();
        assert_eq!(out, ["Fans", "cheer", "at", "LOC_", "."]);
    }

    #[test]
    fn in_vocab_unchanged_and_non_entity_oov_is_unk() {
        let v = vocab(&["a", "cat", "sat"]);
        let cap = toks("a cat sat");
        assert_eq!(replace_oov_entities(&cap, &[], &v).unwrap(), cap);
        let cap = toks("a zyzzyva sat");
        assert_eq!(replace_oov_entities(&cap, &[], &v).unwrap(), ["a", "<unk>", "sat"]);
    }

    #[test]
    fn overlapping_spans_rejected() {
        let v = vocab(&[]);
        let cap = toks("New York City");
        let m = |s, e| EntityMention { text: String::new(), etype: EntityType::GPE, start: s, end: e, frequency: 1 };
        assert!(replace_oov_entities(&cap, &[m(0, 2), m(1, 3)], &v).is_err());
        assert!(replace_oov_entities(&cap, &[m(0, 4)], &v).is_err());
    }
}
