use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::entities::extract_entities;
use super::{
    build_vocab, replace_oov_entities, tokenize, Annotation, EntityMention, ProcessedSample, RawSample, Vocabulary, BOS, EOS,
};
use crate::error::{Error, Result};

/// Articles are truncated to their first 300 tokens.
pub const ARTICLE_WINDOW: usize = 300;
/// Caption token budget after tag substitution (excluding BOS/EOS).
pub const MAX_CAPTION_TOKENS: usize = 31;

#[derive(Debug, Default)]
pub struct CorpusLoad {
    pub samples: Vec<RawSample>,
    /// `(1-based line number, reason)` for each skipped line.
    pub skipped: Vec<(usize, String)>,
}

/// Reads a JSON-lines corpus. Malformed lines are skipped and reported;
/// more than 10% malformed lines is an error.
pub fn load_corpus(path: &Path) -> Result<CorpusLoad> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut load = CorpusLoad::default();
    let mut total = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match serde_json::from_str::<RawSample>(&line) {
            Ok(s) if s.article.trim().is_empty() || s.caption.trim().is_empty() => {
                load.skipped.push((i + 1, "empty article or caption".into()));
            }
            Ok(s) => load.samples.push(s),
            Err(e) => load.skipped.push((i + 1, e.to_string())),
        }
    }
    if load.skipped.len() * 10 > total {
        return Err(Error::MalformedCorpus {
            path: PathBuf::from(path),
            malformed: load.skipped.len(),
            total,
        });
    }
    for (line, reason) in &load.skipped {
        log::warn!("{}:{line}: skipped: {reason}", path.display());
    }
    Ok(load)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub min_image_side: u32,
    pub min_caption_words: usize,
    pub max_caption_words: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_image_side: 180,
            min_caption_words: 5,
            max_caption_words: 31,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterRule {
    ImageTooSmall,
    CaptionTooShort,
    CaptionTooLong,
}

pub fn filter_reason(s: &RawSample, cfg: &FilterConfig) -> Option<FilterRule> {
    if s.image.width.min(s.image.height) < cfg.min_image_side {
        return Some(FilterRule::ImageTooSmall);
    }
    let words = s.caption.split_whitespace().count();
    if words < cfg.min_caption_words {
        Some(FilterRule::CaptionTooShort)
    } else if words > cfg.max_caption_words {
        Some(FilterRule::CaptionTooLong)
    } else {
        None
    }
}

/// Image side ≥ 180 px and 5–31 whitespace-separated caption words.
pub fn filter_sample(s: &RawSample) -> bool {
    filter_reason(s, &FilterConfig::default()).is_none()
}

/// Tokenized sample with entities resolved, before vocabulary lookup.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub source: String,
    pub article_tokens: Vec<String>,
    pub article_full_len: usize,
    pub entity_set: Vec<EntityMention>,
    pub caption_tokens: Vec<String>,
    pub caption_entities: Vec<EntityMention>,
    pub feature_ref: Option<String>,
}

/// Tokenizes and truncates an article and resolves its entity set.
/// Returns the window tokens, the untruncated length and the mentions.
fn prepare_article(id: &str, text: &str, spans: Option<&[Annotation]>) -> Result<(Vec<String>, usize, Vec<EntityMention>)> {
    let mut article = tokenize(text);
    let full_len = article.len();
    if article.is_empty() {
        return Err(Error::InvalidInput(format!("sample {id}: article empty after cleaning")));
    }
    let entity_set = match spans {
        Some(spans) => {
            // spans refer to the full article; keep those inside the window
            for m in spans {
                if m.start >= m.end || m.end > full_len {
                    return Err(Error::OutOfRange {
                        what: "article entity span",
                        index: m.end,
                        size: full_len,
                    });
                }
            }
            let window: Vec<_> = spans.iter().filter(|m| m.end <= ARTICLE_WINDOW).cloned().collect();
            article.truncate(ARTICLE_WINDOW);
            extract_entities(&article, Some(&window))?
        }
        None => {
            article.truncate(ARTICLE_WINDOW);
            extract_entities(&article, None)?
        }
    };
    Ok((article, full_len, entity_set))
}

pub fn prepare_sample(s: &RawSample) -> Result<PreparedSample> {
    let ann = s.entities.as_ref();
    let (article_tokens, article_full_len, entity_set) =
        prepare_article(&s.id, &s.article, ann.map(|a| a.article.as_slice()))?;
    let caption = tokenize(&s.caption);
    if caption.is_empty() {
        return Err(Error::InvalidInput(format!("sample {}: caption empty after cleaning", s.id)));
    }
    let caption_entities = extract_entities(&caption, ann.map(|a| a.caption.as_slice()))?;

    Ok(PreparedSample {
        id: s.id.clone(),
        source: s.source.clone(),
        article_tokens,
        article_full_len,
        entity_set,
        caption_tokens: caption,
        caption_entities,
        feature_ref: s.feature_path.clone(),
    })
}

/// Encodes an article for captioning when no reference caption exists.
/// The caption fields hold only BOS and EOS.
pub fn encode_article(
    id: &str,
    text: &str,
    spans: Option<&[Annotation]>,
    vocab: &Vocabulary,
) -> Result<ProcessedSample> {
    let (article_tokens, article_full_len, entity_set) = prepare_article(id, text, spans)?;
    Ok(ProcessedSample {
        id: id.to_string(),
        source: String::new(),
        article_ids: vocab.encode(&article_tokens),
        article_tokens,
        article_full_len,
        entity_set,
        caption_ids: vec![BOS, EOS],
        caption_tokens: Vec::new(),
        caption_entities: Vec::new(),
        feature_ref: None,
    })
}

pub fn encode_prepared(p: &PreparedSample, vocab: &Vocabulary) -> Result<ProcessedSample> {
    let mut target = replace_oov_entities(&p.caption_tokens, &p.caption_entities, vocab)?;
    target.truncate(MAX_CAPTION_TOKENS);
    if target.is_empty() {
        return Err(Error::InvalidInput(format!("sample {}: caption empty after cleaning", p.id)));
    }
    let mut caption_ids = Vec::with_capacity(target.len() + 2);
    caption_ids.push(BOS);
    caption_ids.extend(vocab.encode(&target));
    caption_ids.push(EOS);

    Ok(ProcessedSample {
        id: p.id.clone(),
        source: p.source.clone(),
        article_ids: vocab.encode(&p.article_tokens),
        article_tokens: p.article_tokens.clone(),
        article_full_len: p.article_full_len,
        entity_set: p.entity_set.clone(),
        caption_ids,
        caption_tokens: p.caption_tokens.clone(),
        caption_entities: p.caption_entities.clone(),
        feature_ref: p.feature_ref.clone(),
    })
}

pub fn encode_sample(s: &RawSample, vocab: &Vocabulary) -> Result<ProcessedSample> {
    encode_prepared(&prepare_sample(s)?, vocab)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Rejections {
    pub image_too_small: usize,
    pub caption_too_short: usize,
    pub caption_too_long: usize,
    pub invalid: usize,
}

impl Rejections {
    pub fn total(&self) -> usize {
        self.image_too_small + self.caption_too_short + self.caption_too_long + self.invalid
    }
}

#[derive(Debug)]
pub struct PreprocessOutput {
    pub vocab: Vocabulary,
    pub samples: Vec<ProcessedSample>,
    pub rejections: Rejections,
}

/// Filter, tokenize, build the vocabulary over kept samples and encode.
pub fn preprocess(raw: &[RawSample], filter: &FilterConfig, min_freq: usize) -> Result<PreprocessOutput> {
    let mut rejections = Rejections::default();
    let mut prepared = Vec::new();
    for s in raw {
        match filter_reason(s, filter) {
            Some(FilterRule::ImageTooSmall) => rejections.image_too_small += 1,
            Some(FilterRule::CaptionTooShort) => rejections.caption_too_short += 1,
            Some(FilterRule::CaptionTooLong) => rejections.caption_too_long += 1,
            None => match prepare_sample(s) {
                Ok(p) => prepared.push(p),
                Err(e) => {
                    log::warn!("rejecting {}: {e}", s.id);
                    rejections.invalid += 1;
                }
            },
        }
    }
    if prepared.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no sample passed filtering (image<{}px: {}, caption<{} words: {}, caption>{} words: {}, invalid: {})",
            filter.min_image_side,
            rejections.image_too_small,
            filter.min_caption_words,
            rejections.caption_too_short,
            filter.max_caption_words,
            rejections.caption_too_long,
            rejections.invalid
        )));
    }
    let streams = prepared
        .iter()
        .flat_map(|p| [p.caption_tokens.as_slice(), p.article_tokens.as_slice()]);
    let vocab = build_vocab(streams, min_freq)?;
    let mut samples = Vec::with_capacity(prepared.len());
    for p in &prepared {
        match encode_prepared(p, &vocab) {
            Ok(s) => samples.push(s),
            Err(e) => {
                log::warn!("rejecting {}: {e}", p.id);
                rejections.invalid += 1;
            }
        }
    }
    Ok(PreprocessOutput {
        vocab,
        samples,
        rejections,
    })
}

pub fn write_processed(path: &Path, samples: &[ProcessedSample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_processed(path: &Path) -> Result<Vec<ProcessedSample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Annotation, EntityAnnotations, EntityType, UNK};

    fn raw(id: &str, article: &str, caption: &str, w: u32, h: u32) -> RawSample {
        RawSample {
            id: id.into(),
            article: article.into(),
            caption: caption.into(),
            image: super::super::ImageSize { width: w, height: h },
            source: "wire".into(),
            feature_path: None,
            entities: None,
        }
    }

    fn words(n: usize) -> String {
        vec!["word"; n].join(" ")
    }

    #[test]
    fn filter_thresholds() {
        assert!(!filter_sample(&raw("a", "x", &words(10), 179, 500)));
        assert!(!filter_sample(&raw("a", "x", &words(4), 500, 500)));
        assert!(filter_sample(&raw("a", "x", &words(20), 300, 300)));
        assert!(filter_sample(&raw("a", "x", &words(31), 180, 180)));
        assert!(!filter_sample(&raw("a", "x", &words(32), 180, 180)));
    }

    #[test]
    fn load_counts_skips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(&p, "").unwrap();
        let l = load_corpus(&p).unwrap();
        assert!(l.samples.is_empty() && l.skipped.is_empty());

        let good = serde_json::to_string(&raw("1", "a b", "c d", 200, 200)).unwrap();
        let lines: Vec<String> = (0..3).map(|i| good.replace("\"1\"", &format!("\"{i}\""))).collect();
        std::fs::write(&p, lines.join("\n")).unwrap();
        let l = load_corpus(&p).unwrap();
        assert_eq!(l.samples.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["0", "1", "2"]);

        let mut many = vec![good.clone(); 9];
        many.push("{not json".into());
        std::fs::write(&p, many.join("\n")).unwrap();
        let l = load_corpus(&p).unwrap();
        assert_eq!((l.samples.len(), l.skipped.len()), (9, 1));

        std::fs::write(&p, format!("{good}\n{{broken")).unwrap();
        assert!(matches!(load_corpus(&p), Err(Error::MalformedCorpus { .. })));
        assert!(load_corpus(&dir.path().join("missing.jsonl")).is_err());
    }

    #[test]
    fn article_truncation_and_entity_clipping() {
        let article: Vec<String> = (0..500).map(|i| format!("w{i}")).collect();
        let mut s = raw("x", &article.join(" "), "w1 w2 w3 w4 w5", 400, 400);
        s.entities = Some(EntityAnnotations {
            article: vec![
                Annotation { text: "w298 w299 w300 w301".into(), etype: EntityType::ORG, start: 298, end: 302 },
                Annotation { text: "w5".into(), etype: EntityType::ORG, start: 5, end: 6 },
            ],
            caption: vec![],
        });
        let p = prepare_sample(&s).unwrap();
        let vocab = Vocabulary::from_tokens(article.clone());
        let e = encode_prepared(&p, &vocab).unwrap();
        assert_eq!(e.article_ids.len(), 300);
        assert_eq!(e.article_full_len, 500);
        assert_eq!(e.entity_set.len(), 1);
        assert_eq!(e.entity_set[0].text, "w5");

        let short = raw("y", &article[..10].join(" "), "w1 w2 w3 w4 w5", 400, 400);
        let e = encode_sample(&short, &vocab).unwrap();
        assert_eq!(e.article_ids.len(), 10);
        assert_eq!(e.caption_ids.first(), Some(&BOS));
        assert_eq!(e.caption_ids.last(), Some(&EOS));
        assert_eq!(e.caption_ids.len(), 7);
    }

    #[test]
    fn caption_cleaned_to_nothing_is_error() {
        let s = raw("z", "some text", "<b></b> (all bracketed)", 400, 400);
        assert!(encode_sample(&s, &Vocabulary::from_tokens(Vec::new())).is_err());
    }

    #[test]
    fn preprocess_reports_rejections() {
        let bad = vec![raw("a", "x", &words(10), 100, 500), raw("b", "x", &words(2), 500, 500)];
        let err = preprocess(&bad, &FilterConfig::default(), 1).unwrap_err().to_string();
        assert!(err.contains("image<180px: 1") && err.contains("caption<5 words: 1"), "{err}");

        let ok = vec![raw("c", "alpha beta", "alpha beta gamma delta epsilon", 500, 500)];
        let out = preprocess(&ok, &FilterConfig::default(), 2).unwrap();
        assert_eq!(out.samples.len(), 1);
        // alpha/beta seen twice, the rest once
        assert_eq!(out.samples[0].caption_ids[3..6], [UNK, UNK, UNK]);
    }

    #[test]
    fn article_only_encoding_matches_full_sample() {
        let text = "Maria Lopez spoke in Lyon . Lopez left .";
        let spans = vec![Annotation {
            text: "Maria Lopez".into(),
            etype: EntityType::PERSON,
            start: 0,
            end: 2,
        }];
        let vocab = Vocabulary::from_tokens(["spoke".to_string(), "in".to_string()]);
        let mut full = raw("a", text, "Maria Lopez spoke in Lyon today", 300, 300);
        full.entities = Some(EntityAnnotations {
            article: spans.clone(),
            caption: Vec::new(),
        });
        let a = encode_sample(&full, &vocab).unwrap();
        let b = encode_article("a", text, Some(&spans), &vocab).unwrap();
        assert_eq!(a.article_ids, b.article_ids);
        assert_eq!(a.entity_set, b.entity_set);
        assert_eq!(b.caption_ids, [BOS, EOS]);
        assert!(encode_article("a", "  ", None, &vocab).is_err());
    }
}
