//! Caption metrics: corpus BLEU-4, ROUGE-L, plain CIDEr and entity
//! precision/recall, plus the evaluation driver that scores a captioner
//! before and after tag cleaning.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{EntityType, ProcessedSample};
use crate::error::{Error, Result};
use crate::runtime::tag_clean;

/// Zero-precision substitute used by [`bleu4`].
pub const BLEU_EPSILON: f64 = 1e-9;
pub const ROUGE_BETA: f64 = 1.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub candidate: Vec<String>,
    pub reference: Vec<String>,
    pub candidate_entities: Vec<String>,
    pub reference_entities: Vec<String>,
}

impl EvalPair {
    /// Whitespace-tokenized pair without entity lists.
    pub fn from_text(candidate: &str, reference: &str) -> Self {
        EvalPair {
            candidate: candidate.split_whitespace().map(String::from).collect(),
            reference: reference.split_whitespace().map(String::from).collect(),
            candidate_entities: Vec::new(),
            reference_entities: Vec::new(),
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU-4: clipped n-gram precisions pooled over all pairs, uniform
/// weights, brevity penalty from total lengths. A zero precision for
/// n > 1 is replaced by `BLEU_EPSILON / total`; no unigram match at all
/// scores 0.
pub fn bleu4(pairs: &[EvalPair]) -> f64 {
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for p in pairs {
        c_len += p.candidate.len();
        r_len += p.reference.len();
        for n in 1..=4 {
            let cand = ngram_counts(&p.candidate, n);
            let refs = ngram_counts(&p.reference, n);
            for (g, &c) in &cand {
                matches[n - 1] += c.min(refs.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += p.candidate.len().saturating_sub(n - 1);
        }
    }
    if c_len == 0 || matches[0] == 0 {
        return 0.0;
    }
    let log_p: f64 = (0..4)
        .map(|i| {
            let m = if matches[i] == 0 { BLEU_EPSILON } else { matches[i] as f64 };
            (m / totals[i].max(1) as f64).ln()
        })
        .sum::<f64>()
        / 4.0;
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    bp * log_p.exp()
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure of one pair.
pub fn rouge_l_pair(candidate: &[String], reference: &[String]) -> f64 {
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean ROUGE-L F-measure over pairs.
pub fn rouge_l(pairs: &[EvalPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|p| rouge_l_pair(&p.candidate, &p.reference)).sum::<f64>() / pairs.len() as f64
}

fn weigh<'a>(m: &BTreeMap<&'a [String], usize>, idf: &impl Fn(&[String]) -> f64) -> BTreeMap<&'a [String], f64> {
    m.iter().map(|(g, &c)| (*g, c as f64 * idf(g))).collect()
}

/// Per-pair CIDEr scores (×10). Document frequencies come from the
/// references of `pairs`.
pub fn cider_scores(pairs: &[EvalPair]) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("CIDEr needs at least one reference".into()));
    }
    let n_docs = pairs.len() as f64;
    let mut scores = vec![0.0; pairs.len()];
    for n in 1..=4 {
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        let refs: Vec<_> = pairs.iter().map(|p| ngram_counts(&p.reference, n)).collect();
        for r in &refs {
            for g in r.keys() {
                *df.entry(*g).or_insert(0) += 1;
            }
        }
        let idf = |g: &[String]| (n_docs / df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        for (i, p) in pairs.iter().enumerate() {
            let cand = ngram_counts(&p.candidate, n);
            let (vc, vr) = (weigh(&cand, &idf), weigh(&refs[i], &idf));
            let norm = |v: &BTreeMap<&[String], f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
            let (nc, nr) = (norm(&vc), norm(&vr));
            if nc == 0.0 || nr == 0.0 {
                continue;
            }
            let dot: f64 = vc.iter().map(|(g, x)| x * vr.get(g).copied().unwrap_or(0.0)).sum();
            scores[i] += dot / (nc * nr) / 4.0 * 10.0;
        }
    }
    Ok(scores)
}

/// Corpus CIDEr: mean of [`cider_scores`].
pub fn cider(pairs: &[EvalPair]) -> Result<f64> {
    let s = cider_scores(pairs)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Casefolded, whitespace-collapsed entity string.
pub fn normalize_entity(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityScores {
    pub precision: f64,
    pub recall: f64,
    pub matched: usize,
    pub candidate_mentions: usize,
    pub reference_mentions: usize,
    /// No candidate mentions at all; precision reported as 0.
    pub precision_undefined: bool,
}

/// Micro-averaged entity precision/recall with clipped multiset matching.
pub fn entity_pr(pairs: &[EvalPair]) -> EntityScores {
    let (mut matched, mut cands, mut refs) = (0, 0, 0);
    for p in pairs {
        let mut pool: HashMap<String, usize> = HashMap::new();
        for r in &p.reference_entities {
            *pool.entry(normalize_entity(r)).or_insert(0) += 1;
        }
        for c in &p.candidate_entities {
            if let Some(k) = pool.get_mut(&normalize_entity(c)) {
                if *k > 0 {
                    *k -= 1;
                    matched += 1;
                }
            }
        }
        cands += p.candidate_entities.len();
        refs += p.reference_entities.len();
    }
    EntityScores {
        precision: if cands == 0 { 0.0 } else { matched as f64 / cands as f64 },
        recall: if refs == 0 { 0.0 } else { matched as f64 / refs as f64 },
        matched,
        candidate_mentions: cands,
        reference_mentions: refs,
        precision_undefined: cands == 0,
    }
}

/// Finds entity mentions in a generated caption: leftmost-longest matches
/// against `gazetteer` surfaces, plus every remaining tag token (which can
/// never match a reference mention).
pub fn candidate_entities(tokens: &[String], gazetteer: &[String]) -> Vec<String> {
    let entries: Vec<Vec<String>> = {
        let mut e: Vec<Vec<String>> = gazetteer
            .iter()
            .map(|g| g.split_whitespace().map(String::from).collect::<Vec<_>>())
            .filter(|v| !v.is_empty())
            .collect();
        e.sort();
        e.dedup();
        e
    };
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let best = entries
            .iter()
            .filter(|e| tokens[i..].starts_with(e))
            .map(|e| e.len())
            .max();
        if let Some(len) = best {
            out.push(tokens[i..i + len].join(" "));
            i += len;
        } else {
            if EntityType::from_tag(&tokens[i]).is_some() {
                out.push(tokens[i].clone());
            }
            i += 1;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub entity_precision: f64,
    pub entity_recall: f64,
    pub precision_undefined: bool,
}

pub fn score_pairs(pairs: &[EvalPair]) -> Result<MetricSet> {
    let e = entity_pr(pairs);
    Ok(MetricSet {
        bleu4: bleu4(pairs),
        rouge_l: rouge_l(pairs),
        cider: cider(pairs)?,
        entity_precision: e.precision,
        entity_recall: e.recall,
        precision_undefined: e.precision_undefined,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub raw: Vec<String>,
    pub cleaned: Vec<String>,
    pub reference: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub entity_precision: f64,
    pub entity_recall: f64,
    pub precision_undefined: bool,
    pub n: usize,
    pub decode_mode: String,
    pub pre_tc: MetricSet,
    /// Tags with no same-category article entity, left in place.
    pub unresolved_tags: usize,
    pub notes: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub captions: Vec<CaptionRecord>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n = {}, decode = {}", self.n, self.decode_mode)?;
        writeln!(f, "{:<8} {:>8} {:>8} {:>8} {:>8} {:>8}", "", "BLEU-4", "ROUGE-L", "CIDEr", "P", "R")?;
        let row = |f: &mut fmt::Formatter<'_>, name: &str, m: &MetricSet| {
            writeln!(
                f,
                "{:<8} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                name, m.bleu4, m.rouge_l, m.cider, m.entity_precision, m.entity_recall
            )
        };
        row(f, "pre-TC", &self.pre_tc)?;
        row(f, "post-TC", &self.post_tc())?;
        for n in &self.notes {
            writeln!(f, "note: {n}")?;
        }
        Ok(())
    }
}

impl EvalReport {
    pub fn post_tc(&self) -> MetricSet {
        MetricSet {
            bleu4: self.bleu4,
            rouge_l: self.rouge_l,
            cider: self.cider,
            entity_precision: self.entity_precision,
            entity_recall: self.entity_recall,
            precision_undefined: self.precision_undefined,
        }
    }
}

/// Anything that can caption a processed sample. Output tokens may contain
/// entity tags; the evaluator applies tag cleaning itself.
pub trait Captioner: Sync {
    fn caption(&self, sample: &ProcessedSample) -> Result<Vec<String>>;
}

fn pair_for(sample: &ProcessedSample, candidate: Vec<String>) -> EvalPair {
    let mut gazetteer: Vec<String> = sample.entity_set.iter().map(|m| m.text.clone()).collect();
    gazetteer.extend(sample.caption_entities.iter().map(|m| m.text.clone()));
    EvalPair {
        candidate_entities: candidate_entities(&candidate, &gazetteer),
        candidate,
        reference: sample.caption_tokens.clone(),
        reference_entities: sample.caption_entities.iter().map(|m| m.text.clone()).collect(),
    }
}

/// Scores `captioner` on `samples` before and after tag cleaning.
pub fn evaluate<C: Captioner + ?Sized>(
    captioner: &C,
    samples: &[ProcessedSample],
    decode_mode: &str,
    keep_captions: bool,
) -> Result<EvalReport> {
    use rayon::prelude::*;
    if samples.is_empty() {
        return Err(Error::InvalidInput("evaluation set is empty".into()));
    }
    let raw: Vec<Vec<String>> = samples.par_iter().map(|s| captioner.caption(s)).collect::<Result<_>>()?;
    let mut unresolved = 0;
    let mut pre = Vec::with_capacity(samples.len());
    let mut post = Vec::with_capacity(samples.len());
    let mut captions = Vec::new();
    for (s, r) in samples.iter().zip(raw) {
        let cleaned = tag_clean(&r, &s.entity_set);
        unresolved += cleaned.unresolved;
        if keep_captions {
            captions.push(CaptionRecord {
                id: s.id.clone(),
                raw: r.clone(),
                cleaned: cleaned.tokens.clone(),
                reference: s.caption_tokens.clone(),
            });
        }
        pre.push(pair_for(s, r));
        post.push(pair_for(s, cleaned.tokens));
    }
    let pre_tc = score_pairs(&pre)?;
    let m = score_pairs(&post)?;
    Ok(EvalReport {
        bleu4: m.bleu4,
        rouge_l: m.rouge_l,
        cider: m.cider,
        entity_precision: m.entity_precision,
        entity_recall: m.entity_recall,
        precision_undefined: m.precision_undefined,
        n: samples.len(),
        decode_mode: decode_mode.to_string(),
        pre_tc,
        unresolved_tags: unresolved,
        notes: vec![
            format!("BLEU-4 is corpus level; zero n-gram precisions use epsilon {BLEU_EPSILON}"),
            "ROUGE is ROUGE-L (beta 1.2); CIDEr is plain CIDEr with idf from the evaluation references".into(),
            "METEOR is not computed".into(),
        ],
        captions,
    })
}
