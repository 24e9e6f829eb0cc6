//! Greedy and beam-search decoding over any next-token model, plus the
//! incremental stepper for the captioning network.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::{ProcessedSample, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::eval::Captioner;
use crate::features::FeatureStore;
use crate::model::{
    aoa, copy_maps, encode, entity_spans, fuse, multimodal_aoa, pointer_mix, project_vocab, CopyMaps, DecoderMemory,
    EncodedContexts, Memory, Model,
};
use crate::params::ParamStore;
use crate::tape::{Graph, Var, LOG_CLAMP};
use crate::tensor::{Real, Tensor};

/// A left-to-right model: feeding a token yields the next-token
/// distribution.
pub trait StepModel {
    type State: Clone;
    /// State after BOS and the distribution of the first token.
    fn start(&mut self) -> Result<(Self::State, Vec<f64>)>;
    fn advance(&mut self, state: &Self::State, token: usize) -> Result<(Self::State, Vec<f64>)>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens without EOS.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Scored length: emitted tokens plus EOS when present.
    pub fn length(&self) -> usize {
        (self.tokens.len() + usize::from(self.finished)).max(1)
    }

    /// `log P / length^alpha`.
    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / (self.length() as f64).powf(alpha)
    }
}

fn log_p(p: f64) -> f64 {
    p.max(LOG_CLAMP).ln()
}

/// Highest probability, lowest id on ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Argmax decoding until EOS or `max_len` emitted tokens.
pub fn greedy<M: StepModel>(model: &mut M, eos: usize, max_len: usize) -> Result<Hypothesis> {
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    if max_len == 0 {
        return Ok(hyp);
    }
    let (mut state, mut probs) = model.start()?;
    loop {
        let tok = argmax(&probs);
        hyp.log_prob += log_p(probs[tok]);
        if tok == eos {
            hyp.finished = true;
            return Ok(hyp);
        }
        hyp.tokens.push(tok);
        if hyp.tokens.len() == max_len {
            return Ok(hyp);
        }
        (state, probs) = model.advance(&state, tok)?;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    pub max_len: usize,
    pub length_alpha: f64,
    /// Also score the greedy path, so the result never scores below it.
    pub include_greedy: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            width: 5,
            max_len: 31,
            length_alpha: 0.7,
            include_greedy: true,
        }
    }
}

fn better(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> bool {
    match a.score(alpha).partial_cmp(&b.score(alpha)) {
        Some(Ordering::Greater) => true,
        Some(Ordering::Less) => false,
        _ => a.tokens < b.tokens,
    }
}

/// Beam search ranked by cumulative log-probability while expanding and by
/// length-normalised score at the end. Candidates are ordered by log
/// probability, then parent rank, then token id, so width 1 reproduces
/// [`greedy`].
pub fn beam_search<M: StepModel>(model: &mut M, eos: usize, cfg: &BeamConfig) -> Result<Hypothesis> {
    if cfg.width == 0 {
        return Err(Error::InvalidArgument("beam width must be at least 1".into()));
    }
    let empty = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    if cfg.max_len == 0 {
        return Ok(empty);
    }
    let (state, probs) = model.start()?;
    let mut alive = vec![(empty, state, probs)];
    let mut done: Vec<Hypothesis> = Vec::new();
    while !alive.is_empty() {
        let mut cand: Vec<(f64, usize, usize)> = Vec::new();
        for (i, (h, _, p)) in alive.iter().enumerate() {
            cand.extend(p.iter().enumerate().map(|(tok, &pv)| (h.log_prob + log_p(pv), i, tok)));
        }
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cand.truncate(cfg.width);
        let mut next = Vec::with_capacity(cfg.width);
        for (lp, i, tok) in cand {
            let (parent, state, _) = &alive[i];
            let mut h = Hypothesis {
                tokens: parent.tokens.clone(),
                log_prob: lp,
                finished: false,
            };
            if tok == eos {
                h.finished = true;
                done.push(h);
                continue;
            }
            h.tokens.push(tok);
            if h.tokens.len() == cfg.max_len {
                done.push(h);
                continue;
            }
            let (s, p) = model.advance(state, tok)?;
            next.push((h, s, p));
        }
        alive = next;
    }
    if cfg.include_greedy && cfg.width > 1 {
        done.push(greedy(model, eos, cfg.max_len)?);
    }
    let mut best = done.swap_remove(0);
    for h in done {
        if better(&h, &best, cfg.length_alpha) {
            best = h;
        }
    }
    Ok(best)
}

/// Per-layer projected self-attention keys and values of the prefix.
#[derive(Clone, Debug)]
pub struct PrefixState {
    pub position: usize,
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

/// Runs the decoder one position at a time on a shared inference graph.
/// Because self-attention is causal, each new row only needs the cached
/// projections of earlier rows.
pub struct ModelStepper<'p> {
    pub graph: Graph<'p, f32>,
    model: &'p Model,
    ctx: EncodedContexts,
    memory: DecoderMemory,
    maps: CopyMaps,
}

impl<'p> ModelStepper<'p> {
    pub fn new(
        model: &'p Model,
        params: &'p ParamStore<f32>,
        sample: &ProcessedSample,
        features: &Tensor<f32>,
        maps: CopyMaps,
        max_len: usize,
    ) -> Result<Self> {
        let mut graph = Graph::new(params);
        let ctx = encode(&mut graph, model, &sample.article_ids, &entity_spans(sample), features, max_len + 1)?;
        let memory = DecoderMemory::new(&mut graph, model, &ctx)?;
        Ok(ModelStepper {
            graph,
            model,
            ctx,
            memory,
            maps,
        })
    }

    fn feed(&mut self, prev: Option<&PrefixState>, token: usize) -> Result<(PrefixState, Vec<f64>)> {
        let g = &mut self.graph;
        let m = self.model;
        let t = prev.map_or(0, |s| s.position);
        if t >= g.shape(self.ctx.positions)[0] {
            return Err(Error::InvalidArgument(format!("decode position {t} beyond the reserved range")));
        }
        let table = g.param(m.word_emb);
        let word = g.embedding(table, &[token])?;
        let pos = g.slice_rows(self.ctx.positions, t, t + 1)?;
        let input = g.add(word, pos)?;
        let mut x = input;
        let mut state = PrefixState {
            position: t + 1,
            keys: Vec::with_capacity(m.decoder.len()),
            values: Vec::with_capacity(m.decoder.len()),
        };
        let mut last = None;
        for (l, (layer, mem)) in m.decoder.iter().zip(&self.memory.layers).enumerate() {
            let sa = &layer.self_aoa;
            let k = g.linear(x, sa.wk, sa.bk)?;
            let v = g.linear(x, sa.wv, sa.bv)?;
            let (keys, values) = match prev {
                Some(p) => (g.concat_rows(&[p.keys[l], k])?, g.concat_rows(&[p.values[l], v])?),
                None => (k, v),
            };
            state.keys.push(keys);
            state.values.push(values);
            let (xa, _) = aoa(g, sa, x, &Memory { keys, values }, m.config.heads, None, 0.0)?;
            let mm = multimodal_aoa(g, m, layer, xa, mem)?;
            x = fuse(g, m, layer, xa, &mm)?;
            last = Some(mm);
        }
        let mm = last.ok_or_else(|| Error::InvalidArgument("decoder has no layers".into()))?;
        let p_s = project_vocab(g, m, x)?;
        let out = pointer_mix(g, m, input, &mm, p_s, &self.maps)?;
        let probs = g.value(out.p_star).data().iter().map(|v| v.f64()).collect();
        Ok((state, probs))
    }
}

impl StepModel for ModelStepper<'_> {
    type State = PrefixState;

    fn start(&mut self) -> Result<(PrefixState, Vec<f64>)> {
        self.feed(None, BOS)
    }

    fn advance(&mut self, state: &PrefixState, token: usize) -> Result<(PrefixState, Vec<f64>)> {
        self.feed(Some(state), token)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Beam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam: usize,
    pub max_len: usize,
    pub length_alpha: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Greedy,
            beam: 5,
            max_len: crate::corpus::MAX_CAPTION_TOKENS,
            length_alpha: 0.7,
        }
    }
}

impl DecodeConfig {
    pub fn label(&self) -> String {
        match self.mode {
            DecodeMode::Greedy => "greedy".into(),
            DecodeMode::Beam => format!("beam{}", self.beam),
        }
    }
}

/// Decodes one sample to vocabulary ids (EOS excluded).
pub fn decode_ids(
    model: &Model,
    params: &ParamStore<f32>,
    vocab: &Vocabulary,
    sample: &ProcessedSample,
    features: &Tensor<f32>,
    cfg: &DecodeConfig,
) -> Result<Vec<usize>> {
    let maps = copy_maps(sample, vocab);
    let mut stepper = ModelStepper::new(model, params, sample, features, maps, cfg.max_len)?;
    let hyp = match cfg.mode {
        DecodeMode::Greedy => greedy(&mut stepper, EOS, cfg.max_len)?,
        DecodeMode::Beam => beam_search(
            &mut stepper,
            EOS,
            &BeamConfig {
                width: cfg.beam,
                max_len: cfg.max_len,
                length_alpha: cfg.length_alpha,
                include_greedy: true,
            },
        )?,
    };
    Ok(hyp.tokens)
}

/// [`Captioner`] backed by trained parameters.
pub struct ModelCaptioner<'a> {
    pub model: &'a Model,
    pub params: &'a ParamStore<f32>,
    pub vocab: &'a Vocabulary,
    pub features: &'a FeatureStore,
    pub decode: DecodeConfig,
}

impl Captioner for ModelCaptioner<'_> {
    fn caption(&self, sample: &ProcessedSample) -> Result<Vec<String>> {
        let ids = decode_ids(
            self.model,
            self.params,
            self.vocab,
            sample,
            self.features.get(&sample.id)?,
            &self.decode,
        )?;
        self.vocab.decode(&ids)
    }
}
