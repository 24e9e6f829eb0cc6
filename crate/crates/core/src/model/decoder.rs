//! Caption decoder: masked self AoA, multi-modal AoA over image, article and
//! entity contexts, fusion, and the dual-source pointer-generator.

use super::attention::{aoa, causal_mask, head_average, project_memory, Memory};
use super::encoder::{embed_positions, ffn, norm, EncodedContexts};
use super::{DecoderLayer, MixRule, Model};
use crate::corpus::{ProcessedSample, Vocabulary, UNK};
use crate::error::{Error, Result};
use crate::tape::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Vocabulary id emitted when copying each article position and each entity
/// mention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CopyMaps {
    pub article: Vec<usize>,
    pub entities: Vec<usize>,
}

/// Article position: its own id when in vocabulary, else the tag of the
/// enclosing mention, else UNK. Mention: the head token id when every token
/// is in vocabulary, else its tag.
pub fn copy_maps(sample: &ProcessedSample, vocab: &Vocabulary) -> CopyMaps {
    let tokens = &sample.article_tokens;
    let mut article: Vec<usize> = tokens.iter().map(|t| vocab.get(t).unwrap_or(UNK)).collect();
    for m in &sample.entity_set {
        for i in m.start..m.end.min(tokens.len()) {
            if !vocab.contains(&tokens[i]) {
                article[i] = vocab.tag_id(m.etype);
            }
        }
    }
    let entities = sample
        .entity_set
        .iter()
        .map(|m| {
            let span = &tokens[m.start.min(tokens.len())..m.end.min(tokens.len())];
            match span.first() {
                Some(head) if span.iter().all(|t| vocab.contains(t)) => vocab.id(head),
                _ => vocab.tag_id(m.etype),
            }
        })
        .collect();
    CopyMaps { article, entities }
}

/// Projected keys and values of the three contexts for one decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerMemory {
    pub image: Memory,
    pub article: Memory,
    pub entity: Option<Memory>,
}

/// Cross-attention memories for every decoder layer, computed once per
/// sample and reused across decoding steps.
#[derive(Clone, Debug)]
pub struct DecoderMemory {
    pub layers: Vec<LayerMemory>,
}

impl DecoderMemory {
    pub fn new<S: Real>(g: &mut Graph<S>, model: &Model, ctx: &EncodedContexts) -> Result<Self> {
        let layers = model
            .decoder
            .iter()
            .map(|l| {
                Ok(LayerMemory {
                    image: project_memory(g, &l.image_aoa, ctx.image, ctx.image)?,
                    article: project_memory(g, &l.article_aoa, ctx.article, ctx.article)?,
                    entity: match ctx.entities {
                        Some(e) => Some(project_memory(g, &l.entity_aoa, e, e)?),
                        None => None,
                    },
                })
            })
            .collect::<Result<_>>()?;
        Ok(DecoderMemory { layers })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MultiModalOutput {
    /// `V'`, `[N×H]`.
    pub image: Var,
    /// `A'`, `[N×H]`.
    pub article: Var,
    /// `E'`, absent for an empty entity context.
    pub entity: Option<Var>,
    /// Head-averaged `[N×L]` article attention.
    pub a_v: Var,
    /// Head-averaged `[N×M]` entity attention.
    pub a_e: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct PointerOutput {
    pub p_star: Var,
    /// `[N×1]`; absent when the pointer is disabled.
    pub p_gen: Option<Var>,
    /// `[N×1]`; absent when there is no entity context or no pointer.
    pub q_gen: Option<Var>,
}

/// Every per-step quantity of one decoder pass, stacked over `N` steps.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// Input embeddings `x_t`.
    pub inputs: Var,
    pub p_s: Var,
    pub a_v: Var,
    pub a_e: Option<Var>,
    pub p_gen: Option<Var>,
    pub q_gen: Option<Var>,
    pub p_star: Var,
}

/// Plain-value copy of one decoding step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub p_s: Vec<f64>,
    pub a_v: Vec<f64>,
    pub a_e: Vec<f64>,
    pub p_gen: f64,
    pub q_gen: f64,
    pub p_star: Vec<f64>,
}

pub struct TeacherForced {
    /// Summed negative log-likelihood.
    pub loss: Var,
    pub tokens: usize,
    pub output: DecoderOutput,
}

impl TeacherForced {
    pub fn per_token<S: Real>(&self, g: &Graph<S>) -> f64 {
        g.value(self.loss).item().f64() / self.tokens as f64
    }
}

/// AoA over the prefix where step `t` sees steps `0..=t`.
pub fn masked_self_aoa<S: Real>(g: &mut Graph<S>, model: &Model, layer: &DecoderLayer, x: Var) -> Result<Var> {
    let n = g.shape(x)[0];
    let mem = project_memory(g, &layer.self_aoa, x, x)?;
    let mask = causal_mask(n);
    let (out, _) = aoa(g, &layer.self_aoa, x, &mem, model.config.heads, Some(&mask), model.config.dropout)?;
    Ok(out)
}

pub fn multimodal_aoa<S: Real>(
    g: &mut Graph<S>,
    model: &Model,
    layer: &DecoderLayer,
    xa: Var,
    mem: &LayerMemory,
) -> Result<MultiModalOutput> {
    let (heads, drop) = (model.config.heads, model.config.dropout);
    let (image, _) = aoa(g, &layer.image_aoa, xa, &mem.image, heads, None, drop)?;
    let (article, att) = aoa(g, &layer.article_aoa, xa, &mem.article, heads, None, drop)?;
    let a_v = head_average(g, &att.weights)?;
    let (entity, a_e) = match &mem.entity {
        Some(m) => {
            let (e, att) = aoa(g, &layer.entity_aoa, xa, m, heads, None, drop)?;
            (Some(e), Some(head_average(g, &att.weights)?))
        }
        None => (None, None),
    };
    Ok(MultiModalOutput {
        image,
        article,
        entity,
        a_v,
        a_e,
    })
}

/// `x' = LN(xa + V' + A' + E')`, `x* = LN(x' + FFN(x'))`.
pub fn fuse<S: Real>(
    g: &mut Graph<S>,
    model: &Model,
    layer: &DecoderLayer,
    xa: Var,
    mm: &MultiModalOutput,
) -> Result<Var> {
    let eps = model.config.ln_eps;
    let mut c = g.add(mm.image, mm.article)?;
    if let Some(e) = mm.entity {
        c = g.add(c, e)?;
    }
    let x = g.add(xa, c)?;
    let x = norm(g, &layer.norm_ctx, x, eps)?;
    let f = ffn(g, &layer.ffn, x, model.config.dropout)?;
    let x2 = g.add(x, f)?;
    norm(g, &layer.norm_out, x2, eps)
}

/// `P_s = softmax(x* W + b)`.
pub fn project_vocab<S: Real>(g: &mut Graph<S>, model: &Model, x: Var) -> Result<Var> {
    let logits = g.linear(x, model.out_proj.w, model.out_proj.b)?;
    g.softmax_rows(logits, None)
}

/// Mixes the generator with the article and entity copy distributions.
pub fn pointer_mix<S: Real>(
    g: &mut Graph<S>,
    model: &Model,
    x: Var,
    mm: &MultiModalOutput,
    p_s: Var,
    maps: &CopyMaps,
) -> Result<PointerOutput> {
    let cfg = &model.config;
    if !cfg.pointer {
        return Ok(PointerOutput {
            p_star: p_s,
            p_gen: None,
            q_gen: None,
        });
    }
    let vocab = cfg.vocab_size;
    let check = |map: &[usize], cols: usize, what: &'static str| -> Result<()> {
        if map.len() != cols {
            return Err(Error::shape(what, format!("copy map of {} for {cols} positions", map.len())));
        }
        match map.iter().find(|&&id| id >= vocab) {
            Some(&bad) => Err(Error::OutOfRange {
                what: "copy map id",
                index: bad,
                size: vocab,
            }),
            None => Ok(()),
        }
    };
    check(&maps.article, g.shape(mm.a_v)[1], "article copy map")?;

    let p = &model.pointer;
    let cat = g.concat_cols(&[x, mm.article, mm.image])?;
    let p_gen = g.linear(cat, p.w_p, p.b_p)?;
    let p_gen = g.sigmoid(p_gen);
    let copy_v = g.scatter_cols(mm.a_v, &maps.article, vocab)?;

    let entity = match (mm.entity, mm.a_e) {
        (Some(e), Some(a_e)) => {
            check(&maps.entities, g.shape(a_e)[1], "entity copy map")?;
            let cat = g.concat_cols(&[x, e, mm.image])?;
            let q = g.linear(cat, p.w_q, p.b_q)?;
            let q = g.sigmoid(q);
            let copy_e = g.scatter_cols(a_e, &maps.entities, vocab)?;
            Some((q, copy_e))
        }
        _ => None,
    };

    let switches = match entity {
        Some((q, _)) => g.add(p_gen, q)?,
        None => p_gen,
    };
    let one_minus = g.scale(switches, S::of(-1.0));
    let one_minus = g.add_scalar(one_minus, S::one());
    let (w_p, w_q, w_s) = match cfg.pointer_mix_rule {
        MixRule::Literal => (p_gen, entity.map(|(q, _)| q), one_minus),
        MixRule::ClampRenormalize => {
            let w_s = g.relu(one_minus);
            let z = g.add(switches, w_s)?;
            let inv = g.recip(z)?;
            let w_p = g.mul(p_gen, inv)?;
            let w_q = match entity {
                Some((q, _)) => Some(g.mul(q, inv)?),
                None => None,
            };
            let w_s = g.mul(w_s, inv)?;
            (w_p, w_q, w_s)
        }
    };
    let mut p_star = g.mul_col(p_s, w_s)?;
    let cv = g.mul_col(copy_v, w_p)?;
    p_star = g.add(p_star, cv)?;
    if let (Some((_, copy_e)), Some(w_q)) = (entity, w_q) {
        let ce = g.mul_col(copy_e, w_q)?;
        p_star = g.add(p_star, ce)?;
    }
    Ok(PointerOutput {
        p_star,
        p_gen: Some(p_gen),
        q_gen: entity.map(|(q, _)| q),
    })
}

/// Runs the decoder stack over `prefix` (BOS first).
pub fn run_decoder<S: Real>(
    g: &mut Graph<S>,
    model: &Model,
    ctx: &EncodedContexts,
    memory: &DecoderMemory,
    prefix: &[usize],
    maps: &CopyMaps,
) -> Result<DecoderOutput> {
    if prefix.is_empty() {
        return Err(Error::InvalidInput("decoder prefix is empty".into()));
    }
    if prefix.len() > g.shape(ctx.positions)[0] {
        return Err(Error::InvalidArgument(format!(
            "caption prefix of {} exceeds the {} reserved positions",
            prefix.len(),
            g.shape(ctx.positions)[0]
        )));
    }
    let inputs = embed_positions(g, model, prefix, ctx.positions)?;
    let mut x = inputs;
    let mut last = None;
    for (layer, mem) in model.decoder.iter().zip(&memory.layers) {
        let xa = masked_self_aoa(g, model, layer, x)?;
        let mm = multimodal_aoa(g, model, layer, xa, mem)?;
        x = fuse(g, model, layer, xa, &mm)?;
        last = Some(mm);
    }
    let mm = last.ok_or_else(|| Error::InvalidArgument("decoder has no layers".into()))?;
    let p_s = project_vocab(g, model, x)?;
    let ptr = pointer_mix(g, model, inputs, &mm, p_s, maps)?;
    Ok(DecoderOutput {
        inputs,
        p_s,
        a_v: mm.a_v,
        a_e: mm.a_e,
        p_gen: ptr.p_gen,
        q_gen: ptr.q_gen,
        p_star: ptr.p_star,
    })
}

/// Summed NLL of `targets` under the rows of `p_star`.
pub fn nll_loss<S: Real>(g: &mut Graph<S>, p_star: Var, targets: &[usize]) -> Result<Var> {
    g.nll(p_star, targets)
}

/// Teacher-forced pass over `caption_ids` (BOS … EOS).
pub fn forward_teacher_forced<S: Real>(
    g: &mut Graph<S>,
    model: &Model,
    ctx: &EncodedContexts,
    caption_ids: &[usize],
    maps: &CopyMaps,
) -> Result<TeacherForced> {
    if caption_ids.len() < 2 {
        return Err(Error::InvalidInput("caption needs at least BOS and one target".into()));
    }
    let memory = DecoderMemory::new(g, model, ctx)?;
    let n = caption_ids.len() - 1;
    let output = run_decoder(g, model, ctx, &memory, &caption_ids[..n], maps)?;
    let loss = nll_loss(g, output.p_star, &caption_ids[1..])?;
    Ok(TeacherForced {
        loss,
        tokens: n,
        output,
    })
}

fn row_of<S: Real>(g: &Graph<S>, v: Var, t: usize) -> Vec<f64> {
    g.value(v).row(t).iter().map(|x| x.f64()).collect()
}

pub fn step_outputs<S: Real>(g: &Graph<S>, out: &DecoderOutput) -> Vec<StepOutput> {
    let n = g.shape(out.p_s)[0];
    (0..n)
        .map(|t| StepOutput {
            p_s: row_of(g, out.p_s, t),
            a_v: row_of(g, out.a_v, t),
            a_e: out.a_e.map(|v| row_of(g, v, t)).unwrap_or_default(),
            p_gen: out.p_gen.map_or(0.0, |v| g.value(v).at(t, 0).f64()),
            q_gen: out.q_gen.map_or(0.0, |v| g.value(v).at(t, 0).f64()),
            p_star: row_of(g, out.p_star, t),
        })
        .collect()
}

/// Entity spans of a sample, in the order of its copy map.
pub fn entity_spans(sample: &ProcessedSample) -> Vec<(usize, usize)> {
    sample.entity_set.iter().map(|m| (m.start, m.end)).collect()
}

/// Encoder plus teacher-forced decoder for one processed sample.
pub fn sample_loss<S: Real>(
    g: &mut Graph<S>,
    model: &Model,
    sample: &ProcessedSample,
    features: &Tensor<S>,
    maps: &CopyMaps,
) -> Result<TeacherForced> {
    let ctx = super::encoder::encode(
        g,
        model,
        &sample.article_ids,
        &entity_spans(sample),
        features,
        sample.caption_ids.len().saturating_sub(1),
    )?;
    forward_teacher_forced(g, model, &ctx, &sample.caption_ids, maps)
}
