//! Text encoder: word + LSTM-refined position embeddings, self AoA and the
//! visual selective gate.

use super::attention::{aoa, project_memory};
use super::{EncoderLayer, FfnParams, Linear, Model, NormParams};
use crate::error::{Error, Result};
use crate::tape::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Encoder outputs for one sample.
#[derive(Clone, Copy, Debug)]
pub struct EncodedContexts {
    /// `[L×H]` article token embeddings.
    pub article: Var,
    /// `[M×H]` entity mention embeddings, absent when `M = 0` or the entity
    /// context is disabled.
    pub entities: Option<Var>,
    /// `[K×H]` image features as projected for the decoder.
    pub image: Var,
    /// LSTM position embeddings covering every sequence of this sample.
    pub positions: Var,
}

/// Runs the position table rows `0..n` through the LSTM; row `i` is the
/// hidden state after step `i`.
pub fn lstm_positions<S: Real>(g: &mut Graph<S>, model: &Model, n: usize) -> Result<Var> {
    let cfg = &model.config;
    if n > cfg.max_positions {
        return Err(Error::InvalidArgument(format!(
            "sequence of {n} exceeds {} positions",
            cfg.max_positions
        )));
    }
    let h = cfg.hidden;
    let table = g.param(model.pos_emb);
    let rows = g.slice_rows(table, 0, n)?;
    let w_ih = g.param(model.lstm.w_ih);
    let w_hh = g.param(model.lstm.w_hh);
    let bias = g.param(model.lstm.bias);
    let xs = g.matmul(rows, w_ih)?;
    let xs = g.add_row(xs, bias)?;

    let mut outputs = Vec::with_capacity(n);
    let mut state: Option<(Var, Var)> = None;
    for t in 0..n {
        let mut z = g.slice_rows(xs, t, t + 1)?;
        if let Some((hprev, _)) = state {
            let rec = g.matmul(hprev, w_hh)?;
            z = g.add(z, rec)?;
        }
        let i = g.slice_cols(z, 0, h)?;
        let i = g.sigmoid(i);
        let f = g.slice_cols(z, h, 2 * h)?;
        let f = g.sigmoid(f);
        let cand = g.slice_cols(z, 2 * h, 3 * h)?;
        let cand = g.tanh(cand);
        let o = g.slice_cols(z, 3 * h, 4 * h)?;
        let o = g.sigmoid(o);
        let mut c = g.mul(i, cand)?;
        if let Some((_, cprev)) = state {
            let keep = g.mul(f, cprev)?;
            c = g.add(c, keep)?;
        }
        let tc = g.tanh(c);
        let hidden = g.mul(o, tc)?;
        outputs.push(hidden);
        state = Some((hidden, c));
    }
    g.concat_rows(&outputs)
}

/// `w'_i = w_i + p^l_i` for the given token ids.
pub fn embed_positions<S: Real>(g: &mut Graph<S>, model: &Model, ids: &[usize], positions: Var) -> Result<Var> {
    if ids.len() > g.shape(positions)[0] {
        return Err(Error::InvalidArgument(format!(
            "{} tokens but only {} position rows",
            ids.len(),
            g.shape(positions)[0]
        )));
    }
    let table = g.param(model.word_emb);
    let words = g.embedding(table, ids)?;
    let pos = g.slice_rows(positions, 0, ids.len())?;
    let x = g.add(words, pos)?;
    g.dropout(x, model.config.dropout)
}

/// Per-patch affine map `D → H`.
pub fn project_image<S: Real>(g: &mut Graph<S>, proj: &Linear, features: Var) -> Result<Var> {
    let d = g.params().get(proj.w).rows();
    if g.shape(features)[1] != d {
        return Err(Error::shape(
            "project_image",
            format!("features {:?} for projection from {d}", g.shape(features)),
        ));
    }
    g.linear(features, proj.w, proj.b)
}

pub(crate) fn ffn<S: Real>(g: &mut Graph<S>, p: &FfnParams, x: Var, dropout: f64) -> Result<Var> {
    let hdn = g.linear(x, p.w1, p.b1)?;
    let hdn = g.relu(hdn);
    let out = g.linear(hdn, p.w2, p.b2)?;
    g.dropout(out, dropout)
}

pub(crate) fn norm<S: Real>(g: &mut Graph<S>, p: &NormParams, x: Var, eps: f64) -> Result<Var> {
    let gain = g.param(p.gain);
    let bias = g.param(p.bias);
    g.layer_norm(x, gain, bias, eps)
}

/// Gates every text embedding with `tanh(W_v · AoA(mean(T̃), V, V))`, then
/// applies the residual FFN and layer norm.
pub fn visual_selective<S: Real>(
    g: &mut Graph<S>,
    model: &Model,
    layer: &EncoderLayer,
    text: Var,
    image: Var,
) -> Result<Var> {
    let cfg = &model.config;
    let gated = if cfg.visual_selective {
        let pooled = g.mean_rows(text)?;
        let mem = project_memory(g, &layer.gate_aoa, image, image)?;
        let (attended, _) = aoa(g, &layer.gate_aoa, pooled, &mem, cfg.heads, None, cfg.dropout)?;
        let w_v = g.param(layer.w_visual);
        let gate = g.matmul(attended, w_v)?;
        let gate = g.tanh(gate);
        g.mul_row(text, gate)?
    } else {
        text
    };
    let f = ffn(g, &layer.ffn, gated, cfg.dropout)?;
    let res = g.add(gated, f)?;
    norm(g, &layer.norm, res, cfg.ln_eps)
}

/// Embeds `ids` and runs every encoder layer (self AoA, then the visual
/// selective layer).
pub fn encode_text<S: Real>(g: &mut Graph<S>, model: &Model, ids: &[usize], image: Var, positions: Var) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::InvalidInput("cannot encode an empty token sequence".into()));
    }
    let cfg = &model.config;
    let mut x = embed_positions(g, model, ids, positions)?;
    for layer in &model.encoder {
        let mem = project_memory(g, &layer.self_aoa, x, x)?;
        let (attended, _) = aoa(g, &layer.self_aoa, x, &mem, cfg.heads, None, cfg.dropout)?;
        x = visual_selective(g, model, layer, attended, image)?;
    }
    Ok(x)
}

/// Encodes the concatenated mention tokens as one sequence and mean-pools
/// each mention's rows. `spans` index into `article_ids`.
pub fn encode_entities<S: Real>(
    g: &mut Graph<S>,
    model: &Model,
    article_ids: &[usize],
    spans: &[(usize, usize)],
    image: Var,
    positions: Var,
) -> Result<Option<Var>> {
    if spans.is_empty() {
        return Ok(None);
    }
    let mut ids = Vec::new();
    let mut ranges = Vec::with_capacity(spans.len());
    for &(s, e) in spans {
        if s >= e || e > article_ids.len() {
            return Err(Error::OutOfRange {
                what: "entity span",
                index: e,
                size: article_ids.len(),
            });
        }
        ranges.push((ids.len(), ids.len() + e - s));
        ids.extend_from_slice(&article_ids[s..e]);
    }
    let encoded = encode_text(g, model, &ids, image, positions)?;
    let mut pool = Tensor::zeros(&[spans.len(), ids.len()]);
    let width = ids.len();
    for (m, &(a, b)) in ranges.iter().enumerate() {
        let w = S::of(1.0 / (b - a) as f64);
        for j in a..b {
            pool.data_mut()[m * width + j] = w;
        }
    }
    let pool = g.constant(pool);
    Ok(Some(g.matmul(pool, encoded)?))
}

/// Full encoder pass. `decode_len` reserves position rows for the caption.
pub fn encode<S: Real>(
    g: &mut Graph<S>,
    model: &Model,
    article_ids: &[usize],
    entity_spans: &[(usize, usize)],
    features: &Tensor<S>,
    decode_len: usize,
) -> Result<EncodedContexts> {
    let cfg = &model.config;
    if article_ids.is_empty() {
        return Err(Error::InvalidInput("article is empty".into()));
    }
    if features.shape().len() != 2 || features.cols() != cfg.image_dim || features.rows() == 0 {
        return Err(Error::shape(
            "image features",
            format!("{:?}, expected [K×{}]", features.shape(), cfg.image_dim),
        ));
    }
    let entity_len: usize = if cfg.entity_guide {
        entity_spans.iter().map(|&(s, e)| e.saturating_sub(s)).sum()
    } else {
        0
    };
    let n = article_ids.len().max(entity_len).max(decode_len);
    let positions = lstm_positions(g, model, n)?;
    let feats = g.constant(features.clone());
    let enc_image = project_image(g, &model.image_proj, feats)?;
    let article = encode_text(g, model, article_ids, enc_image, positions)?;
    let entities = if cfg.entity_guide {
        encode_entities(g, model, article_ids, entity_spans, enc_image, positions)?
    } else {
        None
    };
    let image = match &model.dec_image_proj {
        Some(p) => project_image(g, p, feats)?,
        None => enc_image,
    };
    Ok(EncodedContexts {
        article,
        entities,
        image,
        positions,
    })
}
