//! The captioning network: parameter layout plus the encoder and decoder
//! forward passes.
//!
//! All forward code is written against [`Graph`](crate::tape::Graph) and is
//! generic over the float type, so the same path serves 32-bit training
//! and 64-bit gradient checks.

pub mod attention;
pub mod decoder;
pub mod encoder;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Real;

pub use attention::{aoa, causal_mask, head_average, mh_attention, project_memory, AttentionOutput, Memory};
pub use decoder::{
    copy_maps, entity_spans, forward_teacher_forced, fuse, masked_self_aoa, multimodal_aoa, nll_loss, pointer_mix, project_vocab,
    run_decoder, sample_loss, step_outputs, CopyMaps, DecoderMemory, DecoderOutput, LayerMemory, MultiModalOutput, PointerOutput, StepOutput,
    TeacherForced,
};
pub use encoder::{
    embed_positions, encode, encode_entities, encode_text, lstm_positions, project_image, visual_selective,
    EncodedContexts,
};

/// How the two copy switches and the generator are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixRule {
    /// `(p, q, max(0, 1 − p − q))`, renormalised to sum to one.
    ClampRenormalize,
    /// `(p, q, 1 − p − q)` as written; may leave the simplex.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_mult: usize,
    pub max_positions: usize,
    pub image_patches: usize,
    pub image_dim: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    /// Entity set as a third decoder context.
    pub entity_guide: bool,
    /// Dual-source pointer-generator; when off `P* = P_s`.
    pub pointer: bool,
    pub visual_selective: bool,
    pub pointer_mix_rule: MixRule,
    /// Encoder gate and decoder attention share one image projection.
    pub share_image_projection: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 22,
            hidden: 512,
            heads: 8,
            enc_layers: 2,
            dec_layers: 2,
            ffn_mult: 4,
            max_positions: 512,
            image_patches: 49,
            image_dim: 2048,
            dropout: 0.1,
            ln_eps: 1e-5,
            entity_guide: true,
            pointer: true,
            visual_selective: true,
            pointer_mix_rule: MixRule::ClampRenormalize,
            share_image_projection: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("max_positions", self.max_positions),
            ("image_patches", self.image_patches),
            ("image_dim", self.image_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("model.{name} must be positive")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "heads ({}) must divide hidden ({})",
                self.heads, self.hidden
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Multi-head attention with the AoA refinement: query/key/value/output
/// projections plus the information (`W_a`) and gate (`W_g`) maps over
/// `[attended ; query]`.
#[derive(Clone, Debug)]
pub struct AoaParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub w_gate: ParamId,
    pub b_gate: ParamId,
    pub w_info: ParamId,
    pub b_info: ParamId,
}

#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub self_aoa: AoaParams,
    /// Pooled text attending over image patches.
    pub gate_aoa: AoaParams,
    pub w_visual: ParamId,
    pub ffn: FfnParams,
    pub norm: NormParams,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_aoa: AoaParams,
    pub image_aoa: AoaParams,
    pub article_aoa: AoaParams,
    pub entity_aoa: AoaParams,
    pub norm_ctx: NormParams,
    pub ffn: FfnParams,
    pub norm_out: NormParams,
}

#[derive(Clone, Debug)]
pub struct PointerParams {
    pub w_p: ParamId,
    pub b_p: ParamId,
    pub w_q: ParamId,
    pub b_q: ParamId,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

/// Parameter layout of the full model. Values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub word_emb: ParamId,
    pub pos_emb: ParamId,
    pub lstm: LstmParams,
    pub image_proj: Linear,
    pub dec_image_proj: Option<Linear>,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub out_proj: Linear,
    pub pointer: PointerParams,
}

struct Builder<'a, S: Real, R: Rng> {
    store: &'a mut ParamStore<S>,
    rng: &'a mut R,
}

impl<S: Real, R: Rng> Builder<'_, S, R> {
    fn p(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        self.store.init(name, shape, init, self.rng)
    }

    fn linear(&mut self, prefix: &str, w: &str, b: &str, fan_in: usize, fan_out: usize) -> (ParamId, ParamId) {
        (
            self.p(format!("{prefix}.{w}"), &[fan_in, fan_out], Init::Xavier),
            self.p(format!("{prefix}.{b}"), &[1, fan_out], Init::Zeros),
        )
    }

    fn aoa(&mut self, prefix: &str, h: usize) -> AoaParams {
        let (wq, bq) = self.linear(prefix, "wq", "bq", h, h);
        let (wk, bk) = self.linear(prefix, "wk", "bk", h, h);
        let (wv, bv) = self.linear(prefix, "wv", "bv", h, h);
        let (wo, bo) = self.linear(prefix, "wo", "bo", h, h);
        let (w_gate, b_gate) = self.linear(prefix, "w_gate", "b_gate", 2 * h, h);
        let (w_info, b_info) = self.linear(prefix, "w_info", "b_info", 2 * h, h);
        AoaParams {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            w_gate,
            b_gate,
            w_info,
            b_info,
        }
    }

    fn ffn(&mut self, prefix: &str, h: usize, inner: usize) -> FfnParams {
        let (w1, b1) = self.linear(prefix, "w1", "b1", h, inner);
        let (w2, b2) = self.linear(prefix, "w2", "b2", inner, h);
        FfnParams { w1, b1, w2, b2 }
    }

    fn norm(&mut self, prefix: &str, h: usize) -> NormParams {
        NormParams {
            gain: self.p(format!("{prefix}.gain"), &[1, h], Init::Ones),
            bias: self.p(format!("{prefix}.bias"), &[1, h], Init::Zeros),
        }
    }
}

impl Model {
    /// Lays out and initialises every parameter. Parameter order and names
    /// depend only on the configuration.
    pub fn build<S: Real, R: Rng>(config: ModelConfig, rng: &mut R) -> Result<(Model, ParamStore<S>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng,
        };
        let h = config.hidden;
        let inner = h * config.ffn_mult;

        let word_emb = b.p("embed.word".into(), &[config.vocab_size, h], Init::Normal(0.02));
        let pos_emb = b.p("embed.position".into(), &[config.max_positions, h], Init::Normal(0.02));
        let lstm = LstmParams {
            w_ih: b.p("embed.lstm.w_ih".into(), &[h, 4 * h], Init::Xavier),
            w_hh: b.p("embed.lstm.w_hh".into(), &[h, 4 * h], Init::Xavier),
            bias: b.p("embed.lstm.bias".into(), &[1, 4 * h], Init::Zeros),
        };
        let (w, bias) = b.linear("image_proj", "w", "b", config.image_dim, h);
        let image_proj = Linear { w, b: bias };
        let dec_image_proj = (!config.share_image_projection).then(|| {
            let (w, bias) = b.linear("decoder.image_proj", "w", "b", config.image_dim, h);
            Linear { w, b: bias }
        });

        let encoder = (0..config.enc_layers)
            .map(|i| {
                let pre = format!("encoder.{i}");
                EncoderLayer {
                    self_aoa: b.aoa(&format!("{pre}.self_aoa"), h),
                    gate_aoa: b.aoa(&format!("{pre}.visual.aoa"), h),
                    w_visual: b.p(format!("{pre}.visual.w_v"), &[h, h], Init::Xavier),
                    ffn: b.ffn(&format!("{pre}.ffn"), h, inner),
                    norm: b.norm(&format!("{pre}.norm"), h),
                }
            })
            .collect();
        let decoder = (0..config.dec_layers)
            .map(|i| {
                let pre = format!("decoder.{i}");
                DecoderLayer {
                    self_aoa: b.aoa(&format!("{pre}.self_aoa"), h),
                    image_aoa: b.aoa(&format!("{pre}.mm.image"), h),
                    article_aoa: b.aoa(&format!("{pre}.mm.article"), h),
                    entity_aoa: b.aoa(&format!("{pre}.mm.entity"), h),
                    norm_ctx: b.norm(&format!("{pre}.norm_ctx"), h),
                    ffn: b.ffn(&format!("{pre}.ffn"), h, inner),
                    norm_out: b.norm(&format!("{pre}.norm_out"), h),
                }
            })
            .collect();
        let (w, bias) = b.linear("decoder.out_proj", "w", "b", h, config.vocab_size);
        let out_proj = Linear { w, b: bias };
        let (w_p, b_p) = b.linear("pointer", "w_p", "b_p", 3 * h, 1);
        let (w_q, b_q) = b.linear("pointer", "w_q", "b_q", 3 * h, 1);

        let model = Model {
            config,
            word_emb,
            pos_emb,
            lstm,
            image_proj,
            dec_image_proj,
            encoder,
            decoder,
            out_proj,
            pointer: PointerParams { w_p, b_p, w_q, b_q },
        };
        Ok((model, store))
    }

    /// Image projection used by the decoder's image attention.
    pub fn decoder_image_proj(&self) -> &Linear {
        self.dec_image_proj.as_ref().unwrap_or(&self.image_proj)
    }
}
