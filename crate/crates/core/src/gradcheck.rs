//! Central-difference gradient checking in 64-bit precision.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{encode, forward_teacher_forced, CopyMaps, Model, ModelConfig};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates sampled per parameter tensor; `usize::MAX` checks all.
    pub samples_per_param: usize,
    /// Lower bound on the relative-error denominator, so gradients below it
    /// are compared absolutely (to `tol · denom_floor`). In a loss built
    /// from tens of thousands of f64 operations the central difference
    /// carries roughly 1e-9 of rounding noise at `eps = 1e-4`.
    pub denom_floor: f64,
    /// Combine central differences at `eps` and `2·eps` to cancel the
    /// second-order truncation term.
    pub richardson: bool,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-4,
            tol: 1e-6,
            samples_per_param: 8,
            denom_floor: 1e-3,
            richardson: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_coordinate: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }

    /// Worst relative error among parameters whose name contains `pattern`.
    pub fn max_for(&self, pattern: &str) -> Option<f64> {
        self.params
            .iter()
            .filter(|p| p.name.contains(pattern))
            .map(|p| p.max_rel_error)
            .reduce(f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_loss<F>(params: &ParamStore<f64>, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let l = loss_fn(&mut g)?;
    let v = g.value(l).item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss {v}")));
    }
    Ok(v)
}

/// Compares tape gradients with central differences on a sampled subset of
/// coordinates of every parameter selected by `filter`. `loss_fn` must be
/// deterministic (build an inference graph; no dropout).
pub fn finite_diff_check<F>(
    params: &ParamStore<f64>,
    loss_fn: F,
    filter: impl Fn(&str) -> bool,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let l = loss_fn(&mut g)?;
        if !g.value(l).item().is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        g.backward(l)?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut work = params.clone();
    let mut report = Vec::new();
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let name = params.name(id).to_string();
        if !filter(&name) {
            continue;
        }
        let n = params.get(id).len();
        if n == 0 {
            continue;
        }
        let coords: Vec<usize> = if config.samples_per_param >= n {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, config.samples_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let mut check = ParamCheck {
            name,
            checked: coords.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_coordinate: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for &c in &coords {
            let orig = params.get(id).data()[c];
            let mut central = |h: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[c] = orig + h;
                let plus = eval_loss(&work, &loss_fn)?;
                work.get_mut(id).data_mut()[c] = orig - h;
                let minus = eval_loss(&work, &loss_fn)?;
                work.get_mut(id).data_mut()[c] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let d1 = central(config.eps)?;
            let numeric = if config.richardson {
                let d2 = central(2.0 * config.eps)?;
                (4.0 * d1 - d2) / 3.0
            } else {
                d1
            };
            let a = analytic.get(id).data()[c];
            let rel = relative_error(a, numeric, config.denom_floor);
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_coordinate = c;
                check.worst_analytic = a;
                check.worst_numeric = numeric;
            }
        }
        report.push(check);
    }
    let max_rel_error = report.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: report,
        max_rel_error,
        tol: config.tol,
    })
}

/// Parameter group of a model parameter path, used to summarise reports.
pub fn param_group(name: &str) -> &'static str {
    if name.starts_with("embed.lstm") {
        "position_lstm"
    } else if name.starts_with("embed.") {
        "embeddings"
    } else if name.contains(".visual.") {
        "visual_selective"
    } else if name.starts_with("encoder.") && name.contains(".self_aoa.") {
        "encoder_aoa"
    } else if name.starts_with("encoder.") {
        "encoder_ffn"
    } else if name.starts_with("decoder.") && name.contains(".self_aoa.") {
        "masked_self_aoa"
    } else if name.contains(".mm.") {
        "multimodal_aoa"
    } else if name.starts_with("pointer.") {
        "pointer"
    } else if name.contains("image_proj") || name.contains("out_proj") {
        "projections"
    } else {
        "fusion_ffn"
    }
}

/// Worst relative error per parameter group.
pub fn group_summary(report: &GradCheckReport) -> BTreeMap<&'static str, f64> {
    let mut out = BTreeMap::new();
    for p in &report.params {
        let e = out.entry(param_group(&p.name)).or_insert(0.0f64);
        *e = e.max(p.max_rel_error);
    }
    out
}

/// Size of the synthetic instance used by [`model_gradcheck`].
#[derive(Clone, Debug)]
pub struct ModelCheckSetup {
    pub config: ModelConfig,
    pub article: Vec<usize>,
    pub spans: Vec<(usize, usize)>,
    /// BOS, three tokens, EOS.
    pub caption: Vec<usize>,
    /// Pointer switch biases; chosen away from `p + q = 1` where the clamp
    /// has a kink.
    pub pointer_bias: (f64, f64),
    /// Standard deviation of the random values written into every bias
    /// and norm offset. Zero-initialised biases put ReLU inputs within
    /// `eps` of the kink, where central differences are meaningless.
    pub bias_std: f64,
    pub model_seed: u64,
}

impl Default for ModelCheckSetup {
    fn default() -> Self {
        ModelCheckSetup {
            config: ModelConfig {
                vocab_size: 24,
                hidden: 8,
                heads: 2,
                enc_layers: 1,
                dec_layers: 2,
                ffn_mult: 2,
                max_positions: 16,
                image_patches: 3,
                image_dim: 6,
                dropout: 0.0,
                ..ModelConfig::default()
            },
            article: vec![5, 9, 10, 11, 6, 12, 7],
            spans: vec![(1, 2), (2, 4)],
            caption: vec![1, 9, 8, 23, 2],
            pointer_bias: (-0.8, -0.6),
            bias_std: 0.5,
            model_seed: 7,
        }
    }
}

/// Gradient check of the full encoder + decoder + pointer loss on a small
/// synthetic sample.
pub fn model_gradcheck(setup: &ModelCheckSetup, config: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(setup.model_seed);
    let (model, mut params) = Model::build::<f64, _>(setup.config.clone(), &mut rng)?;
    let bias_ids: Vec<ParamId> = params
        .iter()
        .filter(|(_, name, t)| t.rows() == 1 && !name.starts_with("embed.") && !name.ends_with(".gain"))
        .map(|(id, _, _)| id)
        .collect();
    for id in bias_ids {
        for v in params.get_mut(id).data_mut() {
            *v = setup.bias_std * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    params.get_mut(model.pointer.b_p).data_mut()[0] = setup.pointer_bias.0;
    params.get_mut(model.pointer.b_q).data_mut()[0] = setup.pointer_bias.1;
    let k = setup.config.image_patches;
    let d = setup.config.image_dim;
    let normal = rand_distr::StandardNormal;
    let features = Tensor::new(vec![k, d], (0..k * d).map(|_| rng.sample::<f64, _>(normal)).collect())?;
    let maps = CopyMaps {
        article: setup.article.clone(),
        entities: setup.spans.iter().map(|&(s, _)| setup.article[s]).collect(),
    };
    finite_diff_check(
        &params,
        |g| {
            let ctx = encode(g, &model, &setup.article, &setup.spans, &features, setup.caption.len())?;
            Ok(forward_teacher_forced(g, &model, &ctx, &setup.caption, &maps)?.loss)
        },
        |_| true,
        config,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let mut s = ParamStore::<f64>::new();
        let w = s.insert("w", Tensor::row_vector(vec![0.5, -1.25, 2.0]));
        let report = finite_diff_check(
            &s,
            |g| {
                let v = g.param(w);
                let sq = g.mul(v, v)?;
                let sq = g.scale(sq, 3.0);
                Ok(g.sum(sq))
            },
            |_| true,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert!(report.passed());
    }

    // debug builds trip the per-op finiteness assertion first
    #[test]
    #[cfg_attr(debug_assertions, should_panic(expected = "non-finite"))]
    fn non_finite_loss_is_error() {
        let mut s = ParamStore::<f64>::new();
        let w = s.insert("w", Tensor::row_vector(vec![1e300]));
        let r = finite_diff_check(
            &s,
            |g| {
                let v = g.param(w);
                let sq = g.mul(v, v)?;
                Ok(g.sum(sq))
            },
            |_| true,
            &GradCheckConfig::default(),
        );
        assert!(r.is_err());
    }
}
