//! Multi-head scaled dot-product attention and the Attention-on-Attention
//! block built on it.

use super::AoaParams;
use crate::error::Result;
use crate::tape::{Graph, Var};
use crate::tensor::Real;

/// Keys and values after their input projections. Computing these once
/// lets repeated queries (decoding steps) reuse them.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    pub keys: Var,
    pub values: Var,
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// `[Lq×H]` after the output projection.
    pub output: Var,
    /// Per-head `[Lq×Lk]` weights (before dropout); rows sum to one.
    pub weights: Vec<Var>,
}

pub fn project_memory<S: Real>(g: &mut Graph<S>, p: &AoaParams, keys: Var, values: Var) -> Result<Memory> {
    Ok(Memory {
        keys: g.linear(keys, p.wk, p.bk)?,
        values: g.linear(values, p.wv, p.bv)?,
    })
}

/// Scaled dot-product attention per head with scale `1/sqrt(H/heads)`.
/// `mask` is `Lq×Lk`, row-major, `true` = may attend.
pub fn mh_attention<S: Real>(
    g: &mut Graph<S>,
    p: &AoaParams,
    query: Var,
    memory: &Memory,
    heads: usize,
    mask: Option<&[bool]>,
    dropout: f64,
) -> Result<AttentionOutput> {
    let h = g.shape(query)[1];
    let dk = h / heads;
    let scale = S::of(1.0 / (dk as f64).sqrt());
    let q = g.linear(query, p.wq, p.bq)?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for head in 0..heads {
        let (a, b) = (head * dk, (head + 1) * dk);
        let (qh, kh, vh) = if heads == 1 {
            (q, memory.keys, memory.values)
        } else {
            (
                g.slice_cols(q, a, b)?,
                g.slice_cols(memory.keys, a, b)?,
                g.slice_cols(memory.values, a, b)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let w = g.softmax_rows(scores, mask)?;
        weights.push(w);
        let w = g.dropout(w, dropout)?;
        outs.push(g.matmul(w, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let output = g.linear(cat, p.wo, p.bo)?;
    Ok(AttentionOutput { output, weights })
}

/// `g = σ(W_g[v_att ; q] + b_g)`, `v' = W_a[v_att ; q] + b_a`, output `g ⊙ v'`,
/// where `q` is the unprojected query row.
pub fn aoa<S: Real>(
    g: &mut Graph<S>,
    p: &AoaParams,
    query: Var,
    memory: &Memory,
    heads: usize,
    mask: Option<&[bool]>,
    dropout: f64,
) -> Result<(Var, AttentionOutput)> {
    let att = mh_attention(g, p, query, memory, heads, mask, dropout)?;
    let cat = g.concat_cols(&[att.output, query])?;
    let gate = g.linear(cat, p.w_gate, p.b_gate)?;
    let gate = g.sigmoid(gate);
    let info = g.linear(cat, p.w_info, p.b_info)?;
    let out = g.mul(gate, info)?;
    Ok((out, att))
}

/// Mean of the per-head weight matrices.
pub fn head_average<S: Real>(g: &mut Graph<S>, weights: &[Var]) -> Result<Var> {
    let mut acc = weights[0];
    for &w in &weights[1..] {
        acc = g.add(acc, w)?;
    }
    Ok(if weights.len() == 1 {
        acc
    } else {
        g.scale(acc, S::of(1.0 / weights.len() as f64))
    })
}

pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k % n <= k / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(h: usize, heads: usize) -> (Model, ParamStore<f64>) {
        let cfg = ModelConfig {
            vocab_size: 24,
            hidden: h,
            heads,
            enc_layers: 1,
            dec_layers: 1,
            max_positions: 16,
            image_patches: 3,
            image_dim: 6,
            ..ModelConfig::default()
        };
        Model::build(cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap()
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn mat(a: &[f64], r: usize, c: usize, b: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * n];
        for i in 0..r {
            for j in 0..n {
                for k in 0..c {
                    out[i * n + j] += a[i * c + k] * b[k * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn single_key_gets_all_weight() {
        let (m, s) = setup(8, 2);
        let p = &m.encoder[0].self_aoa;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new(&s);
        let q = g.constant(rand_tensor(&mut rng, 3, 8));
        let kv = rand_tensor(&mut rng, 1, 8);
        let kv = g.constant(kv.clone());
        let mem = project_memory(&mut g, p, kv, kv).unwrap();
        let att = mh_attention(&mut g, p, q, &mem, 2, None, 0.0).unwrap();
        for w in &att.weights {
            assert!(g.value(*w).data().iter().all(|&x| x == 1.0));
        }
        // every query row receives the projected value row
        let vrow = g.value(mem.values).clone();
        let out_var = vrow_to_out(&mut g, p, &vrow);
        let expect = g.value(out_var).clone();
        for i in 0..3 {
            for j in 0..8 {
                assert!((g.value(att.output).at(i, j) - expect.at(0, j)).abs() < 1e-12);
            }
        }
    }

    fn vrow_to_out(g: &mut Graph<f64>, p: &AoaParams, v: &Tensor<f64>) -> Var {
        let v = g.constant(v.clone());
        g.linear(v, p.wo, p.bo).unwrap()
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let (m, s) = setup(8, 2);
        let p = &m.encoder[0].self_aoa;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new(&s);
        let q = g.constant(rand_tensor(&mut rng, 2, 8));
        let row = rand_tensor(&mut rng, 1, 8);
        let kv = g.constant(Tensor::new(vec![4, 8], row.data().repeat(4)).unwrap());
        let mem = project_memory(&mut g, p, kv, kv).unwrap();
        let att = mh_attention(&mut g, p, q, &mem, 2, None, 0.0).unwrap();
        for w in &att.weights {
            assert!(g.value(*w).data().iter().all(|&x| (x - 0.25).abs() < 1e-12));
        }
    }

    #[test]
    fn weight_rows_sum_to_one() {
        let (m, s) = setup(8, 4);
        let p = &m.encoder[0].self_aoa;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new(&s);
        let q = g.constant(rand_tensor(&mut rng, 3, 8));
        let kv = g.constant(rand_tensor(&mut rng, 4, 8));
        let mem = project_memory(&mut g, p, kv, kv).unwrap();
        let att = mh_attention(&mut g, p, q, &mem, 4, None, 0.0).unwrap();
        assert_eq!(att.weights.len(), 4);
        for w in &att.weights {
            let t = g.value(*w);
            assert_eq!(t.shape(), &[3, 4]);
            for i in 0..3 {
                let s: f64 = t.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(t.row(i).iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn saturated_gate_silences_output() {
        let (m, mut s) = setup(8, 2);
        let p = m.encoder[0].self_aoa.clone();
        s.get_mut(p.b_gate).data_mut().iter_mut().for_each(|b| *b = -1e6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new(&s);
        let q = g.constant(rand_tensor(&mut rng, 3, 8));
        let mem = project_memory(&mut g, &p, q, q).unwrap();
        let (out, _) = aoa(&mut g, &p, q, &mem, 2, None, 0.0).unwrap();
        assert!(g.value(out).data().iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn projector_and_open_gate_pass_attention_through() {
        let (m, mut s) = setup(8, 2);
        let p = m.encoder[0].self_aoa.clone();
        let proj: Vec<f64> = (0..16 * 8).map(|k| if k / 8 == k % 8 { 1.0 } else { 0.0 }).collect();
        s.get_mut(p.w_info).data_mut().copy_from_slice(&proj);
        s.get_mut(p.b_info).data_mut().iter_mut().for_each(|b| *b = 0.0);
        s.get_mut(p.b_gate).data_mut().iter_mut().for_each(|b| *b = 1e6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new(&s);
        let q = g.constant(rand_tensor(&mut rng, 3, 8));
        let kv = g.constant(rand_tensor(&mut rng, 5, 8));
        let mem = project_memory(&mut g, &p, kv, kv).unwrap();
        let (out, att) = aoa(&mut g, &p, q, &mem, 2, None, 0.0).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(att.output)) < 1e-12);
    }

    /// Straight-line evaluation of the AoA equations with plain loops.
    #[test]
    fn aoa_matches_straight_line_oracle() {
        let (h, heads, lq, lk) = (8, 2, 3, 4);
        let (m, s) = setup(h, heads);
        let p = &m.decoder[0].article_aoa;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let qx = rand_tensor(&mut rng, lq, h);
        let kx = rand_tensor(&mut rng, lk, h);

        let w = |id| s.get(id).data().to_vec();
        let affine = |x: &[f64], r: usize, c: usize, wid, bid, n: usize| {
            let mut y = mat(x, r, c, &w(wid), n);
            let b = w(bid);
            for i in 0..r {
                for j in 0..n {
                    y[i * n + j] += b[j];
                }
            }
            y
        };
        let qp = affine(qx.data(), lq, h, p.wq, p.bq, h);
        let kp = affine(kx.data(), lk, h, p.wk, p.bk, h);
        let vp = affine(kx.data(), lk, h, p.wv, p.bv, h);
        let dk = h / heads;
        let mut cat = vec![0.0; lq * h];
        for hd in 0..heads {
            for i in 0..lq {
                let mut sc: Vec<f64> = (0..lk)
                    .map(|j| (0..dk).map(|d| qp[i * h + hd * dk + d] * kp[j * h + hd * dk + d]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let mx = sc.iter().cloned().fold(f64::MIN, f64::max);
                sc.iter_mut().for_each(|v| *v = (*v - mx).exp());
                let z: f64 = sc.iter().sum();
                for d in 0..dk {
                    cat[i * h + hd * dk + d] = (0..lk).map(|j| sc[j] / z * vp[j * h + hd * dk + d]).sum();
                }
            }
        }
        let vatt = affine(&cat, lq, h, p.wo, p.bo, h);
        let mut joined = vec![0.0; lq * 2 * h];
        for i in 0..lq {
            joined[i * 2 * h..i * 2 * h + h].copy_from_slice(&vatt[i * h..(i + 1) * h]);
            joined[i * 2 * h + h..(i + 1) * 2 * h].copy_from_slice(qx.row(i));
        }
        let gate = affine(&joined, lq, 2 * h, p.w_gate, p.b_gate, h);
        let info = affine(&joined, lq, 2 * h, p.w_info, p.b_info, h);
        let expect: Vec<f64> = gate.iter().zip(&info).map(|(&a, &b)| b / (1.0 + (-a).exp())).collect();

        let mut g = Graph::new(&s);
        let q = g.constant(qx);
        let k = g.constant(kx);
        let mem = project_memory(&mut g, p, k, k).unwrap();
        let (out, _) = aoa(&mut g, p, q, &mem, heads, None, 0.0).unwrap();
        for (a, b) in g.value(out).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn causal_mask_shape() {
        assert_eq!(causal_mask(1), vec![true]);
        assert_eq!(causal_mask(3), vec![true, false, false, true, true, false, true, true, true]);
    }
}
